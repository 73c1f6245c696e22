"""Prediction-error sweep: every (policy, epsilon) cell over paired replicas."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from logging import Logger, getLogger
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from hpc_rtms.calibration import ReliabilityExperiment, ReliabilityScenario
from hpc_rtms.reliability import CheckpointPolicy

SWEEP_CSV_COLUMNS = [
    "policy",
    "epsilon",
    "replicas",
    "median_overhead",
    "q1_overhead",
    "q3_overhead",
    "iqr_overhead",
    "deadline_miss_fraction",
]

_logger: Logger = getLogger(__name__)


@dataclass(frozen=True)
class SweepCell:
    """One policy at one prediction error bound."""

    policy: CheckpointPolicy
    epsilon: float


@dataclass(frozen=True)
class CellResult:
    """Per-replica outcomes of a cell, in replica order."""

    cell: SweepCell
    overheads: Tuple[float, ...]
    miss_fractions: Tuple[float, ...]

    @property
    def median_overhead(self) -> float:
        return float(np.median(self.overheads))

    def as_row(self) -> dict:
        """Row of sweep.csv."""
        q1, q3 = np.percentile(self.overheads, [25.0, 75.0])
        return {
            "policy": self.cell.policy.name,
            "epsilon": self.cell.epsilon,
            "replicas": len(self.overheads),
            "median_overhead": self.median_overhead,
            "q1_overhead": float(q1),
            "q3_overhead": float(q3),
            "iqr_overhead": float(q3 - q1),
            "deadline_miss_fraction": float(np.mean(self.miss_fractions)),
        }


@dataclass(frozen=True)
class SweepResult:
    """Every cell of a sweep, in (policy, epsilon) order."""

    rate: float
    cells: Tuple[CellResult, ...]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([cell.as_row() for cell in self.cells], columns=SWEEP_CSV_COLUMNS)

    def cell(self, policy: str, epsilon: float) -> CellResult:
        """Result of one cell."""
        for result in self.cells:
            if result.cell.policy.name == policy and result.cell.epsilon == epsilon:
                return result
        raise KeyError(f"No sweep cell for {policy} at epsilon={epsilon}")


def sweep_cells(policies: Sequence[CheckpointPolicy], epsilon_grid: Sequence[float]) -> List[SweepCell]:
    """Cells in deterministic order: policies outer, error bounds inner."""
    return [SweepCell(policy=policy, epsilon=epsilon) for policy in policies for epsilon in epsilon_grid]


def _run_cell(experiment: ReliabilityExperiment, cell: SweepCell, rate: float) -> CellResult:
    results = experiment.run(cell.policy, cell.epsilon, rate)
    _logger.info(f"Sweep cell {cell.policy.name} eps={cell.epsilon:g} done")
    return CellResult(
        cell=cell,
        overheads=tuple(result.overhead for result in results),
        miss_fractions=tuple(result.deadline_miss_fraction for result in results),
    )


def _cell_worker(arguments: Tuple[ReliabilityScenario, SweepCell, float]) -> CellResult:
    scenario, cell, rate = arguments
    return _run_cell(ReliabilityExperiment(scenario), cell, rate)


def run_sweep(
    scenario: ReliabilityScenario,
    policies: Sequence[CheckpointPolicy],
    epsilon_grid: Sequence[float],
    rate: float,
    workers: Optional[int] = None,
) -> SweepResult:
    """Run every cell with paired seeds; with several workers cells run in parallel and merge in cell order."""
    cells = sweep_cells(policies, epsilon_grid)
    _logger.info(f"Sweeping {len(cells)} cells x {scenario.replicas} replicas at rate {rate:.6g}/s")
    if workers is not None and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_cell_worker, [(scenario, cell, rate) for cell in cells]))
    else:
        experiment = ReliabilityExperiment(scenario)
        results = [_run_cell(experiment, cell, rate) for cell in cells]
    return SweepResult(rate=rate, cells=tuple(results))
