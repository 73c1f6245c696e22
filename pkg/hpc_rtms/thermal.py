"""Lattice RC thermal model of a 4x4 test-chip grid."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from logging import Logger, getLogger
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from hpc_rtms.platform import Device

ROWS = 4
COLS = 4
CELLS = ROWS * COLS
MAX_CELL_POWER_W = 12.0
MAX_TOTAL_POWER_W = MAX_CELL_POWER_W * CELLS

# Placeholder constants, not measured values.
DEFAULT_AMBIENT_K = 318.0
DEFAULT_VERTICAL_CONDUCTANCE = 0.8
DEFAULT_LATERAL_CONDUCTANCE = 2.0
DEFAULT_HEAT_CAPACITY = 0.5
STEP_ROUNDING = 1e-9

_logger: Logger = getLogger(__name__)


class ThermalError(ValueError):
    """Raised for invalid thermal parameters or power maps."""


class ThermalStabilityError(ThermalError):
    """Raised when an explicit step would be numerically unstable."""

    def __init__(self, dt: float, bound: float) -> None:
        super().__init__(f"Time step {dt} s is not below the stability bound {bound:.6g} s")
        self.dt = dt
        self.bound = bound


@lru_cache(maxsize=None)
def _conductance_matrix(lateral: float, vertical: float) -> np.ndarray:
    matrix = np.zeros((CELLS, CELLS))
    for row in range(ROWS):
        for col in range(COLS):
            cell = row * COLS + col
            matrix[cell, cell] += vertical
            for d_row, d_col in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                n_row, n_col = row + d_row, col + d_col
                if 0 <= n_row < ROWS and 0 <= n_col < COLS:
                    matrix[cell, cell] += lateral
                    matrix[cell, n_row * COLS + n_col] -= lateral
    matrix.setflags(write=False)
    return matrix


@lru_cache(maxsize=None)
def _largest_eigenvalue(lateral: float, vertical: float) -> float:
    return float(np.linalg.eigvalsh(_conductance_matrix(lateral, vertical)).max())


def _as_grid(values: Sequence[float] | np.ndarray, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=float).reshape(-1)
    if array.size != CELLS:
        raise ThermalError(f"{name} must have {CELLS} entries, got {array.size}")
    return array


@dataclass(frozen=True, eq=False)
class ThermalGrid:
    """Per-cell power and temperature of a 4x4 grid, row-major."""

    power: np.ndarray = field(default_factory=lambda: np.zeros(CELLS))
    temperature: Optional[np.ndarray] = None
    ambient: float = DEFAULT_AMBIENT_K
    lateral_conductance: float = DEFAULT_LATERAL_CONDUCTANCE
    vertical_conductance: float = DEFAULT_VERTICAL_CONDUCTANCE
    heat_capacity: float = DEFAULT_HEAT_CAPACITY

    def __post_init__(self) -> None:
        power = _as_grid(self.power, "power")
        if np.any(power < 0) or np.any(power > MAX_CELL_POWER_W + 1e-12):
            raise ThermalError(f"Cell powers must be within [0, {MAX_CELL_POWER_W}] W")
        if power.sum() > MAX_TOTAL_POWER_W + 1e-9:
            raise ThermalError(f"Total power {power.sum()} W exceeds {MAX_TOTAL_POWER_W} W")
        if self.lateral_conductance <= 0 or self.vertical_conductance <= 0:
            raise ThermalError("Conductances must be positive")
        if self.heat_capacity <= 0:
            raise ThermalError("Heat capacity must be positive")
        temperature = (
            np.full(CELLS, float(self.ambient))
            if self.temperature is None
            else _as_grid(self.temperature, "temperature")
        )
        object.__setattr__(self, "power", power)
        object.__setattr__(self, "temperature", temperature)

    @property
    def conductance_matrix(self) -> np.ndarray:
        """Matrix G such that the heat leaving each cell is G @ (T - ambient); shared and read-only."""
        return _conductance_matrix(self.lateral_conductance, self.vertical_conductance)

    @property
    def total_power(self) -> float:
        """Sum of cell powers in watts."""
        return float(self.power.sum())

    def stability_bound(self) -> float:
        """Largest dt for which the explicit update is stable; computed once per set of grid constants."""
        largest = _largest_eigenvalue(self.lateral_conductance, self.vertical_conductance)
        return 2.0 * self.heat_capacity / largest

    def with_power(self, power: Sequence[float] | np.ndarray) -> "ThermalGrid":
        """Copy of the grid with a new power map and the current temperatures."""
        return replace(self, power=_as_grid(power, "power"), temperature=self.temperature.copy())

    def with_device_power(
        self,
        devices: Sequence[Device],
        busy_ids: Iterable[str],
        assignment: Optional[Mapping[str, int]] = None,
    ) -> "ThermalGrid":
        """Map device powers onto cells: busy devices draw busy power, the rest idle power.

        Without an explicit assignment devices go round-robin over the cells. Cell power is clipped at the
        per-cell limit.
        """
        busy = set(busy_ids)
        power = np.zeros(CELLS)
        for index, device in enumerate(devices):
            cell = assignment[device.id] if assignment and device.id in assignment else index % CELLS
            power[cell] += device.busy_w if device.id in busy else device.idle_w
        return self.with_power(np.minimum(power, MAX_CELL_POWER_W))

    def energy_balance(self, temperature: Optional[np.ndarray] = None) -> tuple[float, float]:
        """Injected power and power dissipated vertically for a temperature map."""
        temps = self.temperature if temperature is None else temperature
        dissipated = float(self.vertical_conductance * (temps - self.ambient).sum())
        return self.total_power, dissipated


def steady_state_temp(grid: ThermalGrid) -> np.ndarray:
    """Solve the linear thermal network for the 16 steady-state cell temperatures."""
    rise = np.linalg.solve(grid.conductance_matrix, grid.power)
    return grid.ambient + rise


def step_temp(grid: ThermalGrid, dt: float) -> ThermalGrid:
    """Advance temperatures by one explicit first-order RC step."""
    if dt <= 0:
        raise ThermalError(f"Time step must be positive, got {dt}")
    bound = grid.stability_bound()
    if dt >= bound:
        _logger.critical(f"Rejected thermal step dt={dt}, bound={bound}")
        raise ThermalStabilityError(dt, bound)
    flow = grid.power - grid.conductance_matrix @ (grid.temperature - grid.ambient)
    return replace(grid, temperature=grid.temperature + dt / grid.heat_capacity * flow)


def advance_temp(grid: ThermalGrid, duration: float, dt: float = 1e-3) -> ThermalGrid:
    """Advance by `duration` seconds in steps of `dt` (1 ms matches a 1 kHz sensor rate).

    A remainder shorter than `dt` is integrated with one final partial step.
    """
    if duration < 0 or dt <= 0:
        raise ThermalError(f"Need duration >= 0 and dt > 0, got duration={duration}, dt={dt}")
    steps = int(math.floor(duration / dt + STEP_ROUNDING))
    for _ in range(steps):
        grid = step_temp(grid, dt)
    remainder = duration - steps * dt
    if remainder > STEP_ROUNDING * dt:
        grid = step_temp(grid, remainder)
    return grid
