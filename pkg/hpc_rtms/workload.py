"""Application model (kernels, recipes, timing requirements) and random workload generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from logging import Logger, getLogger
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from hpc_rtms.platform import Device
from hpc_rtms.types import DeviceKind, JobClass

DEFAULT_DEADLINE_PROBABILITY = 1.0 - 1e-6
DEFAULT_JITTER_SCALE = 0.05
T_IDEAL_RANGE = (0.5, 2.0)
WORKLOAD_CSV_COLUMNS = ["job_id", "arrival_s", "t_ideal_s", "class", "deadline_s", "p"]

_logger: Logger = getLogger(__name__)


class WorkloadError(ValueError):
    """Raised for invalid workload parameters or job definitions."""


@dataclass(frozen=True)
class TimingRequirement:
    """Relative deadline and the probability of meeting it."""

    deadline: float
    p: float = DEFAULT_DEADLINE_PROBABILITY

    def __post_init__(self) -> None:
        if self.deadline <= 0:
            raise WorkloadError(f"Deadline must be positive, got {self.deadline}")
        if not 0.0 < self.p < 1.0:
            raise WorkloadError(f"Deadline probability must be in (0, 1), got {self.p}")

    @property
    def exceedance(self) -> float:
        """Tolerated deadline-miss probability 1 - p."""
        return 1.0 - self.p


PRESETS: Dict[str, float] = {
    "urgent-nwp": 900.0,
    "batch-nwp": 86400.0,
}

CLASS_PRESETS: Dict[JobClass, str] = {
    JobClass.URGENT: "urgent-nwp",
    JobClass.BATCH: "batch-nwp",
}


def preset(name: str, p: float = DEFAULT_DEADLINE_PROBABILITY) -> TimingRequirement:
    """Timing requirement of a named delivery regime."""
    if name not in PRESETS:
        raise WorkloadError(f"Unknown timing preset {name!r}, expected one of {sorted(PRESETS)}")
    return TimingRequirement(deadline=PRESETS[name], p=p)


@dataclass(frozen=True)
class JitterModel:
    """Multiplicative execution-time noise: time = nominal * (1 + jitter)."""

    kind: str = "exponential"
    scale: float = DEFAULT_JITTER_SCALE

    def __post_init__(self) -> None:
        if self.kind not in ("none", "exponential", "uniform"):
            raise WorkloadError(f"Unknown jitter model {self.kind!r}")
        if self.scale < 0:
            raise WorkloadError(f"Jitter scale must be >= 0, got {self.scale}")

    @property
    def mean(self) -> float:
        """Expected value of the jitter term."""
        if self.kind == "none" or self.scale == 0:
            return 0.0
        if self.kind == "exponential":
            return self.scale
        return self.scale / 2.0

    def draw(self, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray | float:
        """Draw jitter terms."""
        if self.kind == "none" or self.scale == 0:
            return 0.0 if size is None else np.zeros(size)
        if self.kind == "exponential":
            return rng.exponential(self.scale, size=size)
        return rng.uniform(0.0, self.scale, size=size)


NO_JITTER = JitterModel(kind="none", scale=0.0)


@dataclass(frozen=True)
class Implementation:
    """One implementation of a kernel for a device kind."""

    kind: DeviceKind
    base_time: float
    jitter: JitterModel = field(default_factory=JitterModel)

    def __post_init__(self) -> None:
        if self.base_time <= 0:
            raise WorkloadError(f"Implementation base time must be positive, got {self.base_time}")

    def mean_time(self, device: Device) -> float:
        """Expected execution time on a device."""
        return self.base_time / device.speed_factor * (1.0 + self.jitter.mean)


@dataclass(frozen=True)
class KernelSpec:
    """A kernel and its alternative implementations."""

    kernel_id: str
    implementations: Tuple[Implementation, ...]

    def __post_init__(self) -> None:
        if not self.implementations:
            raise WorkloadError(f"Kernel {self.kernel_id} has no implementation")

    def implementation_for(self, kind: DeviceKind) -> Optional[Implementation]:
        """Implementation targeting a device kind, if any."""
        for implementation in self.implementations:
            if implementation.kind is kind:
                return implementation
        return None

    @property
    def kinds(self) -> List[DeviceKind]:
        """Device kinds with an implementation."""
        return [implementation.kind for implementation in self.implementations]


@dataclass(frozen=True)
class RecipeEntry:
    """Requirements declared for one kernel."""

    kernel_id: str
    preferred_kinds: Tuple[DeviceKind, ...] = ()
    memory_mb: float = 0.0


@dataclass(frozen=True)
class Recipe:
    """Per-kernel requirement declarations of an application."""

    application: str
    entries: Tuple[RecipeEntry, ...]

    def covers(self, kernels: Sequence[KernelSpec]) -> bool:
        """True when every kernel has a recipe entry."""
        declared = {entry.kernel_id for entry in self.entries}
        return all(kernel.kernel_id in declared for kernel in kernels)


@dataclass(frozen=True)
class Job:
    """An application instance: a sequential chain of kernels with a timing requirement."""

    job_id: str
    arrival: float
    kernels: Tuple[KernelSpec, ...]
    recipe: Recipe
    t_ideal: float
    timing: TimingRequirement
    job_class: JobClass = JobClass.BATCH

    def __post_init__(self) -> None:
        if self.t_ideal <= 0:
            raise WorkloadError(f"Job {self.job_id}: T_ideal must be positive, got {self.t_ideal}")
        if self.arrival < 0:
            raise WorkloadError(f"Job {self.job_id}: arrival must be >= 0")
        if not self.kernels:
            raise WorkloadError(f"Job {self.job_id} has no kernel")
        if not self.recipe.covers(self.kernels):
            raise WorkloadError(f"Job {self.job_id}: recipe does not cover every kernel")

    def mapped(self, t_ideal: float) -> "Job":
        """Copy of the job with T_ideal fixed by a mapping."""
        return replace(self, t_ideal=t_ideal)


@dataclass(frozen=True)
class WorkloadTrace:
    """Jobs sorted by arrival over a time window."""

    jobs: Tuple[Job, ...]
    window: float

    def __len__(self) -> int:
        return len(self.jobs)

    def to_frame(self) -> pd.DataFrame:
        """Tabular view with the workload CSV columns."""
        rows = [
            {
                "job_id": job.job_id,
                "arrival_s": job.arrival,
                "t_ideal_s": job.t_ideal,
                "class": job.job_class.value,
                "deadline_s": job.timing.deadline,
                "p": job.timing.p,
            }
            for job in self.jobs
        ]
        return pd.DataFrame(rows, columns=WORKLOAD_CSV_COLUMNS)

    def to_csv(self, path: Path) -> None:
        """Write the workload CSV."""
        self.to_frame().to_csv(path, index=False, float_format="%.12g")


@dataclass(frozen=True)
class WorkloadParams:
    """Parameters of random workload generation."""

    mean_t_ideal: float = 100.0
    window_factor: float = 200.0
    arrival_rate: Optional[float] = None
    class_mix: Mapping[JobClass, float] = field(
        default_factory=lambda: {JobClass.URGENT: 0.2, JobClass.BATCH: 0.8}
    )
    max_kernels: int = 3
    jitter: JitterModel = field(default_factory=JitterModel)
    kinds: Tuple[DeviceKind, ...] = tuple(DeviceKind)

    @property
    def window(self) -> float:
        """Length of the arrival window in seconds."""
        return self.window_factor * self.mean_t_ideal

    @property
    def rate(self) -> float:
        """Arrival rate; defaults to one job per mean T_ideal."""
        return 1.0 / self.mean_t_ideal if self.arrival_rate is None else self.arrival_rate


def _uniform_kernels(job_id: str, t_ideal: float, shares: Sequence[float], params: WorkloadParams) -> tuple:
    kernels = tuple(
        KernelSpec(
            kernel_id=f"{job_id}-k{index}",
            implementations=tuple(
                Implementation(kind=kind, base_time=share * t_ideal, jitter=params.jitter) for kind in params.kinds
            ),
        )
        for index, share in enumerate(shares)
    )
    recipe = Recipe(
        application=job_id,
        entries=tuple(RecipeEntry(kernel_id=kernel.kernel_id, preferred_kinds=params.kinds) for kernel in kernels),
    )
    return kernels, recipe


def generate_workload(rng: np.random.Generator, params: WorkloadParams) -> WorkloadTrace:
    """Poisson arrivals over the window, log-uniform T_ideal, classes drawn from the mix."""
    window = params.window
    if params.mean_t_ideal <= 0 or window <= 0:
        raise WorkloadError(f"Empty workload window ({params.window_factor} x {params.mean_t_ideal} s)")
    rate = params.rate
    if rate < 0:
        raise WorkloadError(f"Arrival rate must be >= 0, got {rate}")
    mix_total = sum(params.class_mix.values())
    if any(value < 0 for value in params.class_mix.values()) or not math.isclose(mix_total, 1.0, abs_tol=1e-9):
        raise WorkloadError(f"Class mix must be non-negative and sum to 1, got {dict(params.class_mix)}")
    if rate == 0:
        return WorkloadTrace(jobs=(), window=window)

    arrivals: List[float] = []
    elapsed = 0.0
    chunk = max(16, int(rate * window * 1.1) + 16)
    while elapsed <= window:
        for gap in rng.exponential(1.0 / rate, size=chunk):
            elapsed += gap
            if elapsed > window:
                break
            arrivals.append(elapsed)

    classes = list(params.class_mix)
    weights = np.array([params.class_mix[job_class] for job_class in classes])
    low, high = T_IDEAL_RANGE
    jobs = []
    for index, arrival in enumerate(arrivals):
        job_id = f"job-{index:05d}"
        t_ideal = params.mean_t_ideal * math.exp(rng.uniform(math.log(low), math.log(high)))
        job_class = classes[int(rng.choice(len(classes), p=weights))]
        n_kernels = int(rng.integers(1, params.max_kernels + 1))
        shares = rng.dirichlet(np.ones(n_kernels)) if n_kernels > 1 else np.ones(1)
        kernels, recipe = _uniform_kernels(job_id, t_ideal, shares, params)
        jobs.append(
            Job(
                job_id=job_id,
                arrival=arrival,
                kernels=kernels,
                recipe=recipe,
                t_ideal=t_ideal,
                timing=preset(CLASS_PRESETS[job_class]),
                job_class=job_class,
            )
        )
    _logger.info(f"Generated {len(jobs)} jobs over a {window:.0f} s window")
    return WorkloadTrace(jobs=tuple(jobs), window=window)


def read_workload_csv(path: Path, params: Optional[WorkloadParams] = None) -> WorkloadTrace:
    """Read a workload CSV; every imported job gets a single kernel implemented for every device kind."""
    params = params or WorkloadParams()
    frame = pd.read_csv(path, dtype={"job_id": str, "class": str})
    missing = [column for column in WORKLOAD_CSV_COLUMNS if column not in frame.columns]
    if missing:
        raise WorkloadError(f"Workload CSV {path} lacks columns {missing}")
    jobs = []
    for row in frame.sort_values("arrival_s", kind="stable").to_dict("records"):
        job_id = str(row["job_id"])
        kernels, recipe = _uniform_kernels(job_id, float(row["t_ideal_s"]), [1.0], params)
        jobs.append(
            Job(
                job_id=job_id,
                arrival=float(row["arrival_s"]),
                kernels=kernels,
                recipe=recipe,
                t_ideal=float(row["t_ideal_s"]),
                timing=TimingRequirement(deadline=float(row["deadline_s"]), p=float(row["p"])),
                job_class=JobClass(row["class"]),
            )
        )
    window = max((job.arrival for job in jobs), default=0.0)
    return WorkloadTrace(jobs=tuple(jobs), window=max(window, params.window))


def sample_exec_time(
    kernel: KernelSpec,
    implementation: Implementation,
    device: Device,
    rng: np.random.Generator,
) -> float:
    """Draw one execution time of a kernel implementation on a device."""
    if implementation.kind is not device.kind:
        raise WorkloadError(
            f"Kernel {kernel.kernel_id}: {implementation.kind.value} implementation cannot run on "
            f"{device.kind.value} device {device.id}"
        )
    return implementation.base_time / device.speed_factor * (1.0 + float(implementation.jitter.draw(rng)))


def sample_exec_times(
    kernel: KernelSpec,
    implementation: Implementation,
    device: Device,
    rng: np.random.Generator,
    size: int,
) -> np.ndarray:
    """Vectorised `sample_exec_time`."""
    if implementation.kind is not device.kind:
        raise WorkloadError(f"Kernel {kernel.kernel_id}: kind mismatch with device {device.id}")
    nominal = implementation.base_time / device.speed_factor
    return nominal * (1.0 + np.asarray(implementation.jitter.draw(rng, size=size), dtype=float))
