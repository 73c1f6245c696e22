"""Custom type definitions shared across hpc-rtms modules."""

from __future__ import annotations

from enum import Enum

from typing_extensions import Self


class DeviceKind(str, Enum):
    """Closed enumeration of the processing-unit kinds a cluster node can expose."""

    CPU = "CPU"
    GPU = "GPU"
    MANYCORE = "MANYCORE"
    FPGA = "FPGA"

    @classmethod
    def parse(cls, value: str) -> Self:
        """Parse a device kind, case-insensitively."""
        try:
            return cls(value.upper())
        except ValueError as exception:
            allowed = ", ".join(member.value for member in cls)
            raise ValueError(f"Unknown device kind {value!r}, expected one of {allowed}") from exception


class JobClass(str, Enum):
    """Deadline class of a job."""

    URGENT = "urgent"
    BATCH = "batch"


class EventKind(str, Enum):
    """Tag of every event the simulation kernel can carry."""

    JOB_ARRIVAL = "JobArrival"
    CHECKPOINT_START = "CheckpointStart"
    CHECKPOINT_DONE = "CheckpointDone"
    FAILURE = "Failure"
    RESTORE_DONE = "RestoreDone"
    JOB_DONE = "JobDone"
    PREDICTION_REARM = "PredictionRearm"
    TEMP_STEP = "TempStep"
    NODE_REPAIRED = "NodeRepaired"
