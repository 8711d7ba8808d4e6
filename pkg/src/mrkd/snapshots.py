"""Memory-replay snapshot ring.

The ring keeps ``n`` frozen copies of the student.  Every ``kappa_steps``
training steps the copies shift one slot back (the oldest falls off) and the
freshest slot receives a deep copy of the live parameters.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import DimensionError, ParamSet, predict

RING_MAGIC = b"MRKDRING"
RING_VERSION = 1


@dataclass(frozen=True)
class SnapshotConfig:
    """``kappa_epochs`` is the copy interval in epochs (fractions allowed)."""

    kappa_epochs: float
    n: int = 1
    steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n: need at least one snapshot copy, got {self.n}")
        if not self.kappa_epochs > 0:
            raise ValueError(f"kappa_epochs: must be positive, got {self.kappa_epochs}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError(f"steps_per_epoch: must be positive, got {self.steps_per_epoch}")

    @property
    def kappa_steps(self) -> int:
        if self.steps_per_epoch is None:
            raise ValueError("steps_per_epoch is unknown; cannot convert kappa to steps")
        return max(1, round(self.kappa_epochs * self.steps_per_epoch))


@dataclass
class SnapshotRing:
    copies: list[ParamSet]
    kappa_steps: int
    step_counter: int = 0
    shift_count: int = field(default=0)

    @property
    def n(self) -> int:
        return len(self.copies)

    def tick(self, theta: ParamSet) -> bool:
        """Advance to the next step; shift the ring when the step index is a multiple of kappa.

        Call once per training step before that step's update, so a shift
        captures the parameters produced by the previous step.
        """
        self.step_counter += 1
        if self.step_counter % self.kappa_steps:
            return False
        # the oldest copy is dropped, everything else moves back one slot
        self.copies = [theta.copy()] + self.copies[:-1]
        self.shift_count += 1
        return True

    def teachers(self, inputs: np.ndarray) -> list[np.ndarray]:
        """Logits of every copy on ``inputs``, freshest copy first."""
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.copies[0].n_inputs:
            raise DimensionError(
                f"input of shape {x.shape} does not match snapshot input width {self.copies[0].n_inputs}")
        return [predict(copy, x) for copy in self.copies]

    def to_bytes(self) -> bytes:
        header = RING_MAGIC + struct.pack(
            "<IQQQQ", RING_VERSION, self.n, self.kappa_steps, self.step_counter, self.shift_count)
        return header + b"".join(c.to_bytes() for c in self.copies)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SnapshotRing":
        fh = io.BytesIO(blob)
        if fh.read(len(RING_MAGIC)) != RING_MAGIC:
            raise ValueError("bad snapshot ring magic")
        raw = fh.read(struct.calcsize("<IQQQQ"))
        if len(raw) != struct.calcsize("<IQQQQ"):
            raise ValueError("truncated snapshot ring header")
        version, n, kappa, step, shifts = struct.unpack("<IQQQQ", raw)
        if version != RING_VERSION:
            raise ValueError(f"unsupported snapshot ring version {version}")
        copies = [ParamSet.read_from(fh) for _ in range(n)]
        if fh.read(1):
            raise ValueError("trailing bytes after snapshot ring")
        return cls(copies, kappa, step, shifts)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "SnapshotRing":
        return cls.from_bytes(Path(path).read_bytes())


def ring_init(theta: ParamSet, cfg: SnapshotConfig) -> SnapshotRing:
    return SnapshotRing([theta.copy() for _ in range(cfg.n)], cfg.kappa_steps)


def ring_tick(ring: SnapshotRing, theta: ParamSet) -> bool:
    return ring.tick(theta)


def ring_teachers(ring: SnapshotRing, inputs: np.ndarray) -> list[np.ndarray]:
    return ring.teachers(inputs)
