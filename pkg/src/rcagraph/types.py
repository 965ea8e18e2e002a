"""Shared domain types for the RCA toolkit.

Everything here is immutable after construction. Arrays stored on frozen
dataclasses are not copied, so callers should treat them as read-only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DomainError, LabelViolation

LOG_LEVELS = ("DEBUG", "INFO", "WARN", "ERROR", "FATAL")
SPLIT_TAGS = ("train", "test", "unassigned")


@dataclass(frozen=True, order=True)
class ServiceId:
    index: int
    name: str

    def __post_init__(self):
        if not self.name:
            raise DomainError("service name must be non-empty")
        if self.index < 0:
            raise DomainError(f"service index must be >= 0, got {self.index}")

    def __str__(self):
        return self.name


def make_services(names: Sequence[str]) -> tuple[ServiceId, ...]:
    """Dense, order-preserving ids for a list of unique service names."""
    if len(set(names)) != len(names):
        raise DomainError("duplicate service names")
    return tuple(ServiceId(i, n) for i, n in enumerate(names))


@dataclass(frozen=True)
class SamplingGrid:
    start: int
    interval: int
    points: int

    def __post_init__(self):
        if self.interval <= 0:
            raise DomainError(f"interval must be > 0, got {self.interval}")
        if self.points < 0:
            raise DomainError(f"points must be >= 0, got {self.points}")

    @property
    def end(self) -> int:
        """Exclusive end timestamp of the last bucket."""
        return self.start + self.points * self.interval

    def timestamps(self) -> np.ndarray:
        return self.start + self.interval * np.arange(self.points, dtype=np.int64)

    def bucket_of(self, ts) -> np.ndarray:
        """Bucket index for each timestamp; -1 for anything off the grid."""
        ts = np.floor(np.asarray(ts, dtype=np.float64)).astype(np.int64)
        idx = (ts - self.start) // self.interval
        idx = np.where((ts >= self.start) & (ts < self.end), idx, -1)
        return idx

    def snap(self, ts: int) -> int:
        """Floor a timestamp onto this grid's clock."""
        return self.start + ((int(ts) - self.start) // self.interval) * self.interval

    def sub(self, first_point: int, points: int) -> "SamplingGrid":
        return SamplingGrid(self.start + first_point * self.interval, self.interval, points)


@dataclass(frozen=True)
class FeatureNormalizer:
    """Per-feature min-max scaling fitted on training data."""

    feature_names: tuple[str, ...]
    min: np.ndarray
    max: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.max <= self.min

    def to_json(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "min": [float(v) for v in self.min],
            "max": [float(v) for v in self.max],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "FeatureNormalizer":
        return cls(
            tuple(obj["feature_names"]),
            np.asarray(obj["min"], dtype=np.float64),
            np.asarray(obj["max"], dtype=np.float64),
        )

    def __eq__(self, other):
        if not isinstance(other, FeatureNormalizer):
            return NotImplemented
        return (
            self.feature_names == other.feature_names
            and np.array_equal(self.min, other.min)
            and np.array_equal(self.max, other.max)
        )


@dataclass(frozen=True)
class AlignedWindow:
    grid: SamplingGrid
    features: np.ndarray  # (V, T, F)
    feature_names: tuple[str, ...]
    normalization: FeatureNormalizer | None = None

    def __post_init__(self):
        if self.features.ndim != 3:
            raise DomainError(f"features must be (V, T, F), got shape {self.features.shape}")
        if self.features.shape[1] != self.grid.points:
            raise DomainError("window length does not match grid points")
        if self.features.shape[2] != len(self.feature_names):
            raise DomainError("feature count does not match feature_names")
        if not np.all(np.isfinite(self.features)):
            raise DomainError("non-finite feature values")
        if self.normalization is not None and (
            self.features.min(initial=0.0) < 0.0 or self.features.max(initial=0.0) > 1.0
        ):
            raise DomainError("normalized features must lie in [0, 1]")

    @property
    def n_services(self) -> int:
        return self.features.shape[0]


def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


@dataclass(frozen=True)
class EdgeStats:
    count: int
    error_rate: float
    norm_count: float
    norm_error: float
    weight: float


@dataclass(frozen=True)
class CallGraphSnapshot:
    """Weighted directed call graph for one window; keys are (caller, callee)."""

    window: SamplingGrid
    services: tuple[ServiceId, ...]
    edges: Mapping[tuple[ServiceId, ServiceId], EdgeStats] = field(default_factory=dict)

    def __post_init__(self):
        known = set(self.services)
        for (a, b), st in self.edges.items():
            if a == b:
                raise DomainError(f"self-edge on {a}")
            if a not in known or b not in known:
                raise DomainError(f"edge {a}->{b} references an unknown service")
            if not 0.0 < st.weight < 1.0:
                raise DomainError(f"edge weight {st.weight} outside (0, 1)")

    def weight_matrix(self) -> np.ndarray:
        """Dense (V, V) matrix, entry [caller, callee] = e, zero where no edge."""
        v = len(self.services)
        w = np.zeros((v, v))
        for (a, b), st in self.edges.items():
            w[a.index, b.index] = st.weight
        return w

    def edge_pairs(self) -> set[tuple[int, int]]:
        return {(a.index, b.index) for a, b in self.edges}


@dataclass(frozen=True)
class CaseTelemetry:
    metrics: Path
    logs: Path
    traces: Path


@dataclass(frozen=True)
class FaultCase:
    case_id: str
    telemetry: CaseTelemetry | None = field(compare=False)
    inject_start: int
    inject_end: int
    root_cause: ServiceId
    fault_type: str
    split_tag: str = "unassigned"

    def __post_init__(self):
        if self.inject_start >= self.inject_end:
            raise LabelViolation(f"{self.case_id}: inject_start must precede inject_end")
        if self.split_tag not in SPLIT_TAGS:
            raise DomainError(f"bad split tag {self.split_tag!r}")


@dataclass(frozen=True)
class Dataset:
    services: tuple[ServiceId, ...]
    interval: int
    fault_types: tuple[str, ...]
    cases: tuple[FaultCase, ...]

    def __post_init__(self):
        ids = [c.case_id for c in self.cases]
        if len(set(ids)) != len(ids):
            raise DomainError("duplicate case ids")
        for i, s in enumerate(self.services):
            if s.index != i:
                raise DomainError("service indices must be dense and ordered")
        known = set(self.services)
        for c in self.cases:
            if c.root_cause not in known:
                raise LabelViolation(f"{c.case_id}: unknown root cause {c.root_cause}")

    @property
    def n_services(self) -> int:
        return len(self.services)

    def service(self, name: str) -> ServiceId:
        for s in self.services:
            if s.name == name:
                return s
        raise LabelViolation(f"unknown service {name!r}")

    def case(self, case_id: str) -> FaultCase:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise KeyError(case_id)

    def with_cases(self, cases) -> "Dataset":
        return Dataset(self.services, self.interval, self.fault_types, tuple(cases))

    def tagged(self, tag: str) -> list[FaultCase]:
        return [c for c in self.cases if c.split_tag == tag]
