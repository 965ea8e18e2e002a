"""Per-window call graphs with request-count / error-rate edge weights.

Edge weight: ``sigmoid(alpha * norm_count + (1 - alpha) * norm_error)``.
Because both inputs lie in [0, 1] the weight always lies in
[0.5, sigmoid(1) ~= 0.731]; the band is narrow but the formula is kept as is.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import DomainError, UnknownService
from .ingestion import TRACE_COLUMNS, _as_frame, is_error
from .types import CallGraphSnapshot, EdgeStats, SamplingGrid, ServiceId, sigmoid

STATIC_WEIGHT = 0.5  # sigmoid(0): the weight at zero evidence


def aggregate_edges(traces, window: SamplingGrid, services: Sequence[ServiceId] | None = None,
                    extra_error_codes: Iterable[int] = ()) -> dict:
    """Count calls and error fraction per (caller, callee) inside ``window``.

    Keys are ServiceIds when ``services`` is given, otherwise raw name strings.
    """
    df = _as_frame(traces, TRACE_COLUMNS)
    if len(df) == 0:
        return {}
    ts = np.floor(df["timestamp"].to_numpy(dtype=np.float64))
    inside = (ts >= window.start) & (ts < window.end)
    df = df.loc[inside]
    if len(df) == 0:
        return {}
    err = is_error(df["status_code"].to_numpy(), extra_error_codes)
    g = pd.DataFrame({"a": df["caller"].astype(str).to_numpy(),
                      "b": df["callee"].astype(str).to_numpy(),
                      "e": err.astype(np.int64)})
    agg = g.groupby(["a", "b"], sort=True)["e"].agg(["size", "sum"])
    lookup = None if services is None else {s.name: s for s in services}
    out = {}
    for (a, b), row in agg.iterrows():
        c, n_err = int(row["size"]), int(row["sum"])
        if lookup is not None:
            if a not in lookup or b not in lookup:
                raise UnknownService(f"edge {a}->{b} references an unknown service")
            a, b = lookup[a], lookup[b]
        out[(a, b)] = (c, n_err / c if c else 0.0)
    return out


def edge_weight(norm_count: float, norm_error: float, alpha: float) -> float:
    for name, x in (("norm_count", norm_count), ("norm_error", norm_error), ("alpha", alpha)):
        if not (0.0 <= x <= 1.0) or math.isnan(x):
            raise DomainError(f"{name}={x} outside [0, 1]")
    return sigmoid(alpha * norm_count + (1.0 - alpha) * norm_error)


@dataclass(frozen=True)
class EdgeNormalizer:
    """Request-count scaling state: per-edge ranges plus a global fallback.

    Pairs are keyed by (caller_index, callee_index). Degenerate per-edge
    ranges (min == max) fall back to the global range.
    """

    pairs: Mapping[tuple[int, int], tuple[float, float]] = field(default_factory=dict)
    global_min: float = 0.0
    global_max: float = 0.0

    def __post_init__(self):
        for k, (lo, hi) in self.pairs.items():
            if lo > hi:
                raise DomainError(f"edge {k}: min {lo} > max {hi}")
        if self.global_min > self.global_max:
            raise DomainError("global min > global max")

    @classmethod
    def fit(cls, edge_maps: Iterable[Mapping]) -> "EdgeNormalizer":
        """Fit from per-window ``aggregate_edges`` outputs (ServiceId or index keys)."""
        pairs: dict[tuple[int, int], list[float]] = {}
        counts = []
        for em in edge_maps:
            for (a, b), (c, _r) in em.items():
                key = (_idx(a), _idx(b))
                lo_hi = pairs.setdefault(key, [float(c), float(c)])
                lo_hi[0] = min(lo_hi[0], c)
                lo_hi[1] = max(lo_hi[1], c)
                counts.append(c)
        if not counts:
            return cls({}, 0.0, 0.0)
        return cls({k: (v[0], v[1]) for k, v in sorted(pairs.items())},
                   float(min(counts)), float(max(counts)))

    def normalize(self, pair: tuple[int, int], count: float) -> float:
        lo, hi = self.pairs.get(pair, (self.global_min, self.global_max))
        if hi <= lo:
            lo, hi = self.global_min, self.global_max
        if hi <= lo:
            return 0.0
        return float(min(1.0, max(0.0, (count - lo) / (hi - lo))))

    def to_json(self) -> dict:
        return {
            "pairs": [[a, b, lo, hi] for (a, b), (lo, hi) in sorted(self.pairs.items())],
            "global_min": self.global_min,
            "global_max": self.global_max,
        }

    @classmethod
    def from_json(cls, obj) -> "EdgeNormalizer":
        pairs = {(int(a), int(b)): (float(lo), float(hi)) for a, b, lo, hi in obj["pairs"]}
        return cls(pairs, float(obj["global_min"]), float(obj["global_max"]))


def _idx(s) -> int:
    return s.index if isinstance(s, ServiceId) else int(s)


def build_snapshot(traces, window: SamplingGrid, normalizer: EdgeNormalizer, alpha: float,
                   services: Sequence[ServiceId], *, edges: Mapping | None = None,
                   extra_error_codes: Iterable[int] = ()) -> CallGraphSnapshot:
    """Aggregate ``traces`` in ``window`` and weight every observed edge.

    ``edges`` may carry a precomputed ``aggregate_edges`` result, in which case
    ``traces`` is ignored.
    """
    if edges is None:
        edges = aggregate_edges(traces, window, services, extra_error_codes)
    stats = {}
    for (a, b), (c, r) in sorted(edges.items()):
        nc = normalizer.normalize((a.index, b.index), c)
        ne = float(r)
        stats[(a, b)] = EdgeStats(int(c), float(r), nc, ne, edge_weight(nc, ne, alpha))
    return CallGraphSnapshot(window, tuple(services), stats)


def static_snapshot(pairs: Iterable[tuple[int, int]], window: SamplingGrid,
                    services: Sequence[ServiceId]) -> CallGraphSnapshot:
    """Constant-weight graph over a fixed edge set (the static-graph ablation)."""
    stats = {
        (services[a], services[b]): EdgeStats(0, 0.0, 0.0, 0.0, STATIC_WEIGHT)
        for a, b in sorted(set(pairs))
    }
    return CallGraphSnapshot(window, tuple(services), stats)


SNAPSHOT_CSV_COLUMNS = ["caller", "callee", "count", "error_rate", "norm_count", "norm_error", "weight"]


def write_snapshot_csv(snapshot: CallGraphSnapshot, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SNAPSHOT_CSV_COLUMNS)
    for (a, b), st in sorted(snapshot.edges.items()):
        w.writerow([a.name, b.name, st.count, repr(st.error_rate), repr(st.norm_count),
                    repr(st.norm_error), repr(st.weight)])
