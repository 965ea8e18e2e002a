"""Raw telemetry -> aligned, normalized multivariate windows.

Records arrive either as lists of the ``Raw*Record`` dataclasses or as pandas
frames with the CSV column names; everything is converted to frames and then
bucketed with numpy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import EmptyGrid, EmptyInput, InsufficientHistory, ShapeMismatch, UnknownService
from .types import (
    LOG_LEVELS,
    AlignedWindow,
    CaseTelemetry,
    FaultCase,
    FeatureNormalizer,
    SamplingGrid,
    ServiceId,
)

METRIC_COLUMNS = ["timestamp", "service", "metric_name", "value"]
LOG_COLUMNS = ["timestamp", "service", "level", "template_id"]
TRACE_COLUMNS = ["timestamp", "trace_id", "span_id", "caller", "callee", "latency_ms", "status_code"]

LOG_FEATURES = ("log.total",) + tuple(f"log.{lv.lower()}" for lv in LOG_LEVELS)
TRACE_FEATURES = ("trace.latency_mean", "trace.count", "trace.error_rate")

_DTYPES = {
    "timestamp": np.float64,
    "service": str,
    "metric_name": str,
    "value": np.float64,
    "level": str,
    "template_id": str,
    "trace_id": str,
    "span_id": str,
    "caller": str,
    "callee": str,
    "latency_ms": np.float64,
    "status_code": np.int64,
}


@dataclass(frozen=True)
class RawMetricRecord:
    timestamp: int
    service: str
    metric_name: str
    value: float


@dataclass(frozen=True)
class RawLogRecord:
    timestamp: int
    service: str
    level: str
    template_id: str = ""


@dataclass(frozen=True)
class RawTraceRecord:
    timestamp: int
    trace_id: str
    caller: str
    callee: str
    latency: float
    status_code: int
    span_id: str = ""


def _as_frame(records, columns) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        return records
    rows = []
    for r in records:
        if isinstance(r, RawTraceRecord):
            rows.append((r.timestamp, r.trace_id, r.span_id, str(r.caller), str(r.callee),
                         r.latency, r.status_code))
        elif isinstance(r, RawMetricRecord):
            rows.append((r.timestamp, str(r.service), r.metric_name, r.value))
        elif isinstance(r, RawLogRecord):
            rows.append((r.timestamp, str(r.service), r.level, r.template_id))
        else:
            rows.append(tuple(r))
    return pd.DataFrame(rows, columns=columns)


def read_table(path, columns) -> pd.DataFrame:
    """Read one telemetry CSV; timestamps are floored to integer seconds."""
    df = pd.read_csv(path, dtype={c: _DTYPES[c] for c in columns}, keep_default_na=False)
    if list(df.columns) != list(columns):
        raise ShapeMismatch(f"{path}: expected columns {columns}, got {list(df.columns)}")
    df["timestamp"] = np.floor(df["timestamp"].to_numpy()).astype(np.int64)
    return df


def _service_index(names, services: Sequence[ServiceId]) -> np.ndarray:
    lookup = {s.name: s.index for s in services}
    names = pd.Series(names, dtype=object).astype(str)
    idx = names.map(lookup)
    if idx.isna().any():
        bad = sorted(set(names[idx.isna()]))
        raise UnknownService(f"unknown services: {bad}")
    return idx.to_numpy(dtype=np.int64)


def _check_grid(grid: SamplingGrid):
    if grid.points <= 0:
        raise EmptyGrid("sampling grid has no points")


def carry_forward(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Fill unobserved entries along the last axis with the previous observation (0 before any)."""
    p = values.shape[-1]
    pos = np.where(observed, np.arange(p), -1)
    last = np.maximum.accumulate(pos, axis=-1)
    filled = np.take_along_axis(values, np.clip(last, 0, None), axis=-1)
    return np.where(last >= 0, filled, 0.0)


def resample_metrics(records, grid: SamplingGrid, services: Sequence[ServiceId],
                     metric_names: Sequence[str] | None = None):
    """Bucket-mean each (service, metric) series onto ``grid``.

    Returns ``(values, metric_names)`` with values shaped (V, P, M). Empty
    buckets carry the last observed value forward, or 0 before the first one.
    Records earlier than the grid still seed the carry-forward.
    """
    _check_grid(grid)
    df = _as_frame(records, METRIC_COLUMNS)
    if metric_names is None:
        metric_names = sorted(set(df["metric_name"].astype(str)))
    metric_names = list(metric_names)
    v, p, m = len(services), grid.points, len(metric_names)
    if len(df) == 0 or m == 0:
        return np.zeros((v, p, m)), metric_names

    svc = _service_index(df["service"], services)
    midx = pd.Series(df["metric_name"].astype(str)).map({n: i for i, n in enumerate(metric_names)})
    keep = midx.notna().to_numpy()
    ts = np.floor(df["timestamp"].to_numpy(dtype=np.float64)).astype(np.int64)
    vals = df["value"].to_numpy(dtype=np.float64)
    svc, midx, ts, vals = svc[keep], midx.to_numpy()[keep].astype(np.int64), ts[keep], vals[keep]

    # slot 0 holds the latest observation before the grid starts
    bucket = (ts - grid.start) // grid.interval
    before = ts < grid.start
    inside = (ts >= grid.start) & (ts < grid.end)

    sums = np.zeros((v, m, p + 1))
    counts = np.zeros((v, m, p + 1))
    np.add.at(sums, (svc[inside], midx[inside], bucket[inside] + 1), vals[inside])
    np.add.at(counts, (svc[inside], midx[inside], bucket[inside] + 1), 1.0)
    if before.any():
        pre = pd.DataFrame({"s": svc[before], "m": midx[before], "t": ts[before], "x": vals[before]})
        # mean of the records sharing the latest pre-grid timestamp bucket
        pre["b"] = (pre["t"] - grid.start) // grid.interval
        last_b = pre.groupby(["s", "m"])["b"].transform("max")
        pre = pre[pre["b"] == last_b].groupby(["s", "m"])["x"].mean()
        for (s, mi), x in pre.items():
            sums[s, mi, 0] = x
            counts[s, mi, 0] = 1.0

    observed = counts > 0
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=observed)
    filled = carry_forward(means, observed)[:, :, 1:]
    return np.transpose(filled, (0, 2, 1)), metric_names


def extract_log_features(records, grid: SamplingGrid, services: Sequence[ServiceId]) -> np.ndarray:
    """Per-bucket log counts, shaped (V, P, 6): total then one column per level."""
    _check_grid(grid)
    df = _as_frame(records, LOG_COLUMNS)
    out = np.zeros((len(services), grid.points, len(LOG_FEATURES)))
    if len(df) == 0:
        return out
    svc = _service_index(df["service"], services)
    level = pd.Series(df["level"].astype(str).str.upper()).map(
        {lv: i + 1 for i, lv in enumerate(LOG_LEVELS)}
    )
    if level.isna().any():
        raise ShapeMismatch(f"unknown log levels: {sorted(set(df['level'][level.isna()]))}")
    b = grid.bucket_of(df["timestamp"].to_numpy())
    ok = b >= 0
    svc, b, level = svc[ok], b[ok], level.to_numpy()[ok].astype(np.int64)
    np.add.at(out, (svc, b, 0), 1.0)
    np.add.at(out, (svc, b, level), 1.0)
    return out


def is_error(status_codes, extra_error_codes: Iterable[int] = ()) -> np.ndarray:
    codes = np.asarray(status_codes, dtype=np.int64)
    err = codes >= 500
    extra = list(extra_error_codes)
    if extra:
        err |= np.isin(codes, extra)
    return err


def extract_trace_features(records, grid: SamplingGrid, services: Sequence[ServiceId],
                           extra_error_codes: Iterable[int] = ()) -> np.ndarray:
    """Inbound call statistics per callee, shaped (V, P, 3).

    Columns: mean latency, call count, error fraction. Buckets without calls
    are explicit zeros.
    """
    _check_grid(grid)
    df = _as_frame(records, TRACE_COLUMNS)
    v, p = len(services), grid.points
    out = np.zeros((v, p, len(TRACE_FEATURES)))
    if len(df) == 0:
        return out
    callee = _service_index(df["callee"], services)
    _service_index(df["caller"], services)
    b = grid.bucket_of(df["timestamp"].to_numpy())
    ok = b >= 0
    lat = df["latency_ms"].to_numpy(dtype=np.float64)[ok]
    err = is_error(df["status_code"].to_numpy(), extra_error_codes)[ok].astype(np.float64)
    callee, b = callee[ok], b[ok]
    lat_sum = np.zeros((v, p))
    n = np.zeros((v, p))
    n_err = np.zeros((v, p))
    np.add.at(lat_sum, (callee, b), lat)
    np.add.at(n, (callee, b), 1.0)
    np.add.at(n_err, (callee, b), err)
    has = n > 0
    out[:, :, 0] = np.divide(lat_sum, n, out=np.zeros_like(n), where=has)
    out[:, :, 1] = n
    out[:, :, 2] = np.divide(n_err, n, out=np.zeros_like(n), where=has)
    return out


def fit_normalizer(training_windows, feature_names: Sequence[str] | None = None) -> FeatureNormalizer:
    """Column-wise (min, max) over every training window.

    Accepts AlignedWindow objects or raw arrays whose last axis is the feature axis.
    """
    mins, maxs, names = [], [], feature_names
    for w in training_windows:
        if isinstance(w, AlignedWindow):
            names = names or w.feature_names
            w = w.features
        arr = np.asarray(w, dtype=np.float64)
        flat = arr.reshape(-1, arr.shape[-1])
        if flat.shape[0] == 0:
            continue
        mins.append(flat.min(axis=0))
        maxs.append(flat.max(axis=0))
    if not mins:
        raise EmptyInput("fit_normalizer needs at least one non-empty training window")
    lo = np.min(np.stack(mins), axis=0)
    hi = np.max(np.stack(maxs), axis=0)
    if names is None:
        names = tuple(f"f{i}" for i in range(len(lo)))
    if len(names) != len(lo):
        raise ShapeMismatch("feature_names length does not match feature axis")
    return FeatureNormalizer(tuple(names), lo, hi)


def apply_normalizer(features, normalizer: FeatureNormalizer):
    """Min-max scale into [0, 1]; out-of-range values clamp, degenerate columns map to 0."""
    if isinstance(features, AlignedWindow):
        if tuple(features.feature_names) != normalizer.feature_names:
            raise ShapeMismatch("window features do not match normalizer features")
        return AlignedWindow(features.grid, apply_normalizer(features.features, normalizer),
                             features.feature_names, normalizer)
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != len(normalizer.min):
        raise ShapeMismatch(f"expected {len(normalizer.min)} features, got {x.shape[-1]}")
    span = normalizer.max - normalizer.min
    degen = span <= 0
    scaled = (x - normalizer.min) / np.where(degen, 1.0, span)
    scaled = np.where(degen, 0.0, scaled)
    return np.clip(scaled, 0.0, 1.0)


# -- per-case loading and segmentation -------------------------------------------------


@dataclass(frozen=True)
class CaseTables:
    metrics: pd.DataFrame
    logs: pd.DataFrame
    traces: pd.DataFrame


def load_case_tables(telemetry: CaseTelemetry) -> CaseTables:
    return CaseTables(
        read_table(telemetry.metrics, METRIC_COLUMNS),
        read_table(telemetry.logs, LOG_COLUMNS),
        read_table(telemetry.traces, TRACE_COLUMNS),
    )


def case_grid(tables: CaseTables, interval: int, case: FaultCase | None = None) -> SamplingGrid:
    """Grid covering all of a case's telemetry, anchored at multiples of ``interval``."""
    stamps = [t["timestamp"].to_numpy() for t in (tables.metrics, tables.logs, tables.traces) if len(t)]
    if not stamps and case is None:
        raise EmptyGrid("case has no telemetry")
    lo = min((int(s.min()) for s in stamps), default=int(case.inject_start))
    hi = max((int(s.max()) for s in stamps), default=int(case.inject_end))
    if case is not None:
        hi = max(hi, int(case.inject_end) - 1)
    start = (lo // interval) * interval
    points = (hi - start) // interval + 1
    return SamplingGrid(start, interval, points)


def feature_names(metric_names: Sequence[str]) -> tuple[str, ...]:
    return tuple(f"metric.{m}" for m in metric_names) + LOG_FEATURES + TRACE_FEATURES


def case_features(tables: CaseTables, grid: SamplingGrid, services: Sequence[ServiceId],
                  metric_names: Sequence[str], extra_error_codes: Iterable[int] = ()) -> np.ndarray:
    """Raw (un-normalized) features for a whole case, shaped (V, P, F)."""
    m, _ = resample_metrics(tables.metrics, grid, services, metric_names)
    lg = extract_log_features(tables.logs, grid, services)
    tr = extract_trace_features(tables.traces, grid, services, extra_error_codes)
    return np.concatenate([m, lg, tr], axis=2)


@dataclass(frozen=True)
class Segmentation:
    normal: AlignedWindow
    fault: AlignedWindow
    windows: tuple[tuple[AlignedWindow, bool], ...]


def segment_windows(case: FaultCase, interval: int, T: int, stride: int = 0, *,
                    services: Sequence[ServiceId], metric_names: Sequence[str],
                    tables: CaseTables | None = None,
                    extra_error_codes: Iterable[int] = ()) -> Segmentation:
    """Cut a case into its fault window, its normal-reference window, and optional context windows.

    The fault window is the T buckets starting at the (grid-snapped) injection
    start. The normal-reference window is the T buckets immediately before it.
    With ``stride > 0`` additional sliding windows are appended, labelled as
    fault windows when they overlap the injection interval.
    """
    if T < 1:
        raise ValueError("window length T must be >= 1")
    if tables is None:
        tables = load_case_tables(case.telemetry)
    grid = case_grid(tables, interval, case)
    fault_pt = (grid.snap(case.inject_start) - grid.start) // interval
    if fault_pt - T < 0:
        raise InsufficientHistory(
            f"{case.case_id}: need {T} buckets before injection, have {max(fault_pt, 0)}"
        )
    points = max(grid.points, fault_pt + T)
    grid = SamplingGrid(grid.start, interval, points)
    feats = case_features(tables, grid, services, metric_names, extra_error_codes)
    names = feature_names(metric_names)

    def window(first):
        return AlignedWindow(grid.sub(first, T), feats[:, first:first + T, :].copy(), names)

    normal, fault = window(fault_pt - T), window(fault_pt)
    out = [(normal, False), (fault, True)]
    if stride > 0:
        for first in range(0, points - T + 1, stride):
            w0 = grid.start + first * interval
            w1 = w0 + T * interval
            out.append((window(first), w0 < case.inject_end and w1 > case.inject_start))
    return Segmentation(normal, fault, tuple(out))
