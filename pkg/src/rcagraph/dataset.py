"""On-disk dataset layout: loading, validation and writing.

::

    dataset/
      meta.json                 {"services": [...], "interval_s": N, "fault_types": [...]}
      cases/<case_id>/
        metrics.csv             timestamp,service,metric_name,value
        logs.csv                timestamp,service,level,template_id
        traces.csv              timestamp,trace_id,span_id,caller,callee,latency_ms,status_code
        ground_truth.json       {"root_cause", "fault_type", "inject_start", "inject_end"}
"""

from __future__ import annotations

import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    ClockViolation,
    DatasetError,
    LabelViolation,
    MissingFile,
    SchemaViolation,
    Violation,
)
from .ingestion import LOG_COLUMNS, METRIC_COLUMNS, TRACE_COLUMNS
from .types import LOG_LEVELS, CaseTelemetry, Dataset, FaultCase, make_services

_FILES = {
    "metrics.csv": METRIC_COLUMNS,
    "logs.csv": LOG_COLUMNS,
    "traces.csv": TRACE_COLUMNS,
}
_GT_KEYS = {"root_cause", "fault_type", "inject_start", "inject_end"}
_RAISE_ORDER = (
    ("MissingFile", MissingFile),
    ("SchemaViolation", SchemaViolation),
    ("LabelViolation", LabelViolation),
    ("ClockViolation", ClockViolation),
)


def _read_json(path: Path, case_id, problems):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        problems.append(Violation("MissingFile", case_id, path.name, None, "file not found"))
    except json.JSONDecodeError as e:
        problems.append(Violation("SchemaViolation", case_id, path.name, e.lineno, e.msg))
    return None


def _check_csv(path: Path, columns, case_id, service_names, problems):
    name = path.name
    if not path.exists():
        problems.append(Violation("MissingFile", case_id, name, None, "file not found"))
        return
    with open(path, encoding="utf-8", newline="") as f:
        header = next(csv.reader(f), None)
    if header != list(columns):
        problems.append(Violation("SchemaViolation", case_id, name, 1,
                                  f"expected header {columns}, got {header}"))
        return
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    line = np.arange(len(df)) + 2  # 1-based, after the header row

    def numeric(col, kind=float):
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = vals.isna().to_numpy()
        if kind is float:
            bad |= ~np.isfinite(vals.fillna(0).to_numpy(dtype=np.float64))
        for i in np.flatnonzero(bad)[:5]:
            problems.append(Violation("SchemaViolation", case_id, name, int(line[i]),
                                      f"bad {col} value {df[col].iloc[i]!r}"))
        return vals.to_numpy(dtype=np.float64), bad

    ts, bad_ts = numeric("timestamp")
    good = ~bad_ts
    if good.sum() > 1:
        gts, gline = ts[good], line[good]
        back = np.flatnonzero(np.diff(gts) < 0)
        for i in back[:5]:
            problems.append(Violation("ClockViolation", case_id, name, int(gline[i + 1]),
                                      f"timestamp {gts[i + 1]:g} after {gts[i]:g}"))

    for col in ("service", "caller", "callee"):
        if col in df:
            unknown = ~df[col].isin(service_names).to_numpy()
            for i in np.flatnonzero(unknown)[:5]:
                problems.append(Violation("LabelViolation", case_id, name, int(line[i]),
                                          f"unknown service {df[col].iloc[i]!r}"))
    if name == "metrics.csv":
        numeric("value")
    elif name == "logs.csv":
        bad = ~df["level"].str.upper().isin(LOG_LEVELS).to_numpy()
        for i in np.flatnonzero(bad)[:5]:
            problems.append(Violation("SchemaViolation", case_id, name, int(line[i]),
                                      f"unknown log level {df['level'].iloc[i]!r}"))
    elif name == "traces.csv":
        lat, _ = numeric("latency_ms")
        for i in np.flatnonzero(lat < 0)[:5]:
            problems.append(Violation("SchemaViolation", case_id, name, int(line[i]),
                                      "negative latency"))
        numeric("status_code", kind=int)
        selfcall = (df["caller"] == df["callee"]).to_numpy()
        for i in np.flatnonzero(selfcall)[:5]:
            problems.append(Violation("SchemaViolation", case_id, name, int(line[i]),
                                      "caller equals callee"))


def _raise(problems):
    if not problems:
        return
    kinds = {p.kind for p in problems}
    for kind, cls in _RAISE_ORDER:
        if kind in kinds:
            raise cls(problems)
    raise DatasetError(problems)


def validate_dataset(root_dir) -> Dataset:
    """Load a dataset directory, checking every invariant.

    All violations are collected before raising; the exception type is the
    most fundamental violation kind found, and ``.violations`` lists them all.
    """
    root = Path(root_dir)
    problems: list[Violation] = []
    if not root.is_dir():
        raise MissingFile([Violation("MissingFile", None, str(root), None, "dataset directory not found")])
    meta = _read_json(root / "meta.json", None, problems)
    if meta is None:
        _raise(problems)
    for key in ("services", "interval_s", "fault_types"):
        if key not in meta:
            problems.append(Violation("SchemaViolation", None, "meta.json", None, f"missing key {key!r}"))
    _raise(problems)
    services = make_services([str(s) for s in meta["services"]])
    by_name = {s.name: s for s in services}
    interval = int(meta["interval_s"])
    fault_types = tuple(str(t) for t in meta["fault_types"])

    cases = []
    case_root = root / "cases"
    case_dirs = sorted(p for p in case_root.iterdir() if p.is_dir()) if case_root.is_dir() else []
    for cdir in case_dirs:
        cid = cdir.name
        for fname, cols in _FILES.items():
            _check_csv(cdir / fname, cols, cid, set(by_name), problems)
        gt = _read_json(cdir / "ground_truth.json", cid, problems)
        if gt is None:
            continue
        missing = _GT_KEYS - set(gt)
        if missing:
            problems.append(Violation("SchemaViolation", cid, "ground_truth.json", None,
                                      f"missing keys {sorted(missing)}"))
            continue
        root_svc = by_name.get(str(gt["root_cause"]))
        if root_svc is None:
            problems.append(Violation("LabelViolation", cid, "ground_truth.json", None,
                                      f"unknown root cause {gt['root_cause']!r}"))
            continue
        if gt["fault_type"] not in fault_types:
            problems.append(Violation("LabelViolation", cid, "ground_truth.json", None,
                                      f"unknown fault type {gt['fault_type']!r}"))
            continue
        if int(gt["inject_start"]) >= int(gt["inject_end"]):
            problems.append(Violation("LabelViolation", cid, "ground_truth.json", None,
                                      "inject_start must precede inject_end"))
            continue
        cases.append(FaultCase(
            case_id=cid,
            telemetry=CaseTelemetry(cdir / "metrics.csv", cdir / "logs.csv", cdir / "traces.csv"),
            inject_start=int(gt["inject_start"]),
            inject_end=int(gt["inject_end"]),
            root_cause=root_svc,
            fault_type=str(gt["fault_type"]),
        ))
    _raise(problems)
    return Dataset(services, interval, fault_types, tuple(cases))


def write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def write_meta(root: Path, services, interval: int, fault_types):
    root.mkdir(parents=True, exist_ok=True)
    write_json(root / "meta.json", {
        "services": [str(s) for s in services],
        "interval_s": int(interval),
        "fault_types": list(fault_types),
    })


def ground_truth_json(case: FaultCase) -> dict:
    return {
        "root_cause": case.root_cause.name,
        "fault_type": case.fault_type,
        "inject_start": int(case.inject_start),
        "inject_end": int(case.inject_end),
    }


def write_dataset(dataset: Dataset, root_dir) -> Path:
    """Write ``dataset`` in the on-disk layout, copying each case's telemetry files."""
    root = Path(root_dir)
    write_meta(root, dataset.services, dataset.interval, dataset.fault_types)
    for case in dataset.cases:
        cdir = root / "cases" / case.case_id
        cdir.mkdir(parents=True, exist_ok=True)
        if case.telemetry is not None:
            for src, name in ((case.telemetry.metrics, "metrics.csv"),
                              (case.telemetry.logs, "logs.csv"),
                              (case.telemetry.traces, "traces.csv")):
                if Path(src).resolve() != (cdir / name).resolve():
                    shutil.copyfile(src, cdir / name)
        write_json(cdir / "ground_truth.json", ground_truth_json(case))
    return root
