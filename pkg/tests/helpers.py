"""Fixture builders and numerical oracles shared by the test modules."""

import csv
import hashlib
import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

METRIC_HEADER = ["timestamp", "service", "metric_name", "value"]
LOG_HEADER = ["timestamp", "service", "level", "template_id"]
TRACE_HEADER = ["timestamp", "trace_id", "span_id", "caller", "callee", "latency_ms", "status_code"]


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def handmade_case(case_dir, services, start=1000, interval=5, points=40, inject_point=20,
                  root="B", fault_type="cpu_hog", seed=0):
    """One small case: a cpu gauge per service, a call chain, a few logs.

    The root's cpu jumps at the injection bucket; calls into the root fail.
    """
    rng = np.random.default_rng(seed)
    case_dir = Path(case_dir)
    case_dir.mkdir(parents=True, exist_ok=True)
    inject_start = start + inject_point * interval
    metrics, logs, traces = [], [], []
    for p in range(points):
        t = start + p * interval
        for s in services:
            cpu = 30.0 + rng.normal(0, 0.5) + (40.0 if s == root and p >= inject_point else 0.0)
            metrics.append([t, s, "cpu", f"{cpu:.4f}"])
        logs.append([t + 1, services[p % len(services)], "INFO", "T1"])
        for a, b in zip(services, services[1:]):
            for k in range(3):
                bad = b == root and p >= inject_point and k == 0
                traces.append([t + k, f"tr{p}-{a}-{k}", f"sp{k}", a, b, 10.0 + k, 500 if bad else 200])
    write_csv(case_dir / "metrics.csv", METRIC_HEADER, metrics)
    write_csv(case_dir / "logs.csv", LOG_HEADER, logs)
    traces.sort(key=lambda r: r[0])
    write_csv(case_dir / "traces.csv", TRACE_HEADER, traces)
    gt = {"root_cause": root, "fault_type": fault_type,
          "inject_start": inject_start, "inject_end": inject_start + 10 * interval}
    (case_dir / "ground_truth.json").write_text(json.dumps(gt), encoding="utf-8")
    return gt


def handmade_dataset(root, n_cases=2, services=("A", "B", "C"), interval=5, **kw):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "meta.json").write_text(json.dumps(
        {"services": list(services), "interval_s": interval, "fault_types": ["cpu_hog", "net_delay"]}),
        encoding="utf-8")
    for i in range(n_cases):
        handmade_case(root / "cases" / f"c{i:02d}", list(services), interval=interval,
                      root=services[(i + 1) % len(services)], seed=i, **kw)
    return root


def central_difference(fn, param: torch.Tensor, index, h=1e-5) -> float:
    """d fn() / d param[index] by central differences, restoring the entry afterwards."""
    with torch.no_grad():
        orig = param[index].item()
        param[index] = orig + h
        up = float(fn())
        param[index] = orig - h
        down = float(fn())
        param[index] = orig
    return (up - down) / (2 * h)


def rel_err(a, b, floor=1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def brute_force_metrics(ranks, n_services):
    """AC@k, Avg@5 and MRR straight from their definitions, in exact rationals.

    Each result is rounded to float once, so the values are the correctly
    rounded metrics independent of summation order.
    """
    n = len(ranks)
    ac = {}
    for k in range(1, 6):
        hits = 0
        for r in ranks:
            top_k = list(range(1, min(k, n_services) + 1))
            if r in top_k:
                hits += 1
        ac[k] = Fraction(hits, n)
    avg5 = sum(ac.values()) / 5
    mrr = sum(Fraction(1, r) for r in ranks) / n
    return {k: float(v) for k, v in ac.items()}, float(avg5), float(mrr)


def tree_sha(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
