"""Synthetic microservice telemetry with injected, propagating faults.

Each fault-plan entry becomes one independent case: a stretch of normal
operation followed by a fault at one service whose effects spread along the
call graph with one bucket of delay per hop. Cases are written in the same
on-disk layout the ingestion code reads.

Scenario flavours:

``standard``
    Root shows the strongest and earliest deviation; affected services see
    ``severity * attenuation**hops`` latency elevation.
``edge_only``
    Node-level features are identically distributed for every service during
    the fault; only per-edge error rates (errors concentrated on the root's
    outbound calls) identify the root.
``deviation_inversion``
    One neighbour of the root (the decoy) deviates ``inversion_factor`` times
    more than the root, one bucket later.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .dataset import write_json, write_meta
from .errors import ConfigError, IntervalOutOfRange, UnknownService
from .ingestion import LOG_COLUMNS, METRIC_COLUMNS, TRACE_COLUMNS
from .types import LOG_LEVELS, SamplingGrid, make_services

FAULT_TYPES = ("cpu_hog", "mem_leak", "net_delay", "error_storm")
TOPOLOGIES = ("chain", "tree", "random_dag_with_backedges")
DRIFTS = ("none", "linear", "seasonal")
SCENARIOS = ("standard", "edge_only", "deviation_inversion")
METRICS = ("cpu", "latency", "mem")
EPOCH = 1_700_000_000
NOISE_CLIP = 2.5  # gauge noise is Gaussian truncated at this many standard deviations


@dataclass
class FaultSpec:
    fault_type: str
    target: int
    start: int      # seconds from case start
    end: int
    severity: float = 1.0

    def __post_init__(self):
        if self.fault_type not in FAULT_TYPES:
            raise ConfigError(f"unknown fault type {self.fault_type!r}")
        if self.severity <= 0:
            raise ConfigError("severity must be > 0")


@dataclass
class ScenarioConfig:
    n_services: int = 10
    topology: str = "tree"
    duration: int = 240
    interval: int = 5
    base_rate: float = 8.0
    noise_std: float = 0.05
    drift: str = "none"
    drift_amplitude: float = 0.0
    attenuation: float = 0.5
    seed: int = 0
    scenario: str = "standard"
    n_cases: int = 150
    fault_types: tuple = FAULT_TYPES
    fault_start: int = 150
    fault_duration: int = 70
    severity_range: tuple = (1.0, 2.0)
    edge_probability: float = 0.35
    backedge_probability: float = 0.1
    log_rate: float = 4.0
    error_fraction: float = 0.3
    inversion_factor: float = 6.0
    fault_plan: list = field(default_factory=list)

    def __post_init__(self):
        self.fault_types = tuple(self.fault_types)
        self.severity_range = tuple(self.severity_range)
        self.fault_plan = [f if isinstance(f, FaultSpec) else FaultSpec(**f) for f in self.fault_plan]
        if self.n_services < 2:
            raise ConfigError("n_services must be >= 2")
        if not 0.0 < self.attenuation <= 1.0:
            raise ConfigError("attenuation must lie in (0, 1]")
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}")
        if self.drift not in DRIFTS:
            raise ConfigError(f"drift must be one of {DRIFTS}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}")
        if self.interval <= 0 or self.duration < self.interval:
            raise ConfigError("need interval > 0 and duration >= interval")
        if self.noise_std < 0 or self.base_rate <= 0:
            raise ConfigError("noise_std must be >= 0 and base_rate > 0")
        if any(t not in FAULT_TYPES for t in self.fault_types):
            raise ConfigError(f"fault types must come from {FAULT_TYPES}")

    @property
    def points(self) -> int:
        return self.duration // self.interval

    def to_json(self) -> dict:
        d = asdict(self)
        d["fault_types"] = list(self.fault_types)
        d["severity_range"] = list(self.severity_range)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**obj)


def load_scenario(path) -> ScenarioConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}:1: scenario must be a JSON object")
    try:
        return ScenarioConfig.from_json(obj)
    except TypeError as e:
        raise ConfigError(f"{path}: {e}") from e


# -- topology ------------------------------------------------------------------------


def generate_topology(config: ScenarioConfig) -> list[tuple[int, int]]:
    """Connected caller->callee edge list, sorted; deterministic per seed."""
    n = config.n_services
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11]))
    if config.topology == "chain":
        return [(i, i + 1) for i in range(n - 1)]
    edges = {(int(rng.integers(0, i)), i) for i in range(1, n)}
    if config.topology == "random_dag_with_backedges":
        for i in range(n):
            for j in range(i + 1, n):
                if (i, j) not in edges and rng.random() < config.edge_probability:
                    edges.add((i, j))
        for i in range(n):
            for j in range(i + 1, n):
                if (i, j) not in edges and rng.random() < config.backedge_probability:
                    edges.add((j, i))
    return sorted(edges)


def hop_distances(graph, source: int, n: int, reverse: bool = False) -> dict[int, int]:
    nbrs: list[list[int]] = [[] for _ in range(n)]
    for a, b in graph:
        if reverse:
            nbrs[b].append(a)
        else:
            nbrs[a].append(b)
    dist = {source: 0}
    q = deque([source])
    while q:
        u = q.popleft()
        for w in nbrs[u]:
            if w not in dist:
                dist[w] = dist[u] + 1
                q.append(w)
    return dist


def propagation_hops(graph, root: int, n: int) -> dict[int, int]:
    """Hop count at which each affected service sees the fault (root excluded).

    Downstream follows call edges, upstream follows them backwards; a service
    reachable both ways takes the shorter distance.
    """
    down = hop_distances(graph, root, n)
    up = hop_distances(graph, root, n, reverse=True)
    hops = {}
    for i in set(down) | set(up):
        if i != root:
            hops[i] = min(down.get(i, n + 1), up.get(i, n + 1))
    return dict(sorted(hops.items()))


def edge_only_targets(graph, n: int) -> list[int]:
    """Services whose outbound calls can carry a distinguishable error concentration."""
    indeg = np.zeros(n, dtype=int)
    for _, b in graph:
        indeg[b] += 1
    out = {}
    for a, b in graph:
        out.setdefault(a, []).append(b)
    return [a for a in range(n) if any(indeg[b] >= 2 for b in out.get(a, []))]


# -- normal operation ----------------------------------------------------------------


@dataclass
class SystemProfile:
    """Per-service and per-edge baselines, shared by every case of a scenario."""

    cpu: np.ndarray
    mem: np.ndarray
    latency: np.ndarray
    edge_rate: np.ndarray
    edge_latency: np.ndarray


def system_profile(config: ScenarioConfig, graph) -> SystemProfile:
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xB45E]))
    n, e = config.n_services, len(graph)
    return SystemProfile(
        cpu=rng.uniform(20.0, 40.0, n),
        mem=rng.uniform(300.0, 600.0, n),
        latency=rng.uniform(20.0, 60.0, n),
        edge_rate=config.base_rate * rng.uniform(0.75, 1.25, e),
        edge_latency=rng.uniform(10.0, 50.0, e),
    )


@dataclass
class Streams:
    """Bucket-level telemetry of one case before it is expanded into records."""

    grid: SamplingGrid
    graph: list
    metrics: dict          # name -> (V, P) gauge values
    logs: np.ndarray       # (V, P, 5) counts per level
    calls: np.ndarray      # (E, P) calls per edge
    errors: np.ndarray     # (E, P) failed calls per edge
    latency: np.ndarray    # (E, P) multiplier on the edge's base latency
    rng: np.random.Generator = field(repr=False)
    profile: SystemProfile = field(repr=False)

    def copy(self) -> "Streams":
        return Streams(self.grid, list(self.graph), {k: v.copy() for k, v in self.metrics.items()},
                       self.logs.copy(), self.calls.copy(), self.errors.copy(), self.latency.copy(),
                       self.rng, self.profile)


def _noise(rng, shape, std):
    if std == 0:
        return np.zeros(shape)
    return np.clip(rng.normal(0.0, std, shape), -NOISE_CLIP * std, NOISE_CLIP * std)


def _drift(config: ScenarioConfig, p: int) -> np.ndarray:
    if config.drift == "none" or config.drift_amplitude == 0 or p < 2:
        return np.zeros(p)
    t = np.arange(p) / (p - 1)
    if config.drift == "linear":
        return config.drift_amplitude * t
    return config.drift_amplitude * np.sin(2 * np.pi * t)


def generate_normal(config: ScenarioConfig, graph, rng: np.random.Generator | None = None,
                    profile: SystemProfile | None = None, start: int = EPOCH) -> Streams:
    """Fault-free telemetry: noisy gauges plus optional drift, Poisson traffic, status 200."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    profile = profile or system_profile(config, graph)
    n, p = config.n_services, config.points
    drift = _drift(config, p)
    metrics = {}
    for name in METRICS:
        base = getattr(profile, name)[:, None]
        metrics[name] = base * (1.0 + _noise(rng, (n, p), config.noise_std)) + drift[None, :]
    rates = np.array([config.log_rate / 2, config.log_rate, 0.2, 0.05, 0.0])
    logs = rng.poisson(np.broadcast_to(rates, (n, p, 5))).astype(np.int64)
    calls = rng.poisson(np.broadcast_to(profile.edge_rate[:, None], (len(graph), p))).astype(np.int64)
    grid = SamplingGrid(start - start % config.interval, config.interval, p)
    return Streams(grid, list(graph), metrics, logs, calls, np.zeros_like(calls),
                   np.ones(calls.shape), rng, profile)


# -- fault injection -----------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    root: int
    fault_type: str
    inject_start: int
    inject_end: int
    affected: dict      # service -> hop count
    elevation: dict     # service -> latency elevation factor beyond baseline
    decoy: int | None = None


def _window(grid: SamplingGrid, spec: FaultSpec, shift: int) -> slice:
    s = spec.start // grid.interval + shift
    e = -(-spec.end // grid.interval) + shift
    return slice(min(s, grid.points), min(e, grid.points))


def inject_fault(streams: Streams, spec: FaultSpec, config: ScenarioConfig):
    """Apply one fault to a copy of ``streams``; returns ``(streams, GroundTruth)``."""
    n = config.n_services
    grid = streams.grid
    if not 0 <= spec.target < n:
        raise UnknownService(f"fault target {spec.target} not in 0..{n - 1}")
    if spec.start < 0 or spec.end > config.duration or spec.start >= spec.end:
        raise IntervalOutOfRange(f"fault interval [{spec.start}, {spec.end}) outside [0, {config.duration}]")
    out = streams.copy()
    rng = out.rng
    r = spec.target
    graph = out.graph
    t0 = grid.start + spec.start
    t1 = grid.start + spec.end

    if config.scenario == "edge_only":
        _edge_only_errors(out, r, _window(grid, spec, 0), config.error_fraction)
        return out, GroundTruth(r, spec.fault_type, t0, t1, {}, {})

    sev = spec.severity
    hops = propagation_hops(graph, r, n)
    elevation = {r: sev}
    elevation.update({i: sev * config.attenuation ** d for i, d in hops.items()})
    shift = {r: 0, **hops}
    decoy = None
    if config.scenario == "deviation_inversion" and hops:
        near = [i for i, d in hops.items() if d == 1]
        if near:
            decoy = int(rng.choice(near))
            elevation[decoy] = sev * config.inversion_factor

    inbound = {}
    for e_idx, (a, b) in enumerate(graph):
        inbound.setdefault(b, []).append(e_idx)

    for i, eps in elevation.items():
        w = _window(grid, spec, shift[i])
        if w.start >= w.stop:
            continue
        out.metrics["latency"][i, w] *= 1.0 + eps
        for e_idx in inbound.get(i, []):
            out.latency[e_idx, w] *= 1.0 + eps
        is_source = i == r or i == decoy
        scale = eps if is_source else sev * config.attenuation ** shift[i]
        kind = spec.fault_type
        if kind == "cpu_hog" and is_source:
            out.metrics["cpu"][i, w] = np.minimum(100.0, out.metrics["cpu"][i, w] + 20.0 * scale)
        elif kind == "mem_leak" and is_source:
            k = w.stop - w.start
            ramp = np.arange(1, k + 1) / k
            out.metrics["mem"][i, w] += out.profile.mem[i] * 0.5 * scale * ramp
        elif kind == "error_storm":
            frac = min(0.95, 0.3 * scale)
            for e_idx in inbound.get(i, []):
                out.errors[e_idx, w] = rng.binomial(out.calls[e_idx, w], frac)
            out.logs[i, w, 3] += rng.poisson(5.0 * scale, w.stop - w.start)
        if i != r and not is_source:
            out.logs[i, w, 2] += rng.poisson(2.0 * eps, w.stop - w.start)
    return out, GroundTruth(r, spec.fault_type, t0, t1, hops, elevation, decoy)


def _edge_only_errors(streams: Streams, root: int, w: slice, frac: float):
    """Same inbound error distribution for every callee; root's calls absorb errors first."""
    rng = streams.rng
    inbound: dict[int, list[int]] = {}
    for e_idx, (a, b) in enumerate(streams.graph):
        inbound.setdefault(b, []).append(e_idx)
    for b, edges in sorted(inbound.items()):
        from_root = [e for e in edges if streams.graph[e][0] == root]
        others = [e for e in edges if streams.graph[e][0] != root]
        for t in range(w.start, w.stop):
            counts = streams.calls[edges, t]
            k = int(rng.binomial(int(counts.sum()), frac))
            if from_root:
                take = min(k, int(streams.calls[from_root[0], t]))
                streams.errors[from_root[0], t] = take
                k -= take
                pool = others
            else:
                pool = edges
            if pool and k > 0:
                streams.errors[pool, t] = rng.multivariate_hypergeometric(
                    streams.calls[pool, t].astype(np.int64), k)


# -- emission ------------------------------------------------------------------------


def _records(streams: Streams, names, case_id: str):
    grid, rng, prof = streams.grid, streams.rng, streams.profile
    n, p = streams.logs.shape[:2]
    ts = grid.timestamps()

    # metrics: one sample per bucket start, ordered by time then service then metric
    mvals = np.stack([streams.metrics[m] for m in METRICS], axis=-1)        # (V, P, M)
    metrics = pd.DataFrame({
        "timestamp": np.repeat(ts, n * len(METRICS)),
        "service": np.tile(np.repeat(np.asarray(names, dtype=object), len(METRICS)), p),
        "metric_name": np.tile(np.asarray(METRICS, dtype=object), n * p),
        "value": np.transpose(mvals, (1, 0, 2)).reshape(-1),
    })

    counts = np.transpose(streams.logs, (1, 0, 2)).reshape(-1)              # (P, V, L) flattened
    reps = np.repeat(np.arange(counts.size), counts)
    b_idx, rem = np.divmod(reps, n * len(LOG_LEVELS))
    s_idx, l_idx = np.divmod(rem, len(LOG_LEVELS))
    logs = pd.DataFrame({
        "timestamp": ts[b_idx] + rng.integers(0, grid.interval, reps.size),
        "service": np.asarray(names, dtype=object)[s_idx],
        "level": np.asarray(LOG_LEVELS, dtype=object)[l_idx],
        "template_id": np.char.add("T", l_idx.astype(str)).astype(object),
    })

    calls = streams.calls.reshape(-1)
    reps = np.repeat(np.arange(calls.size), calls)
    e_idx, t_idx = np.divmod(reps, p)
    # the first `errors` calls of each (edge, bucket) fail
    first = np.repeat(np.cumsum(calls) - calls, calls)
    rank = np.arange(reps.size) - first
    failed = rank < streams.errors.reshape(-1)[reps]
    graph = np.asarray(streams.graph, dtype=np.int64).reshape(-1, 2)
    base = prof.edge_latency[e_idx] * streams.latency[e_idx, t_idx]
    lat = base * np.exp(rng.normal(0.0, 0.1, reps.size))
    seq = np.arange(reps.size)
    traces = pd.DataFrame({
        "timestamp": ts[t_idx] + rng.integers(0, grid.interval, reps.size),
        "trace_id": np.char.add(f"{case_id}-t", seq.astype(str)).astype(object),
        "span_id": np.char.add("s", seq.astype(str)).astype(object),
        "caller": np.asarray(names, dtype=object)[graph[e_idx, 0]] if reps.size else [],
        "callee": np.asarray(names, dtype=object)[graph[e_idx, 1]] if reps.size else [],
        "latency_ms": lat,
        "status_code": np.where(failed, 500, 200),
    })
    logs = logs.sort_values("timestamp", kind="stable")
    traces = traces.sort_values("timestamp", kind="stable")
    return metrics[METRIC_COLUMNS], logs[LOG_COLUMNS], traces[TRACE_COLUMNS]


def service_names(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"svc{i:0{width}d}" for i in range(n)]


def fault_plan(config: ScenarioConfig, graph) -> list[FaultSpec]:
    """Explicit plan if configured, otherwise ``n_cases`` entries cycling over (target, type) strata."""
    if config.fault_plan:
        return list(config.fault_plan)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x9A7]))
    if config.scenario == "edge_only":
        targets = edge_only_targets(graph, config.n_services)
        if not targets:
            raise ConfigError("topology has no service usable for the edge_only scenario")
    else:
        targets = list(range(config.n_services))
    strata = [(t, ft) for t in targets for ft in config.fault_types]
    order = rng.permutation(len(strata))
    lo, hi = config.severity_range
    end = min(config.duration, config.fault_start + config.fault_duration)
    plan = []
    for i in range(config.n_cases):
        t, ft = strata[order[i % len(strata)]]
        plan.append(FaultSpec(ft, int(t), config.fault_start, end, float(rng.uniform(lo, hi))))
    return plan


def generate_case(config: ScenarioConfig, graph, spec: FaultSpec, index: int,
                  profile: SystemProfile | None = None):
    """Streams and ground truth for plan entry ``index`` using its derived sub-seed."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xCA5E, index]))
    start = EPOCH + index * 100_000
    normal = generate_normal(config, graph, rng, profile, start=start)
    return inject_fault(normal, spec, config)


def case_id_for(index: int) -> str:
    return f"case{index:04d}"


def emit_dataset(config: ScenarioConfig, out_dir) -> Path:
    """Write a full dataset (meta, per-case telemetry, ground truth) under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    graph = generate_topology(config)
    profile = system_profile(config, graph)
    names = service_names(config.n_services)
    plan = fault_plan(config, graph)
    types = sorted(set(config.fault_types) | {s.fault_type for s in plan})
    write_meta(out, make_services(names), config.interval, types)
    write_json(out / "scenario.json", config.to_json())
    (out / "cases").mkdir(exist_ok=True)
    for i, spec in enumerate(plan):
        streams, gt = generate_case(config, graph, spec, i, profile)
        write_case(out / "cases" / case_id_for(i), streams, gt, names)
    return out


def write_case(case_dir: Path, streams: Streams, gt: GroundTruth, names):
    """Write one case directory atomically (temp dir, then rename)."""
    case_dir = Path(case_dir)
    metrics, logs, traces = _records(streams, names, case_dir.name)
    tmp = Path(tempfile.mkdtemp(prefix=f".{case_dir.name}.", dir=case_dir.parent))
    try:
        metrics.to_csv(tmp / "metrics.csv", index=False, float_format="%.6f", lineterminator="\n")
        logs.to_csv(tmp / "logs.csv", index=False, lineterminator="\n")
        traces.to_csv(tmp / "traces.csv", index=False, float_format="%.3f", lineterminator="\n")
        gt_obj = {
            "root_cause": names[gt.root],
            "fault_type": gt.fault_type,
            "inject_start": int(gt.inject_start),
            "inject_end": int(gt.inject_end),
        }
        (tmp / "ground_truth.json").write_text(json.dumps(gt_obj, indent=2) + "\n", encoding="utf-8")
        if case_dir.exists():
            shutil.rmtree(case_dir)
        os.replace(tmp, case_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def onset_bucket(series: np.ndarray, baseline: slice, scan_from: int, k: float = 3.0):
    """First bucket at or after ``scan_from`` deviating more than k sigma from the baseline, else None."""
    base = series[baseline]
    mu = base.mean()
    sd = base.std(ddof=1) if base.size > 1 else 0.0
    dev = np.abs(series[scan_from:] - mu)
    hit = np.flatnonzero(dev > k * sd + 1e-9)
    return None if hit.size == 0 else scan_from + int(hit[0])
