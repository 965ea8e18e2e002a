"""Splitting, training, inference and the ablation suite."""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import crd
from .crd import CRDConfig
from .dyngraph import EdgeNormalizer, aggregate_edges, build_snapshot, static_snapshot
from .errors import CheckpointMismatch, EmptyDataset, NonFiniteLoss
from .ingestion import (
    AlignedWindow,
    CaseTables,
    FeatureNormalizer,
    apply_normalizer,
    fit_normalizer,
    load_case_tables,
    segment_windows,
)
from .metrics import EvalReport, evaluate
from .model import ModelConfig, RCAModel, propagation_matrix
from .types import Dataset, FaultCase, ServiceId

log = logging.getLogger(__name__)

ABLATIONS = ("full", "no_tcd", "no_sco", "vanilla_gat", "static_graph")
ABLATION_LABELS = {
    "full": "full model",
    "no_tcd": "w/o TCD",
    "no_sco": "w/o SCO",
    "vanilla_gat": "w/o H-GAT",
    "static_graph": "w Static",
}
LOG_COLUMNS = ("step", "case_id", "ce", "tcd", "sco", "total")


@dataclass
class DataConfig:
    window: int = 12
    stride: int = 0
    alpha: float = 0.5
    extra_error_codes: list = field(default_factory=list)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 16
    patience: int = 20
    seed: int = 0
    ablation: str = "full"
    train_fraction: float = 2 / 3
    val_fraction: float = 0.1
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("epochs, patience and batch_size must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


# -- splitting -----------------------------------------------------------------------


def _allocate(strata: dict, fraction: float, rng) -> set[str]:
    """Largest-remainder allocation of train slots per stratum; returns train case ids."""
    keys = sorted(strata)
    n_total = sum(len(strata[k]) for k in keys)
    base = {}
    for k in keys:
        n = len(strata[k])
        base[k] = n if n == 1 else math.floor(fraction * n)
    extra = int(round(fraction * n_total)) - sum(base.values())
    tiebreak = {k: t for k, t in zip(keys, rng.permutation(len(keys)))}
    cands = sorted((k for k in keys if len(strata[k]) > 1 and base[k] < len(strata[k])),
                   key=lambda k: (-(fraction * len(strata[k]) - base[k]), tiebreak[k]))
    for k in cands[:max(extra, 0)]:
        base[k] += 1
    chosen = set()
    for k in keys:
        members = sorted(strata[k])
        perm = rng.permutation(len(members))
        chosen.update(members[i] for i in perm[:base[k]])
    return chosen


def _strata(cases) -> dict:
    out: dict = {}
    for c in cases:
        out.setdefault((c.fault_type, c.root_cause.name), []).append(c.case_id)
    return out


def stratified_split(dataset: Dataset, train_fraction: float, seed: int):
    """Disjoint train/test case lists stratified by (fault_type, root cause).

    Each stratum contributes floor or ceil of its proportional share so the
    global train count equals round(train_fraction * N). Single-case strata go
    to train. Returned cases carry their split tag.
    """
    if not dataset.cases:
        raise EmptyDataset("cannot split an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17]))
    train_ids = _allocate(_strata(dataset.cases), train_fraction, rng)
    train = [replace(c, split_tag="train") for c in dataset.cases if c.case_id in train_ids]
    test = [replace(c, split_tag="test") for c in dataset.cases if c.case_id not in train_ids]
    return train, test


def assign_split(dataset: Dataset, train_fraction: float, seed: int) -> Dataset:
    train, test = stratified_split(dataset, train_fraction, seed)
    tags = {c.case_id: c.split_tag for c in train + test}
    return dataset.with_cases(replace(c, split_tag=tags[c.case_id]) for c in dataset.cases)


def validation_slice(train_cases: Sequence[FaultCase], fraction: float, seed: int) -> list[str]:
    if fraction <= 0 or len(train_cases) < 2:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1]))
    keep = _allocate(_strata(train_cases), 1.0 - fraction, rng)
    val = [c.case_id for c in train_cases if c.case_id not in keep]
    return val or [sorted(c.case_id for c in train_cases)[-1]]


# -- data preparation ----------------------------------------------------------------


@dataclass
class PreparedCase:
    """Raw windows and per-window edge aggregates of one case."""

    case: FaultCase
    normal: AlignedWindow
    fault: AlignedWindow
    normal_edges: dict
    fault_edges: dict


def discover_metric_names(cases: Sequence[FaultCase]) -> list[str]:
    import pandas as pd

    names = set()
    for c in cases:
        col = pd.read_csv(c.telemetry.metrics, usecols=["metric_name"], dtype=str)["metric_name"]
        names.update(col.unique())
    return sorted(names)


def prepare_case(case: FaultCase, dataset: Dataset, data_cfg: DataConfig,
                 metric_names: Sequence[str], tables: CaseTables | None = None) -> PreparedCase:
    tables = tables if tables is not None else load_case_tables(case.telemetry)
    seg = segment_windows(case, dataset.interval, data_cfg.window, 0, services=dataset.services,
                          metric_names=metric_names, tables=tables,
                          extra_error_codes=data_cfg.extra_error_codes)
    codes = data_cfg.extra_error_codes
    return PreparedCase(
        case, seg.normal, seg.fault,
        aggregate_edges(tables.traces, seg.normal.grid, dataset.services, codes),
        aggregate_edges(tables.traces, seg.fault.grid, dataset.services, codes),
    )


@dataclass
class Featurizer:
    """Fitted preprocessing state: feature scaling, edge scaling and the static edge set."""

    services: tuple
    metric_names: list
    feature_normalizer: FeatureNormalizer
    edge_normalizer: EdgeNormalizer
    static_pairs: list
    alpha: float

    @classmethod
    def fit(cls, prepared: Sequence[PreparedCase], services, metric_names, alpha) -> "Featurizer":
        windows = [w for p in prepared for w in (p.normal, p.fault)]
        edge_maps = [m for p in prepared for m in (p.normal_edges, p.fault_edges)]
        pairs = sorted({(a.index, b.index) for m in edge_maps for a, b in m})
        return cls(tuple(services), list(metric_names), fit_normalizer(windows),
                   EdgeNormalizer.fit(edge_maps), pairs, alpha)

    def snapshot(self, edges, window: AlignedWindow, static: bool = False):
        if static:
            return static_snapshot(self.static_pairs, window.grid, self.services)
        return build_snapshot(None, window.grid, self.edge_normalizer, self.alpha, self.services,
                              edges=edges)

    def tensors(self, p: PreparedCase, ablation: str, hops: int):
        static = ablation == "static_graph"
        unit = ablation == "vanilla_gat"
        out = {}
        for tag, win, edges in (("fault", p.fault, p.fault_edges), ("normal", p.normal, p.normal_edges)):
            x = apply_normalizer(win.features, self.feature_normalizer)
            snap = self.snapshot(edges, win, static)
            prop, mask = propagation_matrix(torch.as_tensor(snap.weight_matrix()), unit=unit)
            out[tag] = (torch.as_tensor(x), prop, mask)
        fault_pairs = {(a.index, b.index) for a, b in p.fault_edges}
        out["affected"] = torch.as_tensor(
            crd.affected_mask(p.case.root_cause.index, fault_pairs, len(self.services), hops))
        out["root"] = p.case.root_cause.index
        return out

    def to_json(self) -> dict:
        return {
            "services": [s.name for s in self.services],
            "metric_names": list(self.metric_names),
            "feature_normalizer": self.feature_normalizer.to_json(),
            "edge_normalizer": self.edge_normalizer.to_json(),
            "static_pairs": [list(p) for p in self.static_pairs],
            "alpha": self.alpha,
        }

    @classmethod
    def from_json(cls, obj, services) -> "Featurizer":
        return cls(tuple(services), list(obj["metric_names"]),
                   FeatureNormalizer.from_json(obj["feature_normalizer"]),
                   EdgeNormalizer.from_json(obj["edge_normalizer"]),
                   [tuple(p) for p in obj["static_pairs"]], float(obj["alpha"]))


@dataclass
class Batch:
    case_ids: list
    x: torch.Tensor
    prop: torch.Tensor
    mask: torch.Tensor
    x_norm: torch.Tensor
    prop_norm: torch.Tensor
    mask_norm: torch.Tensor
    affected: torch.Tensor
    root: torch.Tensor

    def take(self, idx) -> "Batch":
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Batch([self.case_ids[i] for i in idx.tolist()],
                     *(getattr(self, f)[idx] for f in
                       ("x", "prop", "mask", "x_norm", "prop_norm", "mask_norm", "affected", "root")))

    def __len__(self):
        return len(self.case_ids)


def make_batch(featurizer: Featurizer, prepared: Sequence[PreparedCase], ablation: str, hops: int) -> Batch:
    ts = [featurizer.tensors(p, ablation, hops) for p in prepared]
    return Batch(
        [p.case.case_id for p in prepared],
        torch.stack([t["fault"][0] for t in ts]),
        torch.stack([t["fault"][1] for t in ts]),
        torch.stack([t["fault"][2] for t in ts]),
        torch.stack([t["normal"][0] for t in ts]),
        torch.stack([t["normal"][1] for t in ts]),
        torch.stack([t["normal"][2] for t in ts]),
        torch.stack([t["affected"] for t in ts]),
        torch.tensor([t["root"] for t in ts], dtype=torch.long),
    )


# -- checkpoint ----------------------------------------------------------------------

CHECKPOINT_FORMAT = "rcagraph.checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    crd_config: CRDConfig
    train_config: TrainConfig
    data_config: DataConfig
    featurizer: Featurizer
    params: dict
    split: dict
    best_epoch: int = 0

    @property
    def services(self):
        return self.featurizer.services

    def build_model(self) -> RCAModel:
        model = RCAModel(self.model_config)
        model.load_params_json(self.params)
        model.eval()
        return model

    def to_json(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": self.train_config.seed,
            "model_config": self.model_config.to_json(),
            "crd_config": self.crd_config.to_json(),
            "train_config": asdict(self.train_config),
            "data_config": asdict(self.data_config),
            "featurizer": self.featurizer.to_json(),
            "split": self.split,
            "best_epoch": self.best_epoch,
            "params": self.params,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_json(cls, obj) -> "Checkpoint":
        if obj.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointMismatch("not a checkpoint file")
        if int(obj.get("version", -1)) != CHECKPOINT_VERSION:
            raise CheckpointMismatch(f"unsupported checkpoint version {obj.get('version')}")
        from .types import make_services

        services = make_services(obj["featurizer"]["services"])
        return cls(
            ModelConfig(**obj["model_config"]),
            CRDConfig(**obj["crd_config"]),
            TrainConfig(**obj["train_config"]),
            DataConfig(**obj["data_config"]),
            Featurizer.from_json(obj["featurizer"], services),
            obj["params"],
            obj["split"],
            int(obj.get("best_epoch", 0)),
        )

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


# -- training ------------------------------------------------------------------------


def case_losses(model: RCAModel, batch: Batch, crd_cfg: CRDConfig, ablation: str):
    """Per-case (ce, tcd, sco, total) tensors for one batch."""
    out = model(batch.x, batch.prop, batch.mask)
    lam1 = 0.0 if ablation == "no_tcd" else crd_cfg.lambda1
    lam2 = 0.0 if ablation == "no_sco" else crd_cfg.lambda2
    ce = crd.ce_loss(out.logits, batch.root)
    zeros = torch.zeros_like(ce)
    if lam1 > 0:
        norm = model(batch.x_norm, batch.prop_norm, batch.mask_norm)
        tcd = crd.tcd_loss(out.spatiotemporal, norm.spatiotemporal, batch.root,
                           crd_cfg.delta, crd_cfg.tcd_sign)
    else:
        tcd = zeros
    sco = crd.sco_loss(out.scores, batch.root, batch.affected, crd_cfg.margin_m) if lam2 > 0 else zeros
    total = ce + lam1 * tcd + lam2 * sco
    return ce, tcd, sco, total, out


def rank_services(scores) -> list[int]:
    """Descending score order; ties go to the lower service index."""
    s = np.asarray(scores, dtype=np.float64)
    return [int(i) for i in np.lexsort((np.arange(s.size), -s))]


def _ac1(model, batch: Batch) -> tuple[float, float]:
    model.eval()
    with torch.no_grad():
        out = model(batch.x, batch.prop, batch.mask)
        ce = float(crd.ce_loss(out.logits, batch.root).mean())
    hits = [rank_services(s)[0] == int(r) for s, r in zip(out.scores.numpy(), batch.root)]
    return float(np.mean(hits)), ce


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_rows: list
    history: list


def train(dataset: Dataset, model_cfg: ModelConfig, crd_cfg: CRDConfig, train_cfg: TrainConfig,
          data_cfg: DataConfig | None = None, *, prepared: dict | None = None) -> TrainResult:
    """Fit a model on the dataset's train-tagged cases.

    ``prepared`` optionally maps case_id -> PreparedCase so several runs can
    share ingestion work. Early stopping keeps the parameters of the epoch
    with the best validation AC@1 (ties: lower validation cross-entropy).
    """
    data_cfg = data_cfg or DataConfig()
    train_cases = dataset.tagged("train")
    if not train_cases:
        raise EmptyDataset("no train-tagged cases; assign a split first")
    test_ids = [c.case_id for c in dataset.tagged("test")]
    prepared = prepared if prepared is not None else {}
    metric_names = None
    missing = [c for c in train_cases if c.case_id not in prepared]
    if missing or not prepared:
        metric_names = discover_metric_names(train_cases)
        for c in missing:
            prepared[c.case_id] = prepare_case(c, dataset, data_cfg, metric_names)
    train_prep = [prepared[c.case_id] for c in train_cases]
    metric_names = [n[len("metric."):] for n in train_prep[0].fault.feature_names if n.startswith("metric.")]

    featurizer = Featurizer.fit(train_prep, dataset.services, metric_names, data_cfg.alpha)
    val_ids = set(validation_slice(train_cases, train_cfg.val_fraction, train_cfg.seed))
    fit_prep = [p for p in train_prep if p.case.case_id not in val_ids]
    val_prep = [p for p in train_prep if p.case.case_id in val_ids]

    ablation = train_cfg.ablation
    hops = crd_cfg.affected_hops
    fit_batch = make_batch(featurizer, fit_prep, ablation, hops)
    val_batch = make_batch(featurizer, val_prep, ablation, hops) if val_prep else None

    model_cfg = replace(model_cfg, n_features=fit_batch.x.shape[-1], seed=train_cfg.seed)
    model = RCAModel(model_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                           weight_decay=train_cfg.weight_decay)
    gen = torch.Generator().manual_seed(train_cfg.seed)

    log_rows, history = [], []
    best_key, best_state, best_epoch = None, None, 0
    step = 0
    n = len(fit_batch)
    for epoch in range(train_cfg.epochs):
        model.train()
        order = torch.randperm(n, generator=gen)
        for lo in range(0, n, train_cfg.batch_size):
            b = fit_batch.take(order[lo:lo + train_cfg.batch_size])
            ce, tcd, sco, total, _ = case_losses(model, b, crd_cfg, ablation)
            loss = total.mean()
            if not torch.isfinite(loss):
                raise NonFiniteLoss(
                    f"non-finite loss at step {step}",
                    dump={"step": step, "case_ids": b.case_ids, "ce": ce.tolist(),
                          "tcd": tcd.tolist(), "sco": sco.tolist()},
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            for cid, *vals in zip(b.case_ids, ce.tolist(), tcd.tolist(), sco.tolist(), total.tolist()):
                log_rows.append((step, cid, *vals))
            step += 1

        monitor = val_batch if val_batch is not None else fit_batch
        ac1, vce = _ac1(model, monitor)
        history.append({"epoch": epoch, "val_ac1": ac1, "val_ce": vce})
        key = (ac1, -vce)
        if best_key is None or key > best_key:
            best_key, best_epoch = key, epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= train_cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    model.load_state_dict(best_state)
    model.eval()
    ckpt = Checkpoint(
        model_cfg, crd_cfg, train_cfg, data_cfg, featurizer, model.params_json(),
        {"train": sorted(c.case_id for c in train_cases if c.case_id not in val_ids),
         "validation": sorted(val_ids), "test": sorted(test_ids)},
        best_epoch,
    )
    return TrainResult(ckpt, log_rows, history)


def write_training_log(rows, path):
    import csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for step, cid, ce, tcd, sco, total in rows:
            w.writerow([step, cid, repr(ce), repr(tcd), repr(sco), repr(total)])


# -- inference -----------------------------------------------------------------------


@dataclass
class ScoreVector:
    services: tuple
    scores: np.ndarray
    logits: np.ndarray
    ranking: list      # ServiceIds, rank 1 first

    @property
    def top(self) -> ServiceId:
        return self.ranking[0]


def scores_to_ranking(scores, services) -> list:
    return [services[i] for i in rank_services(scores)]


def _check_services(checkpoint: Checkpoint, services):
    if [s.name for s in services] != [s.name for s in checkpoint.services]:
        raise CheckpointMismatch("dataset services differ from the checkpoint's service set")


def infer(checkpoint: Checkpoint, case: FaultCase, dataset: Dataset, *, model: RCAModel | None = None,
          prepared: PreparedCase | None = None) -> ScoreVector:
    """Score every service for ``case`` with the model in evaluation mode."""
    _check_services(checkpoint, dataset.services)
    model = model or checkpoint.build_model()
    feat = checkpoint.featurizer
    if prepared is None:
        prepared = prepare_case(case, dataset, checkpoint.data_config, feat.metric_names)
    t = feat.tensors(prepared, checkpoint.train_config.ablation, checkpoint.crd_config.affected_hops)
    x, prop, mask = t["fault"]
    model.eval()
    with torch.no_grad():
        out = model(x, prop, mask)
    scores, logits = out.scores.numpy().copy(), out.logits.numpy().copy()
    return ScoreVector(tuple(dataset.services), scores, logits, scores_to_ranking(scores, dataset.services))


def evaluate_cases(checkpoint: Checkpoint, dataset: Dataset, cases: Sequence[FaultCase],
                   prepared: dict | None = None) -> EvalReport:
    model = checkpoint.build_model()
    prepared = prepared or {}
    items = []
    for c in cases:
        sv = infer(checkpoint, c, dataset, model=model, prepared=prepared.get(c.case_id))
        items.append((c.case_id, sv.ranking, c.root_cause))
    return evaluate(items)


def held_out_cases(checkpoint: Checkpoint, dataset: Dataset) -> list[FaultCase]:
    ids = set(checkpoint.split.get("test", []))
    return [c for c in dataset.cases if c.case_id in ids]


def prepare_all(dataset: Dataset, data_cfg: DataConfig, cases=None) -> dict:
    cases = list(dataset.cases if cases is None else cases)
    names = discover_metric_names(cases)
    return {c.case_id: prepare_case(c, dataset, data_cfg, names) for c in cases}


def train_and_evaluate(dataset: Dataset, model_cfg: ModelConfig, crd_cfg: CRDConfig,
                       train_cfg: TrainConfig, data_cfg: DataConfig | None = None,
                       prepared: dict | None = None):
    """Split (if needed), train, and evaluate on the test cases."""
    data_cfg = data_cfg or DataConfig()
    if not dataset.tagged("train"):
        dataset = assign_split(dataset, train_cfg.train_fraction, train_cfg.seed)
    if prepared is None:
        prepared = prepare_all(dataset, data_cfg)
    result = train(dataset, model_cfg, crd_cfg, train_cfg, data_cfg, prepared=prepared)
    report = evaluate_cases(result.checkpoint, dataset, dataset.tagged("test"), prepared)
    return result, report


# -- ablations -----------------------------------------------------------------------


@dataclass
class AblationTable:
    reports: dict    # variant -> EvalReport

    def to_markdown(self) -> str:
        lines = ["| Variant | AC@1 | AC@3 | Avg@5 |", "|---|---|---|---|"]
        for v, r in self.reports.items():
            lines.append(f"| {ABLATION_LABELS[v]} | {r.ac[1]:.3f} | {r.ac[3]:.3f} | {r.avg5:.3f} |")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {v: r.summary() for v, r in self.reports.items()}


def run_ablation_suite(dataset: Dataset, model_cfg: ModelConfig, crd_cfg: CRDConfig,
                       train_cfg: TrainConfig, data_cfg: DataConfig | None = None,
                       variants: Sequence[str] = ABLATIONS, prepared: dict | None = None) -> AblationTable:
    """Train and evaluate each variant on one shared split and seed."""
    data_cfg = data_cfg or DataConfig()
    if not dataset.tagged("train"):
        dataset = assign_split(dataset, train_cfg.train_fraction, train_cfg.seed)
    if prepared is None:
        prepared = prepare_all(dataset, data_cfg)
    reports = {}
    for v in variants:
        _, rep = train_and_evaluate(dataset, model_cfg, crd_cfg, replace(train_cfg, ablation=v),
                                    data_cfg, prepared)
        log.info("variant %s: %s", v, rep.summary())
        reports[v] = rep
    return AblationTable(reports)
