import csv
import json
import shutil

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from rcagraph import ScenarioConfig, emit_dataset, validate_dataset
from rcagraph.crd import CRDConfig
from rcagraph.errors import CheckpointMismatch, EmptyDataset
from rcagraph.model import ModelConfig
from rcagraph.pipeline import (
    ABLATIONS,
    Checkpoint,
    DataConfig,
    TrainConfig,
    assign_split,
    evaluate_cases,
    infer,
    prepare_all,
    rank_services,
    run_ablation_suite,
    scores_to_ranking,
    stratified_split,
    train,
    validation_slice,
    write_training_log,
)
from rcagraph.types import Dataset, FaultCase, make_services

SMALL_MODEL = ModelConfig(d_temp=16, n_heads=2, d_ff=32, d_spat=16, mlp_hidden=16)


def synthetic_dataset(strata_sizes, n_services=4):
    svc = make_services([f"s{i}" for i in range(n_services)])
    cases, k = [], 0
    for (ft, root), n in strata_sizes.items():
        for _ in range(n):
            cases.append(FaultCase(f"c{k:03d}", None, 0, 10, svc[root], ft))
            k += 1
    return Dataset(svc, 5, tuple(sorted({ft for ft, _ in strata_sizes})), tuple(cases))


# -- splitting ------------------------------------------------------------------------

def test_exact_divisibility():
    ds = synthetic_dataset({("a", 0): 10, ("a", 1): 10, ("b", 0): 10, ("b", 2): 10})
    train_c, test_c = stratified_split(ds, 0.8, 0)
    for key in [("a", "s0"), ("a", "s1"), ("b", "s0"), ("b", "s2")]:
        assert sum((c.fault_type, c.root_cause.name) == key for c in train_c) == 8
        assert sum((c.fault_type, c.root_cause.name) == key for c in test_c) == 2


def test_split_determinism():
    ds = synthetic_dataset({("a", 0): 7, ("a", 1): 9, ("b", 3): 5})
    a = stratified_split(ds, 0.6, 1)
    assert a == stratified_split(ds, 0.6, 1)
    others = [stratified_split(ds, 0.6, s) for s in range(2, 8)]
    assert any(o != a for o in others)


def test_singleton_stratum_goes_to_train():
    ds = synthetic_dataset({("a", 0): 1, ("a", 1): 10})
    train_c, test_c = stratified_split(ds, 0.8, 0)
    assert "c000" in {c.case_id for c in train_c}
    assert all(c.split_tag == "train" for c in train_c) and all(c.split_tag == "test" for c in test_c)


def test_empty_dataset_raises():
    with pytest.raises(EmptyDataset):
        stratified_split(synthetic_dataset({}), 0.8, 0)


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.tuples(st.sampled_from("xyz"), st.integers(0, 3)), st.integers(1, 12), min_size=1),
       st.floats(0.1, 0.95), st.integers(0, 1000))
def test_split_properties(sizes, fraction, seed):
    ds = synthetic_dataset(sizes)
    train_c, test_c = stratified_split(ds, fraction, seed)
    tr, te = {c.case_id for c in train_c}, {c.case_id for c in test_c}
    assert not tr & te and len(tr | te) == len(ds.cases)
    for key, n in sizes.items():
        got = sum((c.fault_type, c.root_cause.index) == key for c in train_c)
        if n == 1:
            assert got == 1
        else:
            assert abs(got - fraction * n) <= 1 + 1e-9


def test_validation_slice_is_a_stratified_tenth():
    ds = assign_split(synthetic_dataset({("a", 0): 20, ("a", 1): 20, ("b", 2): 20}), 5 / 6, 0)
    train_c = ds.tagged("train")
    val = validation_slice(train_c, 0.1, 0)
    assert len(val) == 5
    assert set(val) <= {c.case_id for c in train_c}


# -- ranking ---------------------------------------------------------------------------

def test_ranking_examples():
    svc = make_services(["svc0", "svc1", "svc2"])
    assert [s.name for s in scores_to_ranking([0.2, 0.9, 0.5], svc)] == ["svc1", "svc2", "svc0"]
    assert rank_services([0.5, 0.5]) == [0, 1]


@given(st.lists(st.sampled_from([0.1, 0.3, 0.5, 0.7]), min_size=1, max_size=12))
def test_ranking_sorts_descending_with_index_tiebreak(scores):
    order = rank_services(scores)
    assert sorted(order) == list(range(len(scores)))
    for a, b in zip(order, order[1:]):
        assert scores[a] > scores[b] or (scores[a] == scores[b] and a < b)


# -- training ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = emit_dataset(ScenarioConfig(n_services=3, n_cases=20, seed=4),
                        tmp_path_factory.mktemp("toy") / "d")
    return assign_split(validate_dataset(root), 0.75, 0)


@pytest.fixture(scope="module")
def toy_run(toy):
    return train(toy, SMALL_MODEL, CRDConfig(), TrainConfig(epochs=30, patience=30, learning_rate=3e-3))


def test_training_reduces_total_loss(toy_run):
    rows = toy_run.log_rows
    first = [r[5] for r in rows if r[0] == 0]
    last_step = rows[-1][0]
    last = [r[5] for r in rows if r[0] == last_step]
    assert np.mean(last) < np.mean(first)


@pytest.mark.parametrize("ablation,col", [("no_tcd", 3), ("no_sco", 4)])
def test_ablated_component_is_excluded_from_total(toy, ablation, col):
    res = train(toy, SMALL_MODEL, CRDConfig(), TrainConfig(epochs=2, ablation=ablation))
    cfg = CRDConfig()
    for step, cid, ce, tcd, sco, total in res.log_rows:
        assert (tcd, sco)[col - 3] == 0.0
        assert abs(total - (ce + cfg.lambda1 * tcd + cfg.lambda2 * sco)) < 1e-12


def test_full_log_total_is_weighted_sum(toy_run):
    for _, _, ce, tcd, sco, total in toy_run.log_rows:
        assert abs(total - (ce + 0.5 * tcd + 0.2 * sco)) < 1e-12


def test_training_log_csv(toy_run, tmp_path):
    write_training_log(toy_run.log_rows, tmp_path / "log.csv")
    with open(tmp_path / "log.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "case_id", "ce", "tcd", "sco", "total"]
    assert len(rows) == len(toy_run.log_rows) + 1


def test_early_stopping_halts_within_patience(toy):
    res = train(toy, SMALL_MODEL, CRDConfig(), TrainConfig(epochs=60, patience=3))
    hist = res.history
    best = res.checkpoint.best_epoch
    assert len(hist) - 1 - best <= 3
    assert hist[best]["val_ac1"] == max(h["val_ac1"] for h in hist)


def test_checkpoint_round_trip_and_inference(toy_run, toy, tmp_path):
    ck = toy_run.checkpoint
    ck.save(tmp_path / "ck.json")
    again = Checkpoint.load(tmp_path / "ck.json")
    case = toy.tagged("test")[0]
    a = infer(ck, case, toy)
    b = infer(again, case, toy)
    assert a.scores.tobytes() == b.scores.tobytes()
    assert [s.name for s in a.ranking] == [s.name for s in b.ranking]
    assert a.top == a.ranking[0]
    assert np.all((a.scores >= 0) & (a.scores <= 1))


def test_checkpoint_rejects_other_service_sets(toy_run, toy):
    other = Dataset(make_services(["x", "y", "z"]), toy.interval, toy.fault_types, ())
    with pytest.raises(CheckpointMismatch):
        infer(toy_run.checkpoint, toy.cases[0], other)
    with pytest.raises(CheckpointMismatch):
        Checkpoint.from_json({"format": "something else"})


def test_split_is_recorded_in_checkpoint(toy_run, toy):
    sp = toy_run.checkpoint.split
    assert set(sp["test"]) == {c.case_id for c in toy.tagged("test")}
    assert set(sp["train"]) | set(sp["validation"]) == {c.case_id for c in toy.tagged("train")}


def test_normalizers_ignore_test_files(toy, tmp_path):
    copy_root = tmp_path / "copy"
    shutil.copytree(toy.cases[0].telemetry.metrics.parent.parent.parent, copy_root)
    ds = assign_split(validate_dataset(copy_root), 0.75, 0)
    cfg = TrainConfig(epochs=1)
    before = train(ds, SMALL_MODEL, CRDConfig(), cfg).checkpoint.featurizer
    for c in ds.tagged("test"):
        shutil.rmtree(c.telemetry.metrics.parent)
    after = train(ds, SMALL_MODEL, CRDConfig(), cfg).checkpoint.featurizer
    assert after.feature_normalizer == before.feature_normalizer
    assert after.edge_normalizer == before.edge_normalizer
    assert after.static_pairs == before.static_pairs


def test_ablation_suite_table(toy):
    tc = TrainConfig(epochs=2)
    table = run_ablation_suite(toy, SMALL_MODEL, CRDConfig(), tc)
    md = table.to_markdown().splitlines()
    assert md[0] == "| Variant | AC@1 | AC@3 | Avg@5 |"
    assert len(md) == 2 + len(ABLATIONS)
    again = run_ablation_suite(toy, SMALL_MODEL, CRDConfig(), tc)
    assert again.to_markdown() == table.to_markdown()


def test_prepare_all_window_length(toy):
    prep = prepare_all(toy, DataConfig(window=6))
    p = next(iter(prep.values()))
    assert p.fault.features.shape[1] == 6 and p.normal.grid.end == p.fault.grid.start
