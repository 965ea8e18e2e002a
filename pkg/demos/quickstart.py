"""Simulate a small system, train a ranker on it, and inspect one diagnosis.

    python demos/quickstart.py [workdir]

Takes a minute or two on a CPU.
"""

import sys
import tempfile
from pathlib import Path

from rcagraph import CRDConfig, DataConfig, ModelConfig, ScenarioConfig, TrainConfig
from rcagraph import emit_dataset, infer, train_and_evaluate, validate_dataset
from rcagraph.pipeline import assign_split


def main(workdir: Path):
    scenario = ScenarioConfig(n_services=8, topology="tree", n_cases=90, seed=5)
    data = emit_dataset(scenario, workdir / "data")
    ds = assign_split(validate_dataset(data), 2 / 3, seed=0)
    print(f"{len(ds.services)} services, {len(ds.tagged('train'))} train / {len(ds.tagged('test'))} test cases")

    result, report = train_and_evaluate(ds, ModelConfig(), CRDConfig(), TrainConfig(), DataConfig())
    print(f"stopped on epoch {result.checkpoint.best_epoch}")
    print(report.render())

    case = ds.tagged("test")[0]
    sv = infer(result.checkpoint, case, ds)
    print(f"\n{case.case_id}: injected {case.fault_type} into {case.root_cause}")
    for pos, svc in enumerate(sv.ranking[:3], start=1):
        print(f"  {pos}. {svc}  score {sv.scores[svc.index]:.3f}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
