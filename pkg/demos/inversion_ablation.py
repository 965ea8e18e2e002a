"""Compare the full objective against dropping each auxiliary loss.

In the deviation-inversion scenario a downstream service shows a larger
latency jump than the faulty one, so picking the most deviant service is
wrong. The table shows how much the ranking and contrast terms help there.

    python demos/inversion_ablation.py
"""

import tempfile
from pathlib import Path

from rcagraph import CRDConfig, DataConfig, ModelConfig, ScenarioConfig, TrainConfig
from rcagraph import emit_dataset, run_ablation_suite, validate_dataset

SCENARIO = ScenarioConfig(n_services=10, topology="tree", scenario="deviation_inversion",
                          severity_range=(0.4, 0.6), inversion_factor=6.0, n_cases=150, seed=3)

with tempfile.TemporaryDirectory() as tmp:
    ds = validate_dataset(emit_dataset(SCENARIO, Path(tmp) / "inv"))
    table = run_ablation_suite(ds, ModelConfig(), CRDConfig(), TrainConfig(epochs=300, patience=50),
                               DataConfig(), variants=("full", "no_tcd", "no_sco"))
    print(table.to_markdown())
