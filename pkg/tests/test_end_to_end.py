import numpy as np
import pytest

from agents.data_generation_agent import DataGenerationAgent
from main import ExperimentOrchestrator
from models.config_model import RunConfig

SEEDS = (0, 1, 2)
MODES = ("random-init", "mfl-only", "full")


def _dice_by_shots(seed, mode, pool, out_dir):
    config = RunConfig(seed=seed, out_dir=out_dir, meta={"mode": mode})
    orchestrator = ExperimentOrchestrator(config)
    run_dir = orchestrator.cmd_meta_train(out_dir, pool=pool)
    reports = orchestrator.meta_test_reports(orchestrator._load_state(run_dir), pool, run_id=mode)
    return {report.shots: report.mean_dice() for report in reports}


@pytest.mark.slow
def test_full_method_beats_the_ablations_on_the_held_out_domain(tmp_path):
    results = {mode: [] for mode in MODES}
    for seed in SEEDS:
        base = RunConfig(seed=seed)
        pool = DataGenerationAgent(base.data).build_pool(seed, shots=base.finetune.shots,
                                                         stride=base.network.stride)
        for mode in MODES:
            dice = _dice_by_shots(seed, mode, pool, tmp_path / f"{mode}-{seed}")
            results[mode].append(dice)
        full = results["full"][-1]
        assert full[5] >= full[1], f"seed {seed}: five-shot {full[5]:.4f} below one-shot {full[1]:.4f}"

    one_shot = {mode: np.mean([r[1] for r in results[mode]]) for mode in MODES}
    assert one_shot["full"] >= one_shot["random-init"] + 0.05
    assert one_shot["full"] >= one_shot["mfl-only"] + 0.01
