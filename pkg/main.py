#!/usr/bin/env python3
"""
Main orchestrator for dual meta-learning tissue segmentation experiments

Commands: gen-data, meta-train, meta-test, ablate, convlab.
Exit codes: 0 success, 1 failed rate check, 2 validation error, 3 divergence.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from agents.convergence_agent import ConvergenceAgent
from agents.data_generation_agent import DataGenerationAgent, DomainPool
from agents.evaluation_agent import EvaluationAgent, summary_table
from agents.meta_learning_agent import MetaLearningAgent, MetaState
from agents.meta_test_agent import MetaTestAgent
from config import Config
from knowledge.tissue_knowledge import tissue_knowledge
from models.config_model import RunConfig
from models.report_model import MetricReport
from models.unet import UNet
from utils.exceptions import CheckpointError, ConfigValidationError, DivergenceError, MetaSegError

logger = logging.getLogger("metaseg")

ABLATION_FIELDS = {"lambda1": "regularization.lambda1", "lambda2": "regularization.lambda2",
                   "capacity": "bank.capacity"}


def _with_overrides(config: RunConfig, overrides: Dict[str, object]) -> RunConfig:
    raw = config.model_dump()
    for dotted, value in overrides.items():
        target = raw
        *parents, leaf = dotted.split(".")
        for part in parents:
            target = target[part]
        target[leaf] = value
    try:
        return RunConfig.model_validate(raw)
    except ValueError as e:
        raise ConfigValidationError(str(e)) from e


class ExperimentOrchestrator:
    """
    Wires the data, training, meta-test, evaluation and convergence agents
    behind the CLI commands.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.network = UNet(config.network)
        self.data_agent = DataGenerationAgent(config.data, workers=config.lab.workers)

    # ------------------------------------------------------------ data

    def cmd_gen_data(self, out: Optional[Path] = None) -> Path:
        cfg = self.config
        directory = Path(out or cfg.data.data_dir or cfg.out_dir / "data")
        pool = self.data_agent.build_pool(cfg.seed, cfg.finetune.shots, self.network.config.stride)
        self.data_agent.write_pool(pool, directory)
        print(f"📦 Dataset written to {directory}")
        return directory

    def _pool(self) -> DomainPool:
        cfg = self.config
        if cfg.data.data_dir is not None:
            if not (Path(cfg.data.data_dir) / "manifest.txt").exists():
                raise ConfigValidationError(f"dataset directory {cfg.data.data_dir} has no manifest")
            return self.data_agent.load_pool(cfg.data.data_dir)
        return self.data_agent.build_pool(cfg.seed, cfg.finetune.shots, self.network.config.stride)

    # ------------------------------------------------------------ training and testing

    def cmd_meta_train(self, out: Optional[Path] = None, resume: bool = False,
                       pool: Optional[DomainPool] = None) -> Path:
        run_dir = Path(out or self.config.out_dir)
        pool = pool or self._pool()
        print(f"🧠 Meta-training ({self.config.meta.mode}) for {self.config.meta.iterations} iterations")
        MetaLearningAgent(self.config, self.network).run(pool, run_dir, resume=resume)
        print(f"✅ Run directory: {run_dir}")
        return run_dir

    def _load_state(self, checkpoint: Path) -> MetaState:
        checkpoint = Path(checkpoint)
        if not (checkpoint / "manifest.txt").exists() and (checkpoint / "final" / "manifest.txt").exists():
            checkpoint = checkpoint / "final"
        if not (checkpoint / "manifest.txt").exists():
            raise CheckpointError(f"no checkpoint manifest under {checkpoint}")
        return MetaLearningAgent(self.config, self.network).load(checkpoint)

    def meta_test_reports(self, state: MetaState, pool: DomainPool, run_id: str,
                          mask: Optional[str] = None) -> List[MetricReport]:
        cfg = self.config
        tester = MetaTestAgent(self.network, cfg.finetune)
        evaluator = EvaluationAgent(self.network, workers=cfg.lab.workers)
        support = (pool.support.images, pool.support.labels)
        reports = []
        for shots in cfg.finetune.shots:
            if shots > len(pool.support):
                raise ConfigValidationError(f"{shots} shots exceed the support size {len(pool.support)}")
            head = tester.adapt(state.theta, state.phi, support, shots, mask)
            reports.append(evaluator.evaluate_run({**state.theta, **head}, pool.test.images, pool.test.labels,
                                                  run_id, pool.test.name, shots))
        return reports

    def cmd_meta_test(self, checkpoint: Path, out: Optional[Path] = None,
                      pool: Optional[DomainPool] = None) -> Path:
        out = Path(out or self.config.out_dir)
        pool = pool or self._pool()
        state = self._load_state(checkpoint)
        reports = self.meta_test_reports(state, pool, run_id=Path(checkpoint).name)
        EvaluationAgent.write_csv(reports, out / "meta_test.csv")
        table = summary_table(reports)
        (out / "summary.txt").write_text(table + "\n")
        print(table)
        return out / "meta_test.csv"

    # ------------------------------------------------------------ ablations

    def cmd_ablate(self, axis: str, values: Optional[Sequence[str]] = None, out: Optional[Path] = None) -> Path:
        if axis not in tissue_knowledge.ablation_grids:
            raise ConfigValidationError(f"unknown ablation axis '{axis}'")
        values = list(values) if values else list(tissue_knowledge.ablation_grids[axis])
        if not values:
            raise ConfigValidationError("ablation needs at least one value")
        out = Path(out or self.config.out_dir) / f"ablate_{axis}"
        pool = self._pool()
        rows = []

        def collect(value, reports):
            for report in reports:
                for tissue, stats in report.aggregate().items():
                    rows.append({"axis": axis, "value": value, "shots": report.shots, "class": tissue, **stats})

        if axis == "finetune-depth":
            # one meta-trained checkpoint shared by every depth
            run_dir = self.cmd_meta_train(out / "train", pool=pool)
            state = self._load_state(run_dir)
            for value in values:
                mask = tissue_knowledge.finetune_depths.get(str(value), str(value))
                self.network.resolve_mask(mask, state.phi.keys())
                collect(value, self.meta_test_reports(state, pool, run_id=f"{axis}={value}", mask=mask))
        else:
            field = ABLATION_FIELDS[axis]
            for value in values:
                leg_cfg = _with_overrides(self.config, {field: value})
                leg = ExperimentOrchestrator(leg_cfg)
                run_dir = leg.cmd_meta_train(out / f"{axis}={value}", pool=pool)
                collect(value, leg.meta_test_reports(leg._load_state(run_dir), pool, run_id=f"{axis}={value}"))

        out.mkdir(parents=True, exist_ok=True)
        path = out / "sweep.csv"
        pd.DataFrame(rows).to_csv(path, index=False, float_format="%.10g")
        print(f"📊 Sweep over {axis} written to {path}")
        return path

    # ------------------------------------------------------------ convergence lab

    def cmd_convlab(self, out: Optional[Path] = None) -> bool:
        out = Path(out or self.config.out_dir) / "convlab"
        reports = ConvergenceAgent(self.config.lab, self.config.seed).run(out)
        for report in reports.values():
            print(report.to_text())
        return all(r.passed for r in reports.values())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Sectioned run config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--data", type=Path, help="Dataset directory written by gen-data")
    common.add_argument("--shots", type=int)
    common.add_argument("--mfl-only", action="store_true", help="Skip the head-initialization update")
    common.add_argument("--no-reg", action="store_true", help="Disable class-aware regularization")
    common.add_argument("--capacity", type=int, help="Memory bank capacity")
    common.add_argument("--mode", choices=["full", "mfl-only", "joint", "random-init"])
    common.add_argument("--iterations", type=int)

    parser = argparse.ArgumentParser(description="Dual meta-learning for lifespan tissue segmentation")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="Write the synthetic domain pool")
    train = sub.add_parser("meta-train", parents=[common], help="Run dual meta-learning")
    train.add_argument("--resume", action="store_true", help="Continue from the latest checkpoint")
    test = sub.add_parser("meta-test", parents=[common], help="Few-shot meta-test of a checkpoint")
    test.add_argument("--checkpoint", type=Path, required=True)
    ablate = sub.add_parser("ablate", parents=[common], help="Sweep one ablation axis")
    ablate.add_argument("--axis", required=True, choices=sorted(tissue_knowledge.ablation_grids))
    ablate.add_argument("--values", nargs="+")
    sub.add_parser("convlab", parents=[common], help="Empirical convergence-rate checks")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    overrides = {
        "seed": args.seed,
        "out_dir": args.out,
        "data.data_dir": args.data,
        "finetune.shots": None if args.shots is None else [args.shots],
        "bank.capacity": args.capacity,
        "meta.iterations": args.iterations,
        "meta.mode": "mfl-only" if args.mfl_only else args.mode,
        "regularization.enabled": False if args.no_reg else None,
    }
    return RunConfig.from_ini(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        orchestrator = ExperimentOrchestrator(config)
        if args.command == "gen-data":
            orchestrator.cmd_gen_data()
        elif args.command == "meta-train":
            orchestrator.cmd_meta_train(resume=args.resume)
        elif args.command == "meta-test":
            orchestrator.cmd_meta_test(args.checkpoint)
        elif args.command == "ablate":
            orchestrator.cmd_ablate(args.axis, args.values)
        elif args.command == "convlab":
            if not orchestrator.cmd_convlab():
                print("❌ Rate check failed")
                return 1
        return 0
    except DivergenceError as e:
        logger.error(f"Diverged at iteration {e.iteration}: {e} (last good checkpoint: {e.last_good_checkpoint})")
        return 3
    except (MetaSegError, ValueError, FileNotFoundError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
