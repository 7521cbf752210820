"""
marginforge command-line runner.

    marginforge <train|eval|diagnose|schedule|sweep|gradcheck> --config <path> [--out <dir>] [--seed <n>]

Exit codes: 0 on success, 1 when a pipeline stage fails (the stage is named
on stderr), 2 when the config cannot be parsed or validated.
"""

import argparse
import logging
import sys
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from agents.evaluation_agent import EvalReport, EvaluationAgent, assumption_diagnostics
from agents.teacher_agent import TeacherAgent, TeacherConfig
from agents.training_agent import TrainConfig, TrainingAgent
from config import Config
from utils.artifacts import write_csv, write_json, write_jsonl, write_text_atomic
from utils.datasets import Dataset, dataset_manifest, gen_synthetic, load_idx_dataset, merge_semisup, split_semisup
from utils.experiment_config import ConfigError, ExperimentConfig
from utils.gradcheck import run_gradcheck
from utils.model import CheckpointError, Model, load_checkpoint, save_checkpoint
from utils.plotting import emit_boundary_svg, plot_schedule, plot_sweep, save_svg
from utils.schedule import tabulate

logger = logging.getLogger("marginforge")

COMMANDS = ("train", "eval", "diagnose", "schedule", "sweep", "gradcheck")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


@contextmanager
def _stage(name: str):
    """Report I/O and value failures inside the block as a failure of stage ``name``."""
    try:
        yield
    except StageError:
        raise
    except (OSError, ValueError) as e:
        raise StageError(name, str(e)) from e


def _require(result: Dict[str, Any]) -> Dict[str, Any]:
    """Unwrap an agent result, turning an error status into a StageError."""
    if result.get("status") != "success":
        raise StageError(result.get("phase", "unknown"), result.get("error", "Unknown error"))
    return result


# ==============================================================
# DATA
# ==============================================================

def prepare_data(cfg: ExperimentConfig) -> Dict[str, Any]:
    """Training split (D_L, D_U), test set and manifest, all derived from the config seed."""
    seed = cfg.run.seed
    data = cfg.data
    try:
        if data.kind == "idx":
            train_set = load_idx_dataset(data.idx_images, data.idx_labels, data.limit)
            if data.idx_test_images and data.idx_test_labels:
                test_set = load_idx_dataset(data.idx_test_images, data.idx_test_labels, data.n_test)
                test_set = replace(test_set, num_classes=max(test_set.num_classes, train_set.num_classes))
            else:
                cut = train_set.size - min(data.n_test, train_set.size // 2)
                test_set = Dataset(train_set.inputs[cut:], train_set.labels[cut:], train_set.num_classes,
                                   image_shape=train_set.image_shape)
                train_set = Dataset(train_set.inputs[:cut], train_set.labels[:cut], train_set.num_classes,
                                    image_shape=train_set.image_shape)
            params = {"images": data.idx_images, "labels": data.idx_labels, "limit": data.limit}
        else:
            train_set = gen_synthetic(data.kind, data.n_points, data.noise, seed)
            test_set = gen_synthetic(data.kind, data.n_test, data.noise, seed + 1)
            params = {"n_points": data.n_points, "n_test": data.n_test, "noise": data.noise}

        bounds = cfg.domain_bounds
        train_set = replace(train_set, domain_bounds=bounds)
        test_set = replace(test_set, domain_bounds=bounds)
        labeled, unlabeled = split_semisup(train_set, data.labeled_fraction, seed)
    except (OSError, ValueError) as e:
        raise StageError("data", str(e))

    params["labeled_fraction"] = data.labeled_fraction
    return {
        "labeled": labeled,
        "unlabeled": unlabeled,
        "test": test_set,
        "manifest": dataset_manifest(data.kind, params, seed, labeled, unlabeled),
    }


def _diagnostics_pool(training: Dataset, cfg: ExperimentConfig) -> Dataset:
    # Eligible points are a minority, so look at a few times the sample cap.
    return training.subset(min(training.size, 4 * cfg.eval.diag_points))


def _load_model(cfg: ExperimentConfig, out: Path) -> Model:
    path = Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else out / "model.ckpt"
    try:
        return load_checkpoint(path)
    except (OSError, CheckpointError) as e:
        raise StageError("checkpoint", f"cannot load {path}: {e}")


# ==============================================================
# ARTIFACTS
# ==============================================================

def _write_report(report: EvalReport, out: Path, stem: str = "eval_report"):
    with _stage("artifacts"):
        write_csv(report.to_frame(), out / f"{stem}.csv")
        write_jsonl(report.to_records(), out / f"{stem}.jsonl")


def _write_boundary(cfg: ExperimentConfig, model: Model, points: Dataset, report: Optional[EvalReport], out: Path):
    if not cfg.plot.boundary or model.input_dim != 2:
        return
    overlay = []
    diag = report.diagnostics if report is not None else None
    if diag is not None and diag.sampled:
        count = min(cfg.plot.traces, diag.sampled)
        overlay = [(diag.points[i], diag.x_adv[i], diag.x_pgd[i]) for i in range(count)]
    bounds = cfg.domain_bounds or (0.0, 1.0)
    with _stage("plot"):
        document = emit_boundary_svg(
            model, points.inputs, points.evaluation_labels(), overlay,
            resolution=cfg.plot.resolution, view=(bounds[0], bounds[1], bounds[0], bounds[1]),
        )
        save_svg(document, out / "boundary.svg")


# ==============================================================
# PIPELINE
# ==============================================================

def train_pipeline(cfg: ExperimentConfig, data: Dict[str, Any], teacher_result: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Teacher (unless given), adversarial training and evaluation for one config."""
    if teacher_result is None:
        teacher_agent = TeacherAgent(TeacherConfig.from_experiment(cfg))
        teacher_result = _require(teacher_agent.run(data["labeled"], data["unlabeled"], cfg.run.seed))

    training = teacher_result["data"]
    training_agent = TrainingAgent(TrainConfig.from_experiment(cfg))
    trained = _require(training_agent.run(training, teacher_result["teacher"], data["test"]))

    evaluator = EvaluationAgent.from_experiment(cfg)
    evaluated = _require(evaluator.evaluate(trained["model"], data["test"], _diagnostics_pool(training, cfg)))
    return {
        "teacher": teacher_result,
        "model": trained["model"],
        "metrics": trained["metrics"],
        "report": evaluated["report"],
    }


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    data = prepare_data(cfg)
    result = train_pipeline(cfg, data)

    with _stage("artifacts"):
        write_text_atomic(out / "config.cfg", cfg.serialize())
        write_json(data["manifest"], out / "dataset_manifest.json")
        write_csv(result["metrics"].to_frame(), out / "metrics.csv")
        write_csv(result["metrics"].detail_frame(), out / "metrics_detail.csv")
        save_checkpoint(result["model"], out / "model.ckpt")
    _write_report(result["report"], out)
    _write_boundary(cfg, result["model"], data["test"], result["report"], out)
    logger.info(f"🏁 Run written to {out}")
    return 0


def cmd_eval(cfg: ExperimentConfig, out: Path) -> int:
    model = _load_model(cfg, out)
    data = prepare_data(cfg)
    evaluated = _require(EvaluationAgent.from_experiment(cfg).evaluate(model, data["test"]))
    _write_report(evaluated["report"], out)
    return 0


def cmd_diagnose(cfg: ExperimentConfig, out: Path) -> int:
    model = _load_model(cfg, out)
    data = prepare_data(cfg)
    pool = _diagnostics_pool(merge_semisup(data["labeled"], data["unlabeled"]), cfg)
    try:
        diag = assumption_diagnostics(
            model, pool.inputs, pool.evaluation_labels(), cfg.eval.diag_grid,
            cfg.interp_config(), cfg.attack_template(), seed=cfg.run.seed, max_points=cfg.eval.diag_points,
        )
    except (ValueError, RuntimeError) as e:
        raise StageError("diagnostics", str(e))

    table = pd.DataFrame({
        "point": np.arange(diag.sampled),
        "monotone": diag.monotone,
        "alpha_hat": diag.alpha_hat,
        "eff_eps": diag.eff_eps,
        "loss_ratio": diag.loss_ratios,
    })
    report = EvalReport(natural_acc=float("nan"), diagnostics=diag)
    with _stage("artifacts"):
        write_csv(table, out / "diagnostics.csv")
        write_jsonl(report.to_records()[1:], out / "diagnostics.jsonl")
    _write_boundary(cfg, model, pool, report, out)
    logger.info(f"🔍 Eligible {diag.eligible}, sampled {diag.sampled}, monotone fraction {diag.monotone_fraction}")
    return 0


def cmd_schedule(cfg: ExperimentConfig, out: Path) -> int:
    with _stage("schedule"):
        spec = cfg.schedule_spec()
        table = tabulate(spec, cfg.rho_schedule())
    with _stage("artifacts"):
        write_csv(table, out / "schedule.csv")
    with _stage("plot"):
        save_svg(plot_schedule(table, spec.label), out / "schedule.svg")
    return 0


def _sweep_row(parameter: str, value: float, report: EvalReport) -> Dict[str, float]:
    strongest = max(report.robust, key=lambda row: (row["steps"], row["epsilon"]))
    return {parameter: value, "natural_acc": report.natural_acc, "robust_acc": strongest["value"]}


def cmd_sweep(cfg: ExperimentConfig, out: Path) -> int:
    data = prepare_data(cfg)
    teacher_agent = TeacherAgent(TeacherConfig.from_experiment(cfg))
    teacher_result = _require(teacher_agent.run(data["labeled"], data["unlabeled"], cfg.run.seed))

    grids = [("beta", "loss", "beta", cfg.sweep.betas), ("rho", "rho", "initial", cfg.sweep.rhos)]
    for parameter, section, key, values in grids:
        if not values:
            continue
        rows: List[Dict[str, float]] = []
        for value in values:
            variant = cfg.copy_with(section, **{key: value})
            try:
                variant.validate()
            except ConfigError as e:
                raise StageError(f"sweep {parameter}={value:g}", str(e))
            logger.info(f"🔁 Sweep {parameter} = {value:g}")
            result = train_pipeline(variant, data, teacher_result)
            _write_report(result["report"], out, stem=f"eval_report_{parameter}_{value:g}")
            rows.append(_sweep_row(parameter, value, result["report"]))
        table = pd.DataFrame(rows)
        with _stage("artifacts"):
            write_csv(table, out / f"sweep_{parameter}.csv")
        with _stage("plot"):
            save_svg(plot_sweep(table, parameter), out / f"sweep_{parameter}.svg")
    return 0


def cmd_gradcheck(cfg: ExperimentConfig, out: Path) -> int:
    table = run_gradcheck(seed=cfg.run.seed)
    with _stage("artifacts"):
        write_csv(table, out / "gradcheck.csv")
    if not table["passed"].all():
        failed = ", ".join(table.loc[~table["passed"], "case"])
        raise StageError("gradcheck", f"gradient mismatch in {failed}")
    return 0


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "diagnose": cmd_diagnose,
    "schedule": cmd_schedule,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


# ==============================================================
# ENTRY POINT
# ==============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="marginforge", description="Semi-supervised adversarial training lab")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="Experiment config file (section.key = value)")
    parser.add_argument("--out", default=None, help="Output directory (default: <run.output_dir>/<run.name>)")
    parser.add_argument("--seed", type=int, default=None, help="Override run.seed")
    return parser


def run(command: str, config_path: str, out: Optional[str] = None, seed: Optional[int] = None) -> int:
    """Run one subcommand; returns the process exit code."""
    try:
        cfg = ExperimentConfig.load(config_path)
        if seed is not None:
            cfg = cfg.copy_with("run", seed=seed)
    except ConfigError as e:
        print(f"❌ Invalid config {config_path}: {e}", file=sys.stderr)
        return 2

    out_dir = Path(out) if out else Path(cfg.run.output_dir or Config.DEFAULT_OUTPUT_DIR) / cfg.run.name
    try:
        return HANDLERS[command](cfg, out_dir)
    except StageError as e:
        print(f"❌ Stage '{e.stage}' failed: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"❌ Stage '{command}' failed: {e}", file=sys.stderr)
        return 1


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=Config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return run(args.command, args.config, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
