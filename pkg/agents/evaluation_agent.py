import logging
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from utils.attack import AttackConfig, pgd
from utils.datasets import Dataset
from utils.interpolate import InterpolationConfig, binary_search_alpha, effective_epsilon, margin_curve
from utils.model import Model, cross_entropy, forward, one_hot, predict

logger = logging.getLogger(__name__)

MONOTONE_TOLERANCE = 1e-3
RATIO_BAND = (0.8, 1.25)


# ==============================================================
# ACCURACY
# ==============================================================

def natural_accuracy(model: Model, inputs: np.ndarray, labels: np.ndarray) -> float:
    """Share of rows where argmax f(x) equals the label (ties go to the lowest class)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("Cannot score an empty test set")
    return float(np.mean(predict(model, inputs) == labels))


def robust_accuracy(model: Model, inputs: np.ndarray, labels: np.ndarray, attack_cfg: AttackConfig, seed: int = 0) -> float:
    """
    Share of rows still classified correctly under every PGD restart.

    Restart r draws its random start from the stream seeded with (seed, r),
    so adding restarts only removes correct points.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("Cannot score an empty test set")
    target = one_hot(labels, model.num_classes)
    single = replace(attack_cfg, restarts=1)
    correct = np.ones(labels.shape[0], dtype=bool)
    for restart in range(attack_cfg.restarts):
        rng = np.random.default_rng([seed, restart])
        x_pgd = pgd(model, inputs, target, single, rng)
        correct &= predict(model, x_pgd) == labels
    return float(np.mean(correct))


# ==============================================================
# ASSUMPTION DIAGNOSTICS
# ==============================================================

@dataclass
class DiagnosticsResult:
    """Margin-curve monotonicity and loss-ratio statistics over the eligible sample."""

    eligible: int
    alphas: np.ndarray
    curves: np.ndarray
    monotone: np.ndarray
    alpha_hat: np.ndarray
    eff_eps: np.ndarray
    loss_ratios: np.ndarray
    points: np.ndarray = field(repr=False, default=None)
    x_adv: np.ndarray = field(repr=False, default=None)
    x_pgd: np.ndarray = field(repr=False, default=None)

    @property
    def sampled(self) -> int:
        return int(self.monotone.shape[0])

    @property
    def monotone_fraction(self) -> Optional[float]:
        return float(np.mean(self.monotone)) if self.sampled else None


def loss_ratio_stats(ratios: np.ndarray) -> Dict[str, Optional[float]]:
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.size == 0:
        return {"mean": None, "median": None, "within_band": None}
    low, high = RATIO_BAND
    return {
        "mean": float(np.mean(ratios)),
        "median": float(np.median(ratios)),
        "within_band": float(np.mean((ratios >= low) & (ratios <= high))),
    }


def assumption_diagnostics(
    model: Model,
    inputs: np.ndarray,
    labels: np.ndarray,
    grid_size: int,
    interp_cfg: InterpolationConfig,
    attack_cfg: AttackConfig,
    seed: int = 0,
    max_points: int = 200,
) -> DiagnosticsResult:
    """
    Check the two interpolation assumptions on a frozen model.

    The sample is restricted to points classified correctly whose PGD example
    is misclassified. For each, the margin d(alpha) is evaluated on a uniform
    grid over [0, 1] and called monotone when no decrement exceeds 1e-3. The
    loss ratio is CE(x_adv(alpha_hat)) / CE(x_pgd'), where x_pgd' is a fresh
    PGD run restricted to the effective budget eps_hat = |x_adv - x|_inf.

    Args:
        model: Classifier under test, never modified
        inputs: (N, d) candidate points
        labels: (N,) ground-truth classes
        grid_size: Number of alpha values on the grid
        interp_cfg: Threshold, temperature and bisection steps
        attack_cfg: PGD settings used for both attacks
        seed: Seed for the PGD random starts
        max_points: Cap on the sample size

    Returns:
        DiagnosticsResult: Empty arrays when no point is eligible
    """
    if grid_size < 2:
        raise ValueError(f"grid_size must be >= 2, got {grid_size}")
    frozen = model.detached()
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    labels = np.asarray(labels)
    target = one_hot(labels, frozen.num_classes)
    alphas = np.linspace(0.0, 1.0, grid_size)
    rng_attack, rng_fresh = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))

    x_pgd_all = pgd(frozen, inputs, target, attack_cfg, rng_attack)
    eligible = (predict(frozen, inputs) == labels) & (predict(frozen, x_pgd_all) != labels)
    rows = np.flatnonzero(eligible)[:max_points]
    if rows.size == 0:
        logger.warning("⚠️ No eligible points for the assumption diagnostics")
        empty = np.zeros(0)
        return DiagnosticsResult(int(eligible.sum()), alphas, np.zeros((0, grid_size)), np.zeros(0, dtype=bool), empty, empty, empty)

    x, x_pgd, y = inputs[rows], x_pgd_all[rows], target[rows]
    curves = margin_curve(frozen, x, x_pgd, y, interp_cfg.tau, alphas)
    monotone = np.all(np.diff(curves, axis=1) >= -MONOTONE_TOLERANCE, axis=1)

    alpha_hat, x_adv = binary_search_alpha(frozen, x, x_pgd, y, interp_cfg)
    eff_eps = effective_epsilon(x, x_adv)
    x_fresh = pgd(frozen, x, y, attack_cfg, rng_fresh, epsilon=eff_eps)
    loss_adv = cross_entropy(forward(frozen, x_adv), y, reduction="none").data
    loss_fresh = cross_entropy(forward(frozen, x_fresh), y, reduction="none").data
    ratios = loss_adv / np.maximum(loss_fresh, 1e-12)

    result = DiagnosticsResult(int(eligible.sum()), alphas, curves, monotone, alpha_hat, eff_eps, ratios, x, x_adv, x_pgd)
    logger.info(f"🔍 Diagnostics on {result.sampled} points: monotone {result.monotone_fraction:.3f}, median ratio {np.median(ratios):.3f}")
    return result


# ==============================================================
# REPORT
# ==============================================================

@dataclass
class EvalReport:
    natural_acc: float
    robust: List[Dict[str, Any]] = field(default_factory=list)
    diagnostics: Optional[DiagnosticsResult] = None

    @property
    def monotone_fraction(self) -> Optional[float]:
        return self.diagnostics.monotone_fraction if self.diagnostics else None

    @property
    def loss_ratio_stats(self) -> Dict[str, Optional[float]]:
        return loss_ratio_stats(self.diagnostics.loss_ratios if self.diagnostics else [])

    def robust_acc(self, steps: int, epsilon: float, restarts: int = 1) -> float:
        for row in self.robust:
            if row["steps"] == steps and row["epsilon"] == epsilon and row["restarts"] == restarts:
                return row["value"]
        raise KeyError(f"No robust accuracy for steps={steps} epsilon={epsilon} restarts={restarts}")

    def to_frame(self) -> pd.DataFrame:
        """One row per metric: metric, steps, epsilon, restarts, value."""
        rows = [{"metric": "natural_acc", "steps": 0, "epsilon": 0.0, "restarts": 0, "value": self.natural_acc}]
        rows += [{"metric": "robust_acc", **row} for row in self.robust]
        if self.diagnostics is not None:
            rows.append({"metric": "eligible_points", "value": float(self.diagnostics.eligible)})
            rows.append({"metric": "sampled_points", "value": float(self.diagnostics.sampled)})
            rows.append({"metric": "monotone_fraction", "value": self.monotone_fraction})
            for key, value in self.loss_ratio_stats.items():
                rows.append({"metric": f"loss_ratio_{key}", "value": value})
        return pd.DataFrame(rows, columns=["metric", "steps", "epsilon", "restarts", "value"])

    def to_records(self, max_curves: Optional[int] = None) -> List[Dict[str, Any]]:
        """Line-delimited records: one summary, then one per sampled margin curve."""
        records = [{
            "record": "summary",
            "natural_acc": self.natural_acc,
            "robust": self.robust,
            "monotone_fraction": self.monotone_fraction,
            "loss_ratio_stats": self.loss_ratio_stats,
        }]
        diag = self.diagnostics
        if diag is not None:
            count = diag.sampled if max_curves is None else min(max_curves, diag.sampled)
            for i in range(count):
                records.append({
                    "record": "curve",
                    "point": i,
                    "alpha": diag.alphas,
                    "margin": diag.curves[i],
                    "monotone": bool(diag.monotone[i]),
                    "alpha_hat": float(diag.alpha_hat[i]),
                    "eff_eps": float(diag.eff_eps[i]),
                    "loss_ratio": float(diag.loss_ratios[i]),
                })
        return records


class EvaluationAgent:
    """
    Phase 3: Evaluation Agent

    Natural accuracy, PGD robust accuracy over the configured (steps, epsilon)
    grid, and the interpolation assumption diagnostics.
    """

    def __init__(
        self,
        attacks: List[AttackConfig],
        interp_cfg: InterpolationConfig,
        diag_attack: Optional[AttackConfig] = None,
        diag_grid: int = 11,
        diag_points: int = 200,
        seed: int = 0,
    ):
        self.attacks = attacks
        self.interp_cfg = interp_cfg
        self.diag_attack = diag_attack
        self.diag_grid = diag_grid
        self.diag_points = diag_points
        self.seed = seed

    @classmethod
    def from_experiment(cls, cfg) -> "EvaluationAgent":
        attacks = [
            cfg.eval_attack(epsilon, steps, cfg.eval.restarts)
            for steps in cfg.eval.steps
            for epsilon in cfg.eval.epsilons
        ]
        return cls(
            attacks=attacks,
            interp_cfg=cfg.interp_config(),
            diag_attack=cfg.attack_template(),
            diag_grid=cfg.eval.diag_grid,
            diag_points=cfg.eval.diag_points,
            seed=cfg.run.seed,
        )

    def build_report(self, model: Model, test_set: Dataset, diagnostics_set: Optional[Dataset] = None) -> EvalReport:
        labels = test_set.evaluation_labels()
        report = EvalReport(natural_accuracy(model, test_set.inputs, labels))
        for attack in self.attacks:
            value = robust_accuracy(model, test_set.inputs, labels, attack, self.seed)
            report.robust.append({"steps": attack.steps, "epsilon": attack.epsilon, "restarts": attack.restarts, "value": value})
            logger.info(f"🛡️ PGD-{attack.steps} eps={attack.epsilon:g} x{attack.restarts}: {value:.3f}")

        if diagnostics_set is not None and self.diag_attack is not None:
            report.diagnostics = assumption_diagnostics(
                model,
                diagnostics_set.inputs,
                diagnostics_set.evaluation_labels(),
                self.diag_grid,
                self.interp_cfg,
                self.diag_attack,
                seed=self.seed,
                max_points=self.diag_points,
            )
        return report

    def evaluate(self, model: Model, test_set: Dataset, diagnostics_set: Optional[Dataset] = None) -> Dict[str, Any]:
        try:
            report = self.build_report(model, test_set, diagnostics_set)
            logger.info(f"✅ Evaluation complete, natural accuracy {report.natural_acc:.3f}")
            return {"status": "success", "phase": "evaluation", "report": report}
        except (ValueError, RuntimeError) as e:
            logger.error(f"❌ Evaluation failed: {e}")
            return {"status": "error", "phase": "evaluation", "error": str(e)}
