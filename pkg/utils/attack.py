"""
PGD Attack Generator

l-infinity projected gradient ascent with three inner objectives:
hard-label cross-entropy, soft-label cross-entropy and the KL consistency
objective against the frozen clean distribution.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np

from config import Config
from utils.model import Model, cross_entropy, forward, kl_divergence, one_hot, score, validate_soft_labels
from utils.tensor import Tensor, backward

logger = logging.getLogger(__name__)

CONTAINMENT_SLACK = 1e-12


class DivergenceError(RuntimeError):
    """Raised when an attack gradient contains NaN (the model has diverged)."""


class InnerObjective(str, Enum):
    CE_HARD = "ce_hard"
    CE_SOFT = "ce_soft"
    KL = "kl"


@dataclass(frozen=True)
class AttackConfig:
    """
    PGD-T settings.

    ``step_size`` left as None means epsilon / 4 (per row when epsilon is
    per row). ``domain_bounds`` clamps every coordinate after each step.
    """

    epsilon: float
    steps: int = 10
    step_size: Optional[float] = None
    objective: InnerObjective = InnerObjective.CE_SOFT
    domain_bounds: Optional[Tuple[float, float]] = None
    restarts: int = 1
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be >= 1, got {self.restarts}")
        if self.domain_bounds is not None and not self.domain_bounds[0] < self.domain_bounds[1]:
            raise ValueError(f"domain_bounds must satisfy lo < hi, got {self.domain_bounds}")
        object.__setattr__(self, "objective", InnerObjective(self.objective))

    @property
    def effective_step_size(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4.0

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return replace(self, epsilon=float(epsilon))


def project_linf(delta, epsilon):
    """
    Clamp a perturbation coordinatewise to [-epsilon, epsilon].

    ``epsilon`` may be a scalar or a per-row column that broadcasts against
    ``delta``. Tensors come back as (constant) Tensors, arrays as arrays.
    """
    if np.any(np.asarray(epsilon) < 0):
        raise ValueError("epsilon must be >= 0")
    if isinstance(delta, Tensor):
        return Tensor(np.clip(delta.data, -epsilon, epsilon))
    return np.clip(delta, -epsilon, epsilon)


def _clip_bounds(x: np.ndarray, bounds: Optional[Tuple[float, float]]) -> np.ndarray:
    if bounds is None:
        return x
    return np.clip(x, bounds[0], bounds[1])


def attack_objective(
    model: Model,
    x_attacked: Tensor,
    target: np.ndarray,
    objective: InnerObjective,
    clean_probs: Optional[np.ndarray] = None,
) -> Tensor:
    """
    Per-row inner objective at ``x_attacked``.

    Args:
        model: Frozen classifier
        x_attacked: (B, d) candidate inputs
        target: (B, C) soft labels; CE_HARD uses their argmax
        objective: Which inner maximization objective
        clean_probs: (B, C) frozen p(.|x), required for KL

    Returns:
        Tensor: (B,) objective values
    """
    logits = forward(model, x_attacked)
    if objective == InnerObjective.CE_HARD:
        hard = one_hot(np.argmax(target, axis=1), model.num_classes)
        return cross_entropy(logits, hard, reduction="none")
    if objective == InnerObjective.CE_SOFT:
        return cross_entropy(logits, target, reduction="none")
    if clean_probs is None:
        raise ValueError("KL objective needs the clean distribution")
    return kl_divergence(Tensor._wrap(clean_probs), score(logits), reduction="none")


def pgd(
    model: Model,
    x: np.ndarray,
    target,
    cfg: AttackConfig,
    rng: np.random.Generator,
    epsilon: Union[None, float, np.ndarray] = None,
) -> np.ndarray:
    """
    Run PGD-T ascent from a random start inside the epsilon box.

    Each step is x_adv <- clip(x + project(x_adv + eta * sign(grad) - x)), with
    sign(0) = 0. With several restarts, each row keeps the restart whose final
    objective is strictly highest (earlier restarts win ties).

    Args:
        model: Classifier; used through a frozen view, never updated
        x: (B, d) clean inputs, or a single (d,) input
        target: (B, C) soft labels (ignored by the KL objective)
        cfg: Attack settings
        rng: Generator for the random starts
        epsilon: Optional per-row budgets overriding ``cfg.epsilon``

    Returns:
        np.ndarray: Adversarial inputs with the shape of ``x``

    Raises:
        DivergenceError: If a gradient contains NaN
    """
    squeeze = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    batch = x.shape[0]

    eps = np.full(batch, cfg.epsilon) if epsilon is None else np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (batch,))
    if np.any(eps < 0):
        raise ValueError("Per-row epsilon must be >= 0")
    if np.all(eps == 0.0) or cfg.steps == 0 and not cfg.random_start:
        return x[0].copy() if squeeze else x.copy()

    bounds = cfg.domain_bounds
    if bounds is not None and (np.any(x < bounds[0]) or np.any(x > bounds[1])):
        raise ValueError(f"Clean inputs fall outside domain bounds {bounds}")

    eps_col = eps[:, None]
    eta = cfg.step_size if cfg.step_size is not None else eps_col / 4.0
    frozen = model.detached()

    target_array = None
    clean_probs = None
    if cfg.objective == InnerObjective.KL:
        clean_probs = score(forward(frozen, x)).data
    else:
        target_array = validate_soft_labels(target, num_classes=frozen.num_classes)
        if target_array.shape[0] != batch:
            raise ValueError(f"Target has {target_array.shape[0]} rows, inputs have {batch}")

    best = x.copy()
    best_value = np.full(batch, -np.inf)
    for restart in range(cfg.restarts):
        if cfg.random_start:
            start = rng.uniform(-1.0, 1.0, size=x.shape) * eps_col
        else:
            start = np.zeros_like(x)
        x_adv = _clip_bounds(x + start, bounds)

        for step in range(cfg.steps):
            x_var = Tensor(x_adv, requires_grad=True)
            total = attack_objective(frozen, x_var, target_array, cfg.objective, clean_probs).sum()
            grad = backward(total)[x_var].data
            if np.any(np.isnan(grad)):
                raise DivergenceError(f"NaN input gradient at PGD step {step} (restart {restart})")
            x_adv = _clip_bounds(x + project_linf(x_adv + eta * np.sign(grad) - x, eps_col), bounds)

        if cfg.restarts == 1:
            best = x_adv
            break
        values = attack_objective(frozen, Tensor(x_adv), target_array, cfg.objective, clean_probs).data
        improved = values > best_value
        best = np.where(improved[:, None], x_adv, best)
        best_value = np.where(improved, values, best_value)

    if Config.DEBUG_MODE:
        check_containment(x, best, eps, bounds)
    return best[0] if squeeze else best


def check_containment(x: np.ndarray, x_adv: np.ndarray, epsilon, bounds: Optional[Tuple[float, float]] = None):
    """
    Assert the ball and domain constraints of an attack output.

    Raises:
        AssertionError: With the worst offending row
    """
    x = np.atleast_2d(x)
    x_adv = np.atleast_2d(x_adv)
    eps = np.broadcast_to(np.asarray(epsilon, dtype=np.float64), (x.shape[0],))
    excess = np.max(np.abs(x_adv - x), axis=1) - eps
    if np.any(excess > CONTAINMENT_SLACK):
        row = int(np.argmax(excess))
        raise AssertionError(f"Row {row} leaves the epsilon ball by {excess[row]!r}")
    if bounds is not None and (np.any(x_adv < bounds[0]) or np.any(x_adv > bounds[1])):
        raise AssertionError(f"Attack output leaves domain bounds {bounds}")
