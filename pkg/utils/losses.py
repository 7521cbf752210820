"""
Outer Minimization Objectives

RST, UATPP, SSAT_MBI and the two adaptively weighted variants. Every loss is
a batch mean; the weighted variants average their labeled and unlabeled
terms over the respective subsets of the batch.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional

import numpy as np

from utils.model import Model, cross_entropy, forward, kl_divergence, score, validate_soft_labels
from utils.tensor import Tensor


class LossVariant(str, Enum):
    RST = "rst"
    UATPP = "uatpp"
    SSAT_MBI = "ssat_mbi"
    SRST_AWR = "srst_awr"
    SSAT_MBI_AWR = "ssat_mbi_awr"

    @property
    def is_awr(self) -> bool:
        return self in (LossVariant.SRST_AWR, LossVariant.SSAT_MBI_AWR)

    @property
    def uses_interpolation(self) -> bool:
        return self in (LossVariant.SSAT_MBI, LossVariant.SSAT_MBI_AWR)


@dataclass(frozen=True)
class AwrConfig:
    gamma_prime: float = 1.0
    lambda_prime: float = 20.0
    tau_prime: float = 1.0
    alpha_prime: float = 0.2

    def __post_init__(self):
        if self.gamma_prime < 0 or self.lambda_prime <= 0:
            raise ValueError("gamma_prime must be >= 0 and lambda_prime > 0")
        if self.tau_prime <= 0:
            raise ValueError(f"tau_prime must be > 0, got {self.tau_prime}")
        if not 0.0 <= self.alpha_prime < 1.0:
            raise ValueError(f"alpha_prime must be in [0, 1), got {self.alpha_prime}")


@dataclass(frozen=True)
class LossConfig:
    variant: LossVariant = LossVariant.SSAT_MBI
    lambda_: float = 8.0
    beta: float = 0.4
    awr: Optional[AwrConfig] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", LossVariant(self.variant))
        if self.lambda_ <= 0:
            raise ValueError(f"lambda must be > 0, got {self.lambda_}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.variant.is_awr and self.awr is None:
            raise ValueError(f"{self.variant.value} needs AWR settings")
        if not self.variant.is_awr and self.awr is not None:
            raise ValueError(f"AWR settings given for {self.variant.value}")


@dataclass
class LossConstants:
    """Quantities held constant in the gradient, computed from the current parameters."""

    snapshot_probs: Optional[np.ndarray] = None
    teacher_probs: Optional[np.ndarray] = None
    weight_adv: Optional[np.ndarray] = None
    weight_pgd: Optional[np.ndarray] = None


@dataclass
class LossBreakdown:
    total: Tensor
    components: Dict[str, float] = field(default_factory=dict)


def awr_weight(p_clean, p_attacked, label) -> np.ndarray:
    """
    w = 1/2 sum_c y_c p_clean(c) + 1/2 sum_c y_c (1 - p_attacked(c)), per row, in [0, 1].
    """
    single = np.ndim(label) == 1
    y = validate_soft_labels(label)
    p = validate_soft_labels(p_clean, num_classes=y.shape[1])
    q = validate_soft_labels(p_attacked, num_classes=y.shape[1])
    w = 0.5 * np.sum(y * p, axis=1) + 0.5 * np.sum(y * (1.0 - q), axis=1)
    w = np.clip(w, 0.0, 1.0)
    return float(w[0]) if single else w


def _required_inputs(cfg: LossConfig, x_adv, x_pgd, labeled_mask, teacher):
    if x_pgd is None:
        raise ValueError(f"{cfg.variant.value} needs PGD examples")
    if cfg.variant.uses_interpolation and x_adv is None:
        raise ValueError(f"{cfg.variant.value} needs interpolated examples")
    if cfg.variant.is_awr and labeled_mask is None:
        raise ValueError(f"{cfg.variant.value} needs a labeled mask")
    if cfg.variant.is_awr and teacher is None:
        raise ValueError(f"{cfg.variant.value} needs the teacher model")


def loss_constants(
    cfg: LossConfig,
    model: Model,
    teacher: Optional[Model],
    x: np.ndarray,
    x_adv: Optional[np.ndarray],
    x_pgd: np.ndarray,
    label: np.ndarray,
) -> LossConstants:
    """Evaluate the gradient-free parts of the loss at the current parameters."""
    frozen = model.detached()
    constants = LossConstants()
    if cfg.variant == LossVariant.UATPP:
        constants.snapshot_probs = score(forward(frozen, x)).data
    if cfg.variant.is_awr:
        p_clean = score(forward(frozen, x)).data
        constants.teacher_probs = score(forward(teacher.detached(), x), cfg.awr.tau_prime).data
        constants.weight_pgd = awr_weight(p_clean, score(forward(frozen, x_pgd)).data, label)
        if cfg.variant == LossVariant.SSAT_MBI_AWR:
            constants.weight_adv = awr_weight(p_clean, score(forward(frozen, x_adv)).data, label)
    return constants


def _subset_mean(per_row: Tensor, mask: np.ndarray) -> Tensor:
    count = int(mask.sum())
    weights = mask.astype(np.float64) / count if count else np.zeros(mask.shape[0])
    return (per_row * Tensor(weights)).sum()


def outer_loss_terms(
    cfg: LossConfig,
    model: Model,
    teacher: Optional[Model],
    x: np.ndarray,
    x_adv: Optional[np.ndarray],
    x_pgd: Optional[np.ndarray],
    label: np.ndarray,
    labeled_mask: Optional[np.ndarray] = None,
    constants: Optional[LossConstants] = None,
) -> LossBreakdown:
    """
    Outer loss and its components for one batch.

    Args:
        cfg: Loss variant and weights
        model: Classifier being trained (parameters may require grad)
        teacher: Teacher model, needed by the weighted variants' distillation term
        x: (B, d) clean inputs
        x_adv: (B, d) interpolated adversarial inputs (SSAT_MBI variants)
        x_pgd: (B, d) PGD examples
        label: (B, C) one-hot labels for labeled rows, pseudo-labels otherwise
        labeled_mask: (B,) bool, which rows carry ground truth (weighted variants)
        constants: Precomputed gradient-free terms; evaluated here when omitted

    Returns:
        LossBreakdown: Scalar total plus float components
    """
    _required_inputs(cfg, x_adv, x_pgd, labeled_mask, teacher)
    label = validate_soft_labels(label, num_classes=model.num_classes)
    if constants is None:
        constants = loss_constants(cfg, model, teacher, x, x_adv, x_pgd, label)

    variant = cfg.variant
    logits_clean = forward(model, x)
    logits_pgd = forward(model, x_pgd)
    p_pgd = score(logits_pgd)
    components: Dict[str, float] = {}

    if variant == LossVariant.UATPP:
        natural = cross_entropy(logits_pgd, label)
        consistency = kl_divergence(Tensor(constants.snapshot_probs), p_pgd)
        total = natural + consistency * cfg.lambda_
        components.update(natural=natural.item(), consistency_pgd=consistency.item())
        return LossBreakdown(total, components)

    p_clean = score(logits_clean)
    kl_pgd = kl_divergence(p_clean, p_pgd, reduction="none")
    kl_adv = None
    if variant.uses_interpolation:
        kl_adv = kl_divergence(p_clean, score(forward(model, x_adv)), reduction="none")

    if not variant.is_awr:
        natural = cross_entropy(logits_clean, label)
        if variant == LossVariant.RST:
            consistency = kl_pgd.mean()
            components["consistency_pgd"] = consistency.item()
        else:
            term_adv, term_pgd = kl_adv.mean(), kl_pgd.mean()
            consistency = term_adv * cfg.beta + term_pgd * (1.0 - cfg.beta)
            components.update(consistency_adv=term_adv.item(), consistency_pgd=term_pgd.item())
        total = natural + consistency * cfg.lambda_
        components["natural"] = natural.item()
        return LossBreakdown(total, components)

    awr = cfg.awr
    labeled = np.asarray(labeled_mask, dtype=bool)
    unlabeled = ~labeled
    natural = _subset_mean(cross_entropy(logits_clean, label, smoothing=awr.alpha_prime, reduction="none"), labeled)
    distill = _subset_mean(
        kl_divergence(Tensor(constants.teacher_probs), score(logits_clean, awr.tau_prime), reduction="none"),
        unlabeled,
    )
    term_pgd = _subset_mean(kl_pgd * Tensor(constants.weight_pgd), unlabeled)
    if variant == LossVariant.SRST_AWR:
        robust = term_pgd
        components["consistency_pgd"] = term_pgd.item()
    else:
        term_adv = _subset_mean(kl_adv * Tensor(constants.weight_adv), unlabeled)
        robust = term_adv * cfg.beta + term_pgd * (1.0 - cfg.beta)
        components.update(consistency_adv=term_adv.item(), consistency_pgd=term_pgd.item())
    total = natural + distill * awr.gamma_prime + robust * awr.lambda_prime
    components.update(natural=natural.item(), distill=distill.item())
    return LossBreakdown(total, components)


def outer_loss(
    cfg: LossConfig,
    model: Model,
    teacher: Optional[Model],
    x: np.ndarray,
    x_adv: Optional[np.ndarray],
    x_pgd: Optional[np.ndarray],
    label: np.ndarray,
    labeled_mask: Optional[np.ndarray] = None,
) -> Tensor:
    return outer_loss_terms(cfg, model, teacher, x, x_adv, x_pgd, label, labeled_mask).total
