"""
Margin-Based Interpolation

Margin of a (pseudo-)labeled point, linear interpolation between a clean
point and its PGD example, and the batched binary search for the largest
interpolation factor whose margin stays under the threshold rho.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Tuple, Union

import numpy as np

from utils.model import Model, forward, score, validate_soft_labels

logger = logging.getLogger(__name__)

MAX_SEARCH_STEPS = 32


@dataclass(frozen=True)
class InterpolationConfig:
    """
    Args:
        rho: Margin threshold
        tau: Score temperature
        steps_K: Bisection iterations
        enabled: When False, callers use the full PGD example instead of searching
    """

    rho: float = 0.05
    tau: float = 2.0
    steps_K: int = 3
    enabled: bool = True

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError(f"rho must be > 0, got {self.rho}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 1 <= self.steps_K <= MAX_SEARCH_STEPS:
            raise ValueError(f"steps_K must be in [1, {MAX_SEARCH_STEPS}], got {self.steps_K}")


def margin(scores, label) -> Union[float, np.ndarray]:
    """
    d = max_k s_k - sum_j label_j * s_j, row-wise.

    A one-hot label gives the gap between the top score and the true-class
    score. Returns a float for a single pair of vectors, else one value per row.
    """
    single = np.ndim(scores) == 1
    s = validate_soft_labels(scores)
    y = validate_soft_labels(label, num_classes=s.shape[1])
    if y.shape[0] != s.shape[0]:
        raise ValueError(f"Scores have {s.shape[0]} rows, labels have {y.shape[0]}")
    d = np.max(s, axis=1) - np.sum(y * s, axis=1)
    d = np.maximum(d, 0.0)
    return float(d[0]) if single else d


def interpolate(x, x_pgd, alpha) -> np.ndarray:
    """x' = alpha * x_pgd + (1 - alpha) * x; alpha may be a scalar or one value per row."""
    x = np.asarray(x, dtype=np.float64)
    x_pgd = np.asarray(x_pgd, dtype=np.float64)
    if x.shape != x_pgd.shape:
        raise ValueError(f"Shape mismatch: {list(x.shape)} vs {list(x_pgd.shape)}")
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0.0) or np.any(alpha > 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    if alpha.ndim == 1 and x.ndim == 2:
        alpha = alpha[:, None]
    return alpha * x_pgd + (1.0 - alpha) * x


def bisect_alpha(margin_fn: Callable[[np.ndarray], np.ndarray], rho: float, steps_K: int, batch_size: int = 1) -> np.ndarray:
    """
    Batched bisection on [0, 1].

    ``margin_fn`` receives one alpha per row and returns one margin per row;
    it is called exactly ``steps_K`` times. Rows with d < rho move alpha_l up,
    all others (including d == rho) move alpha_r down. Returns alpha_r.
    """
    alpha_l = np.zeros(batch_size)
    alpha_r = np.ones(batch_size)
    for _ in range(steps_K):
        alpha = (alpha_l + alpha_r) / 2.0
        d = np.broadcast_to(np.asarray(margin_fn(alpha), dtype=np.float64), (batch_size,))
        below = d < rho
        alpha_l = np.where(below, alpha, alpha_l)
        alpha_r = np.where(below, alpha_r, alpha)
    return alpha_r


def binary_search_alpha(
    model: Model,
    x: np.ndarray,
    x_pgd: np.ndarray,
    label: np.ndarray,
    cfg: InterpolationConfig,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Find alpha_hat per row and the interpolated adversarial examples.

    Every bisection step costs one forward pass over the whole batch.

    Args:
        model: Classifier, frozen for the duration of the search
        x: (B, d) clean inputs
        x_pgd: (B, d) PGD examples
        label: (B, C) one-hot or pseudo labels
        cfg: Threshold, temperature and number of steps

    Returns:
        tuple: (alpha_hat of shape (B,), x_adv of shape (B, d))
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_pgd = np.atleast_2d(np.asarray(x_pgd, dtype=np.float64))
    label = validate_soft_labels(label)
    frozen = model.detached()

    def margin_fn(alpha: np.ndarray) -> np.ndarray:
        midpoint = interpolate(x, x_pgd, alpha)
        return margin(score(forward(frozen, midpoint), cfg.tau).data, label)

    alpha_hat = bisect_alpha(margin_fn, cfg.rho, cfg.steps_K, batch_size=x.shape[0])
    return alpha_hat, interpolate(x, x_pgd, alpha_hat)


def margin_curve(model: Model, x: np.ndarray, x_pgd: np.ndarray, label: np.ndarray, tau: float, alphas: np.ndarray) -> np.ndarray:
    """d(alpha) on a grid of alphas, shape (B, len(alphas)); one forward per grid value."""
    frozen = model.detached()
    x = np.atleast_2d(x)
    x_pgd = np.atleast_2d(x_pgd)
    columns = [
        margin(score(forward(frozen, interpolate(x, x_pgd, float(a))), tau).data, label)
        for a in alphas
    ]
    return np.stack(columns, axis=1)


def effective_epsilon(x, x_adv) -> Union[float, np.ndarray]:
    """l-infinity distance, per row for batches."""
    diff = np.abs(np.asarray(x_adv, dtype=np.float64) - np.asarray(x, dtype=np.float64))
    if diff.ndim == 1:
        return float(np.max(diff))
    return np.max(diff, axis=1)
