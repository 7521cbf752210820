import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from config import Config
from utils.datasets import Dataset, merge_semisup
from utils.model import Model, cross_entropy, forward, mlp_init, one_hot, score
from utils.optimizer import collect_grads, sgd_step
from utils.tensor import Tensor, backward

logger = logging.getLogger(__name__)


@dataclass
class TeacherConfig:
    confidence_threshold: float = 0.95
    unsup_weight: float = 1.0
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    labeled_batch_size: int = 32
    unlabeled_batch_size: int = 64
    weak_noise: float = 0.01
    strong_noise: float = 0.05
    max_shift: int = 2
    hidden: List[int] = field(default_factory=lambda: [64, 64])

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError(f"confidence_threshold must be in (0, 1), got {self.confidence_threshold}")
        if self.unsup_weight < 0:
            raise ValueError(f"unsup_weight must be >= 0, got {self.unsup_weight}")
        if self.epochs < 0 or self.labeled_batch_size < 1 or self.unlabeled_batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch sizes >= 1")
        if not 0.0 <= self.weak_noise <= self.strong_noise:
            raise ValueError(f"Need 0 <= weak_noise <= strong_noise, got {self.weak_noise} / {self.strong_noise}")

    @classmethod
    def from_experiment(cls, cfg) -> "TeacherConfig":
        section = cfg.teacher
        return cls(
            confidence_threshold=section.threshold,
            unsup_weight=section.unsup_weight,
            epochs=section.epochs,
            lr=section.lr,
            momentum=section.momentum,
            weight_decay=section.weight_decay,
            labeled_batch_size=section.labeled_batch_size,
            unlabeled_batch_size=section.unlabeled_batch_size,
            weak_noise=section.weak_noise,
            strong_noise=section.strong_noise,
            max_shift=section.max_shift,
            hidden=list(cfg.model.hidden),
        )


# ==============================================================
# AUGMENTATION
# ==============================================================

def _shift_image(image: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate with zero fill."""
    shifted = np.zeros_like(image)
    h, w = image.shape
    src_y = slice(max(0, -dy), min(h, h - dy))
    dst_y = slice(max(0, dy), min(h, h + dy))
    src_x = slice(max(0, -dx), min(w, w - dx))
    dst_x = slice(max(0, dx), min(w, w + dx))
    shifted[dst_y, dst_x] = image[src_y, src_x]
    return shifted


def augment(
    x: np.ndarray,
    rng: np.random.Generator,
    noise: float,
    image_shape: Optional[Tuple[int, ...]] = None,
    max_shift: int = 0,
    bounds: Optional[Tuple[float, float]] = None,
) -> np.ndarray:
    """
    Additive Gaussian jitter, plus a random translation for flattened images.

    Args:
        x: (B, d) inputs
        rng: Generator for the noise and the shifts
        noise: Jitter standard deviation
        image_shape: (H, W) when rows are flattened images
        max_shift: Largest translation in pixels per axis
        bounds: Optional (low, high) clip range

    Returns:
        np.ndarray: Augmented copy of ``x``
    """
    out = x + noise * rng.standard_normal(x.shape) if noise > 0 else x.copy()
    if image_shape is not None and max_shift > 0 and int(np.prod(image_shape[-2:])) == x.shape[1]:
        h, w = image_shape[-2:]
        shifts = rng.integers(-max_shift, max_shift + 1, size=(x.shape[0], 2))
        images = out.reshape(x.shape[0], h, w)
        out = np.stack([_shift_image(img, int(dy), int(dx)) for img, (dy, dx) in zip(images, shifts)])
        out = out.reshape(x.shape[0], -1)
    if bounds is not None:
        out = np.clip(out, bounds[0], bounds[1])
    return out


# ==============================================================
# TEACHER TRAINING
# ==============================================================

def train_teacher(data: Tuple[Dataset, Dataset], cfg: TeacherConfig, seed: int) -> Model:
    """
    Confidence-masked pseudo-label training of a non-robust teacher.

    Per step the loss is l_s + unsup_weight * l_u, where l_s is CE on weakly
    jittered labeled inputs and l_u is CE between strongly jittered unlabeled
    inputs and the hardened prediction on their weak view, counted only where
    that prediction is at least ``confidence_threshold`` confident.

    The labeled and unlabeled streams draw from separate generators and the
    step count depends only on the set sizes, so the labeled stream is the
    same whether or not l_u is computed.

    Raises:
        ValueError: If D_L is empty
    """
    labeled, unlabeled = data
    if labeled.num_labeled == 0:
        raise ValueError("Teacher training needs at least one labeled example")

    n, m = labeled.size, unlabeled.size
    bounds = labeled.domain_bounds
    model = mlp_init([labeled.input_dim, *cfg.hidden, labeled.num_classes], seed)
    rng_labeled, rng_unlabeled = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    use_unlabeled = m > 0 and cfg.unsup_weight > 0

    steps = math.ceil(n / cfg.labeled_batch_size)
    if m:
        steps = max(steps, math.ceil(m / cfg.unlabeled_batch_size))
    y_labeled = one_hot(labeled.labels, labeled.num_classes)

    logger.info(f"🎓 Training teacher on {n} labeled / {m} unlabeled points for {cfg.epochs} epochs")
    velocity = None
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="teacher", disable=not Config.SHOW_PROGRESS):
        mask_rate = []
        for _ in range(steps):
            rows = rng_labeled.choice(n, size=min(cfg.labeled_batch_size, n), replace=False)
            x_weak = augment(labeled.inputs[rows], rng_labeled, cfg.weak_noise, bounds=bounds)
            trainable = model.trainable()
            loss = cross_entropy(forward(trainable, x_weak), y_labeled[rows])

            if use_unlabeled:
                urows = rng_unlabeled.choice(m, size=min(cfg.unlabeled_batch_size, m), replace=False)
                xu = unlabeled.inputs[urows]
                weak = augment(xu, rng_unlabeled, cfg.weak_noise, bounds=bounds)
                strong = augment(xu, rng_unlabeled, cfg.strong_noise, unlabeled.image_shape, cfg.max_shift, bounds)
                probs = score(forward(model.detached(), weak)).data
                mask = probs.max(axis=1) >= cfg.confidence_threshold
                hard = one_hot(np.argmax(probs, axis=1), labeled.num_classes)
                per_row = cross_entropy(forward(trainable, strong), hard, reduction="none")
                l_u = (per_row * Tensor(mask / len(urows))).sum()
                loss = loss + l_u * cfg.unsup_weight
                mask_rate.append(mask.mean())

            grads = collect_grads(backward(loss), trainable)
            model, velocity = sgd_step(trainable, grads, cfg.lr, cfg.momentum, cfg.weight_decay, velocity)

        if mask_rate:
            logger.debug(f"Teacher epoch {epoch}: pseudo-label mask rate {np.mean(mask_rate):.3f}")

    return model.detached()


def assign_pseudo_labels(teacher: Model, dataset: Dataset) -> np.ndarray:
    """
    Soft labels for every row: one-hot ground truth for labeled rows, the
    teacher's temperature-1 softmax for the rest.

    Returns:
        np.ndarray: (N, C) rows summing to 1
    """
    labels = score(forward(teacher.detached(), dataset.inputs)).data.copy()
    if dataset.num_labeled:
        labels[: dataset.num_labeled] = one_hot(dataset.labels, dataset.num_classes)
    return labels


class TeacherAgent:
    """
    Phase 1: Teacher Agent

    Trains the non-robust teacher on D_L and D_U and labels the merged
    training set once, before any adversarial training starts.
    """

    def __init__(self, cfg: TeacherConfig):
        self.cfg = cfg

    def run(self, labeled: Dataset, unlabeled: Dataset, seed: int) -> Dict[str, Any]:
        try:
            teacher = train_teacher((labeled, unlabeled), self.cfg, seed)
            merged = merge_semisup(labeled, unlabeled)
            merged = replace(merged, pseudo_labels=assign_pseudo_labels(teacher, merged))

            result = {
                "status": "success",
                "phase": "teacher",
                "teacher": teacher,
                "data": merged,
            }
            if unlabeled.size and unlabeled.sealed_labels is not None:
                guessed = np.argmax(merged.pseudo_labels[labeled.size :], axis=1)
                result["pseudo_label_accuracy"] = float(np.mean(guessed == unlabeled.sealed_labels))
                logger.info(f"✅ Teacher ready, pseudo-label accuracy {result['pseudo_label_accuracy']:.3f}")
            else:
                logger.info("✅ Teacher ready")
            return result

        except (ValueError, RuntimeError) as e:
            logger.error(f"❌ Teacher phase failed: {e}")
            return {"status": "error", "phase": "teacher", "error": str(e)}
