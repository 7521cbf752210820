"""
Datasets and Semi-Supervised Splits

Synthetic generators (all scaled into [0, 1]^2), IDX ingestion and the
stratified labeled/unlabeled split. Ground truth of unlabeled rows is kept in
a sealed channel that only evaluation code reads.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from utils.idx_format import IdxFormatError, image_shape_from_header, parse_idx
from utils.model import one_hot, validate_soft_labels

logger = logging.getLogger(__name__)

SYNTHETIC_KINDS = ("two_moons", "gaussian_blobs", "concentric_circles")

# two_moons: native arcs fill the box [-1, 2] x [-0.5, 1]; each axis is
# min-max scaled onto [0, 1], so the arcs become half-ellipses.
MOONS_LOW = np.array([-1.0, -0.5])
MOONS_SPAN = np.array([3.0, 1.5])
BLOB_CENTERS = np.array([[0.25, 0.25], [0.75, 0.75]])
CIRCLE_CENTER = np.array([0.5, 0.5])
CIRCLE_RADII = (0.15, 0.35)


@dataclass
class Dataset:
    """
    Inputs with labels for the first ``num_labeled`` rows.

    Rows after ``num_labeled`` are unlabeled; their ground truth, when known,
    lives in ``sealed_labels`` and is only exposed by ``evaluation_labels``.
    """

    inputs: np.ndarray
    labels: Optional[np.ndarray]
    num_classes: int
    domain_bounds: Optional[Tuple[float, float]] = None
    image_shape: Optional[Tuple[int, ...]] = None
    pseudo_labels: Optional[np.ndarray] = None
    sealed_labels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.ndim != 1 or self.labels.shape[0] > self.inputs.shape[0]:
                raise ValueError("labels must be 1-D and no longer than inputs")
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
                raise ValueError(f"Class index out of range [0, {self.num_classes})")
        if self.sealed_labels is not None:
            self.sealed_labels = np.asarray(self.sealed_labels, dtype=np.int64)
            if self.num_labeled + self.sealed_labels.shape[0] != self.size:
                raise ValueError("sealed labels must cover exactly the unlabeled rows")
        if self.pseudo_labels is not None:
            self.pseudo_labels = validate_soft_labels(self.pseudo_labels, num_classes=self.num_classes)
            if self.pseudo_labels.shape[0] != self.size:
                raise ValueError("pseudo_labels need one row per input")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def num_labeled(self) -> int:
        return 0 if self.labels is None else int(self.labels.shape[0])

    @property
    def num_unlabeled(self) -> int:
        return self.size - self.num_labeled

    @property
    def labeled_mask(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[: self.num_labeled] = True
        return mask

    def evaluation_labels(self) -> np.ndarray:
        """Full ground truth, for evaluation only."""
        parts = [self.labels if self.labels is not None else np.zeros(0, dtype=np.int64)]
        if self.num_unlabeled:
            if self.sealed_labels is None:
                raise ValueError("Unlabeled rows carry no sealed ground truth")
            parts.append(self.sealed_labels)
        return np.concatenate(parts)

    def training_targets(self) -> np.ndarray:
        """One-hot rows for labeled points followed by pseudo-labels for the rest."""
        targets = np.zeros((self.size, self.num_classes))
        if self.num_labeled:
            targets[: self.num_labeled] = one_hot(self.labels, self.num_classes)
        if self.num_unlabeled:
            if self.pseudo_labels is None:
                raise ValueError("Unlabeled rows have no pseudo-labels yet")
            targets[self.num_labeled :] = self.pseudo_labels[self.num_labeled :]
        return targets

    def subset(self, count: int) -> "Dataset":
        """First ``count`` rows as a fully labeled evaluation set."""
        labels = self.evaluation_labels()[:count]
        return Dataset(self.inputs[:count], labels, self.num_classes, self.domain_bounds, self.image_shape)


def merge_semisup(labeled: Dataset, unlabeled: Dataset) -> Dataset:
    """D_L rows first, then D_U rows, keeping D_U's sealed ground truth."""
    if labeled.num_classes != unlabeled.num_classes:
        raise ValueError("Class counts differ between D_L and D_U")
    if unlabeled.num_labeled:
        raise ValueError("D_U must not expose labels")
    inputs = np.concatenate([labeled.inputs, unlabeled.inputs]) if unlabeled.size else labeled.inputs
    return Dataset(
        inputs=inputs,
        labels=labeled.labels,
        num_classes=labeled.num_classes,
        domain_bounds=labeled.domain_bounds,
        image_shape=labeled.image_shape,
        sealed_labels=unlabeled.sealed_labels if unlabeled.size else None,
    )


# ======================================================================
# SYNTHETIC GENERATORS
# ======================================================================

def moons_native_to_unit(points: np.ndarray) -> np.ndarray:
    return (points - MOONS_LOW) / MOONS_SPAN


def moons_unit_to_native(points: np.ndarray) -> np.ndarray:
    return points * MOONS_SPAN + MOONS_LOW


def _two_moons(counts, rng) -> Tuple[np.ndarray, np.ndarray]:
    t0 = rng.uniform(0.0, np.pi, counts[0])
    t1 = rng.uniform(0.0, np.pi, counts[1])
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    points = moons_native_to_unit(np.concatenate([upper, lower]))
    return points, np.repeat([0, 1], counts)


def _gaussian_blobs(counts, rng, sigma) -> Tuple[np.ndarray, np.ndarray]:
    points = np.concatenate([center + sigma * rng.standard_normal((n, 2)) for center, n in zip(BLOB_CENTERS, counts)])
    return points, np.repeat([0, 1], counts)


def _concentric_circles(counts, rng) -> Tuple[np.ndarray, np.ndarray]:
    parts = []
    for radius, n in zip(CIRCLE_RADII, counts):
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        parts.append(CIRCLE_CENTER + radius * np.stack([np.cos(theta), np.sin(theta)], axis=1))
    return np.concatenate(parts), np.repeat([0, 1], counts)


def gen_synthetic(kind: str, n_points: int, noise_sigma: float, seed: int) -> Dataset:
    """
    Two-class point cloud in [0, 1]^2, fully labeled, rows shuffled.

    two_moons: interleaving unit half-circles, each axis min-max scaled from
        the native box [-1, 2] x [-0.5, 1]; the classes end up 0.2 apart in
        l-infinity at the arc tips and about 1/3 apart in the middle.
    gaussian_blobs: isotropic Gaussians (std ``noise_sigma``) at (0.25, 0.25) and (0.75, 0.75).
    concentric_circles: rings of radius 0.15 and 0.35 around (0.5, 0.5).

    Moons and circles get isotropic Gaussian noise of std ``noise_sigma`` after
    scaling. Every kind is finally clipped to [0, 1].
    """
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"Unknown synthetic kind {kind!r}; choose from {', '.join(SYNTHETIC_KINDS)}")
    if n_points < 2:
        raise ValueError(f"n_points must be >= 2, got {n_points}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")

    rng = np.random.default_rng(seed)
    counts = ((n_points + 1) // 2, n_points // 2)
    if kind == "two_moons":
        points, labels = _two_moons(counts, rng)
    elif kind == "gaussian_blobs":
        points, labels = _gaussian_blobs(counts, rng, noise_sigma)
    else:
        points, labels = _concentric_circles(counts, rng)

    if kind != "gaussian_blobs" and noise_sigma > 0:
        points = points + noise_sigma * rng.standard_normal(points.shape)
    points = np.clip(points, 0.0, 1.0)

    order = rng.permutation(n_points)
    return Dataset(points[order], labels[order], num_classes=2)


# ======================================================================
# IDX FILES
# ======================================================================

def load_idx_dataset(images_path: Union[str, Path], labels_path: Union[str, Path], limit: int = 0) -> Dataset:
    """Pair an IDX image file with its label file; pixels land in [0, 1]."""
    image_bytes = Path(images_path).read_bytes()
    images = parse_idx(image_bytes)
    labels = parse_idx(Path(labels_path).read_bytes(), normalize=False)
    if labels.ndim != 1:
        raise IdxFormatError(f"Label file must be 1-D, got {labels.ndim} dimensions")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if images.ndim == 1:
        images = images[:, None]
    if limit:
        images, labels = images[:limit], labels[:limit]

    image_shape = tuple(image_shape_from_header(image_bytes)) if image_bytes[3] >= 3 else None
    labels = labels.astype(np.int64)
    logger.info(f"📥 Loaded {images.shape[0]} IDX examples of width {images.shape[1]} from {images_path}")
    return Dataset(images, labels, num_classes=int(labels.max()) + 1, domain_bounds=(0.0, 1.0), image_shape=image_shape)


# ======================================================================
# SPLIT
# ======================================================================

def labeled_quota(class_counts: np.ndarray, labeled_fraction: float) -> np.ndarray:
    """
    Per-class labeled counts.

    round(fraction * N) labels are spread evenly across classes; the remainder
    goes one each to the lowest class indices. A class never gets more labels
    than it has points.
    """
    total = int(np.floor(labeled_fraction * class_counts.sum() + 0.5))
    classes = class_counts.shape[0]
    quota = np.full(classes, total // classes)
    quota[: total % classes] += 1
    return np.minimum(quota, class_counts)


def split_semisup(dataset: Dataset, labeled_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Stratified split into D_L and D_U.

    Both parts keep the original row order. D_U exposes no labels; its ground
    truth is sealed for evaluation.

    Raises:
        ValueError: If the fraction is out of (0, 1] or some class gets no labels
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    truth = dataset.evaluation_labels()
    class_counts = np.bincount(truth, minlength=dataset.num_classes)

    if labeled_fraction == 1.0:
        chosen = np.ones(dataset.size, dtype=bool)
    else:
        quota = labeled_quota(class_counts, labeled_fraction)
        if np.any(quota[class_counts > 0] == 0):
            raise ValueError(f"labeled_fraction {labeled_fraction} leaves a class without labeled examples")
        rng = np.random.default_rng(seed)
        chosen = np.zeros(dataset.size, dtype=bool)
        for cls in range(dataset.num_classes):
            members = np.flatnonzero(truth == cls)
            chosen[rng.permutation(members)[: quota[cls]]] = True

    common = dict(num_classes=dataset.num_classes, domain_bounds=dataset.domain_bounds, image_shape=dataset.image_shape)
    labeled = Dataset(dataset.inputs[chosen], truth[chosen], **common)
    unlabeled = Dataset(dataset.inputs[~chosen], None, sealed_labels=truth[~chosen], **common)
    logger.info(f"✂️ Split {dataset.size} points into {labeled.size} labeled / {unlabeled.size} unlabeled")
    return labeled, unlabeled


def dataset_manifest(kind: str, params: Dict[str, Any], seed: int, labeled: Dataset, unlabeled: Dataset) -> Dict[str, Any]:
    return {
        "kind": kind,
        "params": params,
        "seed": seed,
        "split": {
            "labeled": labeled.size,
            "unlabeled": unlabeled.size,
            "labeled_per_class": np.bincount(labeled.labels, minlength=labeled.num_classes).tolist(),
        },
    }
