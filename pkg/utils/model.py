"""
MLP Classifier and Loss Primitives

Holds the feed-forward classifier f_theta, the temperature-scaled score
function, cross-entropy with optional label smoothing, KL divergence, and the
binary checkpoint codec.

Checkpoint layout (little-endian):
    8 bytes   magic "MFORGE01"
    u32       number of layer sizes L
    u32 * L   layer sizes (input dim, hidden widths, classes)
    f64 ...   per layer: weights (fan_in x fan_out, row-major), then biases
"""

import logging
import struct
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from utils.tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SOFT_LABEL_TOLERANCE = 1e-9
CHECKPOINT_MAGIC = b"MFORGE01"


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed."""


class Model:
    """
    Feed-forward classifier: relu on hidden layers, identity on the output.

    Parameters are stored as [W1, b1, W2, b2, ...] with W_l shaped
    (fan_in, fan_out) so that logits = x @ W + b.
    """

    def __init__(self, layer_sizes: Sequence[int], params: Sequence[Tensor]):
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.params: List[Tensor] = list(params)
        self._validate()

    def _validate(self):
        if len(self.params) != 2 * (len(self.layer_sizes) - 1):
            raise ShapeError(
                f"Expected {2 * (len(self.layer_sizes) - 1)} parameter tensors for sizes "
                f"{self.layer_sizes}, got {len(self.params)}"
            )
        for layer, (fan_in, fan_out) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            weight, bias = self.params[2 * layer], self.params[2 * layer + 1]
            if weight.shape != (fan_in, fan_out) or bias.shape != (fan_out,):
                raise ShapeError(
                    f"Layer {layer}: expected W {[fan_in, fan_out]} and b {[fan_out]}, "
                    f"got {list(weight.shape)} and {list(bias.shape)}"
                )

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.params)

    def detached(self) -> "Model":
        """Frozen view: same buffers, no parameter gradients recorded."""
        return Model(self.layer_sizes, [p.detach() for p in self.params])

    def trainable(self) -> "Model":
        """Same buffers, with every parameter requiring grad."""
        return Model(self.layer_sizes, [Tensor._wrap(p.data, requires_grad=True) for p in self.params])

    def parameter_arrays(self) -> List[np.ndarray]:
        return [p.data for p in self.params]

    def __repr__(self):
        return f"Model(layer_sizes={self.layer_sizes}, parameters={self.num_parameters})"


def mlp_init(layer_sizes: Sequence[int], seed: int) -> Model:
    """
    Build an MLP with He-uniform weights and zero biases.

    Weights of a layer with fan_in inputs are drawn from
    U(-sqrt(6 / fan_in), sqrt(6 / fan_in)) using numpy's default generator
    seeded with ``seed``, layer by layer.

    Args:
        layer_sizes: Input dim, hidden widths, number of classes
        seed: Generator seed

    Returns:
        Model: Freshly initialized trainable model
    """
    sizes = list(layer_sizes)
    if len(sizes) < 2 or any(int(s) <= 0 for s in sizes):
        raise ValueError(f"layer_sizes needs at least 2 positive entries, got {sizes}")

    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        params.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True))
        params.append(Tensor(np.zeros(fan_out), requires_grad=True))
    return Model(sizes, params)


def forward(model: Model, x_batch: Union[Tensor, np.ndarray]) -> Tensor:
    """
    Logits for a batch of inputs.

    Args:
        model: Classifier
        x_batch: (B, d) inputs; a single (d,) vector is treated as B = 1

    Returns:
        Tensor: (B, C) logits, differentiable w.r.t. inputs and parameters
    """
    x = x_batch if isinstance(x_batch, Tensor) else Tensor(x_batch)
    if len(x.shape) == 1:
        x = _as_row(x)
    if len(x.shape) != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"Input width mismatch: model expects {model.input_dim}, got shape {list(x.shape)}")

    hidden = x
    last = len(model.layer_sizes) - 2
    for layer in range(last + 1):
        weight, bias = model.params[2 * layer], model.params[2 * layer + 1]
        hidden = hidden @ weight + bias
        if layer < last:
            hidden = hidden.relu()
    return hidden


def _as_row(x: Tensor) -> Tensor:
    # (d,) -> (1, d); reshape is not a primitive, broadcasting keeps the graph.
    return x.broadcast_to((1, x.shape[0]))


def predict(model: Model, x_batch: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest index."""
    logits = forward(model.detached(), np.atleast_2d(x_batch)).data
    return np.argmax(logits, axis=1)


# ======================================================================
# SCORES AND SOFT LABELS
# ======================================================================

def log_softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Row-wise log softmax(logits / tau), stabilized by subtracting the row max."""
    if tau <= 0:
        raise ValueError(f"Temperature must be positive, got {tau}")
    scaled = logits if tau == 1.0 else logits * (1.0 / tau)
    # The shift cancels analytically, so it is taken as a constant.
    row_max = Tensor._wrap(np.max(scaled.data, axis=-1, keepdims=True))
    shifted = scaled - row_max
    log_norm = shifted.exp().sum(axis=-1, keepdims=True).log()
    return shifted - log_norm


def score(logits: Tensor, tau: float = 1.0) -> Tensor:
    """
    Temperature-scaled class scores softmax(logits / tau), one SoftLabel per row.

    Raises:
        ValueError: If tau <= 0
    """
    return log_softmax(logits, tau).exp()


def validate_soft_labels(probs, num_classes: Optional[int] = None) -> np.ndarray:
    """
    Check that every row is a probability vector.

    Returns:
        np.ndarray: The labels as a 2-D float64 array

    Raises:
        ValueError: On negative entries, rows not summing to 1, or wrong width
    """
    array = np.atleast_2d(np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64))
    if array.ndim != 2:
        raise ValueError(f"Soft labels must be 2-D, got shape {list(array.shape)}")
    if num_classes is not None and array.shape[1] != num_classes:
        raise ValueError(f"Soft labels have {array.shape[1]} classes, expected {num_classes}")
    if not np.all(np.isfinite(array)) or np.any(array < 0.0):
        raise ValueError("Soft labels must be finite and non-negative")
    sums = array.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > SOFT_LABEL_TOLERANCE):
        worst = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(f"Soft label row {worst} sums to {sums[worst]!r}, expected 1")
    return array


def one_hot(labels: Sequence[int], num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"Class index out of range [0, {num_classes})")
    encoded = np.zeros((labels.size, num_classes), dtype=np.float64)
    encoded[np.arange(labels.size), labels] = 1.0
    return encoded


def entropy(p) -> np.ndarray:
    """Row entropies with 0 log 0 := 0."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    logs = np.log(np.maximum(p, PROB_FLOOR))
    return -np.sum(p * logs, axis=1)


# ======================================================================
# LOSSES
# ======================================================================

def _reduce(per_row: Tensor, reduction: str) -> Tensor:
    if reduction == "none":
        return per_row
    if reduction == "sum":
        return per_row.sum()
    if reduction == "mean":
        return per_row.mean()
    raise ValueError(f"Unknown reduction: {reduction}")


def cross_entropy(logits: Tensor, target, smoothing: float = 0.0, reduction: str = "mean") -> Tensor:
    """
    Soft-target cross-entropy -sum_c t'_c log softmax(logits)_c.

    The smoothed target is t' = (1 - smoothing) * target + smoothing / C, so
    smoothing = 0 is plain soft cross-entropy.

    Args:
        logits: (B, C) logits
        target: (B, C) soft labels (constant)
        smoothing: Label smoothing in [0, 1)
        reduction: "mean" (default), "sum" or "none" for per-row values

    Returns:
        Tensor: Scalar loss, or (B,) per-row losses
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"Label smoothing must be in [0, 1), got {smoothing}")
    if len(logits.shape) == 1:
        logits = _as_row(logits)
    target = validate_soft_labels(target, num_classes=logits.shape[-1])
    if target.shape[0] != logits.shape[0]:
        raise ValueError(f"Target has {target.shape[0]} rows, logits have {logits.shape[0]}")

    classes = logits.shape[-1]
    smoothed = (1.0 - smoothing) * target + smoothing / classes
    per_row = -(log_softmax(logits) * Tensor._wrap(smoothed)).sum(axis=-1)
    return _reduce(per_row, reduction)


def kl_divergence(p, q, reduction: str = "mean") -> Tensor:
    """
    KL(p || q) = sum_c p_c (log p_c - log q_c), row-wise.

    Both arguments may be Tensors (gradient flows through them) or arrays.
    Probabilities are floored at 1e-12 inside the logs, so 0 log 0 = 0 and
    zero entries of q stay finite.

    Returns:
        Tensor: Scalar (mean/sum over rows) or (B,) per-row values
    """
    p = p if isinstance(p, Tensor) else Tensor(np.atleast_2d(np.asarray(p, dtype=np.float64)))
    q = q if isinstance(q, Tensor) else Tensor(np.atleast_2d(np.asarray(q, dtype=np.float64)))
    if len(p.shape) == 1:
        p = _as_row(p)
    if len(q.shape) == 1:
        q = _as_row(q)
    validate_soft_labels(p)
    validate_soft_labels(q)
    if p.shape != q.shape:
        raise ShapeError(f"KL operands differ in shape: {list(p.shape)} vs {list(q.shape)}")

    log_ratio = p.clamp_min(PROB_FLOOR).log() - q.clamp_min(PROB_FLOOR).log()
    per_row = (p * log_ratio).sum(axis=-1)
    return _reduce(per_row, reduction)


# ======================================================================
# CHECKPOINTS
# ======================================================================

def encode_checkpoint(model: Model) -> bytes:
    header = CHECKPOINT_MAGIC + struct.pack("<I", len(model.layer_sizes))
    header += struct.pack(f"<{len(model.layer_sizes)}I", *model.layer_sizes)
    body = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.params)
    return header + body


def decode_checkpoint(payload: bytes) -> Model:
    """
    Inverse of ``encode_checkpoint``; bit-exact.

    Raises:
        CheckpointError: On bad magic, fewer than 2 layer sizes, truncation or trailing bytes
    """
    if payload[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Bad checkpoint magic at byte 0: {payload[:8]!r}")
    if len(payload) < 12:
        raise CheckpointError("Checkpoint truncated inside the header")
    (count,) = struct.unpack_from("<I", payload, 8)
    if count < 2:
        raise CheckpointError(f"Checkpoint header at byte 8 lists {count} layer sizes, need at least 2")
    offset = 12
    if len(payload) < offset + 4 * count:
        raise CheckpointError(f"Checkpoint truncated at byte {len(payload)}: layer-size table needs {4 * count} bytes")
    sizes = list(struct.unpack_from(f"<{count}I", payload, offset))
    offset += 4 * count

    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        for shape in ((fan_in, fan_out), (fan_out,)):
            nbytes = 8 * int(np.prod(shape))
            if len(payload) < offset + nbytes:
                raise CheckpointError(
                    f"Checkpoint truncated at byte {len(payload)}: expected {offset + nbytes} bytes"
                )
            array = np.frombuffer(payload, dtype="<f8", count=nbytes // 8, offset=offset).astype(np.float64)
            params.append(Tensor(array.reshape(shape), requires_grad=True))
            offset += nbytes
    if offset != len(payload):
        raise CheckpointError(f"Checkpoint has {len(payload) - offset} trailing bytes after offset {offset}")
    return Model(sizes, params)


def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    from utils.artifacts import write_bytes_atomic

    target = write_bytes_atomic(path, encode_checkpoint(model))
    logger.info(f"💾 Saved checkpoint ({model.num_parameters} parameters) to {target}")
    return target


def load_checkpoint(path: Union[str, Path]) -> Model:
    return decode_checkpoint(Path(path).read_bytes())
