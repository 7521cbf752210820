"""
SGD with momentum and coupled weight decay, plus the step learning-rate table.
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from utils.model import Model
from utils.tensor import GradientMap, ShapeError, Tensor

# Default decay points as fractions of the run: (after fraction, multiplier)
DEFAULT_LR_DECAY = ((0.6, 0.1), (0.7, 0.01), (0.9, 0.005))


def sgd_step(
    model: Model,
    grads: Sequence[np.ndarray],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Optional[List[np.ndarray]] = None,
) -> Tuple[Model, List[np.ndarray]]:
    """
    One update: v <- momentum * v + (g + weight_decay * p); p <- p - lr * v.

    Parameters are immutable tensors, so the step returns a new Model along
    with the new velocity buffers (zeros when ``velocity`` is None).

    Raises:
        ShapeError: If a gradient is not shaped like its parameter
    """
    if len(grads) != len(model.params):
        raise ShapeError(f"Got {len(grads)} gradients for {len(model.params)} parameters")
    if velocity is None:
        velocity = [np.zeros_like(p.data) for p in model.params]

    new_params = []
    new_velocity = []
    for param, grad, v in zip(model.params, grads, velocity):
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient shape {list(grad.shape)} does not match parameter {list(param.shape)}")
        v = momentum * v + (grad + weight_decay * param.data)
        new_params.append(Tensor(param.data - lr * v, requires_grad=True))
        new_velocity.append(v)
    return Model(model.layer_sizes, new_params), new_velocity


def lr_multiplier(decay_table: Sequence[Tuple[float, float]], epoch: int, total_epochs: int) -> float:
    """Multiplier of the latest entry whose fraction * total_epochs lies strictly before ``epoch``."""
    multiplier = 1.0
    for fraction, factor in sorted(decay_table):
        if epoch > fraction * total_epochs:
            multiplier = factor
    return multiplier


def collect_grads(grad_map: GradientMap, model: Model) -> List[np.ndarray]:
    """Parameter gradients in parameter order; zeros for parameters the loss never touched."""
    return [grad_map[p].data if p in grad_map else np.zeros(p.shape) for p in model.params]
