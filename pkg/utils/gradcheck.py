"""
Autodiff Oracle Suite

Compares reverse-mode gradients against central finite differences for every
primitive and for random MLP loss compositions, w.r.t. inputs and parameters.
"""

import logging
from typing import Callable, Dict, List, Tuple

import numpy as np
import pandas as pd

from utils.model import Model, cross_entropy, forward, kl_divergence, mlp_init, score
from utils.tensor import PrimitiveKind, Tensor, apply, backward, finite_difference_grad, relative_error

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
FD_STEP = 1e-5
# Components smaller than this are compared in absolute terms.
MAGNITUDE_FLOOR = 1e-6
KINK_MARGIN = 1e-3


def gradient_error(f: Callable[[Tensor], Tensor], x: np.ndarray) -> float:
    """Max relative error between backward() and the central difference of ``f`` at ``x``."""
    variable = Tensor(x, requires_grad=True)
    analytic = backward(f(variable))[variable].data
    numeric = finite_difference_grad(f, Tensor(x), h=FD_STEP).data
    return relative_error(analytic, numeric, floor=MAGNITUDE_FLOOR)


def _away_from_kinks(rng: np.random.Generator, shape, floor: float = 0.0) -> np.ndarray:
    values = rng.standard_normal(shape)
    return np.where(np.abs(values - floor) < KINK_MARGIN, floor + 2 * KINK_MARGIN, values)


def _primitive_table(rng: np.random.Generator) -> Dict[PrimitiveKind, Tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """One scalar-reduced function and evaluation point per primitive kind."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 2))
    # |weight| in [0.5, 1.5]
    weights = Tensor(rng.choice([-1.0, 1.0], size=(3, 4)) * rng.uniform(0.5, 1.5, size=(3, 4)))
    positive = np.abs(a) + 0.5

    cases = {
        PrimitiveKind.ADD: (lambda t: (apply("add", [t, Tensor(b)]) * weights).sum(), a),
        PrimitiveKind.SUBTRACT: (lambda t: (apply("subtract", [Tensor(b), t]) * weights).sum(), a),
        PrimitiveKind.MULTIPLY: (lambda t: apply("multiply", [t, t]).sum(), _away_from_kinks(rng, (3, 4))),
        PrimitiveKind.SCALE: (lambda t: (apply("scale", [t], factor=-2.5) * weights).sum(), a),
        PrimitiveKind.MATMUL: (lambda t: (apply("matmul", [t, Tensor(m)]) * Tensor(np.tile(np.linspace(-1.0, 1.0, 2), (3, 1)))).sum(), a),
        PrimitiveKind.RELU: (lambda t: (apply("relu", [t]) * weights).sum(), _away_from_kinks(rng, (3, 4))),
        PrimitiveKind.EXP: (lambda t: (apply("exp", [t]) * weights).sum(), a),
        PrimitiveKind.LOG: (lambda t: (apply("log", [t]) * weights).sum(), positive),
        PrimitiveKind.CLAMP_MIN: (lambda t: (apply("clamp_min", [t], floor=0.1) * weights).sum(), _away_from_kinks(rng, (3, 4), 0.1)),
        PrimitiveKind.SUM: (lambda t: (apply("sum", [t], axis=1) * Tensor(np.arange(1.0, 4.0))).sum(), a),
        PrimitiveKind.MAX: (lambda t: (apply("max", [t], axis=1) * Tensor(np.arange(1.0, 4.0))).sum(), _distinct_rows(rng)),
        PrimitiveKind.BROADCAST: (lambda t: (apply("broadcast", [t], shape=(3, 4)) * weights).sum(), a[:1]),
    }
    return cases


def primitive_cases(rng: np.random.Generator, points: int = 100) -> Dict[str, float]:
    """Worst relative error per primitive kind over ``points`` random evaluation points."""
    worst: Dict[str, float] = {}
    for _ in range(points):
        for kind, (f, x) in _primitive_table(rng).items():
            worst[kind.value] = max(worst.get(kind.value, 0.0), gradient_error(f, x))
    return worst


def _distinct_rows(rng: np.random.Generator) -> np.ndarray:
    # Row maxima separated from the runner-up so FD never crosses a tie.
    values = rng.standard_normal((3, 4))
    winners = np.argmax(values, axis=1)
    values[np.arange(3), winners] += 0.5
    return values


def _with_param(model: Model, index: int, value: Tensor) -> Model:
    params = list(model.detached().params)
    params[index] = value
    return Model(model.layer_sizes, params)


def _clear_of_kinks(model: Model, rng: np.random.Generator, d: int) -> np.ndarray:
    # Hidden pre-activations at least KINK_MARGIN from the relu kink.
    weight, bias = model.params[0].data, model.params[1].data
    while True:
        x = rng.uniform(0.0, 1.0, size=(3, d))
        if np.all(np.abs(x @ weight + bias) >= KINK_MARGIN):
            return x


def mlp_cases(num_models: int, seed: int) -> List[Dict[str, float]]:
    """Random 2-layer MLPs; checks input and first-layer weight gradients of three losses."""
    rng = np.random.default_rng(seed)
    rows = []
    for case in range(num_models):
        d, h, c = (int(v) for v in rng.integers(2, 6, size=3))
        model = mlp_init([d, h, c], seed=seed + case)
        x = _clear_of_kinks(model, rng, d)
        target = rng.dirichlet(np.ones(c), size=3)
        tau = float(rng.uniform(0.5, 3.0))
        reference = score(forward(model.detached(), x)).data

        losses = {
            "cross_entropy": lambda m, inputs: cross_entropy(forward(m, inputs), target, smoothing=0.1),
            "kl_consistency": lambda m, inputs: kl_divergence(Tensor(reference), score(forward(m, inputs))),
            "tempered_score": lambda m, inputs: (score(forward(m, inputs), tau) * Tensor(target)).sum(),
        }
        for name, loss in losses.items():
            input_error = gradient_error(lambda t: loss(model.detached(), t), x)
            weight_error = gradient_error(lambda w: loss(_with_param(model, 0, w), Tensor(x)), model.params[0].data)
            rows.append({"case": f"mlp{case}_{name}", "input_error": input_error, "param_error": weight_error})
    return rows


def run_gradcheck(num_models: int = 50, seed: int = 0, points: int = 100) -> pd.DataFrame:
    """
    Full oracle suite.

    Args:
        num_models: Random MLPs to check, three losses each
        seed: Seed for points, weights and architectures
        points: Random evaluation points per primitive

    Returns:
        pd.DataFrame: One row per check with columns case, max_rel_error, passed
    """
    rng = np.random.default_rng(seed)
    records = [{"case": f"primitive_{name}", "max_rel_error": err} for name, err in primitive_cases(rng, points).items()]
    for row in mlp_cases(num_models, seed):
        records.append({"case": row["case"], "max_rel_error": max(row["input_error"], row["param_error"])})

    table = pd.DataFrame(records)
    table["passed"] = table["max_rel_error"] < TOLERANCE
    failed = int((~table["passed"]).sum())
    if failed:
        logger.warning(f"⚠️ {failed} of {len(table)} gradient checks exceed {TOLERANCE}")
    else:
        logger.info(f"✅ All {len(table)} gradient checks within {TOLERANCE}")
    return table
