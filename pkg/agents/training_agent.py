import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from agents.evaluation_agent import natural_accuracy, robust_accuracy
from config import Config
from utils.attack import AttackConfig, pgd
from utils.datasets import Dataset
from utils.interpolate import InterpolationConfig, binary_search_alpha, effective_epsilon, margin
from utils.losses import LossConfig, outer_loss_terms
from utils.model import Model, forward, mlp_init, score
from utils.optimizer import DEFAULT_LR_DECAY, collect_grads, lr_multiplier, sgd_step
from utils.schedule import RhoSchedule, ScheduleSpec, eps_at, rho_at
from utils.tensor import backward

logger = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "epoch", "eps_max", "rho", "mean_alpha_hat", "mean_eff_eps",
    "train_loss", "nat_acc", "robust_acc_pgd20", "wall_seconds",
]


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    attack: AttackConfig
    schedule: ScheduleSpec
    rho_schedule: RhoSchedule
    interp: InterpolationConfig
    loss: LossConfig
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_decay: Sequence[Tuple[float, float]] = DEFAULT_LR_DECAY
    hidden: List[int] = field(default_factory=lambda: [64, 64])
    seed: int = 0
    # Per-epoch robust accuracy on a test subset; skipped when None.
    eval_attack: Optional[AttackConfig] = None
    eval_points: int = 200
    record_wall_time: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError(f"epochs and batch_size must be >= 1, got {self.epochs} / {self.batch_size}")
        if self.lr <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr must be > 0, momentum and weight_decay >= 0")
        if self.schedule.total_epochs != self.epochs:
            raise ValueError(f"Schedule covers {self.schedule.total_epochs} epochs, training runs {self.epochs}")

    @classmethod
    def from_experiment(cls, cfg) -> "TrainConfig":
        return cls(
            epochs=cfg.train.epochs,
            batch_size=cfg.train.batch_size,
            attack=cfg.attack_template(),
            schedule=cfg.schedule_spec(),
            rho_schedule=cfg.rho_schedule(),
            interp=cfg.interp_config(),
            loss=cfg.loss_config(),
            lr=cfg.train.lr,
            momentum=cfg.train.momentum,
            weight_decay=cfg.train.weight_decay,
            lr_decay=cfg.lr_decay_table(),
            hidden=list(cfg.model.hidden),
            seed=cfg.run.seed,
            eval_attack=cfg.eval_attack(cfg.eval.epsilons[0], cfg.eval.epoch_steps),
            eval_points=cfg.eval.epoch_points,
            record_wall_time=cfg.run.record_wall_time,
        )


# ==============================================================
# METRICS
# ==============================================================

@dataclass
class EpochMetrics:
    epoch: int
    eps_max: float
    rho: float
    lr: float
    mean_alpha_hat: float
    mean_eff_eps: float
    mean_margin: float
    train_loss: float
    components: Dict[str, float] = field(default_factory=dict)
    nat_acc: Optional[float] = None
    robust_acc_pgd20: Optional[float] = None
    wall_seconds: Optional[float] = None


@dataclass
class MetricsLog:
    epochs: List[EpochMetrics] = field(default_factory=list)

    def append(self, row: EpochMetrics):
        self.epochs.append(row)

    def to_frame(self) -> pd.DataFrame:
        """Fixed-schema per-epoch table; unmeasured values stay empty."""
        return pd.DataFrame([{key: getattr(row, key) for key in METRICS_COLUMNS} for row in self.epochs], columns=METRICS_COLUMNS)

    def detail_frame(self) -> pd.DataFrame:
        """Every recorded field, loss components flattened to ``loss_<name>`` columns."""
        rows = []
        for row in self.epochs:
            record = asdict(row)
            components = record.pop("components")
            record.pop("wall_seconds")
            record.update({f"loss_{name}": value for name, value in sorted(components.items())})
            rows.append(record)
        return pd.DataFrame(rows)


# ==============================================================
# TRAINING LOOP
# ==============================================================

def train(
    train_cfg: TrainConfig,
    data: Dataset,
    teacher: Optional[Model] = None,
    test_set: Optional[Dataset] = None,
) -> Tuple[Model, MetricsLog]:
    """
    Adversarial training with margin-based interpolation.

    Targets are fixed once up front: one-hot labels for D_L rows and the
    teacher's soft pseudo-labels for D_U rows. Each epoch sets eps_max, rho and
    the learning rate; each batch runs one PGD attack at eps_max on a frozen
    copy of the current parameters, bisects alpha for the interpolating
    variants, and takes one SGD step on the outer loss.

    Args:
        train_cfg: Full training configuration
        data: Merged training set with pseudo-labels for unlabeled rows
        teacher: Teacher model, required by the weighted variants
        test_set: Optional labeled set for per-epoch accuracy

    Returns:
        tuple: (trained model, per-epoch metrics)

    Raises:
        TrainingDivergedError: If the loss becomes non-finite
    """
    cfg = train_cfg
    if cfg.loss.variant.is_awr and teacher is None:
        raise ValueError(f"{cfg.loss.variant.value} needs the teacher model")
    targets = data.training_targets()
    labeled_mask = data.labeled_mask
    interpolating = cfg.loss.variant.uses_interpolation and cfg.interp.enabled

    model = mlp_init([data.input_dim, *cfg.hidden, data.num_classes], cfg.seed)
    rng_shuffle, rng_attack = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
    attack = replace(cfg.attack, domain_bounds=cfg.attack.domain_bounds or data.domain_bounds)
    eval_subset = test_set.subset(cfg.eval_points) if test_set is not None else None
    velocity = None
    log = MetricsLog()

    logger.info(f"⚔️ Training {cfg.loss.variant.value} for {cfg.epochs} epochs on {data.size} points ({cfg.schedule.label})")
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="train", disable=not Config.SHOW_PROGRESS):
        started = time.perf_counter()
        eps_max = eps_at(cfg.schedule, epoch)
        rho = rho_at(cfg.rho_schedule, epoch)
        lr = cfg.lr * lr_multiplier(cfg.lr_decay, epoch, cfg.epochs)
        interp = replace(cfg.interp, rho=rho)
        epoch_attack = attack.with_epsilon(eps_max)

        order = rng_shuffle.permutation(data.size)
        sums = {"alpha": 0.0, "eff_eps": 0.0, "margin": 0.0, "loss": 0.0}
        component_sums: Dict[str, float] = {}
        for batch, start in enumerate(range(0, data.size, cfg.batch_size)):
            rows = order[start : start + cfg.batch_size]
            x, y, mask = data.inputs[rows], targets[rows], labeled_mask[rows]
            frozen = model.detached()

            x_pgd = pgd(frozen, x, y, epoch_attack, rng_attack)
            if interpolating:
                alpha_hat, x_adv = binary_search_alpha(frozen, x, x_pgd, y, interp)
            else:
                alpha_hat, x_adv = np.ones(len(rows)), x_pgd

            trainable = model.trainable()
            terms = outer_loss_terms(cfg.loss, trainable, teacher, x, x_adv, x_pgd, y, labeled_mask=mask)
            loss_value = terms.total.item()
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(f"Non-finite loss {loss_value}", epoch, batch)
            grads = collect_grads(backward(terms.total), trainable)
            model, velocity = sgd_step(trainable, grads, lr, cfg.momentum, cfg.weight_decay, velocity)

            weight = len(rows) / data.size
            sums["alpha"] += weight * float(np.mean(alpha_hat))
            sums["eff_eps"] += weight * float(np.mean(effective_epsilon(x, x_adv)))
            sums["margin"] += weight * float(np.mean(margin(score(forward(frozen, x_adv), interp.tau).data, y)))
            sums["loss"] += weight * loss_value
            for name, value in terms.components.items():
                component_sums[name] = component_sums.get(name, 0.0) + weight * value

        row = EpochMetrics(
            epoch=epoch,
            eps_max=eps_max,
            rho=rho,
            lr=lr,
            mean_alpha_hat=sums["alpha"],
            mean_eff_eps=sums["eff_eps"],
            mean_margin=sums["margin"],
            train_loss=sums["loss"],
            components=component_sums,
        )
        if eval_subset is not None:
            labels = eval_subset.evaluation_labels()
            row.nat_acc = natural_accuracy(model, eval_subset.inputs, labels)
            if cfg.eval_attack is not None:
                row.robust_acc_pgd20 = robust_accuracy(model, eval_subset.inputs, labels, cfg.eval_attack, cfg.seed)
        if cfg.record_wall_time:
            row.wall_seconds = time.perf_counter() - started
        log.append(row)
        logger.info(
            f"📈 Epoch {epoch}: eps_max={eps_max:.4f} rho={rho:g} loss={row.train_loss:.4f} "
            f"alpha={row.mean_alpha_hat:.3f} nat={row.nat_acc} rob={row.robust_acc_pgd20}"
        )

    return model.detached(), log


class TrainingAgent:
    """
    Phase 2: Training Agent

    Runs the adversarial training loop over the pseudo-labeled training set.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg

    def run(self, data: Dataset, teacher: Optional[Model] = None, test_set: Optional[Dataset] = None) -> Dict[str, Any]:
        try:
            model, log = train(self.cfg, data, teacher, test_set)
            logger.info(f"✅ Training finished after {self.cfg.epochs} epochs")
            return {"status": "success", "phase": "training", "model": model, "metrics": log}

        except TrainingDivergedError as e:
            logger.error(f"❌ Training diverged: {e}")
            return {"status": "error", "phase": "training", "error": str(e), "epoch": e.epoch, "batch": e.batch}
        except (ValueError, RuntimeError) as e:
            logger.error(f"❌ Training failed: {e}")
            return {"status": "error", "phase": "training", "error": str(e)}
