"""
Experiment Configuration

Line-oriented ``section.key = value`` files. A ``#`` at the start of a line or
after whitespace starts a comment, so ``a#b`` is a plain value. Strings are
unquoted, numbers decimal, booleans true/false, lists comma-separated. Every
key below is a typed field; unknown sections or keys are rejected with the
offending line number.
"""

import logging
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union, get_type_hints

from utils.attack import AttackConfig, InnerObjective
from utils.interpolate import InterpolationConfig
from utils.losses import AwrConfig, LossConfig, LossVariant
from utils.optimizer import DEFAULT_LR_DECAY
from utils.schedule import RhoSchedule, ScheduleSpec, ScheduleVariant

logger = logging.getLogger(__name__)

COMMENT = re.compile(r"(^|\s)#.*$")


class ConfigError(ValueError):
    """Invalid configuration; ``line`` is the 1-based line number when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# ======================================================================
# SECTIONS
# ======================================================================

@dataclass
class RunSection:
    name: str = "ssat_mbi"
    seed: int = 0
    output_dir: str = "runs"
    record_wall_time: bool = False


@dataclass
class DataSection:
    kind: str = "two_moons"
    n_points: int = 1000
    n_test: int = 500
    noise: float = 0.03
    labeled_fraction: float = 0.05
    domain_bounds: List[float] = field(default_factory=list)
    idx_images: str = ""
    idx_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    limit: int = 0


@dataclass
class ModelSection:
    hidden: List[int] = field(default_factory=lambda: [64, 64])


@dataclass
class TeacherSection:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    threshold: float = 0.95
    unsup_weight: float = 1.0
    labeled_batch_size: int = 32
    unlabeled_batch_size: int = 64
    weak_noise: float = 0.01
    strong_noise: float = 0.05
    max_shift: int = 2


@dataclass
class TrainSection:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 2e-4
    lr_decay: List[str] = field(default_factory=lambda: [f"{f!r}:{m!r}" for f, m in DEFAULT_LR_DECAY])


@dataclass
class AttackSection:
    steps: int = 10
    step_size: float = 0.0
    objective: str = "ce_soft"
    random_start: bool = True


@dataclass
class ScheduleSection:
    variant: str = "curious"
    eps_base: float = 0.1
    t: int = 21
    gamma: float = 1.25


@dataclass
class RhoSection:
    initial: float = 0.05
    double_at: int = 23


@dataclass
class InterpSection:
    enabled: bool = True
    tau: float = 2.0
    steps_k: int = 3


@dataclass
class LossSection:
    variant: str = "ssat_mbi"
    lambda_: float = 8.0
    beta: float = 0.4
    gamma_prime: float = 1.0
    lambda_prime: float = 20.0
    tau_prime: float = 1.0
    alpha_prime: float = 0.2


@dataclass
class EvalSection:
    epsilons: List[float] = field(default_factory=lambda: [0.1])
    steps: List[int] = field(default_factory=lambda: [10, 20])
    restarts: int = 1
    objective: str = "ce_hard"
    epoch_points: int = 200
    epoch_steps: int = 20
    diag_points: int = 200
    diag_grid: int = 11
    checkpoint: str = ""


@dataclass
class SweepSection:
    betas: List[float] = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])
    rhos: List[float] = field(default_factory=lambda: [0.025, 0.05, 0.1])


@dataclass
class PlotSection:
    boundary: bool = True
    resolution: int = 100
    traces: int = 8


SECTIONS = {
    "run": RunSection,
    "data": DataSection,
    "model": ModelSection,
    "teacher": TeacherSection,
    "train": TrainSection,
    "attack": AttackSection,
    "schedule": ScheduleSection,
    "rho": RhoSection,
    "interp": InterpSection,
    "loss": LossSection,
    "eval": EvalSection,
    "sweep": SweepSection,
    "plot": PlotSection,
}


def _key(field_name: str) -> str:
    return field_name.rstrip("_")


def _field_name(section_name: str, key: str) -> Optional[str]:
    for f in fields(SECTIONS[section_name]):
        if _key(f.name) == key:
            return f.name
    return None


def _coerce(raw: str, kind: Any) -> Any:
    if kind is bool:
        lowered = raw.lower()
        if lowered not in ("true", "false"):
            raise ValueError(f"expected true or false, got {raw!r}")
        return lowered == "true"
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is str:
        return raw
    item_kind = getattr(kind, "__args__", (str,))[0]
    if not raw.strip():
        return []
    return [_coerce(part.strip(), item_kind) for part in raw.split(",")]


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_render(item) for item in value)
    if isinstance(value, str) and (COMMENT.search(value) or value != value.strip()):
        raise ValueError(f"string {value!r} would not survive a reload")
    return str(value)


def _check_ranges(config: "ExperimentConfig"):
    if config.data.kind not in ("two_moons", "gaussian_blobs", "concentric_circles", "idx"):
        raise ValueError(f"unknown data.kind {config.data.kind!r}")
    if config.data.kind == "idx" and not (config.data.idx_images and config.data.idx_labels):
        raise ValueError("data.kind = idx needs data.idx_images and data.idx_labels")
    if config.train.epochs < 1 or config.train.batch_size < 1 or config.teacher.epochs < 0:
        raise ValueError("train.epochs and train.batch_size must be >= 1, teacher.epochs >= 0")
    if not config.eval.epsilons or not config.eval.steps:
        raise ValueError("eval.epsilons and eval.steps must not be empty")
    if config.eval.diag_grid < 2 or config.plot.resolution < 2:
        raise ValueError("eval.diag_grid and plot.resolution must be >= 2")
    if len(config.data.domain_bounds) not in (0, 2):
        raise ValueError("data.domain_bounds takes two values or none")


def _check_eval_attack(config: "ExperimentConfig"):
    config.eval_attack(config.eval.epsilons[0] if config.eval.epsilons else 0.0, 1)


# ======================================================================
# EXPERIMENT CONFIG
# ======================================================================

@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    train: TrainSection = field(default_factory=TrainSection)
    attack: AttackSection = field(default_factory=AttackSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    rho: RhoSection = field(default_factory=RhoSection)
    interp: InterpSection = field(default_factory=InterpSection)
    loss: LossSection = field(default_factory=LossSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    plot: PlotSection = field(default_factory=PlotSection)
    # "section.key" -> line it was read from
    source_lines: Dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def parse(cls, text: str, validate: bool = True) -> "ExperimentConfig":
        """
        Parse config text; unspecified keys keep their defaults.

        Raises:
            ConfigError: On malformed lines, unknown keys, duplicates or bad values
        """
        config = cls()
        seen: Dict[str, int] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            content = COMMENT.sub("", line).strip()
            if not content:
                continue
            if "=" not in content:
                raise ConfigError(f"expected 'section.key = value', got {content!r}", number)
            name, raw = (part.strip() for part in content.split("=", 1))
            if name.count(".") != 1:
                raise ConfigError(f"key must look like section.key, got {name!r}", number)
            section_name, key = name.split(".")
            if section_name not in SECTIONS:
                raise ConfigError(f"unknown section {section_name!r}", number)
            if name in seen:
                raise ConfigError(f"duplicate key {name!r} (first set on line {seen[name]})", number)
            seen[name] = number

            section = getattr(config, section_name)
            field_name = _field_name(section_name, key)
            if field_name is None:
                raise ConfigError(f"unknown key {key!r} in section {section_name!r}", number)
            try:
                setattr(section, field_name, _coerce(raw, get_type_hints(type(section))[field_name]))
            except ValueError as e:
                raise ConfigError(f"bad value for {name}: {e}", number)

        config.source_lines = seen
        if validate:
            config.validate()
        return config

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        return cls.parse(text)

    def serialize(self) -> str:
        """
        Render every key, defaults included.

        Raises:
            ConfigError: If a string value holds a comment marker or edge whitespace
        """
        lines = []
        for section_name in SECTIONS:
            section = getattr(self, section_name)
            for f in fields(section):
                name = f"{section_name}.{_key(f.name)}"
                try:
                    lines.append(f"{name} = {_render(getattr(section, f.name))}")
                except ValueError as e:
                    raise ConfigError(f"cannot serialize {name}: {e}")
            lines.append("")
        return "\n".join(lines)

    def copy_with(self, section_name: str, **changes) -> "ExperimentConfig":
        """New config with ``changes`` applied to one section."""
        sections = {name: replace(getattr(self, name)) for name in SECTIONS}
        sections[section_name] = replace(sections[section_name], **changes)
        return ExperimentConfig(**sections, source_lines=dict(self.source_lines))

    # ------------------------------------------------------------------
    # Validation
    # ------------------------------------------------------------------

    def validate(self):
        """
        Build every derived setting once so bad values fail before any work starts.

        Raises:
            ConfigError: With the line of the offending key when the config came from text
        """
        checks: List[Callable[["ExperimentConfig"], Any]] = [
            ExperimentConfig.attack_template,
            ExperimentConfig.schedule_spec,
            ExperimentConfig.rho_schedule,
            ExperimentConfig.interp_config,
            ExperimentConfig.loss_config,
            ExperimentConfig.lr_decay_table,
            _check_eval_attack,
            _check_ranges,
        ]
        for check in checks:
            try:
                check(self)
            except ValueError as e:
                raise ConfigError(str(e), self._blame(check, str(e)))

    def _blame(self, check: Callable[["ExperimentConfig"], Any], message: str) -> Optional[int]:
        """
        Line of the first key whose default value clears or changes the failure.

        Returns None for configs built in code, where no key has a line.
        """
        defaults = ExperimentConfig()
        for name, line in sorted(self.source_lines.items(), key=lambda item: item[1]):
            section_name, key = name.split(".")
            field_name = _field_name(section_name, key)
            default = getattr(getattr(defaults, section_name), field_name)
            try:
                check(self.copy_with(section_name, **{field_name: default}))
            except ValueError as e:
                if str(e) == message:
                    continue
            return line
        return None

    # ------------------------------------------------------------------
    # Builders for the library-level settings
    # ------------------------------------------------------------------

    @property
    def domain_bounds(self) -> Optional[Tuple[float, float]]:
        if self.data.domain_bounds:
            return tuple(self.data.domain_bounds)
        return (0.0, 1.0) if self.data.kind == "idx" else None

    def attack_template(self) -> AttackConfig:
        return AttackConfig(
            epsilon=self.schedule.eps_base,
            steps=self.attack.steps,
            step_size=self.attack.step_size or None,
            objective=InnerObjective(self.attack.objective),
            domain_bounds=self.domain_bounds,
            random_start=self.attack.random_start,
        )

    def eval_attack(self, epsilon: float, steps: int, restarts: int = 1) -> AttackConfig:
        return AttackConfig(
            epsilon=epsilon,
            steps=steps,
            objective=InnerObjective(self.eval.objective),
            domain_bounds=self.domain_bounds,
            restarts=restarts,
        )

    def schedule_spec(self) -> ScheduleSpec:
        variant = ScheduleVariant(self.schedule.variant)
        return ScheduleSpec(
            variant=variant,
            eps_base=self.schedule.eps_base,
            total_epochs=self.train.epochs,
            t=None if variant == ScheduleVariant.CONST else self.schedule.t,
            gamma=self.schedule.gamma,
        )

    def rho_schedule(self) -> RhoSchedule:
        double_at = self.rho.double_at or None
        if double_at is not None and double_at > self.train.epochs:
            raise ValueError(f"rho.double_at {double_at} exceeds train.epochs {self.train.epochs}")
        return RhoSchedule(self.rho.initial, double_at)

    def interp_config(self) -> InterpolationConfig:
        return InterpolationConfig(
            rho=self.rho.initial, tau=self.interp.tau, steps_K=self.interp.steps_k, enabled=self.interp.enabled
        )

    def loss_config(self) -> LossConfig:
        variant = LossVariant(self.loss.variant)
        awr = None
        if variant.is_awr:
            awr = AwrConfig(
                gamma_prime=self.loss.gamma_prime,
                lambda_prime=self.loss.lambda_prime,
                tau_prime=self.loss.tau_prime,
                alpha_prime=self.loss.alpha_prime,
            )
        return LossConfig(variant=variant, lambda_=self.loss.lambda_, beta=self.loss.beta, awr=awr)

    def lr_decay_table(self) -> List[Tuple[float, float]]:
        table = []
        for entry in self.train.lr_decay:
            try:
                fraction, factor = (float(part) for part in entry.split(":"))
            except ValueError:
                raise ValueError(f"train.lr_decay entries look like fraction:factor, got {entry!r}")
            if not 0.0 <= fraction < 1.0 or factor <= 0:
                raise ValueError(f"train.lr_decay entry {entry!r} out of range")
            table.append((fraction, factor))
        return table
