import dataclasses
import hashlib
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

from utils.attack_utils import AttackKind, AttackSpec
from utils.data_utils import LabeledDataset, load_idx_dataset, make_synthetic_dataset, train_test_split
from utils.lp_utils import AttackNorm
from utils.tensor_utils import MlpModel, SgdConfig, init_mlp
from utils.training_utils import LrSchedule, RampConfig, RandMode, TrainMethod, TrainPlan

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "RAMP_KIT_SEED"
REQUIRED_KEYS = (("dataset", "kind"), ("train", "method"), ("train", "epochs"), ("output", "dir"))
FINETUNE_LAMBDA = 0.5
SCRATCH_LAMBDA = 2.0


class ConfigError(ValueError):
    """Raised for missing or invalid configuration entries."""

    def __init__(self, message, section=None, key=None):
        location = f"{section}.{key}" if section and key else (section or key or "")
        super().__init__(f"{location}: {message}" if location else message)
        self.section = section
        self.key = key


@dataclass
class DatasetSection:
    kind: str = "moons"
    size: int = 400
    dim: int = 2
    noise: float = 0.1
    classes: int = 2
    seed: int = 0
    images: Optional[str] = None
    labels: Optional[str] = None
    limit: Optional[int] = None
    test_fraction: float = 0.25


@dataclass
class ModelSection:
    hidden: Tuple[int, ...] = (32, 32)


@dataclass
class TrainSection:
    method: str = "at"
    epochs: int = 10
    warmup_epochs: int = 0
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    schedule: str = "drop"
    drop_fraction: float = 0.875
    rand_mode: str = "sat"
    at_norm: str = "linf"
    checkpoint_every: int = 1
    parallel_branches: bool = False


@dataclass
class RampSection:
    # None resolves to 0.5 for ramp_finetune and 2.0 otherwise
    lam: Optional[float] = None
    beta: float = 0.5
    key_pair: str = "auto"
    pairing: str = "kl"
    gp_variant: str = "cosine"
    bidirectional: bool = False


@dataclass
class AttackSection:
    kind: str = "apgd_lite"
    eps_l1: float = 0.12
    eps_l2: float = 0.08
    eps_linf: float = 0.05
    steps_l1: int = 15
    steps_l2: int = 5
    steps_linf: int = 5
    l1_sparsity: float = 0.05


@dataclass
class EvalSection:
    kind: str = "apgd_lite"
    steps_l1: int = 30
    steps_l2: int = 20
    steps_linf: int = 20
    probe_size: int = 200
    delta_minibatch: int = 32


@dataclass
class OutputSection:
    dir: str = "runs/default"


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    ramp: RampSection = field(default_factory=RampSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    @property
    def pairing_lambda(self) -> float:
        if self.ramp.lam is not None:
            return self.ramp.lam
        return FINETUNE_LAMBDA if self.train.method == TrainMethod.RAMP_FINETUNE.value else SCRATCH_LAMBDA


SECTION_TYPES = {f.name: f.default_factory for f in dataclasses.fields(ExperimentConfig)}
# Config keys that differ from the dataclass attribute name
KEY_ALIASES = {("ramp", "lambda"): "lam"}
ATTRIBUTE_KEYS = {(section, attr): key for (section, key), attr in KEY_ALIASES.items()}


def section_keys(section: str) -> Dict[str, Tuple[str, object]]:
    """Config key -> (attribute name, annotated type) for one section."""
    hints = typing.get_type_hints(SECTION_TYPES[section])
    return {
        ATTRIBUTE_KEYS.get((section, f.name), f.name): (f.name, hints[f.name])
        for f in dataclasses.fields(SECTION_TYPES[section])
    }


def _convert(text: str, kind, section: str, key: str):
    text = text.strip()
    origin = typing.get_origin(kind)
    if origin is typing.Union:
        inner = [t for t in typing.get_args(kind) if t is not type(None)][0]
        return None if text.lower() in ("", "none") else _convert(text, inner, section, key)
    try:
        if origin is tuple:
            return tuple(int(part) for part in text.split(",") if part.strip())
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            if "/" in text:
                numerator, denominator = text.split("/", 1)
                return float(numerator) / float(denominator)
            return float(text)
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {getattr(kind, '__name__', kind)}", section, key) from None
    return text


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> Dict[Tuple[str, str], str]:
    """
    Read ``section.key = value`` lines into raw string entries.

    Args:
        text (str): Config file contents; '#' starts a comment

    Returns:
        dict: (section, key) -> raw value text
    """
    entries: Dict[Tuple[str, str], str] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number} is not of the form section.key = value")
        name, value = (part.strip() for part in line.split("=", 1))
        if "." not in name:
            raise ConfigError(f"line {number}: key {name!r} has no section prefix")
        section, key = name.split(".", 1)
        if section not in SECTION_TYPES:
            raise ConfigError(f"unknown section on line {number}", section=section, key=key)
        if key not in section_keys(section):
            raise ConfigError(f"unknown key on line {number}", section=section, key=key)
        if (section, key) in entries:
            raise ConfigError(f"duplicate key on line {number}", section=section, key=key)
        entries[(section, key)] = value
    return entries


def find_config_problem(config: ExperimentConfig) -> Optional[Tuple[str, str, str]]:
    """First (section, key, message) that makes the config unusable, or None."""
    choices = {
        ("dataset", "kind"): ("moons", "blobs", "idx"),
        ("train", "method"): tuple(m.value for m in TrainMethod),
        ("train", "schedule"): tuple(s.value for s in LrSchedule),
        ("train", "rand_mode"): tuple(r.value for r in RandMode),
        ("train", "at_norm"): tuple(n.value for n in AttackNorm),
        ("ramp", "pairing"): ("kl", "mse", "cosine"),
        ("ramp", "gp_variant"): ("cosine", "projection"),
        ("attack", "kind"): tuple(k.value for k in AttackKind),
        ("eval", "kind"): tuple(k.value for k in AttackKind),
    }
    for (section, key), allowed in choices.items():
        value = getattr(getattr(config, section), key)
        if value not in allowed:
            return section, key, f"must be one of {', '.join(allowed)}, got {value!r}"

    for key in ("eps_l1", "eps_l2", "eps_linf"):
        if not getattr(config.attack, key) > 0:
            return "attack", key, "must be positive"

    if config.train.epochs < 0:
        return "train", "epochs", "must be >= 0"
    if config.train.warmup_epochs < 0:
        return "train", "warmup_epochs", "must be >= 0"
    if config.train.batch_size < 1:
        return "train", "batch_size", "must be >= 1"

    if config.dataset.kind == "idx":
        for key in ("images", "labels"):
            if not getattr(config.dataset, key):
                return "dataset", key, "is required when dataset.kind = idx"

    if not 0.0 <= config.dataset.test_fraction < 1.0:
        return "dataset", "test_fraction", "must lie in [0, 1)"

    if not 0.0 <= config.ramp.beta <= 1.0:
        return "ramp", "beta", f"must lie in [0, 1], got {config.ramp.beta}"

    if config.ramp.lam is not None and config.ramp.lam < 0:
        return "ramp", "lambda", f"must be >= 0, got {config.ramp.lam}"

    try:
        parse_key_pair(config.ramp.key_pair)
    except ValueError as exc:
        return "ramp", "key_pair", str(exc)

    if not config.model.hidden or any(width < 1 for width in config.model.hidden):
        return "model", "hidden", "needs at least one positive width"

    return None


def validate_config(config: ExperimentConfig):
    """
    Check value ranges and cross-field consistency.

    Args:
        config (ExperimentConfig): Parsed configuration

    Returns:
        tuple: (is_valid, message)
    """
    problem = find_config_problem(config)
    if problem is not None:
        section, key, message = problem
        return False, f"{section}.{key} {message}"
    return True, "Configuration validation successful."


def parse_key_pair(text: str) -> Optional[Tuple[AttackNorm, AttackNorm]]:
    if text is None or text.strip().lower() == "auto":
        return None
    parts = [p for p in text.replace(" ", "").split(",") if p]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated norms, got {text!r}")
    q, r = (AttackNorm.parse(p) for p in parts)
    if q is r:
        raise ValueError(f"key pair needs two distinct norms, got {text!r}")
    return q, r


def config_from_entries(entries: Dict[Tuple[str, str], str], apply_env: bool = True) -> ExperimentConfig:
    missing = [(s, k) for s, k in REQUIRED_KEYS if (s, k) not in entries]
    if missing:
        section, key = missing[0]
        raise ConfigError("required key is missing", section=section, key=key)

    config = ExperimentConfig()
    for (section, key), value in entries.items():
        attribute, kind = section_keys(section)[key]
        setattr(getattr(config, section), attribute, _convert(value, kind, section, key))

    if apply_env and os.environ.get(SEED_ENV_VAR):
        try:
            seed = int(os.environ[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {os.environ[SEED_ENV_VAR]!r}") from None
        logger.info("%s=%d overrides dataset.seed and train.seed", SEED_ENV_VAR, seed)
        config.dataset.seed = seed
        config.train.seed = seed

    problem = find_config_problem(config)
    if problem is not None:
        section, key, message = problem
        raise ConfigError(message, section=section, key=key)
    return config


def parse_config(text: str, apply_env: bool = True) -> ExperimentConfig:
    return config_from_entries(parse_config_text(text), apply_env)


def load_config(path, apply_env: bool = True) -> ExperimentConfig:
    """Parse a config file; RAMP_KIT_SEED overrides the seeds unless ``apply_env`` is False."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"), apply_env)


def canonical_config_text(config: ExperimentConfig) -> str:
    """Every key with defaults filled, sorted by section then key."""
    lines = []
    for section in sorted(SECTION_TYPES):
        values = getattr(config, section)
        for key, (attribute, _) in sorted(section_keys(section).items()):
            lines.append(f"{section}.{key} = {_render(getattr(values, attribute))}")
    return "\n".join(lines) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_config_text(config).encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_dataset(config: ExperimentConfig) -> Tuple[LabeledDataset, LabeledDataset]:
    """(train, test) split of the configured dataset."""
    ds = config.dataset
    if ds.kind == "idx":
        dataset = load_idx_dataset(ds.images, ds.labels, ds.limit)
    else:
        dataset = make_synthetic_dataset(ds.kind, ds.size, ds.dim, ds.noise, ds.seed, ds.classes)
    return train_test_split(dataset, ds.test_fraction, ds.seed)


def build_model(config: ExperimentConfig, input_dim: int, num_classes: int) -> MlpModel:
    return init_mlp([input_dim, *config.model.hidden, num_classes], seed=config.train.seed)


def _specs(kind: str, steps: Dict[AttackNorm, int], config: ExperimentConfig, seed: int) -> Tuple[AttackSpec, ...]:
    eps = {AttackNorm.L1: config.attack.eps_l1, AttackNorm.L2: config.attack.eps_l2,
           AttackNorm.LINF: config.attack.eps_linf}
    return tuple(
        AttackSpec(norm, eps[norm], steps[norm], AttackKind(kind), l1_sparsity=config.attack.l1_sparsity, seed=seed)
        for norm in (AttackNorm.L1, AttackNorm.L2, AttackNorm.LINF)
    )


def build_train_specs(config: ExperimentConfig) -> Tuple[AttackSpec, ...]:
    steps = {AttackNorm.L1: config.attack.steps_l1, AttackNorm.L2: config.attack.steps_l2,
             AttackNorm.LINF: config.attack.steps_linf}
    return _specs(config.attack.kind, steps, config, config.train.seed)


def build_eval_specs(config: ExperimentConfig) -> Tuple[AttackSpec, ...]:
    steps = {AttackNorm.L1: config.eval.steps_l1, AttackNorm.L2: config.eval.steps_l2,
             AttackNorm.LINF: config.eval.steps_linf}
    return _specs(config.eval.kind, steps, config, config.train.seed + 1)


def build_plan(config: ExperimentConfig) -> TrainPlan:
    """TrainPlan for the configured method with every default resolved."""
    train, ramp = config.train, config.ramp
    return TrainPlan(
        method=TrainMethod(train.method),
        epochs=train.epochs,
        specs=build_train_specs(config),
        sgd=SgdConfig(train.lr, train.momentum, train.weight_decay, train.seed),
        ramp=RampConfig(
            lam=config.pairing_lambda,
            beta=ramp.beta,
            key_pair=parse_key_pair(ramp.key_pair),
            pairing_kind=ramp.pairing,
            gp_variant=ramp.gp_variant,
            bidirectional=ramp.bidirectional,
        ),
        nt_warmup_epochs=train.warmup_epochs,
        batch_size=train.batch_size,
        schedule=LrSchedule(train.schedule),
        drop_fraction=train.drop_fraction,
        rand_mode=RandMode(train.rand_mode),
        at_norm=AttackNorm.parse(train.at_norm),
        checkpoint_every=train.checkpoint_every,
        parallel_branches=train.parallel_branches,
    )
