import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.attack_utils import AttackSpec, attack_rng, ball_for, run_attack, worst_case_batch
from utils.data_utils import LabeledDataset, validate_dataset
from utils.evaluation_utils import evaluate_robustness
from utils.gp_utils import GpConfig, GpVariant, blended_update, cosine_similarity, project_delta
from utils.loss_utils import PairingKind, PairingLossConfig, batch_cross_entropy, ramp_objective
from utils.lp_utils import AttackNorm, select_key_pair
from utils.tensor_utils import (
    MlpModel,
    NumericalError,
    SgdConfig,
    Tensor,
    model_delta,
    mul,
    save_checkpoint,
    sgd_step,
)

logger = logging.getLogger(__name__)


class TrainMethod(str, Enum):
    NT = "nt"
    AT = "at"
    AT_GP = "at_gp"
    RAMP_FINETUNE = "ramp_finetune"
    RAMP_FULL = "ramp_full"
    MAX = "max"
    AVG = "avg"
    RAND = "rand"


class LrSchedule(str, Enum):
    DROP = "drop"
    THIRDS = "thirds"
    CONSTANT = "constant"


class RandMode(str, Enum):
    # all configured norms
    SAT = "sat"
    # l1 and linf only
    EAT = "eat"


GP_METHODS = (TrainMethod.AT_GP, TrainMethod.RAMP_FULL)
RAMP_METHODS = (TrainMethod.RAMP_FINETUNE, TrainMethod.RAMP_FULL)
BASELINE_METHODS = (TrainMethod.MAX, TrainMethod.AVG, TrainMethod.RAND)


@dataclass(frozen=True)
class RampConfig:
    lam: float = 2.0
    beta: float = 0.5
    key_pair: Optional[Tuple[AttackNorm, AttackNorm]] = None
    pairing_kind: PairingKind = PairingKind.KL
    gp_variant: GpVariant = GpVariant.COSINE
    bidirectional: bool = False

    def __post_init__(self):
        if self.key_pair is not None:
            object.__setattr__(self, "key_pair", tuple(AttackNorm.parse(n) for n in self.key_pair))
        # Delegate range checks to the configs actually used by the trainers.
        self.pairing_config()
        self.gp_config()

    def pairing_config(self) -> PairingLossConfig:
        return PairingLossConfig(self.lam, self.pairing_kind, self.bidirectional)

    def gp_config(self) -> GpConfig:
        return GpConfig(self.beta, self.gp_variant)


@dataclass(frozen=True)
class EpochContext:
    """Where one epoch sits inside a run: seeds, batching and the lr schedule."""

    epoch: int = 0
    batch_size: int = 32
    box: Tuple[float, float] = (0.0, 1.0)
    schedule: LrSchedule = LrSchedule.CONSTANT
    total_epochs: int = 1
    drop_fraction: float = 0.875
    # Epochs before this one that the schedule does not count (NT warm-up)
    schedule_offset: int = 0

    def learning_rate(self, base_lr: float, batch_index: int, num_batches: int) -> float:
        progress = (self.epoch - self.schedule_offset + batch_index / max(num_batches, 1)) / max(self.total_epochs, 1)
        return learning_rate_at(self.schedule, base_lr, progress, self.drop_fraction)


@dataclass(frozen=True)
class TrainPlan:
    """
    Everything run_plan needs to train a model.

    ``specs`` holds one AttackSpec per norm; AT uses the one for ``at_norm``,
    the RAMP methods the key pair, and the baselines all of them.
    """

    method: TrainMethod
    epochs: int
    specs: Tuple[AttackSpec, ...]
    sgd: SgdConfig = SgdConfig()
    ramp: RampConfig = RampConfig()
    nt_warmup_epochs: int = 0
    batch_size: int = 32
    schedule: LrSchedule = LrSchedule.DROP
    drop_fraction: float = 0.875
    rand_mode: RandMode = RandMode.SAT
    at_norm: AttackNorm = AttackNorm.LINF
    box: Tuple[float, float] = (0.0, 1.0)
    checkpoint_every: int = 0
    parallel_branches: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", TrainMethod(self.method))
        object.__setattr__(self, "schedule", LrSchedule(self.schedule))
        object.__setattr__(self, "rand_mode", RandMode(self.rand_mode))
        object.__setattr__(self, "at_norm", AttackNorm.parse(self.at_norm))
        object.__setattr__(self, "specs", tuple(self.specs))
        if self.epochs < 0 or self.nt_warmup_epochs < 0:
            raise ValueError("epochs and nt_warmup_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.drop_fraction <= 1.0:
            raise ValueError(f"drop_fraction must lie in (0, 1], got {self.drop_fraction}")
        norms = [s.norm for s in self.specs]
        if len(set(norms)) != len(norms):
            raise ValueError("attack specs must cover distinct norms")
        if self.method is TrainMethod.NT:
            return
        if not self.specs:
            raise ValueError(f"method {self.method.value} needs attack specs")
        if self.method in (TrainMethod.AT, TrainMethod.AT_GP) and self.at_norm not in norms:
            raise ValueError(f"method {self.method.value} needs an attack spec for {self.at_norm.value}")
        if self.method in RAMP_METHODS and len(self.specs) < 2:
            raise ValueError(f"method {self.method.value} needs attack specs for two norms")

    def spec_for(self, norm: AttackNorm) -> AttackSpec:
        norm = AttackNorm.parse(norm)
        for spec in self.specs:
            if spec.norm is norm:
                return spec
        raise KeyError(f"no attack spec for {norm.value}")

    def context(self, epoch: int, warmup: bool = False) -> EpochContext:
        """Context for global epoch ``epoch``; warm-up epochs use the constant base rate."""
        if warmup:
            return EpochContext(epoch, self.batch_size, self.box, LrSchedule.CONSTANT,
                                max(self.nt_warmup_epochs, 1), self.drop_fraction)
        return EpochContext(epoch, self.batch_size, self.box, self.schedule,
                            self.epochs, self.drop_fraction, schedule_offset=self.nt_warmup_epochs)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    method: str
    train_loss: float
    clean_acc: float
    per_norm_acc: Dict[str, float]
    union_acc: float
    learning_rate: float
    seconds: float = field(default=0.0, compare=False)

    def metrics(self) -> dict:
        """Deterministic part of the record (wall-clock time excluded)."""
        data = asdict(self)
        data.pop("seconds")
        return data


def learning_rate_at(schedule: LrSchedule, base_lr: float, progress: float, drop_fraction: float = 0.875) -> float:
    """
    Piecewise-constant learning rate at ``progress`` in [0, 1] of training.

    drop: x0.1 once progress reaches ``drop_fraction``; thirds: x0.1 per third.
    """
    schedule = LrSchedule(schedule)
    if schedule is LrSchedule.CONSTANT:
        return base_lr
    if schedule is LrSchedule.DROP:
        return base_lr * 0.1 if progress >= drop_fraction - 1e-12 else base_lr
    return base_lr * 0.1 ** min(math.floor(3.0 * progress + 1e-12), 2)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Shuffled minibatch index arrays; identical for every branch of the same epoch."""
    order = np.random.default_rng([int(seed), int(epoch)]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


BatchLoss = Callable[[MlpModel, np.ndarray, np.ndarray, int], Tensor]


def _train_epoch(model: MlpModel, dataset: LabeledDataset, sgd: SgdConfig, ctx: EpochContext,
                 batch_loss: BatchLoss, loss_log: Optional[list], label: str) -> MlpModel:
    """Shared minibatch loop: copy the model, step through the seeded batch order."""
    work = model.clone()
    batches = batch_order(len(dataset), ctx.batch_size, sgd.seed, ctx.epoch)
    for index, rows in enumerate(batches):
        x, y = dataset.x[rows], dataset.y[rows]
        loss = batch_loss(work, x, y, index)
        if not np.isfinite(loss.data):
            raise NumericalError(f"{label} loss became non-finite at epoch {ctx.epoch}, batch {index}")
        loss.backward()
        sgd_step(work, sgd, ctx.learning_rate(sgd.learning_rate, index, len(batches)))
        if loss_log is not None:
            loss_log.append(float(loss.data))
        logger.debug("%s epoch %d batch %d loss %.6f", label, ctx.epoch, index, float(loss.data))
    return work


def nt_epoch(model: MlpModel, dataset: LabeledDataset, sgd: SgdConfig,
             ctx: EpochContext = EpochContext(), loss_log: Optional[list] = None) -> MlpModel:
    """
    One pass of minibatch SGD on clean cross-entropy.

    Args:
        model (MlpModel): Starting model, left untouched
        dataset (LabeledDataset): Training data
        sgd (SgdConfig): Optimizer settings
        ctx (EpochContext): Epoch index, batching and schedule
        loss_log (list, optional): Receives the per-batch losses

    Returns:
        MlpModel: Trained copy
    """
    return _train_epoch(
        model, dataset, sgd, ctx,
        lambda work, x, y, index: batch_cross_entropy(work, x, y),
        loss_log, "NT",
    )


def at_epoch(model: MlpModel, dataset: LabeledDataset, spec: AttackSpec, sgd: SgdConfig,
             ctx: EpochContext = EpochContext(), loss_log: Optional[list] = None) -> MlpModel:
    """One pass minimizing cross-entropy on per-batch adversarial examples of one norm."""

    def batch_loss(work, x, y, index):
        adv = run_attack(work, x, y, ball_for(spec, x, ctx.box), spec, attack_rng(spec.seed, ctx.epoch, index, 0))
        return batch_cross_entropy(work, adv.x_adv, y)

    return _train_epoch(model, dataset, sgd, ctx, batch_loss, loss_log, f"AT-{spec.norm.label}")


def ramp_finetune_epoch(model: MlpModel, dataset: LabeledDataset, spec_q: AttackSpec, spec_r: AttackSpec,
                        pairing: PairingLossConfig, sgd: SgdConfig, ctx: EpochContext = EpochContext(),
                        loss_log: Optional[list] = None) -> MlpModel:
    """
    One pass of the logit-pairing objective on the key pair (q, r).

    Each batch is attacked with q and r; the loss is the MAX term plus
    lambda times the pairing term over samples still correct under q.
    """

    def batch_loss(work, x, y, index):
        return ramp_objective(
            work, x, y, ball_for(spec_q, x, ctx.box), ball_for(spec_r, x, ctx.box),
            spec_q, spec_r, pairing, rng_key=(ctx.epoch, index),
        ).total

    return _train_epoch(model, dataset, sgd, ctx, batch_loss, loss_log, "RAMP")


def _eligible_for_rand(specs: Sequence[AttackSpec], mode: RandMode) -> List[int]:
    if RandMode(mode) is RandMode.SAT:
        return list(range(len(specs)))
    eligible = [i for i, s in enumerate(specs) if s.norm in (AttackNorm.L1, AttackNorm.LINF)]
    if not eligible:
        raise ValueError("E-AT sampling needs an l1 or linf attack spec")
    return eligible


def baseline_epoch(model: MlpModel, dataset: LabeledDataset, specs: Sequence[AttackSpec], kind: TrainMethod,
                   sgd: SgdConfig, ctx: EpochContext = EpochContext(), loss_log: Optional[list] = None,
                   rand_mode: RandMode = RandMode.SAT) -> MlpModel:
    """
    Multi-norm baselines.

    MAX trains on the per-sample worst case over all attacks, AVG on the
    mean of the per-norm losses, RAND on one attack sampled per batch.
    """
    kind = TrainMethod(kind)
    if kind not in BASELINE_METHODS:
        raise ValueError(f"baseline_epoch handles max, avg and rand, got {kind.value}")
    if not specs:
        raise ValueError("baseline_epoch needs at least one attack spec")
    specs = list(specs)

    if kind is TrainMethod.MAX:
        def batch_loss(work, x, y, index):
            adv = worst_case_batch(work, x, y, specs, ctx.box, rng_key=(ctx.epoch, index))
            return batch_cross_entropy(work, adv.x_adv, y)

    elif kind is TrainMethod.AVG:
        def batch_loss(work, x, y, index):
            total = None
            for slot, spec in enumerate(specs):
                adv = run_attack(work, x, y, ball_for(spec, x, ctx.box), spec,
                                 attack_rng(spec.seed, ctx.epoch, index, slot))
                term = batch_cross_entropy(work, adv.x_adv, y)
                total = term if total is None else total + term
            return mul(total, 1.0 / len(specs))

    else:
        eligible = _eligible_for_rand(specs, rand_mode)
        sampler = np.random.default_rng([int(sgd.seed), int(ctx.epoch), len(dataset)])

        def batch_loss(work, x, y, index):
            slot = eligible[int(sampler.integers(len(eligible)))]
            spec = specs[slot]
            adv = run_attack(work, x, y, ball_for(spec, x, ctx.box), spec,
                             attack_rng(spec.seed, ctx.epoch, index, slot))
            return batch_cross_entropy(work, adv.x_adv, y)

    return _train_epoch(model, dataset, sgd, ctx, batch_loss, loss_log, kind.value.upper())


def gp_epoch(model: MlpModel, dataset: LabeledDataset, sgd: SgdConfig, gp_cfg: GpConfig,
             adversarial_branch: Callable[[MlpModel], MlpModel], ctx: EpochContext = EpochContext(),
             parallel: bool = False) -> MlpModel:
    """
    Connect a natural and an adversarial epoch through gradient projection.

    Both branches start from ``model`` and see the same batch order. The
    natural update is filtered layer-wise against the adversarial one and
    blended with weight beta; the result keeps the adversarial branch's
    momentum buffers.

    Args:
        model (MlpModel): Snapshot f^(r)
        dataset (LabeledDataset): Training data
        sgd (SgdConfig): Optimizer settings shared by both branches
        gp_cfg (GpConfig): beta and projection variant
        adversarial_branch (callable): model -> model after one adversarial epoch
        ctx (EpochContext): Epoch index, batching and schedule
        parallel (bool): Run the two branches on a thread pool

    Returns:
        MlpModel: Blended model f^(r+1)
    """
    natural_branch = lambda start: nt_epoch(start, dataset, sgd, ctx)  # noqa: E731

    if parallel:
        with ThreadPoolExecutor(max_workers=2, thread_name_prefix="gp-branch") as pool:
            natural_future = pool.submit(natural_branch, model)
            adversarial_future = pool.submit(adversarial_branch, model)
            f_n, f_a = natural_future.result(), adversarial_future.result()
    else:
        f_n = natural_branch(model)
        f_a = adversarial_branch(model)

    g_n = model_delta(f_n, model)
    g_a = model_delta(f_a, model)
    g_p = project_delta(g_n, g_a, gp_cfg.variant)
    if logger.isEnabledFor(logging.DEBUG):
        for name in g_a.names():
            logger.debug("GP layer %s cos=%.4f", name, cosine_similarity(g_n.layers[name], g_a.layers[name]))

    blended = blended_update(model, g_p, g_a, gp_cfg.beta)
    blended.velocity = {name: buf.copy() for name, buf in f_a.velocity.items()}
    return blended


def at_gp_epoch(model: MlpModel, dataset: LabeledDataset, spec: AttackSpec, sgd: SgdConfig, gp_cfg: GpConfig,
                ctx: EpochContext = EpochContext(), loss_log: Optional[list] = None,
                parallel: bool = False) -> MlpModel:
    return gp_epoch(
        model, dataset, sgd, gp_cfg,
        lambda start: at_epoch(start, dataset, spec, sgd, ctx, loss_log),
        ctx, parallel,
    )


def ramp_full_epoch(model: MlpModel, dataset: LabeledDataset, spec_q: AttackSpec, spec_r: AttackSpec,
                    ramp_cfg: RampConfig, sgd: SgdConfig, ctx: EpochContext = EpochContext(),
                    loss_log: Optional[list] = None, parallel: bool = False) -> MlpModel:
    """GP epoch whose adversarial branch is a logit-pairing epoch on the key pair."""
    return gp_epoch(
        model, dataset, sgd, ramp_cfg.gp_config(),
        lambda start: ramp_finetune_epoch(start, dataset, spec_q, spec_r, ramp_cfg.pairing_config(),
                                          sgd, ctx, loss_log),
        ctx, parallel,
    )


def resolve_key_pair(plan: TrainPlan, dim: int) -> Tuple[AttackNorm, AttackNorm]:
    """Key pair from the plan's override, or from the ball-volume heuristic."""
    eps = {spec.norm: spec.eps for spec in plan.specs}
    if plan.ramp.key_pair is not None:
        q, r = plan.ramp.key_pair
    else:
        missing = [n.value for n in AttackNorm if n not in eps]
        if missing:
            raise ValueError(f"the volume heuristic needs radii for all norms; missing {', '.join(missing)}")
        q, r = select_key_pair(eps[AttackNorm.L1], eps[AttackNorm.L2], eps[AttackNorm.LINF], dim)
    for norm in (q, r):
        if norm not in eps:
            raise ValueError(f"key pair uses {norm.value} but no attack spec is configured for it")
    return q, r


def run_method_epoch(plan: TrainPlan, model: MlpModel, dataset: LabeledDataset, ctx: EpochContext,
                     loss_log: list, key_pair: Optional[Tuple[AttackNorm, AttackNorm]] = None) -> MlpModel:
    """Dispatch one epoch of the plan's method."""
    method = plan.method
    if method is TrainMethod.NT:
        return nt_epoch(model, dataset, plan.sgd, ctx, loss_log)
    if method is TrainMethod.AT:
        return at_epoch(model, dataset, plan.spec_for(plan.at_norm), plan.sgd, ctx, loss_log)
    if method is TrainMethod.AT_GP:
        return at_gp_epoch(model, dataset, plan.spec_for(plan.at_norm), plan.sgd, plan.ramp.gp_config(),
                           ctx, loss_log, plan.parallel_branches)
    if method in RAMP_METHODS:
        q, r = key_pair or resolve_key_pair(plan, dataset.dim)
        spec_q, spec_r = plan.spec_for(q), plan.spec_for(r)
        if method is TrainMethod.RAMP_FINETUNE:
            return ramp_finetune_epoch(model, dataset, spec_q, spec_r, plan.ramp.pairing_config(),
                                       plan.sgd, ctx, loss_log)
        return ramp_full_epoch(model, dataset, spec_q, spec_r, plan.ramp, plan.sgd, ctx, loss_log,
                               plan.parallel_branches)
    return baseline_epoch(model, dataset, plan.specs, method, plan.sgd, ctx, loss_log, plan.rand_mode)


def run_plan(plan: TrainPlan, dataset: LabeledDataset, model: MlpModel,
             probe: Optional[LabeledDataset] = None, eval_specs: Sequence[AttackSpec] = (),
             checkpoint_dir: Optional[Path] = None,
             on_epoch: Optional[Callable[[EpochRecord, MlpModel], None]] = None) -> Tuple[MlpModel, List[EpochRecord]]:
    """
    Optional NT warm-up followed by the plan's method epochs.

    Warm-up epochs run at the constant base learning rate; method epochs
    follow the plan's schedule. Each epoch is probed with ``eval_specs`` and
    recorded. Checkpoints go to ``checkpoint_dir`` every
    ``plan.checkpoint_every`` method epochs and after the last one.

    Args:
        plan (TrainPlan): What to train
        dataset (LabeledDataset): Training data
        model (MlpModel): Initial model, left untouched
        probe (LabeledDataset, optional): Held-out probe set for per-epoch metrics
        eval_specs (list[AttackSpec]): Attacks used on the probe set
        checkpoint_dir (Path, optional): Where to write epoch checkpoints
        on_epoch (callable, optional): Called with each record and model

    Returns:
        tuple: (final model, list of EpochRecord)
    """
    is_valid, message = validate_dataset(dataset)
    if not is_valid:
        raise ValueError(message)
    if dataset.dim != model.input_dim:
        raise ValueError(f"dataset has dimension {dataset.dim} but the model expects {model.input_dim}")

    key_pair = resolve_key_pair(plan, dataset.dim) if plan.method in RAMP_METHODS else None
    if key_pair is not None:
        logger.info("Key tradeoff pair: (%s, %s)", key_pair[0].label, key_pair[1].label)

    records: List[EpochRecord] = []
    current = model
    probe = probe if probe is not None else dataset
    phases = [("warmup", i) for i in range(plan.nt_warmup_epochs)] + [("train", i) for i in range(plan.epochs)]

    for global_epoch, (phase, index) in enumerate(phases):
        started = time.perf_counter()
        loss_log: List[float] = []
        ctx = plan.context(global_epoch, warmup=phase == "warmup")
        if phase == "warmup":
            current = nt_epoch(current, dataset, plan.sgd, ctx, loss_log)
            method_name = TrainMethod.NT.value
        else:
            current = run_method_epoch(plan, current, dataset, ctx, loss_log, key_pair)
            method_name = plan.method.value

        report = evaluate_robustness(current, probe, eval_specs, box=plan.box, epoch=global_epoch)
        record = EpochRecord(
            epoch=global_epoch,
            phase=phase,
            method=method_name,
            train_loss=float(np.mean(loss_log)) if loss_log else 0.0,
            clean_acc=report.clean_acc,
            per_norm_acc={norm.value: acc for norm, acc in report.per_norm_acc.items()},
            union_acc=report.union_acc,
            learning_rate=ctx.learning_rate(plan.sgd.learning_rate, 0, 1),
            seconds=time.perf_counter() - started,
        )
        records.append(record)
        logger.info(
            "Epoch %d (%s/%s): loss %.4f clean %.3f union %.3f",
            global_epoch, phase, method_name, record.train_loss, record.clean_acc, record.union_acc,
        )

        if checkpoint_dir is not None and phase == "train":
            last = index == plan.epochs - 1
            due = plan.checkpoint_every > 0 and (index + 1) % plan.checkpoint_every == 0
            if due or last:
                save_checkpoint(current, Path(checkpoint_dir) / f"epoch_{global_epoch:03d}.ckpt")
        if on_epoch is not None:
            on_epoch(record, current)

    return current, records
