import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from utils.lp_utils import AttackNorm, BallSpec, project_ball_box
from utils.tensor_utils import MlpModel, Tensor, forward, log_softmax, pick, sum as tensor_sum

logger = logging.getLogger(__name__)

APGD_MOMENTUM = 0.75
APGD_CHECKPOINTS = (0.22, 0.41, 0.56, 0.67, 0.75, 0.82, 0.88, 0.94)


class AttackKind(str, Enum):
    PGD = "pgd"
    APGD_LITE = "apgd_lite"


@dataclass(frozen=True)
class AttackSpec:
    """
    One lp adversary.

    ``steps == 0`` is the identity attack: the clean batch comes back untouched.
    """

    norm: AttackNorm
    eps: float
    steps: int = 10
    kind: AttackKind = AttackKind.PGD
    step_size: Optional[float] = None
    l1_sparsity: float = 0.05
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "norm", AttackNorm.parse(self.norm))
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if not self.eps > 0:
            raise ValueError(f"attack radius must be positive, got {self.eps}")
        if self.steps < 0:
            raise ValueError(f"attack steps must be >= 0, got {self.steps}")
        if not 0.0 < self.l1_sparsity <= 1.0:
            raise ValueError(f"l1_sparsity must lie in (0, 1], got {self.l1_sparsity}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")

    @property
    def effective_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        if self.kind is AttackKind.APGD_LITE:
            return 2.0 * self.eps
        return 2.0 * self.eps / max(self.steps, 1)

    def with_seed(self, seed: int) -> "AttackSpec":
        return replace(self, seed=seed)


@dataclass
class AdvBatch:
    """Adversarial examples with their logits and per-sample cross-entropy."""

    x_adv: np.ndarray
    logits: np.ndarray
    per_sample_loss: np.ndarray
    # Best per-sample loss after the start point and after every iteration
    loss_history: List[np.ndarray] = field(default_factory=list, repr=False)
    # Index of the spec that produced each row (worst-case selection)
    source: Optional[np.ndarray] = None
    # Rows misclassified by any iterate the attack visited
    fooled: Optional[np.ndarray] = None

    def __len__(self):
        return self.x_adv.shape[0]


def attack_rng(seed: int, epoch: int = 0, batch_index: int = 0, slot: int = 0) -> np.random.Generator:
    """Generator for one attack call, keyed so that every batch and branch is independent."""
    return np.random.default_rng([int(seed), int(epoch), int(batch_index), int(slot)])


def input_loss_and_grad(model: MlpModel, x: np.ndarray, labels: np.ndarray):
    """
    Per-sample cross-entropy of ``model`` at ``x`` and its gradient w.r.t. ``x``.

    Returns:
        tuple: (per-sample losses, gradient N x d, logits N x k)
    """
    view = model.detached()
    xt = Tensor(x, requires_grad=True)
    logits = forward(view, xt)
    losses = -pick(log_softmax(logits), labels)
    # Summing keeps each row's gradient equal to its own loss gradient.
    tensor_sum(losses).backward()
    return losses.data.copy(), xt.grad, logits.data.copy()


def clean_loss(model: MlpModel, x: np.ndarray, labels: np.ndarray):
    logits = forward(model.detached(), x).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -log_probs[np.arange(len(labels)), labels], logits


def steepest_step(grad, norm: AttackNorm, step_size: float, sparsity: float = 0.05) -> np.ndarray:
    """
    Steepest ascent direction of the given norm, scaled to ``step_size``.

    Linf takes the sign; L2 the normalized gradient (zero stays zero); L1
    puts signed mass on the top ceil(sparsity * d) coordinates by magnitude
    and rescales to l1 length ``step_size``. Works row-wise on 2-D input.

    Args:
        grad (ndarray): Gradient vector or N x d batch
        norm (AttackNorm): Geometry of the step
        step_size (float): Length of the step in that norm
        sparsity (float): Fraction of coordinates an L1 step may touch

    Returns:
        ndarray: Step of the same shape as ``grad``
    """
    grad = np.asarray(grad, dtype=np.float64)
    norm = AttackNorm.parse(norm)
    rows = np.atleast_2d(grad)

    if norm is AttackNorm.LINF:
        step = step_size * np.sign(rows)
    elif norm is AttackNorm.L2:
        lengths = np.sqrt((rows * rows).sum(axis=1, keepdims=True))
        safe = np.where(lengths > 0, lengths, 1.0)
        step = np.where(lengths > 0, step_size * rows / safe, 0.0)
    else:
        d = rows.shape[1]
        k = min(d, max(1, math.ceil(sparsity * d)))
        # Stable sort keeps the lowest index first among equal magnitudes.
        order = np.argsort(-np.abs(rows), axis=1, kind="stable")[:, :k]
        signs = np.zeros_like(rows)
        row_index = np.arange(rows.shape[0])[:, None]
        signs[row_index, order] = np.sign(rows[row_index, order])
        active = np.abs(signs).sum(axis=1, keepdims=True)
        step = np.where(active > 0, step_size * signs / np.where(active > 0, active, 1.0), 0.0)

    return step.reshape(grad.shape)


def _mask_pinned(grad: np.ndarray, x: np.ndarray, ball: BallSpec) -> np.ndarray:
    # Coordinates sitting on the box face the gradient points through cannot move.
    pinned = ((x >= ball.hi) & (grad > 0)) | ((x <= ball.lo) & (grad < 0))
    return np.where(pinned, 0.0, grad)


def random_start(ball: BallSpec, rng: np.random.Generator) -> np.ndarray:
    """Seeded point drawn from the ball around every row, then made box-feasible."""
    center = np.atleast_2d(ball.center)
    n, d = center.shape
    if ball.norm is AttackNorm.LINF:
        delta = rng.uniform(-ball.eps, ball.eps, size=(n, d))
    elif ball.norm is AttackNorm.L2:
        direction = rng.standard_normal((n, d))
        lengths = np.linalg.norm(direction, axis=1, keepdims=True)
        direction = direction / np.where(lengths > 0, lengths, 1.0)
        radius = ball.eps * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
        delta = direction * radius
    else:
        weights = rng.dirichlet(np.ones(d), size=n)
        radius = ball.eps * rng.uniform(0.0, 1.0, size=(n, 1)) ** (1.0 / d)
        signs = rng.choice([-1.0, 1.0], size=(n, d))
        delta = weights * radius * signs
    start = project_ball_box(center + delta, _as_batch(ball))
    return start.reshape(ball.center.shape)


def _as_batch(ball: BallSpec) -> BallSpec:
    if ball.center.ndim == 2:
        return ball
    return BallSpec(ball.norm, ball.eps, np.atleast_2d(ball.center), ball.lo, ball.hi)


def _check_inputs(model: MlpModel, batch, labels, ball: BallSpec, spec: AttackSpec):
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if batch.ndim != 2:
        raise ValueError(f"attacks expect an N x d batch, got shape {batch.shape}")
    if batch.shape != ball.center.shape:
        raise ValueError("ball center must be the clean batch")
    if ball.norm is not spec.norm:
        raise ValueError(f"ball norm {ball.norm.value} does not match attack norm {spec.norm.value}")
    if labels.shape != (batch.shape[0],):
        raise ValueError(f"expected {batch.shape[0]} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= model.num_classes):
        raise ValueError(f"labels must lie in [0, {model.num_classes})")
    return batch, labels


def identity_attack(model: MlpModel, batch, labels) -> AdvBatch:
    batch = np.asarray(batch, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    losses, logits = clean_loss(model, batch, labels)
    return AdvBatch(batch.copy(), logits, losses, [losses.copy()], fooled=logits.argmax(axis=1) != labels)


class _BestTracker:
    """Keeps the highest-loss iterate seen so far for every row."""

    def __init__(self, x, losses, grad, logits, labels):
        self.labels = labels
        self.fooled = logits.argmax(axis=1) != labels
        self.x = x.copy()
        self.loss = losses.copy()
        self.grad = grad.copy()
        self.logits = logits.copy()
        self.history = [losses.copy()]

    def update(self, x, losses, grad, logits):
        self.fooled |= logits.argmax(axis=1) != self.labels
        improved = losses > self.loss
        if np.any(improved):
            self.x[improved] = x[improved]
            self.loss[improved] = losses[improved]
            self.grad[improved] = grad[improved]
            self.logits[improved] = logits[improved]
        self.history.append(self.loss.copy())

    def result(self) -> AdvBatch:
        return AdvBatch(self.x, self.logits, self.loss, self.history, fooled=self.fooled.copy())


def pgd_attack(model: MlpModel, batch, labels, ball: BallSpec, spec: AttackSpec,
               rng: Optional[np.random.Generator] = None) -> AdvBatch:
    """
    Projected steepest-ascent attack from a random start inside the ball.

    Args:
        model (MlpModel): Classifier under attack, read only
        batch (ndarray): Clean inputs, N x d
        labels (ndarray): True labels
        ball (BallSpec): Threat region around ``batch``
        spec (AttackSpec): Attack budget
        rng (Generator, optional): Random-start source; defaults to one seeded by spec.seed

    Returns:
        AdvBatch: Best-loss iterate per sample
    """
    if spec.kind is not AttackKind.PGD:
        raise ValueError(f"pgd_attack needs a PGD spec, got {spec.kind.value}")
    if spec.steps == 0:
        return identity_attack(model, batch, labels)
    batch, labels = _check_inputs(model, batch, labels, ball, spec)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)

    x = random_start(ball, rng)
    losses, grad, logits = input_loss_and_grad(model, x, labels)
    best = _BestTracker(x, losses, grad, logits, labels)
    step_size = spec.effective_step_size

    for _ in range(spec.steps):
        if ball.norm is AttackNorm.L1:
            grad = _mask_pinned(grad, x, ball)
        x = project_ball_box(x + steepest_step(grad, ball.norm, step_size, spec.l1_sparsity), ball)
        losses, grad, logits = input_loss_and_grad(model, x, labels)
        best.update(x, losses, grad, logits)

    return best.result()


def apgd_checkpoints(steps: int) -> List[int]:
    """Iterations after which APGD-lite halves its step, deduplicated and sorted."""
    return sorted({math.ceil(steps * c) for c in APGD_CHECKPOINTS if math.ceil(steps * c) >= 1})


def apgd_lite_attack(model: MlpModel, batch, labels, ball: BallSpec, spec: AttackSpec,
                     rng: Optional[np.random.Generator] = None) -> AdvBatch:
    """
    Momentum PGD with a fixed step-halving schedule.

    Starts at step 2 * eps. After each checkpoint iteration the step is
    halved and the search restarts from the best point found so far with
    its momentum cleared.
    """
    if spec.kind is not AttackKind.APGD_LITE:
        raise ValueError(f"apgd_lite_attack needs an APGD_LITE spec, got {spec.kind.value}")
    if spec.steps == 0:
        return identity_attack(model, batch, labels)
    batch, labels = _check_inputs(model, batch, labels, ball, spec)
    rng = rng if rng is not None else np.random.default_rng(spec.seed)

    x = random_start(ball, rng)
    losses, grad, logits = input_loss_and_grad(model, x, labels)
    best = _BestTracker(x, losses, grad, logits, labels)
    x_prev = x.copy()
    step_size = spec.effective_step_size
    checkpoints = set(apgd_checkpoints(spec.steps))

    for iteration in range(1, spec.steps + 1):
        if ball.norm is AttackNorm.L1:
            grad = _mask_pinned(grad, x, ball)
        z = project_ball_box(x + steepest_step(grad, ball.norm, step_size, spec.l1_sparsity), ball)
        x_next = project_ball_box(x + APGD_MOMENTUM * (z - x) + (1.0 - APGD_MOMENTUM) * (x - x_prev), ball)
        x_prev, x = x, x_next
        losses, grad, logits = input_loss_and_grad(model, x, labels)
        best.update(x, losses, grad, logits)

        if iteration in checkpoints and iteration < spec.steps:
            step_size *= 0.5
            x = best.x.copy()
            x_prev = x.copy()
            grad = best.grad.copy()
            logger.debug("APGD-lite halved step to %.3g at iteration %d", step_size, iteration)

    return best.result()


def run_attack(model: MlpModel, batch, labels, ball: BallSpec, spec: AttackSpec,
               rng: Optional[np.random.Generator] = None) -> AdvBatch:
    if spec.steps == 0:
        return identity_attack(model, batch, labels)
    if spec.kind is AttackKind.APGD_LITE:
        return apgd_lite_attack(model, batch, labels, ball, spec, rng)
    return pgd_attack(model, batch, labels, ball, spec, rng)


def ball_for(spec: AttackSpec, batch: np.ndarray, box: Tuple[float, float] = (0.0, 1.0)) -> BallSpec:
    """Threat region of ``spec`` around a clean batch."""
    return BallSpec(spec.norm, spec.eps, np.asarray(batch, dtype=np.float64), box[0], box[1])


def worst_case_batch(model: MlpModel, batch, labels, specs: Sequence[AttackSpec],
                     box: Tuple[float, float] = (0.0, 1.0), rng_key: Tuple[int, ...] = (0, 0)) -> AdvBatch:
    """
    Run every attack and keep, per sample, the example with the highest loss.

    Ties keep the earliest spec. ``rng_key`` is (epoch, batch index); attack
    ``i`` draws from attack_rng(spec.seed, *rng_key, i).

    Returns:
        AdvBatch: Selected examples; ``source`` holds the winning spec index
    """
    if not specs:
        raise ValueError("worst_case_batch needs at least one attack spec")
    chosen = None
    for slot, spec in enumerate(specs):
        adv = run_attack(model, batch, labels, ball_for(spec, batch, box), spec,
                         attack_rng(spec.seed, *rng_key, slot))
        if chosen is None:
            chosen = AdvBatch(adv.x_adv.copy(), adv.logits.copy(), adv.per_sample_loss.copy(),
                              source=np.zeros(len(adv), dtype=np.int64), fooled=adv.fooled.copy())
            continue
        better = adv.per_sample_loss > chosen.per_sample_loss
        chosen.x_adv[better] = adv.x_adv[better]
        chosen.logits[better] = adv.logits[better]
        chosen.per_sample_loss[better] = adv.per_sample_loss[better]
        chosen.source[better] = slot
        chosen.fooled |= adv.fooled
    return chosen
