import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np

from utils.attack_utils import AdvBatch, AttackSpec, attack_rng, run_attack
from utils.lp_utils import BallSpec
from utils.tensor_utils import (
    MlpModel,
    NumericalError,
    Tensor,
    as_tensor,
    clamp_min,
    div,
    forward,
    log,
    log_softmax,
    mean,
    mul,
    pick,
    softmax,
    softmax_array,
    sqrt,
    sub,
    sum as tensor_sum,
    take_rows,
)

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
NORM_GUARD = 1e-15


class PairingKind(str, Enum):
    KL = "kl"
    MSE = "mse"
    COSINE = "cosine"


@dataclass(frozen=True)
class PairingLossConfig:
    lam: float = 2.0
    pairing_kind: PairingKind = PairingKind.KL
    bidirectional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "pairing_kind", PairingKind(self.pairing_kind))
        if not self.lam >= 0:
            raise ValueError(f"pairing weight lambda must be >= 0, got {self.lam}")


@dataclass(frozen=True)
class CorrectIndexSet:
    """Rows whose q-attacked prediction is still correct."""

    gamma: Tuple[int, ...]
    batch_size: int

    def __post_init__(self):
        gamma = tuple(int(i) for i in self.gamma)
        if list(gamma) != sorted(set(gamma)):
            raise ValueError("correct-subset indices must be unique and sorted")
        if gamma and (gamma[0] < 0 or gamma[-1] >= self.batch_size):
            raise ValueError(f"correct-subset indices must lie in [0, {self.batch_size})")
        object.__setattr__(self, "gamma", gamma)

    @property
    def n_c(self) -> int:
        return len(self.gamma)

    def __len__(self):
        return self.n_c


@dataclass
class RampTerms:
    """Pieces of the combined objective for one batch."""

    total: Tensor
    max_term: Tensor
    pairing_term: Optional[Tensor]
    gamma: CorrectIndexSet
    adv_q: AdvBatch = field(repr=False)
    adv_r: AdvBatch = field(repr=False)


def cross_entropy(logits, labels) -> Tuple[Tensor, np.ndarray]:
    """
    Mean cross-entropy via fused log-softmax.

    Args:
        logits (Tensor): N x k scores
        labels (array-like): Class indices in [0, k)

    Returns:
        tuple: (scalar mean loss Tensor, per-sample losses as ndarray)
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"expected {logits.shape[0]} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    per_sample = -pick(log_softmax(logits), labels)
    return mean(per_sample), per_sample.data.copy()


def batch_cross_entropy(model: MlpModel, x, labels) -> Tensor:
    """Mean cross-entropy of ``model`` on fixed inputs, graph-recorded on the parameters."""
    loss, _ = cross_entropy(forward(model, np.asarray(x, dtype=np.float64)), labels)
    if not np.isfinite(loss.data):
        raise NumericalError("cross-entropy became non-finite")
    return loss


def correct_subset(p_q, labels) -> CorrectIndexSet:
    """Indices where argmax(p_q) equals the label; argmax prefers the lowest class."""
    probs = as_tensor(p_q).data
    labels = np.asarray(labels, dtype=np.int64)
    hits = np.flatnonzero(probs.argmax(axis=1) == labels)
    return CorrectIndexSet(tuple(hits.tolist()), probs.shape[0])


def _subset(p_q, p_r, gamma: CorrectIndexSet):
    # The q side is a constant target; only p_r carries gradient.
    rows = list(gamma.gamma)
    return as_tensor(p_q).data[rows], take_rows(as_tensor(p_r), rows)


def kl_pairing_loss(p_q, p_r, gamma: CorrectIndexSet, bidirectional: bool = False) -> Tensor:
    """
    (1/n_c) * sum over gamma of KL(p_q[i] || p_r[i]) with p_q detached.

    An empty subset contributes 0. With ``bidirectional`` the reverse
    divergence KL(p_r || p_q) is added, still holding p_q fixed.
    """
    if gamma.n_c == 0:
        return Tensor(0.0)
    target, current = _subset(p_q, p_r, gamma)
    log_target = np.log(np.maximum(target, PROB_FLOOR))
    log_current = log(clamp_min(current, PROB_FLOOR))
    loss = mul(tensor_sum(mul(target, sub(log_target, log_current))), 1.0 / gamma.n_c)
    if bidirectional:
        reverse = tensor_sum(mul(clamp_min(current, PROB_FLOOR), sub(log_current, log_target)))
        loss = loss + mul(reverse, 1.0 / gamma.n_c)
    return loss


def mse_pairing_loss(p_q, p_r, gamma: CorrectIndexSet) -> Tensor:
    """(1/n_c) * sum over gamma of 0.5 * ||p_q[i] - p_r[i]||^2."""
    if gamma.n_c == 0:
        return Tensor(0.0)
    target, current = _subset(p_q, p_r, gamma)
    diff = sub(current, target)
    return mul(tensor_sum(mul(diff, diff)), 0.5 / gamma.n_c)


def cosine_pairing_loss(p_q, p_r, gamma: CorrectIndexSet) -> Tensor:
    """(1/n_c) * sum over gamma of (1 - cos(p_q[i], p_r[i])); zero rows count as cos = 0."""
    if gamma.n_c == 0:
        return Tensor(0.0)
    target, current = _subset(p_q, p_r, gamma)
    target_norm = np.sqrt((target * target).sum(axis=1))
    current_norm = np.sqrt((current.data * current.data).sum(axis=1))
    rows = np.flatnonzero(target_norm * current_norm >= NORM_GUARD)
    if rows.size < gamma.n_c:
        logger.debug("Cosine pairing treated %d zero rows as orthogonal", gamma.n_c - rows.size)

    cos_total = Tensor(0.0)
    if rows.size:
        kept = take_rows(current, rows)
        dots = tensor_sum(mul(kept, target[rows]), axis=1)
        norms = mul(sqrt(tensor_sum(mul(kept, kept), axis=1)), target_norm[rows])
        cos_total = tensor_sum(div(dots, norms))
    return mul(sub(float(gamma.n_c), cos_total), 1.0 / gamma.n_c)


def pairing_loss(p_q, p_r, gamma: CorrectIndexSet, cfg: PairingLossConfig) -> Tensor:
    if cfg.pairing_kind is PairingKind.KL:
        return kl_pairing_loss(p_q, p_r, gamma, bidirectional=cfg.bidirectional)
    if cfg.pairing_kind is PairingKind.MSE:
        return mse_pairing_loss(p_q, p_r, gamma)
    return cosine_pairing_loss(p_q, p_r, gamma)


def max_loss(per_sample_loss_q, per_sample_loss_r, adv_q: AdvBatch, adv_r: AdvBatch,
             model: MlpModel, labels) -> Tensor:
    """
    Mean cross-entropy over the per-sample higher-loss adversarial example.

    r's example is used only where its loss is strictly larger, so ties keep
    q's. The selected inputs are re-evaluated so gradients reach the model.
    """
    loss_q = np.asarray(per_sample_loss_q, dtype=np.float64)
    loss_r = np.asarray(per_sample_loss_r, dtype=np.float64)
    if loss_q.shape != loss_r.shape:
        raise ValueError(f"per-sample loss shapes differ: {loss_q.shape} vs {loss_r.shape}")
    use_r = loss_r > loss_q
    selected = np.where(use_r[:, None], adv_r.x_adv, adv_q.x_adv)
    return batch_cross_entropy(model, selected, labels)


def ramp_objective(model: MlpModel, batch, labels, ball_q: BallSpec, ball_r: BallSpec,
                   spec_q: AttackSpec, spec_r: AttackSpec, cfg: PairingLossConfig,
                   rng_key: Tuple[int, int] = (0, 0)) -> RampTerms:
    """
    Attack with q and r, then combine the MAX loss with correct-subset pairing.

    Args:
        model (MlpModel): Model being trained
        batch (ndarray): Clean inputs
        labels (ndarray): True labels
        ball_q (BallSpec): Threat region for the q attack
        ball_r (BallSpec): Threat region for the r attack
        spec_q (AttackSpec): q attack budget
        spec_r (AttackSpec): r attack budget
        cfg (PairingLossConfig): Pairing weight and kind
        rng_key (tuple): (epoch, batch index) for the attack generators

    Returns:
        RampTerms: total = max_term + lambda * pairing_term
    """
    labels = np.asarray(labels, dtype=np.int64)
    adv_q = run_attack(model, batch, labels, ball_q, spec_q, attack_rng(spec_q.seed, *rng_key, 0))
    adv_r = run_attack(model, batch, labels, ball_r, spec_r, attack_rng(spec_r.seed, *rng_key, 1))
    max_term = max_loss(adv_q.per_sample_loss, adv_r.per_sample_loss, adv_q, adv_r, model, labels)

    p_q = softmax_array(adv_q.logits)
    gamma = correct_subset(p_q, labels)
    if cfg.lam == 0:
        return RampTerms(max_term, max_term, None, gamma, adv_q, adv_r)

    if gamma.n_c == 0:
        logger.warning("No sample survived the q attack; pairing term is 0 for this batch")
    else:
        logger.debug("Correct subset n_c=%d of %d", gamma.n_c, gamma.batch_size)
    p_r = softmax(forward(model, adv_r.x_adv))
    pairing_term = pairing_loss(p_q, p_r, gamma, cfg)
    total = max_term + mul(pairing_term, cfg.lam)
    if not np.isfinite(total.data):
        raise NumericalError("combined objective became non-finite")
    return RampTerms(total, max_term, pairing_term, gamma, adv_q, adv_r)


def ramp_loss(model: MlpModel, batch, labels, ball_q: BallSpec, ball_r: BallSpec,
              spec_q: AttackSpec, spec_r: AttackSpec, cfg: PairingLossConfig,
              rng_key: Tuple[int, int] = (0, 0)) -> Tensor:
    return ramp_objective(model, batch, labels, ball_q, ball_r, spec_q, spec_r, cfg, rng_key).total
