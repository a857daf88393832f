import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.attack_utils import AttackSpec, attack_rng, ball_for, run_attack, worst_case_batch
from utils.data_utils import LabeledDataset
from utils.gp_utils import GpVariant, cosine_similarity
from utils.loss_utils import batch_cross_entropy
from utils.lp_utils import AttackNorm
from utils.tensor_utils import MlpModel, flat_gradients, predict

logger = logging.getLogger(__name__)

NORM_GUARD = 1e-15
EVAL_SLOT_OFFSET = 16

# (g_a_hat, g_n_hat) rows for ``count`` trials
DeltaSampler = Callable[[np.random.Generator, int], Tuple[np.ndarray, np.ndarray]]


@dataclass
class RobustReport:
    """
    Clean, per-norm and union accuracy with the per-sample flags behind them.

    ``flags`` columns are clean-correct followed by one column per norm in
    ``norms`` order; a norm flag already requires the clean prediction to
    be correct.
    """

    clean_acc: float
    per_norm_acc: Dict[AttackNorm, float]
    union_acc: float
    flags: np.ndarray = field(repr=False)
    norms: Tuple[AttackNorm, ...] = ()

    @classmethod
    def from_flags(cls, clean_correct, per_norm_flags: Dict[AttackNorm, np.ndarray]) -> "RobustReport":
        clean_correct = np.asarray(clean_correct, dtype=bool)
        norms = tuple(AttackNorm.parse(n) for n in per_norm_flags)
        columns = [clean_correct]
        for norm in norms:
            flags = np.asarray(per_norm_flags[norm], dtype=bool)
            if flags.shape != clean_correct.shape:
                raise ValueError(f"{norm.value} flags have shape {flags.shape}, expected {clean_correct.shape}")
            columns.append(clean_correct & flags)
        matrix = np.column_stack(columns) if clean_correct.size else np.zeros((0, len(columns)), dtype=bool)
        union = matrix.all(axis=1)
        return cls(
            clean_acc=_mean(clean_correct),
            per_norm_acc={norm: _mean(matrix[:, i + 1]) for i, norm in enumerate(norms)},
            union_acc=_mean(union),
            flags=matrix,
            norms=norms,
        )

    def to_dict(self) -> dict:
        return {
            "clean_acc": self.clean_acc,
            "per_norm_acc": {norm.value: acc for norm, acc in self.per_norm_acc.items()},
            "union_acc": self.union_acc,
            "samples": int(self.flags.shape[0]),
        }


def _mean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.mean()) if values.size else 0.0


def evaluate_robustness(model: MlpModel, eval_set: LabeledDataset, specs: Sequence[AttackSpec],
                        box: Tuple[float, float] = (0.0, 1.0), epoch: int = 0,
                        batch_size: int = 256) -> RobustReport:
    """
    Attack every sample with each spec and collect clean/per-norm/union accuracy.

    A sample is robust against a norm when it is classified correctly and
    the attack fails to flip that prediction at every iterate it visits, not
    only at the highest-loss one.

    Args:
        model (MlpModel): Classifier to evaluate, read only
        eval_set (LabeledDataset): Labeled evaluation data
        specs (list[AttackSpec]): One attack per norm
        box (tuple): Input domain bounds
        epoch (int): Folded into the attack seeds
        batch_size (int): Samples attacked at once

    Returns:
        RobustReport: Accuracies and per-sample flags
    """
    clean_correct = predict(model, eval_set.x) == eval_set.y
    per_norm: Dict[AttackNorm, np.ndarray] = {}
    for slot, spec in enumerate(specs):
        robust = np.zeros(len(eval_set), dtype=bool)
        for start in range(0, len(eval_set), batch_size):
            rows = slice(start, start + batch_size)
            x, y = eval_set.x[rows], eval_set.y[rows]
            adv = run_attack(model, x, y, ball_for(spec, x, box), spec,
                             attack_rng(spec.seed, epoch, start // batch_size, EVAL_SLOT_OFFSET + slot))
            robust[rows] = ~adv.fooled
        per_norm[spec.norm] = robust
    return RobustReport.from_flags(clean_correct, per_norm)


# ---------------------------------------------------------------------------
# Delta-error analysis
# ---------------------------------------------------------------------------

@dataclass
class DeltaErrorReport:
    """Trajectory-averaged estimator terms of the GP error analysis."""

    variance: float
    bias: float
    tau_bar_sq: float
    predicted_diff: float
    m: int
    beta: float = 0.5
    per_snapshot: List[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.variance < 0 or self.bias < 0:
            raise ValueError("variance and bias must be non-negative")
        if not 0.0 <= self.tau_bar_sq <= 1.0 + 1e-12:
            raise ValueError(f"tau_bar_sq must lie in [0, 1], got {self.tau_bar_sq}")

    @property
    def tau_bar(self) -> float:
        return float(np.sqrt(self.tau_bar_sq))

    def to_dict(self) -> dict:
        return {
            "variance": self.variance,
            "bias": self.bias,
            "tau_bar_sq": self.tau_bar_sq,
            "tau_bar": self.tau_bar,
            "predicted_diff": self.predicted_diff,
            "m": self.m,
            "beta": self.beta,
            "per_snapshot": self.per_snapshot,
        }


def sin_squared(a: np.ndarray, b: np.ndarray) -> float:
    """sin^2 of the angle between a and b; 0 if either is a zero vector."""
    if np.linalg.norm(a) < NORM_GUARD or np.linalg.norm(b) < NORM_GUARD:
        return 0.0
    cos = cosine_similarity(a, b)
    return float(min(max(1.0 - cos * cos, 0.0), 1.0))


def parameter_gradient(model: MlpModel, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Flat gradient of the mean cross-entropy on fixed inputs."""
    work = model.clone()
    work.zero_grad()
    batch_cross_entropy(work, x, y).backward()
    return flat_gradients(work)


def predicted_error_difference(report: DeltaErrorReport, beta: float, finite_m: bool = False) -> float:
    """
    Delta^2_AT - Delta^2_GP in the large-model limit.

    beta * (2 - beta) * variance - beta^2 * tau_bar^2 * bias; ``finite_m``
    scales the variance term by (1 + 1/m).
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    variance_term = beta * (2.0 - beta) * report.variance
    if finite_m:
        variance_term *= 1.0 + 1.0 / report.m
    return variance_term - beta * beta * report.tau_bar_sq * report.bias


def predicted_delta_gp(variance: float, bias: float, tau_bar_sq: float, beta: float, m: int) -> float:
    """((1-beta)^2 + (2*beta - beta^2)/m) * variance + beta^2 * tau_bar^2 * bias."""
    if m < 1:
        raise ValueError(f"model dimension m must be >= 1, got {m}")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return ((1.0 - beta) ** 2 + (2.0 * beta - beta * beta) / m) * variance + beta * beta * tau_bar_sq * bias


def estimate_delta_terms(snapshots: Sequence[MlpModel], heldout: LabeledDataset,
                         minibatch_source: Optional[LabeledDataset], specs: Sequence[AttackSpec],
                         minibatch_size: int = 32, beta: float = 0.5, seed: int = 0,
                         box: Tuple[float, float] = (0.0, 1.0),
                         labels: Optional[Sequence] = None) -> DeltaErrorReport:
    """
    Estimate variance, bias and tau-bar over a training trajectory.

    At each snapshot g_a is the worst-case adversarial gradient on the whole
    held-out set, g_a_hat the same on one seeded minibatch of
    ``minibatch_source`` and g_n_hat the clean gradient on that minibatch.
    Snapshot values are averaged to realize the expectation over parameters.

    Args:
        snapshots (list[MlpModel]): At least two models along a trajectory
        heldout (LabeledDataset): Stand-in for the population
        minibatch_source (LabeledDataset, optional): Where minibatches come from; defaults to ``heldout``
        specs (list[AttackSpec]): Attacks defining the adversarial loss
        minibatch_size (int): Minibatch size; covering the whole source makes variance 0
        beta (float): Blend weight used for the predicted difference
        seed (int): Minibatch sampling seed
        box (tuple): Input domain bounds
        labels (list, optional): Row labels for per_snapshot (e.g. epochs)

    Returns:
        DeltaErrorReport: Averaged terms plus one row per snapshot
    """
    if len(snapshots) < 2:
        raise ValueError(f"delta estimation needs at least 2 snapshots, got {len(snapshots)}")
    if not specs:
        raise ValueError("delta estimation needs at least one attack spec")
    source = minibatch_source if minibatch_source is not None else heldout
    labels = list(labels) if labels is not None else list(range(len(snapshots)))

    rows = []
    for index, snapshot in enumerate(snapshots):
        full_adv = worst_case_batch(snapshot, heldout.x, heldout.y, specs, box, rng_key=(index, 0))
        g_a = parameter_gradient(snapshot, full_adv.x_adv, heldout.y)

        if minibatch_size >= len(source):
            picked = np.arange(len(source))
        else:
            picked = np.sort(np.random.default_rng([seed, index]).choice(len(source), minibatch_size, replace=False))
        x, y = source.x[picked], source.y[picked]
        mini_adv = worst_case_batch(snapshot, x, y, specs, box, rng_key=(index, 0))
        g_a_hat = parameter_gradient(snapshot, mini_adv.x_adv, y)
        g_n_hat = parameter_gradient(snapshot, x, y)

        residual = g_a - g_n_hat
        if np.linalg.norm(g_n_hat) < NORM_GUARD or np.linalg.norm(residual) < NORM_GUARD:
            logger.warning("Snapshot %s has a zero gradient direction; tau counted as 0", labels[index])
        row = {
            "epoch": labels[index],
            "variance": float(np.sum((g_a - g_a_hat) ** 2)),
            "bias": float(np.sum(residual ** 2)),
            "tau_sq": sin_squared(g_n_hat, residual),
        }
        row["tau_bar"] = float(np.sqrt(row["tau_sq"]))
        row["predicted_diff"] = beta * (2.0 - beta) * row["variance"] - beta * beta * row["tau_sq"] * row["bias"]
        rows.append(row)
        logger.debug("Delta terms at %s: %s", labels[index], row)

    variance = float(np.mean([r["variance"] for r in rows]))
    bias = float(np.mean([r["bias"] for r in rows]))
    tau_bar_sq = float(np.mean([r["tau_sq"] for r in rows]))
    report = DeltaErrorReport(variance, bias, tau_bar_sq, 0.0, snapshots[0].parameter_count(), beta, rows)
    report.predicted_diff = predicted_error_difference(report, beta)
    return report


# ---------------------------------------------------------------------------
# Monte-Carlo checks
# ---------------------------------------------------------------------------

def gp_rows(g_n_hat: np.ndarray, g_a_hat: np.ndarray, variant: GpVariant) -> np.ndarray:
    """Row-wise gradient projection of each g_a_hat onto its g_n_hat."""
    variant = GpVariant(variant)
    dots = np.einsum("ij,ij->i", g_a_hat, g_n_hat)
    sq_n = np.einsum("ij,ij->i", g_n_hat, g_n_hat)
    norm_n = np.sqrt(sq_n)
    live = norm_n >= NORM_GUARD
    if variant is GpVariant.PROJECTION:
        coef = np.where(live, np.maximum(dots, 0.0) / np.where(live, sq_n, 1.0), 0.0)
    else:
        norm_a = np.sqrt(np.einsum("ij,ij->i", g_a_hat, g_a_hat))
        live &= norm_a >= NORM_GUARD
        cos = np.where(live, dots / np.where(live, norm_n * norm_a, 1.0), 0.0)
        coef = np.where(cos > 0, cos, 0.0)
    return coef[:, None] * g_n_hat


def _delta_errors(g_a, sampler: DeltaSampler, beta, variant, trials, seed, chunk):
    """Per-trial squared errors of AT and GP aggregation from shared samples."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    g_a = np.asarray(g_a, dtype=np.float64).ravel()
    rng = np.random.default_rng(seed)
    at_errors, gp_errors = [], []
    remaining = trials
    while remaining > 0:
        count = min(chunk, remaining)
        g_a_hat, g_n_hat = sampler(rng, count)
        aggregated = beta * gp_rows(g_n_hat, g_a_hat, variant) + (1.0 - beta) * g_a_hat
        at_errors.append(np.sum((g_a - g_a_hat) ** 2, axis=1))
        gp_errors.append(np.sum((g_a - aggregated) ** 2, axis=1))
        remaining -= count
    return np.concatenate(at_errors), np.concatenate(gp_errors)


def monte_carlo_delta(g_a, sampler: DeltaSampler, beta: float, variant: GpVariant = GpVariant.PROJECTION,
                      trials: int = 1000, seed: int = 0, chunk: int = 256) -> float:
    """
    Mean over trials of ||g_a - (beta * gp(g_n_hat, g_a_hat) + (1 - beta) * g_a_hat)||^2.

    Args:
        g_a (ndarray): Population update
        sampler (callable): (rng, count) -> (g_a_hat rows, g_n_hat rows)
        beta (float): Blend weight
        variant (GpVariant): Projection rule
        trials (int): Number of sampled pairs
        seed (int): Sampler seed
        chunk (int): Trials drawn per sampler call

    Returns:
        float: Monte-Carlo delta error
    """
    _, gp_errors = _delta_errors(g_a, sampler, beta, variant, trials, seed, chunk)
    return float(gp_errors.mean())


def monte_carlo_stderr(errors: np.ndarray) -> float:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size < 2:
        return 0.0
    return float(errors.std(ddof=1) / np.sqrt(errors.size))


def paired_monte_carlo(g_a, sampler: DeltaSampler, beta: float, variant: GpVariant = GpVariant.PROJECTION,
                       trials: int = 1000, seed: int = 0, chunk: int = 256) -> dict:
    """Delta^2_AT and Delta^2_GP from the same draws, with standard errors."""
    at_errors, gp_errors = _delta_errors(g_a, sampler, beta, variant, trials, seed, chunk)
    return {
        "delta_at": float(at_errors.mean()),
        "delta_gp": float(gp_errors.mean()),
        "stderr_at": monte_carlo_stderr(at_errors),
        "stderr_gp": monte_carlo_stderr(gp_errors),
        "trials": int(trials),
    }


@dataclass(frozen=True)
class GaussianDeltaEnsemble:
    """
    Controlled update ensemble with a known population update.

    g_a ~ N(0, 1)^m and a bias vector b ~ N(0, bias_scale^2)^m are fixed by
    ``seed``; each draw gives g_a_hat = g_a + sigma_a * noise and
    g_n_hat = g_a + b + sigma_n * noise.
    """

    m: int = 10_000
    sigma_a: float = 0.1
    sigma_n: float = 0.05
    bias_scale: float = 0.1
    seed: int = 0

    def population(self) -> Tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, 0])
        return rng.standard_normal(self.m), self.bias_scale * rng.standard_normal(self.m)

    def sampler(self) -> DeltaSampler:
        g_a, bias = self.population()

        def draw(rng: np.random.Generator, count: int):
            g_a_hat = g_a + self.sigma_a * rng.standard_normal((count, self.m))
            g_n_hat = g_a + bias + self.sigma_n * rng.standard_normal((count, self.m))
            return g_a_hat, g_n_hat

        return draw

    @property
    def variance(self) -> float:
        """E||g_a - g_a_hat||^2 in closed form."""
        return self.m * self.sigma_a ** 2

    def empirical_terms(self, trials: int = 200, seed: int = 1) -> Tuple[float, float, float]:
        """(variance, bias, tau_bar_sq) estimated from draws of the ensemble."""
        g_a, _ = self.population()
        g_a_hat, g_n_hat = self.sampler()(np.random.default_rng(seed), trials)
        variance = float(np.mean(np.sum((g_a - g_a_hat) ** 2, axis=1)))
        residual = g_a - g_n_hat
        bias = float(np.mean(np.sum(residual ** 2, axis=1)))
        tau_sq = float(np.mean([sin_squared(g_n_hat[i], residual[i]) for i in range(trials)]))
        return variance, bias, tau_sq
