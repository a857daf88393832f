import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple

import numpy as np

logger = logging.getLogger(__name__)

BOX_ROUNDS = 10
# Points within this relative distance of the sphere count as inside, so
# projecting an already projected point returns it unchanged.
BOUNDARY_RTOL = 1e-12


class AttackNorm(str, Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"

    @classmethod
    def parse(cls, text) -> "AttackNorm":
        """Accept 'l1', 'L2', 'linf', 'Linf', 'inf' and enum members."""
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower()
        if key in ("inf", "l_inf", "linfty"):
            key = "linf"
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown norm {text!r}; expected one of l1, l2, linf") from None

    @property
    def label(self) -> str:
        return {"l1": "L1", "l2": "L2", "linf": "Linf"}[self.value]


# Tie-break for equal volumes: Linf, then L2, then L1.
NORM_PRIORITY = {AttackNorm.LINF: 0, AttackNorm.L2: 1, AttackNorm.L1: 2}

# Reference radii and input dimensions used by the keypair presets.
KEYPAIR_PRESETS = {
    "cifar": (12.0, 0.5, 8.0 / 255.0, 3072),
    "imagenet": (255.0, 2.0, 4.0 / 255.0, 150528),
}


@dataclass(frozen=True)
class BallSpec:
    """
    An lp ball around clean inputs intersected with a per-coordinate box.

    ``center`` may hold a whole batch (N x d); the ball then applies row-wise.
    """

    norm: AttackNorm
    eps: float
    center: np.ndarray
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"ball radius must be positive, got {self.eps}")
        if self.lo > self.hi:
            raise ValueError(f"box is empty: lo={self.lo} > hi={self.hi}")
        center = np.asarray(self.center, dtype=np.float64)
        if np.any(center < self.lo - 1e-12) or np.any(center > self.hi + 1e-12):
            raise ValueError(f"ball center lies outside the box [{self.lo}, {self.hi}]")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "norm", AttackNorm.parse(self.norm))

    def contains(self, points: np.ndarray, tol: float = 1e-7) -> np.ndarray:
        """Row-wise membership test for both constraints."""
        points = np.asarray(points, dtype=np.float64)
        in_ball = lp_norm(points - self.center, self.norm, axis=-1) <= self.eps + tol
        in_box = np.all((points >= self.lo - tol) & (points <= self.hi + tol), axis=-1)
        return in_ball & in_box


def lp_norm(v, norm: AttackNorm, axis: Optional[int] = None):
    """
    lp norm of a vector, or of each slice along ``axis``.

    Args:
        v (array-like): Values
        norm (AttackNorm): Which norm
        axis (int, optional): Reduce along this axis only

    Returns:
        float | ndarray: Non-negative norm(s)
    """
    v = np.asarray(v, dtype=np.float64)
    norm = AttackNorm.parse(norm)
    if axis is None:
        v = v.ravel()
        axis = 0
    if v.shape[axis] == 0:
        return np.zeros(np.delete(v.shape, axis)) if v.ndim > 1 else 0.0
    if norm is AttackNorm.L1:
        out = np.abs(v).sum(axis=axis)
    elif norm is AttackNorm.L2:
        out = np.sqrt((v * v).sum(axis=axis))
    else:
        out = np.abs(v).max(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def project_l2(v, eps: float) -> np.ndarray:
    """Radial scaling onto the l2 ball; works row-wise on 2-D input."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.sqrt((v * v).sum(axis=-1, keepdims=True))
    # Points already inside keep their exact values.
    outside = norms > eps * (1.0 + BOUNDARY_RTOL)
    scale = np.where(outside, eps / np.where(norms > 0, norms, 1.0), 1.0)
    return v * scale


def project_linf(v, eps: float) -> np.ndarray:
    return np.clip(np.asarray(v, dtype=np.float64), -eps, eps)


def project_l1(v, eps: float) -> np.ndarray:
    """
    Euclidean projection onto the l1 ball of radius ``eps``.

    Magnitudes are soft-thresholded by the value found from their sorted
    cumulative sums; signs are restored afterwards. Rows already inside the
    ball are returned unchanged. Works row-wise on 2-D input.

    Args:
        v (ndarray): Vector or N x d batch
        eps (float): Radius

    Returns:
        ndarray: Projected values, same shape as ``v``
    """
    v = np.asarray(v, dtype=np.float64)
    flat = np.atleast_2d(v)
    mags = np.abs(flat)
    inside = mags.sum(axis=1) <= eps * (1.0 + BOUNDARY_RTOL)

    # Sorted descending magnitudes and their running sums
    mu = -np.sort(-mags, axis=1)
    cumulative = np.cumsum(mu, axis=1) - eps
    ranks = np.arange(1, flat.shape[1] + 1)
    support = mu * ranks > cumulative
    # Last index satisfying the support condition, per row
    rho = flat.shape[1] - 1 - np.argmax(support[:, ::-1], axis=1)
    theta = cumulative[np.arange(flat.shape[0]), rho] / (rho + 1)
    theta = np.maximum(theta, 0.0)

    projected = np.sign(flat) * np.maximum(mags - theta[:, None], 0.0)
    projected = np.where(inside[:, None], flat, projected)
    return projected.reshape(v.shape)


PROJECTORS = {
    AttackNorm.L1: project_l1,
    AttackNorm.L2: project_l2,
    AttackNorm.LINF: project_linf,
}


def project_ball(v, norm: AttackNorm, eps: float) -> np.ndarray:
    return PROJECTORS[AttackNorm.parse(norm)](v, eps)


def project_ball_box(x_adv, ball: BallSpec) -> np.ndarray:
    """
    Pull candidate points back into the ball and the box.

    Linf uses the exact joint projection (clip then clamp). L1 and L2 run a
    fixed number of alternating ball/box rounds and finish on the box, so the
    box always holds exactly and the ball to within the alternation tolerance.

    Args:
        x_adv (ndarray): Candidate points, shaped like ``ball.center``
        ball (BallSpec): Constraint set

    Returns:
        ndarray: Feasible points
    """
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x_adv.shape != ball.center.shape:
        raise ValueError(f"points of shape {x_adv.shape} do not match ball center {ball.center.shape}")

    if ball.norm is AttackNorm.LINF:
        delta = project_linf(x_adv - ball.center, ball.eps)
        return np.clip(ball.center + delta, ball.lo, ball.hi)

    project = PROJECTORS[ball.norm]
    current = x_adv
    for _ in range(BOX_ROUNDS):
        delta = project(current - ball.center, ball.eps)
        boxed = np.clip(ball.center + delta, ball.lo, ball.hi)
        if np.array_equal(boxed, current):
            break
        current = boxed
    # Box clamping only moves coordinates toward the center, so it never
    # leaves the ball once the ball step has been applied.
    return current


def log_ball_volume(norm: AttackNorm, d: int, eps: float) -> float:
    """
    Natural log of the volume of the d-dimensional lp ball of radius eps.

    ln V = d * ln(2 * Gamma(1 + 1/p)) - lnGamma(1 + d/p) + d * ln(eps)
    """
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    if not eps > 0:
        raise ValueError(f"radius must be positive, got {eps}")
    norm = AttackNorm.parse(norm)
    if norm is AttackNorm.LINF:
        return d * math.log(2.0 * eps)
    p = 1.0 if norm is AttackNorm.L1 else 2.0
    return d * math.log(2.0) + d * math.lgamma(1.0 + 1.0 / p) - math.lgamma(1.0 + d / p) + d * math.log(eps)


def rank_norms_by_volume(eps1: float, eps2: float, epsinf: float, d: int):
    """All three norms with their log volumes, largest first."""
    volumes = {
        AttackNorm.L1: log_ball_volume(AttackNorm.L1, d, eps1),
        AttackNorm.L2: log_ball_volume(AttackNorm.L2, d, eps2),
        AttackNorm.LINF: log_ball_volume(AttackNorm.LINF, d, epsinf),
    }
    return sorted(volumes.items(), key=lambda item: (-item[1], NORM_PRIORITY[item[0]]))


def select_key_pair(
    eps1: float,
    eps2: float,
    epsinf: float,
    d: int,
    override: Optional[Tuple] = None,
) -> Tuple[AttackNorm, AttackNorm]:
    """
    Pick the key tradeoff pair (q, r) as the two largest-volume balls.

    Args:
        eps1 (float): l1 radius
        eps2 (float): l2 radius
        epsinf (float): linf radius
        d (int): Input dimension
        override (tuple, optional): Explicit (q, r) that wins unconditionally

    Returns:
        tuple: (q, r), q being the larger-volume norm
    """
    for name, eps in (("eps1", eps1), ("eps2", eps2), ("epsinf", epsinf)):
        if not eps > 0:
            raise ValueError(f"{name} must be positive, got {eps}")
    if override is not None:
        q, r = (AttackNorm.parse(n) for n in override)
        if q is r:
            raise ValueError(f"key pair override needs two distinct norms, got {q.value} twice")
        logger.debug("Key pair pinned by override: (%s, %s)", q.label, r.label)
        return q, r

    ranked = rank_norms_by_volume(eps1, eps2, epsinf, d)
    (q, vol_q), (r, vol_r) = ranked[0], ranked[1]
    logger.debug("Key pair by volume: %s (%.3f), %s (%.3f)", q.label, vol_q, r.label, vol_r)
    return q, r
