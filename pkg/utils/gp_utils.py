import logging
from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum

import numpy as np

from utils.tensor_utils import MlpModel, ModelDelta, ShapeError, apply_delta

logger = logging.getLogger(__name__)

NORM_GUARD = 1e-15


class GpVariant(str, Enum):
    # cos(g_n, g_a) * g_n when the cosine is positive
    COSINE = "cosine"
    # max(<g_a, g_n>, 0) * g_n / ||g_n||^2
    PROJECTION = "projection"


@dataclass(frozen=True)
class GpConfig:
    beta: float = 0.5
    variant: GpVariant = GpVariant.COSINE

    def __post_init__(self):
        object.__setattr__(self, "variant", GpVariant(self.variant))
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")


def cosine_similarity(a, b) -> float:
    """a.b / (|a| |b|), or 0 when either norm is below 1e-15."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"vectors of length {a.size} and {b.size}", expected=a.size, actual=b.size)
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a < NORM_GUARD or norm_b < NORM_GUARD:
        return 0.0
    return float(np.dot(a, b) / (norm_a * norm_b))


def gp_layer(g_n, g_a, variant: GpVariant = GpVariant.COSINE) -> np.ndarray:
    """
    Keep the part of the natural update that agrees with the adversarial one.

    Args:
        g_n (ndarray): Natural-training update of one layer
        g_a (ndarray): Adversarial-training update of the same layer
        variant (GpVariant): Filter rule

    Returns:
        ndarray: A non-negative multiple of ``g_n``
    """
    g_n = np.asarray(g_n, dtype=np.float64).ravel()
    g_a = np.asarray(g_a, dtype=np.float64).ravel()
    if g_n.shape != g_a.shape:
        raise ShapeError(f"layer updates of length {g_n.size} and {g_a.size}", expected=g_n.size, actual=g_a.size)
    variant = GpVariant(variant)

    if variant is GpVariant.COSINE:
        cos = cosine_similarity(g_n, g_a)
        return cos * g_n if cos > 0 else np.zeros_like(g_n)

    sq_norm = float(np.dot(g_n, g_n))
    if np.sqrt(sq_norm) < NORM_GUARD:
        return np.zeros_like(g_n)
    return max(float(np.dot(g_a, g_n)), 0.0) * g_n / sq_norm


def project_delta(g_n: ModelDelta, g_a: ModelDelta, variant: GpVariant = GpVariant.COSINE) -> ModelDelta:
    """Apply gp_layer to every named parameter and collect the results."""
    if g_n.names() != g_a.names():
        raise ShapeError("deltas cover different layers", expected=g_n.names(), actual=g_a.names())
    projected = OrderedDict()
    for name in g_n.names():
        layer = gp_layer(g_n.layers[name], g_a.layers[name], variant)
        if not np.any(layer):
            logger.debug("GP dropped %s (cos=%.4f)", name, cosine_similarity(g_n.layers[name], g_a.layers[name]))
        projected[name] = layer
    return ModelDelta(projected)


def blend_deltas(g_p: ModelDelta, g_a: ModelDelta, beta: float) -> ModelDelta:
    """beta * g_p + (1 - beta) * g_a per layer, keeping a scaled share of g_a's residual."""
    if g_p.names() != g_a.names():
        raise ShapeError("deltas cover different layers", expected=g_a.names(), actual=g_p.names())
    layers = OrderedDict(
        (name, beta * g_p.layers[name] + (1.0 - beta) * g_a.layers[name]) for name in g_a.names()
    )
    compensation = None
    if g_a.compensation is not None and beta < 1.0:
        compensation = OrderedDict(
            (name, (1.0 - beta) * residual) for name, residual in g_a.compensation.items()
        )
    return ModelDelta(layers, compensation)


def blended_update(f_r: MlpModel, g_p: ModelDelta, g_a: ModelDelta, beta: float) -> MlpModel:
    """
    f_r + beta * g_p + (1 - beta) * g_a.

    At beta = 0 the result is bit-identical to applying g_a alone, rounding
    residual included.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    return apply_delta(f_r, blend_deltas(g_p, g_a, beta))
