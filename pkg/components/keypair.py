import logging

from utils.lp_utils import KEYPAIR_PRESETS, rank_norms_by_volume, select_key_pair

logger = logging.getLogger(__name__)


def keypair_summary(eps1, eps2, epsinf, dim, override=None):
    """
    Key tradeoff pair and the log volumes behind it.

    Args:
        eps1 (float): l1 radius
        eps2 (float): l2 radius
        epsinf (float): linf radius
        dim (int): Input dimension
        override (tuple, optional): Explicit (q, r)

    Returns:
        dict: q, r and log_volumes keyed by norm, largest first
    """
    q, r = select_key_pair(eps1, eps2, epsinf, dim, override)
    ranked = rank_norms_by_volume(eps1, eps2, epsinf, dim)
    return {
        "q": q.value,
        "r": r.value,
        "log_volumes": {norm.value: volume for norm, volume in ranked},
        "dim": int(dim),
        "overridden": override is not None,
    }


def preset_summary(name, override=None):
    if name not in KEYPAIR_PRESETS:
        raise ValueError(f"unknown preset {name!r}; expected one of {', '.join(sorted(KEYPAIR_PRESETS))}")
    eps1, eps2, epsinf, dim = KEYPAIR_PRESETS[name]
    logger.debug("Preset %s: eps=(%g, %g, %g) d=%d", name, eps1, eps2, epsinf, dim)
    return keypair_summary(eps1, eps2, epsinf, dim, override)
