import json
import logging
import re
from pathlib import Path

from components.experiment_runner import CHECKPOINT_DIR, CONFIG_FILE
from utils.config_utils import build_dataset, build_train_specs, load_config
from utils.evaluation_utils import DeltaErrorReport, estimate_delta_terms, predicted_error_difference
from utils.tensor_utils import load_checkpoint

logger = logging.getLogger(__name__)

DELTA_REPORT_FILE = "delta_report.json"
CHECKPOINT_PATTERN = re.compile(r"epoch_(\d+)\.ckpt$")


def list_checkpoints(run_dir):
    """(epoch, path) pairs of a run's checkpoints in epoch order."""
    found = []
    for path in (Path(run_dir) / CHECKPOINT_DIR).glob("epoch_*.ckpt"):
        match = CHECKPOINT_PATTERN.search(path.name)
        if match:
            found.append((int(match.group(1)), path))
    return sorted(found)


def analyze_run(run_dir, finite_m=False) -> DeltaErrorReport:
    """
    Estimate the delta-error terms along a finished run's checkpoints.

    The held-out split stands in for the population; minibatches come from
    the training split. The run's own config.txt is used with its recorded
    seeds, so the analysis does not follow RAMP_KIT_SEED.

    Args:
        run_dir (str): Directory written by the train verb
        finite_m (bool): Apply the finite-dimension factor to predicted_diff

    Returns:
        DeltaErrorReport: Averaged terms, also written to delta_report.json
    """
    run_dir = Path(run_dir)
    config = load_config(run_dir / CONFIG_FILE, apply_env=False)
    checkpoints = list_checkpoints(run_dir)
    if len(checkpoints) < 2:
        raise ValueError(f"{run_dir} has {len(checkpoints)} checkpoint(s); delta analysis needs at least 2")

    train_set, test_set = build_dataset(config)
    snapshots = [load_checkpoint(path) for _, path in checkpoints]
    report = estimate_delta_terms(
        snapshots,
        heldout=test_set,
        minibatch_source=train_set,
        specs=build_train_specs(config),
        minibatch_size=config.eval.delta_minibatch,
        beta=config.ramp.beta,
        seed=config.train.seed,
        labels=[epoch for epoch, _ in checkpoints],
    )
    if finite_m:
        report.predicted_diff = predicted_error_difference(report, report.beta, finite_m=True)

    path = run_dir / DELTA_REPORT_FILE
    path.write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Delta terms over %d snapshots: variance %.4g bias %.4g tau_bar %.4f -> %s",
                len(snapshots), report.variance, report.bias, report.tau_bar, path)
    return report
