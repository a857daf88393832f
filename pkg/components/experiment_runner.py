import json
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Tuple

from utils.config_utils import (
    ExperimentConfig,
    build_dataset,
    build_eval_specs,
    build_model,
    build_plan,
    canonical_config_text,
    config_hash,
    load_config,
)
from utils.data_utils import summarize_dataset
from utils.evaluation_utils import RobustReport, evaluate_robustness
from utils.report_utils import write_jsonl
from utils.tensor_utils import MlpModel, load_checkpoint
from utils.training_utils import EpochRecord, run_plan

logger = logging.getLogger(__name__)

CONFIG_FILE = "config.txt"
METRICS_FILE = "metrics.jsonl"
TIMINGS_FILE = "timings.jsonl"
REPORT_FILE = "report.json"
MANIFEST_FILE = "manifest.json"
CHECKPOINT_DIR = "checkpoints"


@dataclass
class RunManifest:
    """What a finished run produced and how to reproduce it."""

    run_id: str
    method: str
    config_hash: str
    seeds: Dict[str, int]
    started_at: str
    finished_at: str
    artifacts: Dict[str, str] = field(default_factory=dict)
    checkpoints: List[str] = field(default_factory=list)
    dataset: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / MANIFEST_FILE
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, run_dir) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_FILE
        if not path.is_file():
            raise FileNotFoundError(f"{run_dir} has no {MANIFEST_FILE}; is it a finished run directory?")
        return cls(**json.loads(path.read_text(encoding="utf-8")))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_metrics(run_dir: Path, records: List[EpochRecord]) -> Tuple[Path, Path]:
    """metrics.jsonl holds the deterministic fields; wall-clock seconds go to timings.jsonl."""
    metrics = write_jsonl(run_dir / METRICS_FILE, [record.metrics() for record in records])
    timings = write_jsonl(run_dir / TIMINGS_FILE,
                          [{"epoch": record.epoch, "seconds": record.seconds} for record in records])
    return metrics, timings


def run_experiment_config(config: ExperimentConfig) -> RunManifest:
    """
    Train, evaluate and persist one configured run.

    Args:
        config (ExperimentConfig): Parsed and validated configuration

    Returns:
        RunManifest: Manifest also written to <output.dir>/manifest.json
    """
    started_at = _now()
    run_dir = Path(config.output.dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_dir = run_dir / CHECKPOINT_DIR
    if checkpoint_dir.is_dir():
        for stale in checkpoint_dir.glob("epoch_*.ckpt"):
            stale.unlink()

    config_path = run_dir / CONFIG_FILE
    config_path.write_text(canonical_config_text(config), encoding="utf-8")
    digest = config_hash(config)
    logger.info("Run %s: method %s, config hash %s", run_dir.name, config.train.method, digest[:12])

    train_set, test_set = build_dataset(config)
    model = build_model(config, train_set.dim, train_set.num_classes)
    plan = build_plan(config)
    eval_specs = build_eval_specs(config)
    probe = test_set.head(config.eval.probe_size)

    final_model, records = run_plan(plan, train_set, model, probe=probe, eval_specs=eval_specs,
                                    checkpoint_dir=checkpoint_dir)

    metrics_path, timings_path = write_metrics(run_dir, records)
    report = evaluate_robustness(final_model, test_set, eval_specs, box=plan.box, epoch=len(records))
    report_path = run_dir / REPORT_FILE
    report_path.write_text(json.dumps(report.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Final report: clean %.3f union %.3f %s", report.clean_acc, report.union_acc,
                {norm.value: round(acc, 4) for norm, acc in report.per_norm_acc.items()})

    checkpoints = sorted(str(path) for path in checkpoint_dir.glob("epoch_*.ckpt")) if checkpoint_dir.is_dir() else []
    manifest = RunManifest(
        run_id=run_dir.name,
        method=config.train.method,
        config_hash=digest,
        seeds={"dataset": config.dataset.seed, "train": config.train.seed},
        started_at=started_at,
        finished_at=_now(),
        artifacts={
            "config": str(config_path),
            "metrics": str(metrics_path),
            "timings": str(timings_path),
            "report": str(report_path),
            "checkpoints": str(checkpoint_dir),
        },
        checkpoints=checkpoints,
        dataset={"train": summarize_dataset(train_set), "test": summarize_dataset(test_set)},
    )
    manifest.artifacts["manifest"] = str(manifest.save(run_dir))
    logger.info("Wrote run artifacts to %s", run_dir)
    return manifest


def run_experiment(config_path) -> RunManifest:
    """Load a config file and run it; RAMP_KIT_SEED overrides the configured seeds."""
    return run_experiment_config(load_config(config_path))


def evaluate_checkpoint(checkpoint_path, config_path) -> RobustReport:
    """
    Evaluate a saved model on the configured test split with the eval attacks.

    Args:
        checkpoint_path (str): Checkpoint written by a run
        config_path (str): Config describing data and eval attacks

    Returns:
        RobustReport: Clean, per-norm and union accuracy
    """
    config = load_config(config_path)
    model: MlpModel = load_checkpoint(checkpoint_path)
    _, test_set = build_dataset(config)
    if model.input_dim != test_set.dim:
        raise ValueError(f"checkpoint expects dimension {model.input_dim} but the data has {test_set.dim}")
    report = evaluate_robustness(model, test_set, build_eval_specs(config))
    logger.info("Evaluated %s on %d samples", checkpoint_path, len(test_set))
    return report
