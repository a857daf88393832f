import json

import pandas as pd
import pytest

from app import EXIT_USAGE, main
from components.delta_analysis import DELTA_REPORT_FILE, list_checkpoints
from components.experiment_runner import RunManifest
from utils.report_utils import FIGURE_COLUMNS

TINY = """
dataset.kind = moons
dataset.size = 60
dataset.seed = 2
model.hidden = 8
train.method = {method}
train.epochs = 2
train.batch_size = 16
train.seed = 1
attack.steps_l1 = 2
attack.steps_l2 = 2
attack.steps_linf = 2
eval.steps_l1 = 2
eval.steps_l2 = 2
eval.steps_linf = 2
eval.probe_size = 20
eval.delta_minibatch = 8
output.dir = {out}
"""


def write_config(path, out, method="at_gp"):
    path.write_text(TINY.format(method=method, out=out.as_posix()), encoding="utf-8")
    return path


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    with pytest.MonkeyPatch.context() as patch:
        patch.delenv("RAMP_KIT_SEED", raising=False)
        config = write_config(root / "tiny.cfg", root / "tiny")
        assert main(["train", str(config)]) == 0
    return root / "tiny", config


def test_train_writes_every_artifact(finished_run):
    run_dir, _ = finished_run
    for name in ("config.txt", "metrics.jsonl", "timings.jsonl", "report.json", "manifest.json"):
        assert (run_dir / name).is_file(), name
    assert [epoch for epoch, _ in list_checkpoints(run_dir)] == [0, 1]

    manifest = RunManifest.load(run_dir)
    assert manifest.method == "at_gp"
    assert manifest.seeds == {"dataset": 2, "train": 1}
    assert len(manifest.config_hash) == 64
    assert manifest.dataset["train"]["samples"] + manifest.dataset["test"]["samples"] == 60

    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    assert set(report["per_norm_acc"]) == {"l1", "l2", "linf"}
    assert report["union_acc"] <= min(report["per_norm_acc"].values()) <= report["clean_acc"]


def test_metrics_are_byte_identical_across_runs(finished_run, tmp_path, capsys):
    run_dir, _ = finished_run
    config = write_config(tmp_path / "again.cfg", tmp_path / "again")
    code, manifest = run_cli(capsys, "train", str(config))
    assert code == 0
    assert manifest["run_id"] == "again"
    assert (tmp_path / "again" / "metrics.jsonl").read_bytes() == (run_dir / "metrics.jsonl").read_bytes()
    settings = lambda d: [l for l in (d / "config.txt").read_text(encoding="utf-8").splitlines()  # noqa: E731
                          if not l.startswith("output.dir")]
    assert settings(tmp_path / "again") == settings(run_dir)


def test_seed_override_changes_the_run(tmp_path, monkeypatch):
    monkeypatch.setenv("RAMP_KIT_SEED", "9")
    config = write_config(tmp_path / "seeded.cfg", tmp_path / "seeded", method="nt")
    assert main(["train", str(config)]) == 0
    assert RunManifest.load(tmp_path / "seeded").seeds == {"dataset": 9, "train": 9}


def test_missing_required_key_exits_with_usage_error(tmp_path, capsys):
    config = tmp_path / "broken.cfg"
    config.write_text("dataset.kind = moons\ntrain.method = at\n", encoding="utf-8")
    code, payload = run_cli(capsys, "train", str(config))
    assert code == EXIT_USAGE
    assert payload is None


def test_unknown_verb_is_an_argparse_error():
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == 2


def test_eval_checkpoint(finished_run, capsys):
    run_dir, config = finished_run
    _, checkpoint = list_checkpoints(run_dir)[-1]
    code, report = run_cli(capsys, "eval", str(checkpoint), str(config))
    assert code == 0
    assert set(report) == {"clean_acc", "per_norm_acc", "union_acc", "samples"}
    assert report["samples"] == 15


def test_eval_rejects_corrupt_checkpoint(finished_run, tmp_path, capsys):
    _, config = finished_run
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint")
    code, _ = run_cli(capsys, "eval", str(bad), str(config))
    assert code == EXIT_USAGE


def test_delta_analysis_and_error_terms(finished_run, tmp_path, capsys):
    run_dir, _ = finished_run
    code, summary = run_cli(capsys, "delta-analysis", str(run_dir))
    assert code == 0
    assert summary["variance"] >= 0.0 and summary["bias"] >= 0.0
    assert 0.0 <= summary["tau_bar"] <= 1.0
    assert (run_dir / DELTA_REPORT_FILE).is_file()

    out = tmp_path / "terms.csv"
    code, _ = run_cli(capsys, "figure-data", "error_terms", str(run_dir), "--out", str(out))
    assert code == 0
    frame = pd.read_csv(out)
    assert list(frame.columns) == FIGURE_COLUMNS["error_terms"]
    assert list(frame["epoch"]) == [0, 1]


def test_delta_analysis_needs_a_run_dir(tmp_path, capsys):
    code, _ = run_cli(capsys, "delta-analysis", str(tmp_path))
    assert code == EXIT_USAGE


def test_figure_data_tradeoff_and_html(finished_run, tmp_path, capsys):
    run_dir, _ = finished_run
    out = tmp_path / "bars.csv"
    code, payload = run_cli(capsys, "figure-data", "tradeoff_bars", str(run_dir), "--out", str(out), "--html")
    assert code == 0
    assert payload == {"kind": "tradeoff_bars", "csv": str(out)}
    frame = pd.read_csv(out)
    assert list(frame["category"]) == ["Linf", "L1", "L2", "Union"]
    assert (tmp_path / "bars.html").is_file()

    curves = tmp_path / "curves.csv"
    assert main(["figure-data", "accuracy_curves", str(run_dir), "--out", str(curves)]) == 0
    assert len(pd.read_csv(curves)) == 2 * 5


def test_figure_data_without_runs_writes_header_only(tmp_path, capsys):
    out = tmp_path / "empty.csv"
    code, _ = run_cli(capsys, "figure-data", "tradeoff_bars", "--out", str(out))
    assert code == 0
    assert out.read_text(encoding="utf-8").strip() == "category,metric,value,run_id"


def test_figure_data_missing_inputs_is_a_runtime_error(tmp_path, capsys):
    code, _ = run_cli(capsys, "figure-data", "error_terms", str(tmp_path), "--out", str(tmp_path / "x.csv"))
    assert code == 1


def test_keypair_verb(capsys):
    code, payload = run_cli(capsys, "keypair", "12", "0.5", "2/255", "3072")
    assert code == 0
    assert {payload["q"], payload["r"]} == {"l1", "l2"}
    assert (payload["q"], payload["r"]) == ("l2", "l1")
    assert payload["overridden"] is False

    _, cifar = run_cli(capsys, "keypair", "--preset", "cifar")
    assert (cifar["q"], cifar["r"]) == ("linf", "l2")
    _, shipped = run_cli(capsys, "keypair", "--preset", "cifar", "--override", "linf,l1")
    assert (shipped["q"], shipped["r"], shipped["overridden"]) == ("linf", "l1", True)


def test_keypair_usage_errors(capsys):
    assert run_cli(capsys, "keypair", "12", "0.5")[0] == EXIT_USAGE
    assert run_cli(capsys, "keypair", "--preset", "cifar", "--override", "l2,l2")[0] == EXIT_USAGE


def test_report_pdf(finished_run, tmp_path, capsys):
    run_dir, _ = finished_run
    out = tmp_path / "run.pdf"
    code, payload = run_cli(capsys, "report", str(run_dir), "--out", str(out))
    assert code == 0
    assert payload == {"pdf": str(out)}
    assert out.read_bytes().startswith(b"%PDF")
