import pytest

from utils.report_utils import (
    FIGURE_COLUMNS,
    FIGURE_KINDS,
    accuracy_curve_table,
    error_terms_table,
    figure_table,
    generate_figure,
    generate_run_report_pdf,
    metrics_frame,
    read_jsonl,
    tradeoff_table,
    write_jsonl,
)

REPORT = {"clean_acc": 0.9, "per_norm_acc": {"l1": 0.6, "l2": 0.7, "linf": 0.5}, "union_acc": 0.4, "samples": 10}
RECORDS = [
    {"epoch": 0, "phase": "warmup", "method": "nt", "train_loss": 0.7, "clean_acc": 0.8,
     "per_norm_acc": {"l2": 0.5, "linf": 0.4}, "union_acc": 0.3, "learning_rate": 0.05},
    {"epoch": 1, "phase": "train", "method": "at", "train_loss": 0.6, "clean_acc": 0.85,
     "per_norm_acc": {"l2": 0.6, "linf": 0.5}, "union_acc": 0.45, "learning_rate": 0.05},
]
DELTA = {
    "variance": 1e-4, "bias": 2e-3, "tau_bar_sq": 0.01, "tau_bar": 0.1, "predicted_diff": 7e-5, "m": 50,
    "beta": 0.5,
    "per_snapshot": [
        {"epoch": 3, "variance": 1e-4, "bias": 2e-3, "tau_sq": 0.01, "tau_bar": 0.1, "predicted_diff": 7e-5},
        {"epoch": 5, "variance": 2e-4, "bias": 1e-3, "tau_sq": 0.04, "tau_bar": 0.2, "predicted_diff": 1e-4},
    ],
}


def test_jsonl_round_trip(tmp_path):
    path = write_jsonl(tmp_path / "rows.jsonl", RECORDS)
    assert read_jsonl(path) == RECORDS
    assert path.read_text(encoding="utf-8").count("\n") == 2
    assert read_jsonl(tmp_path / "absent.jsonl") == []


def test_metrics_frame_flattens_norms():
    frame = metrics_frame(RECORDS)
    assert list(frame["acc_linf"]) == [0.4, 0.5]
    assert "per_norm_acc" not in frame.columns


def test_tradeoff_table_has_one_row_per_category():
    frame = tradeoff_table([("run_a", REPORT)])
    assert list(frame.columns) == FIGURE_COLUMNS["tradeoff_bars"]
    assert list(frame["category"]) == ["Linf", "L1", "L2", "Union"]
    assert list(frame["value"]) == [0.5, 0.6, 0.7, 0.4]


def test_accuracy_curves_are_long_format():
    frame = accuracy_curve_table([("run_a", RECORDS)])
    assert len(frame) == 2 * 4
    first_epoch = frame[frame["epoch"] == 0]
    assert list(first_epoch["metric"]) == ["clean_acc", "acc_l2", "acc_linf", "union_acc"]


def test_error_terms_follow_snapshots():
    frame = error_terms_table([("run_a", DELTA), ("run_b", DELTA)])
    assert list(frame.columns) == FIGURE_COLUMNS["error_terms"]
    assert list(frame["epoch"]) == [3, 5, 3, 5]


@pytest.mark.parametrize("kind", FIGURE_KINDS)
def test_empty_tables_keep_their_columns(kind):
    frame = figure_table(kind, [])
    assert frame.empty
    assert list(frame.columns) == FIGURE_COLUMNS[kind]


def test_unknown_figure_kind():
    with pytest.raises(ValueError):
        figure_table("pie", [])


@pytest.mark.parametrize("kind,runs", [
    ("tradeoff_bars", [("a", REPORT), ("b", REPORT)]),
    ("accuracy_curves", [("a", RECORDS)]),
    ("error_terms", [("a", DELTA)]),
])
def test_generate_figure_draws_traces(kind, runs):
    fig = generate_figure(kind, figure_table(kind, runs))
    assert len(fig.data) > 0
    assert fig.layout.title.text


def test_run_report_pdf():
    manifest = {"run_id": "tiny", "method": "at", "config_hash": "ab" * 32, "seeds": {"dataset": 0, "train": 0},
                "started_at": "2026-01-01T00:00:00+00:00", "finished_at": "2026-01-01T00:01:00+00:00"}
    pdf = generate_run_report_pdf(manifest, REPORT, RECORDS, DELTA).getvalue()
    assert pdf.startswith(b"%PDF")
    bare = generate_run_report_pdf(manifest, REPORT, []).getvalue()
    assert bare.startswith(b"%PDF")
    assert len(bare) < len(pdf)

