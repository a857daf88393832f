import json
import logging
from datetime import datetime
from io import BytesIO
from pathlib import Path

import pandas as pd
import plotly.graph_objects as go

logger = logging.getLogger(__name__)

FIGURE_KINDS = ("tradeoff_bars", "accuracy_curves", "error_terms")
FIGURE_COLUMNS = {
    "tradeoff_bars": ["category", "metric", "value", "run_id"],
    "accuracy_curves": ["epoch", "metric", "value", "run_id"],
    "error_terms": ["epoch", "variance", "bias", "tau_bar", "predicted_diff"],
}
TRADEOFF_CATEGORIES = (("Linf", "linf"), ("L1", "l1"), ("L2", "l2"))
CATEGORY_COLORS = {"Linf": "#2196F3", "L1": "#4CAF50", "L2": "#FF9800", "Union": "#9C27B0"}


def read_jsonl(path):
    """Parse a JSON-lines file into a list of dicts; a missing file reads as empty."""
    path = Path(path)
    if not path.is_file():
        return []
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def write_jsonl(path, rows):
    lines = [json.dumps(row, sort_keys=True) for row in rows]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return Path(path)


def metrics_frame(records):
    """
    Flatten EpochRecord dicts into one row per epoch.

    Args:
        records (list): Dicts as written to metrics.jsonl

    Returns:
        DataFrame: epoch, phase, method, train_loss, clean_acc, union_acc,
        learning_rate and one acc_<norm> column per attacked norm
    """
    rows = []
    for record in records:
        row = {key: value for key, value in record.items() if key != "per_norm_acc"}
        for norm, acc in record.get("per_norm_acc", {}).items():
            row[f"acc_{norm}"] = acc
        rows.append(row)
    return pd.DataFrame(rows)


def tradeoff_table(runs):
    """
    Final per-norm and union robust accuracy of each run.

    Args:
        runs (list): (run_id, report dict) pairs; report as in report.json

    Returns:
        DataFrame: category, metric, value, run_id
    """
    rows = []
    for run_id, report in runs:
        per_norm = report.get("per_norm_acc", {})
        for category, norm in TRADEOFF_CATEGORIES:
            if norm in per_norm:
                rows.append({"category": category, "metric": "robust_acc", "value": per_norm[norm], "run_id": run_id})
        rows.append({"category": "Union", "metric": "robust_acc", "value": report.get("union_acc", 0.0),
                     "run_id": run_id})
    return pd.DataFrame(rows, columns=FIGURE_COLUMNS["tradeoff_bars"])


def accuracy_curve_table(runs):
    """Long-format clean/per-norm/union accuracy per epoch from (run_id, records) pairs."""
    rows = []
    for run_id, records in runs:
        for record in records:
            rows.append({"epoch": record["epoch"], "metric": "clean_acc", "value": record["clean_acc"],
                         "run_id": run_id})
            for norm, acc in sorted(record.get("per_norm_acc", {}).items()):
                rows.append({"epoch": record["epoch"], "metric": f"acc_{norm}", "value": acc, "run_id": run_id})
            rows.append({"epoch": record["epoch"], "metric": "union_acc", "value": record["union_acc"],
                         "run_id": run_id})
    return pd.DataFrame(rows, columns=FIGURE_COLUMNS["accuracy_curves"])


def error_terms_table(runs):
    """Per-snapshot delta-error terms, concatenated in run order."""
    rows = []
    for _, delta_report in runs:
        for snapshot in delta_report.get("per_snapshot", []):
            rows.append({column: snapshot[column] for column in FIGURE_COLUMNS["error_terms"]})
    return pd.DataFrame(rows, columns=FIGURE_COLUMNS["error_terms"])


def figure_table(kind, runs):
    if kind not in FIGURE_KINDS:
        raise ValueError(f"unknown figure kind {kind!r}; expected one of {', '.join(FIGURE_KINDS)}")
    builders = {
        "tradeoff_bars": tradeoff_table,
        "accuracy_curves": accuracy_curve_table,
        "error_terms": error_terms_table,
    }
    return builders[kind](runs)


def generate_figure(kind, frame):
    """
    Render one figure-data table with plotly

    Args:
        kind (str): One of FIGURE_KINDS
        frame (DataFrame): Table produced by figure_table

    Returns:
        go.Figure: Figure ready for write_html
    """
    fig = go.Figure()

    if kind == "tradeoff_bars":
        for category in frame["category"].unique():
            part = frame[frame["category"] == category]
            fig.add_trace(go.Bar(x=part["run_id"], y=part["value"], name=category,
                                 marker_color=CATEGORY_COLORS.get(category)))
        fig.update_layout(title="Robust Accuracy per Threat Model", xaxis_title="Run",
                          yaxis_title="Accuracy", barmode="group", template="plotly_white")

    elif kind == "accuracy_curves":
        for (run_id, metric), part in frame.groupby(["run_id", "metric"], sort=True):
            fig.add_trace(go.Scatter(x=part["epoch"], y=part["value"], mode="lines+markers",
                                     name=f"{run_id} {metric}"))
        fig.update_layout(title="Accuracy per Epoch", xaxis_title="Epoch",
                          yaxis_title="Accuracy", template="plotly_white")

    else:
        for column in ("variance", "bias", "predicted_diff"):
            fig.add_trace(go.Scatter(x=frame["epoch"], y=frame[column], mode="lines+markers", name=column))
        fig.add_trace(go.Scatter(x=frame["epoch"], y=frame["tau_bar"], mode="lines+markers",
                                 name="tau_bar", yaxis="y2"))
        fig.update_layout(title="Delta Error Terms", xaxis_title="Epoch", yaxis_title="Squared norm",
                          yaxis2=dict(title="tau_bar", overlaying="y", side="right", range=[0, 1]),
                          template="plotly_white")

    return fig


def _styled_table(rows, col_widths):
    from reportlab.lib import colors
    from reportlab.platypus import Table, TableStyle

    table = Table(rows, colWidths=col_widths)
    last_col = len(col_widths) - 1
    table.setStyle(TableStyle([
        ('BACKGROUND', (0, 0), (last_col, 0), colors.lightblue),
        ('TEXTCOLOR', (0, 0), (last_col, 0), colors.whitesmoke),
        ('ALIGN', (0, 0), (last_col, 0), 'CENTER'),
        ('FONTNAME', (0, 0), (last_col, 0), 'Helvetica-Bold'),
        ('GRID', (0, 0), (last_col, -1), 1, colors.black),
        ('ALIGN', (1, 1), (last_col, -1), 'RIGHT'),
    ]))
    return table


def generate_run_report_pdf(manifest, report, records, delta_report=None):
    """
    Generate a run summary in PDF format

    Args:
        manifest (dict): Run manifest as written to manifest.json
        report (dict): Final robustness report as written to report.json
        records (list): Per-epoch metric dicts from metrics.jsonl
        delta_report (dict, optional): Delta-error report of the run

    Returns:
        BytesIO: PDF content as BytesIO object
    """
    from reportlab.lib.pagesizes import letter
    from reportlab.lib.styles import getSampleStyleSheet
    from reportlab.platypus import Paragraph, SimpleDocTemplate, Spacer

    buffer = BytesIO()
    doc = SimpleDocTemplate(
        buffer,
        pagesize=letter,
        rightMargin=72,
        leftMargin=72,
        topMargin=72,
        bottomMargin=72
    )

    styles = getSampleStyleSheet()
    title_style = styles["Heading1"]
    subtitle_style = styles["Heading2"]
    section_style = styles["Heading3"]
    normal_style = styles["Normal"]

    content = []
    content.append(Paragraph(f"Run Report: {manifest.get('run_id', 'run')}", title_style))
    content.append(Paragraph(f"Method: {manifest.get('method', 'unknown')}", subtitle_style))
    content.append(Spacer(1, 12))

    # Run section
    content.append(Paragraph("Run", section_style))
    seeds = manifest.get("seeds", {})
    run_rows = [
        ["Item", "Value"],
        ["Config hash", manifest.get("config_hash", "")[:16]],
        ["Dataset seed", str(seeds.get("dataset", ""))],
        ["Train seed", str(seeds.get("train", ""))],
        ["Started", manifest.get("started_at", "")],
        ["Finished", manifest.get("finished_at", "")],
    ]
    content.append(_styled_table(run_rows, [200, 200]))
    content.append(Spacer(1, 12))

    # Final robustness section
    content.append(Paragraph("Final Robustness", section_style))
    robust_rows = [["Threat Model", "Accuracy"], ["Clean", f"{report.get('clean_acc', 0):.2%}"]]
    per_norm = report.get("per_norm_acc", {})
    for category, norm in TRADEOFF_CATEGORIES:
        if norm in per_norm:
            robust_rows.append([category, f"{per_norm[norm]:.2%}"])
    robust_rows.append(["Union", f"{report.get('union_acc', 0):.2%}"])
    content.append(_styled_table(robust_rows, [300, 100]))
    content.append(Spacer(1, 12))

    # Per-epoch section
    if records:
        content.append(Paragraph("Per-Epoch Metrics", section_style))
        epoch_rows = [["Epoch", "Phase", "Loss", "Clean", "Union"]]
        for record in records:
            epoch_rows.append([
                str(record["epoch"]),
                record["phase"],
                f"{record['train_loss']:.4f}",
                f"{record['clean_acc']:.2%}",
                f"{record['union_acc']:.2%}",
            ])
        content.append(_styled_table(epoch_rows, [60, 80, 90, 85, 85]))
        content.append(Spacer(1, 12))

    if delta_report:
        content.append(Paragraph("Delta Error Terms", section_style))
        delta_rows = [
            ["Term", "Value"],
            ["Variance", f"{delta_report['variance']:.4g}"],
            ["Bias", f"{delta_report['bias']:.4g}"],
            ["tau_bar", f"{delta_report['tau_bar']:.4f}"],
            ["Predicted AT - GP", f"{delta_report['predicted_diff']:.4g}"],
        ]
        content.append(_styled_table(delta_rows, [300, 100]))

    # Add notes
    content.append(Spacer(1, 24))
    content.append(Paragraph("Notes:", subtitle_style))
    content.append(Paragraph("1. Robust accuracy counts a sample only if its clean prediction is correct.",
                             normal_style))
    content.append(Paragraph("2. Union accuracy requires robustness against every configured attack.",
                             normal_style))
    content.append(Paragraph(f"3. Generated on: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}", normal_style))

    doc.build(content)
    buffer.seek(0)
    logger.debug("Built run report PDF (%d bytes)", buffer.getbuffer().nbytes)
    return buffer
