import json
import logging
from pathlib import Path

from components.delta_analysis import DELTA_REPORT_FILE
from components.experiment_runner import METRICS_FILE, REPORT_FILE
from utils.report_utils import FIGURE_KINDS, figure_table, generate_figure, read_jsonl

logger = logging.getLogger(__name__)


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise FileNotFoundError(f"{path} is missing; run the producing verb first")
    return json.loads(path.read_text(encoding="utf-8"))


def collect_runs(run_dirs, kind):
    """(run_id, payload) pairs holding the file each figure kind is built from."""
    runs = []
    for run_dir in map(Path, run_dirs):
        if kind == "tradeoff_bars":
            payload = _read_json(run_dir / REPORT_FILE)
        elif kind == "accuracy_curves":
            if not (run_dir / METRICS_FILE).is_file():
                raise FileNotFoundError(f"{run_dir / METRICS_FILE} is missing; run the train verb first")
            payload = read_jsonl(run_dir / METRICS_FILE)
        else:
            payload = _read_json(run_dir / DELTA_REPORT_FILE)
        runs.append((run_dir.name, payload))
    return runs


def emit_figure_data(run_dirs, kind, out_path, html=False):
    """
    Write the tidy data table behind one figure as CSV.

    Args:
        run_dirs (list): Finished run directories; may be empty
        kind (str): tradeoff_bars, accuracy_curves or error_terms
        out_path (str): CSV destination
        html (bool): Also render the table with plotly next to the CSV

    Returns:
        Path: The CSV written
    """
    if kind not in FIGURE_KINDS:
        raise ValueError(f"unknown figure kind {kind!r}; expected one of {', '.join(FIGURE_KINDS)}")
    frame = figure_table(kind, collect_runs(run_dirs, kind))

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out_path, index=False)
    logger.info("Wrote %d %s rows to %s", len(frame), kind, out_path)

    if html:
        html_path = out_path.with_suffix(".html")
        generate_figure(kind, frame).write_html(str(html_path), include_plotlyjs="cdn")
        logger.info("Rendered %s", html_path)
    return out_path
