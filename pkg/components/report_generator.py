import json
import logging
from pathlib import Path

from components.delta_analysis import DELTA_REPORT_FILE
from components.experiment_runner import METRICS_FILE, REPORT_FILE, RunManifest
from utils.report_utils import generate_run_report_pdf, read_jsonl

logger = logging.getLogger(__name__)

PDF_FILE = "report.pdf"


def generate_run_report(run_dir, out_path=None):
    """
    Render a finished run as a PDF summary.

    Args:
        run_dir (str): Directory written by the train verb
        out_path (str, optional): Destination; defaults to <run_dir>/report.pdf

    Returns:
        Path: The PDF written
    """
    run_dir = Path(run_dir)
    manifest = RunManifest.load(run_dir)
    report_path = run_dir / REPORT_FILE
    if not report_path.is_file():
        raise FileNotFoundError(f"{report_path} is missing; the run did not finish")
    report = json.loads(report_path.read_text(encoding="utf-8"))
    records = read_jsonl(run_dir / METRICS_FILE)

    delta_report = None
    if (run_dir / DELTA_REPORT_FILE).is_file():
        delta_report = json.loads((run_dir / DELTA_REPORT_FILE).read_text(encoding="utf-8"))

    pdf_buffer = generate_run_report_pdf(manifest.to_dict(), report, records, delta_report)
    out_path = Path(out_path) if out_path else run_dir / PDF_FILE
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(pdf_buffer.getvalue())
    logger.info("Wrote run report %s", out_path)
    return out_path
