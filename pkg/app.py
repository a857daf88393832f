import argparse
import json
import logging
import sys

from components.delta_analysis import analyze_run
from components.experiment_runner import evaluate_checkpoint, run_experiment
from components.figure_data import emit_figure_data
from components.keypair import keypair_summary, preset_summary
from components.report_generator import generate_run_report
from utils.config_utils import ConfigError, parse_key_pair
from utils.data_utils import IdxParseError
from utils.lp_utils import KEYPAIR_PRESETS
from utils.report_utils import FIGURE_KINDS
from utils.tensor_utils import CheckpointError

logger = logging.getLogger("ramp_kit")

EXIT_RUNTIME = 1
EXIT_USAGE = 2
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _number(text):
    """Float argument that also accepts fractions such as 8/255."""
    try:
        if "/" in text:
            numerator, denominator = text.split("/", 1)
            return float(numerator) / float(denominator)
        return float(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _emit(payload):
    print(json.dumps(payload, sort_keys=True))


def cmd_train(args):
    manifest = run_experiment(args.config)
    _emit(manifest.to_dict())


def cmd_eval(args):
    report = evaluate_checkpoint(args.checkpoint, args.config)
    _emit(report.to_dict())


def cmd_delta_analysis(args):
    report = analyze_run(args.run_dir, finite_m=args.finite_m)
    summary = report.to_dict()
    summary.pop("per_snapshot")
    _emit(summary)


def cmd_figure_data(args):
    path = emit_figure_data(args.run_dirs, args.kind, args.out, html=args.html)
    _emit({"kind": args.kind, "csv": str(path)})


def cmd_keypair(args):
    try:
        override = parse_key_pair(args.override) if args.override else None
    except ValueError as exc:
        raise ConfigError(str(exc), key="--override") from None
    if args.preset:
        _emit(preset_summary(args.preset, override))
        return
    values = (args.eps1, args.eps2, args.epsinf, args.dim)
    if any(value is None for value in values):
        raise ConfigError("keypair needs eps1 eps2 epsinf dim, or --preset")
    _emit(keypair_summary(*values, override=override))


def cmd_report(args):
    path = generate_run_report(args.run_dir, args.out)
    _emit({"pdf": str(path)})


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ramp-kit",
        description="Multi-norm adversarial training with logit pairing and gradient projection.",
    )
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging verbosity (stderr)")
    verbs = parser.add_subparsers(dest="verb", required=True)

    train = verbs.add_parser("train", help="Run a configured experiment")
    train.add_argument("config", help="Path to a section.key = value config file")
    train.set_defaults(handler=cmd_train)

    evaluate = verbs.add_parser("eval", help="Evaluate a checkpoint against the configured attacks")
    evaluate.add_argument("checkpoint")
    evaluate.add_argument("config")
    evaluate.set_defaults(handler=cmd_eval)

    delta = verbs.add_parser("delta-analysis", help="Estimate the delta-error terms of a finished run")
    delta.add_argument("run_dir")
    delta.add_argument("--finite-m", action="store_true",
                       help="Scale the variance term of the predicted difference by (1 + 1/m)")
    delta.set_defaults(handler=cmd_delta_analysis)

    figure = verbs.add_parser("figure-data", help="Emit the CSV table behind a figure")
    figure.add_argument("kind", choices=FIGURE_KINDS)
    figure.add_argument("run_dirs", nargs="*")
    figure.add_argument("--out", required=True, help="CSV destination")
    figure.add_argument("--html", action="store_true", help="Also write a plotly HTML rendering")
    figure.set_defaults(handler=cmd_figure_data)

    keypair = verbs.add_parser("keypair", help="Key tradeoff pair by ball volume")
    keypair.add_argument("eps1", nargs="?", type=_number)
    keypair.add_argument("eps2", nargs="?", type=_number)
    keypair.add_argument("epsinf", nargs="?", type=_number)
    keypair.add_argument("dim", nargs="?", type=int)
    keypair.add_argument("--preset", choices=sorted(KEYPAIR_PRESETS))
    keypair.add_argument("--override", help="Explicit pair such as linf,l1")
    keypair.set_defaults(handler=cmd_keypair)

    report = verbs.add_parser("report", help="Render a finished run as PDF")
    report.add_argument("run_dir")
    report.add_argument("--out")
    report.set_defaults(handler=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, stream=sys.stderr)

    try:
        args.handler(args)
    except (ConfigError, IdxParseError, CheckpointError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logger.error("%s failed: %s", args.verb, exc)
        logger.debug("Traceback", exc_info=True)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
