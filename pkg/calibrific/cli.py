"""
Command line interface.

Exit codes: 0 success, 1 usage error, 2 invalid input, 3 runtime failure.
"""
import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, NoReturn, Optional, Sequence

from marshmallow import ValidationError

from . import calibrators, diagram
from .dataset_loader import (
    correctness,
    dump_covariates,
    dump_dataset,
    load_covariates,
    load_dataset,
    load_features,
    load_texts,
    stratified_split,
)
from .distill import default_class_count, distill_pipeline
from .elicit import AuthenticationError, ElicitConfig, elicit_dataset
from .metrics import macro_average, metric_report, reliability_bins, t_ece
from .prompts import ConstructPrompt
from .proxies import attach_proxy
from .regress import (
    attenuation_dataset,
    attenuation_experiment,
    confidence_filter,
    stance_regression,
)
from .schema import (
    AttenuationReportSchema,
    AuditReportSchema,
    CalibrationComparisonSchema,
    CalibratorModelSchema,
    DistillReportSchema,
    MetricReportSchema,
    RegressionReportSchema,
    StudentModelSchema,
)
from .settings import config
from .synth import MiscalibrationProfile, generate
from .types import (
    Dataset,
    DegenerateFitError,
    DegenerateRegressorError,
    EmptyInputError,
    InsufficientDataError,
    MetricReport,
    ProxyMethod,
    ToleranceConfig,
    TrainConfig,
    UndefinedCorrelationError,
)


LOG = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3

RUNTIME_ERRORS = (
    AuthenticationError,
    DegenerateFitError,
    DegenerateRegressorError,
    EmptyInputError,
    InsufficientDataError,
    UndefinedCorrelationError,
)


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def write_json(data: Any, path: Optional[Path]) -> None:
    text = json.dumps(data, indent=2, sort_keys=True)
    if path is None:
        print(text)
    else:
        Path(path).write_text(text + "\n", encoding="utf-8")
        LOG.info(f"Report written to {path}.")


def percent_threshold(value: float) -> float:
    """
    Thresholds are given on the 0-100 scale of elicited confidences.
    """
    if not 0 <= value <= 100:
        raise ValidationError("Threshold must be within 0-100.", field_name="threshold")
    return value / 100


def tolerance_from(args: argparse.Namespace, epsilon: Optional[float] = None):
    return ToleranceConfig.default(
        epsilon=epsilon if epsilon is not None else args.epsilon, num_bins=args.bins
    )


def read_dataset(path: Path, args: argparse.Namespace) -> Dataset:
    return load_dataset(
        path,
        format=args.format,
        confidence_scale=args.confidence_scale,
        scale_max=config.tolerance.scale_max,
    )


def cmd_audit(args: argparse.Namespace) -> int:
    datasets = [read_dataset(path, args) for path in args.inputs]
    model = None
    if args.calibrator:
        model = CalibratorModelSchema().load(
            json.loads(Path(args.calibrator).read_text(encoding="utf-8"))
        )
    epsilons: List[float] = args.epsilon or [config.tolerance.epsilon]

    reports = []
    for epsilon in epsilons:
        tol = tolerance_from(args, epsilon)
        for dataset in datasets:
            audited = attach_proxy(dataset, args.proxy, tol) if args.proxy else dataset
            if model is not None:
                audited = calibrators.apply(model, audited)
            reports.append(metric_report(audited, tol))

    if len(reports) == 1:
        data = MetricReportSchema().dump(reports[0])
    else:
        macro = [
            macro_average([r for r in reports if r.epsilon == epsilon])
            for epsilon in dict.fromkeys(r.epsilon for r in reports)
        ]
        data = AuditReportSchema().dump({"reports": reports, "macro": macro})

    if args.diagram:
        draw_audit_diagrams(reports, args.diagram)
    write_json(data, args.output)
    return EXIT_OK


def draw_audit_diagrams(reports: List[MetricReport], target: Path) -> None:
    """
    A single report is drawn to `target`, several go into the `target`
    directory as `<dataset>-eps<epsilon>.svg`.
    """
    if len(reports) == 1:
        report = reports[0]
        diagram.reliability_diagram(
            report.bins, target, title=report.dataset, t_ece=report.t_ece
        )
        return

    directory = Path(target)
    directory.mkdir(parents=True, exist_ok=True)
    for report in reports:
        diagram.reliability_diagram(
            report.bins,
            directory / f"{report.dataset}-eps{report.epsilon:g}.svg",
            title=report.dataset,
            t_ece=report.t_ece,
        )


def cmd_calibrate(args: argparse.Namespace) -> int:
    tol = tolerance_from(args)
    if args.input:
        train, test = stratified_split(
            read_dataset(args.input, args), args.split, seed=args.seed
        )
    elif args.train and args.test:
        train, test = read_dataset(args.train, args), read_dataset(args.test, args)
    else:
        raise UsageError("Use --input or both --train and --test.")

    comparison = calibrators.compare_calibrators(train, test, tol)

    if args.output_dir:
        directory = Path(args.output_dir)
        directory.mkdir(parents=True, exist_ok=True)
        for name, model in comparison.models.items():
            write_json(CalibratorModelSchema().dump(model), directory / f"{name}.json")

    if args.diagram_dir:
        directory = Path(args.diagram_dir)
        directory.mkdir(parents=True, exist_ok=True)
        variants = {"original": test}
        for name, model in comparison.models.items():
            variants[name] = calibrators.apply(model, test)
        for name, variant in variants.items():
            diagram.reliability_diagram(
                reliability_bins(variant, tol),
                directory / f"{name}.svg",
                title=name,
                t_ece=t_ece(variant, tol),
            )

    write_json(CalibrationComparisonSchema().dump(comparison), args.report)
    if not comparison.models:
        LOG.error("Every calibrator failed.")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_distill(args: argparse.Namespace) -> int:
    dataset = read_dataset(args.input, args)
    features = load_features(args.features, dataset.ids)
    k = args.k or default_class_count(dataset.name)
    cfg = TrainConfig.default(
        epochs=args.epochs,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        temperature=args.temperature,
        grad_clip=args.grad_clip,
        split_fraction=args.split_fraction,
        seed=args.seed,
        weight_decay=args.weight_decay,
        warmup_fraction=args.warmup_fraction,
    )
    report = distill_pipeline(dataset, features, k, cfg, tolerance_from(args))

    if args.model_output and report.model is not None:
        write_json(StudentModelSchema().dump(report.model), args.model_output)
    if args.diagram_dir:
        directory = Path(args.diagram_dir)
        directory.mkdir(parents=True, exist_ok=True)
        for role, metrics in (("teacher", report.teacher), ("student", report.student)):
            diagram.reliability_diagram(
                metrics.bins, directory / f"{role}.svg", title=role, t_ece=metrics.t_ece
            )

    write_json(DistillReportSchema().dump(report), args.report)
    return EXIT_OK


def cmd_regress(args: argparse.Namespace) -> int:
    dataset = read_dataset(args.input, args)
    covariates = load_covariates(args.covariates)
    threshold = percent_threshold(args.threshold)
    tol = tolerance_from(args)

    conditions: List[Dict[str, Any]] = []
    for condition, subset, condition_threshold in (
        ("unfiltered", dataset, 0.0),
        ("filtered", confidence_filter(dataset, threshold), threshold),
    ):
        result, unmatched = stance_regression(subset, covariates)
        accuracy = (
            float(correctness(subset, tol.epsilon).mean()) if len(subset) else None
        )
        conditions.append(
            dict(
                condition=condition,
                threshold=condition_threshold,
                n_records=len(subset),
                tolerance_accuracy=accuracy,
                unmatched_keys=unmatched,
                result=result,
            )
        )

    write_json(RegressionReportSchema().dump({"conditions": conditions}), args.output)
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    if args.attenuation:
        dataset, covariates = attenuation_dataset(
            args.seed, args.days, args.sentences_per_day, noise_sd=args.noise
        )
        dump_dataset(dataset, args.output)
        if args.covariate_output:
            dump_covariates(covariates, args.covariate_output)
        result = attenuation_experiment(
            args.seed,
            args.days,
            args.sentences_per_day,
            percent_threshold(args.threshold),
            tolerance_from(args),
            noise_sd=args.noise,
        )
        write_json(AttenuationReportSchema().dump(result), args.report)
        return EXIT_OK

    profile = MiscalibrationProfile.parse(args.profile)
    epsilon = args.epsilon if args.epsilon is not None else config.tolerance.epsilon
    dataset = generate(
        profile,
        args.n,
        epsilon,
        args.seed,
        scale_max=config.tolerance.scale_max,
        name=args.name,
    )
    dump_dataset(dataset, args.output)
    return EXIT_OK


def cmd_elicit(args: argparse.Namespace) -> int:
    texts = load_texts(args.texts)
    definition = args.definition
    if args.definition_file:
        definition = Path(args.definition_file).read_text(encoding="utf-8").strip()
    if not definition:
        raise UsageError("Use --definition or --definition-file.")

    construct = ConstructPrompt(
        attribute_name=args.attribute,
        definition_text=definition,
        tolerance=args.epsilon if args.epsilon is not None else config.tolerance.epsilon,
    )
    cfg = ElicitConfig.default(
        endpoint_url=args.endpoint,
        model_name=args.model,
        api_key_env_var=args.api_key_env,
        concurrency=args.concurrency,
        retries=args.retries,
        resamples=args.resamples,
    )
    result = asyncio.run(
        elicit_dataset(
            texts,
            construct,
            cfg,
            collect_samples=args.collect_samples,
            name=Path(args.output).stem,
        )
    )
    dump_dataset(result.dataset, args.output)
    write_json(
        {
            "records": len(result.dataset),
            "failures": result.failures,
            "retries": result.retries,
        },
        None,
    )
    return EXIT_OK if len(result.dataset) else EXIT_RUNTIME


def cmd_diagram(args: argparse.Namespace) -> int:
    tol = tolerance_from(args)
    dataset = read_dataset(args.input, args)
    if args.proxy:
        dataset = attach_proxy(dataset, args.proxy, tol)
    diagram.reliability_diagram(
        reliability_bins(dataset, tol),
        args.output,
        title=dataset.name,
        t_ece=t_ece(dataset, tol),
    )
    return EXIT_OK


def _add_input_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--format", choices=("jsonl", "csv"), help="Input format (default: by suffix)"
    )
    parser.add_argument(
        "--confidence-scale",
        choices=("unit", "percent"),
        default="unit",
        help="Scale of the confidence column",
    )


def _add_tolerance_options(parser: argparse.ArgumentParser, repeat=False) -> None:
    parser.add_argument(
        "--epsilon",
        type=float,
        action="append" if repeat else "store",
        help="Tolerance in score units"
        + (", repeat to sweep several tolerances" if repeat else ""),
    )
    parser.add_argument(
        "--bins", type=int, default=None, help="Number of confidence bins"
    )


def _add_proxy_option(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--proxy",
        type=ProxyMethod,
        choices=list(ProxyMethod),
        metavar="{" + ",".join(method.value for method in ProxyMethod) + "}",
        help="Recompute confidence from record evidence",
    )


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="calibrific",
        description="Tolerance-based calibration toolkit for continuous scores.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler: Callable[[argparse.Namespace], int], help: str):
        sub = commands.add_parser(name, help=help, description=help)
        sub.set_defaults(handler=handler)
        return sub

    audit = command("audit", cmd_audit, "Compute T-ECE, Brier and MH of datasets")
    audit.add_argument("inputs", nargs="+", type=Path, help="Dataset files")
    _add_input_options(audit)
    _add_tolerance_options(audit, repeat=True)
    _add_proxy_option(audit)
    audit.add_argument("--calibrator", type=Path, help="Apply a fitted model first")
    audit.add_argument("--diagram", type=Path, help="SVG file (directory if several)")
    audit.add_argument("--output", type=Path, help="Report file (default: stdout)")

    calibrate = command(
        "calibrate", cmd_calibrate, "Fit and compare post-hoc calibrators"
    )
    calibrate.add_argument("--train", type=Path, help="Training dataset")
    calibrate.add_argument("--test", type=Path, help="Evaluation dataset")
    calibrate.add_argument("--input", type=Path, help="Dataset to split instead")
    calibrate.add_argument(
        "--split", type=float, default=0.5, help="Train fraction for --input"
    )
    calibrate.add_argument("--seed", type=int, default=0)
    _add_input_options(calibrate)
    _add_tolerance_options(calibrate)
    calibrate.add_argument("--output-dir", type=Path, help="Fitted model JSON files")
    calibrate.add_argument("--diagram-dir", type=Path, help="Reliability diagrams")
    calibrate.add_argument("--report", type=Path, help="Report file (default: stdout)")

    distill = command(
        "distill", cmd_distill, "Train a soft-label student and compare with teacher"
    )
    distill.add_argument("--input", type=Path, required=True)
    distill.add_argument("--features", type=Path, required=True)
    distill.add_argument("--k", type=int, help="Class count (default: by name)")
    distill.add_argument("--epochs", type=int)
    distill.add_argument("--learning-rate", type=float)
    distill.add_argument("--batch-size", type=int)
    distill.add_argument("--temperature", type=float)
    distill.add_argument("--grad-clip", type=float)
    distill.add_argument("--split-fraction", type=float)
    distill.add_argument("--weight-decay", type=float)
    distill.add_argument("--warmup-fraction", type=float)
    distill.add_argument("--seed", type=int)
    _add_input_options(distill)
    _add_tolerance_options(distill)
    distill.add_argument("--model-output", type=Path, help="Student model JSON")
    distill.add_argument("--diagram-dir", type=Path, help="Reliability diagrams")
    distill.add_argument("--report", type=Path, help="Report file (default: stdout)")

    regress = command(
        "regress", cmd_regress, "Regress daily stance on a covariate with and "
        "without the confidence filter",
    )
    regress.add_argument("--input", type=Path, required=True)
    regress.add_argument(
        "--covariates", type=Path, required=True, help="CSV with group_key,value"
    )
    regress.add_argument(
        "--threshold",
        type=float,
        default=config.regress.threshold * 100,
        help="Confidence threshold on the 0-100 scale",
    )
    _add_input_options(regress)
    _add_tolerance_options(regress)
    regress.add_argument("--output", type=Path, help="Report file (default: stdout)")

    simulate = command("simulate", cmd_simulate, "Generate synthetic datasets")
    simulate.add_argument(
        "--profile",
        default="identity",
        help="identity, overconfident_power:G, underconfident_power:G or base_rate:P",
    )
    simulate.add_argument("--n", type=int, default=config.synth.n)
    simulate.add_argument("--seed", type=int, default=config.synth.seed)
    simulate.add_argument("--name", help="Dataset name and id prefix")
    simulate.add_argument("--output", type=Path, required=True)
    simulate.add_argument(
        "--attenuation",
        action="store_true",
        help="Simulate the daily stance study instead",
    )
    simulate.add_argument("--days", type=int, default=config.regress.n_days)
    simulate.add_argument(
        "--sentences-per-day", type=int, default=config.regress.sentences_per_day
    )
    simulate.add_argument("--noise", type=float, help="Model score noise")
    simulate.add_argument(
        "--threshold", type=float, default=config.regress.threshold * 100
    )
    simulate.add_argument("--covariate-output", type=Path)
    simulate.add_argument("--report", type=Path, help="Report file (default: stdout)")
    _add_tolerance_options(simulate)

    elicit = command("elicit", cmd_elicit, "Collect ratings from a chat endpoint")
    elicit.add_argument(
        "--texts", type=Path, required=True, help="Items with id, text, y_true"
    )
    elicit.add_argument("--attribute", required=True, help="Attribute name")
    elicit.add_argument("--definition", help="Attribute definition")
    elicit.add_argument("--definition-file", type=Path)
    elicit.add_argument("--epsilon", type=float, help="Tolerance in the prompt")
    elicit.add_argument("--endpoint", help="Chat completions URL")
    elicit.add_argument("--model", help="Model name")
    elicit.add_argument("--api-key-env", help="Variable holding the API key")
    elicit.add_argument("--concurrency", type=int)
    elicit.add_argument("--retries", type=int)
    elicit.add_argument("--resamples", type=int)
    elicit.add_argument(
        "--collect-samples",
        action="store_true",
        help="Request every text --resamples times for the resampling proxy",
    )
    elicit.add_argument("--output", type=Path, required=True)

    plot = command("diagram", cmd_diagram, "Draw a reliability diagram")
    plot.add_argument("--input", type=Path, required=True)
    plot.add_argument("--output", type=Path, required=True)
    _add_input_options(plot)
    _add_tolerance_options(plot)
    _add_proxy_option(plot)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger("calibrific").setLevel(logging.DEBUG)

    try:
        return args.handler(args)
    except UsageError as error:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {error}", file=sys.stderr)
        return EXIT_USAGE
    except ValidationError as error:
        LOG.error(f"Invalid input: {error.messages}")
        print(json.dumps({"error": error.messages}, indent=2), file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as error:
        LOG.error(str(error))
        print(json.dumps({"error": str(error)}), file=sys.stderr)
        return EXIT_VALIDATION
    except RUNTIME_ERRORS as error:
        LOG.error(f"{type(error).__name__}: {error}")
        print(json.dumps({"error": str(error)}), file=sys.stderr)
        return EXIT_RUNTIME
