"""Command-line entry point for the federated GLMM engine.

Exit codes: 0 success, 2 usage or parse error, 3 output collision,
4 non-convergence, 5 federation failure.
"""

import argparse
import glob
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError

from config.settings import settings
from src.api.app import StatusServer
from src.models.domain import SiteData
from src.models.schemas import FitResult, RunConfig
from src.pipelines.coordinator import FitFailedError, fit, predict_proba
from src.services import evaluation
from src.services.datagen import (
    DatasetFormatError, GenSetting, generate_setting, parse_stem, read_sites, read_truth, truth_path_for,
)
from src.services.federation_server import CoordinatorSession, run_coordinator
from src.services.model_core import ModelError
from src.services.site_agent import run_site
from src.services.transport import InProcessTransport
from src.services.wire import FederationError
from src.templates.report_templates import CoefficientTableTemplate
from src.utils.logging_config import setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_COLLISION = 3
EXIT_NOT_CONVERGED = 4
EXIT_FEDERATION = 5

POWER_ALPHA_GRID = [round(0.01 * i, 2) for i in range(101)]


class UsageError(Exception):
    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class OutputCollisionError(Exception):
    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class RunManifest(BaseModel):
    """Provenance record written next to every command's outputs."""
    command: str
    config: Dict[str, object]
    config_sha256: str
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)
    runtime_seconds: Optional[float] = None
    details: Dict[str, object] = Field(default_factory=dict)


def file_digest(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_digest(config: Dict[str, object]) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()


def write_manifest(path: Path, command: str, config: Dict[str, object], inputs: Sequence[Path],
                   outputs: Sequence[Path], runtime: Optional[float] = None, **details) -> Path:
    manifest = RunManifest(
        command=command,
        config=config,
        config_sha256=config_digest(config),
        inputs={str(p): file_digest(p) for p in inputs},
        outputs=[str(p) for p in outputs],
        runtime_seconds=runtime,
        details=details,
    )
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"Wrote manifest {path}")
    return path


# Configuration

_FLAG_KEYS = (
    "method", "gh_order", "lambda", "penalize_intercept", "fix_tau", "tau_init", "seed", "split_ratio",
    "theta_tol", "mu_tol", "max_outer_iters", "host", "port", "expected_sites", "round_timeout", "capture_path",
)


def load_run_config(config_path: Optional[str], overrides: Dict[str, object]) -> RunConfig:
    """Merge a KEY=VALUE file with command-line overrides (flags win).

    Raises:
        UsageError: On an unreadable file, unknown keys or invalid values
    """
    values: Dict[str, object] = {}
    if config_path:
        if not Path(config_path).is_file():
            raise UsageError(f"Config file {config_path} does not exist")
        for key, value in dotenv_values(config_path).items():
            values[key.strip().lower().replace("-", "_")] = value
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.model_validate(values)
    except ValidationError as e:
        raise UsageError(f"Invalid configuration: {e}")


def _config_overrides(args: argparse.Namespace) -> Dict[str, object]:
    overrides = {}
    for key in _FLAG_KEYS:
        attr = "lambda_" if key == "lambda" else key
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _config_record(cfg: RunConfig) -> Dict[str, object]:
    return cfg.model_dump(mode="json", by_alias=True)


def _prepare_out_dir(out_dir: Path, names: Sequence[str], force: bool) -> None:
    existing = [n for n in names if (out_dir / n).exists()]
    if existing and not force:
        raise OutputCollisionError(f"{out_dir / existing[0]} already exists (use --force to overwrite)")
    out_dir.mkdir(parents=True, exist_ok=True)


# Outputs shared by fit and coordinate

def fit_output_names(stem: str) -> List[str]:
    return [f"{stem}.result.json", f"{stem}.coefficients.txt", f"{stem}.trajectory.csv",
            f"{stem}.candidates.csv", f"{stem}.manifest.json"]


def write_fit_outputs(result: FitResult, out_dir: Path, stem: str, command: str, cfg: RunConfig,
                      inputs: Sequence[Path]) -> List[Path]:
    result_path = out_dir / f"{stem}.result.json"
    result_path.write_text(result.without_timing().model_dump_json(indent=2) + "\n", encoding="utf-8")

    table_path = out_dir / f"{stem}.coefficients.txt"
    table_path.write_text(
        CoefficientTableTemplate.render(result) + "\n" + CoefficientTableTemplate.render_candidates(result),
        encoding="utf-8",
    )
    trajectory_path = evaluation.write_table(
        out_dir / f"{stem}.trajectory.csv",
        ["lambda", "iteration", "delta_theta", "loglik", "damping", "max_delta_mu"],
        [[result.lambda_hat, t.iteration, t.delta_theta, t.loglik, t.damping, t.max_delta_mu]
         for t in result.trajectory],
    )
    candidates_path = evaluation.write_table(
        out_dir / f"{stem}.candidates.csv",
        ["lambda", "converged", "iterations", "train_loglik", "validation_loglik", "validation_aic",
         "validation_bic", "error"],
        [[c.lambda_value, c.converged, c.iterations, c.train_loglik, c.validation_loglik, c.validation_aic,
          c.validation_bic, c.error] for c in result.candidates],
    )
    outputs = [result_path, table_path, trajectory_path, candidates_path]
    write_manifest(out_dir / f"{stem}.manifest.json", command, _config_record(cfg), inputs, outputs,
                   runtime=result.runtime_seconds, converged=result.converged, lambda_hat=result.lambda_hat,
                   iterations=result.iterations)
    logger.info(f"Wrote {result_path}")
    return outputs


def _fit_exit(result: FitResult) -> int:
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


# Commands

def cmd_generate(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else settings.DEFAULT_SEED
    knobs = dict(seed=seed)
    if args.datasets is not None:
        knobs["num_datasets"] = args.datasets
    setting = GenSetting.from_table(args.setting, **knobs)
    out_dir = Path(args.out)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        raise OutputCollisionError(f"{out_dir} is not empty (use --force to overwrite)")

    files = generate_setting(setting, out_dir)
    outputs = [p for f in files for p in (f.data_path, f.truth_path)]
    write_manifest(out_dir / "manifest.json", "generate", setting.model_dump(mode="json"), [], outputs,
                   datasets=[{"data": str(f.data_path), "truth": str(f.truth_path)} for f in files])
    return EXIT_OK


def _load_sites(path: str, centralized: bool = False) -> List[SiteData]:
    sites = read_sites(path)
    if centralized:
        sites = [SiteData(site_id=1, X=np.vstack([s.X for s in sites]), y=np.concatenate([s.y for s in sites]))]
    return sites


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, _config_overrides(args))
    data_path = Path(args.data)
    stem = args.name or data_path.stem
    sites = _load_sites(args.data, args.centralized)
    out_dir = Path(args.out)
    _prepare_out_dir(out_dir, fit_output_names(stem), args.force)

    model_cfg = cfg.model_config_for_fit()
    transport = InProcessTransport.from_model_config(sites, model_cfg)
    try:
        result = fit(transport, model_cfg, cfg.convergence_config())
    except FitFailedError as e:
        logger.error(e.message)
        result = e.partial
    write_fit_outputs(result, out_dir, stem, "fit", cfg, [data_path])
    return _fit_exit(result)


def cmd_serve_site(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, _config_overrides(args))
    sites = read_sites(args.data)
    if args.site_id is None:
        if len(sites) != 1:
            raise UsageError(f"{args.data} holds {len(sites)} sites; choose one with --site-id")
        site = sites[0]
    else:
        matches = [s for s in sites if s.site_id == args.site_id]
        if not matches:
            raise UsageError(f"{args.data} has no rows for site_id {args.site_id}")
        site = matches[0]
    session = run_site(site, host=cfg.host, port=cfg.port, capture_path=cfg.capture_path)
    if session.result is not None:
        logger.info(f"Site {site.site_id}: received result, lambda={session.result.lambda_hat:g}")
    return EXIT_OK


def cmd_coordinate(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, _config_overrides(args))
    out_dir = Path(args.out)
    _prepare_out_dir(out_dir, fit_output_names(args.name), args.force)

    session = CoordinatorSession(cfg.expected_sites)
    status = None
    status_port = args.status_port if args.status_port is not None else settings.STATUS_PORT
    if status_port:
        status = StatusServer(session, settings.STATUS_HOST, status_port)
        status.start()
    try:
        try:
            result = run_coordinator(
                cfg.model_config_for_fit(), cfg.convergence_config(), cfg.expected_sites,
                host=cfg.host, port=cfg.port, round_timeout=cfg.round_timeout,
                capture_path=cfg.capture_path, session=session,
            )
        except FitFailedError as e:
            logger.error(e.message)
            result = e.partial
    finally:
        if status is not None:
            status.stop()
    write_fit_outputs(result, out_dir, args.name, "coordinate", cfg, [])
    return _fit_exit(result)


def _method_label(result: FitResult) -> str:
    return "la" if result.method == "la" else f"gh{result.gh_order}"


def cmd_evaluate(args: argparse.Namespace) -> int:
    paths = sorted(glob.glob(args.results))
    paths = [p for p in paths if p.endswith(".result.json")]
    if not paths:
        raise UsageError(f"No result files match {args.results!r}")
    truth_dir = Path(args.truth_dir)
    out_dir = Path(args.out)
    names = ["significance.csv", "comparison.csv", "power.csv", "coefficient_error.csv", "roc.csv",
             "roc_summary.csv", "convergence.csv", "manifest.json"]
    _prepare_out_dir(out_dir, names, args.force)

    by_method: Dict[str, Dict[str, list]] = {}
    records: List[evaluation.ConvergenceRecord] = []
    true_beta = None
    inputs: List[Path] = []
    for path in paths:
        try:
            result = FitResult.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValidationError) as e:
            raise UsageError(f"{path}: not a result file ({e})")
        stem = Path(path).name[: -len(".result.json")]
        data_path = truth_dir / f"{stem}.csv"
        truth_path = truth_path_for(data_path)
        if not data_path.is_file() or not truth_path.is_file():
            raise UsageError(f"{path}: no matching data/truth pair {data_path} in {truth_dir}")
        sites = read_sites(data_path)
        _, truth = read_truth(truth_path, sites)
        if truth.true_beta.size != len(result.beta_hat):
            raise UsageError(f"{path}: {len(result.beta_hat)} coefficients but truth {truth_path} has "
                             f"{truth.true_beta.size}")
        if true_beta is None:
            true_beta = truth.true_beta
        elif not np.array_equal(true_beta, truth.true_beta):
            raise UsageError(f"{truth_path}: true coefficients differ from the other datasets")
        inputs += [Path(path), data_path, truth_path]

        label = _method_label(result)
        bucket = by_method.setdefault(label, {"p": [], "beta": [], "scores": [], "labels": []})
        if result.inference_available:
            bucket["p"].append(result.p_values)
        bucket["beta"].append(result.beta_hat)
        for site in sites:
            bucket["scores"].append(predict_proba(result, site))
            bucket["labels"].append(site.y)

        manifest_path = Path(path).with_name(f"{stem}.manifest.json")
        runtime = 0.0
        if manifest_path.is_file():
            runtime = json.loads(manifest_path.read_text(encoding="utf-8")).get("runtime_seconds") or 0.0
        parsed = parse_stem(stem)
        setting = f"setting{parsed[0]}" if parsed else "unknown"
        records.append(evaluation.ConvergenceRecord(label, setting, result.iterations, runtime, result.converged))

    significance_rows, power_rows, error_rows, roc_rows, roc_summary = [], [], [], [], []
    reports = {}
    for label in sorted(by_method):
        bucket = by_method[label]
        if bucket["p"]:
            report = evaluation.significance_confusion(bucket["p"], true_beta, args.alpha)
            reports[label] = report
            significance_rows += list(evaluation.significance_rows(label, report))
            if len(bucket["p"]) >= 2:
                curves = evaluation.empirical_power(bucket["p"], true_beta, POWER_ALPHA_GRID)
                power_rows += list(evaluation.power_rows(label, curves))
        else:
            logger.warning(f"{label}: no result carries p-values, skipping significance metrics")
        error_rows += list(evaluation.error_rows(label, evaluation.coefficient_error(bucket["beta"], true_beta)))
        try:
            roc = evaluation.roc_auc(np.concatenate(bucket["scores"]), np.concatenate(bucket["labels"]))
            roc_rows += list(evaluation.roc_rows(label, roc))
            roc_summary.append(evaluation.roc_summary_row(label, roc))
        except evaluation.UndefinedMetricError as e:
            logger.warning(f"{label}: {e.message}")

    outputs = [
        evaluation.write_table(out_dir / "significance.csv", evaluation.SIGNIFICANCE_HEADER, significance_rows),
        evaluation.write_table(out_dir / "power.csv", evaluation.POWER_HEADER, power_rows),
        evaluation.write_table(out_dir / "coefficient_error.csv", evaluation.ERROR_HEADER, error_rows),
        evaluation.write_table(out_dir / "roc.csv", evaluation.ROC_HEADER, roc_rows),
        evaluation.write_table(out_dir / "roc_summary.csv", evaluation.ROC_SUMMARY_HEADER, roc_summary),
    ]
    if reports:
        table = evaluation.method_comparison_table(reports)
        outputs.append(evaluation.write_table(out_dir / "comparison.csv", table.header(), table.rows()))
    summary = evaluation.convergence_summary(records)
    outputs.append(evaluation.write_table(
        out_dir / "convergence.csv",
        ["method", "setting", "fits", "converged", "mean_iterations", "sd_iterations", "median_iterations",
         "mean_runtime", "sd_runtime"],
        [[s.method, s.setting, s.fits, s.converged, s.mean_iterations, s.sd_iterations, s.median_iterations,
          s.mean_runtime, s.sd_runtime] for s in summary],
    ))
    write_manifest(out_dir / "manifest.json", "evaluate",
                   {"results": args.results, "truth_dir": str(truth_dir), "alpha": args.alpha}, inputs, outputs)
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    try:
        result = FitResult.model_validate_json(Path(args.result).read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        raise UsageError(f"{args.result}: not a result file ({e})")
    sys.stdout.write(CoefficientTableTemplate.render(result))
    if args.candidates:
        sys.stdout.write(CoefficientTableTemplate.render_candidates(result))
    return EXIT_OK


# Argument parsing

def _add_fit_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="KEY=VALUE run-config file")
    parser.add_argument("--method", choices=["la", "gh"])
    parser.add_argument("--gh-order", dest="gh_order", type=int)
    parser.add_argument("--lambda", dest="lambda_", help="'auto' (sweep 0..10) or a fixed value")
    parser.add_argument("--penalize-intercept", dest="penalize_intercept", action="store_true", default=None)
    parser.add_argument("--fix-tau", dest="fix_tau", action="store_true", default=None)
    parser.add_argument("--tau-init", dest="tau_init", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--split-ratio", dest="split_ratio", type=float)
    parser.add_argument("--theta-tol", dest="theta_tol", type=float)
    parser.add_argument("--mu-tol", dest="mu_tol", type=float)
    parser.add_argument("--max-outer-iters", dest="max_outer_iters", type=int)


def _add_endpoint_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--host")
    parser.add_argument("--port", type=int)
    parser.add_argument("--round-timeout", dest="round_timeout", type=float)
    parser.add_argument("--capture", dest="capture_path", help="Write every frame to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedglmm", description="Federated random-intercept logistic GLMM")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Generate the synthetic datasets of one setting")
    p.add_argument("--setting", type=int, required=True, choices=range(1, 9))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--datasets", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("fit", help="Fit in-process, one engine per site_id")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", help="Output file stem (defaults to the data file stem)")
    p.add_argument("--centralized", action="store_true", help="Pool every row into a single site")
    p.add_argument("--force", action="store_true")
    _add_fit_flags(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("serve-site", help="Serve one site's rows to a coordinator")
    p.add_argument("--data", required=True)
    p.add_argument("--site-id", dest="site_id", type=int)
    p.add_argument("--config")
    _add_endpoint_flags(p)
    p.set_defaults(handler=cmd_serve_site)

    p = sub.add_parser("coordinate", help="Coordinate a federated fit over TCP")
    p.add_argument("--sites", dest="expected_sites", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="federated")
    p.add_argument("--status-port", dest="status_port", type=int, help="Serve GET /health and /session")
    p.add_argument("--force", action="store_true")
    _add_fit_flags(p)
    _add_endpoint_flags(p)
    p.set_defaults(handler=cmd_coordinate)

    p = sub.add_parser("evaluate", help="Compute metrics over result files")
    p.add_argument("--results", required=True, help="Glob of *.result.json files")
    p.add_argument("--truth-dir", dest="truth_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("report", help="Print a result file as a coefficient table")
    p.add_argument("--result", required=True)
    p.add_argument("--candidates", action="store_true")
    p.set_defaults(handler=cmd_report)
    return parser


def _log_role(args: argparse.Namespace) -> str:
    if args.command == "serve-site" and args.site_id is not None:
        return f"site-{args.site_id}"
    return args.command


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(log_level=settings.LOG_LEVEL, log_format=settings.LOG_FORMAT, role=_log_role(args))
    started = time.perf_counter()
    try:
        code = args.handler(args)
    except (UsageError, DatasetFormatError) as e:
        logger.error(e.message)
        return EXIT_USAGE
    except ValueError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except OutputCollisionError as e:
        logger.error(e.message)
        return EXIT_COLLISION
    except FederationError as e:
        logger.error(f"Federation failure ({e.code}): {e.message}")
        return EXIT_FEDERATION
    except ModelError as e:
        logger.error(f"Model failure: {e.message}")
        return EXIT_NOT_CONVERGED
    except KeyboardInterrupt:
        logger.error("Interrupted")
        return EXIT_FEDERATION
    logger.info(f"{args.command} finished with exit code {code} in {time.perf_counter() - started:.2f} s")
    return code


if __name__ == "__main__":
    sys.exit(main())
