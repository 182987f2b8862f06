import argparse
import logging
import sys
from typing import Dict, List, Optional

from pydantic import ValidationError

from app.core.config import RunConfig, settings
from app.core.estimator import contrast, estimate
from app.core.model import get_conditional_model, list_models
from app.core.normalizer import Dataset, ingest_csv
from app.core.resilience import HdQuantileError, InputError, StageError
from app.plugins.reports import ReportManager
from app.services.aipw import estimate_aipw
from app.simulation.dgp import DgpKind, DgpSpec
from app.simulation.study import desk_grid, full_grid, run_study
from app.utils.reporter import contrast_report, estimate_report, simulation_report, to_jsonable

logger = logging.getLogger(__name__)

_ESTIMATOR_SETS = {
    "proposed": ("proposed",),
    "aipw": ("aipw",),
    "both": ("proposed", "aipw"),
    "all": ("proposed", "aipw", "pilot"),
}


def _setup_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr)


def _lambda_grid(raw: Optional[str]) -> Optional[List[float]]:
    if not raw:
        return None
    try:
        return [float(v) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise InputError(f"--lambda-grid must be comma-separated numbers: {e}") from e


def _run_config(args, estimator: str) -> RunConfig:
    try:
        return RunConfig(
            tau_level=args.tau, alpha=args.alpha, seed=args.seed, c0=args.c0,
            cv_folds=args.folds, lambda_grid=_lambda_grid(args.lambda_grid),
            standardize_response=getattr(args, "standardize_response", False),
            expand_interactions=getattr(args, "expand_interactions", False),
            estimator=estimator,
            weights_route=getattr(args, "weights_route", "primal"),
            zeta_strategy=getattr(args, "zeta_strategy", None) or settings.zeta_strategy)
    except ValidationError as e:
        raise InputError(f"invalid settings: {e}") from e


def cmd_estimate(args) -> Dict:
    config = _run_config(args, args.estimator)
    data = ingest_csv(args.data, args.response, args.missing_token,
                      expand=config.expand_interactions)
    model = get_conditional_model(args.model)
    logger.info(f"[CLI] model: {model.get_status()}")
    proposed = aipw = None
    if config.estimator in ("proposed", "both"):
        proposed = estimate(data, model, config)
    if config.estimator in ("aipw", "both"):
        aipw = estimate_aipw(data, model, config)
    return estimate_report(proposed, aipw)


def cmd_contrast(args) -> Dict:
    config = _run_config(args, "proposed")
    groups = ingest_csv(args.data, args.response, args.missing_token, group_column=args.group,
                        expand=config.expand_interactions)
    if len(groups) != 2:
        raise InputError(f"contrast needs exactly two groups in '{args.group}', "
                         f"found {sorted(groups)}")
    (label0, data0), (label1, data1) = sorted(groups.items())
    result = contrast(data0, data1, get_conditional_model(args.model), config,
                      labels=(label0, label1))
    return contrast_report(result)


def cmd_simulate(args) -> Dict:
    config = _run_config(args, "proposed")
    if args.full_grid:
        shapes = full_grid()
    elif args.desk_grid:
        shapes = desk_grid()
    else:
        shapes = [(args.n, args.p)]
    estimators = _ESTIMATOR_SETS[args.estimator]
    studies = []
    for n, p in shapes:
        try:
            spec = DgpSpec(kind=DgpKind(f"DGP{args.dgp}"), n=n, p=p, tau_level=config.tau_level)
        except ValidationError as e:
            raise InputError(f"invalid design: {e}") from e
        studies.append(run_study(spec, args.reps, args.seed, estimators, config,
                                 n_workers=args.workers))
    return simulation_report(studies, args.seed)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tau", type=float, default=0.5, help="quantile level")
    common.add_argument("--alpha", type=float, default=0.05, help="1 - confidence level")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--c0", type=float, default=settings.c0,
                        help="starting constant of the balance cap")
    common.add_argument("--folds", type=int, default=settings.cv_folds)
    common.add_argument("--lambda-grid", default=None,
                        help="comma-separated lasso penalties (default: data-driven grid)")
    common.add_argument("--json", action="store_true", help="emit the structured report")
    common.add_argument("--output", default=None, help="write the report here instead of stdout")
    common.add_argument("--log-level", default=settings.log_level)
    models = ", ".join(m["name"] for m in list_models())
    common.add_argument("--model", default="normal", help=f"conditional model ({models})")

    data_args = argparse.ArgumentParser(add_help=False)
    data_args.add_argument("--data", required=True, help="CSV file with a header row")
    data_args.add_argument("--response", default="y", help="response column")
    data_args.add_argument("--missing-token", default="",
                           help="marker of an unobserved response (empty cells always are)")
    data_args.add_argument("--expand-interactions", action="store_true")
    data_args.add_argument("--standardize-response", action="store_true")
    data_args.add_argument("--weights-route", choices=["primal", "dual"], default="primal")
    data_args.add_argument("--zeta-strategy", choices=["adaptive", "fixed"], default=None)

    parser = argparse.ArgumentParser(
        prog="hdquantile",
        description="Debiased quantile estimation with responses missing at random.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_est = sub.add_parser("estimate", parents=[common, data_args],
                           help="estimate the tau-quantile of the response")
    p_est.add_argument("--estimator", choices=["proposed", "aipw", "both"], default="proposed")
    p_est.set_defaults(handler=cmd_estimate)

    p_con = sub.add_parser("contrast", parents=[common, data_args],
                           help="difference of group quantiles (group 1 minus group 0)")
    p_con.add_argument("--group", required=True, help="column holding the two group labels")
    p_con.set_defaults(handler=cmd_contrast)

    p_sim = sub.add_parser("simulate", parents=[common], help="Monte Carlo study")
    p_sim.add_argument("--dgp", type=int, choices=[1, 2], default=2)
    p_sim.add_argument("--n", type=int, default=400)
    p_sim.add_argument("--p", type=int, default=100)
    p_sim.add_argument("--reps", type=int, default=300)
    p_sim.add_argument("--estimator", choices=sorted(_ESTIMATOR_SETS), default="both")
    p_sim.add_argument("--workers", type=int, default=settings.n_workers)
    grid = p_sim.add_mutually_exclusive_group()
    grid.add_argument("--full-grid", action="store_true",
                      help="n in {200, 400, 800} and p in {n/4, n/2, n, 2n}")
    grid.add_argument("--desk-grid", action="store_true",
                      help="n in {200, 400} and p in {n/4, n/2}")
    p_sim.set_defaults(handler=cmd_simulate)
    return parser


def _error_report(e: HdQuantileError) -> Dict:
    doc = {"kind": "error", "message": str(e), "exit_code": e.exit_code}
    if isinstance(e, StageError):
        doc["stage"] = e.stage
        doc["diagnostics"] = to_jsonable(e.diagnostics)
    return doc


def main(argv: Optional[List[str]] = None) -> int:
    """Exit codes: 0 success, 1 input error, 2 solver failure."""
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    manager = ReportManager("json" if args.json else "text")
    try:
        report = args.handler(args)
    except HdQuantileError as e:
        stage = f" (stage: {e.stage})" if isinstance(e, StageError) else ""
        logger.error(f"[CLI] {args.command} failed{stage}: {e}")
        if isinstance(e, StageError) and e.diagnostics:
            logger.error(f"[CLI] partial diagnostics: {to_jsonable(e.diagnostics)}")
        if args.json:
            sys.stdout.write(ReportManager("json").render(_error_report(e)))
        return e.exit_code

    rendered = manager.dispatch(report, args.output)
    if args.output is None:
        sys.stdout.write(rendered)
    return 0


if __name__ == "__main__":
    sys.exit(main())
