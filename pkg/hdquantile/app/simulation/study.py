import logging
import math
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel

from app.core.config import RunConfig, settings
from app.core.estimator import estimate, pilot_quantile
from app.core.lasso import fit_lasso_cv
from app.core.model import ConditionalModel, get_conditional_model
from app.core.normalizer import Dataset
from app.core.resilience import FailureBudget, HdQuantileError, InputError, StudyAbortedError
from app.services.aipw import estimate_aipw
from app.simulation.dgp import DgpSpec, make_dataset

logger = logging.getLogger(__name__)


class ReplicationStatus(str, Enum):
    COMPLETED = "completed"
    FAILED = "failed"


class ReplicationRecord(BaseModel):
    rep: int
    estimator: str
    status: ReplicationStatus = ReplicationStatus.COMPLETED
    q_hat: Optional[float] = None
    sigma_hat: Optional[float] = None
    ci_lower: Optional[float] = None
    ci_upper: Optional[float] = None
    covered: Optional[bool] = None
    c_used: Optional[float] = None
    zeta: Optional[float] = None
    error: Optional[str] = None


class McReport(BaseModel):
    estimator: str
    dgp: str
    n: int
    p: int
    tau_level: float
    q0: float
    bias: float
    sd: float
    rmse: float
    cp: Optional[float] = None
    esd: Optional[float] = None
    n_reps: int
    n_failed: int = 0
    failures: List[str] = []
    per_rep: List[ReplicationRecord] = []

    def rmse_identity_gap(self) -> float:
        """|RMSE^2 - (Bias^2 + SD^2 (R-1)/R)| over the completed replications."""
        r = self.n_reps - self.n_failed
        if r < 1:
            return 0.0
        return abs(self.rmse ** 2 - (self.bias ** 2 + self.sd ** 2 * (r - 1) / r))


# An estimator maps (data, model, config) to the fields of a ReplicationRecord.
EstimatorFn = Callable[[Dataset, ConditionalModel, RunConfig], Dict[str, Optional[float]]]


def _run_proposed(data: Dataset, model: ConditionalModel, config: RunConfig):
    est = estimate(data, model, config)
    return {"q_hat": est.q_hat, "sigma_hat": est.sigma_hat, "ci_lower": est.ci_lower,
            "ci_upper": est.ci_upper, "c_used": est.weights.c_used, "zeta": est.weights.zeta}


def _run_aipw(data: Dataset, model: ConditionalModel, config: RunConfig):
    est = estimate_aipw(data, model, config)
    return {"q_hat": est.q_hat, "sigma_hat": est.sigma_hat, "ci_lower": est.ci_lower,
            "ci_upper": est.ci_upper}


def _run_pilot(data: Dataset, model: ConditionalModel, config: RunConfig):
    fit = fit_lasso_cv(data, model, config.lambda_grid, config.cv_folds, config.seed)
    return {"q_hat": pilot_quantile(data, model, fit.beta, config.tau_level)}


_ESTIMATORS: Dict[str, EstimatorFn] = {
    "proposed": _run_proposed,
    "aipw": _run_aipw,
    "pilot": _run_pilot,
}


def register_estimator(name: str, fn: EstimatorFn):
    """Registered estimators are visible to in-process runs (n_workers=1)."""
    _ESTIMATORS[name] = fn
    logger.info(f"[STUDY] Registered estimator: {name}")


def list_estimators() -> List[str]:
    return list(_ESTIMATORS)


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent stream per (seed, rep); a rep is reproducible on its own."""
    return np.random.default_rng(np.random.SeedSequence([seed, rep]))


def _replication_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, rep, 1]).generate_state(1)[0])


def run_replication(spec: DgpSpec, rep: int, seed: int, estimators: Sequence[str],
                    config: Optional[RunConfig] = None) -> List[ReplicationRecord]:
    config = config or RunConfig(tau_level=spec.tau_level)
    config = config.model_copy(update={"seed": _replication_seed(seed, rep)})
    model = get_conditional_model("normal")
    records = []
    try:
        data = make_dataset(spec, replication_rng(seed, rep))
    except HdQuantileError as e:
        return [ReplicationRecord(rep=rep, estimator=name, status=ReplicationStatus.FAILED,
                                  error=f"data: {e}") for name in estimators]

    for name in estimators:
        fn = _ESTIMATORS.get(name)
        if fn is None:
            raise InputError(f"Unknown estimator: {name}. Available: {list_estimators()}")
        try:
            fields = fn(data, model, config)
        except (HdQuantileError, ArithmeticError, np.linalg.LinAlgError, ValueError) as e:
            logger.warning(f"[STUDY] rep {rep} {name} failed: {e}")
            records.append(ReplicationRecord(rep=rep, estimator=name,
                                             status=ReplicationStatus.FAILED, error=str(e)))
            continue
        record = ReplicationRecord(rep=rep, estimator=name, **fields)
        if record.ci_lower is not None and record.ci_upper is not None:
            record.covered = bool(record.ci_lower <= spec.q0 <= record.ci_upper)
        records.append(record)
    return records


def aggregate(records: Sequence[ReplicationRecord], spec: DgpSpec, estimator: str,
              n_reps: int) -> McReport:
    """Ordered reduction over completed replications of one estimator."""
    records = sorted(records, key=lambda r: r.rep)
    done = [r for r in records if r.status == ReplicationStatus.COMPLETED]
    failed = [r for r in records if r.status == ReplicationStatus.FAILED]
    if not done:
        raise StudyAbortedError(f"estimator '{estimator}' failed in every replication")
    q = np.array([r.q_hat for r in done], dtype=float)
    err = q - spec.q0
    sd = float(np.std(q, ddof=1)) if q.size > 1 else 0.0
    with_ci = [r for r in done if r.covered is not None]
    cp = float(np.mean([r.covered for r in with_ci])) if with_ci else None
    sigmas = [r.sigma_hat for r in done if r.sigma_hat is not None]
    esd = float(np.mean(sigmas) / math.sqrt(spec.n)) if sigmas else None
    return McReport(
        estimator=estimator, dgp=spec.kind.value, n=spec.n, p=spec.p,
        tau_level=spec.tau_level, q0=spec.q0, bias=float(np.mean(err)), sd=sd,
        rmse=float(math.sqrt(np.mean(err * err))), cp=cp, esd=esd, n_reps=n_reps,
        n_failed=len(failed), failures=[f"rep {r.rep}: {r.error}" for r in failed],
        per_rep=records)


def run_study(spec: DgpSpec, n_reps: int, seed: int = 0,
              estimators: Sequence[str] = ("proposed", "aipw"),
              config: Optional[RunConfig] = None,
              n_workers: Optional[int] = None) -> Dict[str, McReport]:
    """
    Seeded Monte Carlo study. Replication r draws its data from the stream
    (seed, r); the failure budget aborts the study once more than the allowed
    fraction of replications fail for any estimator.
    """
    if n_reps < 1:
        raise InputError(f"n_reps must be at least 1, got {n_reps}")
    unknown = [e for e in estimators if e not in _ESTIMATORS]
    if unknown:
        raise InputError(f"Unknown estimator(s): {unknown}. Available: {list_estimators()}")
    n_workers = n_workers or settings.n_workers
    budgets = {name: FailureBudget(name, settings.failure_budget, n_reps) for name in estimators}
    logger.info(f"[STUDY] {spec.kind.value} n={spec.n} p={spec.p}: {n_reps} reps, "
                f"estimators={list(estimators)}, workers={n_workers}")

    def tally(rep_records: List[ReplicationRecord]):
        for record in rep_records:
            budget = budgets[record.estimator]
            if record.status == ReplicationStatus.COMPLETED:
                budget.record_success()
            else:
                budget.record_failure()
            if budget.tripped:
                raise StudyAbortedError(
                    f"estimator '{record.estimator}' exceeded the failure budget: "
                    f"{budget.get_status()}")

    if n_workers == 1:
        batches = []
        for rep in range(n_reps):
            rep_records = run_replication(spec, rep, seed, estimators, config)
            tally(rep_records)
            batches.append(rep_records)
    else:
        batches = Parallel(n_jobs=n_workers)(
            delayed(run_replication)(spec, rep, seed, estimators, config)
            for rep in range(n_reps))
        for rep_records in batches:
            tally(rep_records)

    flat = [r for batch in batches for r in batch]
    reports = {}
    for name in estimators:
        reports[name] = aggregate([r for r in flat if r.estimator == name], spec, name, n_reps)
        logger.info(f"[STUDY] {name}: bias={reports[name].bias:.4f} sd={reports[name].sd:.4f} "
                    f"cp={reports[name].cp}")
    return reports


def full_grid() -> List[Tuple[int, int]]:
    return [(n, p) for n in (200, 400, 800) for p in (n // 4, n // 2, n, 2 * n)]


def desk_grid() -> List[Tuple[int, int]]:
    return [(n, p) for n in (200, 400) for p in (n // 4, n // 2)]
