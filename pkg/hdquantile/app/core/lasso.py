import logging
import warnings
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import special
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import KFold

from app.core.config import settings
from app.core.model import ConditionalModel
from app.core.normalizer import Dataset
from app.core.resilience import InputError, LassoError

logger = logging.getLogger(__name__)


class LassoFit(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, populate_by_name=True)

    beta: np.ndarray
    lambda_: float = Field(alias="lambda")
    objective: float
    n_iter: int
    converged: bool
    kkt_residual: float = 0.0
    intercept: float = 0.0
    separation: bool = False
    cv_curve: Optional[List[Tuple[float, float]]] = None
    skipped_folds: List[int] = []

    @property
    def support_size(self) -> int:
        return int(np.count_nonzero(self.beta))


class CvCurve(BaseModel):
    grid: List[float]
    mean_loss: List[float]
    std_error: List[float] = []
    selected: float
    skipped_folds: List[int] = []


def _soft(z: float, lam: float) -> float:
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


def _kkt_residual(grad: np.ndarray, theta: np.ndarray, penalty: np.ndarray) -> float:
    """Largest subgradient-optimality violation over coordinates."""
    if grad.size == 0:
        return 0.0
    nonzero = theta != 0
    res = np.where(nonzero,
                   np.abs(grad + penalty * np.sign(theta)),
                   np.maximum(np.abs(grad) - penalty, 0.0))
    return float(np.max(res))


def _cd_quadratic(hess: np.ndarray, lin: np.ndarray, penalty: np.ndarray, theta: np.ndarray,
                  tol: float, kkt_tol: float, max_sweeps: int) -> Tuple[np.ndarray, int, bool, float]:
    """
    Cyclic coordinate descent on 0.5 t'Ht + lin't + sum penalty_j |t_j|.
    Full sweeps alternate with sweeps over the current nonzero set.
    """
    theta = theta.copy()
    grad = lin + hess @ theta
    diag = np.diag(hess).copy()
    all_idx = np.arange(theta.size)

    def sweep(idx) -> float:
        max_change = 0.0
        for j in idx:
            hjj = diag[j]
            if hjj <= 0.0:
                continue
            old = theta[j]
            new = _soft(hjj * old - grad[j], penalty[j]) / hjj
            if new != old:
                step = new - old
                grad[:] += hess[:, j] * step
                theta[j] = new
                if abs(step) > max_change:
                    max_change = abs(step)
        return max_change

    n_iter = 0
    converged = False
    kkt = _kkt_residual(grad, theta, penalty)
    while n_iter < max_sweeps:
        change = sweep(all_idx)
        n_iter += 1
        kkt = _kkt_residual(grad, theta, penalty)
        if change <= tol and kkt <= kkt_tol:
            converged = True
            break
        active = np.flatnonzero(theta)
        while n_iter < max_sweeps and active.size:
            n_iter += 1
            if sweep(active) <= tol:
                break
    return theta, n_iter, converged, kkt


def penalized_objective(data: Dataset, model: ConditionalModel, beta: np.ndarray,
                        lam: float) -> float:
    u = data.x_observed @ beta
    return float(np.sum(model.loss(data.y_observed, u)) + lam * np.sum(np.abs(beta)))


def lambda_max(data: Dataset, model: ConditionalModel) -> float:
    """Smallest penalty at which beta = 0 is optimal."""
    y = data.y_observed
    d1, _ = model.loss_index_derivs(y, np.zeros_like(y))
    return float(np.max(np.abs(data.x_observed.T @ d1)))


def default_lambda_grid(lam_max: float, size: Optional[int] = None,
                        min_ratio: Optional[float] = None) -> List[float]:
    size = size or settings.lambda_grid_size
    min_ratio = min_ratio or settings.lambda_min_ratio
    if not np.isfinite(lam_max) or lam_max <= 0.0:
        return [1.0]
    return list(lam_max * np.logspace(0.0, np.log10(min_ratio), size))


def _quadratic_terms(x: np.ndarray, y: np.ndarray,
                     model: ConditionalModel) -> Tuple[np.ndarray, np.ndarray]:
    zero = np.zeros_like(y)
    d1, d2 = model.loss_index_derivs(y, zero)
    return (x * d2[:, None]).T @ x, x.T @ d1


def _cd_general(x: np.ndarray, y: np.ndarray, model: ConditionalModel, lam: float,
                beta: np.ndarray, tol: float, kkt_tol: float,
                max_sweeps: int) -> Tuple[np.ndarray, int, bool, float]:
    """Coordinate Newton steps with backtracking for non-quadratic losses."""
    beta = beta.copy()
    u = x @ beta
    penalty = np.full(beta.size, lam)
    kkt = np.inf
    for sweep in range(1, max_sweeps + 1):
        max_change = 0.0
        for j in range(beta.size):
            xj = x[:, j]
            d1, d2 = model.loss_index_derivs(y, u)
            g = float(d1 @ xj)
            h = float(d2 @ (xj * xj))
            if h <= 0.0:
                continue
            old = beta[j]
            target = _soft(h * old - g, lam) / h
            base = float(np.sum(model.loss(y, u))) + lam * abs(old)
            step = target - old
            while abs(step) > 0.0:
                trial = float(np.sum(model.loss(y, u + step * xj))) + lam * abs(old + step)
                if trial <= base:
                    break
                step *= 0.5
                if abs(step) < 1e-14:
                    step = 0.0
            if step != 0.0:
                beta[j] = old + step
                u += step * xj
                max_change = max(max_change, abs(step))
        d1, _ = model.loss_index_derivs(y, u)
        kkt = _kkt_residual(x.T @ d1, beta, penalty)
        if max_change <= tol and kkt <= kkt_tol:
            return beta, sweep, True, kkt
    return beta, max_sweeps, False, kkt


def fit_lasso(data: Dataset, model: ConditionalModel, lam: float,
              beta_init: Optional[np.ndarray] = None, tol: Optional[float] = None,
              max_sweeps: Optional[int] = None, _quadratic=None) -> LassoFit:
    """
    Complete-case l1-penalized maximum likelihood:
    argmin_beta  sum_{delta=1} -log f(Y_i, X_i'beta) + lam * ||beta||_1
    """
    if not (np.isfinite(lam) and lam > 0):
        raise InputError(f"lambda must be positive, got {lam}")
    if data.n_observed == 0:
        raise LassoError("no observed units for the complete-case fit")
    tol = settings.lasso_tol if tol is None else tol
    max_sweeps = settings.lasso_max_sweeps if max_sweeps is None else max_sweeps
    x, y = data.x_observed, data.y_observed
    beta = np.zeros(data.p) if beta_init is None else np.asarray(beta_init, dtype=float)

    if model.quadratic_loss:
        hess, lin = _quadratic or _quadratic_terms(x, y, model)
        beta, n_iter, converged, kkt = _cd_quadratic(
            hess, lin, np.full(data.p, lam), beta, tol, settings.lasso_kkt_tol, max_sweeps)
    else:
        beta, n_iter, converged, kkt = _cd_general(
            x, y, model, lam, beta, tol, settings.lasso_kkt_tol, max_sweeps)

    if not converged:
        logger.warning(f"[LASSO] lambda={lam:.4g} stopped after {n_iter} sweeps "
                       f"(kkt residual {kkt:.2e})")
    return LassoFit(beta=beta, lambda_=lam, objective=penalized_objective(data, model, beta, lam),
                    n_iter=n_iter, converged=converged, kkt_residual=kkt)


def fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    """Fold label per unit; a deterministic function of the seed."""
    labels = np.zeros(n, dtype=int)
    if n < 2:
        return labels
    splitter = KFold(n_splits=min(folds, n), shuffle=True, random_state=int(seed) % 2 ** 32)
    for k, (_, test) in enumerate(splitter.split(np.zeros((n, 1)))):
        labels[test] = k
    return labels


def _validate_grid(grid: Sequence[float], folds: int) -> List[float]:
    if folds < 2:
        raise InputError(f"folds must be at least 2, got {folds}")
    grid = [float(g) for g in grid]
    if not grid:
        raise InputError("lambda grid must not be empty")
    if any(not np.isfinite(g) or g <= 0 for g in grid):
        raise InputError("lambda grid values must be positive")
    return sorted(grid, reverse=True)


def _select(grid_desc: List[float], mean_loss: np.ndarray,
            std_error: Optional[np.ndarray] = None) -> float:
    """
    Largest lambda whose mean loss ties the minimum. With std_error the tie
    band is one standard error of the minimiser's fold losses.
    """
    k_best = int(np.argmin(mean_loss))
    best = float(mean_loss[k_best])
    slack = 1e-12 * max(1.0, abs(best))
    if std_error is not None and np.isfinite(std_error[k_best]):
        slack = max(slack, float(std_error[k_best]))
    # grid is descending, so the first hit is the largest tied lambda
    for lam, loss in zip(grid_desc, mean_loss):
        if loss <= best + slack:
            return lam
    return grid_desc[0]


def _reduce_folds(fold_losses: List[List[float]]) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    losses = np.asarray(fold_losses)
    mean_loss = np.mean(losses, axis=0)
    if settings.cv_rule == "min" or losses.shape[0] < 2:
        return mean_loss, None
    return mean_loss, np.std(losses, axis=0, ddof=1) / np.sqrt(losses.shape[0])


def cross_validation_curve(data: Dataset, model: ConditionalModel,
                           grid: Optional[Sequence[float]] = None,
                           folds: Optional[int] = None, seed: int = 0) -> CvCurve:
    """Held-out complete-case negative log-likelihood along a warm-started path."""
    folds = folds or settings.cv_folds
    if grid is None:
        grid = default_lambda_grid(lambda_max(data, model))
    grid_desc = _validate_grid(grid, folds)
    labels = fold_ids(data.n, folds, seed)

    fold_losses = []
    skipped = []
    for k in range(folds):
        train = data.subset(np.flatnonzero(labels != k))
        test_rows = (labels == k) & data.observed
        if not test_rows.any() or train.n_observed == 0:
            logger.warning(f"[CV] fold {k} has no observed units on one side; skipped")
            skipped.append(k)
            continue
        quad = None
        if model.quadratic_loss:
            quad = _quadratic_terms(train.x_observed, train.y_observed, model)
        beta = np.zeros(data.p)
        losses = []
        for lam in grid_desc:
            fit = fit_lasso(train, model, lam, beta_init=beta, _quadratic=quad)
            beta = fit.beta
            u = data.x[test_rows] @ beta
            losses.append(float(np.mean(model.loss(data.y[test_rows], u))))
        fold_losses.append(losses)

    if not fold_losses:
        raise LassoError("every cross-validation fold was skipped")
    mean_loss, std_error = _reduce_folds(fold_losses)
    selected = _select(grid_desc, mean_loss, std_error)
    logger.info(f"[CV] selected lambda={selected:.5g} ({settings.cv_rule} rule) over "
                f"{len(grid_desc)} values, {len(fold_losses)}/{folds} folds")
    return CvCurve(grid=grid_desc, mean_loss=[float(v) for v in mean_loss],
                   std_error=[] if std_error is None else [float(v) for v in std_error],
                   selected=selected, skipped_folds=skipped)


def cross_validate_lambda(data: Dataset, model: ConditionalModel, grid: Sequence[float],
                          folds: int = 10, seed: int = 0) -> float:
    return cross_validation_curve(data, model, grid, folds, seed).selected


def fit_lasso_cv(data: Dataset, model: ConditionalModel,
                 grid: Optional[Sequence[float]] = None,
                 folds: Optional[int] = None, seed: int = 0) -> LassoFit:
    curve = cross_validation_curve(data, model, grid, folds, seed)
    fit = fit_lasso(data, model, curve.selected)
    return fit.model_copy(update={
        "cv_curve": list(zip(curve.grid, curve.mean_loss)),
        "skipped_folds": curve.skipped_folds,
    })


# ---------------------------------------------------------------------------
# l1-penalized logistic regression for the selection model
# ---------------------------------------------------------------------------

def _logistic_nll(z: np.ndarray, delta: np.ndarray, theta: np.ndarray) -> float:
    eta = z @ theta
    return float(np.sum(np.logaddexp(0.0, eta) - delta * eta))


def logistic_lambda_max(data: Dataset) -> float:
    d = data.delta.astype(float)
    return float(np.max(np.abs(data.x.T @ (d - d.mean()))))


def _logistic_estimator() -> LogisticRegression:
    # sklearn minimises ||b||_1 + C * sum nll, so C = 1 / lambda; saga leaves the intercept unpenalised
    return LogisticRegression(penalty="l1", solver="saga", tol=settings.logistic_tol,
                              max_iter=settings.logistic_max_iter, warm_start=True)


def fit_logistic_lasso(data: Dataset, lam: float,
                       estimator: Optional[LogisticRegression] = None) -> LassoFit:
    """
    Penalized logistic fit of delta on X over all n units:
    argmin  sum -log-lik(delta_i; gamma_0 + X_i'gamma) + lam * ||gamma||_1.
    Pass the same estimator along a lambda path to warm-start it.
    """
    if not (np.isfinite(lam) and lam > 0):
        raise InputError(f"lambda must be positive, got {lam}")
    bound = settings.logistic_coef_bound
    delta = data.delta.astype(int)
    z = np.hstack([np.ones((data.n, 1)), data.x])

    def objective(theta):
        return _logistic_nll(z, delta, theta) + lam * float(np.sum(np.abs(theta[1:])))

    rate = delta.mean()
    if rate in (0.0, 1.0):
        logger.warning("[LASSO] selection outcome is constant; intercept clamped")
        theta = np.zeros(data.p + 1)
        theta[0] = bound if rate == 1.0 else -bound
        return LassoFit(beta=theta[1:], intercept=float(theta[0]), lambda_=lam,
                        objective=objective(theta), n_iter=0, converged=False,
                        separation=True)

    estimator = estimator or _logistic_estimator()
    estimator.set_params(C=1.0 / lam)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        estimator.fit(data.x, delta)
    converged = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    theta = np.concatenate([estimator.intercept_, estimator.coef_[0]])

    separation = bool(np.max(np.abs(theta)) > bound)
    if separation:
        theta = np.clip(theta, -bound, bound)
        logger.warning(f"[LASSO] logistic coefficients diverging; clamped at +/-{bound}")
    if not converged:
        logger.warning(f"[LASSO] logistic lambda={lam:.4g} stopped after "
                       f"{int(estimator.n_iter_[0])} epochs")
    prob = special.expit(z @ theta)
    penalty = np.concatenate([[0.0], np.full(data.p, lam)])
    kkt = _kkt_residual(z.T @ (prob - delta), theta, penalty)
    return LassoFit(beta=theta[1:], intercept=float(theta[0]), lambda_=lam,
                    objective=objective(theta), n_iter=int(estimator.n_iter_[0]),
                    converged=converged, kkt_residual=float(kkt), separation=separation)


def logistic_probabilities(fit: LassoFit, x: np.ndarray) -> np.ndarray:
    return special.expit(fit.intercept + x @ fit.beta)


def fit_logistic_lasso_cv(data: Dataset, grid: Optional[Sequence[float]] = None,
                          folds: Optional[int] = None, seed: int = 0) -> LassoFit:
    """Logistic lasso with lambda chosen by held-out deviance."""
    folds = folds or settings.cv_folds
    if grid is None:
        grid = default_lambda_grid(logistic_lambda_max(data))
    grid_desc = _validate_grid(grid, folds)
    labels = fold_ids(data.n, folds, seed)
    delta = data.delta.astype(float)

    fold_losses = []
    skipped = []
    for k in range(folds):
        train_rows = labels != k
        test_rows = labels == k
        train_delta = delta[train_rows]
        if not test_rows.any() or train_delta.min() == train_delta.max():
            skipped.append(k)
            continue
        train = data.subset(np.flatnonzero(train_rows))
        estimator = _logistic_estimator()
        losses = []
        for lam in grid_desc:
            fit = fit_logistic_lasso(train, lam, estimator=estimator)
            eta = fit.intercept + data.x[test_rows] @ fit.beta
            dev = 2.0 * np.mean(np.logaddexp(0.0, eta) - delta[test_rows] * eta)
            losses.append(float(dev))
        fold_losses.append(losses)

    if skipped:
        logger.warning(f"[CV] logistic folds skipped: {skipped}")
    if not fold_losses:
        selected = grid_desc[0]
        mean_loss = np.full(len(grid_desc), np.nan)
    else:
        mean_loss, std_error = _reduce_folds(fold_losses)
        selected = _select(grid_desc, mean_loss, std_error)
    fit = fit_logistic_lasso(data, selected)
    return fit.model_copy(update={
        "cv_curve": list(zip(grid_desc, [float(v) for v in mean_loss])),
        "skipped_folds": skipped,
    })
