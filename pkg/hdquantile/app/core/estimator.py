import logging
import math
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import optimize, stats

from app.core.config import RunConfig
from app.core.lasso import LassoFit, fit_lasso_cv
from app.core.model import ConditionalModel
from app.core.normalizer import Dataset
from app.core.resilience import (HdQuantileError, InputError, PilotBracketError, StageError,
                                 VarianceError)
from app.core.weights import WeightSolution, compute_weights

logger = logging.getLogger(__name__)

_MAX_DOUBLINGS = 60
_TIE_TOL = 1e-12
_SCAN_POINTS = 32
_ROOT_XTOL = 1e-14
_TAIL_SPREAD = 10.0

WeightsLike = Union[WeightSolution, np.ndarray]


class PipelineState(BaseModel):
    """Mutable record of a single estimation run, stage by stage."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: str = "init"
    error: Optional[str] = None
    lasso: Optional[LassoFit] = None
    q_pilot: Optional[float] = None
    weights: Optional[WeightSolution] = None
    q_hat: Optional[float] = None
    eq_residual: Optional[float] = None
    variance: Optional[Tuple[float, float, float, float]] = None

    def diagnostics(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"step": self.step}
        if self.lasso is not None:
            out["lambda"] = self.lasso.lambda_
            out["support_size"] = self.lasso.support_size
        if self.q_pilot is not None:
            out["q_pilot"] = self.q_pilot
        if self.weights is not None:
            out.update({
                "delta_cap": self.weights.delta_cap,
                "c_used": self.weights.c_used,
                "zeta": self.weights.zeta,
                "imbalance": self.weights.constraint_residual,
                "weight_objective": self.weights.objective,
            })
        if self.eq_residual is not None:
            out["eq_residual"] = self.eq_residual
        if self.variance is not None:
            out.update(dict(zip(("sigma2_hat", "t_hat", "v1_hat", "v2_hat"), self.variance)))
        return out


class QuantileEstimate(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    q_hat: float
    q_pilot: float
    tau_level: float
    sigma2_hat: float
    t_hat: float
    v1_hat: float
    v2_hat: float
    ci_lower: float
    ci_upper: float
    alpha: float
    eq_residual: float
    n: int
    n_observed: int
    lambda_: Optional[float] = None
    support_size: Optional[int] = None
    response_loc: float = 0.0
    response_scale: float = 1.0
    weights: Optional[WeightSolution] = None

    @property
    def sigma_hat(self) -> float:
        return math.sqrt(self.sigma2_hat)

    @property
    def std_error(self) -> float:
        return math.sqrt(self.sigma2_hat / self.n)


class ContrastEstimate(BaseModel):
    m_hat: float
    group_estimates: List[QuantileEstimate]
    group_labels: List[str] = ["0", "1"]
    ci_lower: float
    ci_upper: float
    alpha: float
    std_error: float


def _weight_vector(weights: WeightsLike) -> np.ndarray:
    if isinstance(weights, WeightSolution):
        return np.asarray(weights.w, dtype=float)
    return np.asarray(weights, dtype=float).reshape(-1)


def _spread(model: ConditionalModel) -> float:
    return float(getattr(model, "response_scale", 1.0))


def pilot_quantile(data: Dataset, model: ConditionalModel, beta: np.ndarray,
                   tau_level: float) -> float:
    """Root of q -> (1/n) sum h(q, X_i'beta) - tau."""
    if not 0.0 < tau_level < 1.0:
        raise InputError(f"tau_level must lie in (0, 1), got {tau_level}")
    index = data.x @ np.asarray(beta, dtype=float)

    def excess(q: float) -> float:
        return float(np.mean(model.cdf(q, index))) - tau_level

    if data.n_observed:
        lo, hi = float(np.min(data.y_observed)) - 1.0, float(np.max(data.y_observed)) + 1.0
    else:
        lo, hi = float(np.min(index)) - 1.0, float(np.max(index)) + 1.0
    width = hi - lo
    for _ in range(_MAX_DOUBLINGS):
        if excess(lo) < 0.0 < excess(hi):
            break
        lo, hi = lo - width, hi + width
        width *= 2.0
    else:
        raise PilotBracketError(
            f"pilot bracket [{lo:.4g}, {hi:.4g}] does not capture tau={tau_level} "
            f"after {_MAX_DOUBLINGS} doublings")

    root = optimize.brentq(excess, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps,
                           maxiter=500)
    residual = abs(excess(root))
    if residual > 1e-10:
        logger.warning(f"[PILOT] root residual {residual:.2e} above 1e-10")
    return float(root)


class _Equation:
    """F(q) = (1/n) sum h(q, u) + sum_obs w (I[Y <= q] - h(q, u_obs)) - tau."""

    def __init__(self, data: Dataset, model: ConditionalModel, beta: np.ndarray,
                 w: np.ndarray, tau_level: float):
        self.model = model
        self.index = data.x @ beta
        self.index_obs = self.index[data.observed]
        self.y_obs = data.y_observed
        self.w = w
        self.tau = tau_level
        order = np.argsort(self.y_obs, kind="stable")
        self.breaks, first = np.unique(self.y_obs[order], return_index=True)
        cumulative = np.concatenate([[0.0], np.cumsum(w[order])])
        # jump part just right of each breakpoint
        ends = np.concatenate([first[1:], [len(order)]])
        self.step_after = cumulative[ends]

    def smooth(self, qs: np.ndarray) -> np.ndarray:
        qs = np.asarray(qs, dtype=float).reshape(-1, 1)
        full = np.mean(self.model.cdf(qs, self.index[None, :]), axis=1)
        obs = self.model.cdf(qs, self.index_obs[None, :]) @ self.w
        return full - obs - self.tau

    def value(self, q: float) -> float:
        return float(self.smooth(np.array([q]))[0] + np.sum(self.w[self.y_obs <= q]))

    def g(self, q: float) -> float:
        return abs(self.value(q))


def _search_interval(eq: _Equation, lo: float, hi: float,
                     jump: float) -> List[Tuple[float, float]]:
    """Candidates (q, G) on [lo, hi), where the step part of F equals jump."""
    # hi only enters the scan; G there belongs to the next interval
    grid = np.linspace(lo, hi, _SCAN_POINTS + 1)
    values = eq.smooth(grid) + jump
    candidates = [(float(q), abs(float(v))) for q, v in zip(grid[:-1], values[:-1])]

    def f(q: float) -> float:
        return float(eq.smooth(np.array([q]))[0]) + jump

    def root(a: float, b: float) -> None:
        r = optimize.brentq(f, a, b, xtol=_ROOT_XTOL, rtol=4 * np.finfo(float).eps)
        if r < hi:
            candidates.append((float(r), abs(f(r))))

    # G approaches its infimum from the left of hi when |F| falls towards it
    last = float(np.nextafter(hi, lo))
    if last >= lo:
        candidates.append((last, abs(f(last))))

    signs = np.sign(values)
    for k in range(grid.size - 1):
        if signs[k] * signs[k + 1] < 0.0:
            root(grid[k], grid[k + 1])

    # a local minimum of |F| between same-signed scan points may hide a pair of
    # roots or a touch; minimise the signed, smooth F there
    size = np.abs(values)
    for k in range(grid.size):
        left, right = grid[max(k - 1, 0)], grid[min(k + 1, grid.size - 1)]
        if right <= left or signs[k] == 0.0:
            continue
        if size[k] > size[max(k - 1, 0)] or size[k] > size[min(k + 1, grid.size - 1)]:
            continue
        if signs[max(k - 1, 0)] != signs[k] or signs[min(k + 1, grid.size - 1)] != signs[k]:
            continue
        s = signs[k]
        res = optimize.minimize_scalar(lambda q: s * f(q), bounds=(left, right),
                                       method="bounded", options={"xatol": _ROOT_XTOL})
        x = float(res.x)
        if s * f(x) < 0.0:
            root(left, x)
            root(x, right)
        elif x < hi:
            candidates.append((x, abs(f(x))))
    return candidates


def adjusted_solve(data: Dataset, model: ConditionalModel, beta: np.ndarray,
                   weights: WeightsLike, tau_level: float,
                   return_residual: bool = False) -> Union[float, Tuple[float, float]]:
    """
    Global minimiser of G(q) = |F(q)|. F is smooth between the sorted observed
    responses and jumps at each of them, so every gap is searched on its own
    and every breakpoint is evaluated; the smallest minimiser wins ties.
    """
    if not 0.0 < tau_level < 1.0:
        raise InputError(f"tau_level must lie in (0, 1), got {tau_level}")
    beta = np.asarray(beta, dtype=float)
    w = _weight_vector(weights)
    if data.n_observed == 0:
        raise InputError("no observed responses")
    if w.size != data.n_observed:
        raise InputError(f"{w.size} weights for {data.n_observed} observed units")
    if not np.all(np.isfinite(w)):
        raise InputError("weights must be finite")

    eq = _Equation(data, model, beta, w, tau_level)
    spread = _TAIL_SPREAD * _spread(model)
    lower = min(float(eq.breaks[0]), float(np.min(eq.index))) - spread
    upper = max(float(eq.breaks[-1]), float(np.max(eq.index))) + spread

    candidates = _search_interval(eq, lower, float(eq.breaks[0]), 0.0)
    edges = np.append(eq.breaks, upper)
    for k, start in enumerate(eq.breaks):
        # G at the breakpoint itself is the first point of the closed-left scan
        candidates.extend(_search_interval(eq, float(start), float(edges[k + 1]),
                                           float(eq.step_after[k])))

    best = min(g for _, g in candidates)
    q_hat = min(q for q, g in candidates if g <= best + _TIE_TOL)
    residual = eq.g(q_hat)
    return (q_hat, residual) if return_residual else q_hat


def variance_estimate(data: Dataset, model: ConditionalModel, beta: np.ndarray,
                      q_pilot: float, weights: WeightsLike) -> Tuple[float, float, float, float]:
    """(sigma2, T, V1, V2) of the plug-in asymptotic variance at the pilot."""
    w = _weight_vector(weights)
    if w.size != data.n_observed:
        raise InputError(f"{w.size} weights for {data.n_observed} observed units")
    n = data.n
    index = data.x @ np.asarray(beta, dtype=float)
    h = np.asarray(model.cdf(q_pilot, index))
    t_hat = float(np.mean(model.density(q_pilot, index)))
    if t_hat <= 1e-12:
        raise VarianceError(f"density mass vanishes at q_pilot={q_pilot:.6g} (T={t_hat:.3g})")
    h_obs = h[data.observed]
    v1 = float(n * np.sum(w * w * h_obs * (1.0 - h_obs)))
    v2 = float(max(np.mean(h * h) - np.mean(h) ** 2, 0.0))
    return (v1 + v2) / t_hat ** 2, t_hat, v1, v2


def confidence_interval(q_hat: float, sigma2: float, n: int,
                        alpha: float = 0.05) -> Tuple[float, float]:
    if sigma2 < 0:
        raise InputError(f"sigma2 must be nonnegative, got {sigma2}")
    if not 0.0 < alpha < 1.0:
        raise InputError(f"alpha must lie in (0, 1), got {alpha}")
    half = float(stats.norm.ppf(1.0 - alpha / 2.0)) * math.sqrt(sigma2 / n)
    return q_hat - half, q_hat + half


def _stage(state: PipelineState, name: str, fn, *args, **kwargs):
    state.step = name
    logger.info(f"[ESTIMATE] stage: {name}")
    try:
        return fn(*args, **kwargs)
    except (HdQuantileError, ArithmeticError, np.linalg.LinAlgError, ValueError) as e:
        if isinstance(e, StageError):
            raise
        state.error = str(e)
        logger.error(f"[ESTIMATE] stage '{name}' failed: {e}")
        raise StageError(name, e, diagnostics=state.diagnostics()) from e


def estimate(data: Dataset, model: ConditionalModel,
             config: Optional[RunConfig] = None,
             state: Optional[PipelineState] = None) -> QuantileEstimate:
    """
    Three-step debiased estimator:
    1. complete-case lasso with CV lambda, then the pilot root q_pilot
    2. balancing weights at the pilot
    3. weighted estimating-equation solve, plug-in variance and Wald interval
    """
    config = config or RunConfig()
    state = state or PipelineState()
    loc, scale = 0.0, 1.0
    work, work_model = data, model
    if config.standardize_response:
        work, loc, scale = _stage(state, "standardize", data.standardized_response)
        work_model = _stage(state, "standardize", model.rescaled, scale)

    fit = _stage(state, "lasso", fit_lasso_cv, work, work_model, config.lambda_grid,
                 config.cv_folds, config.seed)
    state.lasso = fit
    q_pilot = _stage(state, "pilot", pilot_quantile, work, work_model, fit.beta, config.tau_level)
    state.q_pilot = q_pilot
    weights = _stage(state, "weights", compute_weights, work, work_model, fit.beta, q_pilot,
                     c0=config.c0, route=config.weights_route,
                     zeta_strategy=config.zeta_strategy)
    state.weights = weights
    q_hat, residual = _stage(state, "adjusted_solve", adjusted_solve, work, work_model, fit.beta,
                             weights, config.tau_level, return_residual=True)
    state.q_hat, state.eq_residual = q_hat, residual
    sigma2, t_hat, v1, v2 = _stage(state, "variance", variance_estimate, work, work_model,
                                   fit.beta, q_pilot, weights)
    state.variance = (sigma2, t_hat, v1, v2)

    # back to the response's own scale; V1 and V2 live on the probability scale
    q_hat, q_pilot = loc + scale * q_hat, loc + scale * q_pilot
    t_hat, sigma2 = t_hat / scale, sigma2 * scale * scale
    lower, upper = _stage(state, "interval", confidence_interval, q_hat, sigma2, data.n,
                          config.alpha)
    state.step = "done"
    logger.info(f"[ESTIMATE] q_hat={q_hat:.6g} ci=({lower:.6g}, {upper:.6g}) "
                f"c={weights.c_used} zeta={weights.zeta:.4g}")
    return QuantileEstimate(
        q_hat=q_hat, q_pilot=q_pilot, tau_level=config.tau_level, sigma2_hat=sigma2,
        t_hat=t_hat, v1_hat=v1, v2_hat=v2, ci_lower=lower, ci_upper=upper,
        alpha=config.alpha, eq_residual=residual, n=data.n, n_observed=data.n_observed,
        lambda_=fit.lambda_, support_size=fit.support_size, response_loc=loc,
        response_scale=scale, weights=weights)


def contrast(data0: Dataset, data1: Dataset, model: ConditionalModel,
             config: Optional[RunConfig] = None,
             labels: Tuple[str, str] = ("0", "1")) -> ContrastEstimate:
    """m = q(group 1) - q(group 0); independent groups, so the variances add."""
    config = config or RunConfig()
    estimates = []
    for label, data in zip(labels, (data0, data1)):
        logger.info(f"[CONTRAST] estimating group {label}")
        estimates.append(estimate(data, model, config))
    est0, est1 = estimates
    m_hat = est1.q_hat - est0.q_hat
    std_error = math.sqrt(est1.sigma2_hat / est1.n + est0.sigma2_hat / est0.n)
    half = float(stats.norm.ppf(1.0 - config.alpha / 2.0)) * std_error
    return ContrastEstimate(m_hat=m_hat, group_estimates=estimates, group_labels=list(labels),
                            ci_lower=m_hat - half, ci_upper=m_hat + half, alpha=config.alpha,
                            std_error=std_error)
