import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import osqp
from pydantic import BaseModel, ConfigDict
from scipy import optimize, sparse

from app.core.config import settings
from app.core.lasso import _cd_quadratic
from app.core.model import ConditionalModel
from app.core.normalizer import Dataset
from app.core.resilience import (InfeasibleWeightsError, InputError, SolverError,
                                 WeightSolverError, escalate_to)

logger = logging.getLogger(__name__)


class QpResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    kkt: Dict[str, float]

    @property
    def solved(self) -> bool:
        return self.status == "solved"


def kkt_residuals(P: np.ndarray, q: np.ndarray, A: np.ndarray, l: np.ndarray,
                  u: np.ndarray, x: np.ndarray, y: np.ndarray) -> Dict[str, float]:
    """Sup-norm KKT residuals; y_i > 0 marks an active upper bound, y_i < 0 a lower one."""
    ax = A @ x
    stationarity = float(np.max(np.abs(P @ x + q + A.T @ y))) if x.size else 0.0
    if ax.size == 0:
        return {"stationarity": stationarity, "primal": 0.0, "complementarity": 0.0}
    primal = float(np.max(np.maximum(l - ax, 0.0) + np.maximum(ax - u, 0.0)))
    upper_gap = np.where(np.isfinite(u), u - ax, 1.0)
    lower_gap = np.where(np.isfinite(l), ax - l, 1.0)
    gap = np.where(y > 0, upper_gap, np.where(y < 0, lower_gap, 0.0))
    return {"stationarity": stationarity, "primal": primal,
            "complementarity": float(np.max(np.abs(y * gap)))}


class OsqpProgram:
    """
    min 0.5 x'Px + q'x  s.t.  l <= Ax <= u, set up once in OSQP.
    A diagonal P may be swapped in place; OSQP then warm-starts from the
    previous solution and keeps the factorisation structure.
    """

    def __init__(self, P: np.ndarray, q: np.ndarray, A: np.ndarray, l: np.ndarray,
                 u: np.ndarray):
        self.P, self.q, self.A, self.l, self.u = P, q, A, l, u
        self._solver = osqp.OSQP()
        self._solver.setup(P=sparse.triu(sparse.csc_matrix(P), format="csc"), q=q,
                           A=sparse.csc_matrix(A), l=l, u=u,
                           eps_abs=settings.qp_eps_abs, eps_rel=settings.qp_eps_rel,
                           max_iter=settings.qp_max_iter, rho=settings.qp_rho,
                           sigma=settings.qp_sigma, alpha=settings.qp_alpha,
                           polish=settings.qp_polish, warm_start=True, verbose=False)

    def update_diagonal(self, diag: np.ndarray) -> None:
        """New strictly positive diagonal P with the same shape."""
        self.P = np.diag(diag)
        self._solver.update(Px=np.asarray(diag, dtype=float))

    def solve(self, warm_start: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> QpResult:
        if warm_start is not None:
            self._solver.warm_start(x=warm_start[0], y=warm_start[1])
        res = self._solver.solve()
        status = str(res.info.status)
        iterations = int(res.info.iter)
        if status != "solved":
            logger.warning(f"[QP] OSQP status '{status}' after {iterations} iterations")
            return QpResult(x=np.full(self.q.size, np.nan), y=np.full(self.l.size, np.nan),
                            status=status, iterations=iterations, kkt={})
        x = np.asarray(res.x, dtype=float)
        y = np.asarray(res.y, dtype=float)
        kkt = kkt_residuals(self.P, self.q, self.A, self.l, self.u, x, y)
        if max(kkt.values()) > settings.qp_kkt_tol:
            logger.debug(f"[QP] solved with kkt={kkt} (polish status {res.info.status_polish})")
        return QpResult(x=x, y=y, status=status, iterations=iterations, kkt=kkt)


def solve_qp(P: np.ndarray, q: np.ndarray, A: np.ndarray, l: np.ndarray, u: np.ndarray,
             warm_start: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> QpResult:
    return OsqpProgram(P, q, A, l, u).solve(warm_start)


class BalanceProblem(BaseModel):
    """
    Inputs of the debiasing-weight program over the n1 observed units:
    tau_i = h(1 - h) at the pilot, rows b_i = hdot_u * X_i, target
    a = (1/n) sum over all units of hdot_u * X_i, and the cap delta_cap.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    tau: np.ndarray
    b: np.ndarray
    a: np.ndarray
    delta_cap: float
    n: int
    n1: int
    n_clamped: int = 0

    @classmethod
    def from_arrays(cls, tau, b, a, delta_cap: float, n: int) -> "BalanceProblem":
        tau = np.asarray(tau, dtype=float).reshape(-1)
        n1 = tau.size
        b = np.asarray(b, dtype=float)
        if b.ndim != 2:
            b = b.reshape(n1, -1)
        a = np.asarray(a, dtype=float).reshape(-1)
        if n1 < 1:
            raise InputError("balance problem needs at least one observed unit")
        if b.shape[1] != a.size:
            raise InputError(f"b has {b.shape[1]} columns but a has {a.size} entries")
        if np.any(tau <= 0.0) or np.any(tau >= 1.0):
            raise InputError("tau must lie strictly inside (0, 1)")
        if not (delta_cap > 0 and math.isfinite(delta_cap)) and delta_cap != math.inf:
            raise InputError(f"delta_cap must be positive, got {delta_cap}")
        return cls(tau=tau, b=b, a=a, delta_cap=float(delta_cap), n=int(n), n1=n1)

    @property
    def p(self) -> int:
        return int(self.a.size)

    def imbalance(self, w: np.ndarray) -> float:
        if self.p == 0:
            return 0.0
        return float(np.max(np.abs(self.a - self.b.T @ w)))

    def variance_objective(self, w: np.ndarray) -> float:
        return float(np.sum(w * w * self.tau))

    def with_cap(self, delta_cap: float) -> "BalanceProblem":
        return self.model_copy(update={"delta_cap": float(delta_cap)})


class WeightSolution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    w: np.ndarray
    zeta: float
    gamma: float
    objective: float
    constraint_residual: float
    delta_cap: float
    c_used: Optional[float] = None
    eta: Optional[np.ndarray] = None
    route: str = "primal"
    zeta_grid: Optional[float] = None
    n_clamped: int = 0
    min_imbalance: Optional[float] = None
    criterion_curve: List[Tuple[float, float]] = []
    failed_zetas: List[float] = []
    kkt: Dict[str, float] = {}
    qp_iterations: int = 0

    @property
    def sum_residual(self) -> float:
        return abs(float(np.sum(self.w)) - 1.0)


def delta_schedule(n: int, p: int, c: float) -> float:
    """Delta = c * n^(-5/16) * (log p)^(1/8)."""
    if n < 2:
        raise InputError(f"delta schedule needs n >= 2, got {n}")
    if p < 2:
        raise InputError(f"delta schedule needs p >= 2 (log p must be positive), got {p}")
    if not c > 0:
        raise InputError(f"delta constant must be positive, got {c}")
    return c * n ** (-5.0 / 16.0) * math.log(p) ** (1.0 / 8.0)


def build_balance_problem(data: Dataset, model: ConditionalModel, beta: np.ndarray,
                          q_pilot: float, delta_cap: float) -> BalanceProblem:
    eps = settings.tau_clamp_eps
    index = data.x @ beta
    hdot = np.asarray(model.cdf_index_deriv(q_pilot, index))
    a = (hdot[:, None] * data.x).mean(axis=0)
    obs = data.observed
    b = hdot[obs][:, None] * data.x[obs]
    h = np.asarray(model.cdf(q_pilot, index[obs]))
    degenerate = (h <= eps) | (h >= 1.0 - eps)
    tau = np.where(degenerate, eps * (1.0 - eps), h * (1.0 - h))
    n_clamped = int(degenerate.sum())
    if n_clamped:
        logger.warning(f"[WEIGHTS] {n_clamped} observed unit(s) with h outside "
                       f"({eps}, {1 - eps}); tau clamped")
    prob = BalanceProblem.from_arrays(tau, b, a, delta_cap, data.n)
    return prob.model_copy(update={"n_clamped": n_clamped})


def inverse_tau_weights(prob: BalanceProblem) -> np.ndarray:
    inv = 1.0 / prob.tau
    return inv / inv.sum()


def zeta_grid(step: Optional[float] = None) -> List[float]:
    step = step or settings.zeta_grid_step
    count = int(round(1.0 / step))
    return [round(k * step, 10) for k in range(count)]


def zeta_criterion(sol: WeightSolution, delta_cap: float) -> float:
    """Lagrangian value sum w^2 tau + zeta/(1-zeta) * (imbalance^2 - Delta^2)."""
    nu = sol.zeta / (1.0 - sol.zeta)
    return sol.objective + nu * (sol.constraint_residual ** 2 - delta_cap ** 2)


def _primal_matrices(prob: BalanceProblem, zeta: float):
    n1, p = prob.n1, prob.p
    P = np.diag(np.concatenate([2.0 * (1.0 - zeta) * prob.tau, [2.0 * zeta]]))
    sum_row = np.concatenate([np.ones(n1), [0.0]])[None, :]
    above = np.hstack([prob.b.T, np.ones((p, 1))])
    below = np.hstack([prob.b.T, -np.ones((p, 1))])
    A = np.vstack([sum_row, above, below])
    l = np.concatenate([[1.0], prob.a, np.full(p, -np.inf)])
    u = np.concatenate([[1.0], np.full(p, np.inf), prob.a])
    return P, np.zeros(n1 + 1), A, l, u


def _finish(prob: BalanceProblem, w: np.ndarray, **fields) -> WeightSolution:
    w = w + (1.0 - float(np.sum(w))) / w.size
    return WeightSolution(w=w, objective=prob.variance_objective(w),
                          constraint_residual=prob.imbalance(w), delta_cap=prob.delta_cap,
                          n_clamped=prob.n_clamped, **fields)


def solve_weights_primal(prob: BalanceProblem, zeta: float,
                         program: Optional[OsqpProgram] = None) -> WeightSolution:
    """
    Joint minimiser over (w, Gamma) of
    (1 - zeta) sum w_i^2 tau_i + zeta Gamma^2
    s.t. |a_j - sum_i w_i b_ij| <= Gamma for every j, sum w = 1.
    """
    if not 0.0 <= zeta < 1.0:
        raise InputError(f"zeta must lie in [0, 1), got {zeta}")
    if zeta == 0.0:
        # Gamma is free of cost, so w is the variance minimiser under sum w = 1 alone.
        w = inverse_tau_weights(prob)
        imbalance = prob.imbalance(w)
        return _finish(prob, w, zeta=0.0, gamma=imbalance,
                       kkt={"stationarity": 0.0, "primal": 0.0, "complementarity": 0.0})

    P, q, A, l, u = _primal_matrices(prob, zeta)
    if program is None:
        program = OsqpProgram(P, q, A, l, u)
    else:
        program.update_diagonal(np.diag(P))
    result = program.solve()
    if not result.solved:
        raise WeightSolverError(f"weight QP at zeta={zeta} did not converge",
                                best_iterate=result.x, residuals=result.kkt)
    w = result.x[:prob.n1]
    sol = _finish(prob, w, zeta=zeta, gamma=float(result.x[prob.n1]), kkt=result.kkt,
                  qp_iterations=result.iterations)
    return sol


def select_zeta(prob: BalanceProblem,
                grid: Optional[Sequence[float]] = None) -> Tuple[float, Dict[float, WeightSolution]]:
    """Grid search for the zeta maximising the Lagrangian criterion; ties go to smaller zeta."""
    grid = zeta_grid() if grid is None else sorted(float(z) for z in grid)
    if not grid:
        raise InputError("zeta grid must not be empty")
    solutions: Dict[float, WeightSolution] = {}
    program = None
    for zeta in grid:
        try:
            if program is None and zeta > 0.0:
                program = OsqpProgram(*_primal_matrices(prob, zeta))
            sol = solve_weights_primal(prob, zeta, program=program if zeta > 0.0 else None)
        except WeightSolverError as e:
            logger.warning(f"[WEIGHTS] zeta={zeta} excluded: {e}")
            continue
        solutions[zeta] = sol
    if not solutions:
        raise WeightSolverError("weight QP failed at every zeta grid point")

    best_zeta, best_value = None, -math.inf
    for zeta, sol in solutions.items():
        value = zeta_criterion(sol, prob.delta_cap)
        if value > best_value:
            best_zeta, best_value = zeta, value
    return best_zeta, solutions


def solve_weights_capped(prob: BalanceProblem) -> WeightSolution:
    """
    Hard-constrained program: min sum w^2 tau s.t. |a - B'w| <= Delta, sum w = 1.
    The multipliers give the zeta at which the penalised program has the same
    solution: nu = sum |mu_j| / (2 Delta), zeta = nu / (1 + nu).
    """
    n1, p = prob.n1, prob.p
    P = np.diag(2.0 * prob.tau)
    A = np.vstack([np.ones((1, n1)), prob.b.T])
    l = np.concatenate([[1.0], prob.a - prob.delta_cap])
    u = np.concatenate([[1.0], prob.a + prob.delta_cap])
    result = solve_qp(P, np.zeros(n1), A, l, u)
    if not result.solved:
        raise WeightSolverError("capped weight QP did not converge",
                                best_iterate=result.x, residuals=result.kkt)
    nu = float(np.sum(np.abs(result.y[1:]))) / (2.0 * prob.delta_cap) if p else 0.0
    zeta = nu / (1.0 + nu)
    sol = _finish(prob, result.x, zeta=zeta, gamma=0.0, kkt=result.kkt,
                  qp_iterations=result.iterations)
    return sol.model_copy(update={"gamma": sol.constraint_residual})


def solve_weights_dual(prob: BalanceProblem, tol: float = 1e-10,
                       kkt_tol: float = 1e-8) -> WeightSolution:
    """
    l1-penalised dual in eta (length p + 1, last coordinate unpenalised):
    (1/4n) sum_obs (eta'A_i)^2 / tau_i - (1/n) sum_all A_i'eta + Delta ||eta_{-(p+1)}||_1
    with A_i = (hdot_u X_i, 1); weights w_i = A_i'eta / (2 n tau_i).
    """
    n, p = prob.n, prob.p
    a_obs = np.hstack([prob.b, np.ones((prob.n1, 1))])
    target = np.concatenate([prob.a, [1.0]])
    hess = (a_obs / prob.tau[:, None]).T @ a_obs / (2.0 * n)
    lin = -target
    cap = prob.delta_cap if math.isfinite(prob.delta_cap) else 1e300
    penalty = np.concatenate([np.full(p, cap), [0.0]])

    diag = np.diag(hess)
    scale = max(float(diag.max()), 1.0)
    frozen = np.concatenate([diag[:p] <= 1e-12 * scale, [False]])
    if frozen.any():
        logger.warning(f"[WEIGHTS] dual: {int(frozen.sum())} coordinate(s) numerically "
                       f"singular; frozen at 0")
    keep = np.flatnonzero(~frozen)
    sub_hess = hess[np.ix_(keep, keep)]
    eta_sub, n_iter, converged, kkt = _cd_quadratic(
        sub_hess, lin[keep], penalty[keep], np.zeros(keep.size), tol, kkt_tol,
        settings.lasso_max_sweeps)
    # exact step on the unpenalised coordinate pins sum w = 1
    last = keep.size - 1
    grad_last = lin[keep][last] + sub_hess[last] @ eta_sub
    eta_sub[last] -= grad_last / sub_hess[last, last]
    if not converged:
        logger.warning(f"[WEIGHTS] dual coordinate descent stopped at kkt={kkt:.2e}")

    eta = np.zeros(p + 1)
    eta[keep] = eta_sub
    w = (a_obs @ eta) / (2.0 * n * prob.tau)
    nu = float(np.sum(np.abs(eta[:p]))) / (2.0 * n * prob.delta_cap) if p else 0.0
    sol = _finish(prob, w, zeta=nu / (1.0 + nu), gamma=0.0, eta=eta, route="dual",
                  kkt={"stationarity": float(kkt)}, qp_iterations=n_iter)
    return sol.model_copy(update={"gamma": sol.constraint_residual})


def min_imbalance(prob: BalanceProblem) -> float:
    """min_w ||a - B'w||_inf subject to sum w = 1, as a linear program in (w, Gamma)."""
    n1, p = prob.n1, prob.p
    if p == 0:
        return 0.0
    if n1 == 1:
        return prob.imbalance(np.ones(1))
    c = np.concatenate([np.zeros(n1), [1.0]])
    a_ub = np.vstack([
        np.hstack([-prob.b.T, -np.ones((p, 1))]),
        np.hstack([prob.b.T, -np.ones((p, 1))]),
    ])
    b_ub = np.concatenate([-prob.a, prob.a])
    a_eq = np.concatenate([np.ones(n1), [0.0]])[None, :]
    bounds = [(None, None)] * n1 + [(0.0, None)]
    res = optimize.linprog(c, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=[1.0],
                           bounds=bounds, method="highs")
    if res.status != 0:
        raise SolverError(f"feasibility program failed: {res.message}")
    return float(res.x[-1])


def compute_weights(data: Dataset, model: ConditionalModel, beta: np.ndarray,
                    q_pilot: float, c0: Optional[float] = None, route: str = "primal",
                    zeta_strategy: Optional[str] = None,
                    refine: Optional[bool] = None) -> WeightSolution:
    """
    Step 2 of the estimator: build the balance program at the pilot, escalate
    c from c0 until the balance constraint is feasible, then solve it.
    """
    c0 = settings.c0 if c0 is None else c0
    zeta_strategy = zeta_strategy or settings.zeta_strategy
    refine = settings.refine_zeta if refine is None else refine
    if data.n_observed < 1:
        raise InputError("weights need at least one observed unit")
    p_eff = max(data.p, 2)
    if p_eff != data.p:
        logger.info(f"[WEIGHTS] p={data.p}; Delta schedule evaluated at p=2")

    prob = build_balance_problem(data, model, beta, q_pilot,
                                 delta_schedule(data.n, p_eff, c0))
    floor = min_imbalance(prob)

    unit = delta_schedule(data.n, p_eff, 1.0)
    c_used = escalate_to(c0, settings.c_step, settings.c_max, floor / unit)
    if c_used is not None and floor > delta_schedule(data.n, p_eff, c_used):
        # floor / unit rounded one step short
        c_used = escalate_to(c0, settings.c_step, settings.c_max,
                             c_used + settings.c_step / 2)
    if c_used is None:
        raise InfeasibleWeightsError(
            f"balance constraint infeasible up to c={max(c0, settings.c_max)}; "
            f"achievable minimum imbalance is {floor:.6g}",
            min_imbalance=floor, c_last=max(c0, settings.c_max))
    if c_used != c0:
        logger.info(f"[WEIGHTS] escalated c from {c0} to {c_used}")
    prob = prob.with_cap(delta_schedule(data.n, p_eff, c_used))

    common = {"c_used": c_used, "min_imbalance": floor}
    if route == "dual":
        sol = solve_weights_dual(prob)
        return sol.model_copy(update=common)
    if zeta_strategy == "fixed":
        sol = solve_weights_primal(prob, settings.fixed_zeta)
        return sol.model_copy(update=common)

    zeta_hat, solutions = select_zeta(prob)
    grid = zeta_grid()
    curve = [(z, zeta_criterion(s, prob.delta_cap)) for z, s in solutions.items()]
    failed = [z for z in grid if z not in solutions]
    sol = solutions[zeta_hat]
    binds = solutions.get(0.0) is None or \
        solutions[0.0].constraint_residual > prob.delta_cap
    if refine and binds and abs(sol.constraint_residual - prob.delta_cap) > 1e-9:
        sol = solve_weights_capped(prob)
    logger.info(f"[WEIGHTS] c={c_used} Delta={prob.delta_cap:.5g} zeta_grid={zeta_hat} "
                f"zeta={sol.zeta:.5g} imbalance={sol.constraint_residual:.3g}")
    return sol.model_copy(update={**common, "zeta_grid": zeta_hat, "criterion_curve": curve,
                                  "failed_zetas": failed})
