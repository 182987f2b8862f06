import logging
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.core.config import RunConfig, settings
from app.core.estimator import (adjusted_solve, confidence_interval, pilot_quantile,
                                variance_estimate)
from app.core.lasso import fit_lasso_cv, fit_logistic_lasso_cv, logistic_probabilities
from app.core.model import ConditionalModel
from app.core.normalizer import Dataset
from app.core.resilience import InputError

logger = logging.getLogger(__name__)


class AipwEstimate(BaseModel):
    """Augmented inverse-probability-weighted quantile with its selection fit."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    q_hat: float
    q_pilot: float
    tau_level: float
    gamma: List[float] = []
    intercept: Optional[float] = None
    fitted_probs: np.ndarray
    clamp_count: int = 0
    heavy_clamping: bool = False
    oracle: bool = False
    normalized: bool = False
    sigma2_hat: float
    ci_lower: float
    ci_upper: float
    alpha: float
    eq_residual: float
    n: int
    lambda_: Optional[float] = None
    propensity_lambda: Optional[float] = None

    @property
    def sigma_hat(self) -> float:
        return float(np.sqrt(self.sigma2_hat))


def aipw_weights(probs_observed: np.ndarray, n: int, normalize: bool = False) -> np.ndarray:
    """1 / (n g_i) on observed units, or the self-normalised variant."""
    inv = 1.0 / np.asarray(probs_observed, dtype=float)
    if normalize:
        return inv / inv.sum()
    return inv / n


def estimate_aipw(data: Dataset, model: ConditionalModel, config: Optional[RunConfig] = None,
                  propensity: Optional[np.ndarray] = None,
                  normalize: Optional[bool] = None) -> AipwEstimate:
    config = config or RunConfig()
    normalize = settings.aipw_normalize if normalize is None else normalize
    floor = settings.propensity_floor

    fit = fit_lasso_cv(data, model, config.lambda_grid, config.cv_folds, config.seed)
    q_pilot = pilot_quantile(data, model, fit.beta, config.tau_level)

    gamma: List[float] = []
    intercept = None
    propensity_lambda = None
    if propensity is not None:
        probs = np.asarray(propensity, dtype=float).reshape(-1)
        if probs.size != data.n:
            raise InputError(f"{probs.size} selection probabilities for {data.n} units")
        if np.any(~np.isfinite(probs)) or np.any(probs <= 0.0) or np.any(probs > 1.0):
            raise InputError("selection probabilities must lie in (0, 1]")
        logger.info("[AIPW] using supplied selection probabilities")
    else:
        selection = fit_logistic_lasso_cv(data, folds=config.cv_folds, seed=config.seed)
        probs = logistic_probabilities(selection, data.x)
        gamma = [float(g) for g in selection.beta]
        intercept = selection.intercept
        propensity_lambda = selection.lambda_

    clamp_count = int(np.sum(probs < floor))
    probs = np.maximum(probs, floor)
    heavy = clamp_count > settings.heavy_clamp_fraction * data.n
    if heavy:
        logger.warning(f"[AIPW] {clamp_count}/{data.n} selection probabilities clamped "
                       f"at {floor}")

    w = aipw_weights(probs[data.observed], data.n, normalize)
    q_hat, residual = adjusted_solve(data, model, fit.beta, w, config.tau_level,
                                     return_residual=True)
    sigma2, _, _, _ = variance_estimate(data, model, fit.beta, q_pilot, w)
    lower, upper = confidence_interval(q_hat, sigma2, data.n, config.alpha)
    logger.info(f"[AIPW] q_hat={q_hat:.6g} clamped={clamp_count}")
    return AipwEstimate(
        q_hat=q_hat, q_pilot=q_pilot, tau_level=config.tau_level, gamma=gamma,
        intercept=intercept, fitted_probs=probs, clamp_count=clamp_count,
        heavy_clamping=heavy, oracle=propensity is not None, normalized=normalize,
        sigma2_hat=sigma2, ci_lower=lower, ci_upper=upper, alpha=config.alpha,
        eq_residual=residual, n=data.n, lambda_=fit.lambda_,
        propensity_lambda=propensity_lambda)
