import logging
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from scipy import special

from app.core.normalizer import Dataset

logger = logging.getLogger(__name__)

COVARIATE_BOUND = 5.0
TRUNCATED_VARIANCE = 0.5
SIGNAL = (0.25, 0.125, 0.25, 0.125)
SELECTION_INTERCEPT = 1.0


class DgpKind(str, Enum):
    # selection model is correctly specified only under DGP2
    DGP1 = "DGP1"
    DGP2 = "DGP2"


class DgpSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: DgpKind = DgpKind.DGP2
    n: int
    p: int
    tau_level: float = 0.5

    @field_validator("p")
    @classmethod
    def _at_least_four(cls, v: int) -> int:
        if v < 4:
            raise ValueError(f"p must be at least 4, got {v}")
        return v

    @field_validator("n")
    @classmethod
    def _at_least_two(cls, v: int) -> int:
        if v < 2:
            raise ValueError(f"n must be at least 2, got {v}")
        return v

    @property
    def beta_true(self) -> np.ndarray:
        beta = np.zeros(self.p)
        beta[:len(SIGNAL)] = SIGNAL
        return beta

    @property
    def q0(self) -> float:
        # Y is symmetric about 0 under both designs
        return 0.0


def _truncated_normal(shape, rng: np.random.Generator) -> np.ndarray:
    scale = np.sqrt(TRUNCATED_VARIANCE)
    draws = rng.normal(0.0, scale, size=shape)
    outside = np.abs(draws) > COVARIATE_BOUND
    while outside.any():
        draws[outside] = rng.normal(0.0, scale, size=int(outside.sum()))
        outside = np.abs(draws) > COVARIATE_BOUND
    return draws


def gen_covariates(n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """Columns 1-2 uniform on [-5, 5]; the rest N(0, 1/2) truncated to [-5, 5]."""
    if p < 4:
        raise ValueError(f"p must be at least 4, got {p}")
    x = np.empty((n, p))
    x[:, :2] = rng.uniform(-COVARIATE_BOUND, COVARIATE_BOUND, size=(n, 2))
    x[:, 2:] = _truncated_normal((n, p - 2), rng)
    return x


def dagger_transform(x: np.ndarray) -> np.ndarray:
    """x - x^2 + 2x^3 on the first four coordinates, identity on the rest."""
    x = np.array(x, dtype=float, copy=True)
    head = x[..., :4]
    x[..., :4] = head - head ** 2 + 2.0 * head ** 3
    return x


def selection_probability(x: np.ndarray, kind: DgpKind) -> np.ndarray:
    z = dagger_transform(x) if DgpKind(kind) == DgpKind.DGP1 else np.asarray(x, dtype=float)
    logit = SELECTION_INTERCEPT - z[..., :4] @ np.asarray(SIGNAL)
    return special.expit(logit)


def gen_outcome_and_missing(x: np.ndarray, spec: DgpSpec, rng: np.random.Generator):
    """Y ~ N(x'beta_true, 1); delta ~ Bernoulli(pi(x)). y keeps the draw even when unobserved."""
    x = np.asarray(x, dtype=float)
    y = x @ spec.beta_true + rng.standard_normal(x.shape[0])
    delta = (rng.random(x.shape[0]) < selection_probability(x, spec.kind)).astype(int)
    return y, delta


def make_dataset(spec: DgpSpec, rng: np.random.Generator) -> Dataset:
    x = gen_covariates(spec.n, spec.p, rng)
    y, delta = gen_outcome_and_missing(x, spec, rng)
    y = np.where(delta == 1, y, np.nan)
    # covariates have mean zero by construction and the outcome model has no intercept
    return Dataset.from_arrays(x, y, delta, center=False)
