from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    # Lasso (complete-case penalized likelihood)
    lasso_tol: float = 1e-7
    lasso_kkt_tol: float = 1e-6
    lasso_max_sweeps: int = 10000
    lambda_grid_size: int = 50
    lambda_min_ratio: float = 1e-3
    cv_folds: int = 10
    # "one_se": losses within one fold standard error of the minimum tie; "min": exact minimum
    cv_rule: Literal["one_se", "min"] = "one_se"

    # Logistic lasso (AIPW selection model)
    logistic_coef_bound: float = 30.0
    logistic_tol: float = 1e-8
    logistic_max_iter: int = 20000

    # OSQP settings for the weight programs
    qp_eps_abs: float = 1e-8
    qp_eps_rel: float = 1e-6
    qp_max_iter: int = 50000
    qp_rho: float = 0.1
    qp_sigma: float = 1e-6
    qp_alpha: float = 1.6
    qp_kkt_tol: float = 1e-6
    qp_polish: bool = True

    # Debiasing weights
    c0: float = 0.10
    c_step: float = 0.01
    c_max: float = 5.0
    zeta_grid_step: float = 0.01
    tau_clamp_eps: float = 1e-6
    zeta_strategy: Literal["adaptive", "fixed"] = "adaptive"
    fixed_zeta: float = 0.5
    refine_zeta: bool = True

    # AIPW comparator
    propensity_floor: float = 0.01
    heavy_clamp_fraction: float = 0.10
    aipw_normalize: bool = False

    # Monte Carlo harness
    failure_budget: float = 0.05
    n_workers: int = 1

    log_level: str = "INFO"

    model_config = SettingsConfigDict(env_prefix="HDQ_",
                                      env_file=".env",
                                      extra="ignore")


settings = Settings()


class RunConfig(BaseModel):
    """Per-invocation estimation settings. Defaults follow the printed tuning choices."""

    model_config = ConfigDict(frozen=True)

    tau_level: float = 0.5
    alpha: float = 0.05
    seed: int = 0
    c0: float = Field(default_factory=lambda: settings.c0)
    lambda_grid: Optional[List[float]] = None
    cv_folds: int = Field(default_factory=lambda: settings.cv_folds)
    standardize_response: bool = False
    expand_interactions: bool = False
    estimator: Literal["proposed", "aipw", "both"] = "proposed"
    weights_route: Literal["primal", "dual"] = "primal"
    zeta_strategy: Literal["adaptive", "fixed"] = Field(
        default_factory=lambda: settings.zeta_strategy)

    @field_validator("tau_level", "alpha")
    @classmethod
    def _open_unit_interval(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"must lie in (0, 1), got {v}")
        return v

    @field_validator("c0")
    @classmethod
    def _positive_c0(cls, v: float) -> float:
        if v <= 0:
            raise ValueError(f"c0 must be positive, got {v}")
        return v

    @field_validator("cv_folds")
    @classmethod
    def _enough_folds(cls, v: int) -> int:
        if v < 2:
            raise ValueError(f"cv_folds must be at least 2, got {v}")
        return v

    @field_validator("lambda_grid")
    @classmethod
    def _positive_grid(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is None:
            return v
        if not v:
            raise ValueError("lambda_grid must not be empty")
        if any(lam <= 0 for lam in v):
            raise ValueError("lambda_grid values must be positive")
        return v
