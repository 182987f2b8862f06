import logging
import math
from abc import ABC, abstractmethod
from typing import Any, Dict, List, Tuple

import numpy as np
from scipy import special

from app.core.resilience import ModelInputError

logger = logging.getLogger(__name__)

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def _finite_pair(y, u) -> Tuple[np.ndarray, np.ndarray, bool]:
    y_arr = np.asarray(y, dtype=float)
    u_arr = np.asarray(u, dtype=float)
    scalar = y_arr.ndim == 0 and u_arr.ndim == 0
    if not (np.all(np.isfinite(y_arr)) and np.all(np.isfinite(u_arr))):
        raise ModelInputError("conditional model inputs must be finite")
    return y_arr, u_arr, scalar


def _out(value: np.ndarray, scalar: bool):
    return float(value) if scalar else value


class ConditionalModel(ABC):
    """
    Single-index conditional law of Y given X: everything depends on X only
    through u = x'beta. Maps accept scalars or broadcastable arrays.
    """

    name: str = "base"
    # True when the loss is exactly quadratic in u, so coordinate steps are exact.
    quadratic_loss: bool = False

    @abstractmethod
    def density(self, y, u):
        """f(y, u)."""

    @abstractmethod
    def cdf(self, y, u):
        """h(y, u) = integral of f(t, u) for t <= y."""

    @abstractmethod
    def cdf_index_deriv(self, y, u):
        """dh/du at (y, u)."""

    def loss(self, y, u):
        """-log f(y, u) without the underflow check; used inside optimisers."""
        return -np.log(self.density(y, u))

    def loss_index_derivs(self, y, u) -> Tuple[np.ndarray, np.ndarray]:
        """First and second derivative of the loss in u (central differences)."""
        eps = 1e-5
        up = self.loss(y, u + eps)
        mid = self.loss(y, u)
        down = self.loss(y, u - eps)
        return (up - down) / (2 * eps), (up - 2 * mid + down) / eps ** 2

    def neg_log_density(self, y, u):
        y_arr, u_arr, scalar = _finite_pair(y, u)
        dens = np.asarray(self.density(y_arr, u_arr), dtype=float)
        if np.any(dens <= 0.0):
            raise ModelInputError(
                "density underflows to 0; index too far in the tail for -log f")
        return _out(np.asarray(self.loss(y_arr, u_arr), dtype=float), scalar)

    def rescaled(self, scale: float) -> "ConditionalModel":
        """The same law for the response divided by scale."""
        raise ModelInputError(f"model '{self.name}' does not support response rescaling")

    def get_status(self) -> Dict[str, Any]:
        return {"name": self.name, "quadratic_loss": self.quadratic_loss}


class NormalLinearModel(ConditionalModel):
    """Y | X ~ N(x'beta, response_scale^2)."""

    name = "normal"
    quadratic_loss = True

    def __init__(self, response_scale: float = 1.0):
        if not (math.isfinite(response_scale) and response_scale > 0):
            raise ModelInputError(f"response_scale must be positive, got {response_scale}")
        self.response_scale = float(response_scale)
        self._log_norm = math.log(self.response_scale) + _LOG_SQRT_2PI

    def _z(self, y_arr, u_arr):
        return (y_arr - u_arr) / self.response_scale

    def density(self, y, u):
        y_arr, u_arr, scalar = _finite_pair(y, u)
        z = self._z(y_arr, u_arr)
        return _out(np.exp(-0.5 * z * z - _LOG_SQRT_2PI) / self.response_scale, scalar)

    def cdf(self, y, u):
        y_arr, u_arr, scalar = _finite_pair(y, u)
        # ndtr goes through erfc in the lower tail, so small probabilities keep full precision.
        return _out(special.ndtr(self._z(y_arr, u_arr)), scalar)

    def cdf_index_deriv(self, y, u):
        y_arr, u_arr, scalar = _finite_pair(y, u)
        z = self._z(y_arr, u_arr)
        return _out(-np.exp(-0.5 * z * z - _LOG_SQRT_2PI) / self.response_scale, scalar)

    def loss(self, y, u):
        z = self._z(np.asarray(y, dtype=float), np.asarray(u, dtype=float))
        return 0.5 * z * z + self._log_norm

    def loss_index_derivs(self, y, u) -> Tuple[np.ndarray, np.ndarray]:
        s2 = self.response_scale ** 2
        resid = np.asarray(y, dtype=float) - np.asarray(u, dtype=float)
        return -resid / s2, np.full_like(resid, 1.0 / s2)

    def rescaled(self, scale: float) -> "NormalLinearModel":
        return NormalLinearModel(self.response_scale / scale)

    def get_status(self) -> Dict[str, Any]:
        status = super().get_status()
        status["response_scale"] = self.response_scale
        return status


_MODELS = {
    "normal": NormalLinearModel,
}


def get_conditional_model(name: str = "normal", **kwargs) -> ConditionalModel:
    """Factory for registered conditional models."""
    model_cls = _MODELS.get(name.lower())
    if not model_cls:
        raise ModelInputError(
            f"Unknown conditional model: {name}. Available: {list(_MODELS.keys())}")
    return model_cls(**kwargs)


def list_models() -> List[Dict[str, Any]]:
    return [cls().get_status() for cls in _MODELS.values()]
