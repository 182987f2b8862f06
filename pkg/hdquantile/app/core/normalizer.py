import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict

from app.core.resilience import DataIngestionError, InputError

logger = logging.getLogger(__name__)


class Dataset(BaseModel):
    """
    The (X_i, delta_i, Y_i) triples. Rows are units; y is NaN where delta = 0.
    Covariates are stored centered; column_centers holds the removed means.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x: np.ndarray
    y: np.ndarray
    delta: np.ndarray
    column_centers: np.ndarray
    column_names: List[str] = []
    response_name: str = "y"
    degenerate_columns: List[int] = []

    @classmethod
    def from_arrays(cls, x, y, delta=None, center: bool = True,
                    column_names: Optional[List[str]] = None,
                    response_name: str = "y") -> "Dataset":
        x = np.array(x, dtype=float, copy=True)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        y = np.array(y, dtype=float, copy=True).reshape(-1)
        if x.ndim != 2:
            raise InputError(f"x must be a matrix, got shape {x.shape}")
        n, p = x.shape
        if n < 2 or p < 1:
            raise InputError(f"need n >= 2 and p >= 1, got n={n}, p={p}")
        if y.shape[0] != n:
            raise InputError(f"y has {y.shape[0]} entries for {n} rows")
        if not np.all(np.isfinite(x)):
            raise InputError("covariates must be finite; X is always observed")

        if delta is None:
            delta = np.isfinite(y).astype(int)
        delta = np.asarray(delta).reshape(-1)
        if delta.shape[0] != n:
            raise InputError(f"delta has {delta.shape[0]} entries for {n} rows")
        if not np.all(np.isin(delta, (0, 1))):
            raise InputError("delta must be a 0/1 mask")
        delta = delta.astype(int)
        if delta.sum() == 0:
            raise InputError("at least one response must be observed")
        observed = delta == 1
        if not np.all(np.isfinite(y[observed])):
            raise InputError("observed responses must be finite")
        y[~observed] = np.nan

        centers = np.zeros(p)
        if center:
            centers = x.mean(axis=0)
            x -= centers
            # second pass removes the rounding left by the first
            drift = x.mean(axis=0)
            x -= drift
            centers += drift

        degenerate = [int(j) for j in np.flatnonzero(np.ptp(x, axis=0) == 0.0)]
        if degenerate:
            logger.warning(f"[INGEST] {len(degenerate)} constant covariate column(s) "
                           f"centered to zero: {degenerate[:10]}")

        names = list(column_names) if column_names else [f"x{j + 1}" for j in range(p)]
        if len(names) != p:
            raise InputError(f"{len(names)} column names for {p} columns")
        return cls(x=x, y=y, delta=delta, column_centers=centers, column_names=names,
                   response_name=response_name, degenerate_columns=degenerate)

    @property
    def n(self) -> int:
        return int(self.x.shape[0])

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def observed(self) -> np.ndarray:
        return self.delta == 1

    @property
    def n_observed(self) -> int:
        return int(self.delta.sum())

    @property
    def x_observed(self) -> np.ndarray:
        return self.x[self.observed]

    @property
    def y_observed(self) -> np.ndarray:
        return self.y[self.observed]

    def subset(self, rows: np.ndarray) -> "Dataset":
        """Rows of this dataset, keeping the global centering."""
        rows = np.asarray(rows)
        return Dataset(x=self.x[rows], y=self.y[rows], delta=self.delta[rows],
                       column_centers=self.column_centers, column_names=self.column_names,
                       response_name=self.response_name,
                       degenerate_columns=self.degenerate_columns)

    def standardized_response(self) -> Tuple["Dataset", float, float]:
        """Observed Y centered and scaled; returns (dataset, location, scale)."""
        y_obs = self.y_observed
        loc = float(np.mean(y_obs))
        scale = float(np.std(y_obs, ddof=1)) if y_obs.size > 1 else 1.0
        if not np.isfinite(scale) or scale <= 0.0:
            scale = 1.0
        y = (self.y - loc) / scale
        return self.model_copy(update={"y": y}), loc, scale

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.x + self.column_centers, columns=self.column_names)
        frame[self.response_name] = self.y
        return frame


def expand_interactions(x: np.ndarray,
                        names: Optional[List[str]] = None) -> Union[np.ndarray, Tuple[np.ndarray, List[str]]]:
    """
    Original d columns followed by X_l * X_m for 1 <= l <= m <= d, l outer.
    Returns the matrix, or (matrix, names) when names are given.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    d = x.shape[1]
    if d < 1:
        raise InputError("interaction expansion needs at least one column")
    left, right = np.triu_indices(d)
    expanded = np.hstack([x, x[:, left] * x[:, right]])
    if names is None:
        return expanded
    new_names = list(names) + [f"{names[l]}*{names[m]}" for l, m in zip(left, right)]
    return expanded, new_names


def _parse_numeric_column(frame: pd.DataFrame, column: str, missing_token: str,
                          allow_missing: bool) -> np.ndarray:
    raw = frame[column].astype(str).str.strip()
    missing = (raw == "") | (raw == missing_token)
    if missing.any() and not allow_missing:
        row = int(np.flatnonzero(missing.to_numpy())[0]) + 2
        raise DataIngestionError(
            f"missing covariate value at row {row}, column '{column}'; X must be fully observed")
    parsed = pd.to_numeric(raw.where(~missing), errors="coerce")
    bad = parsed.isna() & ~missing
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0]) + 2
        raise DataIngestionError(
            f"non-numeric value '{raw.iloc[row - 2]}' at row {row}, column '{column}'")
    return parsed.to_numpy(dtype=float)


def ingest_csv(path: Union[str, Path], response_column: str, missing_token: str = "",
               group_column: Optional[str] = None,
               expand: bool = False) -> Union[Dataset, Dict[str, Dataset]]:
    """
    Read a headed CSV into a Dataset (or one Dataset per group label).
    Responses equal to missing_token, or empty, are unobserved.
    """
    path = Path(path)
    if not path.is_file():
        raise DataIngestionError(f"data file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise DataIngestionError(f"cannot parse {path}: {e}") from e

    if response_column not in frame.columns:
        raise DataIngestionError(f"response column '{response_column}' not in header")
    if group_column is not None and group_column not in frame.columns:
        raise DataIngestionError(f"group column '{group_column}' not in header")

    covariates = [c for c in frame.columns if c not in (response_column, group_column)]
    if not covariates:
        raise DataIngestionError("no covariate columns found")

    x = np.column_stack([_parse_numeric_column(frame, c, missing_token, allow_missing=False)
                         for c in covariates])
    y = _parse_numeric_column(frame, response_column, missing_token, allow_missing=True)
    names = list(covariates)
    if expand:
        x, names = expand_interactions(x, names)
    logger.info(f"[INGEST] {path.name}: n={x.shape[0]}, p={x.shape[1]}, "
                f"observed={int(np.isfinite(y).sum())}")

    if group_column is None:
        return Dataset.from_arrays(x, y, column_names=names, response_name=response_column)

    labels = frame[group_column].astype(str).str.strip().to_numpy()
    groups: Dict[str, Dataset] = {}
    for label in sorted(set(labels)):
        rows = labels == label
        groups[label] = Dataset.from_arrays(x[rows], y[rows], column_names=names,
                                            response_name=response_column)
        logger.info(f"[INGEST] group {group_column}={label}: n={int(rows.sum())}")
    return groups


def write_csv(dataset: Dataset, path: Union[str, Path], missing_token: str = "") -> Path:
    """Re-emit a dataset with its original (uncentered) covariate values."""
    path = Path(path)
    frame = dataset.to_frame()
    frame.to_csv(path, index=False, float_format="%.17g", na_rep=missing_token)
    return path
