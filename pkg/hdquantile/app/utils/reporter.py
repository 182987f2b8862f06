"""
Report documents for estimates, contrasts and simulation studies.

Every report is a plain dict with a "kind" key; the structured form is the
stable interface and the text tables are rendered from it.
"""
import math
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel

from app.core.estimator import ContrastEstimate, QuantileEstimate
from app.services.aipw import AipwEstimate
from app.simulation.study import McReport


def to_jsonable(value: Any) -> Any:
    """numpy and pydantic values to JSON types; non-finite floats become null."""
    if isinstance(value, BaseModel):
        return to_jsonable(value.model_dump())
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def _estimate_fields(est: QuantileEstimate) -> Dict[str, Any]:
    out = to_jsonable(est)
    out["lambda"] = out.pop("lambda_")
    out["sigma_hat"] = est.sigma_hat
    out["std_error"] = est.std_error
    return out


def _aipw_fields(est: AipwEstimate) -> Dict[str, Any]:
    out = to_jsonable(est)
    out["lambda"] = out.pop("lambda_")
    out["sigma_hat"] = est.sigma_hat
    return out


def estimate_report(proposed: Optional[QuantileEstimate] = None,
                    aipw: Optional[AipwEstimate] = None) -> Dict[str, Any]:
    results: Dict[str, Any] = {}
    if proposed is not None:
        results["proposed"] = _estimate_fields(proposed)
    if aipw is not None:
        results["aipw"] = _aipw_fields(aipw)
    return {"kind": "estimate", "results": results}


def contrast_report(result: ContrastEstimate) -> Dict[str, Any]:
    groups = []
    for label, est in zip(result.group_labels, result.group_estimates):
        groups.append({"label": label, **_estimate_fields(est)})
    return {
        "kind": "contrast",
        "m_hat": result.m_hat,
        "ci_lower": result.ci_lower,
        "ci_upper": result.ci_upper,
        "std_error": result.std_error,
        "alpha": result.alpha,
        "groups": groups,
    }


def simulation_report(studies: List[Dict[str, McReport]], seed: int) -> Dict[str, Any]:
    docs = []
    for reports in studies:
        first = next(iter(reports.values()))
        docs.append({
            "dgp": first.dgp, "n": first.n, "p": first.p, "tau_level": first.tau_level,
            "q0": first.q0, "n_reps": first.n_reps,
            "estimators": {name: to_jsonable(r) for name, r in reports.items()},
        })
    return {"kind": "simulate", "seed": seed, "studies": docs}


# -- text tables ------------------------------------------------------------

def _num(value: Optional[float], digits: int = 4) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def format_estimate_text(report: Dict[str, Any]) -> str:
    lines = []
    for name, res in report["results"].items():
        level = 1.0 - res["alpha"]
        lines.append(f"[{name}] tau={res['tau_level']}")
        rows = [
            ("q_hat", _num(res["q_hat"], 6)),
            ("sigma_hat", _num(res["sigma_hat"], 6)),
            (f"{level:.0%} CI", f"({_num(res['ci_lower'], 6)}, {_num(res['ci_upper'], 6)})"),
            ("q_pilot", _num(res["q_pilot"], 6)),
            ("eq_residual", f"{res['eq_residual']:.3e}"),
            ("lambda", _num(res["lambda"], 6)),
            ("n / observed", f"{res['n']} / {res.get('n_observed', '-')}"),
        ]
        weights = res.get("weights")
        if weights:
            rows += [
                ("Delta", _num(weights["delta_cap"], 6)),
                ("c_used", _num(weights["c_used"], 2)),
                ("zeta", _num(weights["zeta"], 6)),
                ("imbalance", f"{weights['constraint_residual']:.3e}"),
                ("route", weights["route"]),
            ]
        if "clamp_count" in res:
            rows.append(("clamped probs", str(res["clamp_count"])))
        width = max(len(k) for k, _ in rows)
        lines += [f"  {k.ljust(width)}  {v}" for k, v in rows]
    return "\n".join(lines)


def format_contrast_text(report: Dict[str, Any]) -> str:
    level = 1.0 - report["alpha"]
    header = f"{'Parameter':<14}{'Estimate':>12}  {level:.0%} CI"
    lines = [header, "-" * len(header) + "-" * 22]
    for group in reversed(report["groups"]):
        label = f"m (group {group['label']})"
        lines.append(f"{label:<14}{group['q_hat']:>12.4f}  "
                     f"({group['ci_lower']:.4f}, {group['ci_upper']:.4f})")
    lines.append(f"{'m1 - m0':<14}{report['m_hat']:>12.4f}  "
                 f"({report['ci_lower']:.4f}, {report['ci_upper']:.4f})")
    return "\n".join(lines)


def format_simulation_text(report: Dict[str, Any]) -> str:
    blocks = []
    for study in report["studies"]:
        title = (f"{study['dgp']}  n={study['n']}  p={study['p']}  tau={study['tau_level']}  "
                 f"reps={study['n_reps']}")
        header = f"{'Estimator':<10}{'Bias':>9}{'SD':>9}{'RMSE':>9}{'CP':>8}{'ESD':>9}{'failed':>8}"
        rows = [title, header]
        for name, r in study["estimators"].items():
            rows.append(f"{name:<10}{_num(r['bias']):>9}{_num(r['sd']):>9}{_num(r['rmse']):>9}"
                        f"{_num(r['cp'], 3):>8}{_num(r['esd']):>9}{r['n_failed']:>8}")
        blocks.append("\n".join(rows))
    return "\n\n".join(blocks)
