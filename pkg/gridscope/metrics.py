"""
Estimation error metrics on the state tensor.

* MAPE of the voltage magnitude (percent),
* MAE of the voltage angle (degrees, wrapped to (-180, 180]),
* MAE of active and reactive power (kW, kVAr) over nonzero-load phases only.

Absolute errors are used in every sum. The default scope is the held-out
entries (mask == 0); ``scope="all"`` evaluates every entry. A metric with no
entry in scope is reported as ``None``, not zero.
"""

from __future__ import annotations
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .feeder import ABS_V, IM_V, P, Q, RE_V, StateTensorMeta
from .tensor import check_mask, check_tensor3

SCOPES = ("held_out", "all")
METRICS = ("mape_vmag", "mae_angle", "mae_p", "mae_q")
METRIC_LABELS = {
    "mape_vmag": "MAPE(|V|) %",
    "mae_angle": "MAE(theta) deg",
    "mae_p": "MAE(P) kW",
    "mae_q": "MAE(Q) kVAr",
}


@dataclass
class MetricsReport:
    mape_vmag: Optional[float]
    mae_angle: Optional[float]
    mae_p: Optional[float]
    mae_q: Optional[float]
    n: Dict[str, int] = field(default_factory=dict)
    scope: str = "held_out"

    def values(self) -> Dict[str, Optional[float]]:
        return {m: getattr(self, m) for m in METRICS}

    def to_dict(self) -> Dict:
        return {**self.values(), "n": dict(self.n), "scope": self.scope}


@dataclass
class AggregateReport:
    mean: MetricsReport
    std: Dict[str, Optional[float]]
    n_runs: int

    def to_dict(self) -> Dict:
        return {"mean": self.mean.to_dict(), "std": dict(self.std), "n_runs": self.n_runs}


def wrap_degrees(d: np.ndarray) -> np.ndarray:
    """Reduce angle differences to (-180, 180]."""
    w = np.mod(d + 180.0, 360.0) - 180.0
    return np.where(w == -180.0, 180.0, w)


def _mean_or_none(values: np.ndarray) -> Optional[float]:
    return float(math.fsum(values) / values.size) if values.size else None


def evaluate(truth, estimate, M, meta: StateTensorMeta, scope: str = "held_out",
             exclude_phases: Iterable[int] = ()) -> MetricsReport:
    """Compare ``estimate`` against ``truth`` on the entries selected by ``scope``.

    ``exclude_phases`` drops phases whose factor rows could not be estimated.
    The angle of a (phase, time) pair is in scope when either of its
    real/imaginary entries is.
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    truth = check_tensor3(truth, "truth")
    estimate = check_tensor3(estimate, "estimate")
    if truth.shape != estimate.shape or truth.shape != meta.dims:
        raise ValueError(f"dims differ: truth {truth.shape}, estimate {estimate.shape}, meta {meta.dims}")
    M = check_mask(M, truth.shape)

    keep = np.ones(meta.n_phases, dtype=bool)
    keep[list(exclude_phases)] = False
    hidden = ~M if scope == "held_out" else np.ones_like(M)
    loaded = keep & ~np.asarray(meta.zero_injection, dtype=bool)

    sel = hidden[:, ABS_V, :] & keep[:, None]
    t = truth[:, ABS_V, :][sel]
    if np.any(t == 0):
        raise ValueError("voltage magnitude is zero in scope; MAPE undefined")
    mape = _mean_or_none(np.abs(t - estimate[:, ABS_V, :][sel]) / np.abs(t))

    sel = (hidden[:, RE_V, :] | hidden[:, IM_V, :]) & keep[:, None]
    theta_t = np.degrees(np.arctan2(truth[:, IM_V, :], truth[:, RE_V, :]))
    theta_e = np.degrees(np.arctan2(estimate[:, IM_V, :], estimate[:, RE_V, :]))
    angle = _mean_or_none(np.abs(wrap_degrees(theta_e - theta_t)[sel]))

    maes = {}
    counts = {"mape_vmag": int(t.size), "mae_angle": int(sel.sum())}
    for name, j in (("mae_p", P), ("mae_q", Q)):
        s = hidden[:, j, :] & loaded[:, None]
        maes[name] = _mean_or_none(np.abs(truth[:, j, :][s] - estimate[:, j, :][s]))
        counts[name] = int(s.sum())

    return MetricsReport(None if mape is None else 100.0 * mape, angle,
                         maes["mae_p"], maes["mae_q"], counts, scope)


def aggregate(runs: Sequence[MetricsReport]) -> AggregateReport:
    """Mean and (population) standard deviation per metric, counts summed.

    Sums are exactly rounded, so the result does not depend on run order.
    """
    if not runs:
        raise ValueError("nothing to aggregate")
    scopes = {r.scope for r in runs}
    if len(scopes) != 1:
        raise ValueError(f"mixed scopes {sorted(scopes)}")
    means: Dict[str, Optional[float]] = {}
    stds: Dict[str, Optional[float]] = {}
    for m in METRICS:
        vals = [getattr(r, m) for r in runs if getattr(r, m) is not None]
        if not vals:
            means[m] = stds[m] = None
            continue
        mu = math.fsum(vals) / len(vals)
        means[m] = mu
        stds[m] = math.sqrt(math.fsum((v - mu) ** 2 for v in vals) / len(vals))
    counts: Dict[str, int] = {}
    for r in runs:
        for k, v in r.n.items():
            counts[k] = counts.get(k, 0) + v
    mean = MetricsReport(means["mape_vmag"], means["mae_angle"], means["mae_p"], means["mae_q"],
                         counts, scopes.pop())
    return AggregateReport(mean, stds, len(runs))


# ===== Output =====
def _cell(mean: Optional[float], std: Optional[float] = None) -> str:
    if mean is None:
        return "undefined"
    return f"{mean:.4g}" if std is None else f"{mean:.4g} ± {std:.2g}"


def metrics_table(rows: Mapping[str, AggregateReport]) -> str:
    """Aligned table: one row per scenario, one column per metric (mean ± std)."""
    frame = pd.DataFrame(
        {METRIC_LABELS[m]: [_cell(a.mean.values()[m], a.std[m]) for a in rows.values()] for m in METRICS},
        index=pd.Index(list(rows.keys()), name="scenario"),
    )
    frame["runs"] = [a.n_runs for a in rows.values()]
    return frame.to_string() + "\n"


def curve_frame(points: Iterable[Dict]) -> pd.DataFrame:
    """Plot-ready curve rows from dicts with ``scenario``, ``measurement_percentage``
    and ``report`` (an AggregateReport)."""
    records: List[Dict] = []
    for pt in points:
        agg: AggregateReport = pt["report"]
        for m in METRICS:
            records.append({
                "scenario": pt["scenario"],
                "measurement_percentage": pt["measurement_percentage"],
                "metric": m,
                "mean": agg.mean.values()[m],
                "std": agg.std[m],
            })
    return pd.DataFrame(records, columns=["scenario", "measurement_percentage", "metric", "mean", "std"])
