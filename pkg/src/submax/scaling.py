"""Scaling fits and machine-readable experiment reports.

Three growth models are fitted by least squares in transformed
coordinates: ``power`` (log y against log x), ``log`` (y against log x)
and ``sqrtlog`` (y^2 against log x).
"""

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from sklearn.base import BaseEstimator, RegressorMixin

from .errors import DomainError, ReportIOError

MODELS = ("power", "log", "sqrtlog")


def _transform(x, y, model):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if model not in MODELS:
        raise DomainError(f"unknown model {model!r}; expected one of {', '.join(MODELS)}")
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError("x and y must be 1D arrays of equal length")
    if np.any(x <= 0) or np.any(y <= 0) or not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise DomainError("scaling fits need positive finite x and y")
    if model == "power":
        return np.log(x), np.log(y)
    if model == "log":
        return np.log(x), y
    return np.log(x), y * y


def _r2(t, u, slope, intercept):
    resid = u - (slope * t + intercept)
    ss_res = float(resid @ resid)
    ss_tot = float(((u - u.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res <= 1e-24 * max(1.0, float(u @ u)) else 0.0
    return min(1.0, max(0.0, 1.0 - ss_res / ss_tot))


def fit_scaling(points, model="power"):
    """Least-squares fit of ``points`` (pairs (x, y)) under ``model``.

    Returns ``(params, r2)`` with params ``{"slope", "intercept"}`` in the
    transformed coordinates. Needs at least 3 points.
    """
    pts = np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise DomainError("points must be (x, y) pairs")
    if len(pts) < 3:
        raise DomainError(f"need at least 3 points, got {len(pts)}")
    t, u = _transform(pts[:, 0], pts[:, 1], model)
    if np.ptp(t) == 0:
        raise DomainError("x values must not all coincide")
    res = stats.linregress(t, u)
    params = {"slope": float(res.slope), "intercept": float(res.intercept)}
    return params, _r2(t, u, res.slope, res.intercept)


class ScalingFit(RegressorMixin, BaseEstimator):
    """Estimator form of :func:`fit_scaling`; ``score`` is R^2 in transformed coordinates."""

    def __init__(self, model="power"):
        self.model = model

    def fit(self, X, y):
        x = np.asarray(X, float).reshape(-1)
        params, r2 = fit_scaling(np.column_stack([x, np.asarray(y, float)]), self.model)
        self.slope_ = params["slope"]
        self.intercept_ = params["intercept"]
        self.r2_ = r2
        return self

    def predict(self, X):
        t = np.log(np.asarray(X, float).reshape(-1))
        u = self.slope_ * t + self.intercept_
        if self.model == "power":
            return np.exp(u)
        if self.model == "sqrtlog":
            return np.sqrt(np.maximum(u, 0.0))
        return u

    def score(self, X, y, sample_weight=None):
        t, u = _transform(np.asarray(X, float).reshape(-1), y, self.model)
        return _r2(t, u, self.slope_, self.intercept_)


@dataclass
class ScalingReport:
    """Per-point records, the fit and the comparison exponent of one sweep.

    ``records`` are dicts with at least ``parameter``, ``x`` and ``value``
    (None when the point was skipped); runtimes live in ``timings`` and are
    written to a sidecar so the report itself is reproducible byte for byte.
    """

    experiment: str
    sweep: str
    records: list = field(default_factory=list)
    model: str = "power"
    fit: dict = None
    comparison: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def points(self):
        return [(r["x"], r["value"]) for r in self.records if r.get("value") is not None]

    def refit(self):
        pts = self.points()
        self.fit = None
        if self.model in MODELS and len(pts) >= 3 and all(x > 0 and y > 0 for x, y in pts):
            params, r2 = fit_scaling(pts, self.model)
            self.fit = {"model": self.model, **params, "r2": r2}
        return self.fit

    def to_dict(self):
        return {"experiment": self.experiment, "sweep": self.sweep, "model": self.model, "fit": self.fit,
                "comparison": self.comparison, "records": self.records, "config": self.config, "meta": self.meta}

    def to_json(self):
        return json.dumps(_plain(self.to_dict()), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data):
        return cls(data["experiment"], data["sweep"], list(data["records"]), data.get("model", "power"),
                   data.get("fit"), dict(data.get("comparison", {})), dict(data.get("config", {})),
                   dict(data.get("meta", {})))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def series_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([self.sweep, "x", "value"])
        for r in self.records:
            w.writerow([_num(r["parameter"]), _num(r["x"]), "" if r.get("value") is None else _num(r["value"])])
        return buf.getvalue()

    def series_dat(self):
        lines = [f"# x value ({self.experiment})"]
        lines += [f"{_num(x)} {_num(y)}" for x, y in self.points()]
        return "\n".join(lines) + "\n"


def _num(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _plain(obj):
    """JSON-ready copy: numpy scalars and arrays become Python numbers and lists."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    return obj


def emit_report(report, out_dir, stem="report"):
    """Write ``stem.json``, ``stem.csv``, ``stem.dat`` and ``stem.timings.json`` into out_dir.

    Returns the list of written paths. Any I/O failure raises ReportIOError
    naming the path.
    """
    out = Path(out_dir)
    files = {
        out / f"{stem}.json": report.to_json(),
        out / f"{stem}.csv": report.series_csv(),
        out / f"{stem}.dat": report.series_dat(),
        out / f"{stem}.timings.json": json.dumps(_plain(report.timings), sort_keys=True, indent=2) + "\n",
    }
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportIOError(out, exc) from exc
    for path, text in files.items():
        try:
            path.write_text(text)
        except OSError as exc:
            raise ReportIOError(path, exc) from exc
    return list(files)
