"""Mapping OCR confidence onto the MOS scale with a five-parameter logistic.

The mapped values serve as proxy training targets for the pretraining
stage. The curve y = D + (A - D) / (1 + (x/C)^B)^E is an asymmetric
monotone sigmoid; C and E are kept positive through a log
parametrization and the fit runs multi-start first-order descent on the
transformed parameters.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metrics import plcc, srocc

N_RESTARTS = 8
N_STEPS = 2000
LEARNING_RATE = 1e-2
MONOTONE_GRID = 1001  # dense sampling step 1e-3 on [0, 1]
_X_FLOOR = 1e-12
_Z_MAX = 1e300

MOS_LO, MOS_HI = 0.0, 5.0


class CalibrationError(ValueError):
    """The confidence-to-MOS fit cannot be performed or found no usable curve."""


@dataclass(frozen=True)
class FiveParamLogistic:
    """Parameters of the asymmetric logistic y = D + (A-D)/(1+(x/C)^B)^E."""
    A: float  # asymptote approached as x -> 0 (for B > 0)
    D: float  # asymptote approached as x -> +inf (for B > 0)
    C: float  # inflection scale, > 0
    B: float  # slope
    E: float  # asymmetry, > 0

    def __post_init__(self):
        if not (self.C > 0 and self.E > 0):
            raise CalibrationError(f"C and E must be positive, got C={self.C}, E={self.E}")

    def to_json(self) -> str:
        return json.dumps({"A": self.A, "D": self.D, "C": self.C,
                           "B": self.B, "E": self.E}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "FiveParamLogistic":
        d = json.loads(text)
        return cls(A=d["A"], D=d["D"], C=d["C"], B=d["B"], E=d["E"])


def _raw_curve(x: np.ndarray, a, d, c, b, e) -> np.ndarray:
    """Unclamped curve value; safe at x = 0 for negative slopes."""
    u = np.maximum(x, _X_FLOOR) / c
    with np.errstate(over="ignore"):
        z = np.clip(np.power(u, b), 0.0, _Z_MAX)
        den = np.clip(np.power(1.0 + z, e), 1.0, _Z_MAX)
    return d + (a - d) / den


def eval_5pl(m: FiveParamLogistic, x):
    """Evaluate the mapping at confidence x, clamped to the MOS range.

    Inputs outside [0, 1] are clamped with a warning.
    """
    arr = np.asarray(x, dtype=np.float64)
    if (arr < 0).any() or (arr > 1).any():
        warnings.warn("confidence outside [0, 1]; clamping", stacklevel=2)
        arr = np.clip(arr, 0.0, 1.0)
    y = np.clip(_raw_curve(arr, m.A, m.D, m.C, m.B, m.E), MOS_LO, MOS_HI)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(y)
    return y


def is_monotone(m: FiveParamLogistic, tol: float = 1e-12) -> bool:
    """Check monotonicity of the clamped map by dense sampling on [0, 1]."""
    grid = np.linspace(0.0, 1.0, MONOTONE_GRID)
    y = np.clip(_raw_curve(grid, m.A, m.D, m.C, m.B, m.E), MOS_LO, MOS_HI)
    dy = np.diff(y)
    return bool((dy >= -tol).all() or (dy <= tol).all())


@dataclass
class FitReport:
    params: FiveParamLogistic
    mse: float
    raw_plcc: float
    raw_srocc: float
    mapped_plcc: float
    mapped_srocc: float
    monotone: bool
    restart_index: int

    def to_json(self) -> str:
        return json.dumps({
            "params": {"A": self.params.A, "D": self.params.D, "C": self.params.C,
                       "B": self.params.B, "E": self.params.E},
            "mse": self.mse,
            "raw_plcc": self.raw_plcc, "raw_srocc": self.raw_srocc,
            "mapped_plcc": self.mapped_plcc, "mapped_srocc": self.mapped_srocc,
            "monotone": self.monotone, "restart_index": self.restart_index,
        }, sort_keys=True)


def _loss_and_grad(theta: np.ndarray, x: np.ndarray, y: np.ndarray):
    """MSE and its gradient in transformed coordinates (A, D, ln C, B, ln E)."""
    a, d, lc, b, le = theta
    c = math.exp(lc)
    e = math.exp(le)
    u = np.maximum(x, _X_FLOOR) / c
    logu = np.log(u)
    with np.errstate(over="ignore"):
        z = np.clip(np.exp(np.clip(b * logu, -700.0, 690.0)), 0.0, _Z_MAX)
        den = np.clip(np.power(1.0 + z, e), 1.0, _Z_MAX)
    inv = 1.0 / den
    pred = d + (a - d) * inv
    r = pred - y
    n = x.shape[0]
    loss = float((r * r).mean())
    gy = 2.0 * r / n

    # dy/dz = -(a-d) e (1+z)^(-e-1);  dz/db = z ln u;  dz/dC = -b z / C
    dyd_inv = gy * inv
    dz = -(a - d) * e * inv / (1.0 + z)
    ga = float(dyd_inv.sum())
    gd = float((gy * (1.0 - inv)).sum())
    gb = float((gy * dz * z * logu).sum())
    gC = float((gy * dz * (-b) * z / c).sum())
    gE = float((gy * -(a - d) * np.log1p(z) * inv).sum())
    # chain through the log parametrization
    return loss, np.array([ga, gd, gC * c, gb, gE * e])


def _descend(theta0: np.ndarray, x: np.ndarray, y: np.ndarray,
             steps: int = N_STEPS, lr: float = LEARNING_RATE) -> np.ndarray:
    """Adam descent at a fixed learning rate on the transformed parameters."""
    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, steps + 1):
        _, g = _loss_and_grad(theta, x, y)
        if not np.isfinite(g).all():
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (np.sqrt(vh) + eps)
    return theta


def _theta_to_params(theta: np.ndarray) -> FiveParamLogistic:
    a, d, lc, b, le = (float(v) for v in theta)
    return FiveParamLogistic(A=a, D=d, C=math.exp(lc), B=b, E=math.exp(le))


def fit_5pl(pairs: Sequence[tuple], rng: np.random.Generator) -> FitReport:
    """Least-squares fit of the 5PL curve to (confidence, mos) pairs.

    Runs N_RESTARTS randomized starts and keeps the best restart whose
    clamped map is monotone on [0, 1]; a non-monotone global optimum
    falls back to the best monotone restart.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise CalibrationError("pairs must be a sequence of (confidence, mos)")
    x, y = arr[:, 0], arr[:, 1]
    if x.shape[0] < 10:
        raise CalibrationError(f"need at least 10 pairs, got {x.shape[0]}")
    span = float(x.max() - x.min())
    if span < 0.3:
        raise CalibrationError(
            f"confidence values span only {span:.3f} of [0,1]; need >= 0.3")

    slope_sign = 1.0 if np.corrcoef(x, y)[0, 1] >= 0 else -1.0
    c_base = float(np.clip(np.median(x), 0.05, 0.95))
    base = np.array([float(y.min()), float(y.max()),
                     math.log(c_base), 2.0 * slope_sign, 0.0])

    candidates = []
    for k in range(N_RESTARTS):
        theta0 = base.copy()
        if k > 0:
            theta0[0] += rng.normal(0.0, 0.4)
            theta0[1] += rng.normal(0.0, 0.4)
            theta0[2] += rng.normal(0.0, 0.5)
            theta0[3] *= math.exp(rng.normal(0.0, 0.5))
            theta0[4] += rng.normal(0.0, 0.5)
        theta = _descend(theta0, x, y)
        if not np.isfinite(theta).all():
            continue
        loss, _ = _loss_and_grad(theta, x, y)
        params = _theta_to_params(theta)
        candidates.append((loss, k, params, is_monotone(params)))

    if not candidates:
        raise CalibrationError("all restarts diverged")
    candidates.sort(key=lambda t: (t[0], t[1]))
    monotone_ones = [c for c in candidates if c[3]]
    if not monotone_ones:
        raise CalibrationError("no restart produced a monotone mapping")
    loss, idx, params, _ = monotone_ones[0]

    mapped = eval_5pl(params, np.clip(x, 0.0, 1.0))
    return FitReport(
        params=params,
        mse=loss,
        raw_plcc=plcc(x, y),
        raw_srocc=srocc(x, y),
        mapped_plcc=plcc(mapped, y),
        mapped_srocc=srocc(mapped, y),
        monotone=True,
        restart_index=idx,
    )
