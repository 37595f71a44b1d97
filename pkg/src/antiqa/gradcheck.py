"""Finite-difference gradient auditing.

The checker treats the computation under test as a black box: it builds a
scalar objective by projecting the op output onto a fixed random vector,
runs one taped backward pass for the analytic gradients, and compares
them coordinate by coordinate against central differences of the
objective. The finite-difference side never touches the backward code,
so the two routes stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import GraphTape, Tensor, tsum

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-4
# absolute floor so that near-zero gradient coordinates do not blow up
# the relative error
DEFAULT_ATOL = 1e-7


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    worst_coord: tuple = ()
    passed: bool = True
    n_coords: int = 0
    details: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max_rel_error={self.max_rel_error:.3e} over {self.n_coords} coords"


def scalarize(fn: Callable[..., Tensor], proj_rng: np.random.Generator):
    """Wrap ``fn`` so it returns a scalar via a fixed random projection.

    A projection catches errors a plain sum would miss (e.g. permuted or
    sign-flipped output elements).
    """
    proj = {}

    def wrapped(*tensors):
        out = fn(*tensors)
        key = out.data.shape
        if key not in proj:
            proj[key] = proj_rng.standard_normal(key)
        return tsum(out * Tensor(proj[key].astype(out.data.dtype)))

    return wrapped


def numerical_gradient(f: Callable[[], float], array: np.ndarray,
                       coords: Sequence[tuple], h: float = DEFAULT_STEP) -> np.ndarray:
    """Central-difference d f / d array at the given coordinates.

    ``f`` must re-read ``array`` on every call; the entries are perturbed
    in place and restored afterwards.
    """
    grads = np.empty(len(coords))
    for k, idx in enumerate(coords):
        orig = array[idx]
        array[idx] = orig + h
        fp = f()
        array[idx] = orig - h
        fm = f()
        array[idx] = orig
        grads[k] = (fp - fm) / (2.0 * h)
    return grads


def _pick_coords(shape, max_coords, rng):
    total = int(np.prod(shape)) if shape else 1
    if max_coords is None or total <= max_coords:
        flat = np.arange(total)
    else:
        flat = rng.choice(total, size=max_coords, replace=False)
    if not shape:
        return [()]
    return [tuple(int(v) for v in np.unravel_index(f, shape)) for f in flat]


def check_gradients(name: str, fn: Callable[..., Tensor],
                    inputs: Sequence[np.ndarray],
                    wrt: Optional[Sequence[int]] = None,
                    h: float = DEFAULT_STEP,
                    rtol: float = DEFAULT_RTOL,
                    atol: float = DEFAULT_ATOL,
                    max_coords: Optional[int] = None,
                    seed: int = 0) -> GradCheckResult:
    """Compare taped gradients of ``fn`` against central differences.

    ``fn`` takes one Tensor per entry of ``inputs`` and returns a Tensor
    of any shape. ``wrt`` selects which inputs to differentiate (all by
    default). ``max_coords`` caps the number of checked coordinates per
    input; the full tensor is checked when it is None.
    """
    rng = np.random.default_rng(seed)
    scalar_fn = scalarize(fn, np.random.default_rng(seed + 1))
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    if wrt is None:
        wrt = range(len(arrays))
    wrt = list(wrt)

    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    tape = GraphTape()
    with tape:
        loss = scalar_fn(*tensors)
    tape.backward(loss)

    result = GradCheckResult(name=name, max_rel_error=0.0)
    for i in wrt:
        arr = arrays[i]

        def f():
            fresh = [Tensor(a) for a in arrays]
            return scalar_fn(*fresh).item()

        coords = _pick_coords(arr.shape, max_coords, rng)
        num = numerical_gradient(f, arr, coords, h=h)
        ana_full = tensors[i].grad
        if ana_full is None:
            ana_full = np.zeros_like(arr)
        ana = np.array([ana_full[c] for c in coords])
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), atol / rtol)
        rel = np.abs(ana - num) / denom
        result.n_coords += len(coords)
        worst = int(np.argmax(rel))
        if rel[worst] > result.max_rel_error:
            result.max_rel_error = float(rel[worst])
            result.worst_coord = (i, coords[worst])
        result.details.append((i, float(rel.max())))
    result.passed = result.max_rel_error < rtol
    return result


def nudge_from_kinks(arr: np.ndarray, threshold: float = 1e-3) -> np.ndarray:
    """Push entries away from zero so FD steps do not cross ReLU-style kinks."""
    out = arr.copy()
    small = np.abs(out) < threshold
    out[small] = threshold * np.where(out[small] >= 0, 1.0, -1.0) * 1.5
    return out
