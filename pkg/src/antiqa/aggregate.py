"""Pooling of per-crop quality scores into a single image-level score.

Six strategies are provided; all consume (score, area_fraction) pairs.
``area_alpha_mean`` with alpha=0.5 is the exported default, which damps
the dominance of very large crops. Scores live on the 0-5 MOS scale and
area fractions are relative to the full image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

STRATEGIES = ("area_mean", "area_alpha_mean", "coverage_blend",
              "softmin", "bottom_k", "power_mean")

NO_TEXT = "no_text"  # sentinel outcome when an image has no crops and the
                     # policy excludes rather than falling back to the prior


@dataclass(frozen=True)
class ScoredCrop:
    """One scored text region: its predicted quality and area fraction."""
    score: float
    area_fraction: float


@dataclass(frozen=True)
class PoolConfig:
    """Tagged choice of pooling strategy plus its parameters.

    alpha:  exponent on area fractions for the normalized weights
            w_i = a_i^alpha / sum_j a_j^alpha (0^0 treated as 1, so
            alpha=0 gives uniform weights). area_mean pins alpha=1.
    s0:     prior score used by coverage_blend and for empty images.
    a0:     coverage scale of the blend factor beta = 1 - exp(-A/a0).
    tau:    softmin temperature (larger -> closer to the weighted mean).
    k/frac: bottom-k selects k smallest scores; k = max(1, ceil(frac*N))
            when only frac is given; an explicit k wins over frac.
    p:      power-mean exponent (nonzero); scores are clamped to >= eps.
    no_text_policy: 'return_prior' yields s0 for an empty crop list,
            'exclude' yields the NO_TEXT sentinel.
    """
    strategy: str = "area_alpha_mean"
    alpha: float = 0.5
    s0: float = 5.0
    a0: float = 0.03
    tau: float = 1.0
    k: Optional[int] = None
    frac: Optional[float] = 0.2
    p: float = -2.0
    eps: float = 1e-3
    no_text_policy: str = "return_prior"

    def validate(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown pooling strategy {self.strategy!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.p == 0:
            raise ValueError("power-mean exponent must be nonzero")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.s0 < 0:
            raise ValueError("prior s0 must be >= 0")
        if self.k is None and self.frac is None:
            raise ValueError("bottom_k needs k or frac")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.frac is not None and not 0.0 < self.frac <= 1.0:
            raise ValueError("frac must be in (0, 1]")
        if self.no_text_policy not in ("return_prior", "exclude"):
            raise ValueError(f"unknown no_text_policy {self.no_text_policy!r}")


def area_weights(areas: np.ndarray, alpha: float) -> np.ndarray:
    """Normalized weights a_i^alpha / sum a_j^alpha, with 0^0 := 1."""
    if alpha == 0.0:
        w = np.ones_like(areas)
    else:
        w = np.power(areas, alpha)
    total = w.sum()
    if total == 0.0:
        # all-zero areas degenerate to uniform weighting
        return np.full_like(areas, 1.0 / len(areas))
    return w / total


def pool(crops: Sequence[ScoredCrop], config: PoolConfig):
    """Aggregate crop scores into one image score per the configured strategy.

    Returns a float, or the NO_TEXT sentinel for an empty crop list under
    the 'exclude' policy.
    """
    config.validate()
    if len(crops) == 0:
        if config.no_text_policy == "return_prior":
            return float(config.s0)
        return NO_TEXT
    s = np.asarray([c.score for c in crops], dtype=np.float64)
    a = np.asarray([c.area_fraction for c in crops], dtype=np.float64)
    if (a < 0).any():
        raise ValueError("area fractions must be non-negative")

    strat = config.strategy
    if strat == "area_mean":
        return float(area_weights(a, 1.0) @ s)
    if strat == "area_alpha_mean":
        return float(area_weights(a, config.alpha) @ s)
    if strat == "coverage_blend":
        cover = a.sum()
        beta = 1.0 - math.exp(-cover / config.a0)
        mean = area_weights(a, config.alpha) @ s
        return float((1.0 - beta) * config.s0 + beta * mean)
    if strat == "softmin":
        w = area_weights(a, config.alpha)
        return float(_softmin(s, w, config.tau))
    if strat == "bottom_k":
        k = config.k if config.k is not None else max(1, math.ceil(config.frac * len(s)))
        k = min(k, len(s))
        order = np.argsort(s, kind="stable")
        return float(s[order[:k]].mean())
    if strat == "power_mean":
        w = area_weights(a, config.alpha)
        st = np.maximum(s, config.eps)
        return float((w @ np.power(st, config.p)) ** (1.0 / config.p))
    raise AssertionError(strat)


def _softmin(s: np.ndarray, w: np.ndarray, tau: float) -> float:
    """-tau * log(sum w_i exp(-s_i/tau)) via a shifted log-sum-exp."""
    z = -s / tau
    zmax = z.max()
    # weights of zero would otherwise produce log(0)*0 warnings
    nz = w > 0
    lse = zmax + np.log(np.sum(w[nz] * np.exp(z[nz] - zmax)))
    return -tau * lse


@dataclass
class ImagePoolResult:
    """Pooling outcome for a set of images, tracking no-text exclusions."""
    scores: dict = field(default_factory=dict)
    no_text_ids: list = field(default_factory=list)


def pool_images(crops_by_image: dict, config: PoolConfig) -> ImagePoolResult:
    """Pool each image's crop list; record images excluded as text-free."""
    result = ImagePoolResult()
    for image_id in sorted(crops_by_image):
        outcome = pool(crops_by_image[image_id], config)
        if outcome == NO_TEXT:
            result.no_text_ids.append(image_id)
        else:
            result.scores[image_id] = outcome
    return result
