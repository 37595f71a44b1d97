"""Procedural synthetic text crops with a controllable degradation level.

Crops imitate rendered glyphs with random polyline strokes laid out in
character boxes. A scalar degradation d in [0, 1] drives stroke
breakage, vertex jitter, Gaussian blur, ink fade and pixel noise;
synthetic MOS is 5*(1-d) plus bounded noise and a synthetic recognizer
confidence decays monotonically in d. Everything is deterministic per
seed, which makes desk-scale end-to-end benchmarks reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import List, Optional

import numpy as np
from PIL import Image, ImageDraw

from .harness import GroupRecord, Member

SYNTH_CONFIG_VERSION = 1


@dataclass(frozen=True)
class SynthConfig:
    """Versioned parameters of the degradation model.

    Acceptance numbers depend on these values; bump the version when
    changing any of them.
    """
    version: int = SYNTH_CONFIG_VERSION
    canvas_w: int = 144
    canvas_h: int = 48
    glyphs_min: int = 5
    glyphs_max: int = 8
    strokes_per_glyph: int = 3
    stroke_width: int = 2
    ink_level: int = 25
    background_level: int = 232
    jitter_max: float = 3.5       # px of vertex displacement at d=1
    break_prob_max: float = 0.55  # per-piece drop probability at d=1
    blur_sigma_max: float = 2.2   # Gaussian sigma at d=1
    fade_max: float = 0.55        # fraction of ink-to-background fade at d=1
    noise_max: float = 18.0       # pixel noise stddev at d=1
    mos_noise: float = 0.25       # half-width of the uniform MOS noise
    conf_gamma: float = 1.6       # confidence = (1-d)^gamma + noise
    conf_noise: float = 0.04
    group_spread: float = 0.18    # half-width of within-group degradation
    oq_slope: float = 0.6         # overall MOS = slope*tq + offset terms
    oq_base: float = 1.1
    oq_noise: float = 0.3
    oq_generator_spread: float = 0.35

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


@dataclass
class SynthCrop:
    """One generated crop with its ground-truth annotations."""
    crop_id: str
    image: np.ndarray  # H x W x 3 uint8
    degradation: float
    mos: float         # text-quality MOS in [0, 5]
    oq_mos: float      # paired overall-quality MOS in [0, 5]
    ocr_confidence: float
    generator: str
    prompt: str
    seed_index: int
    area_fraction: float


@dataclass
class SynthDataset:
    crops: List[SynthCrop]
    groups: List[GroupRecord]
    config: SynthConfig


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate edges; identity for sigma<=0."""
    if sigma <= 1e-3:
        return img
    radius = max(1, int(math.ceil(3.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()

    def conv_axis(a, axis):
        out = np.zeros_like(a)
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        ap = np.pad(a, pad, mode="edge")
        for i, kv in enumerate(kernel):
            if axis == 0:
                out += kv * ap[i:i + a.shape[0], :]
            else:
                out += kv * ap[:, i:i + a.shape[1]]
        return out

    return conv_axis(conv_axis(img, 0), 1)


def _glyph_strokes(rng: np.random.Generator, box, cfg: SynthConfig):
    """Random polylines inside a glyph box, biased toward stems and bars."""
    x0, y0, x1, y1 = box
    strokes = []
    for _ in range(cfg.strokes_per_glyph):
        kind = rng.integers(3)
        if kind == 0:  # vertical stem
            x = rng.uniform(x0, x1)
            pts = [(x + rng.uniform(-1, 1), y0 + rng.uniform(0, 2)),
                   (x + rng.uniform(-1, 1), y1 - rng.uniform(0, 2))]
        elif kind == 1:  # horizontal bar
            y = rng.uniform(y0, y1)
            pts = [(x0 + rng.uniform(0, 1), y + rng.uniform(-1, 1)),
                   (x1 - rng.uniform(0, 1), y + rng.uniform(-1, 1))]
        else:  # diagonal / zigzag
            n_pts = int(rng.integers(2, 4))
            pts = [(rng.uniform(x0, x1), rng.uniform(y0, y1)) for _ in range(n_pts + 1)]
        strokes.append(pts)
    return strokes


def _break_segment(rng, p0, p1, break_prob):
    """Split a segment into pieces and drop some, simulating broken strokes."""
    pieces = []
    n = 4
    for i in range(n):
        if rng.random() < break_prob:
            continue
        t0, t1 = i / n, (i + 1) / n
        pieces.append(((p0[0] + (p1[0] - p0[0]) * t0, p0[1] + (p1[1] - p0[1]) * t0),
                       (p0[0] + (p1[0] - p0[0]) * t1, p0[1] + (p1[1] - p0[1]) * t1)))
    return pieces


def render_crop(degradation: float, rng: np.random.Generator,
                cfg: Optional[SynthConfig] = None) -> np.ndarray:
    """Render one stroke-pattern crop at the given degradation level."""
    cfg = cfg or SynthConfig()
    d = float(np.clip(degradation, 0.0, 1.0))
    w, h = cfg.canvas_w, cfg.canvas_h
    bg = cfg.background_level + rng.integers(-12, 13)
    ink = cfg.ink_level + rng.integers(-10, 11)
    fade = d * cfg.fade_max
    ink_eff = int(round(ink + (bg - ink) * fade))

    img = Image.new("L", (w, h), int(bg))
    draw = ImageDraw.Draw(img)

    n_glyphs = int(rng.integers(cfg.glyphs_min, cfg.glyphs_max + 1))
    margin = 4
    glyph_w = (w - 2 * margin) / n_glyphs
    top = margin + rng.uniform(0, 4)
    bottom = h - margin - rng.uniform(0, 4)
    jitter = d * cfg.jitter_max
    break_prob = d * cfg.break_prob_max

    for gi in range(n_glyphs):
        gx0 = margin + gi * glyph_w + 1
        gx1 = margin + (gi + 1) * glyph_w - 2
        for pts in _glyph_strokes(rng, (gx0, top, gx1, bottom), cfg):
            jpts = [(x + rng.normal(0, jitter), y + rng.normal(0, jitter))
                    for x, y in pts] if jitter > 0 else pts
            for p0, p1 in zip(jpts, jpts[1:]):
                for q0, q1 in _break_segment(rng, p0, p1, break_prob):
                    draw.line([q0, q1], fill=ink_eff, width=cfg.stroke_width)

    arr = np.asarray(img, dtype=np.float64)
    arr = _gaussian_blur(arr, d * cfg.blur_sigma_max)
    if d > 0 and cfg.noise_max > 0:
        arr = arr + rng.normal(0.0, d * cfg.noise_max, size=arr.shape)
    arr = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    return np.repeat(arr[:, :, None], 3, axis=2)


def _synthetic_mos(d: float, rng: np.random.Generator, cfg: SynthConfig) -> float:
    return float(np.clip(5.0 * (1.0 - d) + rng.uniform(-cfg.mos_noise, cfg.mos_noise),
                         0.0, 5.0))


def _synthetic_confidence(d: float, rng: np.random.Generator, cfg: SynthConfig) -> float:
    return float(np.clip((1.0 - d) ** cfg.conf_gamma + rng.normal(0.0, cfg.conf_noise),
                         0.0, 1.0))


def synth_generate(n_groups: int, k: int, config: Optional[SynthConfig] = None,
                   seed: int = 0, id_prefix: str = "synth") -> SynthDataset:
    """Generate n_groups * k crops organized as (generator, prompt) groups.

    Generators carry distinct base degradation levels (covering [0, 1]),
    each group perturbs that base per prompt, and members vary around it
    by the configured within-group spread. Deterministic per seed.
    """
    if n_groups < 1 or k < 1:
        raise ValueError("n_groups and k must be positive")
    cfg = config or SynthConfig()
    n_generators = max(2, min(10, n_groups))
    crops: List[SynthCrop] = []
    groups: List[GroupRecord] = []
    master = np.random.default_rng([seed, cfg.version])
    gen_levels = np.linspace(0.08, 0.85, n_generators)
    gen_oq_offsets = master.uniform(-cfg.oq_generator_spread,
                                    cfg.oq_generator_spread, size=n_generators)

    for gidx in range(n_groups):
        gen_i = gidx % n_generators
        generator = f"gen{gen_i:02d}"
        prompt = f"prompt{gidx // n_generators:03d}"
        group_rng = np.random.default_rng([seed, cfg.version, gidx])
        base = float(np.clip(gen_levels[gen_i] + group_rng.uniform(-0.1, 0.1), 0.0, 1.0))
        members = []
        for m in range(k):
            crop_rng = np.random.default_rng([seed, cfg.version, gidx, m])
            d = float(np.clip(base + crop_rng.uniform(-cfg.group_spread, cfg.group_spread),
                              0.0, 1.0))
            image = render_crop(d, crop_rng, cfg)
            tq = _synthetic_mos(d, crop_rng, cfg)
            oq = float(np.clip(
                cfg.oq_slope * tq + cfg.oq_base + gen_oq_offsets[gen_i]
                + crop_rng.uniform(-cfg.oq_noise, cfg.oq_noise), 0.0, 5.0))
            crop_id = f"{id_prefix}-{gidx:04d}-{m:02d}"
            crops.append(SynthCrop(
                crop_id=crop_id, image=image, degradation=d, mos=tq, oq_mos=oq,
                ocr_confidence=_synthetic_confidence(d, crop_rng, cfg),
                generator=generator, prompt=prompt, seed_index=m,
                area_fraction=float(crop_rng.uniform(0.005, 0.06)),
            ))
            members.append(Member(sample_id=crop_id, tq_mos=tq, oq_mos=oq))
        groups.append(GroupRecord(generator=generator, prompt=prompt, members=members))

    return SynthDataset(crops=crops, groups=groups, config=cfg)
