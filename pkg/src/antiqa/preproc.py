"""Crop filtering, rectification and conversion to the 2-channel model input.

The model consumes a grayscale channel stacked with a Sobel edge
magnitude channel, both in [0, 1], at a fixed square resolution
(256x256 by default). Detected quadrilateral regions are rectified to a
horizontal orientation with a perspective transform before scoring.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

INPUT_SIZE = 256
CONF_THRESHOLD = 0.2
MIN_HEIGHT = 20

LUMA_R, LUMA_G, LUMA_B = 0.299, 0.587, 0.114
SOBEL_MAX = 4.0 * math.sqrt(2.0)  # max gradient magnitude for inputs in [0,1]

REASON_LOW_CONFIDENCE = "low_confidence"
REASON_TOO_SMALL = "too_small"


class DegenerateQuadError(ValueError):
    """The crop quadrilateral has (near-)zero area or is otherwise unusable."""


@dataclass(frozen=True)
class RawCrop:
    """A detected text region: pixels, source-space corner points, metadata.

    ``quad`` holds 4 (x, y) corner points in source-image coordinates in
    reading order (top-left, top-right, bottom-right, bottom-left).
    """
    pixels: np.ndarray  # H x W x 3 uint8
    quad: np.ndarray    # 4 x 2 float
    ocr_confidence: Optional[float] = None
    source_image_id: str = ""


@dataclass(frozen=True)
class FilterDecision:
    keep: bool
    reason: Optional[str] = None


def quad_side_means(quad: np.ndarray) -> tuple:
    """(mean horizontal edge length, mean vertical edge length)."""
    q = np.asarray(quad, dtype=np.float64)
    top = np.linalg.norm(q[1] - q[0])
    bottom = np.linalg.norm(q[2] - q[3])
    left = np.linalg.norm(q[3] - q[0])
    right = np.linalg.norm(q[2] - q[1])
    return 0.5 * (top + bottom), 0.5 * (left + right)


def quad_area(quad: np.ndarray) -> float:
    """Shoelace area of the quadrilateral."""
    q = np.asarray(quad, dtype=np.float64)
    x, y = q[:, 0], q[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rectified_size(quad: np.ndarray) -> tuple:
    """Output (width, height) for a rectified quad: mean edge lengths,
    rounded up, at least 1."""
    wm, hm = quad_side_means(quad)
    return max(1, math.ceil(wm)), max(1, math.ceil(hm))


def filter_crop(crop: RawCrop, conf_threshold: float = CONF_THRESHOLD,
                min_height: int = MIN_HEIGHT) -> FilterDecision:
    """Keep/discard decision for a detected crop.

    Discards when the recognizer confidence is present and below the
    threshold, or when the rectified height falls under the minimum.
    Pure function of its arguments.
    """
    if crop.ocr_confidence is not None and crop.ocr_confidence < conf_threshold:
        return FilterDecision(keep=False, reason=REASON_LOW_CONFIDENCE)
    _, height = rectified_size(crop.quad)
    if height < min_height:
        return FilterDecision(keep=False, reason=REASON_TOO_SMALL)
    return FilterDecision(keep=True)


def _homography_from_rect(quad: np.ndarray, width: int, height: int) -> np.ndarray:
    """3x3 map sending rectangle corners (0,0),(W,0),(W,H),(0,H) to the quad."""
    src = np.array([[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]])
    dst = np.asarray(quad, dtype=np.float64)
    # direct linear transform with h33 = 1: eight equations, eight unknowns
    rows = []
    rhs = []
    for (sx, sy), (dx, dy) in zip(src, dst):
        rows.append([sx, sy, 1, 0, 0, 0, -sx * dx, -sy * dx])
        rhs.append(dx)
        rows.append([0, 0, 0, sx, sy, 1, -sx * dy, -sy * dy])
        rhs.append(dy)
    try:
        h = np.linalg.solve(np.array(rows), np.array(rhs))
    except np.linalg.LinAlgError as exc:
        raise DegenerateQuadError(f"quad does not define a homography: {exc}") from exc
    return np.append(h, 1.0).reshape(3, 3)


def bilinear_sample(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample image (H x W [x C]) at continuous positions, clamping to edges."""
    h, w = image.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xs - x0
    fy = ys - y0
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    img = image.astype(np.float64)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def rectify(crop: RawCrop) -> np.ndarray:
    """Warp the quad region to an axis-aligned H' x W' x 3 uint8 image.

    The output size is the rounded-up mean of the opposing edge lengths,
    so a region drawn taller than wide comes out with W' > H' once
    de-rotated. Sampling is bilinear through the inverse homography.
    """
    if quad_area(crop.quad) < 1.0:
        raise DegenerateQuadError(
            f"quad area {quad_area(crop.quad):.4f} px^2 is below 1")
    width, height = rectified_size(crop.quad)
    hmat = _homography_from_rect(crop.quad, width, height)
    jj, ii = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    ones = np.ones_like(ii)
    pts = hmat @ np.stack([ii.ravel(), jj.ravel(), ones.ravel()])
    xs = (pts[0] / pts[2]).reshape(height, width)
    ys = (pts[1] / pts[2]).reshape(height, width)
    out = bilinear_sample(crop.pixels, xs, ys)
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def rgb_to_gray(image: np.ndarray) -> np.ndarray:
    """Broadcast-standard luma in [0, 1] from an H x W x 3 uint8 image."""
    img = image.astype(np.float64)
    return (LUMA_R * img[:, :, 0] + LUMA_G * img[:, :, 1] + LUMA_B * img[:, :, 2]) / 255.0


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-d array with half-pixel-center bilinear interpolation.

    An identity-size call reproduces the input exactly.
    """
    h, w = image.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (w / out_w) - 0.5
    xs2, ys2 = np.meshgrid(xs, ys)
    return bilinear_sample(image, xs2, ys2)


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def sobel_magnitude(gray: np.ndarray) -> np.ndarray:
    """Gradient magnitude with the standard 3x3 kernels, replicate padding,
    normalized by the theoretical maximum (4*sqrt(2)) and clipped to [0,1]."""
    padded = np.pad(gray, 1, mode="edge")
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    h, w = gray.shape
    for dy in range(3):
        for dx in range(3):
            window = padded[dy:dy + h, dx:dx + w]
            if _SOBEL_X[dy, dx] != 0.0:
                gx += _SOBEL_X[dy, dx] * window
            if _SOBEL_Y[dy, dx] != 0.0:
                gy += _SOBEL_Y[dy, dx] * window
    return np.clip(np.sqrt(gx * gx + gy * gy) / SOBEL_MAX, 0.0, 1.0)


def to_model_input(image: np.ndarray, input_size: int = INPUT_SIZE) -> np.ndarray:
    """Convert an H x W x 3 uint8 image to the 2 x S x S network input.

    Channel 0 is the resized grayscale; channel 1 is the Sobel magnitude
    of that resized grayscale. Both live in [0, 1].
    """
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {image.shape}")
    gray = bilinear_resize(rgb_to_gray(image), input_size, input_size)
    gray = np.clip(gray, 0.0, 1.0)
    edges = sobel_magnitude(gray)
    return np.stack([gray, edges])
