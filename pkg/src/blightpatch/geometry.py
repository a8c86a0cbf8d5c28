"""Raster geometry: rotation, blank-free inscribed rectangles, patch sampling, resizing.

Rasters are plain numpy ``uint8`` arrays shaped ``(rows, cols)`` for masks and
``(rows, cols, 3)`` for RGB.  Continuous coordinates put the centre of pixel
``(r, c)`` at ``(c + 0.5, r + 0.5)``.

A rotation by ``theta`` turns the image counter-clockwise as displayed, about
its centre, so ``theta = pi/2`` is ``np.rot90``.  The rotated frame used for
patch positions is the largest blank-free axis-aligned rectangle of the rotated
image, itself centred on the image centre.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import InvalidAngle, SquareOutOfBounds

Interp = Literal["bilinear", "nearest"]

# Slack for floating error when testing whether a sample lands in the source.
_EDGE_EPS = 1e-6


@dataclass(frozen=True)
class InscribedRect:
    width: int
    height: int

    @property
    def area(self) -> int:
        return self.width * self.height


def check_angle(theta: float) -> float:
    theta = float(theta)
    if not (-math.pi <= theta <= math.pi) or math.isnan(theta):
        raise InvalidAngle(f"theta={theta!r} outside [-pi, pi]")
    return theta


def inscribed_rect_exact(w: float, h: float, theta: float) -> tuple[float, float]:
    """Real-valued width/height of the max-area rectangle inside ``w x h`` rotated by ``theta``."""
    if w <= 0 or h <= 0:
        return 0.0, 0.0
    sin_a = abs(math.sin(theta))
    cos_a = abs(math.cos(theta))
    wide = w >= h
    long_side, short_side = (w, h) if wide else (h, w)
    if short_side <= 2.0 * sin_a * cos_a * long_side or abs(sin_a - cos_a) < 1e-10:
        # Half-constrained: two corners touch the long sides only.
        half = 0.5 * short_side
        if wide:
            return half / sin_a, half / cos_a
        return half / cos_a, half / sin_a
    cos_2a = cos_a * cos_a - sin_a * sin_a
    return (w * cos_a - h * sin_a) / cos_2a, (h * cos_a - w * sin_a) / cos_2a


def max_inscribed_rect(w: int, h: int, theta: float) -> InscribedRect:
    """Largest blank-free axis-aligned rectangle of a ``w x h`` image rotated by ``theta``.

    The real-valued optimum is floored to whole pixels.  Degenerate slivers may
    floor to zero.
    """
    if w < 1 or h < 1:
        raise ValueError(f"image dims must be positive, got {w}x{h}")
    theta = check_angle(theta)
    rw, rh = inscribed_rect_exact(w, h, theta)
    # Bounded by the rotated bounding box; the 1e-7 nudge absorbs cos(pi/2) != 0.
    return InscribedRect(max(0, math.floor(rw + 1e-7)), max(0, math.floor(rh + 1e-7)))


def rotated_to_source(
    theta: float, w: int, h: int, rect: InscribedRect, x: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Map continuous rotated-frame coordinates to continuous source coordinates."""
    dx = x - rect.width / 2.0
    dy = y - rect.height / 2.0
    c, s = math.cos(theta), math.sin(theta)
    sx = dx * c - dy * s + w / 2.0
    sy = dx * s + dy * c + h / 2.0
    return sx, sy


def sample_points(
    img: np.ndarray, rows: np.ndarray, cols: np.ndarray, interp: Interp, fill: int = 0
) -> np.ndarray:
    """Sample ``img`` at fractional pixel-index coordinates.

    Points more than half a pixel outside the raster receive ``fill``; points in
    that half-pixel rim are clamped to the edge pixel.
    """
    h, w = img.shape[:2]
    inside = (
        (rows >= -0.5 - _EDGE_EPS)
        & (rows <= h - 0.5 + _EDGE_EPS)
        & (cols >= -0.5 - _EDGE_EPS)
        & (cols <= w - 0.5 + _EDGE_EPS)
    )
    r = np.clip(rows, 0.0, h - 1.0)
    c = np.clip(cols, 0.0, w - 1.0)
    if interp == "nearest":
        ri = np.minimum(np.floor(r + 0.5).astype(np.intp), h - 1)
        ci = np.minimum(np.floor(c + 0.5).astype(np.intp), w - 1)
        out = img[ri, ci]
    elif interp == "bilinear":
        r0 = np.floor(r).astype(np.intp)
        c0 = np.floor(c).astype(np.intp)
        r1 = np.minimum(r0 + 1, h - 1)
        c1 = np.minimum(c0 + 1, w - 1)
        fr = r - r0
        fc = c - c0
        if img.ndim == 3:
            fr = fr[..., None]
            fc = fc[..., None]
        src = img.astype(np.float64)
        top = src[r0, c0] * (1.0 - fc) + src[r0, c1] * fc
        bottom = src[r1, c0] * (1.0 - fc) + src[r1, c1] * fc
        out = np.clip(np.rint(top * (1.0 - fr) + bottom * fr), 0, 255).astype(np.uint8)
    else:
        raise ValueError(f"unknown interpolation {interp!r}")
    if not inside.all():
        out = out.copy()
        out[~inside] = fill
    return out


def sample_rotated_square(
    img: np.ndarray,
    theta: float,
    top_left: tuple[int, int],
    t: int,
    interp: Interp = "bilinear",
    fill: int = 0,
) -> np.ndarray:
    """Extract the ``t x t`` square at ``top_left = (x, y)`` of the rotated, cropped image.

    ``top_left`` is measured inside the inscribed rectangle returned by
    :func:`max_inscribed_rect`; the rotated image is never materialised.

    Raises:
        SquareOutOfBounds: if the square leaves the inscribed rectangle.
    """
    theta = check_angle(theta)
    h, w = img.shape[:2]
    rect = max_inscribed_rect(w, h, theta)
    x0, y0 = int(top_left[0]), int(top_left[1])
    if t < 1 or x0 < 0 or y0 < 0 or x0 + t > rect.width or y0 + t > rect.height:
        raise SquareOutOfBounds(
            f"{t}x{t} square at (x={x0}, y={y0}) exceeds inscribed rect "
            f"{rect.width}x{rect.height} for theta={theta:.6f}"
        )
    u = np.arange(t, dtype=np.float64) + 0.5
    xs, ys = np.meshgrid(x0 + u, y0 + u)
    sx, sy = rotated_to_source(theta, w, h, rect, xs, ys)
    return sample_points(img, sy - 0.5, sx - 0.5, interp, fill)


def _axis_positions(n_in: int, n_out: int) -> np.ndarray:
    # Corner-aligned: first and last output samples land on the first and last input pixels.
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def resize(patch: np.ndarray, s: int, interp: Interp = "bilinear") -> np.ndarray:
    """Resize to ``s x s`` with corner-aligned sampling; a 1-pixel target samples the centre."""
    if s < 1:
        raise ValueError(f"target size must be >= 1, got {s}")
    h, w = patch.shape[:2]
    if (h, w) == (s, s):
        return patch.copy()
    rows = _axis_positions(h, s)
    cols = _axis_positions(w, s)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return sample_points(patch, rr, cc, interp)
