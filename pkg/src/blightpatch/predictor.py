"""Whole-image inference with half-stride sliding windows and max-threshold aggregation."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import FieldImage, Label
from .errors import IndivisiblePatchSize, PatchTooLarge
from .model import CnnClassifier, ModelState, PatchClassifier

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.8


@dataclass(frozen=True)
class WindowGrid:
    t: int
    rows: int
    cols: int
    row_starts: tuple[int, ...]
    col_starts: tuple[int, ...]

    @property
    def stride(self) -> int:
        return self.t // 2

    @property
    def windows(self) -> list[tuple[int, int]]:
        """Top-left ``(row, col)`` of every window, row-major."""
        return [(r, c) for r in self.row_starts for c in self.col_starts]

    def __len__(self) -> int:
        return self.rows * self.cols


def _starts(extent: int, t: int, edge_cover: bool) -> list[int]:
    starts = list(range(0, extent - t + 1, t // 2))
    if edge_cover and starts[-1] != extent - t:
        starts.append(extent - t)
    return starts


def enumerate_windows(n: int, m: int, t: int, edge_cover: bool = False) -> WindowGrid:
    """Half-stride ``t x t`` windows over an ``n x m`` image.

    By default ``t`` must divide ``n``; window rows and columns then number
    ``2n/t - 1`` and ``2*floor(m/t) - 1`` and the right margin left over when
    ``t`` does not divide ``m`` stays uncovered.  ``edge_cover`` lifts the
    divisibility requirement and appends flush right/bottom windows.
    """
    if t < 1 or t > min(n, m):
        raise PatchTooLarge(f"window size {t} does not fit a {n}x{m} image")
    if t % 2:
        raise IndivisiblePatchSize(f"window size {t} must be even for a half-window stride")
    if n % t and not edge_cover:
        raise IndivisiblePatchSize(f"window size {t} does not divide image height {n}")
    if edge_cover:
        rows, cols = _starts(n, t, True), _starts(m, t, True)
    else:
        half = t // 2
        rows = [i * half for i in range(2 * (n // t) - 1)]
        cols = [j * half for j in range(2 * (m // t) - 1)]
    return WindowGrid(t, len(rows), len(cols), tuple(rows), tuple(cols))


def default_window(n: int) -> int:
    if n % 5:
        raise IndivisiblePatchSize(f"image height {n} is not a multiple of 5; pass the window size explicitly")
    return n // 5


@dataclass(frozen=True, eq=False)
class ImagePrediction:
    grid: WindowGrid
    probabilities: np.ndarray  # rows x cols
    threshold: float
    image_id: str = ""
    positives: list[tuple[int, int, int, int, int, float]] = field(default_factory=list)

    @property
    def max_prob(self) -> float:
        return float(self.probabilities.max())

    @property
    def verdict(self) -> Label:
        return Label.LATE_BLIGHT if self.max_prob >= self.threshold else Label.HEALTHY

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "t": self.grid.t,
            "grid": [self.grid.rows, self.grid.cols],
            "threshold": self.threshold,
            "max_prob": self.max_prob,
            "verdict": self.verdict.slug,
            "positive_windows": [
                {"row": r, "col": c, "top": y, "left": x, "t": t, "probability": p}
                for r, c, y, x, t, p in self.positives
            ],
        }


def aggregate(grid: WindowGrid, probabilities: Sequence[float], threshold: float = DEFAULT_THRESHOLD, image_id: str = "") -> ImagePrediction:
    """Max-threshold rule: late blight iff some window reaches ``threshold`` (inclusive)."""
    probs = np.asarray(probabilities, dtype=np.float64).reshape(grid.rows, grid.cols)
    positives = []
    for (i, j), p in np.ndenumerate(probs):
        if p >= threshold:
            positives.append((i, j, grid.row_starts[i], grid.col_starts[j], grid.t, float(p)))
    positives.sort(key=lambda w: (-w[5], w[0], w[1]))
    return ImagePrediction(grid, probs, float(threshold), image_id, positives)


def predict_image(
    model: PatchClassifier | ModelState,
    img: FieldImage | np.ndarray,
    t: int | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    edge_cover: bool = False,
) -> ImagePrediction:
    pixels = img.pixels if isinstance(img, FieldImage) else img
    image_id = img.id if isinstance(img, FieldImage) else ""
    n, m = pixels.shape[:2]
    t = default_window(n) if t is None else t
    grid = enumerate_windows(n, m, t, edge_cover)
    log.info("%s: %d windows (%dx%d grid, t=%d)", image_id or "image", len(grid), grid.rows, grid.cols, t)
    clf = CnnClassifier(model) if isinstance(model, ModelState) else model
    crops = [pixels[r : r + t, c : c + t] for r, c in grid.windows]
    probs = np.asarray(clf.predict_batch(crops), dtype=np.float64)
    return aggregate(grid, probs, threshold, image_id)


def localization_map(pred: ImagePrediction) -> tuple[np.ndarray, list[tuple[int, int, int]]]:
    """One 8-bit pixel per window (probability x 255) and the positive footprints ``(top, left, t)``."""
    heat = np.clip(np.rint(pred.probabilities * 255.0), 0, 255).astype(np.uint8)
    return heat, [(y, x, t) for _, _, y, x, t, _ in pred.positives]


def write_pgm(path: str | Path, raster: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = raster.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(raster, dtype=np.uint8).tobytes())
    return path


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, dims, maxval, body = data.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def write_window_csv(path: str | Path, pred: ImagePrediction) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["row", "col", "top_left_y", "top_left_x", "t", "probability"])
        for (i, j), p in np.ndenumerate(pred.probabilities):
            out.writerow([i, j, pred.grid.row_starts[i], pred.grid.col_starts[j], pred.grid.t, repr(float(p))])
    return path
