"""Random rotated-patch extraction and mask-based labelling.

Each patch is drawn by rotating the source by a uniform angle in [-pi, pi],
picking a side length uniformly from the zoom range (a fraction of the shorter
image side), and placing the square uniformly inside the blank-free inscribed
rectangle.  Diseased sources push the same transform through their mask.

Random streams: image ``i`` of a patch set generated with ``seed`` draws from
``PCG64(SeedSequence(seed, spawn_key=(i,)))``, so results do not depend on how
images are scheduled across workers.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .dataset import SYMPTOM, Dataset, FieldImage, Label, read_png, write_png
from .errors import BlightPatchError, InvalidMaskValue, MaskDimensionMismatch, PatchCannotFit, PatchSetFormatError

log = logging.getLogger(__name__)

ZOOM_RANGE = (0.15, 0.25)
MAX_REDRAWS = 100
PATCHSET_VERSION = 1


@dataclass(frozen=True)
class PatchSpec:
    theta: float
    t: int
    top_left: tuple[int, int]
    source_image_id: str = ""


@dataclass(frozen=True, eq=False)
class LabeledPatch:
    pixels: np.ndarray
    label: Label
    spec: PatchSpec
    symptom_pixel_count: int


@dataclass(frozen=True, eq=False)
class PatchSet:
    patches: tuple[LabeledPatch, ...]
    rho: int
    seed: int
    manifest_digest: str

    def __len__(self) -> int:
        return len(self.patches)

    def labels(self) -> np.ndarray:
        return np.array([int(p.label) for p in self.patches], dtype=np.int64)

    def label_ratio(self) -> float:
        return float(self.labels().mean()) if self.patches else 0.0

    def records(self) -> list[dict]:
        return [
            {
                "file": f"p{i:06d}.png",
                "source_image_id": p.spec.source_image_id,
                "theta": p.spec.theta,
                "t": p.spec.t,
                "x": p.spec.top_left[0],
                "y": p.spec.top_left[1],
                "label": p.label.slug,
                "symptom_pixel_count": p.symptom_pixel_count,
            }
            for i, p in enumerate(self.patches)
        ]

    def digest(self) -> str:
        """Content hash over metadata and raw patch pixels (not PNG bytes)."""
        h = hashlib.sha256()
        header = {"rho": self.rho, "seed": self.seed, "manifest_digest": self.manifest_digest}
        h.update(json.dumps(header, sort_keys=True).encode())
        for rec, p in zip(self.records(), self.patches):
            h.update(json.dumps(rec, sort_keys=True).encode())
            h.update(np.ascontiguousarray(p.pixels).tobytes())
        return h.hexdigest()

    def subset(self, keep_image_ids) -> list[LabeledPatch]:
        keep = set(keep_image_ids)
        return [p for p in self.patches if p.spec.source_image_id in keep]


def image_stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def zoom_bounds(l: int, zoom: tuple[float, float] = ZOOM_RANGE) -> tuple[int, int]:
    """Integer side-length range ``[ceil(lo*l), floor(hi*l)]``."""
    lo = math.ceil(zoom[0] * l - 1e-9)
    hi = math.floor(zoom[1] * l + 1e-9)
    return max(lo, 1), hi


def draw_patch_spec(
    rng,
    image_dims: tuple[int, int],
    zoom: tuple[float, float] = ZOOM_RANGE,
    image_id: str = "",
    max_redraws: int = MAX_REDRAWS,
) -> PatchSpec:
    """Draw one (rotation, size, position) triple for an ``n x m`` image.

    Raises:
        PatchCannotFit: if ``max_redraws`` draws of (theta, t) never fit.
    """
    n, m = image_dims
    t_lo, t_hi = zoom_bounds(min(n, m), zoom)
    if t_hi < t_lo:
        raise PatchCannotFit(f"empty zoom range for l={min(n, m)}: [{t_lo}, {t_hi}]")
    for _ in range(max_redraws):
        theta = float(rng.uniform(-math.pi, math.pi))
        t = int(rng.integers(t_lo, t_hi + 1))
        rect = geometry.max_inscribed_rect(m, n, theta)
        if t <= rect.width and t <= rect.height:
            x = int(rng.integers(0, rect.width - t + 1))
            y = int(rng.integers(0, rect.height - t + 1))
            return PatchSpec(theta, t, (x, y), image_id)
    raise PatchCannotFit(
        f"no {zoom[0]:.2f}l..{zoom[1]:.2f}l square fit a {n}x{m} image after {max_redraws} draws"
    )


def label_from_mask(mask_patch: np.ndarray, min_symptom_pixels: int = 1) -> tuple[Label, int]:
    if mask_patch.size and mask_patch.max() > SYMPTOM:
        bad = sorted(set(np.unique(mask_patch).tolist()) - {0, 1, 2})
        raise InvalidMaskValue(f"mask values {bad} outside {{0,1,2}}")
    count = int(np.count_nonzero(mask_patch == SYMPTOM))
    label = Label.LATE_BLIGHT if count >= min_symptom_pixels else Label.HEALTHY
    return label, count


def extract_labeled_patch(img: FieldImage, spec: PatchSpec, min_symptom_pixels: int = 1) -> LabeledPatch:
    pixels = geometry.sample_rotated_square(img.pixels, spec.theta, spec.top_left, spec.t, "bilinear")
    if img.mask is None:
        return LabeledPatch(pixels, Label.HEALTHY, spec, 0)
    if img.mask.shape != img.pixels.shape[:2]:
        raise MaskDimensionMismatch(f"{img.id}: mask {img.mask.shape} vs image {img.pixels.shape[:2]}")
    mask_patch = geometry.sample_rotated_square(img.mask, spec.theta, spec.top_left, spec.t, "nearest")
    label, count = label_from_mask(mask_patch, min_symptom_pixels)
    if img.label == Label.HEALTHY:
        label = Label.HEALTHY
    return LabeledPatch(pixels, label, spec, count)


def _image_patches(img, index, rho, seed, zoom, min_symptom_pixels):
    rng = image_stream(seed, index)
    out = []
    try:
        for _ in range(rho):
            spec = draw_patch_spec(rng, img.dims, zoom, img.id)
            out.append(extract_labeled_patch(img, spec, min_symptom_pixels))
    except BlightPatchError as exc:
        raise type(exc)(f"image {img.id!r}: {exc}") from exc
    return out


def generate_patchset(
    dataset: Dataset,
    rho: int,
    seed: int,
    *,
    zoom: tuple[float, float] = ZOOM_RANGE,
    min_symptom_pixels: int = 1,
    threads: int = 1,
) -> PatchSet:
    """Draw ``rho`` labelled patches from every image of ``dataset``."""
    if rho < 1:
        raise ValueError(f"rho must be >= 1, got {rho}")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    jobs = [(img, i, rho, seed, zoom, min_symptom_pixels) for i, img in enumerate(dataset)]
    if threads == 1:
        per_image = [_image_patches(*job) for job in jobs]
    else:
        with ThreadPoolExecutor(max_workers=threads or None) as pool:
            per_image = list(pool.map(lambda job: _image_patches(*job), jobs))
    patches = tuple(p for group in per_image for p in group)
    ps = PatchSet(patches, rho, seed, dataset.digest())
    log.info("sampled %d patches (rho=%d, %.1f%% late_blight)", len(ps), rho, 100 * ps.label_ratio())
    return ps


def save_patchset(ps: PatchSet, directory: str | Path) -> Path:
    """Write ``patchset.json`` plus one PNG per patch; returns the JSON path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = ps.records()
    for rec, patch in zip(records, ps.patches):
        write_png(directory / rec["file"], patch.pixels)
    doc = {
        "version": PATCHSET_VERSION,
        "rho": ps.rho,
        "seed": ps.seed,
        "manifest_digest": ps.manifest_digest,
        "patches": records,
    }
    path = directory / "patchset.json"
    path.write_text(json.dumps(doc, indent=1) + "\n")
    return path


def load_patchset(directory: str | Path) -> PatchSet:
    directory = Path(directory)
    path = directory / "patchset.json" if directory.is_dir() else directory
    try:
        doc = json.loads(path.read_text())
        if doc.get("version") != PATCHSET_VERSION:
            raise PatchSetFormatError(f"{path}: unsupported version {doc.get('version')!r}")
        patches = []
        for rec in doc["patches"]:
            spec = PatchSpec(float(rec["theta"]), int(rec["t"]), (int(rec["x"]), int(rec["y"])), rec["source_image_id"])
            pixels = read_png(path.parent / rec["file"], "RGB")
            if pixels.shape[:2] != (spec.t, spec.t):
                raise PatchSetFormatError(f"{rec['file']}: expected {spec.t}x{spec.t}, got {pixels.shape[:2]}")
            patches.append(LabeledPatch(pixels, Label.parse(rec["label"]), spec, int(rec["symptom_pixel_count"])))
        return PatchSet(tuple(patches), int(doc["rho"]), int(doc["seed"]), str(doc["manifest_digest"]))
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise PatchSetFormatError(f"{path}: {exc}") from exc
