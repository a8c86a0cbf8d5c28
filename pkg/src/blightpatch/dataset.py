"""Field images, segmentation masks, manifests and the synthetic oracle dataset.

Manifest layout (``manifest.json``)::

    {"version": 1,
     "images": [{"id": "...", "image_path": "img/a.png",
                 "mask_path": "mask/a.png" | null, "label": "healthy" | "late_blight"}]}

Paths are relative to the manifest's directory.  Images are 8-bit RGB PNGs,
masks are single-channel PNGs holding the literal values 0 (background),
1 (plant) and 2 (symptom).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import (
    EmptyDataset,
    LabelMaskInconsistency,
    ManifestParseError,
    MaskDimensionMismatch,
    MissingFile,
)

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

BACKGROUND, PLANT, SYMPTOM = 0, 1, 2


class Label(IntEnum):
    HEALTHY = 0
    LATE_BLIGHT = 1

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: str | int) -> "Label":
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValueError(f"unknown label {value!r}") from None
        return cls(value)


@dataclass(frozen=True, eq=False)
class FieldImage:
    id: str
    pixels: np.ndarray
    label: Label
    mask: np.ndarray | None = None

    @property
    def dims(self) -> tuple[int, int]:
        """``(n, m)``: rows then columns."""
        return self.pixels.shape[0], self.pixels.shape[1]

    def validate(self) -> None:
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"{self.id}: pixels must be uint8 RGB, got {self.pixels.dtype} {self.pixels.shape}")
        if self.mask is not None:
            if self.mask.shape != self.pixels.shape[:2]:
                raise MaskDimensionMismatch(
                    f"{self.id}: mask {self.mask.shape} vs image {self.pixels.shape[:2]}"
                )
            if self.mask.max(initial=0) > SYMPTOM:
                raise ManifestParseError(f"{self.id}: mask values outside {{0,1,2}}")
        if self.label == Label.LATE_BLIGHT:
            if self.mask is None:
                raise LabelMaskInconsistency(f"{self.id}: diseased image without a mask")
            if not (self.mask == SYMPTOM).any():
                raise LabelMaskInconsistency(f"{self.id}: diseased image mask has no symptom pixels")


@dataclass(frozen=True, eq=False)
class Dataset:
    images: tuple[FieldImage, ...]

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, i: int) -> FieldImage:
        return self.images[i]

    @property
    def ids(self) -> list[str]:
        return [img.id for img in self.images]

    def counts(self) -> dict[str, int]:
        diseased = sum(img.label == Label.LATE_BLIGHT for img in self.images)
        return {"late_blight": diseased, "healthy": len(self.images) - diseased}

    def without(self, image_id: str) -> "Dataset":
        return Dataset(tuple(img for img in self.images if img.id != image_id))

    def digest(self) -> str:
        """SHA-256 over ids, labels and raw raster bytes, independent of file paths."""
        h = hashlib.sha256()
        for img in self.images:
            h.update(f"{img.id}\0{img.label.slug}\0{img.pixels.shape}\0".encode())
            h.update(np.ascontiguousarray(img.pixels).tobytes())
            if img.mask is not None:
                h.update(b"mask\0")
                h.update(np.ascontiguousarray(img.mask).tobytes())
        return h.hexdigest()


def read_png(path: Path, mode: str) -> np.ndarray:
    if not path.is_file():
        raise MissingFile(f"missing raster {path}")
    with Image.open(path) as im:
        if im.mode != mode:
            im = im.convert(mode)
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    # Fixed compression level keeps output bytes stable between runs.
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG", compress_level=6)


def load_dataset(manifest_path: str | Path) -> Dataset:
    """Load and validate every entry of a manifest; images are ordered by id."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFile(f"manifest not found: {manifest_path}")
    try:
        doc = json.loads(manifest_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestParseError(f"{manifest_path}: {exc}") from exc
    if not isinstance(doc, dict) or "images" not in doc:
        raise ManifestParseError(f"{manifest_path}: expected an object with an 'images' array")
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestParseError(f"{manifest_path}: unsupported version {doc.get('version')!r}")
    entries = doc["images"]
    if not isinstance(entries, list):
        raise ManifestParseError(f"{manifest_path}: 'images' must be an array")
    if not entries:
        raise EmptyDataset(f"{manifest_path}: manifest lists no images")

    root = manifest_path.parent
    images = []
    seen = set()
    for entry in entries:
        try:
            image_id = str(entry["id"])
            label = Label.parse(entry["label"])
            image_path = entry["image_path"]
            mask_path = entry.get("mask_path")
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestParseError(f"{manifest_path}: bad entry {entry!r}: {exc}") from exc
        if image_id in seen:
            raise ManifestParseError(f"{manifest_path}: duplicate id {image_id!r}")
        seen.add(image_id)
        pixels = read_png(root / image_path, "RGB")
        mask = read_png(root / mask_path, "L") if mask_path else None
        img = FieldImage(image_id, pixels, label, mask)
        img.validate()
        images.append(img)
    images.sort(key=lambda im: im.id)
    return Dataset(tuple(images))


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write PNGs plus ``manifest.json`` under ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for img in dataset:
        image_rel = f"images/{img.id}.png"
        write_png(directory / image_rel, img.pixels)
        mask_rel = None
        if img.mask is not None:
            mask_rel = f"masks/{img.id}.png"
            write_png(directory / mask_rel, img.mask)
        entries.append(
            {"id": img.id, "image_path": image_rel, "mask_path": mask_rel, "label": img.label.slug}
        )
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"version": MANIFEST_VERSION, "images": entries}, indent=2) + "\n")
    return manifest


# --------------------------------------------------------------------------
# Synthetic oracle dataset


@dataclass(frozen=True)
class SynthConfig:
    image_count: int = 22
    diseased_count: int = 9
    dims: tuple[int, int] = (1000, 1500)
    blob_count: tuple[int, int] = (4, 8)
    blob_radius: tuple[float, float] = (16.0, 34.0)
    texture_scale: float = 24.0
    seed: int = 7

    def __post_init__(self):
        if self.image_count < 1:
            raise ValueError("image_count must be >= 1")
        if not 0 <= self.diseased_count <= self.image_count:
            raise ValueError("diseased_count must lie in [0, image_count]")
        if self.blob_radius[0] < 2 or self.blob_radius[1] < self.blob_radius[0]:
            raise ValueError("blob radius range must satisfy 2 <= lo <= hi")
        if self.blob_count[0] < 1 or self.blob_count[1] < self.blob_count[0]:
            raise ValueError("blob count range must satisfy 1 <= lo <= hi")
        if min(self.dims) < 16:
            raise ValueError("synthetic images must be at least 16 px per side")


@dataclass
class SynthImage:
    image: FieldImage
    blob_pixels: int = 0
    blob_centers: list[tuple[int, int]] = field(default_factory=list)


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def _octave_noise(rng: np.random.Generator, shape: tuple[int, int], scale: float, octaves: int = 3) -> np.ndarray:
    """Sum of smoothed gaussian noise fields, roughly in [-1, 1]."""
    out = np.zeros(shape, dtype=np.float64)
    amp = 1.0
    total = 0.0
    for k in range(octaves):
        sigma = max(scale / (2**k), 0.8)
        layer = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
        layer /= layer.std() + 1e-12
        out += amp * layer
        total += amp
        amp *= 0.5
    return np.clip(out / (total * 2.0), -1.0, 1.0)


def _ellipse_field(shape, cy, cx, ry, rx, angle, pad):
    """Normalised elliptical distance (1.0 on the boundary) inside a local window."""
    n, m = shape
    r = int(math.ceil(max(rx, ry) * pad)) + 1
    y0, y1 = max(0, int(cy) - r), min(n, int(cy) + r + 1)
    x0, x1 = max(0, int(cx) - r), min(m, int(cx) + r + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = math.cos(angle), math.sin(angle)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (slice(y0, y1), slice(x0, x1)), np.sqrt((u / rx) ** 2 + (v / ry) ** 2), u / rx


def _draw_plant(rng, shape, texture_scale):
    n, m = shape
    rgb = np.empty((n, m, 3), dtype=np.float64)
    soil_tex = _octave_noise(rng, shape, texture_scale)
    grain = rng.standard_normal(shape) * 0.04
    for ch, base in enumerate((146.0, 124.0, 98.0)):
        rgb[..., ch] = base * (1.0 + 0.18 * soil_tex + grain)

    mask = np.zeros(shape, dtype=np.uint8)
    leaf_tex = _octave_noise(rng, shape, texture_scale / 3.0)
    cy0, cx0 = n / 2.0, m / 2.0
    spread_y, spread_x = 0.24 * n, 0.26 * m
    unit = min(n, m) / 1000.0
    leaves = int(rng.integers(90, 130))
    for _ in range(leaves):
        cy = float(np.clip(rng.normal(cy0, spread_y), 0, n - 1))
        cx = float(np.clip(rng.normal(cx0, spread_x), 0, m - 1))
        rx = rng.uniform(45, 110) * unit
        ry = rx * rng.uniform(0.45, 0.75)
        angle = rng.uniform(-math.pi, math.pi)
        sl, dist, along = _ellipse_field(shape, cy, cx, ry, rx, angle, 1.0)
        # Pointed tip: taper the ellipse towards one end of its long axis.
        taper = dist + 0.35 * np.clip(along, 0, None) ** 2
        inside = taper <= 1.0
        if not inside.any():
            continue
        shade = 0.78 + 0.30 * (1.0 - taper[inside]) + rng.uniform(-0.08, 0.08)
        tex = 1.0 + 0.22 * leaf_tex[sl][inside]
        hue = rng.uniform(-10, 10)
        for ch, base in enumerate((62.0 + hue, 128.0 + hue, 46.0)):
            region = rgb[sl][..., ch]
            region[inside] = base * shade * tex
        mask[sl][inside] = PLANT
    return rgb, mask


def _draw_blobs(rng, rgb, mask, count, radius_range):
    """Composite lesions onto canopy pixels; returns (symptom pixel count, centres)."""
    shape = mask.shape
    canopy = np.flatnonzero(mask == PLANT)
    centers = []
    edge_noise = rng.standard_normal(shape)
    for _ in range(count):
        if canopy.size == 0:
            break
        idx = int(canopy[rng.integers(0, canopy.size)])
        cy, cx = divmod(idx, shape[1])
        r = rng.uniform(*radius_range)
        rx, ry = r, r * rng.uniform(0.65, 1.0)
        angle = rng.uniform(-math.pi, math.pi)
        sl, dist, _ = _ellipse_field(shape, cy, cx, ry, rx, angle, 1.4)
        ragged = dist + 0.12 * ndimage.gaussian_filter(edge_noise[sl], 1.5) * 4.0
        footprint = (ragged <= 1.0) & (mask[sl] >= PLANT)
        if not footprint.any():
            continue
        core = np.clip(1.0 - ragged[footprint], 0.0, 1.0)
        speck = 1.0 + 0.10 * rng.standard_normal(int(footprint.sum()))
        for ch, (edge, centre) in enumerate(((112.0, 70.0), (84.0, 44.0), (40.0, 22.0))):
            region = rgb[sl][..., ch]
            region[footprint] = (edge + (centre - edge) * core) * speck
        mask[sl][footprint] = SYMPTOM
        centers.append((cy, cx))
    return int((mask == SYMPTOM).sum()), centers


def synthesize_image(config: SynthConfig, index: int, diseased: bool) -> SynthImage:
    rng = _image_rng(config.seed, index)
    rgb, mask = _draw_plant(rng, config.dims, config.texture_scale)
    blob_pixels, centers = 0, []
    if diseased:
        count = int(rng.integers(config.blob_count[0], config.blob_count[1] + 1))
        blob_pixels, centers = _draw_blobs(rng, rgb, mask, count, config.blob_radius)
    pixels = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    label = Label.LATE_BLIGHT if diseased else Label.HEALTHY
    image = FieldImage(f"synth_{index:03d}", pixels, label, mask if diseased else None)
    return SynthImage(image, blob_pixels, centers)


def diseased_indices(config: SynthConfig) -> set[int]:
    order = _image_rng(config.seed, 1 << 20).permutation(config.image_count)
    return {int(i) for i in order[: config.diseased_count]}


def generate_synthetic(config: SynthConfig, out_dir: str | Path | None = None) -> Dataset:
    """Build the synthetic dataset; if ``out_dir`` is given, also write PNGs and manifest."""
    sick = diseased_indices(config)
    images = []
    for i in range(config.image_count):
        synth = synthesize_image(config, i, i in sick)
        synth.image.validate()
        log.debug("synthesised %s (%s, %d symptom px)", synth.image.id, synth.image.label.slug, synth.blob_pixels)
        images.append(synth.image)
    dataset = Dataset(tuple(images))
    if out_dir is not None:
        save_dataset(dataset, out_dir)
    return dataset
