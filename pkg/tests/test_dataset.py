import json

import numpy as np
import pytest

from blightpatch.dataset import (
    PLANT,
    SYMPTOM,
    Dataset,
    FieldImage,
    Label,
    SynthConfig,
    generate_synthetic,
    load_dataset,
    save_dataset,
    synthesize_image,
)
from blightpatch.errors import (
    EmptyDataset,
    LabelMaskInconsistency,
    ManifestParseError,
    MaskDimensionMismatch,
    MissingFile,
)

SMALL = SynthConfig(image_count=6, diseased_count=3, dims=(120, 180), blob_radius=(5.0, 9.0), seed=3)


def test_label_parsing():
    assert Label.parse("late_blight") is Label.LATE_BLIGHT
    assert Label.parse(0) is Label.HEALTHY
    with pytest.raises(ValueError):
        Label.parse("rust")


def test_default_synth_counts():
    cfg = SynthConfig(dims=(64, 96), blob_radius=(3.0, 5.0))
    ds = generate_synthetic(cfg)
    assert len(ds) == 22
    assert ds.counts() == {"late_blight": 9, "healthy": 13}


def test_manifest_round_trip(tmp_path):
    ds = generate_synthetic(SMALL, tmp_path)
    back = load_dataset(tmp_path / "manifest.json")
    assert back.ids == sorted(ds.ids)
    assert back.digest() == ds.digest()


def test_synth_is_byte_deterministic(tmp_path):
    generate_synthetic(SMALL, tmp_path / "a")
    generate_synthetic(SMALL, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_seed_changes_images():
    a = generate_synthetic(SMALL)
    b = generate_synthetic(SynthConfig(**{**SMALL.__dict__, "seed": 4}))
    assert a.digest() != b.digest()


def test_blob_pixels_match_mask():
    s = synthesize_image(SMALL, 0, diseased=True)
    assert s.blob_pixels == int((s.image.mask == SYMPTOM).sum()) > 0
    assert s.blob_centers


def test_symptoms_lie_on_plant_pixels():
    s = synthesize_image(SMALL, 1, diseased=True)
    mask = s.image.mask
    plant_or_symptom = mask >= PLANT
    assert ((mask == SYMPTOM) <= plant_or_symptom).all()
    assert (mask == PLANT).any()
    assert set(np.unique(mask)) <= {0, 1, 2}


def test_lesions_are_darker_than_canopy():
    s = synthesize_image(SMALL, 2, diseased=True)
    lum = s.image.pixels.astype(float).mean(axis=2)
    assert lum[s.image.mask == SYMPTOM].mean() < lum[s.image.mask == PLANT].mean()


def test_no_diseased_images_means_no_masks():
    ds = generate_synthetic(SynthConfig(image_count=3, diseased_count=0, dims=(40, 60), blob_radius=(3.0, 4.0)))
    assert all(img.mask is None and img.label == Label.HEALTHY for img in ds)


def _write_manifest(tmp_path, entries, version=1):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"version": version, "images": entries}))
    return path


def test_empty_manifest(tmp_path):
    with pytest.raises(EmptyDataset):
        load_dataset(_write_manifest(tmp_path, []))


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingFile):
        load_dataset(tmp_path / "nope.json")


def test_malformed_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ManifestParseError):
        load_dataset(tmp_path / "manifest.json")
    with pytest.raises(ManifestParseError):
        load_dataset(_write_manifest(tmp_path, [{"id": "a"}], version=1))
    with pytest.raises(ManifestParseError):
        load_dataset(_write_manifest(tmp_path, [], version=9))


def test_missing_image_file(tmp_path):
    entry = {"id": "a", "image_path": "images/a.png", "mask_path": None, "label": "healthy"}
    with pytest.raises(MissingFile):
        load_dataset(_write_manifest(tmp_path, [entry]))


def test_diseased_without_mask(tmp_path):
    img = FieldImage("a", np.zeros((10, 10, 3), np.uint8), Label.HEALTHY)
    save_dataset(Dataset((img,)), tmp_path)
    entry = {"id": "a", "image_path": "images/a.png", "mask_path": None, "label": "late_blight"}
    with pytest.raises(LabelMaskInconsistency):
        load_dataset(_write_manifest(tmp_path, [entry]))


def test_diseased_mask_without_symptoms():
    img = FieldImage("a", np.zeros((10, 10, 3), np.uint8), Label.LATE_BLIGHT, np.ones((10, 10), np.uint8))
    with pytest.raises(LabelMaskInconsistency):
        img.validate()


def test_mask_dimension_mismatch():
    img = FieldImage("a", np.zeros((10, 10, 3), np.uint8), Label.LATE_BLIGHT, np.full((10, 9), 2, np.uint8))
    with pytest.raises(MaskDimensionMismatch):
        img.validate()


def test_without_drops_one_image():
    ds = generate_synthetic(SMALL)
    rest = ds.without(ds.ids[2])
    assert len(rest) == len(ds) - 1 and ds.ids[2] not in rest.ids
