import math

import numpy as np
import pytest
from scipy import stats

from blightpatch import geometry
from blightpatch.dataset import Dataset, FieldImage, Label
from blightpatch.errors import InvalidMaskValue, MaskDimensionMismatch, PatchCannotFit
from blightpatch.sampler import (
    PatchSpec,
    draw_patch_spec,
    extract_labeled_patch,
    generate_patchset,
    label_from_mask,
    load_patchset,
    save_patchset,
    zoom_bounds,
)


class MidpointRng:
    """Stand-in generator that always returns the middle of the requested range."""

    def uniform(self, lo, hi):
        return (lo + hi) / 2

    def integers(self, lo, hi):
        return (lo + hi - 1) // 2


def test_zoom_range_at_full_resolution():
    assert zoom_bounds(4000) == (600, 1000)


def test_midpoint_draw():
    spec = draw_patch_spec(MidpointRng(), (4000, 6000))
    assert spec.theta == 0.0
    assert spec.t == 800
    assert spec.top_left == ((6000 - 800) // 2, (4000 - 800) // 2)


def test_oversized_zoom_cannot_fit():
    class QuarterTurnRng(MidpointRng):
        def uniform(self, lo, hi):
            return math.pi / 4

    # Inscribed square side at pi/4 is about 0.707 l, below the 0.9 l minimum.
    with pytest.raises(PatchCannotFit):
        draw_patch_spec(QuarterTurnRng(), (100, 100), zoom=(0.9, 0.95))


def test_draws_stay_in_range_and_fit():
    rng = np.random.default_rng(11)
    for _ in range(2000):
        spec = draw_patch_spec(rng, (400, 600))
        assert 60 <= spec.t <= 100
        assert -math.pi <= spec.theta <= math.pi
        rect = geometry.max_inscribed_rect(600, 400, spec.theta)
        x, y = spec.top_left
        assert 0 <= x <= rect.width - spec.t and 0 <= y <= rect.height - spec.t


def test_draw_distribution():
    rng = np.random.default_rng(2024)
    specs = [draw_patch_spec(rng, (4000, 6000)) for _ in range(20000)]
    thetas = np.array([s.theta for s in specs])
    ts = np.array([s.t for s in specs])
    assert abs(thetas.mean()) < 0.05
    assert stats.kstest(thetas, stats.uniform(-math.pi, 2 * math.pi).cdf).pvalue > 0.001
    counts = np.bincount(ts - 600, minlength=401)
    assert stats.chisquare(counts).pvalue > 0.001


# --- labelling ------------------------------------------------------------


def test_all_zero_mask_is_healthy():
    assert label_from_mask(np.zeros((5, 5), np.uint8)) == (Label.HEALTHY, 0)


def test_single_symptom_pixel_counts():
    m = np.zeros((5, 5), np.uint8)
    m[2, 3] = 2
    assert label_from_mask(m) == (Label.LATE_BLIGHT, 1)


def test_stricter_threshold():
    m = np.ones((20, 20), np.uint8)
    m.flat[:37] = 2
    assert label_from_mask(m, min_symptom_pixels=50) == (Label.HEALTHY, 37)


def test_invalid_mask_value():
    m = np.zeros((3, 3), np.uint8)
    m[0, 0] = 7
    with pytest.raises(InvalidMaskValue):
        label_from_mask(m)


def _blob_image(label=Label.LATE_BLIGHT):
    pixels = np.full((200, 300, 3), 90, np.uint8)
    mask = np.ones((200, 300), np.uint8)
    mask[40:50, 40:50] = 2
    pixels[40:50, 40:50] = (80, 40, 20)
    if label == Label.HEALTHY:
        return FieldImage("h", pixels, label)
    return FieldImage("d", pixels, label, mask)


def test_healthy_image_patch_is_healthy():
    spec = PatchSpec(0.0, 40, (30, 30), "h")
    assert extract_labeled_patch(_blob_image(Label.HEALTHY), spec).label == Label.HEALTHY


def test_patch_over_blob_is_diseased():
    spec = PatchSpec(0.0, 40, (30, 30), "d")
    patch = extract_labeled_patch(_blob_image(), spec)
    assert patch.label == Label.LATE_BLIGHT
    assert patch.symptom_pixel_count == 100


def test_patch_away_from_blob_is_healthy():
    spec = PatchSpec(0.0, 40, (200, 120), "d")
    patch = extract_labeled_patch(_blob_image(), spec)
    assert (patch.label, patch.symptom_pixel_count) == (Label.HEALTHY, 0)


def test_mask_dims_checked():
    img = _blob_image()
    bad = FieldImage("d", img.pixels, img.label, img.mask[:, :-1])
    with pytest.raises(MaskDimensionMismatch):
        extract_labeled_patch(bad, PatchSpec(0.0, 10, (0, 0), "d"))


# --- patch sets -----------------------------------------------------------


@pytest.fixture(scope="module")
def small_dataset(synth_small):
    return synth_small


def test_patchset_size_and_determinism(small_dataset):
    a = generate_patchset(small_dataset, 5, seed=3)
    b = generate_patchset(small_dataset, 5, seed=3)
    assert len(a) == 5 * len(small_dataset)
    assert a.digest() == b.digest()
    assert generate_patchset(small_dataset, 5, seed=4).digest() != a.digest()


def test_single_image_single_patch(small_dataset):
    ps = generate_patchset(Dataset(small_dataset.images[:1]), 1, seed=0)
    assert len(ps) == 1


def test_thread_count_does_not_change_content(small_dataset):
    base = generate_patchset(small_dataset, 4, seed=9, threads=1).digest()
    assert generate_patchset(small_dataset, 4, seed=9, threads=3).digest() == base


def test_recount_reproduces_symptom_counts(small_dataset):
    ps = generate_patchset(small_dataset, 6, seed=12)
    by_id = {img.id: img for img in small_dataset}
    for p in ps.patches:
        img = by_id[p.spec.source_image_id]
        if img.mask is None:
            continue
        m = geometry.sample_rotated_square(img.mask, p.spec.theta, p.spec.top_left, p.spec.t, "nearest")
        assert int((m == 2).sum()) == p.symptom_pixel_count


def test_archive_round_trip(tmp_path, small_dataset):
    ps = generate_patchset(small_dataset, 3, seed=5)
    save_patchset(ps, tmp_path / "ps")
    back = load_patchset(tmp_path / "ps")
    assert back.digest() == ps.digest()
    for a, b in zip(ps.patches, back.patches):
        assert a.spec == b.spec and a.label == b.label
        np.testing.assert_array_equal(a.pixels, b.pixels)
    # Re-saving writes identical bytes.
    save_patchset(back, tmp_path / "ps2")
    assert (tmp_path / "ps" / "patchset.json").read_bytes() == (tmp_path / "ps2" / "patchset.json").read_bytes()
    assert (tmp_path / "ps" / "p000000.png").read_bytes() == (tmp_path / "ps2" / "p000000.png").read_bytes()


def test_error_names_the_image():
    tiny = FieldImage("tiny-one", np.zeros((40, 40, 3), np.uint8), Label.HEALTHY)
    with pytest.raises(PatchCannotFit, match="tiny-one"):
        generate_patchset(Dataset((tiny,)), 1, seed=0, zoom=(1.1, 1.2))
