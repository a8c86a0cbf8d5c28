import json

import numpy as np
import pytest

from blightpatch.dataset import Dataset, SynthConfig, generate_synthetic
from blightpatch.errors import EvaluationError, LengthMismatch
from blightpatch.evaluation import LooReport, confusion, fold_seed, patch_accuracy, run_loo
from blightpatch.model import Architecture, TrainConfig


def test_patch_accuracy_spot_values():
    preds = [0.9] * 124 + [0.1] * 2
    labels = [1] * 126
    assert round(patch_accuracy(preds, labels), 4) == 0.9841


def test_threshold_boundary_counts_as_positive():
    assert patch_accuracy([0.5, 0.49], [1, 0]) == 1.0


def test_image_accuracy_spot_value():
    verdicts = [1] * 9 + [0] * 12 + [1]
    truths = [1] * 9 + [0] * 13
    c = confusion(verdicts, truths)
    assert (c["TP"], c["FN"], c["TN"], c["FP"]) == (9, 0, 12, 1)
    assert round(c["accuracy"], 4) == 0.9545


def test_confusion_all_wrong():
    c = confusion([0, 1], [1, 0])
    assert (c["TP"], c["FN"], c["TN"], c["FP"], c["accuracy"]) == (0, 1, 0, 1, 0.0)


def test_length_mismatch():
    with pytest.raises(LengthMismatch):
        patch_accuracy([0.1, 0.2], [1])
    with pytest.raises(LengthMismatch):
        confusion([1], [1, 0])


def test_random_predictions_near_chance():
    rng = np.random.default_rng(0)
    acc = patch_accuracy(rng.uniform(0, 1, 20000), rng.integers(0, 2, 20000))
    assert abs(acc - 0.5) < 0.02


def test_fold_seeds_are_distinct():
    seeds = {fold_seed(0, k) for k in range(22)}
    assert len(seeds) == 22
    assert fold_seed(0, 3) == fold_seed(0, 3) != fold_seed(1, 3)


TINY_ARCH = Architecture(input_size=16, conv_widths=(4, 8), hidden=8)
TINY_CFG = TrainConfig(input_size=16, epochs=2, batch_size=16, seed=0)


@pytest.fixture(scope="module")
def tiny_dataset():
    return generate_synthetic(SynthConfig(image_count=3, diseased_count=1, dims=(100, 150), blob_radius=(5.0, 8.0), seed=2))


@pytest.fixture(scope="module")
def tiny_run(tiny_dataset):
    return run_loo(tiny_dataset, 10, TINY_CFG, t=20, seed=4, arch=TINY_ARCH)


def test_loo_has_one_fold_per_image(tiny_dataset, tiny_run):
    report, ps = tiny_run
    assert [f.held_out_image_id for f in report.folds] == tiny_dataset.ids
    assert len(ps) == 30
    assert all(f.train_size == 20 for f in report.folds)
    assert len({f.weight_digest for f in report.folds}) == 3


def test_held_out_patches_never_train(tiny_run):
    report, ps = tiny_run
    sources = [p.spec.source_image_id for p in ps.patches]
    for f in report.folds:
        scored = {sources[r["patch_index"]] for r in f.patch_records}
        assert scored == {f.held_out_image_id}
        assert sum(s != f.held_out_image_id for s in sources) == f.train_size


def test_report_numbers_recompute(tiny_run):
    report, _ = tiny_run
    for f in report.folds:
        probs = [r["probability"] for r in f.patch_records]
        labels = [r["label"] for r in f.patch_records]
        assert patch_accuracy(probs, labels) == f.patch_accuracy
        assert f.max_prob == max(max(row) for row in f.window_probabilities)
        assert f.image_verdict == ("late_blight" if f.max_prob >= 0.8 else "healthy")
    assert report.mean_patch_accuracy == pytest.approx(np.mean([f.patch_accuracy for f in report.folds]))


def test_report_serialisation(tmp_path, tiny_run):
    report, _ = tiny_run
    js, txt = report.save(tmp_path)
    back = LooReport.from_dict(json.loads(js.read_text()))
    assert back.digest() == report.digest()
    assert "Image accuracy" in txt.read_text()


def test_loo_is_reproducible(tiny_dataset, tiny_run):
    report, ps = tiny_run
    again, ps2 = run_loo(tiny_dataset, 10, TINY_CFG, t=20, seed=4, arch=TINY_ARCH, threads=2)
    assert ps2.digest() == ps.digest()
    assert again.digest() == report.digest()


def test_loo_needs_both_classes(tiny_dataset):
    healthy_only = Dataset(tuple(img for img in tiny_dataset if img.mask is None))
    with pytest.raises(EvaluationError):
        run_loo(healthy_only, 2, TINY_CFG, t=20, arch=TINY_ARCH)
    with pytest.raises(EvaluationError):
        run_loo(Dataset(tiny_dataset.images[:1]), 2, TINY_CFG, t=20, arch=TINY_ARCH)
