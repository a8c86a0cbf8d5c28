"""Leave-one-out validation over whole images.

Patches are sampled once for the whole dataset; fold ``k`` trains on every
patch whose source is not image ``k`` and is scored on the held-out image's
own patches (patch accuracy) and on a sliding-window pass over the full image
(image verdict).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Dataset, Label
from .errors import BlightPatchError, EvaluationError, FoldFailed, LengthMismatch
from .model import Architecture, CnnClassifier, TrainConfig, to_inputs, torch_threads, train_arrays
from .predictor import DEFAULT_THRESHOLD, predict_image
from .sampler import PatchSet, generate_patchset

log = logging.getLogger(__name__)

PATCH_DECISION_THRESHOLD = 0.5


def patch_accuracy(predictions: Sequence[float], labels: Sequence[int], decision_threshold: float = PATCH_DECISION_THRESHOLD) -> float:
    """Fraction of patches where ``p >= decision_threshold`` agrees with the label."""
    if len(predictions) != len(labels):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not len(labels):
        raise LengthMismatch("no patches to score")
    hits = (np.asarray(predictions, dtype=np.float64) >= decision_threshold) == (np.asarray(labels) == 1)
    return float(hits.mean())


def confusion(verdicts: Sequence[int], truths: Sequence[int]) -> dict:
    if len(verdicts) != len(truths):
        raise LengthMismatch(f"{len(verdicts)} verdicts vs {len(truths)} truths")
    v = np.asarray([int(x) for x in verdicts])
    g = np.asarray([int(x) for x in truths])
    counts = {
        "TP": int(((v == 1) & (g == 1)).sum()),
        "FN": int(((v == 0) & (g == 1)).sum()),
        "TN": int(((v == 0) & (g == 0)).sum()),
        "FP": int(((v == 1) & (g == 0)).sum()),
    }
    counts["accuracy"] = (counts["TP"] + counts["TN"]) / len(v) if len(v) else 0.0
    return counts


@dataclass
class FoldResult:
    held_out_image_id: str
    patch_accuracy: float
    image_verdict: str
    image_truth: str
    max_prob: float
    train_size: int
    weight_digest: str
    final_loss: float
    patch_records: list[dict] = field(default_factory=list)
    window_probabilities: list[list[float]] = field(default_factory=list)


@dataclass
class LooReport:
    folds: list[FoldResult]
    config: dict

    @property
    def mean_patch_accuracy(self) -> float:
        return float(np.mean([f.patch_accuracy for f in self.folds]))

    @property
    def confusion(self) -> dict:
        return confusion(
            [Label.parse(f.image_verdict) for f in self.folds],
            [Label.parse(f.image_truth) for f in self.folds],
        )

    @property
    def image_accuracy(self) -> float:
        return self.confusion["accuracy"]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "mean_patch_accuracy": self.mean_patch_accuracy,
            "confusion": self.confusion,
            "image_accuracy": self.image_accuracy,
            "folds": [asdict(f) for f in self.folds],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "LooReport":
        return cls([FoldResult(**f) for f in d["folds"]], d["config"])

    def to_text(self) -> str:
        lines = ["Leave-one-out patch accuracy", "", f"{'Fold':>4}  {'Image':<16} {'Accuracy':>8}"]
        for k, f in enumerate(self.folds, start=1):
            lines.append(f"{k:>4}  {f.held_out_image_id:<16} {f.patch_accuracy:>8.4f}")
        lines += [f"{'Mean':>4}  {'':<16} {self.mean_patch_accuracy:>8.4f}", ""]
        c = self.confusion
        lines += [
            f"Whole-image verdicts (threshold {self.config.get('threshold')})",
            "",
            f"{'Image class':<12} {'Correct':>8} {'Incorrect':>10}",
            f"{'late_blight':<12} {c['TP']:>8} {c['FN']:>10}",
            f"{'healthy':<12} {c['TN']:>8} {c['FP']:>10}",
            "",
            f"Image accuracy: {self.image_accuracy:.4f}",
        ]
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        js = out_dir / "loo_report.json"
        txt = out_dir / "loo_report.txt"
        js.write_text(self.to_json())
        txt.write_text(self.to_text())
        return js, txt


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(1 << 16, fold)).generate_state(1)[0])


@dataclass
class _Prepared:
    dataset: Dataset
    patchset: PatchSet
    inputs: np.ndarray
    labels: np.ndarray
    sources: np.ndarray


def _run_fold(k: int, prep: _Prepared, train_config: TrainConfig, arch: Architecture, t, threshold, edge_cover) -> FoldResult:
    img = prep.dataset[k]
    train_idx = np.flatnonzero(prep.sources != img.id)
    test_idx = np.flatnonzero(prep.sources == img.id)
    # Provenance guard: no patch of the held-out image may reach training.
    if np.any(prep.sources[train_idx] == img.id) or len(train_idx) + len(test_idx) != len(prep.sources):
        raise EvaluationError(f"fold {k}: held-out patches leaked into training")
    cfg = replace(train_config, seed=fold_seed(train_config.seed, k))
    started = time.perf_counter()
    state = train_arrays(prep.inputs[train_idx], prep.labels[train_idx], cfg, arch)
    clf = CnnClassifier(state)
    probs = clf.predict_inputs(prep.inputs[test_idx])
    labels = prep.labels[test_idx]
    acc = patch_accuracy(probs, labels)
    pred = predict_image(clf, img, t, threshold, edge_cover)
    log.info("fold %d (%s): patch acc %.4f, max p %.4f -> %s [truth %s] in %.1fs",
             k + 1, img.id, acc, pred.max_prob, pred.verdict.slug, img.label.slug, time.perf_counter() - started)
    records = [
        {"patch_index": int(i), "probability": float(p), "label": int(y)}
        for i, p, y in zip(test_idx, probs, labels)
    ]
    return FoldResult(
        held_out_image_id=img.id,
        patch_accuracy=acc,
        image_verdict=pred.verdict.slug,
        image_truth=img.label.slug,
        max_prob=pred.max_prob,
        train_size=int(len(train_idx)),
        weight_digest=state.weight_digest(),
        final_loss=float(state.metadata["loss_history"][-1]),
        patch_records=records,
        window_probabilities=pred.probabilities.tolist(),
    )


def run_loo(
    dataset: Dataset,
    rho: int,
    train_config: TrainConfig,
    t: int | None = None,
    threshold: float = DEFAULT_THRESHOLD,
    seed: int = 0,
    *,
    threads: int = 1,
    arch: Architecture | None = None,
    min_symptom_pixels: int = 1,
    edge_cover: bool = False,
    patchset: PatchSet | None = None,
) -> tuple[LooReport, PatchSet]:
    """Run one fold per image; returns the report and the shared patch set.

    ``threads`` fans out patch sampling and folds; every fold runs torch
    single-threaded, so numbers do not depend on it.
    """
    if len(dataset) < 2:
        raise EvaluationError("leave-one-out needs at least two images")
    counts = dataset.counts()
    if not counts["healthy"] or not counts["late_blight"]:
        raise EvaluationError(f"both classes must be present, got {counts}")
    arch = arch or Architecture(input_size=train_config.input_size)
    train_config = replace(train_config, seed=seed)

    if patchset is None:
        patchset = generate_patchset(dataset, rho, seed, min_symptom_pixels=min_symptom_pixels, threads=threads)
    prep = _Prepared(
        dataset,
        patchset,
        to_inputs([p.pixels for p in patchset.patches], arch.input_size),
        patchset.labels(),
        np.array([p.spec.source_image_id for p in patchset.patches]),
    )

    def fold(k):
        try:
            return _run_fold(k, prep, train_config, arch, t, threshold, edge_cover)
        except BlightPatchError as exc:
            raise FoldFailed(f"fold {k + 1} ({dataset[k].id}): {exc}") from exc

    with torch_threads(1):
        if threads == 1:
            folds = [fold(k) for k in range(len(dataset))]
        else:
            with ThreadPoolExecutor(max_workers=threads or None) as pool:
                folds = list(pool.map(fold, range(len(dataset))))
    folds.sort(key=lambda f: f.held_out_image_id)

    config = {
        "rho": rho,
        "seed": seed,
        "t": t,
        "threshold": threshold,
        "edge_cover": edge_cover,
        "min_symptom_pixels": min_symptom_pixels,
        "patch_decision_threshold": PATCH_DECISION_THRESHOLD,
        "train": train_config.to_dict(),
        "architecture": arch.to_dict(),
        "dataset_digest": dataset.digest(),
        "patchset_digest": patchset.digest(),
        "patch_label_ratio": patchset.label_ratio(),
    }
    report = LooReport(folds, config)
    c = report.confusion
    log.info("LOO done: mean patch acc %.4f, TP=%d FN=%d TN=%d FP=%d",
             report.mean_patch_accuracy, c["TP"], c["FN"], c["TN"], c["FP"])
    return report, patchset
