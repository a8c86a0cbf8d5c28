"""Command-line entry point: ``blightpatch {synth,sample,train,predict,loo}``.

Every subcommand writes its artifacts under ``--out`` and logs to stderr.
Defaults follow the full-resolution setup; ``--profile desk`` switches the
unset flags to a CPU-sized configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import FieldImage, Label, SynthConfig, generate_synthetic, load_dataset, read_png
from .errors import BlightPatchError
from .evaluation import run_loo
from .model import Architecture, CnnClassifier, LossParams, ModelState, TrainConfig, torch_threads, train
from .predictor import localization_map, predict_image, write_pgm, write_window_csv
from .sampler import generate_patchset, load_patchset, save_patchset

log = logging.getLogger("blightpatch")

PROFILES = {
    "full": {"rho": 200, "input_size": 380, "epochs": 100, "t": None},
    "desk": {"rho": 40, "input_size": 64, "epochs": 12, "t": 200},
}
MODEL_FILE = "model.isd4l"


def _int_at_least(lo):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {v}")
        return v

    return parse


def _float_in(lo, hi, lo_open=False):
    def parse(text):
        try:
            v = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
        if not ((lo < v if lo_open else lo <= v) and v <= hi):
            raise argparse.ArgumentTypeError(f"must lie in {'(' if lo_open else '['}{lo}, {hi}], got {v}")
        return v

    return parse


def _seed(text):
    v = _int_at_least(0)(text)
    if v >= 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


def _common(p: argparse.ArgumentParser, out_required=True):
    p.add_argument("--out", type=Path, required=out_required, help="output directory for artifacts")
    p.add_argument("--seed", type=_seed, default=0, help="64-bit seed for every random stream (default: 0)")
    p.add_argument("--threads", type=_int_at_least(0), default=1, help="worker threads, 0 = auto (default: 1)")
    p.add_argument("--profile", choices=sorted(PROFILES), default="full",
                   help="default set for unset flags: full or desk (rho 40, input 64, 12 epochs, t 200) (default: full)")


def _training_flags(p):
    p.add_argument("--input-size", type=_int_at_least(8), help="CNN input side in pixels (default: 380; desk: 64)")
    p.add_argument("--epochs", type=_int_at_least(1), help="training epochs (default: 100; desk: 12)")
    p.add_argument("--batch-size", type=_int_at_least(1), default=32, help="mini-batch size (default: 32)")
    p.add_argument("--lr", type=_float_in(0, 1, lo_open=True), default=1e-3, help="Adam learning rate (default: 0.001)")
    p.add_argument("--loss", choices=["focal", "cross_entropy"], default="focal", help="training loss (default: focal)")
    p.add_argument("--alpha", type=_float_in(0, 1, lo_open=True), default=0.5, help="focal class weight (default: 0.5)")
    p.add_argument("--gamma", type=_float_in(0, 100), default=2.0, help="focal focusing exponent (default: 2.0)")


def _window_flags(p):
    p.add_argument("--t", type=_int_at_least(2), help="sliding-window side; must divide the image height (default: height/5; desk: 200)")
    p.add_argument("--threshold", type=_float_in(0, 1), default=0.8, help="whole-image max-probability threshold (default: 0.8)")
    p.add_argument("--edge-cover", action="store_true", help="add flush right/bottom windows (default: off)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blightpatch", description="Patch-based late-blight detection pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate the synthetic field-image dataset")
    _common(p)
    p.add_argument("--images", type=_int_at_least(1), default=22, help="number of images (default: 22)")
    p.add_argument("--diseased", type=_int_at_least(0), default=9, help="number of diseased images (default: 9)")
    p.add_argument("--rows", type=_int_at_least(16), default=1000, help="image height n (default: 1000)")
    p.add_argument("--cols", type=_int_at_least(16), default=1500, help="image width m (default: 1500)")

    p = sub.add_parser("sample", help="draw rho random rotated patches per image")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest.json")
    p.add_argument("--rho", type=_int_at_least(1), help="patches per image (default: 200; desk: 40)")
    p.add_argument("--min-symptom-pixels", type=_int_at_least(1), default=1,
                   help="symptom pixels needed for a late-blight patch label (default: 1)")

    p = sub.add_parser("train", help="train the patch classifier on a patch-set archive")
    _common(p)
    p.add_argument("--patches", type=Path, required=True, help="patch-set directory (holds patchset.json)")
    _training_flags(p)

    p = sub.add_parser("predict", help="classify one high-resolution image")
    _common(p)
    p.add_argument("--model", type=Path, required=True, help="weight file written by 'train'")
    p.add_argument("--image", type=Path, required=True, help="RGB PNG to classify")
    _window_flags(p)

    p = sub.add_parser("loo", help="leave-one-out validation over a dataset")
    _common(p)
    p.add_argument("--manifest", type=Path, required=True, help="dataset manifest.json")
    p.add_argument("--rho", type=_int_at_least(1), help="patches per image (default: 200; desk: 40)")
    p.add_argument("--min-symptom-pixels", type=_int_at_least(1), default=1,
                   help="symptom pixels needed for a late-blight patch label (default: 1)")
    p.add_argument("--save-patchset", action="store_true", help="also write the sampled patch-set archive (default: off)")
    _training_flags(p)
    _window_flags(p)
    return parser


def _resolve(args) -> None:
    """Fill unset profile-dependent flags from the chosen profile."""
    profile = PROFILES[args.profile]
    for key, value in profile.items():
        if hasattr(args, key) and getattr(args, key) is None:
            setattr(args, key, value)


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        input_size=args.input_size,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        loss=args.loss,
        loss_params=LossParams(args.alpha, args.gamma),
    )


@contextmanager
def stage(name: str):
    started = time.perf_counter()
    log.info("%s: start", name)
    yield
    log.info("%s: done in %.2fs", name, time.perf_counter() - started)


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def cmd_synth(args) -> None:
    if args.diseased > args.images:
        raise ValueError("--diseased cannot exceed --images")
    cfg = SynthConfig(image_count=args.images, diseased_count=args.diseased, dims=(args.rows, args.cols), seed=args.seed)
    with stage("synth"):
        ds = generate_synthetic(cfg, args.out)
    log.info("wrote %d images (%s) to %s", len(ds), ds.counts(), args.out / "manifest.json")


def cmd_sample(args) -> None:
    with stage("load"):
        ds = load_dataset(args.manifest)
    with stage("sample"):
        ps = generate_patchset(ds, args.rho, args.seed, min_symptom_pixels=args.min_symptom_pixels, threads=args.threads)
    with stage("write"):
        save_patchset(ps, args.out)
    log.info("patch set: %d patches (rho=%d x %d images), digest %s", len(ps), args.rho, len(ds), ps.digest())


def cmd_train(args) -> None:
    with stage("load"):
        ps = load_patchset(args.patches)
    cfg = _train_config(args)
    with stage("train"), torch_threads(args.threads):
        state = train(ps, cfg, Architecture(input_size=cfg.input_size))
    path = state.save(args.out / MODEL_FILE)
    log.info("model written to %s (weights %s)", path, state.weight_digest())


def cmd_predict(args) -> None:
    state = ModelState.load(args.model)
    pixels = read_png(args.image, "RGB")
    with stage("predict"), torch_threads(args.threads):
        pred = predict_image(CnnClassifier(state), FieldImage(args.image.stem, pixels, Label.HEALTHY),
                             args.t, args.threshold, args.edge_cover)
    heat, _ = localization_map(pred)
    write_pgm(args.out / "heatmap.pgm", heat)
    write_window_csv(args.out / "windows.csv", pred)
    _write_json(args.out / "prediction.json", pred.to_dict())
    print(json.dumps({"image": args.image.name, "verdict": pred.verdict.slug, "max_prob": pred.max_prob,
                      "windows": len(pred.grid)}))


def cmd_loo(args) -> None:
    with stage("load"):
        ds = load_dataset(args.manifest)
    cfg = _train_config(args)
    with stage("loo"):
        report, ps = run_loo(ds, args.rho, cfg, args.t, args.threshold, args.seed, threads=args.threads,
                             min_symptom_pixels=args.min_symptom_pixels, edge_cover=args.edge_cover)
    report.save(args.out)
    if args.save_patchset:
        save_patchset(ps, args.out / "patches")
    digests = {
        "patchset": ps.digest(),
        "report": report.digest(),
        "weights": {f.held_out_image_id: f.weight_digest for f in report.folds},
    }
    _write_json(args.out / "digests.json", digests)
    sys.stdout.write(report.to_text())


COMMANDS = {"synth": cmd_synth, "sample": cmd_sample, "train": cmd_train, "predict": cmd_predict, "loo": cmd_loo}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    _resolve(args)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose + 1, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
    np.seterr(all="ignore")
    try:
        COMMANDS[args.command](args)
    except BlightPatchError as exc:
        print(f"blightpatch {args.command}: {exc.stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"blightpatch {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
