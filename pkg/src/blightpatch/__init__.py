"""Patch-based late-blight detection in high-resolution field images.

Random rotated patches are drawn from labelled images, a small CNN is trained
on them with focal loss, and whole images are classified by sliding windows
with a max-probability threshold.
"""

__version__ = "0.1.0"

from .dataset import Dataset, FieldImage, Label, SynthConfig, generate_synthetic, load_dataset, save_dataset
from .evaluation import LooReport, confusion, patch_accuracy, run_loo
from .geometry import InscribedRect, max_inscribed_rect, resize, sample_rotated_square
from .model import (
    Architecture,
    CnnClassifier,
    LossParams,
    ModelState,
    TrainConfig,
    cross_entropy,
    focal_loss,
    focal_loss_grad,
    predict_proba,
    train,
)
from .predictor import ImagePrediction, WindowGrid, enumerate_windows, localization_map, predict_image
from .sampler import (
    LabeledPatch,
    PatchSet,
    PatchSpec,
    draw_patch_spec,
    extract_labeled_patch,
    generate_patchset,
    label_from_mask,
    load_patchset,
    save_patchset,
)
