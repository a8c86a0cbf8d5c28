"""Binary patch classifier: losses, reference CNN, training and weight files.

The network body is torch; the losses and their derivatives with respect to
the predicted probability are written out by hand and fed to autograd through
:class:`_ProbabilityLoss`, so the loss gradient torch propagates is exactly the
analytic one implemented here.

Weight file layout (little endian)::

    b"ISD4L" | uint16 version | uint32 descriptor length | descriptor (UTF-8 JSON)
    | float32 tensors in descriptor order
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Protocol, Sequence

import numpy as np
import torch
from torch import nn

from . import geometry
from .errors import ArchitectureMismatch, EmptyPatchSet, NonFiniteLoss, WeightFileError

log = logging.getLogger(__name__)

EPS = 1e-7
MAGIC = b"ISD4L"
FORMAT_VERSION = 1

LossKind = Literal["focal", "cross_entropy"]


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.5
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0.0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


# --------------------------------------------------------------------------
# Losses. The private helpers take an already-clamped probability and a log
# function so the same expressions serve numpy and torch.


def _ce_value(p, c, log):
    return -c * log(p) - (1 - c) * log(1 - p)


def _ce_dp(p, c):
    return -c / p + (1 - c) / (1 - p)


def _focal_value(p, c, alpha, gamma, log):
    return -alpha * c * log(p) * (1 - p) ** gamma - (1 - alpha) * (1 - c) * log(1 - p) * p**gamma


def _focal_dp(p, c, alpha, gamma, log):
    pos = -alpha * ((1 - p) ** gamma / p - gamma * (1 - p) ** (gamma - 1) * log(p))
    neg = -(1 - alpha) * (gamma * p ** (gamma - 1) * log(1 - p) - p**gamma / (1 - p))
    return c * pos + (1 - c) * neg


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), EPS, 1.0 - EPS)


def cross_entropy(p, c):
    """Binary cross-entropy ``-c log p - (1 - c) log(1 - p)`` with ``p`` clamped to ``[EPS, 1 - EPS]``."""
    return _ce_value(_clamp(p), np.asarray(c, dtype=np.float64), np.log)


def cross_entropy_grad(p, c):
    return _ce_dp(_clamp(p), np.asarray(c, dtype=np.float64))


def focal_loss(p, c, params: LossParams = LossParams()):
    """Alpha-weighted focal loss; the positive term carries ``alpha``, the negative ``1 - alpha``."""
    return _focal_value(_clamp(p), np.asarray(c, dtype=np.float64), params.alpha, params.gamma, np.log)


def focal_loss_grad(p, c, params: LossParams = LossParams()):
    """Analytic ``dLoss/dp`` of :func:`focal_loss`."""
    return _focal_dp(_clamp(p), np.asarray(c, dtype=np.float64), params.alpha, params.gamma, np.log)


class _ProbabilityLoss(torch.autograd.Function):
    """Mean loss over a batch of logits, differentiated with the analytic dL/dp."""

    @staticmethod
    def forward(ctx, logits, labels, kind, alpha, gamma):
        p = torch.sigmoid(logits)
        pc = p.clamp(EPS, 1.0 - EPS)
        if kind == "focal":
            per = _focal_value(pc, labels, alpha, gamma, torch.log)
        else:
            per = _ce_value(pc, labels, torch.log)
        ctx.save_for_backward(p, pc, labels)
        ctx.kind, ctx.alpha, ctx.gamma = kind, alpha, gamma
        return per.mean()

    @staticmethod
    def backward(ctx, grad_out):
        p, pc, labels = ctx.saved_tensors
        if ctx.kind == "focal":
            dp = _focal_dp(pc, labels, ctx.alpha, ctx.gamma, torch.log)
        else:
            dp = _ce_dp(pc, labels)
        # The clamp is flat outside [EPS, 1 - EPS], so clamped entries carry no gradient.
        live = (p > EPS) & (p < 1.0 - EPS)
        grad = grad_out * torch.where(live, dp, torch.zeros_like(dp)) * p * (1 - p) / p.numel()
        return grad, None, None, None, None


def batch_loss(logits: torch.Tensor, labels: torch.Tensor, kind: LossKind = "focal", params: LossParams = LossParams()):
    if kind not in ("focal", "cross_entropy"):
        raise ValueError(f"unknown loss {kind!r}")
    return _ProbabilityLoss.apply(logits, labels.to(logits.dtype), kind, params.alpha, params.gamma)


# --------------------------------------------------------------------------
# Architecture


@dataclass(frozen=True)
class Architecture:
    """Conv blocks of [3x3 conv, batch norm, ReLU, 2x2 max-pool], global average pool,
    dense+ReLU, dense+sigmoid."""

    input_size: int = 380
    conv_widths: tuple[int, ...] = (8, 16, 32, 64)
    hidden: int = 32
    in_channels: int = 3
    batch_norm: bool = True

    def __post_init__(self):
        if self.input_size < 8:
            raise ValueError(f"input size must be >= 8, got {self.input_size}")
        if self.input_size >> len(self.conv_widths) < 1:
            raise ValueError(f"{len(self.conv_widths)} pooling stages collapse a {self.input_size}px input")

    def layers(self) -> list[dict]:
        out = []
        c = self.in_channels
        for i, w in enumerate(self.conv_widths, start=1):
            out.append({"name": f"conv{i}.weight", "shape": [w, c, 3, 3]})
            out.append({"name": f"conv{i}.bias", "shape": [w]})
            if self.batch_norm:
                for part in ("weight", "bias", "running_mean", "running_var"):
                    out.append({"name": f"bn{i}.{part}", "shape": [w]})
            c = w
        out.append({"name": "dense1.weight", "shape": [self.hidden, c]})
        out.append({"name": "dense1.bias", "shape": [self.hidden]})
        out.append({"name": "head.weight", "shape": [1, self.hidden]})
        out.append({"name": "head.bias", "shape": [1]})
        return out

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "conv_widths": list(self.conv_widths),
            "hidden": self.hidden,
            "in_channels": self.in_channels,
            "batch_norm": self.batch_norm,
            "layers": self.layers(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        arch = cls(
            int(d["input_size"]),
            tuple(int(w) for w in d["conv_widths"]),
            int(d["hidden"]),
            int(d.get("in_channels", 3)),
            bool(d.get("batch_norm", True)),
        )
        if "layers" in d and d["layers"] != arch.layers():
            raise ArchitectureMismatch("layer list disagrees with the architecture parameters")
        return arch


class PatchNet(nn.Module):
    def __init__(self, arch: Architecture):
        super().__init__()
        blocks = []
        c = arch.in_channels
        for w in arch.conv_widths:
            blocks.append(nn.Conv2d(c, w, 3, padding=1))
            if arch.batch_norm:
                blocks.append(nn.BatchNorm2d(w))
            blocks += [nn.ReLU(), nn.MaxPool2d(2)]
            c = w
        self.features = nn.Sequential(*blocks)
        self.dense1 = nn.Linear(c, arch.hidden)
        self.head = nn.Linear(arch.hidden, 1)

    def forward(self, x):
        x = self.features(x).mean(dim=(2, 3))
        return self.head(torch.relu(self.dense1(x))).squeeze(1)

    def ordered_tensors(self) -> list[torch.Tensor]:
        """Parameters and batch-norm statistics in descriptor order."""
        out = []
        for m in self.features:
            if isinstance(m, nn.Conv2d):
                out += [m.weight, m.bias]
            elif isinstance(m, nn.BatchNorm2d):
                out += [m.weight, m.bias, m.running_mean, m.running_var]
        return out + [self.dense1.weight, self.dense1.bias, self.head.weight, self.head.bias]


def init_weights(arch: Architecture, seed: int, zero_head: bool = False) -> list[np.ndarray]:
    """He-uniform kernels, zero biases, identity batch norm; seeded PCG64 stream."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0xC0FFEE,))))
    weights = []
    for layer in arch.layers():
        shape = tuple(layer["shape"])
        name = layer["name"]
        if name.startswith("bn"):
            fill = 1.0 if name.endswith((".weight", ".running_var")) else 0.0
            weights.append(np.full(shape, fill, dtype=np.float32))
            continue
        if name.endswith(".bias") or (zero_head and name.startswith("head.")):
            weights.append(np.zeros(shape, dtype=np.float32))
            continue
        fan_in = int(np.prod(shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=shape).astype(np.float32))
    return weights


def build_network(arch: Architecture, weights: Sequence[np.ndarray], dtype=torch.float32) -> PatchNet:
    net = PatchNet(arch).to(dtype)
    params = net.ordered_tensors()
    if len(params) != len(weights):
        raise ArchitectureMismatch(f"expected {len(params)} tensors, got {len(weights)}")
    with torch.no_grad():
        for prm, w in zip(params, weights):
            if tuple(prm.shape) != tuple(w.shape):
                raise ArchitectureMismatch(f"tensor shape {w.shape} does not fit {tuple(prm.shape)}")
            prm.copy_(torch.from_numpy(np.asarray(w)).to(dtype))
    return net


# --------------------------------------------------------------------------
# Model state and persistence


@dataclass(frozen=True)
class TrainConfig:
    input_size: int = 380
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    loss: LossKind = "focal"
    loss_params: LossParams = field(default_factory=LossParams)

    def __post_init__(self):
        if self.input_size < 8:
            raise ValueError("input_size must be >= 8")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("focal", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class ModelState:
    arch: Architecture
    weights: tuple[np.ndarray, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        layers = self.arch.layers()
        if len(layers) != len(self.weights):
            raise ArchitectureMismatch(f"{len(layers)} layers but {len(self.weights)} tensors")
        for layer, w in zip(layers, self.weights):
            if list(w.shape) != layer["shape"] or w.dtype != np.float32:
                raise ArchitectureMismatch(f"{layer['name']}: got {w.dtype}{list(w.shape)}, want float32{layer['shape']}")

    @classmethod
    def fresh(cls, arch: Architecture, seed: int = 0, zero_head: bool = False) -> "ModelState":
        return cls(arch, tuple(init_weights(arch, seed, zero_head)), {})

    def to_bytes(self) -> bytes:
        descriptor = json.dumps({"architecture": self.arch.to_dict(), "metadata": self.metadata}, sort_keys=True).encode()
        parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(descriptor)), descriptor]
        parts += [np.ascontiguousarray(w, dtype="<f4").tobytes() for w in self.weights]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ModelState":
        if not blob.startswith(MAGIC):
            raise WeightFileError("not a weight file (bad magic)")
        off = len(MAGIC)
        try:
            version, n = struct.unpack_from("<HI", blob, off)
        except struct.error as exc:
            raise WeightFileError(f"truncated header: {exc}") from exc
        if version != FORMAT_VERSION:
            raise WeightFileError(f"unsupported weight format version {version}")
        off += struct.calcsize("<HI")
        try:
            desc = json.loads(blob[off : off + n].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WeightFileError(f"bad descriptor: {exc}") from exc
        off += n
        arch = Architecture.from_dict(desc["architecture"])
        weights = []
        for layer in arch.layers():
            count = int(np.prod(layer["shape"]))
            chunk = blob[off : off + 4 * count]
            if len(chunk) != 4 * count:
                raise WeightFileError(f"truncated tensor {layer['name']}")
            weights.append(np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(layer["shape"]))
            off += 4 * count
        if off != len(blob):
            raise WeightFileError(f"{len(blob) - off} trailing bytes after the last tensor")
        return cls(arch, tuple(weights), desc.get("metadata", {}))

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ModelState":
        return cls.from_bytes(Path(path).read_bytes())

    def weight_digest(self) -> str:
        h = hashlib.sha256()
        for w in self.weights:
            h.update(np.ascontiguousarray(w, dtype="<f4").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# Inference


class PatchClassifier(Protocol):
    """Anything that maps a batch of RGB rasters to symptom probabilities."""

    def predict_batch(self, rasters: Sequence[np.ndarray]) -> np.ndarray: ...


def to_inputs(rasters: Sequence[np.ndarray], size: int) -> np.ndarray:
    """Resize (bilinear) and scale to ``[0, 1]`` as an ``N x 3 x s x s`` float32 array."""
    out = np.empty((len(rasters), 3, size, size), dtype=np.float32)
    for i, r in enumerate(rasters):
        if r.ndim != 3 or r.shape[2] != 3:
            raise ArchitectureMismatch(f"expected an RGB raster, got shape {r.shape}")
        rs = r if r.shape[:2] == (size, size) else geometry.resize(r, size, "bilinear")
        out[i] = rs.transpose(2, 0, 1).astype(np.float32) / 255.0
    return out


class CnnClassifier:
    def __init__(self, state: ModelState, batch_size: int = 64):
        self.state = state
        self.batch_size = batch_size
        self.net = build_network(state.arch, state.weights).eval()

    @property
    def input_size(self) -> int:
        return self.state.arch.input_size

    def predict_inputs(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1:] != (self.state.arch.in_channels, self.input_size, self.input_size):
            raise ArchitectureMismatch(f"input batch {x.shape} does not match {self.input_size}px RGB")
        probs = []
        with torch.no_grad():
            for i in range(0, len(x), self.batch_size):
                logits = self.net(torch.from_numpy(x[i : i + self.batch_size]))
                probs.append(torch.sigmoid(logits).numpy().astype(np.float64))
        return np.concatenate(probs) if probs else np.zeros(0)

    def predict_batch(self, rasters: Sequence[np.ndarray]) -> np.ndarray:
        return self.predict_inputs(to_inputs(rasters, self.input_size))


def predict_proba(model: ModelState | CnnClassifier, patch: np.ndarray) -> float:
    clf = model if isinstance(model, CnnClassifier) else CnnClassifier(model)
    return float(clf.predict_batch([patch])[0])


# --------------------------------------------------------------------------
# Training


@contextmanager
def torch_threads(n: int):
    """Temporarily pin torch intra-op threads; ``0`` leaves the current setting."""
    prev = torch.get_num_threads()
    if n > 0:
        torch.set_num_threads(n)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def data_digest(x: np.ndarray, y: np.ndarray) -> str:
    h = hashlib.sha256(np.ascontiguousarray(x).tobytes())
    h.update(np.ascontiguousarray(y, dtype=np.int64).tobytes())
    return h.hexdigest()


def recalibrate_batch_norm(net: PatchNet, x: torch.Tensor, batch_size: int) -> None:
    """Replace running statistics with exact averages over ``x`` under the final weights.

    Momentum-based running stats trail the weights during training and bias
    eval-mode outputs; one cumulative pass fixes that.
    """
    bns = [m for m in net.features if isinstance(m, nn.BatchNorm2d)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    net.train()
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            net(x[i : i + batch_size])
    for m, mom in zip(bns, saved):
        m.momentum = mom
    net.eval()


def train_arrays(x: np.ndarray, y: np.ndarray, config: TrainConfig, arch: Architecture | None = None) -> ModelState:
    """Mini-batch Adam on prepared inputs ``x`` (N x 3 x s x s in [0, 1]) and labels ``y``."""
    if len(x) == 0:
        raise EmptyPatchSet("no training patches")
    arch = arch or Architecture(input_size=config.input_size)
    if x.shape[1:] != (arch.in_channels, arch.input_size, arch.input_size):
        raise ArchitectureMismatch(f"inputs {x.shape[1:]} do not match architecture input {arch.input_size}")
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        log.warning("training set holds a single class (%s)", np.unique(y).tolist())

    net = build_network(arch, init_weights(arch, config.seed))
    opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate, betas=(0.9, 0.999))
    shuffle = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(1,))))
    xt = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    yt = torch.from_numpy(y.astype(np.float32))
    history = []
    started = time.perf_counter()
    net.train()
    for epoch in range(config.epochs):
        order = torch.from_numpy(shuffle.permutation(len(x)))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            loss = batch_loss(net(xt[idx]), yt[idx], config.loss, config.loss_params)
            value = loss.detach().item()
            if not math.isfinite(value):
                raise NonFiniteLoss(f"loss became {value} at epoch {epoch + 1}, batch {i // config.batch_size}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += value * len(idx)
        history.append(total / len(x))
        log.debug("epoch %d/%d loss %.6f", epoch + 1, config.epochs, history[-1])
    log.info("trained %d epochs on %d patches in %.1fs (final loss %.5f)",
             config.epochs, len(x), time.perf_counter() - started, history[-1])
    if arch.batch_norm:
        recalibrate_batch_norm(net, xt, config.batch_size)
    weights = tuple(p.detach().numpy().astype(np.float32).copy() for p in net.ordered_tensors())
    meta = {"config": config.to_dict(), "loss_history": history, "data_digest": data_digest(x, y), "train_size": int(len(x))}
    return ModelState(arch, weights, meta)


def train(patches, config: TrainConfig, arch: Architecture | None = None) -> ModelState:
    """Train on labelled patches (a ``PatchSet`` or any sequence of ``LabeledPatch``)."""
    patches = list(getattr(patches, "patches", patches))
    if not patches:
        raise EmptyPatchSet("patch set is empty")
    size = arch.input_size if arch else config.input_size
    x = to_inputs([p.pixels for p in patches], size)
    y = np.array([int(p.label) for p in patches], dtype=np.int64)
    return train_arrays(x, y, config, arch)
