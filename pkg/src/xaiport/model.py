"""A tiny numpy convolutional classifier with target-layer capture.

The network is the local, gradient-capable surrogate the CAM explainers run
on.  Supported layers: ``conv:<out>`` (3x3, zero padding 1, stride 1),
``relu``, ``gap`` (global average pooling), ``dense:<out>`` and a final
``softmax``.  All parameters and activations are float32.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ModelSpecError, ShapeError
from .tensor import Rng, from_xten, to_xten

DEFAULT_LAYERS = ("conv:8", "relu", "conv:8", "relu", "gap", "dense:2", "softmax")
AUGMENTATIONS = ("none", "cutmix", "saliency-mix")


@dataclass(frozen=True)
class ModelSpec:
    input_dims: tuple[int, int, int] = (1, 16, 16)
    layers: tuple[str, ...] = DEFAULT_LAYERS
    target_layer: str = "conv2"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.plan()  # validates

    def plan(self) -> list[tuple[str, str, int]]:
        """Resolve layer strings into ``(kind, name, size)`` triples."""
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ModelSpecError(f"input dims must be (C, H, W) positive, got {self.input_dims}")
        plan = []
        counts = {"conv": 0, "dense": 0, "relu": 0}
        pooled = False
        for pos, token in enumerate(self.layers):
            kind, _, arg = token.partition(":")
            if kind in ("conv", "dense"):
                try:
                    size = int(arg)
                except ValueError:
                    raise ModelSpecError(f"layer {token!r} needs an integer width") from None
                if size < 1:
                    raise ModelSpecError(f"layer {token!r} needs a positive width")
                if kind == "conv" and pooled:
                    raise ModelSpecError("conv layers must precede gap")
                if kind == "dense" and not pooled:
                    raise ModelSpecError("dense layers must follow gap")
            elif kind in ("relu", "gap", "softmax"):
                if arg:
                    raise ModelSpecError(f"layer {token!r} takes no argument")
                size = 0
                if kind == "gap":
                    if pooled:
                        raise ModelSpecError("only one gap layer is allowed")
                    pooled = True
                if kind == "softmax" and pos != len(self.layers) - 1:
                    raise ModelSpecError("softmax must be the last layer")
            else:
                raise ModelSpecError(f"unknown layer {token!r}")
            if kind in counts:
                counts[kind] += 1
                name = f"{kind}{counts[kind]}"
            else:
                name = kind
            plan.append((kind, name, size))
        if not plan or plan[-1][0] != "softmax":
            raise ModelSpecError("exactly one softmax is required, as the last layer")
        if not pooled or counts["dense"] == 0:
            raise ModelSpecError("architecture needs gap followed by at least one dense layer")
        if plan[-2][0] != "dense":
            raise ModelSpecError("softmax must directly follow a dense layer")
        names = [p[1] for p in plan]
        if self.target_layer not in names or not self.target_layer.startswith("conv"):
            raise ModelSpecError(f"target layer {self.target_layer!r} is not a conv layer")
        idx = names.index(self.target_layer)
        if plan[idx + 1][0] != "relu":
            raise ModelSpecError(f"target layer {self.target_layer!r} must be followed by relu")
        return plan

    @property
    def num_classes(self) -> int:
        return [size for kind, _, size in self.plan() if kind == "dense"][-1]

    def to_dict(self) -> dict:
        return {
            "input_dims": list(self.input_dims),
            "layers": list(self.layers),
            "target_layer": self.target_layer,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class LayerCapture:
    """Target-layer activations and the gradient of one class score."""

    activations: np.ndarray  # (K, H, W)
    gradients: np.ndarray  # (K, H, W), d S_c / d A
    class_index: int
    layer: str = ""
    input_hw: tuple[int, int] | None = None

    def __post_init__(self):
        if self.activations.shape != self.gradients.shape or self.activations.ndim != 3:
            raise ShapeError(
                f"activations {list(self.activations.shape)} and gradients "
                f"{list(self.gradients.shape)} must share (K, H, W) dims"
            )

    @property
    def target_hw(self) -> tuple[int, int]:
        return self.input_hw or self.activations.shape[1:]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 0.1
    seed: int = 0
    augmentation: str = "none"
    mix_probability: float = 0.5

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        # lr == 0 is accepted: it freezes the weights, which tests rely on
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.mix_probability <= 1.0:
            raise ValueError("mix_probability must lie in [0, 1]")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}")


@dataclass
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int
    num_classes: int = 2
    masks: np.ndarray | None = None  # (N, H, W) bool, ground-truth salient region
    ids: list[str] = field(default_factory=list)
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.ids:
            self.ids = [f"s{i:04d}" for i in range(len(self.labels))]
        if not self.class_names:
            self.class_names = tuple(str(c) for c in range(self.num_classes))

    def __len__(self) -> int:
        return len(self.labels)

    def channel_mean(self) -> np.ndarray:
        return self.images.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self), self.num_classes), dtype=np.float32)
        out[np.arange(len(self)), self.labels] = 1.0
        return out


# ----------------------------------------------------------------------------
# Layer kernels
# ----------------------------------------------------------------------------


def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(2, 3))
    # (N, C, H, W, 3, 3) -> (N, H, W, C, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, h, w, c * 9)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dpad = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    for di in range(3):
        for dj in range(3):
            dpad[:, :, di : di + h, dj : dj + w] += d[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return dpad[:, :, 1:-1, 1:-1]


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Model:
    """Parameters plus the resolved layer plan of a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, params: dict[str, tuple[np.ndarray, np.ndarray]]):
        self.spec = spec
        self.plan = spec.plan()
        self.params = params
        names = [name for _, name, _ in self.plan]
        # post-activation output of the target conv is the relu right after it
        self.target_index = names.index(spec.target_layer) + 1

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def copy(self) -> "Model":
        return Model(self.spec, {k: (w.copy(), b.copy()) for k, (w, b) in self.params.items()})

    def weights_equal(self, other: "Model") -> bool:
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(self.params[k][i], other.params[k][i]) for k in self.params for i in (0, 1)
        )

    # -- forward / backward ---------------------------------------------------

    def _forward(self, x: np.ndarray):
        outputs, caches = [], []
        h = x
        for kind, name, size in self.plan:
            if kind == "conv":
                w, b = self.params[name]
                cols = _im2col(h)
                out = cols @ w.reshape(size, -1).T + b
                caches.append((cols, h.shape))
                h = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
            elif kind == "relu":
                caches.append(h > 0)
                h = np.maximum(h, np.float32(0.0))
            elif kind == "gap":
                caches.append(h.shape)
                h = h.mean(axis=(2, 3), dtype=np.float32)
            elif kind == "dense":
                w, b = self.params[name]
                caches.append(h)
                h = h @ w.T + b
            else:  # softmax: stay on logits, probabilities are computed by the caller
                caches.append(None)
            outputs.append(h)
        return outputs, caches

    def _backward(self, caches, dlogits: np.ndarray, stop: int = -1):
        """Reverse-mode pass from the logits.

        Returns ``(param_grads, d_out)`` where ``d_out`` is the gradient with
        respect to the output of layer ``stop`` (the network input when -1).
        """
        grads = {}
        d = dlogits
        last = len(self.plan) - 2  # the layer feeding softmax
        for idx in range(last, stop, -1):
            kind, name, size = self.plan[idx]
            cache = caches[idx]
            if kind == "dense":
                w, _ = self.params[name]
                grads[name] = (d.T @ cache, d.sum(axis=0))
                d = d @ w
            elif kind == "gap":
                n, k, h, wd = cache
                d = np.broadcast_to((d / np.float32(h * wd))[:, :, None, None], cache).astype(np.float32)
            elif kind == "relu":
                d = d * cache
            elif kind == "conv":
                w, _ = self.params[name]
                cols, in_shape = cache
                dflat = d.transpose(0, 2, 3, 1).reshape(-1, size)
                grads[name] = (
                    (dflat.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape),
                    dflat.sum(axis=0),
                )
                if idx > 0:
                    d = _col2im(dflat @ w.reshape(size, -1), in_shape).astype(np.float32)
        return grads, d

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = self._check_batch(x)
        outputs, _ = self._forward(x)
        return outputs[-1]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Softmax scores for a (C, H, W) image or an (N, C, H, W) batch."""
        single = np.ndim(x) == 3
        probs = _softmax(self.logits(x[None] if single else x)).astype(np.float32)
        return probs[0] if single else probs

    def _check_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.spec.input_dims:
            raise ShapeError(f"input dims {list(x.shape[1:])} do not match model input {list(self.spec.input_dims)}")
        return x


def init_model(spec: ModelSpec) -> Model:
    """Uniform(-b, b) weights with b = sqrt(1 / fan_in); zero biases."""
    rng = Rng(spec.seed)
    params = {}
    channels = spec.input_dims[0]
    features = 0
    for kind, name, size in spec.plan():
        if kind == "conv":
            shape = (size, channels, 3, 3)
            fan_in = channels * 9
            channels = size
        elif kind == "dense":
            fan_in = features or channels
            shape = (size, fan_in)
            features = size
        else:
            continue
        bound = math.sqrt(1.0 / fan_in)
        u = rng.uniform(int(np.prod(shape))).astype(np.float64)
        # shift by half a quantum so the open interval (-b, b) is respected
        w = ((u + 2.0**-25) * 2.0 - 1.0) * bound
        params[name] = (w.astype(np.float32).reshape(shape), np.zeros(size, dtype=np.float32))
    return Model(spec, params)


def forward_capture(model: Model, x: np.ndarray, class_index: int) -> tuple[np.ndarray, LayerCapture]:
    """Score one (C, H, W) image and capture the target layer for ``class_index``.

    The gradient is taken of the pre-softmax score of the class.
    """
    x = np.asarray(x, dtype=np.float32)
    if tuple(x.shape) != model.spec.input_dims:
        raise ShapeError(f"input dims {list(x.shape)} do not match model input {list(model.spec.input_dims)}")
    if not 0 <= class_index < model.num_classes:
        raise IndexError(f"class {class_index} out of range for {model.num_classes} classes")
    outputs, caches = model._forward(x[None])
    probs = _softmax(outputs[-1])[0].astype(np.float32)
    dlogits = np.zeros_like(outputs[-1])
    dlogits[0, class_index] = 1.0
    _, grad = model._backward(caches, dlogits, stop=model.target_index)
    capture = LayerCapture(
        activations=outputs[model.target_index][0].copy(),
        gradients=np.ascontiguousarray(grad[0], dtype=np.float32),
        class_index=int(class_index),
        layer=model.spec.target_layer,
        input_hw=tuple(model.spec.input_dims[1:]),
    )
    return probs, capture


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------

Mixer = Callable[..., tuple]


def train(
    model: Model,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    mixer: Mixer | None = None,
    mix_log: list | None = None,
) -> tuple[Model, list[float]]:
    """Plain SGD on soft-label cross-entropy.

    When a mixer is in play each batch sample is mixed with a random partner
    with probability ``cfg.mix_probability``.  The mixer is called as
    ``mixer(a, y_a, b, y_b, rng, model=..., partner_id=...)`` and returns
    ``(image, label, mix_spec)``.  The input model is left untouched.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    if mixer is None and cfg.augmentation != "none":
        from .variation import mixer_for

        mixer = mixer_for(cfg.augmentation)
    model = model.copy()
    rng = Rng(cfg.seed)
    targets = dataset.one_hot()
    lr = np.float32(cfg.learning_rate)
    history = []
    n = len(dataset)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = dataset.images[idx].copy()
            yb = targets[idx].copy()
            if mixer is not None and cfg.mix_probability > 0:
                for row, i in enumerate(idx):
                    if rng.next_f32() >= cfg.mix_probability:
                        continue
                    j = rng.below(n)
                    img, lab, spec = mixer(
                        xb[row], yb[row], dataset.images[j], targets[j], rng,
                        model=model, partner_id=dataset.ids[j],
                    )
                    xb[row], yb[row] = img, lab
                    if mix_log is not None:
                        mix_log.append(spec)
            outputs, caches = model._forward(xb)
            probs = _softmax(outputs[-1])
            loss = -np.sum(yb * np.log(np.clip(probs, 1e-12, None))) / len(idx)
            total += float(loss) * len(idx)
            dlogits = ((probs - yb) / len(idx)).astype(np.float32)
            grads, _ = model._backward(caches, dlogits)
            for name, (gw, gb) in grads.items():
                w, b = model.params[name]
                model.params[name] = (
                    (w - lr * gw.astype(np.float32)).astype(np.float32),
                    (b - lr * gb.astype(np.float32)).astype(np.float32),
                )
        history.append(total / n)
    return model, history


def accuracy(model: Model, dataset: LabeledDataset) -> float:
    pred = model.predict_proba(dataset.images).argmax(axis=1)
    return float(np.mean(pred == dataset.labels))


# ----------------------------------------------------------------------------
# Synthetic data
# ----------------------------------------------------------------------------


def make_synthetic_bars(n: int, seed: int = 0) -> LabeledDataset:
    """Grayscale 16x16 images with a horizontal (class 0) or vertical (class 1) bar.

    Class 0 puts a 4x16 bar across the top four rows, class 1 a 16x4 bar down
    the left four columns.  Background is uniform noise in [0, 0.2], bar
    pixels are uniform in [0.8, 1.0].  ``masks`` marks the bar pixels.
    """
    if n < 2:
        raise ValueError("synthetic-bars needs n >= 2")
    rng = Rng(seed)
    labels = (np.arange(n) % 2)[rng.permutation(n)]
    noise = rng.uniform(n * 256).reshape(n, 16, 16) * np.float32(0.2)
    bar = rng.uniform(n * 256).reshape(n, 16, 16) * np.float32(0.2) + np.float32(0.8)
    masks = np.zeros((n, 16, 16), dtype=bool)
    masks[labels == 0, 0:4, :] = True
    masks[labels == 1, :, 0:4] = True
    images = np.where(masks, bar, noise).astype(np.float32)[:, None]
    return LabeledDataset(
        images=np.clip(images, 0.0, 1.0),
        labels=labels.astype(np.int64),
        num_classes=2,
        masks=masks,
        class_names=("horizontal", "vertical"),
    )


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------


def save_checkpoint(model: Model, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for name, (w, b) in model.params.items():
        for part, arr in (("weight", w), ("bias", b)):
            fname = f"{name}.{part}.xten"
            (directory / fname).write_bytes(to_xten(arr))
            tensors[f"{name}.{part}"] = {"file": fname, "dims": list(arr.shape)}
    manifest = {**model.spec.to_dict(), "tensors": tensors}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def load_checkpoint(directory: str | Path) -> Model:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    spec = ModelSpec(
        input_dims=tuple(manifest["input_dims"]),
        layers=tuple(manifest["layers"]),
        target_layer=manifest["target_layer"],
        seed=manifest["seed"],
    )
    params = {}
    for kind, name, _ in spec.plan():
        if kind in ("conv", "dense"):
            w = from_xten((directory / manifest["tensors"][f"{name}.weight"]["file"]).read_bytes())
            b = from_xten((directory / manifest["tensors"][f"{name}.bias"]["file"]).read_bytes())
            params[name] = (w, b)
    return Model(spec, params)
