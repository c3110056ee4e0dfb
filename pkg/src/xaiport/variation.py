"""Feature variation: CutMix, saliency-guided mixing and top-p probe masking."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ShapeError
from .explainers import SaliencyMap, grad_cam
from .model import forward_capture
from .tensor import Rng


@dataclass(frozen=True)
class MixSpec:
    lam: float
    box: tuple[int, int, int, int]  # top, left, height, width (clipped)
    partner_id: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"shape mismatch: {list(a.shape)} vs {list(b.shape)}")
    return a, b


def _box_sides(lam: float, h: int, w: int) -> tuple[int, int]:
    ratio = math.sqrt(1.0 - lam)
    return int(h * ratio), int(w * ratio)


def _clip_box(cy: int, cx: int, cut_h: int, cut_w: int, h: int, w: int):
    top, left = cy - cut_h // 2, cx - cut_w // 2
    y1, x1 = max(top, 0), max(left, 0)
    y2, x2 = min(top + cut_h, h), min(left + cut_w, w)
    return y1, x1, max(y2 - y1, 0), max(x2 - x1, 0)


def _paste(a, y_a, b, y_b, box, partner_id, seed):
    top, left, bh, bw = box
    h, w = a.shape[1:]
    mixed = a.copy()
    mixed[:, top : top + bh, left : left + bw] = b[:, top : top + bh, left : left + bw]
    lam = 1.0 - (bh * bw) / float(h * w)
    y_a = np.asarray(y_a, dtype=np.float64)
    y_b = np.asarray(y_b, dtype=np.float64)
    label = (lam * y_a + (1.0 - lam) * y_b).astype(np.float32)
    return mixed, label, MixSpec(lam=lam, box=box, partner_id=partner_id, seed=seed)


def cutmix(a, y_a, b, y_b, rng: Rng, lam: float | None = None, partner_id: str = "", **_):
    """Paste a random box of ``b`` into ``a``.

    ``lam`` ~ Uniform(0, 1) (Beta(1, 1)) unless given.  Box sides are
    ``sqrt(1 - lam)`` of the image sides, the centre is uniform, and after
    clipping the label weight is recomputed from the pasted area.
    """
    a, b = _check_pair(a, b)
    seed = rng.state
    if lam is None:
        lam = rng.next_f32()
    h, w = a.shape[1:]
    cut_h, cut_w = _box_sides(lam, h, w)
    cy, cx = rng.below(h), rng.below(w)
    box = _clip_box(cy, cx, cut_h, cut_w, h, w)
    return _paste(a, y_a, b, y_b, box, partner_id, seed)


def saliency_mix(a, y_a, b, y_b, saliency: SaliencyMap | np.ndarray, rng: Rng,
                 lam: float | None = None, partner_id: str = "", **_):
    """Like :func:`cutmix` but the box is centred on ``b``'s saliency peak.

    A simplified saliency-guided stand-in for PuzzleMix: no transport
    optimisation, just the most salient region of the partner.
    """
    a, b = _check_pair(a, b)
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    if values.shape != a.shape[1:]:
        raise ShapeError(f"saliency dims {list(values.shape)} do not match image {list(a.shape[1:])}")
    seed = rng.state
    if lam is None:
        lam = rng.next_f32()
    h, w = a.shape[1:]
    cut_h, cut_w = _box_sides(lam, h, w)
    cy, cx = divmod(int(np.argmax(values)), w)
    box = _clip_box(cy, cx, cut_h, cut_w, h, w)
    return _paste(a, y_a, b, y_b, box, partner_id, seed)


def mixer_for(tag: str):
    """Training-time mixer for an augmentation tag (``None`` for ``"none"``)."""
    if tag == "none":
        return None
    if tag == "cutmix":
        return cutmix
    if tag == "saliency-mix":

        def _mix(a, y_a, b, y_b, rng, model=None, partner_id=""):
            cls = int(np.argmax(y_b))
            _, cap = forward_capture(model, b, cls)
            return saliency_mix(a, y_a, b, y_b, grad_cam(cap), rng, partner_id=partner_id)

        return _mix
    raise ValueError(f"unknown augmentation {tag!r}")


def topk_indices(values: np.ndarray, p: float) -> np.ndarray:
    """Flat indices of the ceil(p*H*W) largest values, ties by row-major order."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"probe fraction must lie in (0, 1), got {p}")
    flat = np.asarray(values, dtype=np.float64).ravel()
    k = math.ceil(round(p * flat.size, 9))
    return np.argsort(-flat, kind="stable")[:k]


def mask_topk(x, saliency: SaliencyMap | np.ndarray, p: float, fill) -> np.ndarray:
    """Replace the top-``p`` salient pixels (all channels) with ``fill``.

    ``fill`` is the per-channel dataset mean.
    """
    x = np.asarray(x, dtype=np.float32)
    values = saliency.values if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    if x.ndim != 3 or values.shape != x.shape[1:]:
        raise ShapeError(f"saliency dims {list(values.shape)} do not match image {list(x.shape)}")
    idx = topk_indices(values, p)
    fill = np.broadcast_to(np.asarray(fill, dtype=np.float32).reshape(-1), (x.shape[0],))
    out = x.copy()
    rows, cols = np.unravel_index(idx, values.shape)
    out[:, rows, cols] = fill[:, None]
    return out
