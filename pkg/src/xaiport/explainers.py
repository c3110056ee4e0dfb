"""CAM-family saliency maps computed from a :class:`LayerCapture`.

Each method turns target-layer activations ``A`` (K, h, w) and class-score
gradients ``G`` into a raw map, which is then bilinearly upsampled to the
input resolution and min-max normalized into [0, 1].  Internals run in
float64; the returned map is float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LayerCapture

METHODS = ("grad_cam", "grad_cam_pp", "eigen_cam", "layer_cam", "xgrad_cam")

DISPLAY_NAMES = {
    "grad_cam": "GradCAM",
    "grad_cam_pp": "GradCAM++",
    "eigen_cam": "EigenCAM",
    "layer_cam": "LayerCAM",
    "xgrad_cam": "XGradCAM",
}


@dataclass(frozen=True)
class SaliencyMap:
    values: np.ndarray  # (H_in, W_in) float32 in [0, 1]
    method: str
    sample_id: str = ""
    class_index: int | None = None
    layer: str = ""

    def manifest(self) -> dict:
        return {
            "method": self.method,
            "sample_id": self.sample_id,
            "class_index": self.class_index,
            "layer": self.layer,
            "dims": list(self.values.shape),
        }


def upsample_normalize(raw: np.ndarray, target_hw) -> np.ndarray:
    """Corner-aligned bilinear resize to ``target_hw`` followed by min-max scaling.

    A flat positive map becomes all ones and an all-zero map stays zero.
    """
    raw = np.asarray(raw, dtype=np.float64)
    up = _bilinear(raw, tuple(target_hw))
    lo, hi = up.min(), up.max()
    if hi > lo:
        out = (up - lo) / (hi - lo)
    elif hi > 0:
        out = np.ones_like(up)
    else:
        out = np.zeros_like(up)
    return out.astype(np.float32)


def _bilinear(img: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    h, w = img.shape
    oh, ow = out_hw
    if (h, w) == (oh, ow):
        return img.copy()
    ys = np.arange(oh) * ((h - 1) / (oh - 1)) if oh > 1 else np.zeros(1)
    xs = np.arange(ow) * ((w - 1) / (ow - 1)) if ow > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy


def _channel_sum(weights: np.ndarray, acts: np.ndarray) -> np.ndarray:
    # Explicit channel loop: every pixel sees the same operation order, so a
    # flat map stays exactly flat (BLAS kernels may treat tail pixels differently).
    out = np.zeros(acts.shape[1:])
    for wk, ak in zip(weights, acts):
        out += wk * ak
    return out


def _weighted_sum(weights: np.ndarray, acts: np.ndarray) -> np.ndarray:
    return np.maximum(_channel_sum(weights, acts), 0.0)


def _finish(raw, capture: LayerCapture, method: str, sample_id: str, class_index) -> SaliencyMap:
    return SaliencyMap(
        values=upsample_normalize(raw, capture.target_hw),
        method=method,
        sample_id=sample_id,
        class_index=class_index,
        layer=capture.layer,
    )


def _arrays(capture: LayerCapture):
    return capture.activations.astype(np.float64), capture.gradients.astype(np.float64)


def grad_cam(capture: LayerCapture, sample_id: str = "") -> SaliencyMap:
    """Channel weights are the spatial mean of the gradients."""
    acts, grads = _arrays(capture)
    weights = grads.mean(axis=(1, 2))
    return _finish(_weighted_sum(weights, acts), capture, "grad_cam", sample_id, capture.class_index)


def grad_cam_pp(capture: LayerCapture, sample_id: str = "") -> SaliencyMap:
    """Grad-CAM++ closed form (exponential score assumption).

    alpha = g^2 / (2 g^2 + sum(A) g^3), zeroed where the denominator is below
    1e-12 in magnitude; channel weight = sum(alpha * relu(g)).
    """
    acts, grads = _arrays(capture)
    g2 = grads**2
    g3 = g2 * grads
    denom = 2.0 * g2 + acts.sum(axis=(1, 2), keepdims=True) * g3
    safe = np.abs(denom) >= 1e-12
    alpha = np.where(safe, g2 / np.where(safe, denom, 1.0), 0.0)
    weights = (alpha * np.maximum(grads, 0.0)).sum(axis=(1, 2))
    return _finish(_weighted_sum(weights, acts), capture, "grad_cam_pp", sample_id, capture.class_index)


def eigen_cam(capture: LayerCapture, sample_id: str = "", iterations: int = 100, tol: float = 1e-9) -> SaliencyMap:
    """Projection of the activations on their first principal direction.

    Gradients and the class index are ignored.  The right singular vector is
    found by power iteration on A^T A started from the all-ones direction,
    and the map's sign is fixed so that its sum is non-negative.
    """
    acts = capture.activations.astype(np.float64)
    k, h, w = acts.shape
    mat = acts.reshape(k, h * w).T  # (h*w, K)
    raw = _channel_sum(first_right_singular_vector(mat, iterations, tol), acts)
    if raw.sum() < 0:
        raw = -raw
    raw = np.maximum(raw, 0.0)
    return _finish(raw, capture, "eigen_cam", sample_id, None)


def first_right_singular_vector(mat: np.ndarray, iterations: int = 100, tol: float = 1e-9) -> np.ndarray:
    gram = mat.T @ mat
    v = np.ones(gram.shape[0]) / np.sqrt(gram.shape[0])
    for _ in range(iterations):
        nxt = gram @ v
        norm = np.linalg.norm(nxt)
        if norm == 0.0:
            return np.zeros_like(v)
        nxt /= norm
        done = np.linalg.norm(nxt - v) < tol
        v = nxt
        if done:
            break
    return v


def layer_cam(capture: LayerCapture, sample_id: str = "") -> SaliencyMap:
    """Element-wise positive-gradient weighting, summed over channels."""
    acts, grads = _arrays(capture)
    raw = np.maximum((np.maximum(grads, 0.0) * acts).sum(axis=0), 0.0)
    return _finish(raw, capture, "layer_cam", sample_id, capture.class_index)


def xgrad_cam(capture: LayerCapture, sample_id: str = "") -> SaliencyMap:
    """Gradients averaged with activation-normalized weights."""
    acts, grads = _arrays(capture)
    norm = acts / (acts.sum(axis=(1, 2), keepdims=True) + 1e-12)
    weights = (norm * grads).sum(axis=(1, 2))
    return _finish(_weighted_sum(weights, acts), capture, "xgrad_cam", sample_id, capture.class_index)


EXPLAINERS = {
    "grad_cam": grad_cam,
    "grad_cam_pp": grad_cam_pp,
    "eigen_cam": eigen_cam,
    "layer_cam": layer_cam,
    "xgrad_cam": xgrad_cam,
}


def explain(method: str, capture: LayerCapture, sample_id: str = "") -> SaliencyMap:
    try:
        fn = EXPLAINERS[method]
    except KeyError:
        raise ValueError(f"unknown XAI method {method!r}; expected one of {METHODS}") from None
    return fn(capture, sample_id=sample_id)
