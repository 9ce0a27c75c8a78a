"""Continuous attention maps from the VQA model's designated conv layer.

Channel weights are spatially pooled logit gradients; the rectified weighted
activation sum gives a coarse saliency grid, which is bilinearly interpolated
to image size, Gaussian-smoothed (sigma=2) and max-normalized into [0, 1].
"""

from __future__ import annotations

import numpy as np
from PIL import Image

from .vqa_core import VqaNet, logit_gradient, vqa_forward

EPS = 1e-8


def grad_cam(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """Coarse saliency: ReLU(sum_k alpha_k * activations[k]) with
    alpha_k the mean of gradients[k] over the u x v grid."""
    activations = np.asarray(activations, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    if activations.shape != gradients.shape or activations.ndim != 3:
        raise ValueError(
            f"activations {activations.shape} and gradients {gradients.shape} "
            "must both be (K, u, v)"
        )
    alpha = gradients.mean(axis=(1, 2))
    saliency = np.tensordot(alpha, activations, axes=1)
    return np.maximum(saliency, 0.0)


def bilinear_resize(values: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pixel-center-aligned bilinear interpolation of a 2D grid to (h, w)."""
    values = np.asarray(values, dtype=np.float64)
    u, v = values.shape

    def axis_coords(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        src = np.clip(src, 0.0, n_src - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis_coords(u, h)
    x0, x1, fx = axis_coords(v, w)
    fy = fy[:, None]
    fx = fx[None, :]
    top = values[np.ix_(y0, x0)] * (1 - fx) + values[np.ix_(y0, x1)] * fx
    bot = values[np.ix_(y1, x0)] * (1 - fx) + values[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def gaussian_kernel_1d(sigma: float = 2.0, radius: int | None = None) -> np.ndarray:
    """Truncated Gaussian, radius 4*sigma by default, normalized to sum 1."""
    if radius is None:
        radius = int(np.ceil(4.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma**2))
    return kernel / kernel.sum()


def gaussian_blur(values: np.ndarray, sigma: float = 2.0) -> np.ndarray:
    """Separable Gaussian blur with mirror (reflect, no edge repeat) padding.

    Equivalent to convolving the reflect-padded grid with the normalized
    outer-product kernel, so constants are fixed points.
    """
    values = np.asarray(values, dtype=np.float64)
    kernel = gaussian_kernel_1d(sigma)
    radius = len(kernel) // 2
    padded = np.pad(values, radius, mode="reflect")
    rows = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, padded)
    return np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, rows)


def max_normalize(values: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Scale so the max is 1; inputs with max <= eps are treated as all zero."""
    peak = float(values.max()) if values.size else 0.0
    if peak <= eps:
        return np.zeros_like(values)
    return values / peak


def to_attention_map(saliency: np.ndarray, h: int, w: int, sigma: float = 2.0) -> np.ndarray:
    """Coarse (u, v) saliency -> (1, h, w) attention map in [0, 1]."""
    saliency = np.asarray(saliency, dtype=np.float64)
    u, v = saliency.shape
    if h < u or w < v:
        raise ValueError(f"target size ({h}, {w}) smaller than the saliency grid ({u}, {v})")
    resized = bilinear_resize(saliency, h, w)
    blurred = gaussian_blur(resized, sigma=sigma)
    return max_normalize(blurred)[None].astype(np.float32)


def attention_for(
    model: VqaNet, image: np.ndarray, tokens: list[int], answer: int | None = None
) -> np.ndarray:
    """Attention map for one (image, question) pair; the target logit defaults
    to the model's predicted answer."""
    h, w = image.shape[:2]
    out = vqa_forward(model, image, tokens)
    target = out.predicted if answer is None else answer
    grads = logit_gradient(model, image, tokens, target)
    return to_attention_map(grad_cam(out.conv_activations, grads), h, w)


def overlay_attention(
    image: np.ndarray,
    attention: np.ndarray,
    opacity: float = 0.6,
    color: tuple[float, float, float] = (1.0, 0.0, 0.0),
) -> np.ndarray:
    """Tint the image toward `color` proportionally to attention * opacity."""
    m = np.asarray(attention, dtype=np.float32)
    if m.ndim == 3:
        m = m[0]
    weight = (opacity * m)[..., None]
    heat = np.asarray(color, dtype=np.float32)
    return np.clip(image * (1.0 - weight) + heat * weight, 0.0, 1.0)


def write_overlay(path, image: np.ndarray, attention: np.ndarray, opacity: float = 0.6) -> None:
    blended = overlay_attention(image, attention, opacity=opacity)
    Image.fromarray(np.round(blended * 255.0).astype(np.uint8), mode="RGB").save(path)
