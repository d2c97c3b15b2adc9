"""Audio-visual similarity maps, range scalings, and attention pooling.

The per-location cosine map doubles as the localization output; scaled
variants weigh visual features into a pooled audio-visual vector. Single-map
functions carry a normalized/raw flag; `batched_*` builders are the
equivalent fused forms used in training loops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .tensorio import write_pgm, write_ppm

SCALE_METHODS = ("minmax", "relu", "sigmoid", "softmax", "relu_softmax")


@dataclass(frozen=True)
class SimilarityMap:
    values: ad.Tensor  # (h, w)
    normalized: bool


def similarity_map(audio_vec, visual):
    """Per-location cosine between a (c,) audio node and (c, h, w) visual node."""
    if audio_vec.shape[0] != visual.shape[0]:
        raise ValueError(f"similarity_map: channel mismatch {audio_vec.shape} vs {visual.shape}")
    if float(np.sqrt((audio_vec.data ** 2).sum())) == 0.0:
        raise ValueError("similarity_map: audio feature has zero norm")
    ua = ad.l2_normalize(audio_vec, axis=0)
    uv = ad.l2_normalize(visual, axis=0)
    prod = ad.mul(ad.reshape(ua, (visual.shape[0], 1, 1)), uv)
    return SimilarityMap(ad.sum_(prod, axis=0), normalized=False)


def _minmax_single(values):
    h, w = values.shape
    flat = ad.reshape(values, (h * w,))
    lo = float(flat.data.min())
    hi = float(flat.data.max())
    if hi == lo:
        # degenerate constant map: neutral uniform attention instead of 0/0
        return ad.constant(np.full((h, w), 0.5))
    mn = ad.min_(flat, axis=0, keepdims=True)
    mx = ad.max_(flat, axis=0, keepdims=True)
    scaled = ad.div(ad.sub(flat, mn), ad.sub(mx, mn))
    return ad.reshape(scaled, (h, w))


def scale_map(sim: SimilarityMap, method) -> SimilarityMap:
    """Scale a raw map into [0, 1] by the named method."""
    if sim.normalized:
        raise ValueError("scale_map expects a raw similarity map")
    if method not in SCALE_METHODS:
        raise ValueError(f"unknown scaling method: {method!r}")
    values = sim.values
    h, w = values.shape
    if method == "minmax":
        out = _minmax_single(values)
    elif method == "relu":
        out = ad.relu(values)
    elif method == "sigmoid":
        out = ad.sigmoid(values)
    elif method == "softmax":
        out = ad.reshape(ad.softmax(ad.reshape(values, (h * w,)), axis=0), (h, w))
    else:  # relu_softmax
        out = ad.reshape(ad.softmax(ad.relu(ad.reshape(values, (h * w,))), axis=0), (h, w))
    return SimilarityMap(out, normalized=True)


def pooled_av_rep(sim: SimilarityMap, visual):
    """Attention-weighted sum of visual features: (c, h, w) -> (c,)."""
    if not sim.normalized:
        raise ValueError("pooled_av_rep expects a normalized similarity map")
    if sim.values.shape != visual.shape[1:]:
        raise ValueError(f"pooled_av_rep: map {sim.values.shape} does not match visual {visual.shape}")
    weighted = ad.mul(ad.reshape(sim.values, (1,) + sim.values.shape), visual)
    return ad.sum_(weighted, axis=(1, 2))


# ---------------------------------------------------------------------------
# batched builders

def batched_similarity(audio, visual):
    """(N, c) x (N, c, h, w) -> (N, h, w) row-paired cosine maps."""
    norms = np.sqrt((audio.data ** 2).sum(axis=1))
    if np.any(norms == 0.0):
        raise ValueError("batched_similarity: zero-norm audio feature in batch")
    ua = ad.l2_normalize(audio, axis=1)
    uv = ad.l2_normalize(visual, axis=1)
    prod = ad.mul(ad.reshape(ua, audio.shape + (1, 1)), uv)
    return ad.sum_(prod, axis=1)


def batched_scale(sim, method):
    """Apply a scaling method to a (N, h, w) stack of raw maps."""
    if method not in SCALE_METHODS:
        raise ValueError(f"unknown scaling method: {method!r}")
    n, h, w = sim.shape
    flat = ad.reshape(sim, (n, h * w))
    if method == "relu":
        return ad.relu(sim)
    if method == "sigmoid":
        return ad.sigmoid(sim)
    if method == "softmax":
        return ad.reshape(ad.softmax(flat, axis=1), (n, h, w))
    if method == "relu_softmax":
        return ad.reshape(ad.softmax(ad.relu(flat), axis=1), (n, h, w))
    ranges = flat.data.max(axis=1) - flat.data.min(axis=1)
    if np.all(ranges > 0.0):
        mn = ad.min_(flat, axis=1, keepdims=True)
        mx = ad.max_(flat, axis=1, keepdims=True)
        return ad.reshape(ad.div(ad.sub(flat, mn), ad.sub(mx, mn)), (n, h, w))
    rows = [_minmax_single(ad.reshape(ad.take_row(sim, i), (h, w))) for i in range(n)]
    stacked = ad.concat([ad.reshape(r, (1, h, w)) for r in rows], axis=0)
    return stacked


def batched_pool(scaled, visual):
    """(N, h, w) attention over (N, c, h, w) features -> (N, c)."""
    n, h, w = scaled.shape
    weighted = ad.mul(ad.reshape(scaled, (n, 1, h, w)), visual)
    return ad.sum_(weighted, axis=(2, 3))


def minmax_normalize_values(values):
    """Numpy min-max of one map with the constant -> 0.5 convention."""
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.full(arr.shape, 0.5)
    return (arr - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# exports

def render_heatmap_pgm(path, values):
    """Normalized map -> 8-bit PGM (value*255, rounded half up)."""
    arr = np.asarray(values, dtype=np.float64)
    write_pgm(path, np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))


def render_overlay_ppm(path, image, values):
    """Red-ramp heat alpha-blended at 0.5 onto the image."""
    img = np.asarray(image, dtype=np.float64)
    heat = np.zeros_like(img)
    heat[:, :, 0] = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    write_ppm(path, 0.5 * img + 0.5 * heat)
