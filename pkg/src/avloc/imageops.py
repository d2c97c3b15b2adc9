"""Plain-array image helpers shared by the world generator and segmentation."""

from __future__ import annotations

import math

import numpy as np


def gaussian_kernel(sigma):
    """1-d kernel truncated at 4*sigma and renormalized."""
    radius = max(1, int(math.ceil(4.0 * sigma)))
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return k / k.sum()


def gaussian_blur(channel, sigma):
    """Separable blur with reflective boundary; sigma <= 0 is the identity."""
    if sigma <= 0.0:
        return np.array(channel, dtype=np.float64)
    k = gaussian_kernel(sigma)
    r = (len(k) - 1) // 2
    padded = np.pad(np.asarray(channel, dtype=np.float64), ((r, r), (0, 0)), mode="reflect")
    rows = sum(k[i] * padded[i:i + channel.shape[0], :] for i in range(len(k)))
    padded = np.pad(rows, ((0, 0), (r, r)), mode="reflect")
    return sum(k[i] * padded[:, i:i + channel.shape[1]] for i in range(len(k)))


def nearest_index_map(out_size, src_size):
    """Source index per output index for nearest-neighbor resizing."""
    return np.minimum((np.arange(out_size) * src_size) // out_size, src_size - 1).astype(np.intp)


def resize_nearest(plane, out_h, out_w):
    rows = nearest_index_map(out_h, plane.shape[0])
    cols = nearest_index_map(out_w, plane.shape[1])
    return plane[np.ix_(rows, cols)]


def resize_bilinear(plane, out_h, out_w):
    """Half-pixel-centered bilinear resize of a 2-d plane."""
    src = np.asarray(plane, dtype=np.float64)
    h, w = src.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - wx) + src[np.ix_(y0, x1)] * wx
    bot = src[np.ix_(y1, x0)] * (1 - wx) + src[np.ix_(y1, x1)] * wx
    return top * (1 - wy) + bot * wy
