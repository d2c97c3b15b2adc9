"""Pseudo-mask generation: graph-based segmentation and spatial grids.

The graph-based segmenter follows the classic greedy merge over an
8-connected pixel graph with joint-RGB edge weights. Everything here is
deterministic: equal-weight edges are ordered by (row, col, direction) of
the edge's first endpoint, and output labels are assigned in first-pixel
row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageops import gaussian_blur
from .tensorio import write_pgm


@dataclass(frozen=True)
class SegmentMap:
    """Per-pixel segment labels forming a partition into `count` segments."""

    labels: np.ndarray
    count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"SegmentMap labels must be 2-d, got {labels.shape}")
        if self.count < 1:
            raise ValueError("SegmentMap needs at least one segment")
        used = np.unique(labels)
        if used[0] < 0 or used[-1] >= self.count:
            raise ValueError("SegmentMap labels out of range")
        if len(used) != self.count:
            raise ValueError("SegmentMap has unused labels")

    @property
    def shape(self):
        return self.labels.shape

    def sub_mask(self, j):
        return self.labels == j


def _canonical_labels(raw):
    """Relabel arbitrary ids to 0..count-1 in first-pixel row-major order."""
    arr = np.asarray(raw)
    uniq, first_idx, inverse = np.unique(arr.reshape(-1), return_index=True,
                                         return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first_idx, kind="stable")] = np.arange(len(uniq))
    return rank[inverse].reshape(arr.shape), len(uniq)


def canonicalize(labels):
    """SegmentMap from any integer label plane (labels renumbered row-major)."""
    out, count = _canonical_labels(labels)
    return SegmentMap(out, count)


def _build_edges(height, width):
    """8-connectivity via E, S, SE, SW offsets from each pixel, in that order."""
    idx = np.arange(height * width).reshape(height, width)
    offsets = [(0, 1), (1, 0), (1, 1), (1, -1)]
    srcs, dsts, dirs = [], [], []
    for d, (dr, dc) in enumerate(offsets):
        r0, r1 = max(0, -dr), height - max(0, dr)
        c0, c1 = max(0, -dc), width - max(0, dc)
        src = idx[r0:r1, c0:c1]
        dst = idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc]
        srcs.append(src.reshape(-1))
        dsts.append(dst.reshape(-1))
        dirs.append(np.full(src.size, d, dtype=np.int64))
    return np.concatenate(srcs), np.concatenate(dsts), np.concatenate(dirs)


def fh_segment(image, scale=1000.0, sigma=0.5, min_size=63):
    """Greedy graph-based segmentation of an (H, W, 3) image in [0, 1].

    Components merge along ascending-weight edges while the crossing weight
    stays below both sides' internal tolerance (max internal edge plus
    scale/size); a final ascending pass absorbs every component smaller than
    `min_size` into its lowest-weight-edge neighbor.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"fh_segment: need (H, W, 3), got {img.shape}")
    height, width = img.shape[:2]
    total = height * width
    if scale <= 0:
        raise ValueError("fh_segment: scale must be positive")
    if sigma < 0:
        raise ValueError("fh_segment: sigma must be non-negative")
    if not 1 <= min_size <= total:
        raise ValueError(f"fh_segment: min_size {min_size} outside [1, {total}]")

    smooth = np.stack([gaussian_blur(img[:, :, ch], sigma) for ch in range(3)], axis=-1)
    src, dst, direction = _build_edges(height, width)
    diff = smooth.reshape(-1, 3)[src] - smooth.reshape(-1, 3)[dst]
    weight = np.sqrt((diff * diff).sum(axis=1))
    order = np.lexsort((direction, src % width, src // width, weight))
    src_l = src[order].tolist()
    dst_l = dst[order].tolist()
    w_l = weight[order].tolist()

    parent = list(range(total))
    size = [1] * total
    internal = [0.0] * total

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def union(a, b):
        if size[a] < size[b] or (size[a] == size[b] and b < a):
            a, b = b, a
        parent[b] = a
        size[a] += size[b]
        return a

    for a, b, w in zip(src_l, dst_l, w_l):
        ra, rb = find(a), find(b)
        if ra == rb:
            continue
        if w <= internal[ra] + scale / size[ra] and w <= internal[rb] + scale / size[rb]:
            internal[union(ra, rb)] = w

    # Ascending edge order means the first crossing edge seen by a small
    # component is its lowest-weight link; one pass leaves no component < min_size.
    for a, b in zip(src_l, dst_l):
        ra, rb = find(a), find(b)
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            union(ra, rb)

    roots = np.fromiter((find(i) for i in range(total)), dtype=np.int64, count=total)
    labels, count = _canonical_labels(roots.reshape(height, width))
    return SegmentMap(labels, count)


def grid_mask(height, width, d):
    """d x d axis-aligned cells labeled in row-major cell order."""
    if d < 1:
        raise ValueError("grid_mask: d must be >= 1")
    if d > height or d > width:
        raise ValueError(f"grid_mask: {d}x{d} grid does not fit {height}x{width}")
    row_ids = np.repeat(np.arange(d), [len(s) for s in np.array_split(np.arange(height), d)])
    col_ids = np.repeat(np.arange(d), [len(s) for s in np.array_split(np.arange(width), d)])
    labels = row_ids[:, None] * d + col_ids[None, :]
    return SegmentMap(labels.astype(np.int64), d * d)


def mask_to_grid(segmap, out_h, out_w):
    """Downsample a SegmentMap to the feature grid by per-cell majority vote.

    Ties pick the smallest label. Labels are then renumbered canonically.
    """
    labels = segmap.labels
    height, width = labels.shape
    if height < out_h or width < out_w:
        raise ValueError(f"mask_to_grid: target {out_h}x{out_w} exceeds source {labels.shape}")
    if height % out_h == 0 and width % out_w == 0:
        counts = np.zeros((out_h, out_w, segmap.count), dtype=np.int64)
        cell_r = np.arange(height) // (height // out_h)
        cell_c = np.arange(width) // (width // out_w)
        np.add.at(counts, (cell_r[:, None], cell_c[None, :], labels), 1)
        return canonicalize(np.argmax(counts, axis=2))
    row_blocks = np.array_split(np.arange(height), out_h)
    col_blocks = np.array_split(np.arange(width), out_w)
    out = np.empty((out_h, out_w), dtype=np.int64)
    for i, rows in enumerate(row_blocks):
        for j, cols in enumerate(col_blocks):
            patch = labels[np.ix_(rows, cols)].reshape(-1)
            out[i, j] = np.argmax(np.bincount(patch, minlength=segmap.count))
    return canonicalize(out)


def write_segment_pgm(path, segmap):
    if segmap.count > 256:
        raise ValueError(f"segment PGM supports at most 256 labels, got {segmap.count}")
    write_pgm(path, segmap.labels)
