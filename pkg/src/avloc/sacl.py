"""Semantic-aware contrastive learning: median binarization, contrastive
masks, visual compaction, audio-similarity false-negative filtering, and the
temperature-scaled contrastive objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import minmax_normalize_values
from .model import ModelParams, make_leaves
from .rng import make_rng
from .segmentation import SegmentMap, canonicalize, fh_segment, grid_mask, mask_to_grid
from .world import (apply_photometric, apply_spatial, encode_audio, encode_visual,
                    sample_photometric_params, sample_spatial_params)

TAU = 0.005
# keeps inactive cells strictly below any reachable cosine during the max
_MASK_PENALTY = 4.0


@dataclass(frozen=True)
class ContrastiveMask:
    mask: np.ndarray        # (h, w) bool, subset of both operands
    sub_index: int          # chosen sub-mask
    active_count: int


@dataclass(frozen=True)
class NegativeSet:
    anchor: int
    selected: tuple         # exactly k indices, bottom-k by similarity
    row: np.ndarray         # the similarity row the selection used


def binarize_sim(values):
    """Strictly-above-median cells of a normalized map (constant maps go dark)."""
    arr = np.asarray(values, dtype=np.float64)
    return arr > np.median(arr)


def contrastive_mask(binary, segmap: SegmentMap) -> ContrastiveMask:
    """Intersect the binary map with the best-overlapping sub-mask."""
    binary = np.asarray(binary, dtype=bool)
    if binary.shape != segmap.shape:
        raise ValueError(f"contrastive_mask: {binary.shape} vs segments {segmap.shape}")
    counts = np.array([np.count_nonzero(binary & segmap.sub_mask(j))
                       for j in range(segmap.count)])
    j_star = int(np.argmax(counts))
    mask = binary & segmap.sub_mask(j_star)
    return ContrastiveMask(mask, j_star, int(np.count_nonzero(mask)))


def compact_features(mask, visual):
    """Zero out visual columns outside the mask: (c, h, w) stays (c, h, w)."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != visual.shape[1:]:
        raise ValueError(f"compact_features: mask {m.shape} vs visual {visual.shape}")
    return ad.mul(visual, ad.constant(m[None, :, :]))


def audio_sim_matrix(batch):
    """Pairwise cosine matrix: symmetric by construction, exact unit diagonal."""
    feats = np.asarray(batch, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("audio_sim_matrix needs at least two feature rows")
    norms = np.sqrt((feats * feats).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise ValueError("audio_sim_matrix: zero-norm feature row")
    unit = feats / norms
    n = feats.shape[0]
    out = np.eye(n)
    for i in range(n):
        row = unit[i + 1:] @ unit[i]
        out[i, i + 1:] = row
        out[i + 1:, i] = row
    return out


def fnd_select(sim_matrix, anchor, k) -> NegativeSet:
    """Keep the k least-similar batch members as negatives; drop the rest.

    The discarded most-similar remainder is the false-negative candidate set.
    Ties break by ascending index.
    """
    sims = np.asarray(sim_matrix, dtype=np.float64)
    n = sims.shape[0]
    if not 1 <= k <= n - 1:
        raise ValueError(f"fnd_select: k={k} outside [1, {n - 1}]")
    candidates = [j for j in range(n) if j != anchor]
    candidates.sort(key=lambda j: (sims[anchor, j], j))
    return NegativeSet(anchor, tuple(candidates[:k]), sims[anchor].copy())


def _active_cells(mask, binary, shape):
    """Contrastive-mask actives, falling back to the binary map, then all cells."""
    if mask is not None and mask.any():
        return mask
    if binary is not None and binary.any():
        return binary
    return np.ones(shape, dtype=bool)


def _masked_cell_sims(visual, active, audio_rows):
    """(m, h, w) cosines of each audio row against each visual column, with
    inactive cells pushed below the cosine range."""
    c = visual.shape[0]
    ua = ad.l2_normalize(audio_rows, axis=1)
    uv = ad.l2_normalize(visual, axis=0)
    prod = ad.mul(ad.reshape(ua, (audio_rows.shape[0], c, 1, 1)), uv)
    sims = ad.sum_(prod, axis=1)
    if not active.all():
        penalty = (active.astype(np.float64) - 1.0) * _MASK_PENALTY
        sims = ad.add(sims, ad.constant(penalty[None, :, :]))
    return sims


def max_xmodal_sim(visual, mask, binary, audio_vec):
    """Best cosine between the audio vector and the active visual columns.

    The gradient reaches only the winning cell. An empty contrastive mask
    falls back to the binary map's actives, then to all cells.
    """
    if float(np.sqrt((audio_vec.data ** 2).sum())) == 0.0:
        raise ValueError("max_xmodal_sim: zero-norm audio feature")
    active = _active_cells(mask, binary, visual.shape[1:])
    rows = ad.reshape(audio_vec, (1,) + audio_vec.shape)
    sims = _masked_cell_sims(visual, active, rows)
    flat = ad.reshape(sims, (sims.shape[1] * sims.shape[2],))
    return ad.max_(flat, axis=0)


def sacl_term(pos, negs, tau):
    """One anchor's contrastive term, computed in shifted log-sum-exp form."""
    inv = 1.0 / tau
    logits = ad.concat([ad.reshape(ad.scalar_mul(pos, inv), (1,)),
                        ad.scalar_mul(negs, inv)], axis=0)
    return ad.sub(ad.logsumexp(logits), ad.scalar_mul(pos, inv))


def _term_from_best(best, tau):
    """Like sacl_term but over a (k+1,) vector whose first entry is the positive."""
    inv = 1.0 / tau
    return ad.sub(ad.logsumexp(ad.scalar_mul(best, inv)),
                  ad.scalar_mul(ad.take_row(best, 0), inv))


def sacl_loss(terms, batch_size):
    """Batch objective: per-sample view terms summed, averaged over samples."""
    stacked = ad.concat([ad.reshape(t, (1,)) for t in terms], axis=0)
    return ad.scalar_mul(ad.sum_(stacked), 1.0 / batch_size)


# ---------------------------------------------------------------------------
# training step

def raw_segment(record, cfg, cache=None):
    """Pseudo-segmentation of the raw image (cacheable; augmentation comes later)."""
    if cfg.mask == "none":
        return None
    if cache is not None and record.scene_id in cache:
        return cache[record.scene_id]
    if cfg.mask == "fh":
        seg = fh_segment(record.image, scale=cfg.fh_scale, sigma=cfg.fh_sigma,
                         min_size=cfg.fh_min_size)
    else:
        seg = grid_mask(cfg.image_size, cfg.image_size, cfg.grid_mask_cells())
    if cache is not None:
        cache[record.scene_id] = seg
    return seg


def train_step_sacl(records, params: ModelParams, opt_state, step, seg_cache=None):
    """One optimizer step; returns (loss, mean_pos_sim, mean_neg_sim, fn_detected)."""
    n = len(records)
    if n < 2:
        raise ValueError("train_step_sacl needs a batch of at least two scenes")
    cfg = params.cfg
    size = cfg.image_size
    grid = cfg.grid_size
    leaves = make_leaves(params, train=True)
    world_cfg = cfg.world_config()

    views = []       # augmented image batches
    view_segs = []   # grid-resolution SegmentMaps (or None) per scene
    for view in (0, 1):
        images = np.empty((n, size, size, 3))
        segs = []
        for i, rec in enumerate(records):
            rng = make_rng("sacl-aug", cfg.seed, step, rec.scene_id, view)
            spatial = sample_spatial_params(rng, size)
            img = apply_spatial(rec.image, spatial, size)
            images[i] = apply_photometric(img, sample_photometric_params(rng))
            seg = raw_segment(rec, cfg, seg_cache)
            if seg is None:
                segs.append(None)
            else:
                moved = canonicalize(apply_spatial(seg.labels, spatial, size))
                segs.append(mask_to_grid(moved, grid, grid))
        views.append(images)
        view_segs.append(segs)

    audio = np.stack([rec.audio for rec in records])
    _, audio_t = encode_audio(audio, leaves)
    if np.any(np.sqrt((audio_t.data ** 2).sum(axis=1)) == 0.0):
        raise ValueError("train_step_sacl: zero-norm transformed audio feature")
    audio_rows = [ad.reshape(ad.take_row(audio_t, j), (1, cfg.visual_channels))
                  for j in range(n)]

    fnd_basis = audio_t.data if cfg.fnd_features == "transformed" else audio
    sim_aa = audio_sim_matrix(fnd_basis)
    k = min(cfg.negatives_per_anchor(), n - 1) if cfg.fnd else n - 1
    neg_sets = [fnd_select(sim_aa, i, k) for i in range(n)]

    terms = []
    pos_vals, neg_vals = [], []
    for view in (0, 1):
        visual = encode_visual(views[view], leaves, world_cfg)
        for i in range(n):
            vis_i = ad.take_row(visual, i)
            seg = view_segs[view][i]
            if seg is not None:
                raw_sim = minmax_normalize_values(_cosine_map(audio_t.data[i], vis_i.data))
                binary = binarize_sim(raw_sim)
                cmask = contrastive_mask(binary, seg)
                vis_i = compact_features(cmask.mask, vis_i)
                active = _active_cells(cmask.mask, binary, (grid, grid))
            else:
                active = np.ones((grid, grid), dtype=bool)
            rows = ad.concat([audio_rows[i]] + [audio_rows[j] for j in neg_sets[i].selected],
                             axis=0)
            sims = _masked_cell_sims(vis_i, active, rows)
            best = ad.max_(ad.reshape(sims, (k + 1, grid * grid)), axis=1)
            terms.append(_term_from_best(best, TAU))
            pos_vals.append(float(best.data[0]))
            neg_vals.extend(best.data[1:].tolist())

    loss = sacl_loss(terms, n)
    trainables = [leaves[name] for name in params.trainable]
    ad.backward(loss, params=trainables)
    grads = {name: leaves[name].grad for name in params.trainable}
    arrays = {name: params.arrays[name] for name in params.trainable}
    ad.adamw_step(arrays, grads, opt_state)

    labels = [rec.class_id for rec in records]
    fn_detected = 0
    for i, nset in enumerate(neg_sets):
        excluded = set(range(n)) - {i} - set(nset.selected)
        fn_detected += sum(1 for j in excluded if labels[j] == labels[i])
    return (float(loss.data), float(np.mean(pos_vals)), float(np.mean(neg_vals)),
            fn_detected)


def _cosine_map(audio_vec, visual_values):
    """Numpy cosine map used only to binarize (selection, not differentiation)."""
    ua = audio_vec / np.sqrt((audio_vec ** 2).sum())
    norms = np.sqrt((visual_values ** 2).sum(axis=0, keepdims=True))
    uv = np.where(norms > 0.0, visual_values / np.where(norms > 0.0, norms, 1.0), 0.0)
    return (ua[:, None, None] * uv).sum(axis=0)
