"""Synthetic audio-visual world: scenes, augmentations, and the toy encoders.

Each class owns an audio prototype on the unit sphere and a colored visual
texture. A scene paints one class blob on a non-class background and carries
the (optionally noised) class prototype as its audio embedding, so semantic
similarity between samples is known by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .imageops import gaussian_blur, nearest_index_map
from .rng import make_rng
from .tensorio import read_avt1, read_pgm, read_ppm, write_avt1, write_pgm, write_ppm

_PROTO_COS_LIMIT = 0.5
_PROTO_MAX_DRAWS = 10000
_TEXTURE_NOISE = 0.08
# class patterns carry more noise than the background: the pattern component
# resamples under crop/resize, so view-stable content is the base color only
_CLASS_PATTERN_NOISE = 0.15
# ellipse axes are inflated by 2/sqrt(pi) so blob area matches the sampled
# side fractions; beyond this fraction the inflated ellipse no longer fits
_ELLIPSE_LIMIT = 0.886


@dataclass(frozen=True)
class WorldConfig:
    num_classes: int = 8
    image_size: int = 64
    grid_size: int = 8
    visual_channels: int = 32
    audio_dim: int = 128
    blob_min: float = 0.25
    blob_max: float = 0.5
    audio_noise: float = 0.05
    pixel_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("world needs at least two classes")
        if self.image_size % self.grid_size:
            raise ValueError("image size must be divisible by the feature grid")
        if not 0.0 < self.blob_min <= self.blob_max <= 1.0:
            raise ValueError("blob size range must satisfy 0 < min <= max <= 1")
        if self.audio_noise < 0 or self.pixel_noise < 0:
            raise ValueError("noise levels must be non-negative")


@dataclass(frozen=True)
class Scene:
    scene_id: int
    class_id: int
    image: np.ndarray   # (H, W, 3) in [0, 1]
    gt_mask: np.ndarray  # (H, W) bool
    audio: np.ndarray   # (c_a,)


@dataclass(frozen=True)
class World:
    cfg: WorldConfig
    prototypes: np.ndarray   # (K, c_a), unit rows, pairwise cosine < 0.5
    base_colors: np.ndarray  # (K, 3)
    patterns: np.ndarray     # (K, H, W, 3) fixed per-class texture noise


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def make_world(cfg: WorldConfig) -> World:
    """Draw class prototypes and textures deterministically from the seed."""
    rng = make_rng("world-prototypes", cfg.seed)
    protos = []
    draws = 0
    while len(protos) < cfg.num_classes:
        if draws >= _PROTO_MAX_DRAWS:
            raise ValueError(
                f"could not place {cfg.num_classes} prototypes with pairwise "
                f"cosine < {_PROTO_COS_LIMIT} in {cfg.audio_dim} dims")
        draws += 1
        v = rng.standard_normal(cfg.audio_dim)
        v /= np.sqrt((v * v).sum())
        if all(abs(float(v @ p)) < _PROTO_COS_LIMIT for p in protos):
            protos.append(v)
    colors = np.array([
        _hsv_to_rgb(k / cfg.num_classes, 0.85, 0.55 + 0.4 * (k % 2))
        for k in range(cfg.num_classes)])
    size = cfg.image_size
    patterns = np.stack([
        make_rng("world-texture", cfg.seed, k).uniform(-_CLASS_PATTERN_NOISE,
                                                       _CLASS_PATTERN_NOISE,
                                                       (size, size, 3))
        for k in range(cfg.num_classes)])
    return World(cfg, np.stack(protos), colors, patterns)


_MOSAIC_CELL = 8


def _background(rng, size):
    """Muted random mosaic: background features scramble under crop/resize,
    so only class textures stay view-stable."""
    cells = -(-size // _MOSAIC_CELL)
    tiles = np.empty((cells, cells, 3))
    for r in range(cells):
        for c in range(cells):
            # near-gray tiles: the tint stays tiny so background feature
            # directions are carried by high-dimensional sampling noise
            # (near-zero cosine against any class direction), while the tile
            # borders still scramble under crop/resize
            tiles[r, c] = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0.0, 0.08),
                                      rng.uniform(0.45, 0.55))
    plane = np.repeat(np.repeat(tiles, _MOSAIC_CELL, axis=0), _MOSAIC_CELL, axis=1)
    noise = rng.uniform(-_TEXTURE_NOISE, _TEXTURE_NOISE, (size, size, 3))
    return np.clip(plane[:size, :size] + noise, 0.0, 1.0)


def sample_scene(world: World, scene_seed: int) -> Scene:
    cfg = world.cfg
    size = cfg.image_size
    rng = make_rng("scene", cfg.seed, scene_seed)
    class_id = int(rng.integers(cfg.num_classes))
    image = _background(rng, size)

    frac_h = rng.uniform(cfg.blob_min, cfg.blob_max)
    frac_w = rng.uniform(cfg.blob_min, cfg.blob_max)
    use_ellipse = (rng.random() < 0.5 and frac_h <= _ELLIPSE_LIMIT
                   and frac_w <= _ELLIPSE_LIMIT)
    mask = np.zeros((size, size), dtype=bool)
    if use_ellipse:
        ax_r = frac_h * size / np.sqrt(np.pi)
        ax_c = frac_w * size / np.sqrt(np.pi)
        cy = rng.uniform(ax_r, size - ax_r)
        cx = rng.uniform(ax_c, size - ax_c)
        yy, xx = np.mgrid[0:size, 0:size]
        mask = (((yy + 0.5 - cy) / ax_r) ** 2 + ((xx + 0.5 - cx) / ax_c) ** 2) <= 1.0
    else:
        bh = max(1, int(round(frac_h * size)))
        bw = max(1, int(round(frac_w * size)))
        top = int(rng.integers(0, size - bh + 1))
        left = int(rng.integers(0, size - bw + 1))
        mask[top:top + bh, left:left + bw] = True
    if not mask.any():
        mask[size // 2, size // 2] = True

    texture = np.clip(world.base_colors[class_id][None, None, :]
                      + world.patterns[class_id], 0.0, 1.0)
    image = np.where(mask[:, :, None], texture, image)
    if cfg.pixel_noise > 0:
        image = image + cfg.pixel_noise * rng.standard_normal((size, size, 3))
    image = np.clip(image, 0.0, 1.0)

    audio = world.prototypes[class_id].copy()
    if cfg.audio_noise > 0:
        audio = audio + cfg.audio_noise * rng.standard_normal(cfg.audio_dim)
    return Scene(scene_seed, class_id, image, mask, audio)


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class SpatialParams:
    top: int
    left: int
    side: int
    flip: bool


@dataclass(frozen=True)
class PhotometricParams:
    brightness: float
    contrast: float
    grayscale: bool
    blur_sigma: float | None


def sample_spatial_params(rng, size) -> SpatialParams:
    frac = rng.uniform(0.8, 1.0)
    side = max(1, int(round(frac * size)))
    top = int(rng.integers(0, size - side + 1))
    left = int(rng.integers(0, size - side + 1))
    return SpatialParams(top, left, side, bool(rng.random() < 0.5))


def apply_spatial(plane, params: SpatialParams, out_size):
    """Crop, nearest-resize back, and flip one (H, W[, C]) plane."""
    crop = plane[params.top:params.top + params.side,
                 params.left:params.left + params.side]
    rows = nearest_index_map(out_size, params.side)
    cols = nearest_index_map(out_size, params.side)
    view = crop[np.ix_(rows, cols)]
    if params.flip:
        view = view[:, ::-1]
    return np.ascontiguousarray(view)


def spatial_source_index(params: SpatialParams, out_size, row, col):
    """Source pixel sampled for output (row, col); the inverse view transform."""
    c = out_size - 1 - col if params.flip else col
    rows = nearest_index_map(out_size, params.side)
    cols = nearest_index_map(out_size, params.side)
    return params.top + int(rows[row]), params.left + int(cols[c])


def augment_spatial(image, mask, seed):
    """One random crop/flip view with the identical transform applied to the mask."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng("spatial", seed)
    params = sample_spatial_params(rng, image.shape[0])
    return apply_spatial(image, params, image.shape[0]), apply_spatial(mask, params, image.shape[0])


def sample_photometric_params(rng) -> PhotometricParams:
    brightness = rng.uniform(-0.4, 0.4)
    contrast = rng.uniform(-0.4, 0.4)
    grayscale = bool(rng.random() < 0.2)
    blur = bool(rng.random() < 0.5)
    sigma = float(rng.uniform(0.1, 1.0)) if blur else None
    return PhotometricParams(brightness, contrast, grayscale, sigma)


_LUMA = np.array([0.299, 0.587, 0.114])


def apply_photometric(image, params: PhotometricParams):
    out = np.asarray(image, dtype=np.float64)
    if params.brightness != 0.0:
        out = out * (1.0 + params.brightness)
    if params.contrast != 0.0:
        mean = out.mean()
        out = (out - mean) * (1.0 + params.contrast) + mean
    if params.grayscale:
        luma = out @ _LUMA
        out = np.repeat(luma[:, :, None], 3, axis=2)
    if params.blur_sigma is not None:
        out = np.stack([gaussian_blur(out[:, :, c], params.blur_sigma)
                        for c in range(3)], axis=-1)
    return np.clip(out, 0.0, 1.0)


def augment_photometric(image, seed):
    """Brightness/contrast jitter plus coin-flipped grayscale and blur."""
    rng = seed if isinstance(seed, np.random.Generator) else make_rng("photometric", seed)
    return apply_photometric(image, sample_photometric_params(rng))


# ---------------------------------------------------------------------------
# toy encoders (frozen random patch projection + small learnable heads)

PARAM_KEYS_VISUAL = ("enc.w", "enc.b")
PARAM_KEYS_AUDIO = ("g.w1", "g.b1", "g.w2", "g.b2")


def frozen_patch_map(cfg: WorldConfig) -> np.ndarray:
    """Fixed random linear map from flattened patches to visual channels."""
    patch = (cfg.image_size // cfg.grid_size) ** 2 * 3
    rng = make_rng("frozen-encoder", cfg.seed)
    return rng.standard_normal((patch, cfg.visual_channels)) / np.sqrt(patch)


def patch_features(images, frozen, grid_size):
    """Numpy front half of the visual encoder: (N, H, W, 3) -> (N, g*g, c_v)."""
    imgs = np.asarray(images, dtype=np.float64)
    n, h, w, _ = imgs.shape
    ph, pw = h // grid_size, w // grid_size
    patches = (imgs.reshape(n, grid_size, ph, grid_size, pw, 3)
               .transpose(0, 1, 3, 2, 4, 5)
               .reshape(n, grid_size * grid_size, ph * pw * 3))
    return (patches - 0.5) @ frozen


def encode_visual(images, params, cfg: WorldConfig):
    """Visual features as a graph node: frozen patch map, learnable 1x1 head, GELU.

    Accepts one (H, W, 3) image or a (N, H, W, 3) batch; returns (c_v, h, w)
    or (N, c_v, h, w) accordingly.
    """
    single = np.asarray(images).ndim == 3
    batch = np.asarray(images)[None] if single else np.asarray(images)
    g = cfg.grid_size
    frozen = params["enc.frozen"]
    if isinstance(frozen, ad.Tensor):
        frozen = frozen.data
    base = ad.constant(patch_features(batch, frozen, g))
    pre = ad.add(ad.matmul(base, params["enc.w"]), params["enc.b"])
    feats = ad.gelu(ad.permute(ad.reshape(pre, (batch.shape[0], g, g, cfg.visual_channels)),
                               (0, 3, 1, 2)))
    if single:
        return ad.reshape(feats, (cfg.visual_channels, g, g))
    return feats


def encode_audio(audio, params):
    """Pass-through embedding plus the learnable two-layer transform.

    Accepts one (c_a,) vector or a (N, c_a) batch; returns (raw_embedding,
    transformed_node) with the node shaped (c_v,) or (N, c_v).
    """
    raw = np.asarray(audio, dtype=np.float64)
    single = raw.ndim == 1
    batch = raw[None] if single else raw
    hidden = ad.relu(ad.add(ad.matmul(ad.constant(batch), params["g.w1"]), params["g.b1"]))
    out = ad.add(ad.matmul(hidden, params["g.w2"]), params["g.b2"])
    if single:
        return raw, ad.reshape(out, (out.shape[1],))
    return raw, out


# ---------------------------------------------------------------------------
# dataset files

@dataclass(frozen=True)
class Dataset:
    root: str
    records: tuple  # of Scene (image/audio loaded from files)

    def by_class(self):
        buckets = {}
        for i, rec in enumerate(self.records):
            buckets.setdefault(rec.class_id, []).append(i)
        return buckets


def generate_dataset(cfg: WorldConfig, num_scenes, out_dir):
    """Write manifest + scene files; byte-identical for identical (cfg, seed)."""
    world = make_world(cfg)
    scene_dir = os.path.join(out_dir, "scenes")
    os.makedirs(scene_dir, exist_ok=True)
    rows = []
    for sid in range(num_scenes):
        scene = sample_scene(world, sid)
        img_rel = f"scenes/{sid:05d}.ppm"
        mask_rel = f"scenes/{sid:05d}_mask.pgm"
        audio_rel = f"scenes/{sid:05d}_audio.avt1"
        write_ppm(os.path.join(out_dir, img_rel), scene.image)
        write_pgm(os.path.join(out_dir, mask_rel), scene.gt_mask.astype(np.uint8) * 255)
        write_avt1(os.path.join(out_dir, audio_rel), scene.audio)
        rows.append(f"{sid}\t{scene.class_id}\t{img_rel}\t{mask_rel}\t{audio_rel}\n")
    with open(os.path.join(out_dir, "manifest.tsv"), "w", newline="") as fh:
        fh.writelines(rows)
    return len(rows)


def load_dataset(root) -> Dataset:
    manifest = os.path.join(root, "manifest.tsv")
    records = []
    with open(manifest, "r") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            sid, class_id, img_rel, mask_rel, audio_rel = line.split("\t")
            image = read_ppm(os.path.join(root, img_rel))
            mask = read_pgm(os.path.join(root, mask_rel)) > 127
            audio = read_avt1(os.path.join(root, audio_rel))
            records.append(Scene(int(sid), int(class_id), image, mask, audio))
    if not records:
        raise ValueError(f"empty dataset at {root}")
    return Dataset(root, tuple(records))


def sample_batch(dataset: Dataset, batch_size, rng):
    """Class-balanced batch indices when evenly divisible, uniform otherwise."""
    buckets = dataset.by_class()
    classes = sorted(buckets)
    per = batch_size // len(classes)
    if per * len(classes) == batch_size and all(len(buckets[c]) >= per for c in classes):
        picks = np.concatenate([
            rng.choice(buckets[c], size=per, replace=False) for c in classes])
        return [int(i) for i in rng.permutation(picks)]
    pool = len(dataset.records)
    return [int(i) for i in rng.choice(pool, size=batch_size, replace=batch_size > pool)]
