"""Learnable state: parameter arrays, seeded init, checkpoints, eval forward.

A checkpoint is a directory of AVT1 tensors plus a plain-text index and the
resolved run configuration; loading one rebuilds an identical model (modulo
the 32-bit round-trip at the file boundary).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import pcm as pcm_mod
from .attention import batched_similarity, minmax_normalize_values
from .config import RunConfig, load_config, write_resolved
from .rng import make_rng
from .tensorio import read_avt1, write_avt1
from .world import encode_audio, encode_visual, frozen_patch_map


@dataclass
class ModelParams:
    cfg: RunConfig
    arrays: dict            # name -> np.ndarray, insertion-ordered
    trainable: tuple        # names optimized by AdamW


def _glorot(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    return rng.standard_normal(shape) * np.sqrt(2.0 / (fan_in + fan_out))


def init_model(cfg: RunConfig) -> ModelParams:
    world_cfg = cfg.world_config()
    c_v, c_a = cfg.visual_channels, cfg.audio_dim
    arrays = {"enc.frozen": frozen_patch_map(world_cfg)}

    def draw(name, shape, kind="glorot"):
        rng = make_rng("init", cfg.seed, name)
        arrays[name] = np.zeros(shape) if kind == "zeros" else _glorot(rng, shape)

    draw("enc.w", (c_v, c_v))
    draw("enc.b", (c_v,), "zeros")
    draw("g.w1", (c_a, 64))
    draw("g.b1", (64,), "zeros")
    draw("g.w2", (64, c_v))
    draw("g.b2", (c_v,), "zeros")
    if cfg.scheme == "sspl":
        draw("proj.w1", (c_v, 64))
        draw("proj.b1", (64,), "zeros")
        draw("proj.w2", (64, 64))
        draw("proj.b2", (64,), "zeros")
        draw("proj.w3", (64, 32))
        draw("proj.b3", (32,), "zeros")
        draw("pred.w1", (32, 16))
        draw("pred.b1", (16,), "zeros")
        draw("pred.w2", (16, 32))
        draw("pred.b2", (32,), "zeros")
        if cfg.pcm:
            arrays.update(pcm_mod.make_weights(cfg.pcm_config(), make_rng("init", cfg.seed, "pcm")))
    trainable = tuple(name for name in arrays if name != "enc.frozen")
    return ModelParams(cfg, arrays, trainable)


def make_leaves(params: ModelParams, train=True):
    """Graph leaves per parameter: trainable ones differentiate when training."""
    leaves = {}
    for name, arr in params.arrays.items():
        if train and name in params.trainable:
            leaves[name] = ad.param(arr, validate=False)
        else:
            leaves[name] = ad.constant(arr)
    return leaves


def save_checkpoint(out_dir, params: ModelParams):
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for i, (name, arr) in enumerate(params.arrays.items()):
        rel = f"t{i:04d}.avt1"
        write_avt1(os.path.join(out_dir, rel), arr)
        flag = 1 if name in params.trainable else 0
        lines.append(f"{name}\t{rel}\t{flag}\n")
    with open(os.path.join(out_dir, "index.txt"), "w", newline="") as fh:
        fh.writelines(lines)
    write_resolved(params.cfg, os.path.join(out_dir, "config.resolved"))


def load_checkpoint(ckpt_dir) -> ModelParams:
    cfg = load_config(os.path.join(ckpt_dir, "config.resolved"))
    arrays = {}
    trainable = []
    with open(os.path.join(ckpt_dir, "index.txt"), "r") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            name, rel, flag = line.split("\t")
            arrays[name] = read_avt1(os.path.join(ckpt_dir, rel))
            if flag == "1":
                trainable.append(name)
    return ModelParams(cfg, arrays, tuple(trainable))


def forward_maps(params: ModelParams, images, audios, collect_energy=False):
    """Localization maps for a batch of raw scenes (no augmentation, no grads).

    Returns (maps, energies): maps is (N, h, w) min-max normalized numpy;
    energies is a (cycles+1, N) array when the model has the alignment module
    and energy collection is requested, else None.
    """
    cfg = params.cfg
    leaves = make_leaves(params, train=False)
    visual = encode_visual(np.asarray(images), leaves, cfg.world_config())
    energies = None
    if cfg.scheme == "sspl" and cfg.pcm:
        visual, _, energies = pcm_mod.pcm_forward(
            visual, np.asarray(audios), leaves, cfg.pcm_config(),
            collect_energy=collect_energy)
    _, audio_t = encode_audio(np.asarray(audios), leaves)
    sims = batched_similarity(audio_t, visual)
    maps = np.stack([minmax_normalize_values(sims.data[i])
                     for i in range(sims.shape[0])])
    return maps, energies
