"""File-based drivers behind the CLI: train, evaluate, localize.

Every driver is a pure function of (config, dataset bytes, seed); reruns
reproduce outputs byte for byte.
"""

from __future__ import annotations

import os

import numpy as np

from . import autodiff as ad
from .attention import render_heatmap_pgm, render_overlay_ppm
from .config import RunConfig, write_resolved
from .evalkit import (auc, ciou, extract_box, iou, mask_box, sim_diff,
                      success_curve, DEFAULT_THRESHOLDS, AnnotationRecord)
from .imageops import resize_bilinear, resize_nearest
from .model import ModelParams, forward_maps, init_model, load_checkpoint, save_checkpoint
from .rng import make_rng
from .sacl import train_step_sacl
from .sspl import optimizer_groups, train_step_sspl
from .world import Dataset, load_dataset, sample_batch

_ORACLE_MARKER = "oracle.marker"


def run_training(cfg: RunConfig, dataset_dir, out_dir, check_sg=False):
    """Train the configured scheme; writes checkpoint/, train_log.csv, config.resolved."""
    if cfg.scheme == "sacl" and cfg.pcm:
        raise ValueError("the alignment module belongs to the sspl pipeline; "
                         "pcm with sacl is rejected")
    dataset = load_dataset(dataset_dir)
    if cfg.scheme == "sacl" and cfg.batch_size < 2:
        raise ValueError("sacl needs batches of at least two scenes")
    os.makedirs(out_dir, exist_ok=True)
    params = init_model(cfg)
    scales, exempt = optimizer_groups(params.trainable)
    opt = ad.OptimizerState({k: params.arrays[k] for k in params.trainable},
                            lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                            eps=cfg.eps, weight_decay=cfg.weight_decay,
                            lr_scales=scales, decay_exempt=exempt)
    seg_cache = {}
    rows = []
    if cfg.scheme == "sspl":
        rows.append("step,loss,collapse_metric\n")
    else:
        rows.append("step,loss,mean_pos_sim,mean_neg_sim,fn_detected\n")
    sg_all_ok = True
    for step in range(cfg.steps):
        batch_rng = make_rng("batch", cfg.seed, step)
        idx = sample_batch(dataset, cfg.batch_size, batch_rng)
        records = [dataset.records[i] for i in idx]
        if cfg.scheme == "sspl":
            loss, collapse, sg_ok = train_step_sspl(records, params, opt, step,
                                                    check_sg=check_sg)
            if sg_ok is False:
                sg_all_ok = False
            rows.append(f"{step},{loss!r},{collapse!r}\n")
        else:
            loss, pos, neg, fn = train_step_sacl(records, params, opt, step,
                                                 seg_cache=seg_cache)
            rows.append(f"{step},{loss!r},{pos!r},{neg!r},{fn}\n")
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    save_checkpoint(ckpt_dir, params)
    with open(os.path.join(out_dir, "train_log.csv"), "w", newline="") as fh:
        fh.writelines(rows)
    write_resolved(cfg, os.path.join(out_dir, "config.resolved"))
    return ckpt_dir, sg_all_ok


def make_oracle_checkpoint(out_dir, cfg: RunConfig):
    """Checkpoint stand-in whose localization map is the ground-truth mask."""
    params = init_model(cfg)
    save_checkpoint(out_dir, params)
    with open(os.path.join(out_dir, _ORACLE_MARKER), "w") as fh:
        fh.write("oracle\n")
    return out_dir


def _upsample(plane, size, mode):
    if mode == "bilinear":
        return resize_bilinear(plane, size, size)
    return resize_nearest(plane, size, size)


def predict_pixel_maps(params: ModelParams, dataset: Dataset, chunk=64,
                       collect_energy=False):
    """Per-scene normalized maps at pixel resolution, plus per-cycle energies."""
    cfg = params.cfg
    maps = []
    energies = []
    recs = dataset.records
    for start in range(0, len(recs), chunk):
        part = recs[start:start + chunk]
        images = np.stack([r.image for r in part])
        audios = np.stack([r.audio for r in part])
        grid_maps, part_energy = forward_maps(params, images, audios,
                                              collect_energy=collect_energy)
        for m in grid_maps:
            maps.append(_upsample(m, cfg.image_size, cfg.upsample))
        if part_energy is not None:
            energies.append(part_energy)
    stacked_energy = np.concatenate(energies, axis=1) if energies else None
    return maps, stacked_energy


def run_eval(ckpt_dir, dataset_dir, out_dir):
    """Per-scene metrics CSV, summary block, and the success-curve file."""
    params = load_checkpoint(ckpt_dir)
    cfg = params.cfg
    dataset = load_dataset(dataset_dir)
    os.makedirs(out_dir, exist_ok=True)
    oracle = os.path.exists(os.path.join(ckpt_dir, _ORACLE_MARKER))
    if oracle:
        maps = [rec.gt_mask.astype(np.float64) for rec in dataset.records]
        energy = None
    else:
        maps, energy = predict_pixel_maps(params, dataset,
                                          collect_energy=cfg.pcm)
    rows = ["scene_id,ciou,sim_diff,box_iou\n"]
    scores = []
    for rec, pixel_map in zip(dataset.records, maps):
        annotation = AnnotationRecord(rec.scene_id, mask=rec.gt_mask)
        score = ciou(pixel_map, annotation, threshold=0.5)
        scores.append(score)
        diff = sim_diff(pixel_map, rec.gt_mask)
        box = extract_box(pixel_map, threshold=0.7)
        box_score = iou(box, mask_box(rec.gt_mask))
        rows.append(f"{rec.scene_id},{score!r},{diff!r},{box_score!r}\n")
    curve = success_curve(scores)
    area = auc(curve)
    mean_ciou = float(np.mean(scores))
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        fh.writelines(rows)
    summary = [f"ciou@0.5 = {mean_ciou!r}\n", f"auc = {area!r}\n"]
    if energy is not None:
        for t in range(energy.shape[0]):
            summary.append(f"energy_cycle_{t} = {float(energy[t].mean())!r}\n")
    with open(os.path.join(out_dir, "summary.txt"), "w", newline="") as fh:
        fh.writelines(summary)
    with open(os.path.join(out_dir, "success_curve.txt"), "w", newline="") as fh:
        for theta, ratio in zip(DEFAULT_THRESHOLDS, curve):
            fh.write(f"{theta} {ratio!r}\n")
    write_resolved(cfg, os.path.join(out_dir, "config.resolved"))
    return {"ciou": mean_ciou, "auc": area, "scores": scores, "energy": energy}


def run_localize(ckpt_dir, dataset_dir, scene_id, out_dir):
    """Heatmap PGM and overlay PPM for one scene."""
    params = load_checkpoint(ckpt_dir)
    dataset = load_dataset(dataset_dir)
    record = next((r for r in dataset.records if r.scene_id == scene_id), None)
    if record is None:
        raise ValueError(f"scene {scene_id} not found in {dataset_dir}")
    maps, _ = forward_maps(params, record.image[None], record.audio[None])
    pixel_map = _upsample(maps[0], params.cfg.image_size, params.cfg.upsample)
    os.makedirs(out_dir, exist_ok=True)
    heat_path = os.path.join(out_dir, f"{scene_id:05d}_heat.pgm")
    overlay_path = os.path.join(out_dir, f"{scene_id:05d}_overlay.ppm")
    render_heatmap_pgm(heat_path, pixel_map)
    render_overlay_ppm(overlay_path, record.image, pixel_map)
    write_resolved(params.cfg, os.path.join(out_dir, "config.resolved"))
    return heat_path, overlay_path
