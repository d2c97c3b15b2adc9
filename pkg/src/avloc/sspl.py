"""Negative-free predictive learning: projector/predictor heads, the symmetric
stop-gradient objective over two augmented views, and the collapse monitor."""

from __future__ import annotations

import numpy as np

# the predictor adapts faster than the trunk and the heads skip weight decay;
# without these groups the positive-only objective contracts the projection
# space long before view-consistent attention can form
PREDICTOR_LR_SCALE = 20.0
DECAY_EXEMPT_PREFIXES = ("proj.", "pred.")


def optimizer_groups(trainable):
    scales = {k: PREDICTOR_LR_SCALE for k in trainable if k.startswith("pred.")}
    exempt = tuple(k for k in trainable if k.startswith(DECAY_EXEMPT_PREFIXES))
    return scales, exempt

from . import autodiff as ad
from . import pcm as pcm_mod
from .attention import batched_pool, batched_scale, batched_similarity
from .model import ModelParams, make_leaves
from .rng import make_rng
from .world import apply_spatial, encode_audio, encode_visual, sample_spatial_params


def _affine(x, w, b):
    return ad.add(ad.matmul(x, w), b)


def project_predict(pooled, leaves):
    """Projection and prediction heads over (N, c_v) pooled features."""
    hidden = ad.relu(_affine(pooled, leaves["proj.w1"], leaves["proj.b1"]))
    hidden = ad.relu(_affine(hidden, leaves["proj.w2"], leaves["proj.b2"]))
    proj = _affine(hidden, leaves["proj.w3"], leaves["proj.b3"])
    bottleneck = ad.relu(_affine(proj, leaves["pred.w1"], leaves["pred.b1"]))
    pred = _affine(bottleneck, leaves["pred.w2"], leaves["pred.b2"])
    return proj, pred


def ncs_loss(pred_vec, target_vec):
    """Negative cosine similarity of two nonzero vectors."""
    for name, t in (("prediction", pred_vec), ("target", target_vec)):
        if float(np.sqrt((t.data ** 2).sum())) == 0.0:
            raise ValueError(f"ncs_loss: zero-norm {name}")
    return ad.scalar_mul(ad.cosine_similarity(pred_vec, target_vec), -1.0)


def _ncs_batch(pred, target):
    norms_p = np.sqrt((pred.data ** 2).sum(axis=1))
    norms_t = np.sqrt((target.data ** 2).sum(axis=1))
    if np.any(norms_p == 0.0) or np.any(norms_t == 0.0):
        raise ValueError("ncs: zero-norm row in batch")
    dots = ad.sum_(ad.mul(ad.l2_normalize(pred, axis=1), ad.l2_normalize(target, axis=1)), axis=1)
    return ad.scalar_mul(ad.mean_(dots), -1.0)


def sspl_loss(proj1, pred1, proj2, pred2, stop_gradient=True):
    """Symmetric view-alignment objective; each projection is a constant target
    for the other view's prediction when the stop-gradient is on.

    Returns (loss, term1, term2) scalar nodes; the terms expose the two
    halves for gradient-isolation checks.
    """
    target2 = ad.detach(proj2) if stop_gradient else proj2
    target1 = ad.detach(proj1) if stop_gradient else proj1
    term1 = _ncs_batch(pred1, target2)
    term2 = _ncs_batch(pred2, target1)
    loss = ad.add(ad.scalar_mul(term1, 0.5), ad.scalar_mul(term2, 0.5))
    return loss, term1, term2


def collapse_metric(projections):
    """Mean per-dimension std of the unit-normalized projections.

    Healthy training sits near 1/sqrt(d); a collapsed representation drops
    toward zero.
    """
    z = np.asarray(projections, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValueError("collapse_metric needs a batch of at least two projections")
    norms = np.sqrt((z * z).sum(axis=1, keepdims=True))
    unit = np.where(norms > 0.0, z / np.where(norms > 0.0, norms, 1.0), 0.0)
    return float(unit.std(axis=0).mean())


def _views(records, cfg, step):
    size = cfg.image_size
    out = []
    for view in (0, 1):
        batch = np.empty((len(records), size, size, 3))
        for i, rec in enumerate(records):
            rng = make_rng("sspl-aug", cfg.seed, step, rec.scene_id, view)
            params = sample_spatial_params(rng, size)
            batch[i] = apply_spatial(rec.image, params, size)
        out.append(batch)
    return out


def train_step_sspl(records, params: ModelParams, opt_state, step, check_sg=False):
    """One optimizer step over a batch of scenes; returns (loss, collapse, sg_ok)."""
    if not records:
        raise ValueError("train_step_sspl: empty batch")
    cfg = params.cfg
    leaves = make_leaves(params, train=True)
    view1, view2 = _views(records, cfg, step)
    audio = np.stack([rec.audio for rec in records])
    world_cfg = cfg.world_config()

    def pipeline(images):
        visual = encode_visual(images, leaves, world_cfg)
        if cfg.pcm:
            visual, _, _ = pcm_mod.pcm_forward(visual, audio, leaves, cfg.pcm_config())
        _, audio_t = encode_audio(audio, leaves)
        scaled = batched_scale(batched_similarity(audio_t, visual), cfg.scaling)
        return project_predict(batched_pool(scaled, visual), leaves)

    proj1, pred1 = pipeline(view1)
    proj2, pred2 = pipeline(view2)
    loss, term1, term2 = sspl_loss(proj1, pred1, proj2, pred2,
                                   stop_gradient=cfg.stop_gradient)

    sg_ok = None
    if check_sg and cfg.stop_gradient:
        ad.backward(term1)
        sg1 = proj2.grad is None or not np.any(proj2.grad)
        for t in (proj1, proj2, pred1, pred2, term1):
            t.grad = None
        ad.backward(term2)
        sg2 = proj1.grad is None or not np.any(proj1.grad)
        sg_ok = bool(sg1 and sg2)
        for leaf in leaves.values():
            leaf.grad = None
        for t in (proj1, proj2, pred1, pred2, term1, term2):
            t.grad = None

    trainables = [leaves[name] for name in params.trainable]
    ad.backward(loss, params=trainables)
    grads = {name: leaves[name].grad for name in params.trainable}
    arrays = {name: params.arrays[name] for name in params.trainable}
    ad.adamw_step(arrays, grads, opt_state)
    return float(loss.data), collapse_metric(proj1.data), sg_ok
