"""Central-difference verification of every differentiable op and of the two
end-to-end training objectives on a tiny configuration.

Kink-prone inputs (relu zeros, max/min ties) are constructed with explicit
margins so the checks probe smooth neighborhoods only.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .attention import batched_pool, batched_scale, batched_similarity
from .config import RunConfig
from .model import init_model, make_leaves
from .pcm import pcm_forward
from .rng import make_rng
from .sacl import TAU, _term_from_best, binarize_sim, compact_features, contrastive_mask
from .sacl import _active_cells, _masked_cell_sims, sacl_loss, _cosine_map
from .segmentation import grid_mask, mask_to_grid
from .sspl import project_predict, sspl_loss
from .attention import minmax_normalize_values
from .world import encode_audio, encode_visual

OP_TOLERANCE = 1e-5
PIPELINE_TOLERANCE = 1e-4


def _smooth(rng, shape):
    return rng.uniform(-1.0, 1.0, shape)


def _off_zero(rng, shape, margin=0.1):
    x = rng.uniform(-1.0, 1.0, shape)
    return x + np.sign(np.where(x == 0.0, 1.0, x)) * margin


def _distinct(rng, shape):
    """Values with pairwise gaps well above the probe step (for max/min ties)."""
    size = int(np.prod(shape))
    base = rng.permutation(size).astype(np.float64) * 0.1
    return (base + rng.uniform(-0.03, 0.03, size)).reshape(shape)


def _away_from_unit_norm(rng, shape):
    x = rng.uniform(-1.0, 1.0, shape)
    flat = x.reshape(-1, x.shape[-1])
    for row in flat:
        if np.sqrt((row * row).sum()) < 0.3:
            row += 0.5
    return x


# op application and input sampler per kind; the scalar probe (a fixed random
# weighting of the op output) is drawn once per test point, not per rebuild
_CASES = {
    "add": (lambda L: ad.add(L[0], L[1]),
            lambda rng: [_smooth(rng, (3, 4)), _smooth(rng, (3, 4))]),
    "sub": (lambda L: ad.sub(L[0], L[1]),
            lambda rng: [_smooth(rng, (3, 4)), _smooth(rng, (1, 4))]),
    "mul": (lambda L: ad.mul(L[0], L[1]),
            lambda rng: [_smooth(rng, (3, 4)), _smooth(rng, (3, 1))]),
    "scalar-mul": (lambda L: ad.scalar_mul(L[0], 1.7),
                   lambda rng: [_smooth(rng, (5,))]),
    "div": (lambda L: ad.div(L[0], L[1]),
            lambda rng: [_smooth(rng, (3, 4)), _off_zero(rng, (3, 4), 0.5)]),
    "matmul": (lambda L: ad.matmul(L[0], L[1]),
               lambda rng: [_smooth(rng, (3, 4)), _smooth(rng, (4, 2))]),
    "conv2d": (lambda L: ad.conv2d(L[0], L[1], pad=1),
               lambda rng: [_smooth(rng, (2, 3, 5, 5)), _smooth(rng, (4, 3, 3, 3))]),
    "transposed-conv2d": (lambda L: ad.transposed_conv2d(L[0], L[1], pad=1),
                          lambda rng: [_smooth(rng, (2, 3, 4, 4)), _smooth(rng, (3, 4, 3, 3))]),
    "maxpool2d": (lambda L: ad.maxpool2d(L[0], 2),
                  lambda rng: [_distinct(rng, (2, 2, 4, 4))]),
    "nearest-upsample2d": (lambda L: ad.upsample2d(L[0], 2),
                           lambda rng: [_smooth(rng, (2, 2, 3, 3))]),
    "relu": (lambda L: ad.relu(L[0]), lambda rng: [_off_zero(rng, (4, 3))]),
    "gelu": (lambda L: ad.gelu(L[0]), lambda rng: [_smooth(rng, (4, 3))]),
    "sigmoid": (lambda L: ad.sigmoid(L[0]), lambda rng: [_smooth(rng, (4, 3))]),
    "softmax-over-axis": (lambda L: ad.softmax(L[0], axis=1),
                          lambda rng: [_smooth(rng, (3, 5))]),
    "l2-normalize-over-axis": (lambda L: ad.l2_normalize(L[0], axis=1),
                               lambda rng: [_away_from_unit_norm(rng, (3, 5))]),
    "logsumexp-over-axis": (lambda L: ad.logsumexp(L[0], axis=1),
                            lambda rng: [_smooth(rng, (3, 5))]),
    "sum": (lambda L: ad.sum_(L[0], axis=1), lambda rng: [_smooth(rng, (3, 4))]),
    "mean": (lambda L: ad.mean_(L[0], axis=0), lambda rng: [_smooth(rng, (3, 4))]),
    "max-over-axis": (lambda L: ad.max_(L[0], axis=1),
                      lambda rng: [_distinct(rng, (3, 6))]),
    "min-over-axis": (lambda L: ad.min_(L[0], axis=1),
                      lambda rng: [_distinct(rng, (3, 6))]),
    "reshape": (lambda L: ad.reshape(L[0], (6, 2)), lambda rng: [_smooth(rng, (3, 4))]),
    "permute": (lambda L: ad.permute(L[0], (1, 0, 2)),
                lambda rng: [_smooth(rng, (2, 3, 4))]),
    "concat": (lambda L: ad.concat([L[0], L[1]], axis=0),
               lambda rng: [_smooth(rng, (2, 3)), _smooth(rng, (4, 3))]),
    "take-row": (lambda L: ad.take_row(L[0], 1), lambda rng: [_smooth(rng, (4, 3))]),
    "cosine-similarity": (lambda L: ad.cosine_similarity(L[0], L[1]),
                          lambda rng: [_away_from_unit_norm(rng, (5,)),
                                       _away_from_unit_norm(rng, (5,))]),
}


def op_case(kind, seed):
    """(build, arrays) for one seeded test point of one op kind."""
    op, sampler = _CASES[kind]
    rng = make_rng("gradcheck", kind, seed)
    arrays = sampler(rng)
    out_shape = op([ad.constant(a) for a in arrays]).shape
    probe = rng.uniform(-1.0, 1.0, out_shape)

    def build(leaves):
        return ad.sum_(ad.mul(op(leaves), ad.constant(probe)))
    return build, arrays


def run_op_suite(points=20, step=1e-5):
    """Max relative error per op kind over seeded test points."""
    report = {}
    for kind in sorted(_CASES):
        worst = 0.0
        for s in range(points):
            build, arrays = op_case(kind, s)
            worst = max(worst, ad.grad_check(build, arrays, step=step))
        report[kind] = worst
    return report


def _tiny_config(scheme, pcm=False, mask="grid-2"):
    return RunConfig(classes=3, image_size=16, grid_size=4, visual_channels=8,
                     audio_dim=12, scenes=4, scheme=scheme, seed=7, steps=1,
                     batch_size=2, pcm=pcm, pcm_layers=2, pcm_cycles=1,
                     mask=mask, fnd=True, fnd_proportion=0.75, audio_noise=0.05)


def _tiny_batch(cfg, rng):
    n = 2
    images = rng.uniform(0.0, 1.0, (n, cfg.image_size, cfg.image_size, 3))
    audio = rng.standard_normal((n, cfg.audio_dim))
    return images, audio


def check_pipeline_sspl(step=1e-6, max_coords=6):
    """End-to-end view-alignment objective against central differences.

    The stop-gradient targets are frozen at the unperturbed point, which is
    exactly the function the engine's gradient differentiates.
    """
    cfg = _tiny_config("sspl", pcm=True)
    params = init_model(cfg)
    rng = make_rng("gradcheck-pipeline", "sspl")
    images1, audio = _tiny_batch(cfg, rng)
    images2 = images1 + rng.uniform(-0.05, 0.05, images1.shape)
    perturbed = ("enc.w", "g.w2", "proj.w3", "pred.w1", "pcm.up1.w")

    def pipeline(images, leaves):
        visual = encode_visual(images, leaves, cfg.world_config())
        visual, _, _ = pcm_forward(visual, audio, leaves, cfg.pcm_config())
        _, audio_t = encode_audio(audio, leaves)
        scaled = batched_scale(batched_similarity(audio_t, visual), cfg.scaling)
        return project_predict(batched_pool(scaled, visual), leaves)

    base_leaves = {name: ad.constant(arr) for name, arr in params.arrays.items()}
    target2 = pipeline(images2, base_leaves)[0].data.copy()
    target1 = pipeline(images1, base_leaves)[0].data.copy()

    def build(leaf_list):
        leaves = {name: ad.constant(arr) for name, arr in params.arrays.items()}
        leaves.update(dict(zip(perturbed, leaf_list)))
        _, pred1 = pipeline(images1, leaves)
        _, pred2 = pipeline(images2, leaves)
        term1 = _ncs_const_target(pred1, target2)
        term2 = _ncs_const_target(pred2, target1)
        return ad.add(ad.scalar_mul(term1, 0.5), ad.scalar_mul(term2, 0.5))

    arrays = [params.arrays[name] for name in perturbed]
    return ad.grad_check(build, arrays, step=step, max_coords=max_coords,
                         coord_rng=make_rng("gradcheck-coords", "sspl"))


def _ncs_const_target(pred, target_values):
    target = ad.constant(target_values)
    dots = ad.sum_(ad.mul(ad.l2_normalize(pred, axis=1),
                          ad.l2_normalize(target, axis=1)), axis=1)
    return ad.scalar_mul(ad.mean_(dots), -1.0)


def check_pipeline_sacl(step=1e-6, max_coords=6):
    """End-to-end contrastive objective against central differences.

    Mask selections are frozen at the unperturbed point (they are index
    choices, not differentiated quantities).
    """
    cfg = _tiny_config("sacl", mask="grid-2")
    params = init_model(cfg)
    rng = make_rng("gradcheck-pipeline", "sacl")
    images, audio = _tiny_batch(cfg, rng)
    n = 2
    grid = cfg.grid_size
    seg = mask_to_grid(grid_mask(cfg.image_size, cfg.image_size, 2), grid, grid)
    perturbed = ("enc.w", "g.w2")

    base_leaves = {name: ad.constant(arr) for name, arr in params.arrays.items()}
    _, audio_t0 = encode_audio(audio, base_leaves)
    visual0 = encode_visual(images, base_leaves, cfg.world_config())
    frozen = []
    for i in range(n):
        raw = minmax_normalize_values(_cosine_map(audio_t0.data[i], visual0.data[i]))
        binary = binarize_sim(raw)
        cmask = contrastive_mask(binary, seg)
        frozen.append((cmask.mask, _active_cells(cmask.mask, binary, (grid, grid))))

    def build(leaf_list):
        leaves = {name: ad.constant(arr) for name, arr in params.arrays.items()}
        leaves.update(dict(zip(perturbed, leaf_list)))
        _, audio_t = encode_audio(audio, leaves)
        visual = encode_visual(images, leaves, cfg.world_config())
        rows = [ad.reshape(ad.take_row(audio_t, j), (1, cfg.visual_channels))
                for j in range(n)]
        terms = []
        for i in range(n):
            mask, active = frozen[i]
            vis_i = compact_features(mask, ad.take_row(visual, i))
            others = [j for j in range(n) if j != i]
            stack = ad.concat([rows[i]] + [rows[j] for j in others], axis=0)
            sims = _masked_cell_sims(vis_i, active, stack)
            best = ad.max_(ad.reshape(sims, (n, grid * grid)), axis=1)
            terms.append(_term_from_best(best, TAU))
        return sacl_loss(terms, n)

    arrays = [params.arrays[name] for name in perturbed]
    return ad.grad_check(build, arrays, step=step, max_coords=max_coords,
                         coord_rng=make_rng("gradcheck-coords", "sacl"))


def full_report(points=20):
    """(per-op report, sspl pipeline error, sacl pipeline error)."""
    return run_op_suite(points=points), check_pipeline_sspl(), check_pipeline_sacl()
