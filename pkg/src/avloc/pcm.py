"""Iterative audio-visual feature alignment with feedback and feedforward passes.

A ladder of L layers sits between the audio embedding (layer 0, a 1x1
spatial map) and the visual feature map (the clamp at the top). Each cycle
first generates top-down predictions and blends them into the layer states,
then propagates bottom-up prediction errors as corrections. The top state
after the last cycle, passed through a 1x1 convolution, is the transformed
visual feature. The whole unrolled computation is differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

_ACTIVATIONS = {"gelu": ad.gelu, "relu": ad.relu, "linear": lambda x: x}


@dataclass(frozen=True)
class PCMConfig:
    cycles: int = 5                       # loop runs t = 0..cycles inclusive
    layer_channels: tuple = (16, 32)      # layers 1..L; last must equal c_v
    layer_sizes: tuple = (4, 8)           # spatial sides; last must equal grid
    audio_dim: int = 128
    rate_a: tuple = (0.1, 0.1)            # feedforward correction rate per layer
    rate_b: tuple = (0.5, 0.5)            # feedback blend rate per layer
    kernel: int = 3
    activation: str = "gelu"

    def __post_init__(self):
        L = len(self.layer_channels)
        if L != len(self.layer_sizes):
            raise ValueError("layer_channels and layer_sizes must have equal length")
        if len(self.rate_a) != L or len(self.rate_b) != L:
            raise ValueError("rate_a and rate_b must have one entry per layer")
        if self.cycles < 0:
            raise ValueError("cycle count must be non-negative")
        if any(not 0.0 < b <= 1.0 for b in self.rate_b):
            raise ValueError("feedback rates must lie in (0, 1]")
        if any(a < 0.0 for a in self.rate_a):
            raise ValueError("correction rates must be non-negative")
        sizes = (1,) + tuple(self.layer_sizes)
        for lower, upper in zip(sizes, sizes[1:]):
            if upper % lower:
                raise ValueError(f"layer size {upper} is not a multiple of {lower}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation: {self.activation!r}")

    @property
    def layers(self):
        return len(self.layer_channels)

    def shapes(self):
        """Channel/side per level 0..L (level 0 is the audio clamp)."""
        return ((self.audio_dim, 1),) + tuple(zip(self.layer_channels, self.layer_sizes))


@dataclass
class PCMState:
    """Representations, predictions, and errors of one cycle.

    reps[0] stays clamped to the audio embedding and preds[L] to the visual
    feature for every t.
    """

    reps: list      # level 0..L nodes
    preds: list     # level 0..L nodes (None until feedback ran)
    errors: list = field(default_factory=list)  # level 0..L-1 nodes
    t: int = -1


def make_weights(cfg: PCMConfig, rng):
    """Seeded weight arrays; the output head starts as a near-identity map."""
    shapes = cfg.shapes()
    k = cfg.kernel
    out = {}
    for level in range(1, cfg.layers + 1):
        c_hi, _ = shapes[level]
        c_lo, _ = shapes[level - 1]
        out[f"pcm.down{level}.w"] = rng.standard_normal((c_lo, c_hi, k, k)) / np.sqrt(c_hi * k * k)
        out[f"pcm.down{level}.b"] = np.zeros((c_lo, 1, 1))
        out[f"pcm.up{level}.w"] = rng.standard_normal((c_lo, c_hi, k, k)) / np.sqrt(c_lo * k * k)
        out[f"pcm.up{level}.b"] = np.zeros((c_hi, 1, 1))
    c_top = cfg.layer_channels[-1]
    eye = np.zeros((c_top, c_top, 1, 1))
    eye[np.arange(c_top), np.arange(c_top), 0, 0] = 1.0
    out["pcm.out.w"] = eye + 0.01 * rng.standard_normal((c_top, c_top, 1, 1))
    out["pcm.out.b"] = np.zeros((c_top, 1, 1))
    return out


def _down(level, rep, params, cfg):
    """Top-down weight application: conv, then pool to the lower level's side."""
    shapes = cfg.shapes()
    pad = cfg.kernel // 2
    conv = ad.add(ad.conv2d(rep, params[f"pcm.down{level}.w"], pad=pad),
                  params[f"pcm.down{level}.b"])
    factor = shapes[level][1] // shapes[level - 1][1]
    return ad.maxpool2d(conv, factor) if factor > 1 else conv


def _up(level, err, params, cfg):
    """Bottom-up weight application: upsample, then transposed convolution."""
    shapes = cfg.shapes()
    pad = cfg.kernel // 2
    factor = shapes[level][1] // shapes[level - 1][1]
    grown = ad.upsample2d(err, factor) if factor > 1 else err
    return ad.add(ad.transposed_conv2d(grown, params[f"pcm.up{level}.w"], pad=pad),
                  params[f"pcm.up{level}.b"])


def init_state(cfg: PCMConfig, audio, batch):
    """Fresh state before the first cycle: all layer representations start at zero."""
    shapes = cfg.shapes()
    reps = [audio]
    for ch, side in shapes[1:]:
        reps.append(ad.constant(np.zeros((batch, ch, side, side))))
    return PCMState(reps=reps, preds=[None] * (cfg.layers + 1), t=-1)


def feedback_step(state: PCMState, params, cfg: PCMConfig, visual):
    """Top-down pass at t+1: predictions blend into each layer's state."""
    phi = _ACTIVATIONS[cfg.activation]
    reps = list(state.reps)
    preds = list(state.preds)
    preds[cfg.layers] = visual
    for level in range(cfg.layers, 0, -1):
        pred = visual if level == cfg.layers else _down(level + 1, reps[level + 1], params, cfg)
        preds[level] = pred
        b = cfg.rate_b[level - 1]
        mixed = ad.add(ad.scalar_mul(reps[level], 1.0 - b), ad.scalar_mul(pred, b))
        reps[level] = phi(mixed)
    return PCMState(reps=reps, preds=preds, errors=list(state.errors), t=state.t + 1)


def feedforward_step(state: PCMState, params, cfg: PCMConfig):
    """Bottom-up pass at the current t: errors correct each layer's state."""
    phi = _ACTIVATIONS[cfg.activation]
    reps = list(state.reps)
    preds = list(state.preds)
    errors = [None] * cfg.layers
    for level in range(1, cfg.layers + 1):
        if level == 1:
            preds[0] = phi(_down(1, reps[1], params, cfg))
            err = ad.sub(reps[0], preds[0])
        else:
            err = ad.sub(reps[level - 1], preds[level - 1])
        errors[level - 1] = err
        a = cfg.rate_a[level - 1]
        if a != 0.0:  # rate 0 disables the correction and leaves the state alone
            corr = ad.scalar_mul(_up(level, err, params, cfg), a)
            reps[level] = phi(ad.add(reps[level], corr))
    return PCMState(reps=reps, preds=preds, errors=errors, t=state.t)


def prediction_energy(state: PCMState):
    """Sum of squared prediction errors over all levels at the current t."""
    return float(sum((e.data ** 2).sum() for e in state.errors))


def per_sample_energy(state: PCMState):
    """(N,) squared-error totals, for test-set averaging."""
    return sum((e.data ** 2).sum(axis=tuple(range(1, e.data.ndim))) for e in state.errors)


def pcm_forward(visual, audio, params, cfg: PCMConfig, collect_energy=False):
    """Run t = 0..cycles and return the transformed visual feature node.

    visual: (N, c_v, h, w) node; audio: (N, c_a) node or array. Returns
    (output, final_state, energies) where energies is a (cycles+1, N) array
    when requested, else None.
    """
    if not isinstance(audio, ad.Tensor):
        audio = ad.constant(audio)
    n = visual.shape[0]
    if audio.shape != (n, cfg.audio_dim):
        raise ValueError(f"pcm_forward: audio shape {audio.shape} does not match "
                         f"batch {n} x {cfg.audio_dim}")
    if visual.shape[1] != cfg.layer_channels[-1] or visual.shape[2] != cfg.layer_sizes[-1]:
        raise ValueError(f"pcm_forward: visual shape {visual.shape} does not match "
                         f"top layer {cfg.layer_channels[-1]}x{cfg.layer_sizes[-1]}")
    clamp = ad.reshape(audio, (n, cfg.audio_dim, 1, 1))
    state = init_state(cfg, clamp, n)
    energies = []
    for _ in range(cfg.cycles + 1):
        state = feedback_step(state, params, cfg, visual)
        state = feedforward_step(state, params, cfg)
        if collect_energy:
            energies.append(per_sample_energy(state))
    out = ad.add(ad.conv2d(state.reps[cfg.layers], params["pcm.out.w"], pad=0),
                 params["pcm.out.b"])
    return out, state, (np.stack(energies) if collect_energy else None)
