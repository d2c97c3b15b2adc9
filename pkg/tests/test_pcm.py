import numpy as np
import pytest

from avloc import autodiff as ad
from avloc.pcm import (PCMConfig, feedback_step, feedforward_step, init_state,
                       make_weights, pcm_forward, per_sample_energy,
                       prediction_energy)
from avloc.rng import make_rng


def scalar_cfg(cycles=0, a=1.0, b=0.5, activation="linear"):
    """One layer, one channel, 1x1 spatial: every op degenerates to scalars."""
    return PCMConfig(cycles=cycles, layer_channels=(1,), layer_sizes=(1,),
                     audio_dim=1, rate_a=(a,), rate_b=(b,), kernel=1,
                     activation=activation)


def identity_weights(cfg):
    out = {}
    for level in range(1, cfg.layers + 1):
        out[f"pcm.down{level}.w"] = np.ones((1, 1, 1, 1))
        out[f"pcm.down{level}.b"] = np.zeros((1, 1, 1))
        out[f"pcm.up{level}.w"] = np.ones((1, 1, 1, 1))
        out[f"pcm.up{level}.b"] = np.zeros((1, 1, 1))
    out["pcm.out.w"] = np.ones((1, 1, 1, 1))
    out["pcm.out.b"] = np.zeros((1, 1, 1))
    return {k: ad.constant(v) for k, v in out.items()}


def small_cfg(cycles=1):
    return PCMConfig(cycles=cycles, layer_channels=(3, 4), layer_sizes=(2, 4),
                     audio_dim=5, rate_a=(0.1, 0.1), rate_b=(0.5, 0.5),
                     activation="gelu")


def small_setup(cycles=1, seed=0, batch=2):
    cfg = small_cfg(cycles)
    rng = make_rng("pcm-test", seed)
    weights = {k: ad.param(v) for k, v in make_weights(cfg, rng).items()}
    visual = ad.constant(rng.standard_normal((batch, 4, 4, 4)))
    audio = rng.standard_normal((batch, 5))
    return cfg, weights, visual, audio


class TestConfigValidation:
    def test_rate_lengths_checked(self):
        with pytest.raises(ValueError, match="rate"):
            PCMConfig(layer_channels=(4,), layer_sizes=(2,), rate_a=(0.1, 0.1),
                      rate_b=(0.5,))

    def test_feedback_rate_range(self):
        with pytest.raises(ValueError, match="\\(0, 1\\]"):
            PCMConfig(layer_channels=(4,), layer_sizes=(2,), rate_a=(0.1,),
                      rate_b=(0.0,))

    def test_size_ladder_must_nest(self):
        with pytest.raises(ValueError, match="multiple"):
            PCMConfig(layer_channels=(4, 4), layer_sizes=(3, 4),
                      rate_a=(0.1, 0.1), rate_b=(0.5, 0.5))


class TestFeedback:
    def test_zero_everything_stays_zero(self):
        cfg = scalar_cfg(b=1.0)
        weights = identity_weights(cfg)
        visual = ad.constant(np.zeros((1, 1, 1, 1)))
        state = init_state(cfg, ad.constant(np.zeros((1, 1, 1, 1))), 1)
        state = feedback_step(state, weights, cfg, visual)
        assert float(state.reps[1].data) == 0.0

    def test_full_mixing_clamps_to_visual(self):
        cfg = scalar_cfg(b=1.0)
        weights = identity_weights(cfg)
        visual = ad.constant(np.full((1, 1, 1, 1), 7.0))
        state = init_state(cfg, ad.constant(np.zeros((1, 1, 1, 1))), 1)
        state = feedback_step(state, weights, cfg, visual)
        assert float(state.reps[1].data) == 7.0

    def test_half_mixing_hand_trace(self):
        # r(0) = phi((1-b)*0 + b*f_v) = 0.5 * 2 = 1 with linear phi
        cfg = scalar_cfg(b=0.5)
        weights = identity_weights(cfg)
        visual = ad.constant(np.full((1, 1, 1, 1), 2.0))
        state = init_state(cfg, ad.constant(np.zeros((1, 1, 1, 1))), 1)
        state = feedback_step(state, weights, cfg, visual)
        assert float(state.reps[1].data) == 1.0

    def test_top_prediction_clamped_every_cycle(self):
        cfg, weights, visual, audio = small_setup(cycles=3)
        _, state, _ = pcm_forward(visual, audio, weights, cfg)
        assert state.preds[cfg.layers] is visual
        assert np.array_equal(state.preds[cfg.layers].data, visual.data)


class TestFeedforward:
    def test_zero_error_fixed_point_linear(self):
        # p_0 = r_1 = 3 = f_a: error 0, correction 0, linear phi re-applies cleanly
        cfg = scalar_cfg(a=1.0, b=1.0)
        weights = identity_weights(cfg)
        audio = ad.constant(np.full((1, 1, 1, 1), 3.0))
        state = init_state(cfg, audio, 1)
        state = feedback_step(state, weights, cfg, ad.constant(np.full((1, 1, 1, 1), 3.0)))
        state = feedforward_step(state, weights, cfg)
        assert float(state.errors[0].data) == 0.0
        assert float(state.reps[1].data) == 3.0

    def test_error_and_correction_hand_trace(self):
        # r_1 = 1 after feedback (b=0.5, f_v=2); p_0 = 1; e_0 = 3-1 = 2; r_1 <- 1+2 = 3
        cfg = scalar_cfg(a=1.0, b=0.5)
        weights = identity_weights(cfg)
        audio = ad.constant(np.full((1, 1, 1, 1), 3.0))
        state = init_state(cfg, audio, 1)
        state = feedback_step(state, weights, cfg, ad.constant(np.full((1, 1, 1, 1), 2.0)))
        state = feedforward_step(state, weights, cfg)
        assert float(state.errors[0].data) == 2.0
        assert float(state.reps[1].data) == 3.0

    def test_zero_rate_disables_correction(self):
        cfg, weights, visual, audio = small_setup()
        cfg0 = PCMConfig(cycles=cfg.cycles, layer_channels=cfg.layer_channels,
                         layer_sizes=cfg.layer_sizes, audio_dim=cfg.audio_dim,
                         rate_a=(0.0, 0.0), rate_b=cfg.rate_b,
                         activation=cfg.activation)
        clamp = ad.constant(np.zeros((2, 5, 1, 1)))
        state = feedback_step(init_state(cfg0, clamp, 2), weights, cfg0, visual)
        before = [r.data.copy() for r in state.reps[1:]]
        state = feedforward_step(state, weights, cfg0)
        for prev, now in zip(before, state.reps[1:]):
            assert np.array_equal(prev, now.data)


class TestPCMForward:
    def test_cycle_zero_runs_one_pass(self):
        cfg, weights, visual, audio = small_setup(cycles=0)
        _, state, energies = pcm_forward(visual, audio, weights, cfg,
                                         collect_energy=True)
        assert state.t == 0
        assert energies.shape == (1, 2)

    def test_output_shape_matches_visual(self):
        cfg, weights, visual, audio = small_setup(cycles=2)
        out, _, _ = pcm_forward(visual, audio, weights, cfg)
        assert out.shape == visual.shape

    def test_full_linear_scalar_hand_trace(self):
        # identity weights, linear phi, a=1, b=0.5, f_v=2, f_a=3, t=0..1:
        # t=0: fb r=1;        ff: p0=1, e0=2, r=3
        # t=1: fb r=(3+2)/2=2.5; ff: p0=2.5, e0=0.5, r=3
        # output = conv1x1(identity) of r = 3
        cfg = scalar_cfg(cycles=1, a=1.0, b=0.5)
        weights = identity_weights(cfg)
        visual = ad.constant(np.full((1, 1, 1, 1), 2.0))
        out, state, _ = pcm_forward(visual, np.full((1, 1), 3.0), weights, cfg)
        assert float(out.data) == 3.0
        assert float(state.errors[0].data) == 0.5

    def test_clamp_invariants_every_cycle(self):
        cfg, weights, visual, audio = small_setup(cycles=3)
        _, state, _ = pcm_forward(visual, audio, weights, cfg)
        assert np.array_equal(state.reps[0].data.reshape(2, 5), audio)
        assert state.preds[cfg.layers] is visual

    def test_audio_path_severed_when_rates_zero(self):
        cfg = PCMConfig(cycles=2, layer_channels=(3, 4), layer_sizes=(2, 4),
                        audio_dim=5, rate_a=(0.0, 0.0), rate_b=(1.0, 1.0),
                        activation="linear")
        rng = make_rng("sever", 0)
        weights = {k: ad.constant(v) for k, v in make_weights(cfg, rng).items()}
        visual = ad.constant(rng.standard_normal((2, 4, 4, 4)))
        out1, _, _ = pcm_forward(visual, rng.standard_normal((2, 5)), weights, cfg)
        out2, _, _ = pcm_forward(visual, rng.standard_normal((2, 5)), weights, cfg)
        assert np.array_equal(out1.data, out2.data)

    def test_contraction_on_scalar_linear_testbed(self):
        # with a*b < 1 the per-cycle output change shrinks monotonically
        cfg_t = lambda t: scalar_cfg(cycles=t, a=0.3, b=0.5)
        weights = identity_weights(cfg_t(0))
        outs = []
        for t in range(4):
            out, _, _ = pcm_forward(ad.constant(np.full((1, 1, 1, 1), 2.0)),
                                    np.full((1, 1), 3.0), weights, cfg_t(t))
            outs.append(float(out.data))
        deltas = [abs(b - a) for a, b in zip(outs, outs[1:])]
        assert deltas[1] <= deltas[0] and deltas[2] <= deltas[1]

    def test_gradcheck_small_config(self):
        cfg = PCMConfig(cycles=1, layer_channels=(2, 3), layer_sizes=(1, 2),
                        audio_dim=4, rate_a=(0.2, 0.2), rate_b=(0.5, 0.5),
                        activation="gelu")
        rng = make_rng("pcm-grad", 0)
        base = make_weights(cfg, rng)
        visual_np = rng.standard_normal((1, 3, 2, 2))
        audio_np = rng.standard_normal((1, 4))
        probe = rng.uniform(-1, 1, (1, 3, 2, 2))
        names = sorted(base)

        def build(leaves):
            weights = dict(zip(names, leaves))
            out, _, _ = pcm_forward(ad.constant(visual_np), audio_np, weights, cfg)
            return ad.sum_(ad.mul(out, ad.constant(probe)))

        err = ad.grad_check(build, [base[n] for n in names], step=1e-6,
                            max_coords=4, coord_rng=make_rng("pcm-grad-c", 1))
        assert err <= 1e-5

    def test_shape_validation(self):
        cfg, weights, visual, audio = small_setup()
        with pytest.raises(ValueError, match="audio"):
            pcm_forward(visual, np.zeros((2, 7)), weights, cfg)
        with pytest.raises(ValueError, match="visual"):
            pcm_forward(ad.constant(np.zeros((2, 4, 2, 2))), audio, weights, cfg)


class TestEnergy:
    def test_zero_errors_zero_energy(self):
        cfg = scalar_cfg()
        state = init_state(cfg, ad.constant(np.zeros((1, 1, 1, 1))), 1)
        state.errors = [ad.constant(np.zeros((1, 1, 1, 1)))]
        assert prediction_energy(state) == 0.0

    def test_single_error_squared(self):
        cfg = scalar_cfg()
        state = init_state(cfg, ad.constant(np.zeros((1, 1, 1, 1))), 1)
        state.errors = [ad.constant(np.full((1, 1, 1, 1), 2.0))]
        assert prediction_energy(state) == 4.0

    def test_two_layer_sum_of_squares(self):
        cfg = small_cfg()
        state = init_state(cfg, ad.constant(np.zeros((1, 5, 1, 1))), 1)
        e0 = np.full((1, 5, 1, 1), 1.0)
        e1 = np.full((1, 3, 2, 2), 2.0)
        state.errors = [ad.constant(e0), ad.constant(e1)]
        assert prediction_energy(state) == pytest.approx(5.0 + 48.0)
        per = per_sample_energy(state)
        assert per.shape == (1,)
        assert per[0] == pytest.approx(53.0)
