import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avloc import autodiff as ad
from avloc.attention import (SCALE_METHODS, SimilarityMap, batched_pool,
                             batched_scale, batched_similarity,
                             minmax_normalize_values, pooled_av_rep,
                             render_heatmap_pgm, render_overlay_ppm, scale_map,
                             similarity_map)
from avloc.rng import make_rng


def _map(audio, visual):
    return similarity_map(ad.constant(audio), ad.constant(visual))


class TestSimilarityMap:
    def test_colinear_everywhere_gives_ones(self):
        a = np.array([1.0, 2.0, 3.0])
        visual = np.tile(a[:, None, None], (1, 2, 2)) * 0.5
        sim = _map(a, visual)
        assert not sim.normalized
        assert np.allclose(sim.values.data, 1.0)

    def test_orthogonal_gives_zeros(self):
        a = np.array([1.0, 0.0])
        visual = np.zeros((2, 2, 2))
        visual[1] = 1.0
        sim = _map(a, visual)
        assert np.allclose(sim.values.data, 0.0)

    def test_scalar_cosine_oracle_2x2(self):
        a = np.array([2.0, 1.0])
        visual = np.array([[[1.0, 0.5], [-1.0, 3.0]],
                           [[0.0, 2.0], [4.0, 0.1]]])
        sim = _map(a, visual)
        for i in range(2):
            for j in range(2):
                v = visual[:, i, j]
                want = float(a @ v / (np.linalg.norm(a) * np.linalg.norm(v)))
                assert sim.values.data[i, j] == pytest.approx(want, abs=1e-12)

    def test_zero_norm_visual_column_gives_zero(self):
        a = np.array([1.0, 1.0])
        visual = np.ones((2, 1, 2))
        visual[:, 0, 1] = 0.0
        sim = _map(a, visual)
        assert sim.values.data[0, 1] == 0.0

    def test_zero_audio_rejected(self):
        with pytest.raises(ValueError, match="zero norm"):
            _map(np.zeros(3), np.ones((3, 2, 2)))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 50.0))
    def test_cosine_scale_invariance(self, seed, alpha):
        rng = make_rng("scaleinv", seed)
        a = rng.standard_normal(4)
        visual = rng.standard_normal((4, 3, 3))
        base = _map(a, visual).values.data
        scaled = _map(alpha * a, visual).values.data
        assert np.allclose(base, scaled, atol=1e-12)

    def test_raw_values_in_cosine_range(self):
        rng = make_rng("range", 0)
        sim = _map(rng.standard_normal(5), rng.standard_normal((5, 4, 4)))
        assert sim.values.data.min() >= -1.0 - 1e-12
        assert sim.values.data.max() <= 1.0 + 1e-12


class TestScaleMap:
    def test_minmax_endpoints(self):
        raw = SimilarityMap(ad.constant(np.array([[-1.0, 0.0], [1.0, 0.5]])), False)
        out = scale_map(raw, "minmax")
        assert out.normalized
        assert out.values.data[0, 0] == 0.0
        assert out.values.data[1, 0] == 1.0
        assert out.values.data[0, 1] == pytest.approx(0.5)

    def test_minmax_constant_gives_half(self):
        raw = SimilarityMap(ad.constant(np.full((2, 3), 0.7)), False)
        out = scale_map(raw, "minmax")
        assert np.all(out.values.data == 0.5)

    def test_softmax_constant_uniform(self):
        raw = SimilarityMap(ad.constant(np.full((2, 2), 0.3)), False)
        out = scale_map(raw, "softmax")
        assert np.allclose(out.values.data, 0.25)

    def test_unknown_method_rejected(self):
        raw = SimilarityMap(ad.constant(np.zeros((2, 2))), False)
        with pytest.raises(ValueError, match="unknown scaling"):
            scale_map(raw, "sqrt")

    def test_already_normalized_rejected(self):
        raw = SimilarityMap(ad.constant(np.zeros((2, 2))), True)
        with pytest.raises(ValueError, match="raw"):
            scale_map(raw, "minmax")

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_minmax_preserves_ordering(self, seed):
        rng = make_rng("order", seed)
        values = rng.standard_normal((3, 3))
        raw = SimilarityMap(ad.constant(values), False)
        out = scale_map(raw, "minmax").values.data
        assert np.array_equal(np.argsort(values.reshape(-1), kind="stable"),
                              np.argsort(out.reshape(-1), kind="stable"))
        assert np.argmax(values) == np.argmax(out)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(SCALE_METHODS))
    def test_all_methods_land_in_unit_interval(self, seed, method):
        rng = make_rng("unit", seed)
        raw = SimilarityMap(ad.constant(np.clip(rng.standard_normal((3, 3)), -1, 1)), False)
        out = scale_map(raw, method)
        assert out.values.data.min() >= 0.0
        assert out.values.data.max() <= 1.0 + 1e-12


class TestPooling:
    def test_selector_weights(self):
        visual = np.stack([np.array([[1.0, 5.0]]), np.array([[2.0, 6.0]])])
        sel = SimilarityMap(ad.constant(np.array([[1.0, 0.0]])), True)
        out = pooled_av_rep(sel, ad.constant(visual))
        assert np.array_equal(out.data, np.array([1.0, 2.0]))

    def test_zero_map_zero_vector(self):
        sel = SimilarityMap(ad.constant(np.zeros((2, 2))), True)
        out = pooled_av_rep(sel, ad.constant(np.ones((3, 2, 2))))
        assert np.array_equal(out.data, np.zeros(3))

    def test_weighted_sum_scalar_oracle(self):
        rng = make_rng("pool", 1)
        weights = rng.uniform(0, 1, (2, 2))
        visual = rng.standard_normal((3, 2, 2))
        out = pooled_av_rep(SimilarityMap(ad.constant(weights), True),
                            ad.constant(visual))
        for k in range(3):
            want = sum(weights[i, j] * visual[k, i, j] for i in range(2) for j in range(2))
            assert out.data[k] == pytest.approx(want, abs=1e-12)

    def test_requires_normalized(self):
        raw = SimilarityMap(ad.constant(np.zeros((2, 2))), False)
        with pytest.raises(ValueError, match="normalized"):
            pooled_av_rep(raw, ad.constant(np.ones((3, 2, 2))))

    def test_linearity_in_features(self):
        rng = make_rng("lin", 2)
        w = SimilarityMap(ad.constant(rng.uniform(0, 1, (2, 2))), True)
        fa = rng.standard_normal((3, 2, 2))
        fb = rng.standard_normal((3, 2, 2))
        lhs = pooled_av_rep(w, ad.constant(fa + fb)).data
        rhs = pooled_av_rep(w, ad.constant(fa)).data + pooled_av_rep(w, ad.constant(fb)).data
        # linear to round-off (summation order differs between the two sides)
        assert np.allclose(lhs, rhs, atol=1e-12)


class TestAttentionGradients:
    def test_pipeline_gradcheck(self):
        rng = make_rng("attn-grad", 0)
        audio = rng.standard_normal(4) + 0.5
        visual = rng.standard_normal((4, 3, 3))

        def build(leaves):
            sim = similarity_map(leaves[0], leaves[1])
            scaled = scale_map(sim, "minmax")
            pooled = pooled_av_rep(scaled, leaves[1])
            return ad.sum_(ad.mul(pooled, ad.constant(rng_probe)))

        rng_probe = make_rng("attn-probe", 0).uniform(-1, 1, 4)
        err = ad.grad_check(build, [audio, visual], step=1e-6)
        assert err <= 1e-5


class TestBatchedEquivalence:
    def test_batched_matches_per_map(self):
        rng = make_rng("batch-eq", 0)
        audio = rng.standard_normal((3, 4))
        visual = rng.standard_normal((3, 4, 2, 2))
        sims = batched_similarity(ad.constant(audio), ad.constant(visual))
        for method in SCALE_METHODS:
            scaled = batched_scale(sims, method)
            pooled = batched_pool(scaled, ad.constant(visual))
            for i in range(3):
                one = similarity_map(ad.constant(audio[i]), ad.constant(visual[i]))
                sone = scale_map(one, method)
                pone = pooled_av_rep(sone, ad.constant(visual[i]))
                assert np.allclose(sims.data[i], one.values.data, atol=1e-12)
                assert np.allclose(scaled.data[i], sone.values.data, atol=1e-12)
                assert np.allclose(pooled.data[i], pone.data, atol=1e-12)

    def test_batched_minmax_handles_constant_row(self):
        values = np.stack([np.full((2, 2), 0.3), np.arange(4.0).reshape(2, 2)])
        scaled = batched_scale(ad.constant(values), "minmax")
        assert np.all(scaled.data[0] == 0.5)
        assert scaled.data[1].min() == 0.0 and scaled.data[1].max() == 1.0

    def test_numpy_minmax_helper(self):
        assert np.all(minmax_normalize_values(np.full((2, 2), 1.0)) == 0.5)
        out = minmax_normalize_values(np.array([-1.0, 0.0, 1.0]))
        assert np.allclose(out, [0.0, 0.5, 1.0])


class TestExports:
    def test_heatmap_pgm_values(self, tmp_path):
        from avloc.tensorio import read_pgm
        path = tmp_path / "h.pgm"
        render_heatmap_pgm(path, np.array([[0.0, 0.5], [1.0, 0.25]]))
        got = read_pgm(path)
        assert got[0, 0] == 0 and got[1, 0] == 255
        assert got[0, 1] == 128  # floor(0.5*255 + 0.5)

    def test_overlay_blend_spot_check(self, tmp_path):
        from avloc.tensorio import read_ppm
        img = np.zeros((1, 2, 3))
        img[0, 0] = [0.2, 0.4, 0.6]
        heat = np.array([[1.0, 0.0]])
        path = tmp_path / "o.ppm"
        render_overlay_ppm(path, img, heat)
        got = read_ppm(path)
        # red channel: 0.5*0.2 + 0.5*1.0 = 0.6; green 0.5*0.4; blue 0.5*0.6
        want = np.floor(np.array([0.6, 0.2, 0.3]) * 255 + 0.5) / 255
        assert np.allclose(got[0, 0], want, atol=1e-9)
