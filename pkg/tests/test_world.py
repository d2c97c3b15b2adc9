import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avloc import autodiff as ad
from avloc.rng import make_rng
from avloc.world import (PhotometricParams, SpatialParams, WorldConfig, World,
                         apply_photometric, apply_spatial, augment_photometric,
                         augment_spatial, encode_audio, encode_visual,
                         frozen_patch_map, generate_dataset, load_dataset,
                         make_world, sample_batch, sample_scene,
                         sample_spatial_params, spatial_source_index)

SMALL = WorldConfig(num_classes=4, image_size=32, grid_size=4, visual_channels=16,
                    audio_dim=32, seed=11)


@pytest.fixture(scope="module")
def world():
    return make_world(SMALL)


class TestWorldConfig:
    def test_grid_must_divide_image(self):
        with pytest.raises(ValueError, match="divisible"):
            WorldConfig(image_size=30, grid_size=8)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            WorldConfig(num_classes=1)

    def test_blob_range_validated(self):
        with pytest.raises(ValueError):
            WorldConfig(blob_min=0.6, blob_max=0.5)


class TestMakeWorld:
    def test_prototype_separation_brute_force(self, world):
        protos = world.prototypes
        assert protos.shape == (4, 32)
        for i in range(len(protos)):
            assert np.sqrt((protos[i] ** 2).sum()) == pytest.approx(1.0)
            for j in range(i + 1, len(protos)):
                assert abs(float(protos[i] @ protos[j])) < 0.5

    def test_eight_classes_at_full_audio_dim(self):
        cfg = WorldConfig(num_classes=8, seed=3)
        protos = make_world(cfg).prototypes
        for i in range(8):
            for j in range(i + 1, 8):
                assert abs(float(protos[i] @ protos[j])) < 0.5

    def test_deterministic_in_seed(self):
        a = make_world(SMALL)
        b = make_world(SMALL)
        assert np.array_equal(a.prototypes, b.prototypes)
        assert np.array_equal(a.patterns, b.patterns)

    def test_too_many_classes_rejected(self):
        cfg = WorldConfig(num_classes=64, audio_dim=2, image_size=32, grid_size=4)
        with pytest.raises(ValueError, match="prototypes"):
            make_world(cfg)


class TestSampleScene:
    def test_zero_noise_audio_equals_prototype(self):
        cfg = dataclasses.replace(SMALL, audio_noise=0.0)
        w = make_world(cfg)
        scene = sample_scene(w, 5)
        assert np.array_equal(scene.audio, w.prototypes[scene.class_id])

    def test_full_blob_covers_image(self):
        cfg = dataclasses.replace(SMALL, blob_min=1.0, blob_max=1.0)
        scene = sample_scene(make_world(cfg), 0)
        assert scene.gt_mask.all()

    def test_mask_area_within_configured_range(self, world):
        side = SMALL.image_size
        slack = 2.0 / side
        for sid in range(50):
            scene = sample_scene(world, sid)
            frac = np.sqrt(scene.gt_mask.sum() / side ** 2)
            assert SMALL.blob_min - slack <= frac <= SMALL.blob_max + slack

    def test_audio_classification_oracle(self):
        cfg = dataclasses.replace(SMALL, audio_noise=0.05)
        w = make_world(cfg)
        hits = 0
        for sid in range(100):
            scene = sample_scene(w, sid)
            sims = w.prototypes @ (scene.audio / np.linalg.norm(scene.audio))
            hits += int(np.argmax(sims) == scene.class_id)
        assert hits == 100

    def test_block_structured_similarity_at_zero_noise(self):
        from avloc.sacl import audio_sim_matrix
        cfg = dataclasses.replace(SMALL, audio_noise=0.0)
        w = make_world(cfg)
        scenes = [sample_scene(w, sid) for sid in range(24)]
        sims = audio_sim_matrix(np.stack([s.audio for s in scenes]))
        labels = np.array([s.class_id for s in scenes])
        same = labels[:, None] == labels[None, :]
        assert np.all(np.abs(sims[same] - 1.0) <= 1e-12)
        assert np.all(sims[~same] < 0.5)


class TestSpatialAugment:
    def test_identity_params(self, world):
        scene = sample_scene(world, 1)
        params = SpatialParams(0, 0, SMALL.image_size, False)
        out = apply_spatial(scene.image, params, SMALL.image_size)
        assert np.array_equal(out, scene.image)

    def test_flip_involution(self, world):
        scene = sample_scene(world, 2)
        params = SpatialParams(0, 0, SMALL.image_size, True)
        once = apply_spatial(scene.image, params, SMALL.image_size)
        twice = apply_spatial(once, params, SMALL.image_size)
        assert np.array_equal(twice, scene.image)

    def test_seeded_views_reproducible(self, world):
        scene = sample_scene(world, 3)
        v1, m1 = augment_spatial(scene.image, scene.gt_mask, 99)
        v2, m2 = augment_spatial(scene.image, scene.gt_mask, 99)
        assert np.array_equal(v1, v2)
        assert np.array_equal(m1, m2)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 100_000))
    def test_mask_commutes_with_inverse_lookup(self, seed):
        rng = make_rng("commute", seed)
        size = 16
        mask = (rng.random((size, size)) < 0.3)
        params = sample_spatial_params(rng, size)
        moved = apply_spatial(mask, params, size)
        for _ in range(10):
            r = int(rng.integers(size))
            c = int(rng.integers(size))
            sr, sc = spatial_source_index(params, size, r, c)
            assert moved[r, c] == mask[sr, sc]


class TestPhotometricAugment:
    def test_neutral_params_identity(self, world):
        scene = sample_scene(world, 4)
        out = apply_photometric(scene.image, PhotometricParams(0.0, 0.0, False, None))
        assert np.array_equal(out, scene.image)

    def test_grayscale_fixes_gray_images(self):
        gray = np.full((8, 8, 3), 0.42)
        out = apply_photometric(gray, PhotometricParams(0.0, 0.0, True, None))
        assert np.allclose(out, gray, atol=1e-12)

    def test_blur_matches_direct_convolution_oracle(self):
        from avloc.imageops import gaussian_blur, gaussian_kernel
        rng = make_rng("blur-oracle", 0)
        img = rng.uniform(0, 1, (12, 12))
        sigma = 0.8
        got = gaussian_blur(img, sigma)
        k = gaussian_kernel(sigma)
        r = (len(k) - 1) // 2
        padded = np.pad(img, r, mode="reflect")
        want = np.zeros_like(img)
        for i in range(12):
            for j in range(12):
                patch = padded[i:i + 2 * r + 1, j:j + 2 * r + 1]
                want[i, j] = (np.outer(k, k) * patch).sum()
        assert np.allclose(got, want, atol=1e-12)

    def test_blur_preserves_constant_mean(self):
        flat = np.full((16, 16), 0.37)
        out = apply_photometric(flat[..., None].repeat(3, 2),
                                PhotometricParams(0.0, 0.0, False, 0.7))
        interior = out[4:-4, 4:-4, :]
        assert abs(interior.mean() - 0.37) <= 1e-6

    def test_output_clamped(self, world):
        scene = sample_scene(world, 6)
        out = apply_photometric(scene.image, PhotometricParams(0.4, 0.4, False, None))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_seeded_reproducible(self, world):
        scene = sample_scene(world, 7)
        assert np.array_equal(augment_photometric(scene.image, 5),
                              augment_photometric(scene.image, 5))


class TestEncoders:
    def _params(self, zero_head=False):
        rng = make_rng("enc-test", 0)
        c = SMALL.visual_channels
        head_w = np.zeros((c, c)) if zero_head else rng.standard_normal((c, c)) * 0.1
        return {
            "enc.frozen": frozen_patch_map(SMALL),
            "enc.w": ad.param(head_w),
            "enc.b": ad.param(np.zeros(c)),
        }

    def test_output_shape_contract(self, world):
        scene = sample_scene(world, 8)
        feats = encode_visual(scene.image, self._params(), SMALL)
        assert feats.shape == (16, 4, 4)
        batch = np.stack([scene.image, scene.image])
        feats = encode_visual(batch, self._params(), SMALL)
        assert feats.shape == (2, 16, 4, 4)

    def test_patch_locality(self, world):
        a = sample_scene(world, 9).image.copy()
        b = sample_scene(world, 10).image.copy()
        b[:8, :8] = a[:8, :8]  # first 2x2 patch block of cells shares pixels
        params = self._params()
        fa = encode_visual(a, params, SMALL)
        fb = encode_visual(b, params, SMALL)
        assert np.array_equal(fa.data[:, 0, 0], fb.data[:, 0, 0])

    def test_zero_image_zero_head_gives_zero(self):
        feats = encode_visual(np.zeros((32, 32, 3)), self._params(zero_head=True), SMALL)
        assert np.array_equal(feats.data, np.zeros_like(feats.data))

    def test_audio_passthrough_and_zero_init(self):
        rng = make_rng("aud-test", 0)
        audio = rng.standard_normal(32)
        params = {
            "g.w1": ad.param(np.zeros((32, 64))), "g.b1": ad.param(np.zeros(64)),
            "g.w2": ad.param(np.zeros((64, 16))), "g.b2": ad.param(np.zeros(16)),
        }
        raw, transformed = encode_audio(audio, params)
        assert np.array_equal(raw, audio)
        assert np.array_equal(transformed.data, np.zeros(16))

    def test_audio_identity_embedding(self):
        audio = np.arange(1.0, 17.0)
        w1 = np.zeros((16, 64))
        w1[:16, :16] = np.eye(16)
        w2 = np.zeros((64, 16))
        w2[:16, :16] = np.eye(16)
        params = {
            "g.w1": ad.param(w1), "g.b1": ad.param(np.zeros(64)),
            "g.w2": ad.param(w2), "g.b2": ad.param(np.zeros(16)),
        }
        _, transformed = encode_audio(audio, params)
        assert np.allclose(transformed.data, audio)  # inputs positive: relu transparent


class TestDatasetFiles:
    def test_roundtrip_and_determinism(self, tmp_path):
        count = generate_dataset(SMALL, 10, tmp_path / "a")
        assert count == 10
        generate_dataset(SMALL, 10, tmp_path / "b")
        for rel in sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file()):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        ds = load_dataset(tmp_path / "a")
        assert len(ds.records) == 10
        world = make_world(SMALL)
        scene = sample_scene(world, 3)
        assert np.array_equal(ds.records[3].gt_mask, scene.gt_mask)
        assert np.allclose(ds.records[3].audio, scene.audio, atol=1e-6)

    def test_manifest_format(self, tmp_path):
        generate_dataset(SMALL, 3, tmp_path)
        lines = (tmp_path / "manifest.tsv").read_text().splitlines()
        assert len(lines) == 3
        fields = lines[0].split("\t")
        assert len(fields) == 5
        assert fields[0] == "0"
        assert fields[2].endswith(".ppm")
        assert fields[3].endswith(".pgm")
        assert fields[4].endswith(".avt1")

    def test_balanced_batches(self, tmp_path):
        generate_dataset(SMALL, 40, tmp_path)
        ds = load_dataset(tmp_path)
        idx = sample_batch(ds, 8, make_rng("bt", 0))
        labels = [ds.records[i].class_id for i in idx]
        assert sorted(np.bincount(labels, minlength=4)) == [2, 2, 2, 2]
