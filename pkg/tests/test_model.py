import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorret import model as m
from anchorret import numcore as nc
from anchorret.numcore import DegenerateVectorError, ShapeError

LANGS = ("en", "zh", "es")


@pytest.fixture(scope="module")
def params():
    return m.init_params(0)


class TestAnchors:
    def test_zero_offset_shares_anchor(self):
        cfg = m.AnchorConfig(language_offset=0.0)
        for y in range(5):
            np.testing.assert_array_equal(m.anchor_base(y, "en", cfg), m.anchor_base(y, "zh", cfg))

    def test_offset_keeps_synonyms_close(self):
        cfg = m.AnchorConfig(language_offset=0.1)
        for y in range(20):
            a, b = m.anchor_base(y, "en", cfg), m.anchor_base(y, "zh", cfg)
            assert a @ b >= 0.9
            assert not np.array_equal(a, b)

    def test_classes_nearly_orthogonal(self):
        cfg = m.AnchorConfig()
        A = m.anchor_matrix([(y, "en") for y in range(20)], cfg)
        G = A @ A.T
        off = G[~np.eye(20, dtype=bool)]
        assert np.abs(off).max() < 0.5

    def test_unknown_language(self):
        with pytest.raises(KeyError):
            m.anchor_base(0, "fr", m.AnchorConfig(), LANGS)

    def test_identity_projector(self, params):
        cfg = m.AnchorConfig(language_offset=0.0)
        config = m.ModelConfig(anchor=cfg)
        p = m.init_params(1, config)
        p["text_proj"].value[:] = np.eye(64, 32)
        u = m.anchor_base(3, "en", cfg)
        expected = u[:32] / np.linalg.norm(u[:32])
        np.testing.assert_allclose(m.encode_text(3, "en", p), expected, atol=1e-12)

    def test_text_embedding_unit_and_deterministic(self, params):
        for y in range(4):
            for lang in LANGS:
                z = m.encode_text(y, lang, params)
                assert abs(np.linalg.norm(z) - 1.0) <= 1e-9
                np.testing.assert_array_equal(z, m.encode_text(y, lang, params))

    def test_projector_gets_gradient_anchor_does_not(self, params):
        p = params.copy()
        anchors = m.anchor_matrix([(0, "en"), (1, "zh")], p.config.anchor)
        before = anchors.copy()
        z = m.project_anchors(anchors, p)
        nc.backward(nc.total(z))
        assert np.abs(p["text_proj"].grad).sum() > 0
        np.testing.assert_array_equal(anchors, before)


class TestVisual:
    def test_unit_output(self, params):
        rng = np.random.default_rng(0)
        V = m.encode_images(rng.uniform(size=(5, 24, 72)), params)
        assert V.shape == (5, 32)
        np.testing.assert_allclose(np.linalg.norm(V, axis=1), 1.0, atol=1e-9)

    def test_zero_image_zero_bias_is_degenerate(self, params):
        with pytest.raises(DegenerateVectorError):
            m.encode_image(np.zeros((24, 72)), params)

    def test_noise_variants_finite(self, params):
        rng = np.random.default_rng(1)
        base = rng.uniform(size=(24, 72))
        v1 = m.encode_image(np.clip(base + rng.normal(0, 0.05, base.shape), 0, 1), params)
        v2 = m.encode_image(np.clip(base + rng.normal(0, 0.05, base.shape), 0, 1), params)
        assert np.isfinite(v1 @ v2)

    def test_pool_means(self):
        cfg = m.ModelConfig()
        img = np.zeros((24, 72))
        img[:4, :4] = 1.0
        pooled = m.pool_images(img, cfg)
        assert pooled.shape == (1, 108)
        assert pooled[0, 0] == 1.0 and pooled[0, 1:].sum() == 0.0

    def test_wrong_canvas(self, params):
        with pytest.raises(ShapeError):
            m.encode_images(np.ones((2, 20, 72)), params)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_random_images_unit(self, seed):
        p = m.init_params(seed % 7)
        img = np.random.default_rng(seed).uniform(size=(24, 72))
        assert abs(np.linalg.norm(m.encode_image(img, p)) - 1.0) <= 1e-9


class TestParams:
    def test_same_seed_same_params(self):
        a, b = m.init_params(5), m.init_params(5)
        for k, v in a.arrays().items():
            np.testing.assert_array_equal(v, b.arrays()[k])

    def test_initial_temperature(self, params):
        assert params.tau == pytest.approx(0.07, abs=1e-15)

    def test_shapes(self, params):
        assert params["vis_w1"].shape == (108, 64)
        assert params["vis_w2"].shape == (64, 64)
        assert params["vis_w3"].shape == (64, 32)
        assert params["text_proj"].shape == (64, 32)
        assert params["vis_b1"].shape == (64,)

    def test_temperature_clamp(self):
        p = m.init_params(0)
        p["log_temperature"].value[:] = 5.0
        p.clamp_temperature()
        assert p.tau == pytest.approx(1.0)
        p["log_temperature"].value[:] = -20.0
        p.clamp_temperature()
        assert p.tau == pytest.approx(0.01)

    def test_bad_tensor_shape(self):
        arrays = m.init_params(0).arrays()
        arrays["vis_w1"] = np.zeros((3, 3))
        with pytest.raises(ShapeError):
            m.ModelParams(m.ModelConfig(), arrays)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, params):
        m.save_checkpoint(params, tmp_path / "a.ckpt", extra={"stage": "pretrain"})
        loaded = m.load_checkpoint(tmp_path / "a.ckpt")
        assert loaded.config == params.config
        for k, v in params.arrays().items():
            np.testing.assert_array_equal(loaded[k].value, v)
        header, _ = m.read_checkpoint_header(tmp_path / "a.ckpt")
        assert header["anchor_seed"] == 1234
        assert header["extra"] == {"stage": "pretrain"}

    def test_no_overwrite(self, tmp_path, params):
        m.save_checkpoint(params, tmp_path / "a.ckpt")
        with pytest.raises(FileExistsError):
            m.save_checkpoint(params, tmp_path / "a.ckpt")

    def test_truncated(self, tmp_path, params):
        path = tmp_path / "a.ckpt"
        m.save_checkpoint(params, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            m.load_checkpoint(path)

    def test_config_json(self):
        cfg = m.ModelConfig(anchor=m.AnchorConfig(language_offset=0.05), hidden=32)
        assert m.ModelConfig.from_json(cfg.to_json()) == cfg
        assert math.isclose(cfg.tau_init, 0.07)
