"""Stub encoder behavior and the backbone registry."""

import numpy as np
import pytest

from viewsel_extractor import backbones
from viewsel_extractor.backbones import (
    StubBackbone,
    get_backbone,
    register_backbone,
    registered_backbones,
)
from viewsel_extractor.errors import ConfigError


def make_batch(n=3, size=224, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, size, size, 3)).astype(np.float32)


class TestStubBackbone:
    def test_spec(self):
        spec = StubBackbone().spec
        assert spec.name == "stub16"
        assert spec.dim == 16
        assert spec.supported_sizes == (224,)
        assert len(spec.mean) == len(spec.std) == 3

    def test_output_shape_and_dtype(self):
        out = StubBackbone().embed(make_batch(5))
        assert out.shape == (5, 16)
        assert out.dtype == np.float32

    def test_deterministic_across_instances(self):
        batch = make_batch()
        a = StubBackbone().embed(batch)
        b = StubBackbone().embed(batch)
        assert a.tobytes() == b.tobytes()

    def test_batch_matches_single_image(self):
        batch = make_batch(4)
        backbone = StubBackbone()
        together = backbone.embed(batch)
        for i in range(4):
            single = backbone.embed(batch[i : i + 1])[0]
            np.testing.assert_allclose(together[i], single, rtol=0, atol=1e-5)

    def test_pooling_is_block_mean(self):
        # replace each block with its mean; an affine map of block means
        # cannot tell the two images apart
        backbone = StubBackbone()
        batch = make_batch(2)
        block = 224 // StubBackbone.GRID
        pooled = batch.reshape(2, 8, block, 8, block, 3).mean(axis=(2, 4))
        flattened = np.repeat(np.repeat(pooled, block, axis=1), block, axis=2)
        np.testing.assert_allclose(
            backbone.embed(batch), backbone.embed(flattened), rtol=0, atol=1e-4
        )

    def test_affine_in_the_input(self):
        backbone = StubBackbone()
        x, y = make_batch(1, seed=1), make_batch(1, seed=2)
        lhs = backbone.embed(x + y)
        rhs = backbone.embed(x) + backbone.embed(y)
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-4)
        np.testing.assert_allclose(
            backbone.embed(2.0 * x), 2.0 * backbone.embed(x), rtol=0, atol=1e-4
        )

    def test_rejects_wrong_rank(self):
        with pytest.raises(ConfigError, match=r"\(N, S, S, 3\)"):
            StubBackbone().embed(np.zeros((224, 224, 3), dtype=np.float32))

    def test_rejects_wrong_channels(self):
        with pytest.raises(ConfigError, match=r"\(N, S, S, 3\)"):
            StubBackbone().embed(np.zeros((1, 224, 224, 4), dtype=np.float32))

    def test_rejects_unsupported_size(self):
        with pytest.raises(ConfigError, match="supports input sizes"):
            StubBackbone().embed(np.zeros((1, 518, 518, 3), dtype=np.float32))

    def test_rejects_non_square(self):
        with pytest.raises(ConfigError, match="supports input sizes"):
            StubBackbone().embed(np.zeros((1, 224, 112, 3), dtype=np.float32))


class TestRegistry:
    def test_stub_is_registered(self):
        assert "stub16" in registered_backbones()
        assert get_backbone("stub16").spec.dim == 16

    def test_unknown_name_lists_registered(self):
        with pytest.raises(ConfigError, match="stub16"):
            get_backbone("resnet50")

    def test_duplicate_registration_rejected(self):
        with pytest.raises(ConfigError, match="already registered"):
            register_backbone("stub16", StubBackbone)

    def test_overwrite_and_new_names(self, monkeypatch):
        monkeypatch.setattr(backbones, "_REGISTRY", dict(backbones._REGISTRY))
        register_backbone("stub16", StubBackbone, overwrite=True)
        register_backbone("other", StubBackbone)
        assert "other" in registered_backbones()
