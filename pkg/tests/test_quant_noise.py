import numpy as np
import pytest

from qnz.numerics import Rng
from qnz.quant_noise import (
    BlockMask,
    NoiseSpec,
    apply_noise,
    apply_spec,
    codeword_noise,
    compose,
    intn_noise,
    layerdrop_mask,
    qat_spec,
    select_blocks,
    zero_noise,
)
from qnz.quant_pq import BlockLayout, Codebook
from qnz.quant_scalar import QuantParams, calibrate_minmax, dequantize_intn, quantize_tensor


def _rand(seed, shape):
    return Rng(seed).normal(shape[0] * shape[1]).reshape(shape).astype(np.float32)


def _full_mask(layout):
    return BlockMask(layout, np.ones((layout.m, layout.q), bool))


def _empty_mask(layout):
    return BlockMask(layout, np.zeros((layout.m, layout.q), bool))


class TestNoiseSpec:
    def test_rejects_unknown_kind(self):
        with pytest.raises(ValueError):
            NoiseSpec(kind="dropout", rate=0.5)

    def test_rate_range(self):
        with pytest.raises(ValueError):
            NoiseSpec(kind="intn", rate=1.5)

    def test_ste_contract(self):
        with pytest.raises(ValueError):
            NoiseSpec(kind="layerdrop", rate=0.2)  # ste defaults True
        with pytest.raises(ValueError):
            NoiseSpec(kind="intn", rate=0.2, ste=False)
        NoiseSpec(kind="layerdrop", rate=0.2, ste=False)

    def test_qat_is_rate_one(self):
        spec = qat_spec(4)
        assert spec.rate == 1.0 and spec.kind == "intn" and spec.bits == 4


class TestSelectBlocks:
    def test_degenerate_rates(self):
        layout = BlockLayout.fit(8, 8, 2, 1)
        assert not select_blocks(layout, 0.0, Rng(0)).selected.any()
        assert select_blocks(layout, 1.0, Rng(0)).selected.all()

    def test_fraction(self):
        layout = BlockLayout.fit(100_000, 1, 1, 1)
        mask = select_blocks(layout, 0.5, Rng(5))
        assert abs(mask.selected.mean() - 0.5) < 0.01

    def test_fresh_draw_per_call(self):
        layout = BlockLayout.fit(32, 4, 2, 1)
        rng = Rng(2)
        a = select_blocks(layout, 0.5, rng)
        b = select_blocks(layout, 0.5, rng)
        assert not np.array_equal(a.selected, b.selected)


class TestApplyNoise:
    def test_empty_mask_identity(self):
        w = _rand(1, (8, 4))
        layout = BlockLayout.fit(8, 4, 4, 1)
        out = apply_noise(w, _empty_mask(layout), zero_noise)
        assert np.array_equal(out, w)

    def test_full_proxy_zeroes(self):
        w = _rand(2, (8, 4))
        layout = BlockLayout.fit(8, 4, 2, 1)
        assert not apply_noise(w, _full_mask(layout), zero_noise).any()

    def test_full_intn_equals_quantize_dequantize(self):
        w = _rand(3, (16, 8))
        q = calibrate_minmax(w, 8)
        layout = BlockLayout.fit(16, 8, 1, 1)
        noised = apply_noise(w, _full_mask(layout), lambda b: intn_noise(b, q))
        roundtrip = dequantize_intn(quantize_tensor(w, q))
        assert np.array_equal(noised, roundtrip)

    def test_unselected_blocks_untouched(self):
        w = _rand(4, (12, 6))
        layout = BlockLayout.fit(12, 6, 3, 1)
        mask = select_blocks(layout, 0.5, Rng(9))
        out = apply_noise(w, mask, zero_noise)
        sel = np.repeat(mask.selected, 3, axis=0)
        assert np.array_equal(out[~sel], w[~sel])
        assert not out[sel].any()


class TestNoiseFunctions:
    def test_intn_zero_fixed(self):
        q = QuantParams(scale=2 / 255, zero_point=-128, bits=8)
        assert intn_noise(np.zeros((3, 1)), q).ravel().tolist() == [0.0, 0.0, 0.0]

    def test_intn_plugin_value(self):
        q = QuantParams(scale=2 / 255, zero_point=-128, bits=8)
        out = intn_noise(np.array([[0.5]]), q)
        assert out[0, 0] == pytest.approx(128 / 255, rel=1e-12)

    def test_intn_grid_aligned_unchanged(self):
        q = QuantParams(scale=0.5, zero_point=-4, bits=4)
        block = np.array([[-2.0, -0.5, 0.0, 1.5]])
        assert np.array_equal(intn_noise(block, q), block)

    def test_codeword_exact_member(self):
        cb = Codebook(np.array([[0, 0], [4, 4]], np.float32))
        out = codeword_noise(np.array([[4.0, 4.0]], np.float32), cb)
        assert np.array_equal(out[0], [4.0, 4.0])

    def test_codeword_nearest(self):
        cb = Codebook(np.array([[0, 0], [4, 4]], np.float32))
        out = codeword_noise(np.array([[1.0, 1.0]], np.float32), cb)
        assert np.array_equal(out[0], [0.0, 0.0])

    def test_codeword_range_membership(self):
        cb = Codebook(_rand(7, (8, 4)))
        blocks = _rand(8, (64, 4))
        out = codeword_noise(blocks, cb)
        rows = {tuple(r) for r in out.tolist()}
        members = {tuple(r) for r in cb.centroids.tolist()}
        assert rows <= members


class TestCompose:
    def test_identity_component(self):
        w = _rand(10, (8, 4))
        layout = BlockLayout.fit(8, 4, 2, 1)
        mask = select_blocks(layout, 0.6, Rng(3))
        alone = apply_noise(w, mask, zero_noise)
        with_identity = apply_noise(apply_noise(w, _empty_mask(layout), zero_noise), mask, zero_noise)
        assert np.array_equal(alone, with_identity)

    def test_proxy_then_intn_zeroes(self):
        w = _rand(11, (8, 4))
        q = calibrate_minmax(w, 8)  # contains negatives, so level 0 is in range
        phi = compose(zero_noise, lambda b: intn_noise(b, q))
        layout = BlockLayout.fit(8, 4, 4, 1)
        out = apply_noise(w, _full_mask(layout), phi)
        assert not out.any()

    def test_order_swap_same_mask(self):
        w = _rand(12, (8, 4))
        q = calibrate_minmax(w, 8)
        layout = BlockLayout.fit(8, 4, 2, 1)
        mask = select_blocks(layout, 0.5, Rng(8))
        a = apply_noise(w, mask, compose(zero_noise, lambda b: intn_noise(b, q)))
        b = apply_noise(w, mask, compose(lambda b: intn_noise(b, q), zero_noise))
        assert np.array_equal(a, b)


class TestApplySpec:
    def test_rate_zero_identity(self):
        w = _rand(13, (8, 8))
        out = apply_spec(w, NoiseSpec("intn", 0.0, bits=8), Rng(0))
        assert np.array_equal(out, w)

    def test_full_rate_proxy(self):
        w = _rand(14, (8, 8))
        out = apply_spec(w, NoiseSpec("pq_proxy", 1.0, block_size=4), Rng(0))
        assert not out.any()

    def test_pq_exact_needs_codebook(self):
        with pytest.raises(ValueError):
            apply_spec(_rand(15, (8, 8)), NoiseSpec("pq_exact", 0.5, block_size=4), Rng(0))

    def test_layerdrop_rejected(self):
        with pytest.raises(ValueError):
            apply_spec(_rand(16, (8, 8)), NoiseSpec("layerdrop", 0.5, ste=False), Rng(0))


class TestLayerdropMask:
    def test_degenerate(self):
        assert not layerdrop_mask(10, 0.0, Rng(0)).any()
        assert layerdrop_mask(10, 1.0, Rng(0)).all()

    def test_fraction(self):
        mask = layerdrop_mask(100_000, 0.2, Rng(4))
        assert abs(mask.mean() - 0.2) < 0.01
