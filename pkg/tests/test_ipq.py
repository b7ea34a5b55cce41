import numpy as np
import pytest

from qnz.datasets import gen_classify
from qnz.ipq import (
    IpqConfig,
    combine_with_int8,
    distill_loss,
    distill_loss_grad,
    layer_report,
    layer_report_csv,
    output_mse,
    quantize_iterative,
    quantize_one_shot,
    to_model,
)
from qnz.numerics import Rng, frobenius_sq
from qnz.quant_pq import finetune_centroids, reconstruct, split_blocks, storage_bits
from qnz.train_core import TrainConfig, build_residual_mlp, forward, train

TOY_BLOCKS = {"input": 2, "ffn": 4, "classifier": 4, "embedding": 2}


def _trained_net(seed, width=16, blocks=1, epochs=10):
    ds = gen_classify(Rng(seed), n_train=600, n_val=300)
    net = build_residual_mlp(2, width, blocks, 10, Rng(seed))
    train(net, ds, TrainConfig(lr=0.05, epochs=epochs, batch_size=32, seed=seed))
    return net, ds


def _cfg(**kw):
    base = dict(k=4, block_sizes=TOY_BLOCKS, finetune_steps=0, finetune_lr=5e-3, batch_size=32)
    base.update(kw)
    return IpqConfig(**base)


class TestDistillLoss:
    def test_identical_is_zero(self):
        a = np.ones((2, 2), np.float32)
        assert distill_loss(a, a) == 0.0

    def test_unit_gap(self):
        s = np.zeros((2, 2), np.float32)
        t = np.ones((2, 2), np.float32)
        assert distill_loss(s, t) == 1.0

    def test_gradient_finite_differences(self):
        r = Rng(1)
        s = r.normal(12).reshape(3, 4)
        t = r.normal(12).reshape(3, 4)
        _, grad = distill_loss_grad(s, t)
        eps = 1e-3
        worst = 0.0
        for idx in np.ndindex(s.shape):
            sp = s.copy()
            sp[idx] += eps
            sm = s.copy()
            sm[idx] -= eps
            fd = (distill_loss(sp, t) - distill_loss(sm, t)) / (2 * eps)
            worst = max(worst, abs(fd - grad[idx]) / max(abs(fd), 1e-8))
        assert worst < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            distill_loss(np.zeros((2, 2)), np.zeros((2, 3)))


class TestOneShot:
    def test_lossless_when_k_covers(self):
        net, ds = _trained_net(0, epochs=2)
        cnet = quantize_one_shot(net, _cfg(k=512), Rng(5))
        x = ds.x_val[:64]
        assert np.allclose(forward(cnet.net, x).logits, forward(net, x).logits, atol=1e-6)

    def test_reconstruction_error_equals_objective(self):
        net, _ = _trained_net(1, epochs=2)
        cnet = quantize_one_shot(net, _cfg(k=4), Rng(6))
        for store in net.stores():
            lq = cnet.quantized[store.name]
            recon = reconstruct(lq.codebook, lq.indices, lq.layout)
            assert frobenius_sq(store.weight, recon) == pytest.approx(lq.objective, rel=1e-5)

    def test_total_bits_sum(self):
        net, _ = _trained_net(2, epochs=2)
        cnet = quantize_one_shot(net, _cfg(k=8), Rng(7))
        rows = layer_report(cnet)
        expected = sum(
            storage_bits(lq.codebook.k, lq.codebook.d, lq.layout.m, lq.layout.q, lq.layout.shape[0])
            for lq in cnet.quantized.values()
        )
        assert sum(r["bits"] for r in rows) == expected

    def test_report_csv_deterministic(self):
        net, _ = _trained_net(3, epochs=2)
        cnet = quantize_one_shot(net, _cfg(k=4), Rng(8))
        assert layer_report_csv(cnet) == layer_report_csv(cnet)
        assert layer_report_csv(cnet).startswith("layer,k,d,objective,bits")


class TestIterative:
    def test_zero_steps_reduces_to_one_shot(self):
        net, ds = _trained_net(4, epochs=3)
        one = quantize_one_shot(net, _cfg(), Rng(11))
        it = quantize_iterative(net, net, _cfg(), ds, Rng(11))
        for a, b in zip(one.net.stores(), it.net.stores()):
            assert np.array_equal(a.weight, b.weight)
            assert np.array_equal(a.bias, b.bias)

    def test_assignments_frozen_during_finetune(self):
        net, ds = _trained_net(5, epochs=3)
        cfg = _cfg(finetune_steps=10)
        before = quantize_one_shot(net, _cfg(), Rng(12))
        after = quantize_iterative(net, net, cfg, ds, Rng(12))
        # First store in order is quantized from identical weights and rng;
        # finetuning afterwards moves only its centroids, never its indices.
        first = after.order[0]
        assert np.array_equal(after.quantized[first].indices, before.quantized[first].indices)
        assert not np.array_equal(
            after.quantized[first].codebook.centroids, before.quantized[first].codebook.centroids
        )
        # Every quantized weight stays an exact gather of its frozen indices.
        for name, lq in after.quantized.items():
            store = after.store(name)
            assert np.array_equal(store.weight, reconstruct(lq.codebook, lq.indices, lq.layout))

    def test_single_store_net_runs(self):
        from qnz.train_core import Layer, Network, ParamStore

        w = Rng(13).normal(8).reshape(4, 2).astype(np.float32)
        net = Network([], Layer(ParamStore("head", w, np.zeros(2, np.float32), kind="classifier")))
        ds = gen_classify(Rng(13), n_train=64, n_val=32)
        x = np.tile(ds.x_train, (1, 2)).astype(np.float32)  # widen to 4 features
        from qnz.train_core import Dataset

        ds4 = Dataset(x, ds.y_train % 2, x[:32], (ds.y_train % 2)[:32])
        cnet = quantize_iterative(net, net, _cfg(finetune_steps=3), ds4, Rng(14))
        assert set(cnet.quantized) == {"head"}

    def test_drift_reduction_three_layer(self):
        ones, its = [], []
        for seed in (0, 1, 2):
            net, ds = _trained_net(seed, width=16, blocks=1, epochs=10)
            cfg = _cfg(finetune_steps=60)
            one = quantize_one_shot(net, _cfg(), Rng(seed + 100))
            it = quantize_iterative(net, net, cfg, ds, Rng(seed + 100))
            ones.append(output_mse(one.net, net, ds.x_val))
            its.append(output_mse(it.net, net, ds.x_val))
        assert np.median(its) <= np.median(ones)

    def test_monotone_centroid_step(self):
        # One mean-gradient centroid step at lr=1e-4 computed on a batch does
        # not increase the distillation loss on that batch.
        net, ds = _trained_net(6, width=16, blocks=1, epochs=5)
        cnet = quantize_one_shot(net, _cfg(), Rng(20))
        x = ds.x_train[:64]
        teacher_logits = forward(net, x).logits

        from qnz.ipq import distill_loss_grad
        from qnz.train_core import backward_ste

        cache = forward(cnet.net, x, mode="train")
        loss_before, dlogits = distill_loss_grad(cache.logits, teacher_logits)
        grads = backward_ste(cnet.net, cache, dlogits)
        for store in cnet.net.stores():
            lq = cnet.quantized[store.name]
            gw = grads[store.name][0]
            block_grads = split_blocks(np.asarray(gw, np.float32), lq.layout)
            lq.codebook = finetune_centroids(lq.codebook, lq.flat_indices, block_grads, lr=1e-4)
            store.weight[:] = reconstruct(lq.codebook, lq.indices, lq.layout)
        loss_after = distill_loss(forward(cnet.net, x).logits, teacher_logits)
        assert loss_after <= loss_before + 1e-12

    def test_order_override(self):
        net, ds = _trained_net(7, epochs=2)
        names = [s.name for s in net.stores()]
        cfg = _cfg(order=tuple(reversed(names)))
        cnet = quantize_iterative(net, net, cfg, ds, Rng(21))
        assert cnet.order == tuple(reversed(names))

    def test_order_must_be_permutation(self):
        net, ds = _trained_net(8, epochs=2)
        with pytest.raises(ValueError):
            quantize_iterative(net, net, _cfg(order=("head",)), ds, Rng(22))


class TestCombineInt8:
    def test_grid_aligned_codebooks_unchanged(self):
        net, ds = _trained_net(9, epochs=2)
        cnet = quantize_one_shot(net, _cfg(), Rng(23))
        once = combine_with_int8(cnet)  # snaps centroids to the int8 grid
        x = ds.x_val[:32]
        before = forward(once.net, x).logits
        twice = combine_with_int8(once)  # already on-grid: nothing moves
        assert np.array_equal(forward(twice.net, x).logits, before)

    def test_activation_params_frozen(self):
        net, ds = _trained_net(10, epochs=2)
        cnet = quantize_one_shot(net, _cfg(), Rng(24))
        combined = combine_with_int8(cnet, calib_batches=[ds.x_train[:32], ds.x_train[32:64]])
        assert combined.net.activation_params is not None
        assert len(combined.net.activation_params) == len(combined.net.all_layers())

    def test_centroid_payload_shrinks_4x(self):
        from qnz.model_store import _tensor_record

        net, _ = _trained_net(11, epochs=2)
        cnet = quantize_one_shot(net, _cfg(k=16), Rng(25))
        fp = to_model(cnet)
        i8 = to_model(combine_with_int8(cnet))
        for name, lq in cnet.quantized.items():
            k, d = lq.codebook.k, lq.codebook.d
            fp_len = len(_tensor_record(name, fp[name]))
            i8_len = len(_tensor_record(name, i8[name]))
            assert fp_len - i8_len == k * d * 4 - (k * d + 16)  # float32 -> codes + params

    def test_int8_model_scheme(self):
        from qnz.tensors import SCHEME_PQ_INT8

        net, _ = _trained_net(12, epochs=2)
        cnet = combine_with_int8(quantize_one_shot(net, _cfg(), Rng(26)))
        model = to_model(cnet)
        for name in cnet.quantized:
            assert model[name].scheme == SCHEME_PQ_INT8
