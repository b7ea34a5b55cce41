import numpy as np
import pytest

from qnz.numerics import Rng, frobenius_sq
from qnz.quant_pq import (
    BlockLayout,
    Codebook,
    assign,
    compress_centroids_int8,
    finetune_centroids,
    index_bits,
    join_blocks,
    kmeans_fit,
    layout_for,
    pq_compress,
    reconstruct,
    split_blocks,
    storage_bits,
)
from qnz.tensors import dequantize_tensor


def _rand(seed, shape):
    return Rng(seed).normal(shape[0] * shape[1]).reshape(shape).astype(np.float32)


class TestBlocks:
    def test_column_split_example(self):
        w = np.array([[1.0], [2.0], [3.0], [4.0]], np.float32)
        layout = BlockLayout.fit(4, 1, 2, 1)
        sub = split_blocks(w, layout)
        assert np.array_equal(sub, np.array([[1, 2], [3, 4]], np.float32))

    def test_join_inverts_split(self):
        w = _rand(1, (12, 6))
        for br, bc in ((2, 1), (3, 2), (4, 3), (12, 6)):
            layout = BlockLayout.fit(12, 6, br, bc)
            assert np.array_equal(join_blocks(split_blocks(w, layout), layout), w)

    def test_counts(self):
        layout = BlockLayout.fit(8, 4, 4, 1)
        assert (layout.m, layout.q) == (2, 4)
        sub = split_blocks(_rand(2, (8, 4)), layout)
        assert sub.shape == (8, 4)

    def test_non_divisible_is_error(self):
        with pytest.raises(ValueError):
            BlockLayout.fit(10, 4, 4, 1)
        with pytest.raises(ValueError):
            BlockLayout.fit(8, 5, 4, 2)

    def test_registry_defaults(self):
        assert layout_for("ffn", 16, 4).block_rows == 8
        assert layout_for("attention", 16, 4).block_rows == 4
        assert layout_for("embedding", 16, 4).block_rows == 8


def _exhaustive_two_means(sub):
    """Best objective over every assignment of blocks to two clusters."""
    best = np.inf
    n = sub.shape[0]
    s64 = sub.astype(np.float64)
    for mask in range(2**n):
        bits = [(mask >> i) & 1 for i in range(n)]
        obj = 0.0
        for side in (0, 1):
            members = s64[[i for i in range(n) if bits[i] == side]]
            if len(members):
                c = members.mean(axis=0)
                obj += float(((members - c) ** 2).sum())
        best = min(best, obj)
    return best


class TestKMeans:
    def test_two_point_clusters(self):
        sub = np.array([[0, 0], [0, 0], [4, 4], [4, 4]], np.float32)
        res = kmeans_fit(sub, 2, rng=Rng(0))
        assert res.objective == pytest.approx(0.0, abs=1e-12)
        cents = {tuple(c) for c in res.codebook.centroids.tolist()}
        assert cents == {(0.0, 0.0), (4.0, 4.0)}

    def test_k_at_least_distinct_values_is_lossless(self):
        sub = np.array([[1, 0], [2, 0], [3, 0]], np.float32)
        res = kmeans_fit(sub, 5, rng=Rng(1))
        assert res.objective == pytest.approx(0.0, abs=1e-12)

    def test_exhaustive_oracle_or_local_optimum(self):
        hits = 0
        for seed in range(30):
            sub = _rand(100 + seed, (8, 2))
            res = kmeans_fit(sub, 2, rng=Rng(seed))
            best = _exhaustive_two_means(sub)
            assert res.objective >= best - 1e-9
            if res.objective <= best + 1e-9:
                hits += 1
            else:
                # Certified local optimum: every block nearest-assigned.
                fresh = assign(sub, res.codebook)
                assert np.array_equal(fresh, res.assignments)
        assert hits >= 8  # single-restart seeding still lands the optimum often

    def test_objective_non_increasing(self):
        for seed in range(100):
            sub = _rand(500 + seed, (24, 4))
            res = kmeans_fit(sub, 4, rng=Rng(seed), iters=15)
            diffs = np.diff(res.history)
            assert np.all(diffs <= 1e-12)

    def test_final_assignment_is_nearest(self):
        for seed in range(10):
            sub = _rand(700 + seed, (32, 3))
            res = kmeans_fit(sub, 5, rng=Rng(seed))
            assert np.array_equal(assign(sub, res.codebook), res.assignments)

    def test_empty_cluster_repair(self):
        # More centroids than occupied regions forces empties at some point.
        sub = np.array([[0.0, 0.0]] * 7 + [[9.0, 9.0]], np.float32)
        res = kmeans_fit(sub, 4, rng=Rng(3))
        assert res.objective == pytest.approx(0.0, abs=1e-10)

    def test_validation(self):
        with pytest.raises(ValueError):
            kmeans_fit(np.zeros((0, 2), np.float32), 2, rng=Rng(0))
        with pytest.raises(ValueError):
            kmeans_fit(np.zeros((4, 2), np.float32), 0, rng=Rng(0))


class TestAssign:
    def test_exact_centroid(self):
        cb = Codebook(np.array([[0, 0], [1, 1], [2, 2], [3, 3]], np.float32))
        assert assign(np.array([[3.0, 3.0]], np.float32), cb)[0] == 3

    def test_distance_example(self):
        cb = Codebook(np.array([[0, 0], [4, 4]], np.float32))
        assert assign(np.array([[1.0, 1.0]], np.float32), cb)[0] == 0

    def test_tie_breaks_low_index(self):
        cb = Codebook(np.array([[0.0], [2.0]], np.float32))
        assert assign(np.array([[1.0]], np.float32), cb)[0] == 0

    def test_dim_mismatch(self):
        cb = Codebook(np.array([[0.0, 0.0]], np.float32))
        with pytest.raises(ValueError):
            assign(np.array([[1.0]], np.float32), cb)


class TestReconstruct:
    def test_lossless_roundtrip(self):
        w = np.tile(np.array([[1.0, 2.0], [3.0, 4.0]], np.float32), (2, 2))
        layout = BlockLayout.fit(4, 4, 2, 1)
        ct, obj = pq_compress(w, layout, k=8, rng=Rng(0))
        assert obj == pytest.approx(0.0, abs=1e-10)
        assert np.array_equal(dequantize_tensor(ct), w)

    def test_all_indices_zero(self):
        cb = Codebook(np.array([[1.0, 2.0], [9.0, 9.0]], np.float32))
        layout = BlockLayout.fit(4, 3, 2, 1)
        out = reconstruct(cb, np.zeros((2, 3), np.int32), layout)
        assert np.array_equal(out, np.tile(np.array([[1.0], [2.0]], np.float32), (2, 3)))

    def test_frobenius_matches_objective(self):
        w = _rand(9, (16, 8))
        layout = BlockLayout.fit(16, 8, 4, 1)
        ct, obj = pq_compress(w, layout, k=4, rng=Rng(4))
        recon = dequantize_tensor(ct)
        assert frobenius_sq(w, recon) == pytest.approx(obj, rel=1e-5)

    def test_index_out_of_range(self):
        cb = Codebook(np.array([[0.0, 0.0]], np.float32))
        layout = BlockLayout.fit(2, 1, 2, 1)
        with pytest.raises(ValueError):
            reconstruct(cb, np.array([[5]], np.int32), layout)


class TestFinetuneCentroids:
    def test_mean_gradient_step(self):
        cb = Codebook(np.array([[1.0]], np.float32))
        grads = np.array([[0.5], [1.5]], np.float64)
        out = finetune_centroids(cb, np.array([0, 0]), grads, lr=0.1)
        assert out.centroids[0, 0] == pytest.approx(0.9, rel=1e-6)

    def test_zero_gradients_noop(self):
        cb = Codebook(_rand(10, (4, 3)))
        out = finetune_centroids(cb, np.array([0, 1, 2, 3]), np.zeros((4, 3)), lr=0.1)
        assert np.array_equal(out.centroids, cb.centroids)

    def test_unassigned_centroid_untouched(self):
        cb = Codebook(np.array([[1.0], [5.0]], np.float32))
        out = finetune_centroids(cb, np.array([0, 0]), np.array([[1.0], [1.0]]), lr=0.5)
        assert out.centroids[1, 0] == 5.0
        assert out.centroids[0, 0] == pytest.approx(0.5)


class TestInt8Centroids:
    def test_grid_aligned_exact(self):
        base = Codebook((np.arange(8, dtype=np.float32) * 0.5).reshape(4, 2))
        # Values k*0.5 are representable by scale chosen from their own range.
        out = compress_centroids_int8(base)
        assert np.allclose(out.centroids, base.centroids, atol=out.int8_params.scale / 2)

    def test_error_bound(self):
        cb = Codebook(_rand(11, (16, 4)))
        out = compress_centroids_int8(cb)
        err = np.abs(out.centroids.astype(np.float64) - cb.centroids.astype(np.float64))
        assert err.max() <= out.int8_params.scale / 2
        assert out.int8_codes.shape == (16, 4)

    def test_exact_on_int8_grid(self):
        params_scale = 0.25
        grid = (np.arange(16, dtype=np.float64).reshape(8, 2) - 4) * params_scale
        cb = Codebook(grid.astype(np.float32))
        out = compress_centroids_int8(cb)
        assert np.array_equal(out.centroids, cb.centroids)


class TestStorageBits:
    def test_plugin_example(self):
        assert storage_bits(256, 8, 128, 1024, 1024) == 1_073_152

    def test_int8_indices(self):
        assert index_bits(256) == 8

    def test_degenerate_k1(self):
        assert storage_bits(1, 1, 1, 1, 1) == 16

    def test_index_bits_non_power_of_two(self):
        assert index_bits(1) == 0
        assert index_bits(2) == 1
        assert index_bits(3) == 2
        assert index_bits(1024) == 10

    def test_validation(self):
        with pytest.raises(ValueError):
            storage_bits(0, 8, 1, 1, 1)
