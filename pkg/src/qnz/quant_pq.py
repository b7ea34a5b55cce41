"""Product quantization of weight matrices.

A matrix is tiled into m x q equally shaped blocks; each block, flattened to
a d-dimensional subvector, is encoded as the index of its nearest codeword in
a K-entry codebook learned by k-means. Storage needs 8*K*d bits for int8
centroids, ceil(log2 K) bits per index, and 8 bits per activation entry for
an int8 forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, as_matrix, matmul
from .quant_scalar import QuantParams, calibrate_minmax, quant_levels
from .tensors import SCHEME_PQ, SCHEME_PQ_INT8, CompressedTensor

KMEANS_DEFAULT_ITERS = 15
KMEANS_REL_TOL = 1e-6
DEFAULT_K = 256

# Block size (subvector dim) per layer kind; columns are always split,
# mirroring wider blocks for fully-connected layers than for attention-like
# ones. Overridable per layer in any config that carries layouts.
DEFAULT_BLOCK_SIZES = {
    "ffn": 8,
    "embedding": 8,
    "attention": 4,
    "classifier": 4,
}


@dataclass(frozen=True)
class BlockLayout:
    """Tiling of a rows x cols matrix into m x q blocks of block_rows x block_cols."""

    block_rows: int
    block_cols: int
    m: int
    q: int

    def __post_init__(self):
        if min(self.block_rows, self.block_cols, self.m, self.q) < 1:
            raise ValueError("layout dimensions must be positive")

    @classmethod
    def fit(cls, rows: int, cols: int, block_rows: int, block_cols: int = 1) -> "BlockLayout":
        if rows % block_rows or cols % block_cols:
            raise ValueError(
                f"block {block_rows}x{block_cols} does not divide matrix {rows}x{cols}"
            )
        return cls(block_rows, block_cols, rows // block_rows, cols // block_cols)

    @property
    def d(self) -> int:
        return self.block_rows * self.block_cols

    @property
    def n_blocks(self) -> int:
        return self.m * self.q

    @property
    def shape(self) -> tuple[int, int]:
        return (self.m * self.block_rows, self.q * self.block_cols)


def layout_for(kind: str, rows: int, cols: int, block_size: int | None = None) -> BlockLayout:
    """Column-split layout for a layer kind, using the registry default size."""
    size = DEFAULT_BLOCK_SIZES.get(kind, 8) if block_size is None else block_size
    return BlockLayout.fit(rows, cols, size, 1)


def split_blocks(w: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """Subvectors of ``w``, shape (m*q, d), column-major over blocks.

    Subvector j*m + i is block (i, j) flattened row-major; join_blocks is the
    exact inverse.
    """
    w = as_matrix(w)
    if w.shape != layout.shape:
        raise ValueError(f"layout {layout.shape} does not match matrix {w.shape}")
    br, bc, m, q = layout.block_rows, layout.block_cols, layout.m, layout.q
    t = w.reshape(m, br, q, bc).transpose(2, 0, 1, 3)
    return np.ascontiguousarray(t.reshape(m * q, br * bc))


def join_blocks(subvectors: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """Inverse of split_blocks."""
    br, bc, m, q = layout.block_rows, layout.block_cols, layout.m, layout.q
    sub = np.asarray(subvectors, dtype=np.float32)
    if sub.shape != (m * q, br * bc):
        raise ValueError(f"expected {(m * q, br * bc)} subvectors, got {sub.shape}")
    t = sub.reshape(q, m, br, bc).transpose(1, 2, 0, 3)
    return np.ascontiguousarray(t.reshape(m * br, q * bc))


@dataclass
class Codebook:
    """K centroids of dimension d, optionally carrying an int8 form.

    When the int8 form is present, ``centroids`` holds the dequantized
    values, so reconstruction and serialization agree bit for bit.
    """

    centroids: np.ndarray
    int8_codes: np.ndarray | None = None
    int8_params: QuantParams | None = None

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float32)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError("centroids must be a (K, d) array with K >= 1")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(subvectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, (B, K), float64."""
    s = np.asarray(subvectors, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    cross = matmul(s, c.T)
    d2 = (s * s).sum(axis=1)[:, None] - 2.0 * cross + (c * c).sum(axis=1)[None, :]
    return d2


def assign(subvectors: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-codeword index per subvector; ties break to the lowest index."""
    sub = np.asarray(subvectors, dtype=np.float32)
    if sub.ndim != 2 or sub.shape[1] != codebook.d:
        raise ValueError(f"subvector dim {sub.shape} does not match codebook d={codebook.d}")
    return np.argmin(_sq_dists(sub, codebook.centroids), axis=1).astype(np.int32)


def _objective(subvectors: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> float:
    diff = subvectors.astype(np.float64) - centroids[assignments].astype(np.float64)
    return float(np.sum(diff * diff))


def _kmeans_pp_init(sub: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    b = sub.shape[0]
    centroids = np.empty((k, sub.shape[1]), dtype=np.float32)
    first = min(int(rng.uniform(1)[0] * b), b - 1)
    centroids[0] = sub[first]
    d2 = np.sum((sub.astype(np.float64) - centroids[0].astype(np.float64)) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            centroids[j] = sub[first]  # every point already covered exactly
            continue
        idx = rng.choice_weighted(d2)
        centroids[j] = sub[idx]
        d2 = np.minimum(d2, np.sum((sub.astype(np.float64) - centroids[j].astype(np.float64)) ** 2, axis=1))
    return centroids


@dataclass
class KMeansResult:
    codebook: Codebook
    assignments: np.ndarray  # (B,) int32, nearest-centroid at return
    objective: float
    history: list[float]  # objective after init and after each Lloyd round


def kmeans_fit(
    subvectors: np.ndarray,
    k: int,
    iters: int = KMEANS_DEFAULT_ITERS,
    rng: Rng | None = None,
    tol: float = KMEANS_REL_TOL,
) -> KMeansResult:
    """Lloyd k-means with k-means++ seeding from ``rng``.

    Runs until ``iters`` rounds or relative objective improvement < tol.
    Empty clusters relocate to the subvector farthest from its current
    centroid. The returned assignment is nearest-centroid for the returned
    codebook, and the history is non-increasing.
    """
    sub = np.asarray(subvectors, dtype=np.float32)
    if sub.ndim != 2 or sub.shape[0] < 1:
        raise ValueError("need at least one subvector")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = rng if rng is not None else Rng(0)
    b = sub.shape[0]
    centroids = _kmeans_pp_init(sub, k, rng)

    dists = _sq_dists(sub, centroids)
    assignments = np.argmin(dists, axis=1).astype(np.int32)
    obj = _objective(sub, centroids, assignments)
    history = [obj]
    for _ in range(iters):
        centroids = _update_centroids(sub, centroids, assignments, dists)
        dists = _sq_dists(sub, centroids)
        assignments = np.argmin(dists, axis=1).astype(np.int32)
        obj = _objective(sub, centroids, assignments)
        history.append(obj)
        prev = history[-2]
        if prev - obj < tol * max(prev, 1e-30):
            break
    return KMeansResult(Codebook(centroids), assignments, obj, history)


def _update_centroids(sub, centroids, assignments, dists) -> np.ndarray:
    k, d = centroids.shape
    sums = np.zeros((k, d), dtype=np.float64)
    np.add.at(sums, assignments, sub.astype(np.float64))
    counts = np.bincount(assignments, minlength=k).astype(np.float64)
    new = centroids.copy()
    nonempty = counts > 0
    new[nonempty] = (sums[nonempty] / counts[nonempty, None]).astype(np.float32)
    empties = np.flatnonzero(~nonempty)
    if empties.size:
        # Relocate each empty centroid to a distinct far-out subvector.
        assigned_d = dists[np.arange(sub.shape[0]), assignments]
        donors = np.argsort(-assigned_d, kind="stable")
        for e, donor in zip(empties, donors):
            new[e] = sub[donor]
    return new


def reconstruct(codebook: Codebook, indices: np.ndarray, layout: BlockLayout) -> np.ndarray:
    """Assemble the matrix whose block (i, j) is codeword indices[i, j]."""
    idx = np.asarray(indices)
    if idx.shape != (layout.m, layout.q):
        raise ValueError(f"indices shape {idx.shape} does not match layout ({layout.m}, {layout.q})")
    if idx.min() < 0 or idx.max() >= codebook.k:
        raise ValueError(f"codeword index out of range [0, {codebook.k})")
    if codebook.d != layout.d:
        raise ValueError(f"codebook d={codebook.d} does not match layout d={layout.d}")
    flat = idx.T.reshape(-1)  # column-major over blocks, matching split_blocks
    return join_blocks(codebook.centroids[flat], layout)


def finetune_centroids(
    codebook: Codebook, assignments: np.ndarray, block_grads: np.ndarray, lr: float
) -> Codebook:
    """One gradient step per codeword: c -= lr * mean(grads of assigned blocks).

    Codewords with no assigned blocks are left untouched.
    """
    if lr <= 0.0:
        raise ValueError("lr must be positive")
    grads = np.asarray(block_grads, dtype=np.float64)
    assignments = np.asarray(assignments)
    if grads.shape != (assignments.shape[0], codebook.d):
        raise ValueError("block_grads must align with assignments and codebook dim")
    sums = np.zeros((codebook.k, codebook.d), dtype=np.float64)
    np.add.at(sums, assignments, grads)
    counts = np.bincount(assignments, minlength=codebook.k).astype(np.float64)
    new = codebook.centroids.astype(np.float64).copy()
    nonempty = counts > 0
    new[nonempty] -= lr * sums[nonempty] / counts[nonempty, None]
    return Codebook(new.astype(np.float32))


def compress_centroids_int8(codebook: Codebook) -> Codebook:
    """Replace centroid storage with int8 codes plus min/max QuantParams.

    The resulting centroids are the dequantized values (within scale/2 of the
    originals per entry), so downstream reconstruction matches serialization.
    Codebooks already carrying an int8 form pass through unchanged.
    """
    if codebook.int8_codes is not None:
        return codebook
    params = calibrate_minmax(codebook.centroids, 8)
    levels = quant_levels(codebook.centroids, params)
    codes = (levels - params.zero_point).astype(np.uint8)
    deq = ((codes.astype(np.float64) + params.zero_point) * params.scale).astype(np.float32)
    return Codebook(deq, int8_codes=codes, int8_params=params)


def index_bits(k: int) -> int:
    """ceil(log2 k); 0 for k == 1."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return (k - 1).bit_length()


def storage_bits(k: int, d: int, m: int, p: int, n: int) -> int:
    """Total bits for one quantized matrix plus its batch-1 activations.

    int8 centroids (8*K*d) + packed indices (ceil(log2 K) per block over m*p
    blocks) + int8 activations of the layer input (8*n).
    """
    if min(k, d, m, p, n) < 1:
        raise ValueError("all arguments must be positive")
    return 8 * k * d + index_bits(k) * m * p + 8 * n


def pq_compress(
    w: np.ndarray,
    layout: BlockLayout,
    k: int = DEFAULT_K,
    rng: Rng | None = None,
    iters: int = KMEANS_DEFAULT_ITERS,
) -> tuple[CompressedTensor, float]:
    """K-means quantize a matrix; returns the tensor and the final objective."""
    w = as_matrix(w)
    res = kmeans_fit(split_blocks(w, layout), k, iters=iters, rng=rng)
    indices = res.assignments.reshape(layout.q, layout.m).T.astype(np.int32)
    ct = CompressedTensor(
        scheme=SCHEME_PQ,
        shape=w.shape,
        layout=layout,
        codebook=res.codebook,
        indices=np.ascontiguousarray(indices),
    )
    return ct, res.objective


def pq_tensor_to_int8(ct: CompressedTensor) -> CompressedTensor:
    """Convert a PQ tensor to the int8-centroid scheme."""
    if ct.scheme not in (SCHEME_PQ, SCHEME_PQ_INT8):
        raise ValueError("not a product-quantized tensor")
    return CompressedTensor(
        scheme=SCHEME_PQ_INT8,
        shape=ct.shape,
        layout=ct.layout,
        codebook=compress_centroids_int8(ct.codebook),
        indices=ct.indices,
    )
