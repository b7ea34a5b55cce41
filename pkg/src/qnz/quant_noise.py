"""Training-time quantization noise.

Each forward pass selects a random subset of weight blocks (i.i.d. Bernoulli
per block) and replaces them with the distortion the target quantizer would
apply -- rounding to the fixed-point grid, snapping to the nearest codeword,
or zeroing the subvector -- while every unselected block passes through
bitwise unchanged. Gradients are taken as if the substitution were the
identity (straight-through); layer dropping is the exception and
backpropagates nothing through dropped branches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Rng, as_matrix
from .quant_pq import BlockLayout, Codebook, assign, layout_for, split_blocks, join_blocks
from .quant_scalar import QuantParams, calibrate_minmax, fake_quant

NOISE_KINDS = ("intn", "pq_exact", "pq_proxy", "layerdrop")

# Block-noise rates mirroring the training recipes: 0.05 for LM-style nets,
# 0.1 elsewhere; the bench harness sweeps the full grid.
DEFAULT_RATE_LM = 0.05
DEFAULT_RATE = 0.1
SWEEP_RATES = (0.0, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class NoiseSpec:
    """One noise operator: what distortion, how often, on which blocks.

    ``bits`` applies to intn noise, ``block_size``/``k`` to the pq kinds
    (block_size None defers to the per-layer-kind registry). ``ste`` is fixed
    by the kind: quantization noises backpropagate straight through, layer
    dropping does not.
    """

    kind: str
    rate: float
    bits: int = 8
    block_size: int | None = None
    k: int = 256
    ste: bool = True

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate must be in [0, 1], got {self.rate}")
        if self.kind == "layerdrop":
            if self.ste:
                raise ValueError("layerdrop noise does not use straight-through gradients")
        elif not self.ste:
            raise ValueError(f"{self.kind} noise requires straight-through gradients")
        if self.kind == "intn" and self.bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {self.bits}")


def qat_spec(bits: int) -> NoiseSpec:
    """Full-matrix intN noise every forward: quantization-aware training."""
    return NoiseSpec(kind="intn", rate=1.0, bits=bits)


@dataclass(frozen=True)
class BlockMask:
    """Selected block set as a boolean per block of the layout."""

    layout: BlockLayout
    selected: np.ndarray  # (m, q) bool

    def __post_init__(self):
        if self.selected.shape != (self.layout.m, self.layout.q):
            raise ValueError("mask shape does not match layout")

    @property
    def flat(self) -> np.ndarray:
        # Column-major over blocks, same order as split_blocks.
        return self.selected.T.reshape(-1)


def select_blocks(layout: BlockLayout, p: float, rng: Rng) -> BlockMask:
    """Independent Bernoulli(p) draw per block; fresh every call."""
    draws = rng.bernoulli(p, layout.n_blocks)
    return BlockMask(layout, draws.reshape(layout.q, layout.m).T)


def intn_noise(blocks: np.ndarray, params: QuantParams) -> np.ndarray:
    """Fixed-point grid distortion, elementwise fake quantization."""
    return fake_quant(blocks, params)


def codeword_noise(blocks: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Replace each subvector with its nearest codeword."""
    return codebook.centroids[assign(blocks, codebook)]


def zero_noise(blocks: np.ndarray) -> np.ndarray:
    """Zero out the subvectors: the cheap stand-in for codeword distortion."""
    return np.zeros_like(blocks)


def compose(phi1, phi2):
    """Composite distortion phi1(phi2(blocks)) for combined quantizers."""
    return lambda blocks: phi1(phi2(blocks))


def apply_noise(w: np.ndarray, mask: BlockMask, phi) -> np.ndarray:
    """Distort the selected blocks of ``w``; unselected blocks are untouched."""
    w = as_matrix(w)
    layout = mask.layout
    if w.shape != layout.shape:
        raise ValueError(f"matrix {w.shape} does not match mask layout {layout.shape}")
    flat = mask.flat
    if not flat.any():
        return w.copy()
    sub = split_blocks(w, layout)
    sub[flat] = np.asarray(phi(sub[flat]), dtype=np.float32)
    return join_blocks(sub, layout)


def apply_spec(
    w: np.ndarray,
    spec: NoiseSpec,
    rng: Rng,
    layer_kind: str = "ffn",
    codebook: Codebook | None = None,
    params: QuantParams | None = None,
) -> np.ndarray:
    """Draw a fresh mask for ``spec`` and distort ``w`` accordingly.

    For intn noise the grid parameters default to min/max of the matrix the
    operator sees, recomputed here (i.e. every forward). pq_exact requires
    the caller to pass the current codebook.
    """
    w = as_matrix(w)
    if spec.kind == "layerdrop":
        raise ValueError("layerdrop acts on layers, not weight blocks")
    if spec.kind == "intn":
        layout = BlockLayout.fit(w.shape[0], w.shape[1], 1, 1)
        q = params if params is not None else calibrate_minmax(w, spec.bits)
        phi = lambda blocks: intn_noise(blocks, q)
    else:
        layout = layout_for(layer_kind, w.shape[0], w.shape[1], spec.block_size)
        if spec.kind == "pq_exact":
            if codebook is None:
                raise ValueError("pq_exact noise needs the current codebook")
            cb = codebook
            phi = lambda blocks: codeword_noise(blocks, cb)
        else:
            phi = zero_noise
    mask = select_blocks(layout, spec.rate, rng)
    return apply_noise(w, mask, phi)


def layerdrop_mask(num_layers: int, rate: float, rng: Rng) -> np.ndarray:
    """Per-residual-block drop decisions, independent Bernoulli(rate)."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0, 1], got {rate}")
    return rng.bernoulli(rate, num_layers)
