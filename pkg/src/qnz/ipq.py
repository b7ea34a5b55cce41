"""Layer-sequential product quantization with teacher-supervised finetuning.

Quantizing a whole net in one shot lets reconstruction error accumulate
through the stack, so layers are quantized in order (input to output by
default) while the not-yet-quantized layers keep training against the
uncompressed teacher's outputs and the already-quantized layers adapt through
their centroids: each codeword moves by the mean gradient of its assigned
blocks, with assignments frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng
from .quant_pq import (
    DEFAULT_BLOCK_SIZES,
    BlockLayout,
    finetune_centroids,
    kmeans_fit,
    pq_tensor_to_int8,
    reconstruct,
    split_blocks,
    storage_bits,
)
from .quant_scalar import ActivationObserver
from .tensors import SCHEME_PQ, SCHEME_PQ_INT8, SCHEME_RAW, CompressedTensor
from .train_core import Dataset, Network, backward_ste, forward


@dataclass
class IpqConfig:
    k: int = 256
    kmeans_iters: int = 15
    # Block size per store name or per layer kind; falls back to the registry.
    block_sizes: dict[str, int] = field(default_factory=dict)
    order: tuple[str, ...] | None = None  # store names; default net order
    finetune_steps: int = 100
    finetune_lr: float = 1e-2
    batch_size: int = 32

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.finetune_steps < 0:
            raise ValueError("finetune_steps must be >= 0")
        if self.finetune_lr <= 0.0:
            raise ValueError("finetune_lr must be positive")


@dataclass
class LayerQuant:
    """Quantization artifacts for one store."""

    name: str
    layout: BlockLayout
    codebook: object
    indices: np.ndarray  # (m, q) int32, frozen after quantization
    objective: float  # k-means objective at quantization time

    @property
    def flat_indices(self) -> np.ndarray:
        return self.indices.T.reshape(-1)


@dataclass
class CompressedNet:
    """A net whose quantized stores hold their reconstructed weights."""

    net: Network
    quantized: dict[str, LayerQuant]
    order: tuple[str, ...]
    int8_centroids: bool = False

    def store(self, name: str):
        for s in self.net.stores():
            if s.name == name:
                return s
        raise KeyError(name)


def _layout_for_store(store, config: IpqConfig) -> BlockLayout:
    rows, cols = store.weight.shape
    size = config.block_sizes.get(store.name)
    if size is None:
        size = config.block_sizes.get(store.kind)
    if size is None:
        size = DEFAULT_BLOCK_SIZES.get(store.kind, 8)
    return BlockLayout.fit(rows, cols, size, 1)


def _resolve_order(net: Network, config: IpqConfig) -> tuple[str, ...]:
    names = [s.name for s in net.stores()]
    if config.order is None:
        return tuple(names)
    if sorted(config.order) != sorted(names):
        raise ValueError(f"order {config.order} is not a permutation of stores {names}")
    return tuple(config.order)


def _quantize_store(store, config: IpqConfig, rng: Rng) -> LayerQuant:
    layout = _layout_for_store(store, config)
    res = kmeans_fit(split_blocks(store.weight, layout), config.k, iters=config.kmeans_iters, rng=rng)
    indices = np.ascontiguousarray(res.assignments.reshape(layout.q, layout.m).T.astype(np.int32))
    return LayerQuant(store.name, layout, res.codebook, indices, res.objective)


def quantize_one_shot(net: Network, config: IpqConfig, rng: Rng) -> CompressedNet:
    """Quantize every store independently, no finetuning."""
    student = net.clone()
    order = _resolve_order(student, config)
    rng.split()  # batch stream slot, kept so layer streams match the iterative path
    quantized: dict[str, LayerQuant] = {}
    for name in order:
        store = _find(student, name)
        lq = _quantize_store(store, config, rng.split())
        store.weight[:] = reconstruct(lq.codebook, lq.indices, lq.layout)
        quantized[name] = lq
    return CompressedNet(student, quantized, order)


def distill_loss(student_out: np.ndarray, teacher_out: np.ndarray) -> float:
    """Mean squared error between student and teacher logits."""
    s = np.asarray(student_out, dtype=np.float64)
    t = np.asarray(teacher_out, dtype=np.float64)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {t.shape}")
    d = s - t
    return float(np.mean(d * d))


def distill_loss_grad(student_out: np.ndarray, teacher_out: np.ndarray) -> tuple[float, np.ndarray]:
    s = np.asarray(student_out, dtype=np.float64)
    t = np.asarray(teacher_out, dtype=np.float64)
    d = s - t
    loss = float(np.mean(d * d))
    return loss, (2.0 * d / d.size).astype(student_out.dtype, copy=False)


def _find(net: Network, name: str):
    for s in net.stores():
        if s.name == name:
            return s
    raise KeyError(name)


def quantize_iterative(
    net: Network,
    teacher: Network,
    config: IpqConfig,
    dataset: Dataset,
    rng: Rng,
) -> CompressedNet:
    """Quantize stores in order, finetuning the rest against the teacher.

    After each store is quantized, ``finetune_steps`` distillation steps run:
    unquantized weights (and every bias) take plain gradient steps, quantized
    stores move only through their codewords by the mean assigned-block
    gradient. Index matrices never change once written. With zero steps this
    reduces bit-for-bit to quantize_one_shot.
    """
    student = net.clone()
    order = _resolve_order(student, config)
    batch_rng = rng.split()
    quantized: dict[str, LayerQuant] = {}
    n = dataset.x_train.shape[0]
    for name in order:
        store = _find(student, name)
        lq = _quantize_store(store, config, rng.split())
        store.weight[:] = reconstruct(lq.codebook, lq.indices, lq.layout)
        quantized[name] = lq
        for _ in range(config.finetune_steps):
            idx = batch_rng.integers(config.batch_size, 0, n)
            x = dataset.x_train[idx]
            t_logits = forward(teacher, x).logits
            cache = forward(student, x, mode="train")
            _, dlogits = distill_loss_grad(cache.logits, t_logits)
            grads = backward_ste(student, cache, dlogits)
            _apply_finetune_step(student, quantized, grads, config.finetune_lr)
    return CompressedNet(student, quantized, order)


def _apply_finetune_step(student: Network, quantized: dict[str, LayerQuant], grads, lr: float) -> None:
    for store in student.stores():
        if store.name not in grads:
            continue
        gw, gb = grads[store.name]
        lq = quantized.get(store.name)
        if lq is None:
            store.weight -= np.asarray(lr * gw, dtype=np.float32)
        else:
            block_grads = split_blocks(np.asarray(gw, dtype=np.float32), lq.layout)
            lq.codebook = finetune_centroids(lq.codebook, lq.flat_indices, block_grads, lr)
            store.weight[:] = reconstruct(lq.codebook, lq.indices, lq.layout)
        if gb is not None and store.bias is not None:
            store.bias -= np.asarray(lr * gb, dtype=np.float32)


def combine_with_int8(
    cnet: CompressedNet,
    calib_batches: list[np.ndarray] | None = None,
    bits: int = 8,
) -> CompressedNet:
    """Compress codebooks to int8 and, given calibration data, quantize
    activations with frozen observer parameters on the eval path."""
    net = cnet.net.clone()
    quantized: dict[str, LayerQuant] = {}
    for name, lq in cnet.quantized.items():
        ct = pq_tensor_to_int8(
            CompressedTensor(
                scheme=SCHEME_PQ,
                shape=lq.layout.shape,
                layout=lq.layout,
                codebook=lq.codebook,
                indices=lq.indices,
            )
        )
        new_lq = LayerQuant(name, lq.layout, ct.codebook, lq.indices, lq.objective)
        _find(net, name).weight[:] = reconstruct(new_lq.codebook, new_lq.indices, new_lq.layout)
        quantized[name] = new_lq
    out = CompressedNet(net, quantized, cnet.order, int8_centroids=True)
    if calib_batches:
        observers = {li: ActivationObserver(bits=bits) for li in range(len(net.all_layers()))}
        for batch in calib_batches:
            cache = forward(net, batch)
            for li, trace in enumerate(cache.traces):
                observers[li].observe(trace.x)
        net.activation_params = {li: obs.freeze() for li, obs in observers.items()}
    return out


def to_model(cnet: CompressedNet) -> dict[str, CompressedTensor]:
    """Serializable tensor map: quantized weights, raw leftovers and biases."""
    scheme = SCHEME_PQ_INT8 if cnet.int8_centroids else SCHEME_PQ
    model: dict[str, CompressedTensor] = {}
    for store in cnet.net.stores():
        lq = cnet.quantized.get(store.name)
        if lq is None:
            model[store.name] = CompressedTensor(SCHEME_RAW, store.weight.shape, raw=store.weight.copy())
        else:
            model[store.name] = CompressedTensor(
                scheme=scheme,
                shape=store.weight.shape,
                layout=lq.layout,
                codebook=lq.codebook,
                indices=lq.indices,
            )
        if store.bias is not None:
            b = store.bias.reshape(1, -1).copy()
            model[store.name + ".bias"] = CompressedTensor(SCHEME_RAW, b.shape, raw=b)
    return model


def layer_report(cnet: CompressedNet) -> list[dict]:
    """Per-layer rows: layer, K, d, k-means objective, storage bits.

    The activation term of the bit count uses each layer's own input
    dimension (the weight's row count).
    """
    rows = []
    for name in cnet.order:
        lq = cnet.quantized[name]
        rows.append(
            {
                "layer": name,
                "k": lq.codebook.k,
                "d": lq.codebook.d,
                "objective": lq.objective,
                "bits": storage_bits(
                    lq.codebook.k, lq.codebook.d, lq.layout.m, lq.layout.q, lq.layout.shape[0]
                ),
            }
        )
    return rows


def layer_report_csv(cnet: CompressedNet) -> str:
    lines = ["layer,k,d,objective,bits"]
    for r in layer_report(cnet):
        lines.append(f"{r['layer']},{r['k']},{r['d']},{r['objective']!r},{r['bits']}")
    return "\n".join(lines) + "\n"


def output_mse(net: Network, teacher: Network, x: np.ndarray, batch_size: int = 256) -> float:
    """Mean squared logit gap to the teacher over a dataset."""
    total, n = 0.0, x.shape[0]
    for i in range(0, n, batch_size):
        xb = x[i : i + batch_size]
        s = forward(net, xb).logits
        t = forward(teacher, xb).logits
        total += distill_loss(s, t) * xb.shape[0]
    return total / n
