"""Minimal differentiable network core.

Residual MLPs and a tiny character-LM head built from one primitive: a dense
layer y = x @ W + b with an optional ReLU and an optional residual add.
Forward passes in train mode distort weights with the configured noise
operators and drop residual branches; the backward pass computes reverse-mode
gradients along the noisy graph, assigning each distorted weight's gradient
straight through to its parameter store. Shared layers alias one store, so
their gradients accumulate naturally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numerics import Rng, matmul
from .quant_noise import NoiseSpec, apply_spec
from .quant_pq import Codebook, kmeans_fit, layout_for, split_blocks
from .quant_scalar import QuantParams, calibrate_minmax, fake_quant_matrix

ACTIVATIONS = ("identity", "relu")


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class ParamStore:
    """One parameter slot: weight (in_dim, out_dim) plus optional bias."""

    name: str
    weight: np.ndarray
    bias: np.ndarray | None = None
    kind: str = "ffn"  # block-layout registry key for quantizers


@dataclass
class Layer:
    store: ParamStore
    activation: str = "identity"
    residual: bool = False
    share_group: str | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.residual and self.store.weight.shape[0] != self.store.weight.shape[1]:
            raise ValueError("residual layers need equal input/output width")


class Network:
    """Ordered layers plus a classifier head, softmax cross-entropy loss."""

    def __init__(self, layers: list[Layer], head: Layer, loss: str = "softmax_ce"):
        if loss != "softmax_ce":
            raise ValueError(f"unsupported loss {loss!r}")
        width = layers[0].store.weight.shape[0] if layers else head.store.weight.shape[0]
        seen: dict[str, int] = {}
        for layer in [*layers, head]:
            w = layer.store.weight
            if w.shape[0] != width:
                raise ValueError(f"layer {layer.store.name}: expects width {w.shape[0]}, got {width}")
            width = w.shape[0] if layer.residual else w.shape[1]
            prev = seen.setdefault(layer.store.name, id(layer.store))
            if prev != id(layer.store):
                raise ValueError(f"two distinct stores named {layer.store.name!r}")
        self.layers = layers
        self.head = head
        self.loss = loss
        # Input-side fake-quant params per layer index, set by the int8
        # combination step; applied only in eval forwards.
        self.activation_params: dict[int, QuantParams] | None = None

    def all_layers(self) -> list[Layer]:
        return [*self.layers, self.head]

    def stores(self) -> list[ParamStore]:
        out, seen = [], set()
        for layer in self.all_layers():
            if id(layer.store) not in seen:
                seen.add(id(layer.store))
                out.append(layer.store)
        return out

    def clone(self) -> "Network":
        copies: dict[int, ParamStore] = {}

        def cp(store: ParamStore) -> ParamStore:
            if id(store) not in copies:
                copies[id(store)] = ParamStore(
                    store.name,
                    store.weight.copy(),
                    None if store.bias is None else store.bias.copy(),
                    store.kind,
                )
            return copies[id(store)]

        layers = [replace(l, store=cp(l.store)) for l in self.layers]
        head = replace(self.head, store=cp(self.head.store))
        net = Network(layers, head, self.loss)
        net.activation_params = None if self.activation_params is None else dict(self.activation_params)
        return net


def _init_weight(rng: Rng, n_in: int, n_out: int) -> np.ndarray:
    w = rng.normal(n_in * n_out, std=math.sqrt(2.0 / n_in))
    return w.reshape(n_in, n_out).astype(np.float32)


def build_residual_mlp(
    in_dim: int,
    width: int,
    blocks: int,
    classes: int,
    rng: Rng,
    share_pairs: bool = False,
) -> Network:
    """Input projection, ``blocks`` residual ReLU layers, classifier head.

    With share_pairs, adjacent residual layers alias one store in chunks of
    two (blocks must be even).
    """
    if share_pairs and blocks % 2:
        raise ValueError("share_pairs needs an even number of residual blocks")
    layers = [
        Layer(
            ParamStore("input", _init_weight(rng, in_dim, width), np.zeros(width, np.float32), kind="embedding"),
            activation="relu",
        )
    ]
    store = None
    for i in range(blocks):
        if share_pairs and i % 2 == 1:
            group = f"chunk{i // 2}"
        else:
            store = ParamStore(
                f"block{i // 2 if share_pairs else i}",
                _init_weight(rng, width, width),
                np.zeros(width, np.float32),
                kind="ffn",
            )
            group = f"chunk{i // 2}" if share_pairs else None
        layers.append(Layer(store, activation="relu", residual=True, share_group=group))
    head = Layer(
        ParamStore("head", _init_weight(rng, width, classes), np.zeros(classes, np.float32), kind="classifier")
    )
    return Network(layers, head)


def build_char_lm(context: int, vocab: int, hidden: int, rng: Rng) -> Network:
    """Two-layer MLP over a window of concatenated one-hot characters."""
    layers = [
        Layer(
            ParamStore("embed", _init_weight(rng, context * vocab, hidden), np.zeros(hidden, np.float32), kind="embedding"),
            activation="relu",
        )
    ]
    head = Layer(
        ParamStore("head", _init_weight(rng, hidden, vocab), np.zeros(vocab, np.float32), kind="classifier")
    )
    return Network(layers, head)


@dataclass
class LayerTrace:
    x: np.ndarray | None  # input the matmul consumed (after any input quant)
    z: np.ndarray | None  # pre-activation
    w_eff: np.ndarray | None  # the weight matrix actually multiplied
    dropped: bool = False


@dataclass
class ForwardCache:
    traces: list[LayerTrace]
    logits: np.ndarray


def forward(
    net: Network,
    x: np.ndarray,
    noise: tuple[NoiseSpec, ...] = (),
    mode: str = "eval",
    rng: Rng | None = None,
    pq_codebooks: dict[str, Codebook] | None = None,
    intn_params: dict[tuple[str, int], QuantParams] | None = None,
) -> ForwardCache:
    """Run the network, caching everything backward_ste needs.

    In train mode each weight matrix passes through the noise operators in
    order (fresh masks per call) and residual branches drop per the layerdrop
    specs; eval mode touches neither noise nor rng. Input-side activation
    quantization (net.activation_params) applies in eval mode only.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    drop_specs = [s for s in noise if s.kind == "layerdrop"] if training else []
    weight_specs = [s for s in noise if s.kind != "layerdrop"] if training else []
    if training and (drop_specs or weight_specs) and rng is None:
        raise ValueError("train-mode noise needs an rng")

    h = np.asarray(x)
    if h.ndim != 2:
        raise ValueError("input must be a 2-D batch")
    traces: list[LayerTrace] = []
    act_params = net.activation_params if (not training and net.activation_params) else {}
    for li, layer in enumerate(net.all_layers()):
        if layer.residual and drop_specs:
            dropped = any(bool(rng.bernoulli(s.rate, 1)[0]) for s in drop_specs)
            if dropped:
                traces.append(LayerTrace(None, None, None, dropped=True))
                continue
        store = layer.store
        w_eff = store.weight
        for spec in weight_specs:
            key = (store.name, spec.bits)
            w_eff = apply_spec(
                w_eff,
                spec,
                rng,
                layer_kind=store.kind,
                codebook=None if pq_codebooks is None else pq_codebooks.get(store.name),
                params=None if intn_params is None else intn_params.get(key),
            )
        xin = h
        if li in act_params:
            xin = fake_quant_matrix(xin, act_params[li]).astype(h.dtype, copy=False)
        z = matmul(xin, w_eff)
        if store.bias is not None:
            z = z + store.bias
        a = np.maximum(z, 0) if layer.activation == "relu" else z
        traces.append(LayerTrace(xin, z, w_eff))
        h = h + a if layer.residual else a
    return ForwardCache(traces, h)


def backward_ste(net: Network, cache: ForwardCache, dlogits: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray | None]]:
    """Gradients per parameter store, straight through the weight noise.

    The loss gradient flows along the noisy forward graph, but each distorted
    weight's gradient lands on the undistorted store (identity Jacobian for
    the substitution). Dropped residual branches get nothing. Shared layers
    accumulate into their single store.
    """
    grads: dict[str, tuple[np.ndarray, np.ndarray | None]] = {}
    g = np.asarray(dlogits)
    layers = net.all_layers()
    if len(cache.traces) != len(layers):
        raise ValueError("forward cache does not match network")
    for layer, trace in zip(reversed(layers), reversed(cache.traces)):
        if trace.dropped:
            continue  # residual skip carries g through unchanged
        dz = g * (trace.z > 0) if layer.activation == "relu" else g
        dw = matmul(trace.x.T, dz)
        db = None if layer.store.bias is None else dz.sum(axis=0)
        gx = matmul(dz, trace.w_eff.T)
        g = gx + g if layer.residual else gx
        name = layer.store.name
        if name in grads:
            ow, ob = grads[name]
            grads[name] = (ow + dw, None if ob is None else ob + db)
        else:
            grads[name] = (dw, db)
    return grads


def softmax_ce(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(s)
    n = z.shape[0]
    loss = float(-logp[np.arange(n), labels].mean())
    d = e / s
    d[np.arange(n), labels] -= 1.0
    d /= n
    return loss, d.astype(logits.dtype, copy=False)


class SGD:
    def __init__(self, stores: list[ParamStore], lr: float, momentum: float = 0.9):
        self.stores = stores
        self.lr = lr
        self.momentum = momentum
        self._vel = {
            s.name: (np.zeros_like(s.weight), None if s.bias is None else np.zeros_like(s.bias))
            for s in stores
        }

    def step(self, grads) -> None:
        for s in self.stores:
            if s.name not in grads:
                continue
            gw, gb = grads[s.name]
            vw, vb = self._vel[s.name]
            vw *= self.momentum
            vw += gw
            s.weight -= self.lr * vw
            if gb is not None:
                vb *= self.momentum
                vb += gb
                s.bias -= self.lr * vb


class Adam:
    def __init__(self, stores, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.stores = stores
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self._t = 0
        self._m = {}
        self._v = {}
        for s in stores:
            self._m[s.name] = (np.zeros_like(s.weight), None if s.bias is None else np.zeros_like(s.bias))
            self._v[s.name] = (np.zeros_like(s.weight), None if s.bias is None else np.zeros_like(s.bias))

    def step(self, grads) -> None:
        self._t += 1
        bc1 = 1.0 - self.beta1**self._t
        bc2 = 1.0 - self.beta2**self._t
        for s in self.stores:
            if s.name not in grads:
                continue
            for param, g, m, v in self._iter(s, grads[s.name]):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * (g * g)
                param -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def _iter(self, s, grad_pair):
        gw, gb = grad_pair
        mw, mb = self._m[s.name]
        vw, vb = self._v[s.name]
        yield s.weight, gw, mw, vw
        if gb is not None:
            yield s.bias, gb, mb, vb


@dataclass
class TrainConfig:
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    optimizer: str = "sgd"
    momentum: float = 0.9
    noise: tuple[NoiseSpec, ...] = ()
    layerdrop: float = 0.0
    seed: int = 0
    # Forwards between refreshes of the intn noise grid; 1 = every forward.
    intn_recalibrate_every: int = 1

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.layerdrop <= 1.0:
            raise ValueError("layerdrop rate must be in [0, 1]")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    metric: str = "accuracy"  # or "char_perplexity"


def evaluate(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> tuple[float, float]:
    """Eval-mode mean loss and accuracy, deterministic and rng-free."""
    total_loss, correct = 0.0, 0
    n = x.shape[0]
    for i in range(0, n, batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        logits = forward(net, xb).logits
        loss, _ = softmax_ce(logits, yb)
        total_loss += loss * xb.shape[0]
        correct += int((np.argmax(logits, axis=1) == yb).sum())
    return total_loss / n, correct / n


def refresh_pq_codebooks(net: Network, spec: NoiseSpec, rng: Rng) -> dict[str, Codebook]:
    """Fit a fresh codebook per store from the current weights."""
    books = {}
    for store in net.stores():
        layout = layout_for(store.kind, *store.weight.shape, block_size=spec.block_size)
        res = kmeans_fit(split_blocks(store.weight, layout), spec.k, rng=rng.split())
        books[store.name] = res.codebook
    return books


def _effective_specs(config: TrainConfig) -> tuple[NoiseSpec, ...]:
    specs = tuple(config.noise)
    if config.layerdrop > 0.0:
        specs = specs + (NoiseSpec(kind="layerdrop", rate=config.layerdrop, ste=False),)
    return specs


def train(net: Network, dataset: Dataset, config: TrainConfig) -> tuple[Network, list[dict]]:
    """Train in place; returns the net and per-epoch metrics rows.

    Deterministic given the seed. Codebooks for exact-PQ noise are refit from
    the current weights at every epoch boundary. A non-finite loss aborts
    with a DivergenceError.
    """
    rng = Rng(config.seed)
    opt = (
        SGD(net.stores(), config.lr, config.momentum)
        if config.optimizer == "sgd"
        else Adam(net.stores(), config.lr)
    )
    specs = _effective_specs(config)
    pq_specs = [s for s in specs if s.kind == "pq_exact"]
    if len(pq_specs) > 1:
        raise ValueError("at most one pq_exact noise spec per run")
    intn_specs = [s for s in specs if s.kind == "intn"]
    cadence = config.intn_recalibrate_every
    history: list[dict] = []
    n = dataset.x_train.shape[0]
    step = 0
    intn_cache: dict[tuple[str, int], QuantParams] | None = None
    for epoch in range(config.epochs):
        books = refresh_pq_codebooks(net, pq_specs[0], rng) if pq_specs else None
        perm = rng.permutation(n)
        losses = []
        for i in range(0, n, config.batch_size):
            idx = perm[i : i + config.batch_size]
            if intn_specs and cadence > 1 and step % cadence == 0:
                intn_cache = {
                    (s.name, spec.bits): calibrate_minmax(s.weight, spec.bits)
                    for s in net.stores()
                    for spec in intn_specs
                }
            cache = forward(
                net,
                dataset.x_train[idx],
                specs,
                mode="train",
                rng=rng,
                pq_codebooks=books,
                intn_params=intn_cache,
            )
            loss, dlogits = softmax_ce(cache.logits, dataset.y_train[idx])
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            grads = backward_ste(net, cache, dlogits)
            opt.step(grads)
            losses.append(loss)
            step += 1
        _, val_acc = evaluate(net, dataset.x_val, dataset.y_val)
        history.append(
            {"epoch": epoch, "loss": float(np.mean(losses)) if losses else float("nan"), "accuracy": val_acc}
        )
    return net, history


def finetune_with_noise(net: Network, dataset: Dataset, config: TrainConfig) -> tuple[Network, list[dict]]:
    """Short additional training of an already-trained net with noise active."""
    return train(net, dataset, config)


def history_to_csv(history: list[dict]) -> str:
    lines = ["epoch,loss,accuracy"]
    for row in history:
        lines.append(f"{row['epoch']},{row['loss']!r},{row['accuracy']!r}")
    return "\n".join(lines) + "\n"


def prune_every_other(net: Network) -> Network:
    """Drop alternating residual chunks, starting with the first.

    Consecutive residual layers aliasing one store count as a single chunk,
    so nets with shared pairs lose whole chunks and keep their structure.
    """
    group_of: dict[int, int] = {}
    gid = -1
    prev_store = None
    for layer in net.layers:
        if not layer.residual:
            prev_store = None
            continue
        if prev_store is None or id(layer.store) != prev_store:
            gid += 1
        group_of[id(layer)] = gid
        prev_store = id(layer.store)
    kept = [
        l
        for l in net.layers
        if not l.residual or group_of[id(l)] % 2 == 1
    ]
    pruned = Network(kept, net.head, net.loss)
    pruned.activation_params = None
    return pruned.clone()
