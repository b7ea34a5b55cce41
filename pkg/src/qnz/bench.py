"""Experiment harness: train, quantize, evaluate, sweep, report.

Runs the matrix of (noise mode) x (quantization scheme) on the desk-scale
tasks, records one result row per configuration and seed, and emits
deterministic CSV and markdown tables. Everything is reproducible
byte-for-byte from the config file and the seed list.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field, replace

from .datasets import gen_char_lm, gen_classify
from .ipq import IpqConfig, combine_with_int8, quantize_iterative, to_model
from .model_store import size_report
from .numerics import Rng
from .quant_noise import DEFAULT_RATE, DEFAULT_RATE_LM, SWEEP_RATES, NoiseSpec, qat_spec
from .quant_scalar import (
    ActivationObserver,
    calibrate_histogram,
    calibrate_minmax,
    calibrate_per_channel,
    quantize_tensor,
)
from .tensors import SCHEME_RAW, CompressedTensor, dequantize_tensor
from .train_core import (
    Dataset,
    Network,
    TrainConfig,
    build_char_lm,
    build_residual_mlp,
    evaluate,
    forward,
    train,
)

SCHEME_ORDER = ("none", "int4", "int8", "ipq", "ipq_int8")
NOISE_MODES = ("none", "qat", "quant-noise")
CALIBRATIONS = ("histogram", "minmax", "per_channel")
SWEEP_AXES = ("noise_rate", "centroids", "block_size", "structure_order")

# Fixed offset so the quantization stage draws from a stream unrelated to
# the training stream for the same seed.
_QUANTIZE_SEED_OFFSET = 7919


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    task: str = "synthetic-classify"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    noise_mode: str = "none"
    noise: dict = field(default_factory=dict)  # kind, p, bits, block_size, k
    schemes: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0,)
    ipq: dict = field(default_factory=dict)
    calibration: str = "histogram"
    quantize_activations: bool = True
    dataset: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)  # axis, values

    def __post_init__(self):
        if self.task not in ("synthetic-classify", "char-lm"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"unknown noise mode {self.noise_mode!r}")
        if self.calibration not in CALIBRATIONS:
            raise ConfigError(f"unknown calibration {self.calibration!r}")
        bad = [s for s in self.schemes if s not in SCHEME_ORDER[1:]]
        if bad:
            raise ConfigError(f"unknown schemes {bad}; expected subset of {SCHEME_ORDER[1:]}")
        if not self.seeds:
            raise ConfigError("seed list must be explicit and nonempty")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        for key in ("schemes", "seeds"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"bad config JSON: {e}") from None
        return cls.from_dict(data)


@dataclass
class ResultRow:
    task: str
    scheme: str
    mode: str
    seed: int
    size_bytes: int
    compression: float
    metric: float
    status: str = "ok"


def make_dataset(config: ExperimentConfig, seed: int):
    """Seeded dataset; char-lm also returns its vocabulary."""
    rng = Rng(seed)
    if config.task == "synthetic-classify":
        return gen_classify(rng, **config.dataset), None
    context = config.model.get("context", 8)
    ds, vocab = gen_char_lm(rng, context=context, **config.dataset)
    return ds, vocab


def build_net(config: ExperimentConfig, seed: int, vocab=None) -> Network:
    rng = Rng(seed)
    m = config.model
    if config.task == "synthetic-classify":
        return build_residual_mlp(
            in_dim=2,
            width=m.get("width", 32),
            blocks=m.get("blocks", 4),
            classes=m.get("classes", 10),
            rng=rng,
            share_pairs=m.get("share_pairs", False),
        )
    return build_char_lm(
        context=m.get("context", 8),
        vocab=len(vocab),
        hidden=m.get("hidden", 64),
        rng=rng,
    )


def noise_specs(config: ExperimentConfig) -> tuple[NoiseSpec, ...]:
    """Noise list for the configured mode; qat is block noise at rate 1."""
    n = config.noise
    bits = n.get("bits", 8)
    if config.noise_mode == "none":
        return ()
    if config.noise_mode == "qat":
        return (qat_spec(bits),)
    default_rate = DEFAULT_RATE_LM if config.task == "char-lm" else DEFAULT_RATE
    kind = n.get("kind", "intn")
    return (
        NoiseSpec(
            kind=kind,
            rate=n.get("p", default_rate),
            bits=bits,
            block_size=n.get("block_size"),
            k=n.get("k", 256),
        ),
    )


def train_config(config: ExperimentConfig, seed: int) -> TrainConfig:
    t = config.train
    return TrainConfig(
        lr=t.get("lr", 0.1),
        epochs=t.get("epochs", 20),
        batch_size=t.get("batch_size", 32),
        optimizer=t.get("optimizer", "sgd"),
        momentum=t.get("momentum", 0.9),
        noise=noise_specs(config),
        layerdrop=t.get("layerdrop", 0.0),
        seed=seed,
        intn_recalibrate_every=t.get("intn_recalibrate_every", 1),
    )


def raw_model(net: Network) -> dict[str, CompressedTensor]:
    model = {}
    for store in net.stores():
        model[store.name] = CompressedTensor(SCHEME_RAW, store.weight.shape, raw=store.weight.copy())
        if store.bias is not None:
            b = store.bias.reshape(1, -1).copy()
            model[store.name + ".bias"] = CompressedTensor(SCHEME_RAW, b.shape, raw=b)
    return model


def _calibration_batches(dataset: Dataset, batches: int = 4, batch_size: int = 64):
    xs = dataset.x_train[: batches * batch_size]
    return [xs[i : i + batch_size] for i in range(0, len(xs), batch_size)]


def _observe_activations(net: Network, dataset: Dataset, bits: int) -> dict:
    observers = {li: ActivationObserver(bits=bits) for li in range(len(net.all_layers()))}
    for batch in _calibration_batches(dataset):
        cache = forward(net, batch)
        for li, trace in enumerate(cache.traces):
            observers[li].observe(trace.x)
    return {li: obs.freeze() for li, obs in observers.items()}


def apply_intn_scheme(
    net: Network,
    bits: int,
    dataset: Dataset,
    calibration: str = "histogram",
    quantize_activations: bool = True,
) -> tuple[Network, dict[str, CompressedTensor]]:
    """Post-training fixed-point quantization of every weight matrix.

    Returns an eval net carrying the dequantized weights (and, if requested,
    frozen activation grids) plus the serializable tensor map.
    """
    qnet = net.clone()
    model: dict[str, CompressedTensor] = {}
    for store in qnet.stores():
        if calibration == "histogram":
            params = calibrate_histogram(store.weight, bits)
        elif calibration == "minmax":
            params = calibrate_minmax(store.weight, bits)
        else:
            params = calibrate_per_channel(store.weight, bits, axis=1)
        ct = quantize_tensor(store.weight, params)
        model[store.name] = ct
        store.weight[:] = dequantize_tensor(ct)
        if store.bias is not None:
            b = store.bias.reshape(1, -1).copy()
            model[store.name + ".bias"] = CompressedTensor(SCHEME_RAW, b.shape, raw=b)
    if quantize_activations:
        qnet.activation_params = _observe_activations(qnet, dataset, bits)
    return qnet, model


def ipq_config(config: ExperimentConfig, net: Network) -> IpqConfig:
    c = dict(config.ipq)
    block_sizes = dict(c.get("block_sizes", {}))
    if config.task == "synthetic-classify":
        # The 2-wide input projection cannot take the registry defaults.
        block_sizes.setdefault("input", min(2, c.get("block_size_default", 2)))
    default = c.get("block_size_default")
    if default is not None:
        for store in net.stores():
            block_sizes.setdefault(store.kind, default)
    order = c.get("order")
    if order and all(isinstance(k, str) for k in order) and set(order) <= {s.kind for s in net.stores()}:
        # Kind-level order: expand to store names, net order within a kind.
        order = tuple(s.name for kind in order for s in net.stores() if s.kind == kind)
    return IpqConfig(
        k=c.get("k", 64),
        kmeans_iters=c.get("kmeans_iters", 15),
        block_sizes=block_sizes,
        order=tuple(order) if order else None,
        finetune_steps=c.get("finetune_steps", 100),
        finetune_lr=c.get("finetune_lr", 1e-2),
        batch_size=c.get("batch_size", 32),
    )


def apply_ipq_scheme(
    net: Network,
    config: ExperimentConfig,
    dataset: Dataset,
    seed: int,
    int8: bool = False,
):
    rng = Rng(seed + _QUANTIZE_SEED_OFFSET)
    cnet = quantize_iterative(net, net, ipq_config(config, net), dataset, rng)
    if int8:
        calib = _calibration_batches(dataset) if config.quantize_activations else None
        cnet = combine_with_int8(cnet, calib)
    return cnet.net, to_model(cnet), cnet


def eval_metric(net: Network, dataset: Dataset) -> float:
    loss, acc = evaluate(net, dataset.x_val, dataset.y_val)
    if dataset.metric == "char_perplexity":
        return math.exp(loss)
    return acc


def run_single(config: ExperimentConfig, seed: int) -> list[ResultRow]:
    """Train once, then evaluate the baseline and every configured scheme."""
    dataset, vocab = make_dataset(config, seed)
    net = build_net(config, seed, vocab)
    train(net, dataset, train_config(config, seed))
    mode = _mode_label(config)
    rows = []
    base = size_report(raw_model(net))
    rows.append(
        ResultRow(config.task, "none", mode, seed, base.total_bytes, base.ratio, eval_metric(net, dataset))
    )
    for scheme in config.schemes:
        try:
            rows.append(_scheme_row(config, scheme, net, dataset, seed, mode))
        except Exception as e:  # record, keep going
            rows.append(
                ResultRow(config.task, scheme, mode, seed, 0, float("nan"), float("nan"), f"failed:{type(e).__name__}")
            )
    return rows


def _scheme_row(config, scheme, net, dataset, seed, mode) -> ResultRow:
    if scheme in ("int4", "int8"):
        bits = 4 if scheme == "int4" else 8
        qnet, model = apply_intn_scheme(
            net, bits, dataset, config.calibration, config.quantize_activations
        )
    elif scheme == "ipq":
        qnet, model, _ = apply_ipq_scheme(net, config, dataset, seed, int8=False)
    elif scheme == "ipq_int8":
        qnet, model, _ = apply_ipq_scheme(net, config, dataset, seed, int8=True)
    else:
        raise ConfigError(f"unknown scheme {scheme!r}")
    rep = size_report(model)
    return ResultRow(
        config.task, scheme, mode, seed, rep.total_bytes, rep.ratio, eval_metric(qnet, dataset)
    )


def _mode_label(config: ExperimentConfig) -> str:
    if config.noise_mode == "quant-noise":
        spec = noise_specs(config)[0]
        return f"quant-noise(p={spec.rate:g},{spec.kind})"
    return config.noise_mode


def run_experiment(config: ExperimentConfig) -> list[ResultRow]:
    rows: list[ResultRow] = []
    for seed in config.seeds:
        try:
            rows.extend(run_single(config, seed))
        except Exception as e:
            rows.append(
                ResultRow(config.task, "none", _mode_label(config), seed, 0, float("nan"), float("nan"), f"failed:{type(e).__name__}")
            )
    return rows


def sweep_points(config: ExperimentConfig, axis: str, values=None):
    """(label, patched-config) per grid point."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    if axis == "noise_rate":
        vals = tuple(values) if values is not None else SWEEP_RATES
        out = []
        for v in vals:
            noise = dict(config.noise)
            noise["p"] = v
            out.append((v, replace(config, noise_mode="quant-noise", noise=noise)))
        return out
    if axis == "centroids":
        vals = tuple(values) if values is not None else (16, 64, 256, 1024)
        out = []
        for v in vals:
            ipq = dict(config.ipq)
            ipq["k"] = int(v)
            out.append((v, replace(config, ipq=ipq)))
        return out
    if axis == "block_size":
        vals = tuple(values) if values is not None else (2, 4, 8)
        out = []
        for v in vals:
            ipq = dict(config.ipq)
            ipq["block_size_default"] = int(v)
            out.append((v, replace(config, ipq=ipq)))
        return out
    # structure_order: permutations of layer-kind classes
    import itertools

    kinds = tuple(values) if values is not None else ("embedding", "ffn", "classifier")
    out = []
    for perm in itertools.permutations(kinds):
        ipq = dict(config.ipq)
        ipq["order"] = list(perm)
        out.append(("-".join(perm), replace(config, ipq=ipq)))
    return out


def run_sweep(
    config: ExperimentConfig, axis: str, values=None, jobs: int = 1
) -> tuple[list[tuple], list[ResultRow]]:
    """One experiment per grid point; returns (point, rows) pairs and all rows.

    Grid points share no state, so with jobs > 1 they run in a process pool;
    results are identical either way and keep grid order.
    """
    points = sweep_points(config, axis, values)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows_per_point = list(pool.map(run_experiment, [cfg for _, cfg in points]))
    else:
        rows_per_point = [run_experiment(cfg) for _, cfg in points]
    results = [(label, rows) for (label, _), rows in zip(points, rows_per_point)]
    all_rows = [r for rows in rows_per_point for r in rows]
    return results, all_rows


def _row_order(r: ResultRow):
    scheme_rank = SCHEME_ORDER.index(r.scheme) if r.scheme in SCHEME_ORDER else len(SCHEME_ORDER)
    return (scheme_rank, r.mode, r.seed)


def report_csv(rows: list[ResultRow]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["task", "scheme", "mode", "seed", "size_bytes", "compression", "metric", "status"])
    for r in sorted(rows, key=_row_order):
        w.writerow([r.task, r.scheme, r.mode, r.seed, r.size_bytes, repr(r.compression), repr(r.metric), r.status])
    return out.getvalue()


def report_markdown(rows: list[ResultRow]) -> str:
    """Table-shaped summary: size, compression, metric median across seeds."""
    if not rows:
        raise ValueError("no rows to report")
    metric_name = "PPL" if rows[0].task == "char-lm" else "Accuracy"
    groups: dict[tuple[str, str], list[ResultRow]] = {}
    for r in sorted(rows, key=_row_order):
        groups.setdefault((r.scheme, r.mode), []).append(r)
    lines = [
        f"| Scheme | Mode | Size (bytes) | Compression | {metric_name} (median) |",
        "|---|---|---|---|---|",
    ]
    for (scheme, mode), grp in groups.items():
        ok = [g for g in grp if g.status == "ok"]
        if ok:
            med = statistics.median(g.metric for g in ok)
            size = max(g.size_bytes for g in ok)
            ratio = statistics.median(g.compression for g in ok)
            lines.append(f"| {scheme} | {mode} | {size} | x{ratio:.1f} | {med:.4f} |")
        else:
            lines.append(f"| {scheme} | {mode} | - | - | {grp[0].status} |")
    return "\n".join(lines) + "\n"


def sweep_plot_csv(results: list[tuple]) -> str:
    """Plot-ready rows: one line per (x, scheme, mode) with median/min/max."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["x", "scheme", "mode", "median", "min", "max"])
    for label, rows in results:
        groups: dict[tuple[str, str], list[float]] = {}
        for r in sorted(rows, key=_row_order):
            if r.status == "ok" and not math.isnan(r.metric):
                groups.setdefault((r.scheme, r.mode), []).append(r.metric)
        for (scheme, mode), metrics in groups.items():
            w.writerow([label, scheme, mode, repr(statistics.median(metrics)), repr(min(metrics)), repr(max(metrics))])
    return out.getvalue()
