"""Command-line harness.

Subcommands: train, quantize, eval, sweep, report. Each takes --config (JSON,
schema documented in the README), an optional --seed override, and --out for
artifacts. Exit code 0 on success, 2 on config or input errors.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .bench import (
    ConfigError,
    ExperimentConfig,
    ResultRow,
    apply_intn_scheme,
    apply_ipq_scheme,
    build_net,
    eval_metric,
    make_dataset,
    raw_model,
    report_csv,
    report_markdown,
    run_sweep,
    sweep_plot_csv,
    train_config,
)
from .ipq import layer_report_csv
from .model_store import ModelFormatError, load_model, save_model, size_report
from .tensors import dequantize_tensor
from .train_core import history_to_csv, train


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        config = ExperimentConfig.from_dict({**_config_dict(config), "seeds": [args.seed]})
    return config


def _config_dict(config: ExperimentConfig) -> dict:
    return {
        "task": config.task,
        "model": config.model,
        "train": config.train,
        "noise_mode": config.noise_mode,
        "noise": config.noise,
        "schemes": list(config.schemes),
        "seeds": list(config.seeds),
        "ipq": config.ipq,
        "calibration": config.calibration,
        "quantize_activations": config.quantize_activations,
        "dataset": config.dataset,
        "sweep": config.sweep,
    }


def _net_from_model(config: ExperimentConfig, model, vocab):
    net = build_net(config, config.seeds[0], vocab)
    for store in net.stores():
        if store.name not in model:
            raise ConfigError(f"checkpoint is missing tensor {store.name!r}")
        store.weight[:] = dequantize_tensor(model[store.name])
        bias_name = store.name + ".bias"
        if store.bias is not None and bias_name in model:
            store.bias[:] = dequantize_tensor(model[bias_name]).reshape(-1)
    return net


def cmd_train(args) -> int:
    config = _load_config(args)
    seed = config.seeds[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, vocab = make_dataset(config, seed)
    net = build_net(config, seed, vocab)
    _, history = train(net, dataset, train_config(config, seed))
    save_model(raw_model(net), out / "model.qnz")
    (out / "metrics.csv").write_text(history_to_csv(history))
    print(f"trained seed {seed}: final accuracy {history[-1]['accuracy']:.4f}")
    print(f"wrote {out / 'model.qnz'} and {out / 'metrics.csv'}")
    return 0


def cmd_quantize(args) -> int:
    config = _load_config(args)
    if not config.schemes:
        raise ConfigError("config.schemes is empty; nothing to quantize")
    seed = config.seeds[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = args.model or out / "model.qnz"
    dataset, vocab = make_dataset(config, seed)
    net = _net_from_model(config, load_model(model_path), vocab)
    size_lines = ["scheme,size_bytes,baseline_bytes,compression"]
    for scheme in config.schemes:
        if scheme in ("int4", "int8"):
            bits = 4 if scheme == "int4" else 8
            _, model = apply_intn_scheme(net, bits, dataset, config.calibration, config.quantize_activations)
        else:
            _, model, cnet = apply_ipq_scheme(net, config, dataset, seed, int8=scheme == "ipq_int8")
            (out / f"{scheme}_layers.csv").write_text(layer_report_csv(cnet))
        save_model(model, out / f"{scheme}.qnz")
        rep = size_report(model)
        size_lines.append(f"{scheme},{rep.total_bytes},{rep.baseline_bytes},{rep.ratio!r}")
        print(f"{scheme}: {rep.total_bytes} bytes, x{rep.ratio:.1f}")
    (out / "sizes.csv").write_text("\n".join(size_lines) + "\n")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    seed = config.seeds[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = args.model or out / "model.qnz"
    dataset, vocab = make_dataset(config, seed)
    net = _net_from_model(config, load_model(model_path), vocab)
    metric = eval_metric(net, dataset)
    name = "char_perplexity" if dataset.metric == "char_perplexity" else "accuracy"
    (out / "eval.csv").write_text(f"metric,value\n{name},{metric!r}\n")
    print(f"{name}: {metric:.4f}")
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    axis = args.axis or config.sweep.get("axis")
    if not axis:
        raise ConfigError("sweep axis missing: pass --axis or set sweep.axis in the config")
    values = config.sweep.get("values")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results, rows = run_sweep(config, axis, values, jobs=args.jobs)
    (out / "rows.csv").write_text(report_csv(rows))
    (out / "plot.csv").write_text(sweep_plot_csv(results))
    (out / "report.md").write_text(report_markdown(rows))
    failed = sum(1 for r in rows if r.status != "ok")
    print(f"swept {axis}: {len(results)} points, {len(rows)} rows, {failed} failed")
    print(f"wrote {out / 'rows.csv'}, {out / 'plot.csv'}, {out / 'report.md'}")
    return 0


def _parse_rows(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            rows.append(
                ResultRow(
                    task=rec["task"],
                    scheme=rec["scheme"],
                    mode=rec["mode"],
                    seed=int(rec["seed"]),
                    size_bytes=int(rec["size_bytes"]),
                    compression=float(rec["compression"]),
                    metric=float(rec["metric"]),
                    status=rec["status"],
                )
            )
    if not rows:
        raise ConfigError(f"no rows found in {path}")
    return rows


def cmd_report(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows_path = args.rows or out / "rows.csv"
    rows = _parse_rows(rows_path)
    (out / "report.md").write_text(report_markdown(rows))
    (out / "rows_sorted.csv").write_text(report_csv(rows))
    print(f"wrote {out / 'report.md'} from {len(rows)} rows")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="qnz", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed list")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("train", help="train a model and save the checkpoint")
    add_common(p)
    p = sub.add_parser("quantize", help="apply the configured schemes to a checkpoint")
    add_common(p)
    p.add_argument("--model", default=None, help="checkpoint path (default <out>/model.qnz)")
    p = sub.add_parser("eval", help="evaluate a (possibly compressed) checkpoint")
    add_common(p)
    p.add_argument("--model", default=None, help="checkpoint path (default <out>/model.qnz)")
    p = sub.add_parser("sweep", help="run an ablation sweep")
    add_common(p)
    p.add_argument("--axis", default=None, help="noise_rate | centroids | block_size | structure_order")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes for grid points")
    p = sub.add_parser("report", help="rebuild tables from an existing rows.csv")
    add_common(p, config_required=False)
    p.add_argument("--rows", default=None, help="rows CSV (default <out>/rows.csv)")

    args = parser.parse_args(argv)
    handlers = {
        "train": cmd_train,
        "quantize": cmd_quantize,
        "eval": cmd_eval,
        "sweep": cmd_sweep,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, ModelFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
