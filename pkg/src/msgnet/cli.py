"""Command-line harness: gradient checks, scale-table regression, dataset
generation, toy training, evaluation, and sparsity benchmarks.

Every subcommand is deterministic under a fixed seed; reports are JSON or
CSV. Timing fields are the one nondeterministic output and can be dropped
with --no-timing where supported.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .apl import gamma_table
from .gradcheck import run_suite
from .model import ModelConfig, MSGNet, load_checkpoint, save_checkpoint
from .sparsegraph import (
    GraphConfig,
    NodeSet,
    dense_attention_reference,
    edge_cost,
    prune,
    score_dense,
    sparse_forward_reference,
)
from .synth import make_dataset
from .tensor import Tensor
from .train import TrainConfig, evaluate, train_toy


def _emit(text, out_path):
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# config files: flat key=value text


def _coerce(value, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        return tuple(float(v) for v in value.split(","))
    return value


def load_train_config(path=None, overrides=None):
    kv = dict(overrides or {})
    if path:
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if not _:
                raise SystemExit(f"bad config line (expected key=value): {line!r}")
            kv[key.strip()] = value.strip()
    cfg = TrainConfig()
    t_fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    m_fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    for key, value in kv.items():
        if key == "precision":
            if value not in ("f32", "f64"):
                raise SystemExit(f"precision must be f32 or f64, got {value!r}")
            cfg.model.dtype = np.float64 if value == "f64" else np.float32
        elif key in ("time_budget_s", "max_samples") and key in t_fields:
            setattr(cfg, key, float(value) if key == "time_budget_s" else int(value))
        elif key in m_fields and key != "model":
            cur = getattr(cfg.model, key)
            setattr(cfg.model, key, _coerce(value, cur))
        elif key in t_fields and key != "model":
            setattr(cfg, key, _coerce(value, getattr(cfg, key)))
        else:
            raise SystemExit(f"unknown config key: {key}")
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gradcheck(args):
    report, ok = run_suite(seed=args.seed, corrupt=args.corrupt)
    payload = {"seed": args.seed, "ok": bool(ok), "checks": report}
    _emit(json.dumps(payload, indent=2, sort_keys=True) + "\n", args.out)
    return 0 if ok else 1


def cmd_gamma_table(args):
    lines = ["lambda,gamma"]
    lines += [f"{lam},{g}" for lam, g in gamma_table()]
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_synth_gen(args):
    n_val = args.n_val if args.n_val is not None else max(1, args.n // 5)
    make_dataset(args.n, args.seed, "train", args.out)
    make_dataset(n_val, args.seed, "val", args.out)
    print(f"wrote {args.n} train / {n_val} val pairs under {args.out}")
    return 0


def cmd_train_toy(args):
    cfg = load_train_config(args.config)
    rows = []

    def log(row):
        vals = " ".join(
            f"{k}={row[k]:.4f}" if isinstance(row[k], float) else f"{k}={row[k]}"
            for k in row
            if row[k] is not None
        )
        print(vals, flush=True)

    model, rows = train_toy(cfg, log=log)
    if args.metrics:
        cols = ["epoch", "box_loss", "dfl_loss", "cls_loss", "lambda_loss", "val_ap50"]
        lines = [",".join(cols)]
        for row in rows:
            cells = [str(row["epoch"])]
            cells += [
                "" if row[c] is None else repr(float(row[c])) for c in cols[1:]
            ]
            lines.append(",".join(cells))
        Path(args.metrics).write_text("\n".join(lines) + "\n")
    if args.checkpoint:
        save_checkpoint(model, args.checkpoint)
    return 0


def cmd_eval(args):
    cfg = load_train_config(args.config)
    rng = np.random.default_rng(cfg.seed)
    model = MSGNet(rng, cfg.model)
    load_checkpoint(model, args.checkpoint)
    metrics = evaluate(model, args.data, config=cfg)
    _emit(json.dumps(metrics, indent=2, sort_keys=True) + "\n", args.out)
    return 0


def _bench_instance(rng, n, d=16):
    src = rng.standard_normal((n, d))
    dst = rng.standard_normal((n, d))
    wq, wk = rng.standard_normal((2, d, d)) / np.sqrt(d)
    wv, wo = rng.standard_normal((2, d, d)) / np.sqrt(d)
    raw, gate = score_dense(
        NodeSet(Tensor(src), "thermal", None),
        NodeSet(Tensor(dst), "rgb", None),
        Tensor(wq),
        Tensor(wk),
    )
    return src, dst, wv, wo, raw.data, gate.data


def cmd_bench(args):
    rows = []
    d = 16
    for n in (64, 256, 1024):
        rng = np.random.default_rng([args.seed, n])
        src, dst, wv, wo, raw, gate = _bench_instance(rng, n, d)
        for k in (10, 25, 50, 100):
            for tau in (0.0, 0.25, 0.5, 0.75):
                graph = prune(raw, gate, GraphConfig(tau=tau, k=k, d_embed=d))
                cost = edge_cost(graph)
                row = {
                    "n": n,
                    "k": k,
                    "tau": tau,
                    "num_edges": graph.num_edges,
                    **cost,
                    "stage_ratio": cost["stage_dense"] / max(cost["stage_sparse"], 1),
                    "macs_ratio": cost["macs_dense"] / max(cost["macs_sparse"], 1),
                }
                if not args.no_timing and n == 1024:
                    row.update(_time_aggregation(graph, raw, src, dst, wv, wo))
                rows.append(row)
    _emit(json.dumps({"seed": args.seed, "rows": rows}, indent=2) + "\n", args.out)
    return 0


def _time_aggregation(graph, raw, src, dst, wv, wo, repeats=20):
    v = src @ wv  # shared projection excluded from both timings
    t0 = time.perf_counter()
    for _ in range(repeats):
        sparse_forward_reference(graph, raw, src, dst, wv, wo)
    t_sparse = (time.perf_counter() - t0) / repeats
    t0 = time.perf_counter()
    for _ in range(repeats):
        dense_attention_reference(raw, src, dst, wv, wo)
    t_dense = (time.perf_counter() - t0) / repeats
    del v
    return {
        "wall_sparse_s": t_sparse,
        "wall_dense_s": t_dense,
        "wall_ratio": t_dense / t_sparse if t_sparse > 0 else float("inf"),
    }


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="msgnet")
    sub = p.add_subparsers(dest="task", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None)
    g.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    g.set_defaults(fn=cmd_gradcheck)

    g = sub.add_parser("gamma-table", help="lambda -> gamma mapping as CSV")
    g.add_argument("--out", default=None)
    g.set_defaults(fn=cmd_gamma_table)

    g = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--n-val", type=int, default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_synth_gen)

    g = sub.add_parser("train-toy", help="train the full stack on synthetic data")
    g.add_argument("--config", default=None, help="flat key=value config file")
    g.add_argument("--checkpoint", default=None)
    g.add_argument("--metrics", default=None, help="per-epoch CSV path")
    g.set_defaults(fn=cmd_train_toy)

    g = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--data", required=True, help="split directory")
    g.add_argument("--config", default=None)
    g.add_argument("--out", default=None)
    g.set_defaults(fn=cmd_eval)

    g = sub.add_parser("bench", help="sparse vs dense aggregation cost table")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-timing", action="store_true", help="omit wall-clock fields")
    g.add_argument("--out", default=None)
    g.set_defaults(fn=cmd_bench)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
