"""``s3t`` command-line driver.

Exit codes: 0 ok, 2 invalid config or arguments, 3 data problems, 4 numeric abort.
``S3T_THREADS`` caps BLAS threads (default 1, fully deterministic).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint
from .config import ALL_FLAGS, BUILDUP_STEPS, ConfigError, RunConfig, from_dict, load_json, buildup_config, to_dict
from .data import SklError, SynthSpec, atomic_write, read_skl, synth_generate, write_skl
from .energy import E_AC_PJ, E_MAC_PJ, OpCounter, energy, firing_rates, firing_rates_csv
from .model import S3TFormer
from .training import NumericError, run_batches, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError("", f"{self.prog}: {message}")


def _load(cls, path):
    try:
        return from_dict(cls, load_json(path))
    except OSError as e:
        raise ConfigError("", f"cannot read {path}: {e.strerror}") from None


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _dataset(path, n_nodes: int | None = None):
    try:
        return read_skl(path, n_nodes)
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    except SklError as e:
        raise DataError(f"{path}: {e}") from None


def _subset(ds, subset: str, split: str):
    if subset == "all":
        return ds
    tr, te = ds.split(split)
    return tr if subset == "train" else te


def load_run_data(rc: RunConfig, base: Path, model: S3TFormer):
    """Train and validation arrays for a run config; paths are relative to the config file."""
    n = model.N
    train_ds = _dataset(_resolve(base, rc.data.train), n)
    if rc.data.test is not None:
        test_ds = _dataset(_resolve(base, rc.data.test), n)
    else:
        train_ds, test_ds = train_ds.split(rc.data.split)
    if len(train_ds) == 0:
        raise DataError("training set is empty")
    cfg = model.cfg
    try:
        Xtr, ytr = train_ds.to_arrays(cfg.T, model.graph.root, cfg.M)
        Xte, yte = test_ds.to_arrays(cfg.T, model.graph.root, cfg.M)
    except ValueError as e:
        raise DataError(str(e)) from None
    for y in (ytr, yte):
        if len(y) and y.max() >= cfg.n_classes:
            raise DataError(f"label {int(y.max())} outside the {cfg.n_classes} model classes")
    return Xtr, ytr, Xte, yte


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if out:
        atomic_write(out, text + "\n")
    print(text)


# --------------------------------------------------------------------------- #
# commands


def cmd_synth(a) -> int:
    spec = _load(SynthSpec, a.spec)
    try:
        ds = synth_generate(spec)
    except ValueError as e:
        raise ConfigError("", str(e)) from None
    write_skl(a.out, ds)
    print(json.dumps({"sequences": len(ds), "nodes": ds.n_nodes, "out": str(a.out)}))
    return EXIT_OK


def cmd_train(a) -> int:
    rc = _load(RunConfig, a.config)
    base = Path(a.config).resolve().parent
    model = S3TFormer(rc.model)
    Xtr, ytr, Xte, yte = load_run_data(rc, base, model)
    out_dir = Path(a.out_dir) if a.out_dir else _resolve(base, rc.out_dir)
    summary = {"arch_hash": rc.model.arch_hash(), "params": model.n_params(), "train": len(ytr), "test": len(yte),
               "out_dir": str(out_dir)}
    if a.dry_run:
        print(json.dumps({"dry_run": True, **summary}))
        return EXIT_OK
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write(out_dir / "config.json", json.dumps(to_dict(rc), indent=2, sort_keys=True) + "\n")
    log = (lambda r: print(json.dumps(r, sort_keys=True), flush=True)) if a.verbose else None
    res = train(model, Xtr, ytr, Xte, yte, rc.train, out_dir, resume=a.resume, log=log)
    final = res.history[-1] if res.history else {}
    print(json.dumps({**summary, "best_epoch": res.best_epoch, "best": res.best_val, "final": final.get("val_acc")}))
    return EXIT_OK


def _ckpt(path):
    try:
        return checkpoint.load_model(path)[0]
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    except checkpoint.CheckpointError as e:
        raise DataError(str(e)) from None


def _eval_arrays(model, a):
    ds = _subset(_dataset(a.data, model.N), a.subset, a.split)
    if len(ds) == 0:
        raise DataError(f"{a.data}: no sequences to evaluate")
    try:
        X, y = ds.to_arrays(model.cfg.T, model.graph.root, model.cfg.M)
    except ValueError as e:
        raise DataError(str(e)) from None
    return X, y


def cmd_eval(a) -> int:
    models = [_ckpt(p) for p in a.ckpt]
    X, y = _eval_arrays(models[0], a)
    logits = np.mean([run_batches(m, X, a.batch_size)[-1] for m in models], axis=0)
    pred = np.argmax(logits, axis=-1)
    report = {
        "accuracy": float(np.mean(pred == y)),
        "n": int(len(y)),
        "checkpoints": [str(p) for p in a.ckpt],
        "correct": int(np.sum(pred == y)),
    }
    _emit(report, a.out)
    return EXIT_OK


def cmd_profile(a) -> int:
    model = _ckpt(a.ckpt)
    X, _ = _eval_arrays(model, a)
    if a.limit:
        X = X[: a.limit]
    counter = OpCounter()
    for i in range(0, len(X), a.batch_size):
        model.forward(X[i : i + a.batch_size].swapaxes(0, 1), "infer", counter=counter, folded=True)
    rep = energy(counter, a.pj_per_mac, a.pj_per_ac)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "energy.json", rep.dumps())
    atomic_write(out / "firing_rates.csv", firing_rates_csv(firing_rates(counter)))
    print(json.dumps({"e_snn_mj": rep.e_snn_mj, "ratio": rep.snn_to_ann_ratio, "samples": len(X)}))
    return EXIT_OK


def _flag_list(values) -> list[str]:
    flags = []
    for v in values or []:
        flags += [f.strip() for f in v.split(",") if f.strip()]
    return flags


def cmd_ablate(a) -> int:
    rc = _load(RunConfig, a.config)
    base = Path(a.config).resolve().parent
    disabled = _flag_list(a.disable)
    rc.model.with_flags(disabled)  # validates flag names before any data is touched
    if a.buildup:
        rows = [(f"step{s}", buildup_config(rc.model, s)) for s in BUILDUP_STEPS]
    else:
        rows = [("+".join(disabled) or "full", rc.model.with_flags(disabled))]
    seeds = [int(s) for s in a.seeds.split(",")]
    table = []
    data = None
    for tag, mcfg in rows:
        accs = []
        for seed in seeds:
            run = RunConfig(model=_replace_seed(mcfg, seed), train=_replace_seed(rc.train, seed), data=rc.data)
            model = S3TFormer(run.model)
            if data is None:
                data = load_run_data(run, base, model)
            res = train(model, *data, run.train)
            accs.append(res.final["val_acc"] if res.final["val_acc"] is not None else res.final["train_acc"])
        row = {"row": tag, "flags": mcfg.flags(), "arch_hash": mcfg.arch_hash(), "seeds": seeds, "acc": accs,
               "mean_acc": float(np.mean(accs))}
        table.append(row)
        print(json.dumps(row, sort_keys=True), flush=True)
    if a.out:
        atomic_write(a.out, "".join(json.dumps(r, sort_keys=True) + "\n" for r in table))
    return EXIT_OK


def _replace_seed(obj, seed):
    return dataclasses.replace(obj, seed=seed)


def cmd_inspect_topology(a) -> int:
    model = _ckpt(a.ckpt)
    L, H = len(model.blocks), model.cfg.H
    if not 1 <= a.block <= L:
        raise ConfigError("block", f"block {a.block} out of range [1, {L}]")
    if not 1 <= a.head <= H:
        raise ConfigError("head", f"head {a.head} out of range [1, {H}]")
    a_dyn = model.topology(a.block)[a.head - 1]
    text = "".join(",".join(f"{v:.9g}" for v in row) + "\n" for row in a_dyn)
    if a.out:
        atomic_write(a.out, text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = Parser(prog="s3t", description="Spike-driven skeleton action recognition.", formatter_class=fmt)
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=Parser)

    s = sub.add_parser("synth", help="generate a synthetic .skl dataset", formatter_class=fmt)
    s.add_argument("spec", help="synthetic dataset spec (JSON)")
    s.add_argument("out", help="output .skl file")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train a model from a run config", formatter_class=fmt)
    s.add_argument("config", help="run config (JSON)")
    s.add_argument("--out-dir", default=None, help="override the config's out_dir")
    s.add_argument("--resume", default=None, help="checkpoint to resume from")
    s.add_argument("--dry-run", action="store_true", help="validate config and data, then exit")
    s.add_argument("--verbose", action="store_true", help="print each epoch's metrics")
    s.set_defaults(fn=cmd_train)

    def data_args(s):
        s.add_argument("--data", required=True, help=".skl dataset")
        s.add_argument("--subset", choices=("all", "train", "test"), default="all", help="part of the split to use")
        s.add_argument("--split", choices=("subject", "view", "none"), default="subject", help="split protocol")
        s.add_argument("--batch-size", type=int, default=64, help="evaluation batch size")

    s = sub.add_parser("eval", help="accuracy of one checkpoint or a logit-averaged ensemble", formatter_class=fmt)
    s.add_argument("--ckpt", action="append", required=True, help="checkpoint; repeat to ensemble")
    data_args(s)
    s.add_argument("--out", default=None, help="write the JSON report here")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("profile", help="energy and firing-rate report", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="checkpoint")
    data_args(s)
    s.add_argument("--out-dir", default=".", help="directory for energy.json and firing_rates.csv")
    s.add_argument("--pj-per-mac", type=float, default=E_MAC_PJ, help="energy per MAC (pJ)")
    s.add_argument("--pj-per-ac", type=float, default=E_AC_PJ, help="energy per AC (pJ)")
    s.add_argument("--limit", type=int, default=0, help="profile at most this many samples (0 = all)")
    s.set_defaults(fn=cmd_profile)

    s = sub.add_parser("ablate", help="train with component flags disabled", formatter_class=fmt)
    s.add_argument("config", help="run config (JSON)")
    s.add_argument("--disable", action="append", default=None, help=f"comma-separated flags from {','.join(ALL_FLAGS)}")
    s.add_argument("--buildup", action="store_true", help="run the six-step progressive build-up")
    s.add_argument("--seeds", default="0", help="comma-separated seeds")
    s.add_argument("--out", default=None, help="write the table as JSON lines")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("inspect-topology", help="export a dynamic routing matrix as CSV", formatter_class=fmt)
    s.add_argument("--ckpt", required=True, help="checkpoint")
    s.add_argument("--block", type=int, default=1, help="block index (1-based)")
    s.add_argument("--head", type=int, default=1, help="head index (1-based)")
    s.add_argument("--out", default=None, help="CSV output (stdout if omitted)")
    s.set_defaults(fn=cmd_inspect_topology)
    return p


def main(argv=None) -> int:
    try:
        threads = int(os.environ.get("S3T_THREADS", "1"))
    except ValueError:
        print("error: S3T_THREADS must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    limit = threadpool_limits(max(threads, 1)) if threads > 0 else nullcontext()
    try:
        with limit:
            return args.fn(args)
    except json.JSONDecodeError as e:
        print(f"error: malformed JSON at line {e.lineno} column {e.colno}: {e.msg}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
