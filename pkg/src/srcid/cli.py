"""Command-line surface: datagen, train, eval, sweep.

Every run writes a resolved-config snapshot next to its outputs so it can
be reproduced from the snapshot alone. Exit codes: 0 success, 2 config
error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import evalharness, report, synthdata
from .model import NumericalAbort, SrcidModel, TrainConfig, train_model

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _load_cfg(args) -> dict:
    cfg = {}
    if args.config:
        cfg = cfgmod.load_config(args.config)
    cfg = cfgmod.apply_overrides(cfg, args.set or [])
    if args.seed is not None:
        cfg["train.seed"] = args.seed
        cfg["data.seed"] = args.seed
    return cfg


def _digest(cfg: dict) -> str:
    return hashlib.sha256(cfgmod.format_config(cfg).encode()).hexdigest()[:12]


def _snapshot(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_snapshot(cfg, out_dir / "resolved_config.txt")


def cmd_datagen(args) -> int:
    cfg = _load_cfg(args)
    spec = cfgmod.build_generator_spec(cfg)
    n = int(cfg.get("data.n_samples", 300))
    fractions = cfg.get("data.fractions", (0.8, 0.1, 0.1))
    ds = synthdata.generate(spec, n)
    train, val, test = synthdata.split(ds, fractions, seed=spec.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    synthdata.save_dataset(ds, out)
    _snapshot(cfg, out.parent)
    print(f"wrote {out}: {len(train)}/{len(val)}/{len(test)} train/val/test "
          f"({n} samples, T={spec.seq_len})")
    return 0


def _split_from_tags(ds):
    parts = {}
    for name in ("train", "val", "test"):
        parts[name] = ds.subset(np.flatnonzero(ds.split_tags == name))
    return parts


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    tc = cfgmod.build_train_config(cfg)
    ds = synthdata.load_dataset(args.data)
    parts = _split_from_tags(ds)
    train_ds = parts["train"] if len(parts["train"]) else ds
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, out)

    model = SrcidModel(dict(ds.spec.modality_dims), tc)
    trace_path = out / "trace.jsonl"
    with open(trace_path, "w") as tf:
        def on_epoch(row):
            tf.write(json.dumps(row, sort_keys=True) + "\n")
            if row["epoch"] % 10 == 0 or row.get("gate_activated_now"):
                print(f"epoch {row['epoch']:4d} total={row.get('total', float('nan')):.4f} "
                      f"mi1={row['mi_layer1']:.4f} gate={row['gate_active']}")

        trace = train_model(model, train_ds.batch, tc, len(train_ds), on_epoch=on_epoch)
    model.save(out / "checkpoint.srcid", model.gate)

    if trace:
        keys = sorted({k for row in trace for k in row})
        with open(out / "metrics.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            for row in trace:
                w.writerow(row)
        report.plot_trace(trace, out / "trace.png")
    print(f"wrote {out / 'checkpoint.srcid'} ({len(trace)} epochs)")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    model, gate = SrcidModel.load(args.checkpoint)
    ds = synthdata.load_dataset(args.data)
    parts = _split_from_tags(ds)
    train_ds = parts["train"] if len(parts["train"]) else ds
    eval_ds = parts["test"] if len(parts["test"]) else ds
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, out)

    tasks = args.tasks.split(",") if args.tasks else ["classification", "retrieval"]
    modes = [args.mode] if args.mode != "all" else ["only1", "both"]
    digest = _digest(cfg)
    reports = []
    seed = model.cfg.seed
    for mode in modes:
        for task in tasks:
            if task == "classification":
                for kind in ("coarse", "fine"):
                    reps, _ = evalharness.all_direction_accuracy(
                        model, train_ds, eval_ds, label_kind=kind, mode=mode, seed=seed)
                    reports.extend(reps)
            elif task == "retrieval":
                mods = list(model.modality_dims)
                ks = [k for k in (1, 5, 10) if k <= len(eval_ds)]
                for i, m1 in enumerate(mods):
                    for m2 in mods[i + 1:]:
                        reports.extend(evalharness.retrieval_eval(
                            model, eval_ds, m1, m2, ks=ks, mode=mode, seed=seed))
            else:
                print(f"unknown task: {task}", file=sys.stderr)
                return EXIT_CONFIG
    for r in reports:
        r.config_digest = digest
    evalharness.write_reports_csv(reports, out / "reports.csv")
    evalharness.write_reports_jsonl(reports, out / "reports.jsonl")
    report.plot_reports([r.row() for r in reports], out / "reports.png")
    stats = evalharness.codebook_stats(model, eval_ds)
    with open(out / "codebook_stats.json", "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
    print(f"wrote {len(reports)} report rows to {out / 'reports.csv'}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    tc = cfgmod.build_train_config(cfg)
    ds = synthdata.load_dataset(args.data)
    parts = _split_from_tags(ds)
    train_ds = parts["train"] if len(parts["train"]) else ds
    eval_ds = parts["test"] if len(parts["test"]) else ds
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(cfg, out)

    axis = args.axis
    if axis == "codebook_size":
        values = [int(v) for v in args.values.split(",")]
        variants = [(v, dataclasses.replace(tc, codebook_size=v)) for v in values]
    elif axis == "quant_method":
        values = args.values.split(",") if args.values else ["vq", "fsq", "rvq-2", "rvq-3", "rvq-4"]
        variants = [(v, dataclasses.replace(tc, quantizer=v)) for v in values]
    elif axis == "club_ablation":
        variants = [("full", tc),
                    ("no-club-1", dataclasses.replace(tc, club_disable_layers=(1,))),
                    ("no-club-2", dataclasses.replace(tc, club_disable_layers=(2,))),
                    ("no-club", dataclasses.replace(tc, club_disable_layers=(1, 2)))]
    else:
        print(f"unknown sweep axis: {axis}", file=sys.stderr)
        return EXIT_CONFIG

    rows = []
    for value, variant in variants:
        model = SrcidModel(dict(ds.spec.modality_dims), variant)
        train_model(model, train_ds.batch, variant, len(train_ds))
        _, cross_only1 = evalharness.all_direction_accuracy(
            model, train_ds, eval_ds, mode="only1", seed=variant.seed)
        _, cross_both = evalharness.all_direction_accuracy(
            model, train_ds, eval_ds, mode="both", seed=variant.seed)
        row = {axis: value, "cross_modal_accuracy_only1": cross_only1,
               "cross_modal_accuracy_both": cross_both,
               "seed": variant.seed}
        if model.kind != "fsq":
            stats = evalharness.codebook_stats(model, eval_ds)
            row["agreement_rate"] = stats["layer1"]["agreement_rate"]
            row["perplexity"] = stats["layer1"]["perplexity"]
        row["reconstruction_mse"] = evalharness.reconstruction_mse(model, eval_ds)
        rows.append(row)
        print(f"{axis}={value}: cross(only1)={cross_only1:.3f} cross(both)={cross_both:.3f}")

    keys = sorted({k for row in rows for k in row})
    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for row in rows:
            w.writerow(row)
    report.plot_sweep(rows, axis,
                      ["cross_modal_accuracy_only1", "cross_modal_accuracy_both"],
                      out / "sweep.png", title=f"sweep over {axis}")
    print(f"wrote {out / 'sweep.csv'} ({len(rows)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srcid",
                                description="train and evaluate semantic-residual "
                                            "discrete multimodal representations")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("datagen", help="generate a synthetic paired dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_datagen)

    sp = sub.add_parser("train", help="train a model on a dataset file")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--tasks", default="classification,retrieval")
    sp.add_argument("--mode", default="all", choices=["only1", "both", "all"])
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("sweep", help="ablation sweep: train+eval per value")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--axis", required=True,
                    choices=["codebook_size", "club_ablation", "quant_method"])
    sp.add_argument("--values", default="")
    sp.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (cfgmod.ConfigError, FileNotFoundError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
