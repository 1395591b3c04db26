"""Command-line entry points: generate | train | eval | compare | ground | sweep.

Errors exit nonzero after printing a single machine-readable JSON line to
stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys

from . import harness, synthdata, tasks
from .harness import ConfigError

GEN_FIELDS = {
    "version": int,
    "scenes": int,
    "canvas": int,
    "classes": int,
    "parts_per_class": int,
    "objects_min": int,
    "objects_max": int,
    "noise_std": float,
    "min_object_side": int,
    "max_object_side": int,
    "seed": int,
}

GEN_DEFAULTS = {"scenes": 500}


def parse_dataset_config(text: str):
    """Flat key=value description of a synthetic dataset."""
    values = dict(GEN_DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in GEN_FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = GEN_FIELDS[key](raw)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key!r}") from None
    if values.get("version") != 1:
        raise ConfigError("dataset config needs 'version = 1'")
    n = values.pop("scenes")
    values.pop("version")
    rename = {"classes": "n_classes"}
    spec = synthdata.SceneSpec(**{rename.get(k, k): v for k, v in values.items()})
    return spec, n


def _cmd_generate(args):
    with open(args.config) as f:
        spec, n = parse_dataset_config(f.read())
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    scenes = synthdata.generate_dataset(spec, n)
    synthdata.write_dataset(scenes, spec, args.out)
    print(f"wrote {n} scenes to {args.out}")


def _load_run(args):
    config = harness.load_config(args.config)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if args.mode is not None:
        config = dataclasses.replace(config, mode=args.mode)
    if args.iterations is not None:
        config = dataclasses.replace(config, iterations=args.iterations)
    return config


def _cmd_train(args):
    config = _load_run(args)
    spec, scenes = synthdata.read_dataset(args.dataset)
    resume = None
    if args.resume:
        resume = harness.restore_model(harness.load_checkpoint(args.resume))
    state = harness.train(config, spec, scenes, resume=resume, log=print)
    harness.save_checkpoint(state, args.out)
    print(f"checkpoint written to {args.out}")
    if args.loss_curve:
        with open(args.loss_curve, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "mean_loss"])
            for i, v in enumerate(state.history, 1):
                w.writerow([i, f"{v:.6f}"])


def _cmd_eval(args):
    state = harness.restore_model(harness.load_checkpoint(args.checkpoint))
    spec, scenes = synthdata.read_dataset(args.dataset)
    metrics = harness.evaluate_model(state.model, spec, scenes)
    rows = tasks.metrics_to_rows(
        args.run_id, state.config.mode, state.model.cfg.t, state.config.seed, metrics
    )
    harness.write_metrics_csv(args.out, rows)
    print(f"cls mAP {metrics['cls_map']:.3f}  det AP {metrics['det_ap']:.3f}"
          + ("" if metrics["part_ap"] is None else f"  part AP {metrics['part_ap']:.3f}"))


def _cmd_compare(args):
    config = _load_run(args)
    spec, train_scenes = synthdata.read_dataset(args.dataset)
    _, val_scenes = synthdata.read_dataset(args.val_dataset)
    results, medians = harness.compare_modes(
        config, spec, train_scenes, val_scenes, log=print
    )
    seeds = config.seed_list()
    table = harness.comparison_table(results, medians, seeds)
    print(table)
    harness.write_metrics_csv(args.out, harness.comparison_rows(results))
    if args.table:
        with open(args.table, "w") as f:
            f.write(table + "\n")


def _cmd_ground(args):
    state = harness.restore_model(harness.load_checkpoint(args.checkpoint))
    spec, scenes = synthdata.read_dataset(args.dataset)
    res = harness.ground_experiment(state, spec, scenes)
    for cond in ("ungrounded", "grounded"):
        m = res[cond]
        print(f"{cond}: cls mAP {m['cls_map']:.3f}  det AP {m['det_ap']:.3f}"
              + ("" if m["part_ap"] is None else f"  part AP {m['part_ap']:.3f}"))
    print("deltas: " + json.dumps({k: round(v, 4) for k, v in res["deltas"].items()}))
    if args.out:
        rows = []
        for cond in ("ungrounded", "grounded"):
            rows.extend(
                tasks.metrics_to_rows(cond, state.config.mode, 1, state.config.seed, res[cond])
            )
        harness.write_metrics_csv(args.out, rows)


def _cmd_sweep(args):
    state = harness.restore_model(harness.load_checkpoint(args.checkpoint))
    spec, scenes = synthdata.read_dataset(args.dataset)
    rows = harness.recurrence_sweep(state, spec, scenes, args.t_max)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "cls_map", "det_ap", "part_ap"])
        for r in rows:
            w.writerow([r["t"], f"{r['cls_map']:.6f}", f"{r['det_ap']:.6f}",
                        "" if r["part_ap"] is None else f"{r['part_ap']:.6f}"])
    for r in rows:
        print(r)


def build_parser():
    p = argparse.ArgumentParser(prog="multinet")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(fn=_cmd_generate)

    def run_flags(sp):
        sp.add_argument("--config", required=True)
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--mode")
        sp.add_argument("--iterations", type=int)

    t = sub.add_parser("train", help="train a model")
    run_flags(t)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--loss-curve")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--run-id", default="eval")
    e.set_defaults(fn=_cmd_eval)

    c = sub.add_parser("compare", help="train/evaluate all four modes")
    run_flags(c)
    c.add_argument("--val-dataset", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--table")
    c.set_defaults(fn=_cmd_compare)

    gr = sub.add_parser("ground", help="truth-grounding experiment")
    gr.add_argument("--checkpoint", required=True)
    gr.add_argument("--dataset", required=True)
    gr.add_argument("--out")
    gr.set_defaults(fn=_cmd_ground)

    s = sub.add_parser("sweep", help="metric-vs-recursion-depth curve")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--t-max", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except Exception as e:  # noqa: BLE001 - single machine-readable error line
        print(json.dumps({"error": str(e), "kind": type(e).__name__}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
