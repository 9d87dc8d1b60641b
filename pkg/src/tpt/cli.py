"""Command line interface.

Subcommands: pretrain, gen-data, eval, fewshot-train, ablate, bongard,
dump-dist, gradcheck.  A key=value config file may set any flag; CLI
flags win.  TPT_THREADS caps evaluation parallelism.
"""

import argparse
import csv
import sys
from dataclasses import replace

import numpy as np

from . import bongard as bg
from . import data as dat
from . import harness as hz
from . import model as mdl
from .augment import AugmentPolicy
from .episode import TPTConfig


def _add_common(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", help="output path")


def _add_eval_flags(p):
    p.add_argument("--weights", required=True, help="trained weights file")
    p.add_argument("--shift", default=None, help="KIND[:PARAM], e.g. noise:0.3")
    p.add_argument("--aug", choices=["rrc", "augmix"], default=None)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--samples", type=int, default=None,
                   help="cap the number of evaluated samples")


def _run_config(args):
    file_cfg = hz.parse_config_file(args.config) if args.config else {}
    flags = {k: v for k, v in vars(args).items()
             if k not in ("config", "func", "command") and v is not None}
    return hz.merge_run_config(file_cfg, {k: str(v) for k, v in flags.items()})


def _get(cfg, key, cast, default):
    return cast(cfg[key]) if key in cfg else default


def _build_dataset(cfg):
    spec = dat.DatasetSpec(
        samples_per_class=_get(cfg, "samples_per_class", int, 64),
        noise_sigma=_get(cfg, "noise_sigma", float, 0.05),
        contrast=_get(cfg, "contrast", float, 0.35),
        contrast_min=_get(cfg, "contrast_min", float, 0.15))
    seed = _get(cfg, "data_seed", int, 1)
    ds = dat.generate(spec, seed=seed)
    if cfg.get("shift", "none") != "none":
        shift = dat.ShiftSpec.parse(cfg["shift"])
        ds = dat.apply_shift(ds, shift, seed=seed + 1)
    if "samples" in cfg:
        n = int(cfg["samples"])
        rng = np.random.default_rng(seed + 2)
        ds = ds.subset(np.sort(rng.permutation(len(ds))[:n]))
    return ds


def _tpt_config(cfg):
    policy = AugmentPolicy(kind=cfg.get("aug", "rrc"))
    return TPTConfig(
        n_views=_get(cfg, "views", int, 64),
        rho=_get(cfg, "rho", float, 0.1),
        steps=_get(cfg, "steps", int, 1),
        lr=_get(cfg, "lr", float, 0.005),
        seed=_get(cfg, "seed", int, 0),
        policy=policy)


def cmd_pretrain(args):
    cfg = _run_config(args)
    seed = _get(cfg, "seed", int, 0)
    mconfig = mdl.ModelConfig()
    ds = _build_dataset(cfg)
    pairs = dat.caption_pairs(ds)
    weights = mdl.init_weights(mconfig, seed=seed)
    epochs = _get(cfg, "epochs", int, 80)
    lr = _get(cfg, "pretrain_lr", float, 0.001)
    policy = AugmentPolicy(
        scale_range=(_get(cfg, "pretrain_crop_min", float, 0.8), 1.0),
        noise_patch_prob=_get(cfg, "noise_patch_prob", float, 0.3))
    weights, losses = mdl.pretrain_contrastive(
        weights, mconfig, pairs, epochs=epochs, lr=lr, seed=seed,
        augment_policy=policy,
        weight_decay=_get(cfg, "weight_decay", float, 0.1),
        embed_rescale=_get(cfg, "embed_rescale", float, 0.1))
    out = args.out or "weights.tptw"
    mdl.save_weights(weights, out)
    top1 = mdl.retrieval_top1(weights, mconfig, pairs[:64])
    print(f"final loss {losses[-1]:.4f}  retrieval@1 {top1:.3f}  -> {out}")
    return 0


def cmd_gen_data(args):
    cfg = _run_config(args)
    ds = _build_dataset(cfg)
    out = args.out or "dataset"
    manifest = dat.save_dataset(ds, out)
    print(f"{len(ds)} images -> {manifest}")
    return 0


def cmd_eval(args):
    cfg = _run_config(args)
    mconfig = mdl.ModelConfig()
    weights = mdl.load_weights(args.weights)
    ds = _build_dataset(cfg)
    classes = hz.class_set(ds)
    template = dat.template_ids()
    tcfg = _tpt_config(cfg)
    method = args.method
    traces = None
    if method == "zeroshot":
        acc, _ = hz.evaluate_zero_shot(weights, mconfig, template, classes, ds)
    elif method == "tpt":
        acc, _, traces = hz.evaluate_tpt(weights, mconfig, template, classes,
                                         ds, tcfg, record_traces=True)
    elif method == "ensemble":
        templates = [dat.tokenize(t) for t in dat.CAPTION_TEMPLATES]
        acc, _ = hz.prompt_ensemble(weights, mconfig, templates, classes, ds)
    elif method == "avgpred":
        acc, _ = hz.baseline_averaged_prediction(weights, mconfig, template,
                                                 classes, ds, tcfg)
    elif method == "vote":
        acc, _ = hz.baseline_majority_vote(weights, mconfig, template,
                                           classes, ds, tcfg)
    else:
        raise SystemExit(f"unknown method {method}")
    row = {"method": method, "shift": cfg.get("shift", "none"),
           "accuracy": acc, "n": len(ds), "seed": _get(cfg, "seed", int, 0)}
    if args.out:
        hz.write_results(args.out, [row], cfg)
        if traces is not None:
            hz.write_traces(args.out + ".traces.jsonl", traces)
    print(f"{method}: accuracy {acc:.4f} on {len(ds)} samples")
    return 0


def cmd_fewshot_train(args):
    cfg = _run_config(args)
    mconfig = mdl.ModelConfig()
    weights = mdl.load_weights(args.weights)
    ds = _build_dataset(cfg)
    classes = hz.class_set(ds)
    shots = _get(cfg, "shots", int, 16)
    rng = np.random.default_rng(_get(cfg, "seed", int, 0))
    idx = []
    for k in range(len(classes)):
        pool = np.flatnonzero(ds.labels == k)
        idx.extend(rng.choice(pool, size=min(shots, len(pool)), replace=False))
    sub = ds.subset(np.sort(idx))
    state = hz.fewshot_train_prompt(
        weights, mconfig, classes, sub.images, sub.labels,
        epochs=_get(cfg, "epochs", int, 50), lr=_get(cfg, "lr", float, 0.01))
    out = args.out or "prompt.tptw"
    mdl.save_weights({"prompt": state.prompt}, out)
    print(f"few-shot prompt ({shots}-shot) -> {out}")
    return 0


def cmd_ablate(args):
    cfg = _run_config(args)
    mconfig = mdl.ModelConfig()
    weights = mdl.load_weights(args.weights)
    ds = _build_dataset(cfg)
    classes = hz.class_set(ds)
    grid = {}
    if args.grid_rho:
        grid["rho"] = [float(x) for x in args.grid_rho.split(",")]
    if args.grid_views:
        grid["n_views"] = [int(x) for x in args.grid_views.split(",")]
    if args.grid_steps:
        grid["steps"] = [int(x) for x in args.grid_steps.split(",")]
    if args.grid_group:
        grid["parameter_group"] = args.grid_group.split(",")
    seeds = [int(s) for s in (args.seeds or "0").split(",")]
    rows = hz.ablate(weights, mconfig, dat.template_ids(), classes, ds,
                     _tpt_config(cfg), grid, seeds=seeds,
                     shift_label=cfg.get("shift", "none"))
    out = args.out or "ablation.csv"
    hz.write_results(out, rows, cfg)
    for row in rows:
        print(f"{row['method']}: {row['accuracy']:.4f} (seed {row['seed']})")
    return 0


def cmd_bongard(args):
    cfg = _run_config(args)
    mconfig = mdl.ModelConfig()
    weights = mdl.load_weights(args.weights)
    seed = _get(cfg, "seed", int, 0)
    rcfg = bg.ReasonConfig(steps=_get(cfg, "steps", int, 64),
                           lr=_get(cfg, "lr", float, 0.005))
    tasks = bg.generate_tasks(args.tasks, seed=seed)
    by_split = {s: [] for s in bg.SPLITS}
    for i, task in enumerate(tasks):
        pred, _ = bg.tpt_reason(weights, mconfig, task,
                                replace(rcfg, seed=seed + i))
        by_split[task.concept["split"]].append(pred == task.query_label)
    out = args.out or "bongard.csv"
    with open(out, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["split", "accuracy", "n", "prompt_len", "steps", "lr", "seed"])
        for split in bg.SPLITS:
            hits = by_split[split]
            acc = float(np.mean(hits)) if hits else float("nan")
            writer.writerow([split, f"{acc:.4f}", len(hits), rcfg.prompt_len,
                             rcfg.steps, rcfg.lr, seed])
            print(f"{split}: {acc:.4f} ({len(hits)} tasks)")
    return 0


def cmd_dump_dist(args):
    cfg = _run_config(args)
    mconfig = mdl.ModelConfig()
    weights = mdl.load_weights(args.weights)
    ds = _build_dataset(cfg)
    classes = hz.class_set(ds)
    i = args.sample
    before, after, _ = hz.dump_distributions(
        weights, mconfig, dat.template_ids(), classes, ds.images[i],
        _tpt_config(cfg))
    out = args.out or "distributions"
    for tag, mat in (("before", before), ("after", after)):
        path = f"{out}.{tag}.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["view"] + list(ds.class_names))
            for v, row in enumerate(mat):
                writer.writerow([v] + [f"{p:.6f}" for p in row])
        print(f"-> {path}")
    return 0


def cmd_gradcheck(args):
    cfg = _run_config(args)
    checks = hz.gradcheck_report(seed=_get(cfg, "seed", int, 0))
    worst = 0.0
    for name, err in checks:
        status = "ok" if err <= 1e-4 else "FAIL"
        print(f"{name:<36s} max rel err {err:.3e}  {status}")
        worst = max(worst, err)
    return 0 if worst <= 1e-4 else 1


def main(argv=None):
    parser = argparse.ArgumentParser(prog="tpt")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="contrastive pretraining")
    _add_common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--shift", default=None)
    p.add_argument("--samples", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("eval", help="evaluate a method")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--method", required=True,
                   choices=["zeroshot", "tpt", "ensemble", "avgpred", "vote"])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fewshot-train", help="train a prompt on labeled shots")
    _add_common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_fewshot_train)

    p = sub.add_parser("ablate", help="grid sweeps")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--grid-rho")
    p.add_argument("--grid-views")
    p.add_argument("--grid-steps")
    p.add_argument("--grid-group")
    p.add_argument("--seeds")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bongard", help="context-dependent reasoning tasks")
    _add_common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--tasks", type=int, default=100)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.set_defaults(func=cmd_bongard)

    p = sub.add_parser("dump-dist", help="per-view distributions before/after")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--sample", type=int, default=0)
    p.set_defaults(func=cmd_dump_dist)

    p = sub.add_parser("gradcheck", help="finite-difference gradient report")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
