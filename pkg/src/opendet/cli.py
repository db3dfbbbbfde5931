"""Command-line entry points: gen, train, eval, compare-pe, dump-attn, plot.

Failures exit with status 1 after printing one JSON line to stderr:
``{"error": "<ErrorClass>", "message": "..."}``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import autodiff as ad
from . import config as cf
from . import decoder as dec
from . import evalmetrics as em
from . import pipeline
from . import synthscene as ss
from .errors import ConfigError, OpenDetError
from .posembed import VARIANTS


class Console:
    def __init__(self, quiet=False):
        self.quiet = quiet

    def __call__(self, msg):
        if not self.quiet:
            print(msg, file=sys.stderr, flush=True)


def _load_cfg(path, seed=None):
    cfg = cf.load_config(path) if path else cf.RunConfig()
    return cfg if seed is None else cfg.replace(seed=seed)


def _require(value, flag):
    if not value:
        raise ConfigError(f"missing required flag {flag}")
    return value


def _read_dataset(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    return ss.decode_dataset(blob), pipeline.dataset_hash(blob)


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _write_json(path, obj):
    ad.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _metrics_dict(report):
    return {f"{m}@>{b:g}": val for _, m, b, val in report.rows}


# ---------------------------------------------------------------- commands

def cmd_gen(cfg, out, log):
    scfg = pipeline.scene_config(cfg)
    count = cfg.data_n_train + cfg.data_n_eval
    log(f"generating {count} scenes (seed {cfg.seed})")
    scenes = ss.generate_dataset(scfg, cfg.seed, count)
    dataset = ss.dataset_from_scenes(scfg, scenes)
    _ensure_parent(out)
    ss.write_dataset(dataset, out)
    log(f"wrote {out}")
    return dataset


def cmd_train(cfg, dataset_path, out_dir, log, dataset=None, digest=None):
    """Train, evaluate on the eval split and write checkpoint, report and manifest."""
    start = time.perf_counter()
    if dataset is None:
        dataset, digest = _read_dataset(dataset_path)
    pipeline.check_dataset(cfg, dataset, cfg.data_n_train + cfg.data_n_eval)
    os.makedirs(out_dir, exist_ok=True)
    params, _ = pipeline.train(cfg, dataset, log=log)
    ckpt = os.path.join(out_dir, "checkpoint.bin")
    ad.save_checkpoint(ckpt, params)
    report = pipeline.evaluate(params, cfg, dataset)
    em.write_report_csv(os.path.join(out_dir, "report.csv"), report)
    ad.atomic_write(os.path.join(out_dir, "config.cfg"), cf.serialize_config(cfg).encode())
    manifest = {
        "config": cfg.to_dict(),
        "dataset": os.path.abspath(dataset_path) if dataset_path else None,
        "dataset_sha1": digest,
        "checkpoint": os.path.abspath(ckpt),
        "wall_clock_s": time.perf_counter() - start,
        "metrics": _metrics_dict(report),
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)
    log(f"trained {cfg.pe_variant} seed {cfg.seed}: translation error "
        f"{report.get(cfg.pe_variant, 'translation_error')}, AP {report.get(cfg.pe_variant, 'center_ap')}")
    return report


def cmd_eval(cfg, checkpoint, dataset_path, out, log):
    dataset, _ = _read_dataset(dataset_path)
    params = ad.load_checkpoint(checkpoint)
    report = pipeline.evaluate(params, cfg, dataset)
    _ensure_parent(out)
    em.write_report_csv(out, report)
    _write_charts(report, os.path.dirname(os.path.abspath(out)), log)
    log(f"wrote {out}")
    return report


def cmd_compare_pe(cfg, dataset_path, out_dir, seeds, log):
    """Train every PE variant under each seed on one dataset; join the reports."""
    dataset, digest = _read_dataset(dataset_path)
    joined = em.Report()
    per_seed = []
    for variant in VARIANTS:
        for seed in seeds:
            run = cfg.replace(pe_variant=variant, seed=seed)
            sub = os.path.join(out_dir, variant if len(seeds) == 1 else f"{variant}-seed{seed}")
            rep = cmd_train(run, dataset_path, sub, log, dataset=dataset, digest=digest)
            per_seed.append((seed, rep))
    for variant in VARIANTS:
        reps = [r for _, r in per_seed if r.rows and r.rows[0][0] == variant]
        for _, metric, bucket, _ in reps[0].rows:
            vals = [r.get(variant, metric, bucket) for r in reps]
            vals = [v for v in vals if v is not None and not np.isnan(v)]
            joined.add(variant, metric, bucket, float(np.mean(vals)) if vals else None)
    os.makedirs(out_dir, exist_ok=True)
    em.write_report_csv(os.path.join(out_dir, "comparison.csv"), joined)
    _write_charts(joined, out_dir, log)
    return joined


def cmd_dump_attention(cfg, checkpoint, dataset_path, scene, out, log):
    dataset, _ = _read_dataset(dataset_path)
    if not 0 <= scene < len(dataset):
        raise ConfigError(f"scene {scene} out of range for a dataset of {len(dataset)} scenes")
    pipeline.check_dataset(cfg, dataset)
    params = ad.load_checkpoint(checkpoint)
    res = pipeline.evaluate_scene(params, dataset[scene], scene, cfg, dataset.perception_range)
    _ensure_parent(out)
    dec.write_attention_csv(out, res.attention, dataset.n_views, dataset.height, dataset.width)
    log(f"wrote {out}")


def _write_charts(report, out_dir, log):
    os.makedirs(out_dir, exist_ok=True)
    for name, svg in em.report_charts(report).items():
        ad.atomic_write(os.path.join(out_dir, f"{name}.svg"), svg.encode())
    log(f"charts in {out_dir}")


def cmd_plot(reports, out_dir, log):
    joined = em.Report()
    for path in reports:
        joined.extend(em.read_report_csv(path))
    _write_charts(joined, out_dir, log)


# ---------------------------------------------------------------- argument parsing

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (key = value) or a run manifest (JSON)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--dataset", help="dataset file")
    common.add_argument("--checkpoint", help="checkpoint file")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(prog="opendet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("train", parents=[common], help="train, evaluate and write a run directory")
    sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    cmp_ = sub.add_parser("compare-pe", parents=[common], help="train every PE variant")
    cmp_.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    dump = sub.add_parser("dump-attn", parents=[common], help="dump last-layer cross-attention")
    dump.add_argument("--scene", type=int, default=None, help="scene index (default: first eval scene)")
    plot = sub.add_parser("plot", parents=[common], help="SVG charts from report CSVs")
    plot.add_argument("reports", nargs="+", help="report CSV files")
    return parser


def _cfg_near_checkpoint(args):
    if args.config:
        return _load_cfg(args.config, args.seed)
    manifest = os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "manifest.json")
    if os.path.exists(manifest):
        return _load_cfg(manifest, args.seed)
    raise ConfigError("no --config given and no manifest.json next to the checkpoint")


def run(argv=None):
    args = build_parser().parse_args(argv)
    log = Console(args.quiet)
    cmd = args.command
    if cmd == "gen":
        cmd_gen(_load_cfg(args.config, args.seed), _require(args.out, "--out"), log)
    elif cmd == "train":
        cmd_train(_load_cfg(args.config, args.seed), _require(args.dataset, "--dataset"),
                  _require(args.out, "--out"), log)
    elif cmd == "eval":
        _require(args.checkpoint, "--checkpoint")
        cmd_eval(_cfg_near_checkpoint(args), args.checkpoint, _require(args.dataset, "--dataset"),
                 _require(args.out, "--out"), log)
    elif cmd == "compare-pe":
        cfg = _load_cfg(args.config, args.seed)
        try:
            seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
        except ValueError:
            raise ConfigError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
        cmd_compare_pe(cfg, _require(args.dataset, "--dataset"), _require(args.out, "--out"), seeds, log)
    elif cmd == "dump-attn":
        _require(args.checkpoint, "--checkpoint")
        cfg = _cfg_near_checkpoint(args)
        scene = cfg.data_n_train if args.scene is None else args.scene
        cmd_dump_attention(cfg, args.checkpoint, _require(args.dataset, "--dataset"), scene,
                           _require(args.out, "--out"), log)
    elif cmd == "plot":
        cmd_plot(args.reports, _require(args.out, "--out"), log)
    return 0


def main(argv=None):
    try:
        return run(argv)
    except (OpenDetError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
