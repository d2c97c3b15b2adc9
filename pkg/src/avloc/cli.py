"""Operator surface: gen | train | eval | localize | ablate | gradcheck.

Exit codes: 0 success, 1 usage error, 2 numerical-check failure. The
AVLOC_THREADS environment variable caps internal parallelism; the default
of 1 keeps every command bit-deterministic.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .config import load_config, with_overrides, write_resolved
from .gradcheck import OP_TOLERANCE, PIPELINE_TOLERANCE, full_report
from .runner import run_eval, run_localize, run_training
from .world import generate_dataset, load_dataset

ABLATION_AXES = ("scaling", "mask-type", "negative-proportion", "pcm-cycles",
                 "stop-gradient")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValueError(message)


def _build_parser():
    parser = _Parser(prog="avloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p = sub.add_parser("train", help="train the configured scheme")
    common(p)
    p.add_argument("dataset", help="dataset directory")
    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p = sub.add_parser("localize", help="export heatmaps for one scene")
    p.add_argument("--out", required=True)
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("scene_id", type=int)
    p = sub.add_parser("ablate", help="run one ablation axis")
    common(p)
    p.add_argument("axis", choices=ABLATION_AXES)
    sub.add_parser("gradcheck", help="run the gradient verification suite")
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_overrides(cfg, seed=args.seed)
    return with_overrides(cfg, out=args.out)


def cmd_gen(args):
    cfg = _load(args)
    count = generate_dataset(cfg.world_config(), cfg.scenes, args.out)
    write_resolved(cfg, os.path.join(args.out, "config.resolved"))
    per_class = {}
    for rec in load_dataset(args.out).records:
        per_class[rec.class_id] = per_class.get(rec.class_id, 0) + 1
    print(f"wrote {count} scenes to {args.out}")
    for cid in sorted(per_class):
        print(f"class {cid}: {per_class[cid]}")
    return 0


def cmd_train(args):
    cfg = _load(args)
    ckpt, _ = run_training(cfg, args.dataset, args.out)
    print(f"checkpoint at {ckpt}")
    return 0


def cmd_eval(args):
    summary = run_eval(args.checkpoint, args.dataset, args.out)
    print(f"ciou@0.5 = {summary['ciou']:.4f}")
    print(f"auc = {summary['auc']:.4f}")
    return 0


def cmd_localize(args):
    heat, overlay = run_localize(args.checkpoint, args.dataset, args.scene_id, args.out)
    print(heat)
    print(overlay)
    return 0


def _ablation_arms(cfg, axis):
    if axis == "scaling":
        return [(m, with_overrides(cfg, scheme="sspl", scaling=m))
                for m in ("relu", "sigmoid", "softmax", "relu_softmax", "minmax")]
    if axis == "mask-type":
        return [(m, with_overrides(cfg, scheme="sacl", pcm=False, mask=m))
                for m in ("none", "grid-1", "grid-2", "grid-4", "grid-8", "fh")]
    if axis == "negative-proportion":
        return [(f"{int(p * 100)}%",
                 with_overrides(cfg, scheme="sacl", pcm=False, fnd=True,
                                fnd_proportion=p))
                for p in (0.02, 0.10, 0.25, 0.50, 0.75, 1.00)]
    if axis == "pcm-cycles":
        return [(f"T={t}", with_overrides(cfg, scheme="sspl", pcm=True, pcm_cycles=t))
                for t in (1, 3, 5)]
    if axis == "stop-gradient":
        return [(name, with_overrides(cfg, scheme="sspl", stop_gradient=flag))
                for name, flag in (("on", True), ("off", False))]
    raise ValueError(f"unknown ablation axis: {axis!r}")


def cmd_ablate(args):
    cfg = _load(args)
    os.makedirs(args.out, exist_ok=True)
    train_dir = os.path.join(args.out, "data_train")
    test_dir = os.path.join(args.out, "data_test")
    if not os.path.exists(os.path.join(train_dir, "manifest.tsv")):
        generate_dataset(cfg.world_config(), cfg.scenes, train_dir)
    test_world = dataclasses.replace(cfg.world_config(), seed=cfg.seed + 1_000_000)
    if not os.path.exists(os.path.join(test_dir, "manifest.tsv")):
        generate_dataset(test_world, max(1, cfg.scenes // 4), test_dir)
    rows = ["arm,ciou,auc\n"]
    for name, arm_cfg in _ablation_arms(cfg, args.axis):
        arm_dir = os.path.join(args.out, f"arm_{name.replace('%', 'pct').replace('=', '')}")
        ckpt, _ = run_training(arm_cfg, train_dir, arm_dir)
        summary = run_eval(ckpt, test_dir, os.path.join(arm_dir, "eval"))
        rows.append(f"{name},{summary['ciou']!r},{summary['auc']!r}\n")
        print(f"{name}: ciou={summary['ciou']:.4f} auc={summary['auc']:.4f}")
    table = os.path.join(args.out, f"ablation_{args.axis}.csv")
    with open(table, "w", newline="") as fh:
        fh.writelines(rows)
    write_resolved(cfg, os.path.join(args.out, "config.resolved"))
    print(f"table at {table}")
    return 0


def cmd_gradcheck(args):
    ops, sspl_err, sacl_err = full_report()
    failed = False
    for kind in sorted(ops):
        status = "ok" if ops[kind] <= OP_TOLERANCE else "FAIL"
        if status == "FAIL":
            failed = True
        print(f"{kind} {ops[kind]:.3e} {status}")
    for name, err in (("pipeline-sspl", sspl_err), ("pipeline-sacl", sacl_err)):
        status = "ok" if err <= PIPELINE_TOLERANCE else "FAIL"
        if status == "FAIL":
            failed = True
        print(f"{name} {err:.3e} {status}")
    return 2 if failed else 0


def main(argv=None):
    threads = os.environ.get("AVLOC_THREADS", "1")
    try:
        if int(threads) < 1:
            raise ValueError
    except ValueError:
        print(f"AVLOC_THREADS must be a positive integer, got {threads!r}",
              file=sys.stderr)
        return 1
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "localize": cmd_localize, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
