"""Command-line entry point: run, ablate, gradcheck, inspect."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck, labeling, losses
from .config import ConfigError, load_config
from .numerics import NumericalError, load_tensor, save_tensor
from .runner import run_ablation_grid, run_scenario, tensor_to_scene
from .segmenter import forward, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load(args):
    spec, cfg = load_config(args.config)
    if getattr(args, "setting", None):
        spec = replace(spec, setting=args.setting)
    if getattr(args, "seed", None) is not None:
        spec, cfg = replace(spec, seed=args.seed), replace(cfg, seed=args.seed)
    return spec, cfg


def cmd_run(args) -> int:
    spec, cfg = _load(args)
    rec = run_scenario(spec, cfg, out_dir=args.out)
    last = rec.steps[-1].iou.group_miou
    print(f"{rec.config_hash} final mIoU " + " ".join(f"{k}={v:.4f}" for k, v in last.items()))
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec, cfg = _load(args)
    results = run_ablation_grid(spec, cfg, range(args.seeds), out_dir=args.out, sweeps=not args.no_sweeps)
    for name, rec in results:
        g = rec.steps[-1].iou.group_miou
        print(f"{name:>20} seed={rec.config.seed} " + " ".join(f"{k}={v:.4f}" for k, v in g.items()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst = gradcheck.run_suite(args.trials)
    ok = True
    for name, err in worst.items():
        passed = err < gradcheck.TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:<6} max_rel_err={err:.3e}")
    return EXIT_OK if ok else EXIT_NUMERIC


def _grid(a: np.ndarray) -> str:
    return "\n".join(" ".join(f"{v:>3}" for v in row) for row in a)


def cmd_inspect(args) -> int:
    scene = tensor_to_scene(load_tensor(args.scene))
    old, step = load_checkpoint(args.checkpoint)
    old_classes = list(range(1, old.num_known + 1))
    new_classes = sorted(int(c) for c in np.unique(scene.step_labels) if c not in [0] + old_classes)
    s_old = forward(old, scene.image).probs
    y_tilde = labeling.pseudo_label(scene.step_labels, s_old, args.tau)
    obj = labeling.object_identifier(s_old)
    y_bar = labeling.selective_pseudo_label(y_tilde, obj)
    y_hat, s_hat = labeling.downsample_labels_and_probs(y_bar, s_old, old.patch_size)
    m = losses.reliability_map(y_hat, s_hat, old_classes, new_classes)
    print(f"old model step {step}; old classes {old_classes}; new classes {new_classes}")
    for title, arr in (("ground truth", scene.full_labels), ("step labels", scene.step_labels),
                       ("pseudo-labels", y_tilde), ("object identifier", obj),
                       ("selective pseudo-labels", y_bar)):
        print(f"-- {title}\n{_grid(arr)}")
    print("-- reliability map\n" + "\n".join(" ".join(f"{v:.2f}" for v in row) for row in m))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, arr in (("pseudo_label", y_tilde), ("object_identifier", obj),
                          ("selective_pseudo_label", y_bar), ("reliability", m)):
            save_tensor(out / f"{name}.clt", arr.astype(np.float64))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bgshift", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="train one scenario and write record.csv / summary.txt")
    r.add_argument("--config", required=True)
    r.add_argument("--setting", choices=["disjoint", "overlapped"])
    r.add_argument("--seed", type=int)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("ablate", help="component grid plus hyperparameter sweeps")
    a.add_argument("--config", required=True)
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--out", required=True)
    a.add_argument("--no-sweeps", action="store_true", help="only the 8-row component grid")
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss gradient")
    g.add_argument("--trials", type=int, default=100)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="dump labeling maps for a serialized scene")
    i.add_argument("--scene", required=True)
    i.add_argument("--checkpoint", required=True, help="old-model checkpoint directory")
    i.add_argument("--tau", type=float, default=0.7)
    i.add_argument("--out")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
