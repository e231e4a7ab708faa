"""Command-line interface.

Subcommands:
  synth       emit synthetic dataset + bundle pairs per task
  preprocess  ELIPR1 raw block -> ELIPE1 epoch store
  train       run a cross-task experiment from a config file
  eval        score a checkpoint on a test set
  baseline    HDCA linear baseline
  gradcheck   run the finite-difference verification suite
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import data, signal, train as training
from .checkpoint import apply_params, load_params
from .config import load_experiment_config
from .gradcheck import check_full_model, check_primitives
from .model import ModelConfig, desk_config
from .net import build_params


def _cmd_synth(args) -> int:
    import os
    os.makedirs(args.out, exist_ok=True)
    tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    prompts = [p.strip() for p in args.prompts.split(",") if p.strip()]
    if len(prompts) != len(tasks):
        print("error: need one prompt per task", file=sys.stderr)
        return 2
    for i, (task, prompt_str) in enumerate(zip(tasks, prompts)):
        cfg = data.SyntheticConfig(
            task=task, target_prompt=prompt_str, subjects=args.subjects,
            n_blk=args.n_blk, n_seq=args.n_seq, seed=args.seed,
            n200_amp=args.n200_amp, p300_amp=args.p300_amp,
            subject_id_base=1000 * (i + 1))
        ds, bundle = data.synth_generate(cfg)
        epath = os.path.join(args.out, f"{task}.elipe")
        bpath = os.path.join(args.out, f"{task}.elipb")
        data.save_epochs(ds, epath)
        data.save_bundle(bundle, bpath)
        n_target = int(ds.labels().sum())
        print(f"{task}: {len(ds)} epochs ({n_target} targets, "
              f"{args.subjects} subjects) -> {epath}, {bpath}")
    return 0


def _cmd_preprocess(args) -> int:
    block = signal.load_raw_block(args.input)
    epochs, labels, dropped = signal.preprocess_block(block, order=args.order)
    records = []
    for i, (e, lab) in enumerate(zip(epochs, labels)):
        records.append(data.EegEpoch(e, int(lab), args.subject, args.task,
                                     args.ref_base + i))
    ds = data.EpochDataset(records, task=args.task, fs=block.fs / 4,
                           channel_names=block.channel_names)
    data.save_epochs(ds, args.out)
    print(f"{args.input}: {len(records)} epochs "
          f"({dropped} dropped) -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_experiment_config(args.config)
    report, paths = training.run_cross_task_files(
        cfg.train_data, cfg.train_bundles, cfg.test_data, cfg.test_bundle,
        cfg.model, cfg.train, cfg.out_dir,
        train_prompts=cfg.train_prompts or None,
        test_prompt=cfg.test_prompt or None)
    print("\n".join(report.lines()))
    print(f"checkpoint: {paths.checkpoint}")
    print(f"metrics:    {paths.metrics}")
    return 0


def _cmd_eval(args) -> int:
    mcfg = desk_config() if args.profile == "desk" else ModelConfig()
    test_set = data.load_epochs(args.data)
    bundle = data.load_bundle(args.bundle)
    if args.prompt:
        from .prompt import PromptSpec
        PromptSpec(args.prompt).validate_against(bundle)
    params = build_params(mcfg, bundle.d_clip, seed=0)
    apply_params(params, load_params(args.checkpoint))
    report = training.evaluate(params, test_set, bundle, mcfg)
    text = "\n".join(report.lines())
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return 0


def _cmd_baseline(args) -> int:
    train_set = data.load_epochs(args.train_data)
    test_set = data.load_epochs(args.test_data)
    if args.balance:
        train_set = data.balance_downsample(train_set, args.seed)
    report = training.baseline_hdca(train_set, test_set)
    text = "\n".join(report.lines())
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    return 0


def _cmd_gradcheck(args) -> int:
    prim = check_primitives(args.seeds)
    status = "PASS" if prim.ok else "FAIL"
    print(f"[{status}] primitive ops: {prim.checked} coordinates over "
          f"{args.seeds} seeds, worst rel err {prim.worst_rel:.2e}")
    full = check_full_model(coords_per_tensor=args.coords)
    status = "PASS" if full.ok else "FAIL"
    print(f"[{status}] full model: {full.checked} sampled coordinates, "
          f"worst rel err {full.worst_rel:.2e}")
    for name, idx, fd, an, rel in (prim.failures + full.failures)[:20]:
        print(f"  mismatch {name}{idx}: fd={fd:+.6e} analytic={an:+.6e} "
              f"rel={rel:.2e}")
    return 0 if prim.ok and full.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elip")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="per-step training logs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="emit synthetic dataset + bundle per task")
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", default="taskA,taskB")
    p.add_argument("--prompts", default="plane,car")
    p.add_argument("--subjects", type=int, default=2)
    p.add_argument("--n-blk", type=int, default=2)
    p.add_argument("--n-seq", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n200-amp", type=float, default=1.0)
    p.add_argument("--p300-amp", type=float, default=1.4)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("preprocess", help="ELIPR1 raw block -> ELIPE1 epochs")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--subject", type=int, required=True)
    p.add_argument("--task", default="")
    p.add_argument("--order", choices=["safe", "paper"], default="safe")
    p.add_argument("--ref-base", type=int, default=0)
    p.set_defaults(func=_cmd_preprocess)

    p = sub.add_parser("train", help="cross-task experiment from a config file")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--profile", choices=["desk", "default"], default="desk")
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("baseline", help="HDCA linear baseline")
    p.add_argument("--train-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--balance", action="store_true",
                   help="down-sample nontargets in the training set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--coords", type=int, default=6)
    p.set_defaults(func=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
