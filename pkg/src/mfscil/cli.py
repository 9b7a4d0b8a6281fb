"""Command-line entry point.

Subcommands: ``run <config>``, ``grad-check <config>``,
``synth <flags> <out>``, ``inspect <ckpt>``. Exit codes: 0 success,
2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import load_run_config, parse_kv_file
from .embeddings import SyntheticSpec, synthesize, write_embeddings
from .errors import ConfigError, MfscilError
from .gradcheck import REL_TOL, run_grad_check
from .interpreter import build_frozen, write_labels
from .protocol import build_plan, results_csv, run_experiment
from .training import load_checkpoint, save_checkpoint


def cmd_run(args) -> int:
    cfg = load_run_config(args.config)
    train_ds, test_ds = cfg.load_data()
    frozen = build_frozen(cfg.interpreter, weight_std=cfg.weight_std)
    plan = build_plan(train_ds, cfg.plan_kind, cfg.seed,
                      ways=cfg.plan_ways, shots=cfg.plan_shots, base_count=cfg.plan_base)
    result = run_experiment(frozen, train_ds, test_ds, plan, cfg.prompt_length,
                            cfg.train, cfg.seed, cfg.label_suffix)
    os.makedirs(cfg.output_dir, exist_ok=True)
    csv_path = os.path.join(cfg.output_dir, "results.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(results_csv(result.rows))
    ckpt_path = os.path.join(cfg.output_dir, "final.mfck")
    save_checkpoint(ckpt_path, result.state)
    print(f"{'session':>8} {'classes':>8} {'accuracy':>9} {'loss':>10} {'seconds':>8}")
    for row in result.rows:
        print(f"{row.session:>8} {row.classes:>8} {row.accuracy:>9.4f} "
              f"{row.loss:>10.4f} {row.seconds:>8.2f}")
    print(f"wrote {csv_path} and {ckpt_path}")
    return 0


def cmd_grad_check(args) -> int:
    kv = parse_kv_file(args.config)
    try:
        seed = int(kv.get("seed", "0"))
        prompt_length = int(kv.get("prompt.length", "2"))
    except ValueError as exc:
        raise ConfigError(f"{args.config}: {exc}")
    report = run_grad_check(seed=seed, prompt_length=prompt_length)
    if report.skipped:
        print("grad-check skipped: prompt length 0 has no prompt gradient")
        return 0
    for name, err in report.checks:
        status = "ok" if err < REL_TOL else "FAIL"
        print(f"{name}: max relative error {err:.3e} [{status}]")
    print(f"max relative error {report.max_error:.3e} (tolerance {REL_TOL:.0e})")
    return 0 if report.passed else 4


def cmd_synth(args) -> int:
    spec = SyntheticSpec(
        classes=args.classes,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        dim=args.dim,
        separation=args.separation,
        noise=args.noise,
        seed=args.seed,
    )
    train, test = synthesize(spec)
    os.makedirs(args.out, exist_ok=True)
    write_embeddings(os.path.join(args.out, "train.mfse"), train.samples, train.dim)
    write_embeddings(os.path.join(args.out, "test.mfse"), test.samples, test.dim)
    write_labels(os.path.join(args.out, "labels.tsv"), train.labels)
    print(f"wrote train.mfse ({len(train.samples)} records), "
          f"test.mfse ({len(test.samples)} records), labels.tsv to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    state = load_checkpoint(args.checkpoint)
    L, D = state.prompt.matrix.shape
    gamma = np.abs(state.gamma_acc)
    print(f"prompt: {L} x {D}")
    print(f"session index: {state.session_index}")
    print(f"anchor present: {'yes' if state.theta_star is not None else 'no'}")
    if gamma.size:
        decile = float(np.quantile(gamma, 0.9))
        print(f"gamma |.|: min {gamma.min():.6e} max {gamma.max():.6e} "
              f"mean {gamma.mean():.6e} top-decile threshold {decile:.6e}")
    else:
        print("gamma: empty (prompt length 0)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfscil",
                                     description="memory-prompt few-shot incremental learner")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full experiment from a config file")
    p_run.add_argument("config")
    p_run.set_defaults(func=cmd_run)

    p_gc = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p_gc.add_argument("config")
    p_gc.set_defaults(func=cmd_grad_check)

    p_synth = sub.add_parser("synth", help="write a synthetic train/test embedding pair")
    p_synth.add_argument("out", help="output directory")
    p_synth.add_argument("--classes", type=int, required=True)
    p_synth.add_argument("--train-per-class", type=int, default=25)
    p_synth.add_argument("--test-per-class", type=int, default=10)
    p_synth.add_argument("--dim", type=int, default=64)
    p_synth.add_argument("--separation", type=float, default=1.0)
    p_synth.add_argument("--noise", type=float, default=0.05)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_ins = sub.add_parser("inspect", help="summarize a checkpoint file")
    p_ins.add_argument("checkpoint")
    p_ins.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except MfscilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
