"""Command-line front end: data generation, training, registration, and reporting."""

import argparse
import csv
import os
import sys

import numpy as np

from .config import load_config
from .data import (
    gen_phantom_pair,
    load_case_pair,
    load_dataset,
    save_case_pair,
    save_ddf,
    split_dataset,
)
from .meta import classical_register, meta_train, test_time_optimize, train_conventional
from .models import load_checkpoint, save_checkpoint
from .report import evaluate_pairs, pair_seed, write_report

LOG_COLUMNS = ("episode", "cumulative_step", "pair_id", "beta", "mean_episode_loss")


def write_training_log(rows, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow(
                [row["episode"], row["cumulative_step"], row["pair_id"],
                 repr(row["beta"]), repr(row["mean_episode_loss"])]
            )


def _case_seed(global_seed, index):
    return np.random.SeedSequence([global_seed, index])


def cmd_gen_data(args, cfg):
    if args.n_cases == 0:
        raise SystemExit("error: empty dataset (n-cases must be positive)")
    os.makedirs(args.out, exist_ok=True)
    for i in range(args.n_cases):
        pair = gen_phantom_pair(
            _case_seed(cfg.seed, i),
            extent=cfg.data.extent,
            deform_magnitude=cfg.data.deform_magnitude,
            spacing=cfg.data.spacing,
        )
        save_case_pair(pair, os.path.join(args.out, f"case_{i:03d}"))
    print(f"wrote {args.n_cases} cases to {args.out}")


def _train_split(args, cfg):
    cases = load_dataset(args.data)
    return split_dataset(cases, cfg.data.train_fraction, cfg.seed)


def cmd_train(args, cfg):
    train, _ = _train_split(args, cfg)
    net, losses = train_conventional(
        train,
        iterations=cfg.conventional.iterations,
        batch=cfg.conventional.batch,
        lr=cfg.conventional.lr,
        weights=cfg.meta.episode.loss_weights,
        augment=cfg.meta.episode.augment,
        arch=cfg.meta.arch,
        seed=cfg.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(net, os.path.join(args.out, "conventional"))
    with open(os.path.join(args.out, "conventional_loss.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("iteration", "loss"))
        for i, loss in enumerate(losses):
            w.writerow([i, repr(loss)])
    print(f"conventional checkpoint written to {args.out}")


def cmd_meta_train(args, cfg):
    train, _ = _train_split(args, cfg)
    net, log = meta_train(train, cfg.meta)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(net, os.path.join(args.out, "meta"))
    write_training_log(log, os.path.join(args.out, "meta_log.csv"))
    print(f"meta checkpoint written to {args.out} ({len(log)} episodes)")


def cmd_register_classical(args, cfg):
    pair = load_case_pair(args.case)
    res = classical_register(
        pair,
        iterations=cfg.classical.iterations,
        lr=cfg.classical.lr,
        weights=cfg.meta.episode.loss_weights,
    )
    os.makedirs(args.out, exist_ok=True)
    save_ddf(res.ddf, os.path.join(args.out, "classical_ddf"), pair.moving.image.spacing)
    with open(os.path.join(args.out, "classical_trace.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("iteration", "loss"))
        for i, loss in enumerate(res.trace):
            w.writerow([i, repr(loss)])
    print(f"loss {res.trace[0]:.6f} -> {res.trace[-1]:.6f}; DDF written to {args.out}")


def cmd_tto(args, cfg):
    pair = load_case_pair(args.case)
    net = load_checkpoint(args.checkpoint)
    res = test_time_optimize(net, pair, cfg.tto, seed=pair_seed(cfg.seed, 0))
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(res.net, os.path.join(args.out, "adapted"))
    save_ddf(res.ddf, os.path.join(args.out, "tto_ddf"), pair.moving.image.spacing)
    status = "diverged; kept last finite parameters" if res.diverged else "ok"
    print(f"test-time optimization {status}; outputs in {args.out}")


def _load_nets(args):
    nets = {}
    if getattr(args, "checkpoint_conventional", None):
        nets["conventional"] = load_checkpoint(args.checkpoint_conventional)
    if getattr(args, "checkpoint_meta", None):
        nets["meta"] = load_checkpoint(args.checkpoint_meta)
    return nets


def cmd_evaluate(args, cfg):
    _, test = _train_split(args, cfg)
    methods = args.methods.split(",")
    records, errors = evaluate_pairs(test, methods, cfg, _load_nets(args))
    summary = write_report(records, errors, cfg, args.out, figures=not args.no_figures)
    for method, s in summary.items():
        print(
            f"{method}: DSC {s['dsc_mean']:.3f} ± {s['dsc_std']:.3f}, "
            f"TRE {s['tre_mean']:.2f} ± {s['tre_std']:.2f} mm, "
            f"time {s['time_mean']:.3f} s (n={s['n']})"
        )
    for method, msg in errors.items():
        print(f"{method}: {msg}", file=sys.stderr)
    if errors and not records:
        raise SystemExit("error: no method could be evaluated")


def cmd_compare(args, cfg):
    """Train both learned regimes, then evaluate all four methods on the test split."""
    train, test = _train_split(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    conv_net, _ = train_conventional(
        train,
        iterations=cfg.conventional.iterations,
        batch=cfg.conventional.batch,
        lr=cfg.conventional.lr,
        weights=cfg.meta.episode.loss_weights,
        augment=cfg.meta.episode.augment,
        arch=cfg.meta.arch,
        seed=cfg.seed,
    )
    save_checkpoint(conv_net, os.path.join(args.out, "conventional"))
    meta_net, log = meta_train(train, cfg.meta)
    save_checkpoint(meta_net, os.path.join(args.out, "meta"))
    write_training_log(log, os.path.join(args.out, "meta_log.csv"))
    nets = {"conventional": conv_net, "meta": meta_net}
    records, errors = evaluate_pairs(
        test, ["classical", "conventional", "meta", "meta_tto"], cfg, nets
    )
    summary = write_report(records, errors, cfg, args.out, figures=not args.no_figures)
    for method, s in summary.items():
        print(
            f"{method}: DSC {s['dsc_mean']:.3f} ± {s['dsc_std']:.3f}, "
            f"TRE {s['tre_mean']:.2f} ± {s['tre_std']:.2f} mm, "
            f"time {s['time_mean']:.3f} s (n={s['n']})"
        )


def build_parser():
    parser = argparse.ArgumentParser(prog="metareg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--preset", choices=("paper", "desk"), help="named preset")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--n-cases", type=int, default=28)
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="conventional network training")
    p.add_argument("--data", required=True)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("meta-train", help="Reptile meta-training")
    p.add_argument("--data", required=True)
    common(p)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("register-classical", help="single-pair SGD on a dense DDF")
    p.add_argument("--case", required=True, help="case directory")
    common(p)
    p.set_defaults(func=cmd_register_classical)

    p = sub.add_parser("tto", help="few-shot test-time optimization of a checkpoint")
    p.add_argument("--case", required=True, help="case directory")
    p.add_argument("--checkpoint", required=True, help="checkpoint prefix")
    common(p)
    p.set_defaults(func=cmd_tto)

    p = sub.add_parser("evaluate", help="evaluate methods on the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--methods", default="classical,conventional,meta,meta_tto")
    p.add_argument("--checkpoint-meta")
    p.add_argument("--checkpoint-conventional")
    p.add_argument("--no-figures", action="store_true")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="train both learned regimes and compare all four methods")
    p.add_argument("--data", required=True)
    p.add_argument("--no-figures", action="store_true")
    common(p)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset, args.seed)
        args.func(args, cfg)
    except SystemExit:
        raise
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
