"""Command-line surface: collect, train-classifier, augment, train, eval,
experiment. Batch tool; every command prints a one-line key=value summary
and is idempotent given identical inputs and seeds.

Exit codes: 0 ok, 2 configuration/usage error, 3 I/O error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import config as _config
from . import data as _data
from . import envs as _envs
from . import serialize as _ser
from .augment import AugmentConfig, augment_dataset
from .classifier import MissingTargetDataError, TrainConfig, train_pair
from .config import ConfigError
from .data import DatasetFormatError
from .mdp import RejectedInputError, UnsupportedEnvError
from .serialize import ArtifactFormatError
from .trainers import (TrainerConfig, train_conservative, train_dwr,
                       train_fqi_constrained, train_model_based)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _summary(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()))


def _apply_config(args, section: str, argv: list[str]):
    """File values fill in any flag not given explicitly on the command line."""
    if getattr(args, "config", None):
        overrides = _config.load_overrides(args.config, section)
        for key, val in overrides.items():
            flag_forms = {f"--{key}", f"--{key.replace('_', '-')}"}
            if not any(a.split("=")[0] in flag_forms for a in argv):
                setattr(args, key, val)
    return args


def cmd_collect(args) -> int:
    env = _envs.resolve(args.env)
    if args.policy == "medium-replay":
        ds = _data.collect_medium_replay(env, int(args.n), int(args.seed),
                                         domain=args.domain)
    else:
        pol = _data.make_behavior(env, args.policy)
        tag = {"random": "random", "medium": "medium", "expert": "expert"}[args.policy]
        ds = _data.collect(env, pol, int(args.n), int(args.seed),
                           behavior_tag=tag, domain=args.domain,
                           mask_rewards=bool(args.mask_rewards))
    _data.save(ds, args.out)
    _config.echo_resolved(args.out, "collect", vars(args))
    _summary(command="collect", out=args.out, count=len(ds),
             behavior_tag=ds.meta.behavior_tag, env=args.env)
    return EXIT_OK


def cmd_train_classifier(args) -> int:
    source = _data.load(args.source)
    target = _data.load(args.target)
    hidden = tuple(int(h) for h in str(args.hidden).split(","))
    cfg = TrainConfig(hidden=hidden, lr=float(args.lr),
                      batch_size=int(args.batch_size), epochs=int(args.epochs),
                      seed=int(args.seed))
    pair = train_pair(source, target, cfg, clip_bound=float(args.clip_bound))
    _ser.save_classifier_pair(pair, args.out)
    _config.echo_resolved(args.out, "classifier", vars(args))
    _summary(command="train-classifier", out=args.out,
             loss_sas=f"{pair.train_info['loss_sas']:.6g}",
             loss_sa=f"{pair.train_info['loss_sa']:.6g}")
    return EXIT_OK


def cmd_augment(args) -> int:
    ds = _data.load(args.data)
    pair = _ser.load_classifier_pair(args.pair)
    cfg = AugmentConfig(eta=float(args.eta), record_delta=bool(args.record_delta))
    out = augment_dataset(ds, pair, cfg)
    _data.save(out, args.out)
    _config.echo_resolved(args.out, "augment", vars(args))
    shift = np.abs(out.rewards - ds.rewards)
    _summary(command="augment", out=args.out, eta=args.eta,
             mean_shift=f"{shift.mean():.6g}", max_shift=f"{shift.max():.6g}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = TrainerConfig(
        algorithm=args.algorithm, iterations=int(args.iterations),
        alpha=float(args.alpha), eta=float(args.eta), beta=float(args.beta),
        w_max=float(args.w_max),
        lam=None if args.lam in (None, "", "auto") else float(args.lam),
        rollout_len=int(args.rollout_len), ensemble_n=int(args.ensemble_n),
        seed=int(args.seed))
    pair = _ser.load_classifier_pair(args.pair) if args.pair else None
    env = _envs.resolve(args.env) if args.env else None
    if args.algorithm == "model-based":
        if not (args.source_data and args.target_data):
            raise ConfigError("model-based training needs --source-data and "
                              "--target-data")
        source = _data.load(args.source_data)
        target = _data.load(args.target_data)
        qf, policy = train_model_based(source, target, pair, cfg, env=env)[:2]
    else:
        ds = _data.load(args.data) if args.data else None
        if ds is None:
            raise ConfigError("--data is required for model-free training")
        if args.algorithm == "conservative":
            qf, policy = train_conservative(ds, cfg, env=env)
        elif args.algorithm == "fqi-constrained":
            qf, policy = train_fqi_constrained(ds, cfg, env=env)
        elif args.algorithm == "dwr":
            qf, policy, _ = train_dwr(ds, pair, cfg, env=env)
        else:
            raise ConfigError(f"unknown algorithm {args.algorithm!r}")
    if args.out_q:
        _ser.save_qfunction(qf, args.out_q)
    _ser.save_policy(policy, qf.env_id, args.out_policy, algorithm=args.algorithm)
    _config.echo_resolved(args.out_policy, "trainer", vars(args))
    _summary(command="train", algorithm=args.algorithm, out_policy=args.out_policy,
             q_max=f"{qf.table.max():.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    policy, env_id = _ser.load_policy(args.policy)
    env = _envs.resolve(args.env or env_id)
    report = evaluate(env, policy, episodes=int(args.episodes),
                      seed=int(args.seed), policy_id=args.policy)
    if args.out:
        with open(args.out, "w", newline="\n") as fh:
            fh.write(f"env={report.env_id}\npolicy={report.policy_id}\n"
                     f"episodes={report.episodes}\nmean_return={report.mean_return:.10g}\n"
                     f"std_return={report.std_return:.10g}\n"
                     f"norm_score={report.norm_score:.10g}\n"
                     f"goal_rate={report.goal_rate:.10g}\nseed={report.seed}\n")
        _config.echo_resolved(args.out, "eval", vars(args))
    _summary(command="eval", env=report.env_id,
             mean_return=f"{report.mean_return:.6g}",
             norm_score=f"{report.norm_score:.6g}",
             goal_rate=f"{report.goal_rate:.6g}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .evaluation import reference_grid, run_matrix
    if args.reference:
        spec = reference_grid()
    elif args.grid:
        spec = _config.load_grid(args.grid)
    else:
        raise ConfigError("experiment needs --grid FILE or --reference")
    csv_path = run_matrix(spec, args.out, workers=int(args.workers))
    _config.echo_resolved(args.out, "experiment", vars(args))
    _summary(command="experiment", csv=csv_path,
             cells=sum(1 for _ in open(csv_path)) - 1)
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="dara", description=__doc__,
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    c = sub.add_parser("collect", help="collect an offline dataset",
                       formatter_class=fmt)
    c.add_argument("--env", required=True, help="catalog env id")
    c.add_argument("--policy", default="random",
                   choices=["random", "medium", "expert", "medium-replay"])
    c.add_argument("--n", required=True, type=int, help="number of transitions")
    c.add_argument("--seed", default=0, type=int)
    c.add_argument("--out", required=True, help="output dataset path")
    c.add_argument("--domain", default="target", choices=["source", "target"])
    c.add_argument("--mask-rewards", action="store_true",
                   help="write rewards as the NA sentinel")
    c.add_argument("--config", default=None, help="optional run config file")
    c.set_defaults(func=cmd_collect, section="collect")

    t = sub.add_parser("train-classifier", help="fit the domain classifier pair",
                       formatter_class=fmt)
    t.add_argument("--source", required=True)
    t.add_argument("--target", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", default=100, type=int)
    t.add_argument("--lr", default=1e-3, type=float)
    t.add_argument("--batch-size", default=256, type=int)
    t.add_argument("--hidden", default="64,64")
    t.add_argument("--clip-bound", default=10.0, type=float)
    t.add_argument("--seed", default=0, type=int)
    t.add_argument("--config", default=None)
    t.set_defaults(func=cmd_train_classifier, section="classifier")

    a = sub.add_parser("augment", help="rewrite source rewards with the "
                                       "dynamics-aware modification",
                       formatter_class=fmt)
    a.add_argument("--data", required=True, help="source dataset to augment")
    a.add_argument("--pair", required=True, help="trained classifier pair file")
    a.add_argument("--eta", default=0.1, type=float)
    a.add_argument("--record-delta", action="store_true",
                   help="append the delta_r audit column")
    a.add_argument("--out", required=True)
    a.add_argument("--config", default=None)
    a.set_defaults(func=cmd_augment, section="augment")

    tr = sub.add_parser("train", help="train an offline agent",
                        formatter_class=fmt)
    tr.add_argument("--algorithm", required=True,
                    choices=["fqi-constrained", "conservative", "dwr",
                             "model-based"])
    tr.add_argument("--data", default=None, help="training dataset (model-free)")
    tr.add_argument("--source-data", default=None, help="model-based source set")
    tr.add_argument("--target-data", default=None, help="model-based target set")
    tr.add_argument("--pair", default=None, help="classifier pair (dwr/model-based)")
    tr.add_argument("--env", default=None, help="override env id for key lookup")
    tr.add_argument("--iterations", default=600, type=int)
    tr.add_argument("--alpha", default=1.0, type=float)
    tr.add_argument("--eta", default=0.1, type=float)
    tr.add_argument("--beta", default=1.0, type=float)
    tr.add_argument("--w-max", default=20.0, type=float)
    tr.add_argument("--lam", default="auto",
                    help="model-based penalty scale; auto = gamma*R/(1-gamma)")
    tr.add_argument("--rollout-len", default=5, type=int)
    tr.add_argument("--ensemble-n", default=4, type=int)
    tr.add_argument("--seed", default=0, type=int)
    tr.add_argument("--out-q", default=None, help="optional Q-table output path")
    tr.add_argument("--out-policy", required=True)
    tr.add_argument("--config", default=None)
    tr.set_defaults(func=cmd_train, section="trainer")

    e = sub.add_parser("eval", help="evaluate a stored policy",
                       formatter_class=fmt)
    e.add_argument("--policy", required=True, help="policy file")
    e.add_argument("--env", default=None, help="eval env (defaults to the "
                                               "policy's env)")
    e.add_argument("--episodes", default=10, type=int)
    e.add_argument("--seed", default=0, type=int)
    e.add_argument("--out", default=None, help="optional report path")
    e.add_argument("--config", default=None)
    e.set_defaults(func=cmd_eval, section="eval")

    x = sub.add_parser("experiment", help="run an experiment grid to CSV + SVG",
                       formatter_class=fmt)
    x.add_argument("--grid", default=None, help="grid config file")
    x.add_argument("--reference", action="store_true",
                   help="run the built-in reference grid")
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--workers", default=1, type=int)
    x.add_argument("--config", default=None)
    x.set_defaults(func=cmd_experiment, section="experiment")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        _apply_config(args, args.section, argv)
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    except (ConfigError, RejectedInputError, UnsupportedEnvError,
            MissingTargetDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, ArtifactFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, np.linalg.LinAlgError, OverflowError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
