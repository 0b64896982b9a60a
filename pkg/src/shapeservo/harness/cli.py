"""Command-line entry point.

Exit codes: 0 success, 1 bad usage, config or missing input, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .. import deformernet as dn
from ..tensorcore import CheckpointError
from . import datasets as D
from . import experiments as X
from .config import ConfigError, ExperimentConfig, format_config, load_config

log = logging.getLogger("shapeservo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="key = value experiment config file")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="shapeservo", description="Desk-scale point-cloud shape servoing experiments.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    p = sub.add_parser("gen-data", help="simulate random pulls and write a training dataset")
    _common(p)
    p = sub.add_parser("train", help="train the controller on a dataset")
    _common(p)
    p.add_argument("--data", help="dataset file (default <out>/dataset.dset)")
    for name, helptext in (("eval-servo", "closed-loop servo on held-out goals"),
                           ("eval-rrt", "RRT baseline vs servo on the same goals"),
                           ("eval-retract", "plane retraction trials")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--model", help="checkpoint (default <out>/model.dnet)")
        if name == "eval-rrt":
            p.add_argument("--goals", help="goals CSV written by eval-servo")
    p = sub.add_parser("predict-mp", help="manipulation-point heuristic on held-out goals")
    _common(p)
    p.add_argument("--goals", help="goals CSV written by eval-servo")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def _need(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_model(args, out: Path):
    path = _need(args.model or out / "model.dnet", "model checkpoint")
    try:
        return dn.load(path)
    except (CheckpointError, ValueError) as exc:
        raise FileNotFoundError(f"unreadable checkpoint {path}: {exc}") from None


def _goals(args):
    if getattr(args, "goals", None) is None:
        return None
    return X.read_goals(_need(args.goals, "goals file"))


def cmd_gen_data(args, cfg, out):
    pairs, trajs = D.gen_data(cfg)
    D.write_dataset(out / "dataset.dset", pairs)
    D.write_trajectory_table(out / "trajectories.csv", trajs)
    print(f"wrote {len(pairs)} pairs from {len(trajs)} trajectories to {out / 'dataset.dset'}")


def cmd_train(args, cfg, out):
    data = _need(args.data or out / "dataset.dset", "dataset")
    try:
        records = D.read_dataset(data)
    except ValueError as exc:
        raise FileNotFoundError(f"unreadable dataset {data}: {exc}") from None
    model = dn.DeformerNetModel.create(dn.ModelConfig(seed=cfg.seed))
    tcfg = dn.TrainConfig(cfg.epochs, cfg.batch, cfg.seed, cfg.lr, cfg.lr_decay, cfg.lr_every,
                          str(out / "model.dnet"))
    _, losses = dn.train(model, D.to_samples(records, model.config.n_points), tcfg)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "learning_rate", "train_mse_m2"])
        for e, loss in enumerate(losses):
            w.writerow([e, repr(dn.tc.lr_schedule(e, cfg.lr, cfg.lr_decay, cfg.lr_every)), repr(loss)])
    print(f"trained {cfg.epochs} epochs, final loss {losses[-1]:.3e} m^2 -> {out / 'model.dnet'}")


def cmd_eval_servo(args, cfg, out):
    model = _load_model(args, out)
    s = X.eval_servo(model, cfg, out)
    for split in ("id", "ood"):
        if s[split]["n"]:
            print(f"{split}: median final chamfer {s[split]['final']['median']:.3e} m^2, "
                  f"improved {s[split]['improved']}/{s[split]['n']}, "
                  f"success at loosest tolerance {s[split]['success'][0]:.2f}")


def cmd_eval_rrt(args, cfg, out):
    model = _load_model(args, out)
    r = X.eval_rrt(model, cfg, out, _goals(args))
    if r["ladder"]:
        print(f"loosest tolerance {r['ladder'][0]:.3e} m^2: RRT success {r['rrt_rate'][0]:.2f}, "
              f"servo success {r['servo_rate'][0]:.2f}")


def cmd_eval_retract(args, cfg, out):
    model = _load_model(args, out)
    r = X.eval_retraction(model, cfg, out)
    n = len(r["results"])
    lo, hi = r["interval"]
    print(f"retraction: {r['successes']}/{n} planes, Wilson 95% [{lo:.2f}, {hi:.2f}]")


def cmd_predict_mp(args, cfg, out):
    found = X.predict_mp(cfg, out, _goals(args))
    print(f"predicted {len(found)} manipulation points -> {out / 'manipulation_points.csv'}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval-servo": cmd_eval_servo,
            "eval-rrt": cmd_eval_rrt, "eval-retract": cmd_eval_retract, "predict-mp": cmd_predict_mp}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"shapeservo: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        cfg = _config(args)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{args.command}.config.txt").write_text(format_config(cfg))
        COMMANDS[args.command](args, cfg, out)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"shapeservo: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
