"""Command-line entry point: ``collabinfer {pretrain,train,eval,sweep,plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint
from .errors import CollabError
from .harness import PLOT_KINDS, Experiment, emit_plot, load_config, run_sweep
from .pipeline import MODES, evaluate

log = logging.getLogger("collabinfer")


def _u64(text: str) -> int:
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer: {text}")
    return v


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    p.add_argument("--config", metavar="PATH", help="experiment config file", **d)
    p.add_argument("--seed", type=_u64, metavar="U64", help="master seed", **d)
    p.add_argument("--out", metavar="DIR", help="output directory", **d)
    p.add_argument("-v", "--verbose", action="count", **({"default": argparse.SUPPRESS}
                                                       if suppress else {"default": 0}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collabinfer",
        description="Collaborative edge inference with semantic grouping over an erasure sidelink.",
    )
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    add("pretrain", "pretrain and freeze the split backbone")
    add("train", "train query/key/attention modules for the configured cell")
    p = add("eval", "evaluate the configured cell and the baselines")
    p.add_argument("--modes", nargs="+", choices=MODES, default=list(MODES))
    p.add_argument("--rounds", type=int, help="held-out rounds (default from config)")
    add("sweep", "run the config's sweep grid, write CSV and plots")
    p = add("plot", "render charts from a results CSV")
    p.add_argument("--csv", required=True, metavar="PATH")
    p.add_argument("--kind", required=True, choices=sorted(PLOT_KINDS))
    return parser


def _experiment(args, config) -> Experiment:
    out = Path(args.out)
    ckpt = out / "backbone.npz"
    if ckpt.exists():
        model = checkpoint.load_backbone(ckpt)
        # reuse only a backbone pretrained for this scenario and seed
        if model.seed == config.scenario.seed and model.dims[0] == config.scenario.n_pixels:
            return Experiment(config, model)
        log.warning("ignoring %s: pretrained for another scenario or seed", ckpt)
    exp = Experiment(config)
    checkpoint.save_backbone(exp.backbone, ckpt)
    return exp


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def run(args) -> int:
    out = Path(args.out)
    if args.command == "plot":
        for path in emit_plot(args.csv, args.kind, out):
            _emit({"plot": str(path)})
        return 0

    config = load_config(args.config, seed=args.seed)
    if args.command == "pretrain":
        exp = Experiment(config)
        ds = exp.dataset
        path = checkpoint.save_backbone(exp.backbone, out / "backbone.npz")
        _emit({"backbone": str(path), "clean_val_accuracy": exp.backbone.accuracy(ds.X_val, ds.y_val),
               "clean_test_accuracy": exp.backbone.accuracy(ds.X_test, ds.y_test),
               "dims": exp.backbone.dims})
        return 0

    exp = _experiment(args, config)
    cfg = config.pipeline
    seed = config.scenario.seed
    comm_path = out / "comm.npz"

    if args.command == "train":
        comm = exp.comm_for(replace(cfg, mode="semantic") if not cfg.trainable else cfg, seed)
        checkpoint.save_comm(comm, comm_path, split=cfg.split, seed=seed)
        _emit({"comm": str(comm_path), "split": cfg.split,
               "data_per": cfg.data_channel.per, "query_per": cfg.query_channel.per})
        return 0

    if args.command == "eval":
        if comm_path.exists():
            comm, meta = checkpoint.load_comm(comm_path)
            if meta.get("split") != cfg.split:
                raise CollabError(f"{comm_path} was trained for split {meta.get('split')}")
        else:
            comm = exp.comm_for(replace(cfg, mode="semantic"), seed)
        rounds = args.rounds or config.eval_rounds
        ds = exp.dataset
        for mode in args.modes:
            m = evaluate(exp.backbone, comm, replace(cfg, mode=mode), config.scenario,
                         ds.X_test, ds.y_test, rounds, seed=seed)
            _emit({"mode": mode, "split": cfg.split, "data_per": cfg.data_channel.per,
                   "query_per": cfg.query_channel.per, "rho": cfg.rho, **m.summary()})
        return 0

    if args.command == "sweep":
        csv_path = run_sweep(config, out / f"{config.sweep.name}.csv", exp)
        _emit({"csv": str(csv_path)})
        if config.sweep.plot:
            for path in emit_plot(csv_path, config.sweep.plot, out):
                _emit({"plot": str(path)})
        return 0
    raise CollabError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = "."
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose or 0, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except CollabError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error kind={getattr(exc, 'kind', 'error')} message={json.dumps(msg)}",
              file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error kind=io message={json.dumps(str(exc))}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
