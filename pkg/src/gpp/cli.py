"""Command-line entry point: ``gpp train|audit|experiment|distributed|data``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.

Any verb accepts ``--config FILE`` with flat ``key = value`` lines (``#``
comments allowed); keys are flag names without dashes. Flags given on the
command line win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

from . import __version__
from .errors import CheckpointError, ConfigError, DataError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("gpp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _seed_list(text: str) -> List[int]:
    """``"0,1,2"`` or ``"0-9"`` or a mix of both."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


def read_config_file(path: str) -> Dict[str, str]:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    out = {}
    for no, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _common(p: argparse.ArgumentParser, dataset_default: Optional[str] = None):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--dataset", choices=("mnist-composite", "hapt", "synthetic"),
                   default=dataset_default)
    p.add_argument("--beta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--dz", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--full", action="store_true", default=None,
                   help="large grids, dataset sizes and training length")
    p.add_argument("--out")
    p.add_argument("--format", choices=("json-lines", "csv"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gpp", description="Gaussian privacy protector")
    parser.add_argument("--version", action="version", version=f"gpp {__version__}")
    sub = parser.add_subparsers(dest="verb", parser_class=_Parser, required=True)

    p = sub.add_parser("train", help="train one encoder and write a checkpoint")
    _common(p, "mnist-composite")
    p.add_argument("--method", choices=("gpp", "no-privacy", "noisy-encoder"))
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="trainer checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="write a trainer checkpoint every N epochs")

    p = sub.add_parser("audit", help="audit a checkpoint with fresh probes")
    _common(p, "mnist-composite")
    p.add_argument("checkpoint")
    p.add_argument("--seeds", type=_seed_list)
    p.add_argument("--mode", choices=("mean", "sample"))

    p = sub.add_parser("experiment", help="run an experiment grid")
    _common(p)
    p.add_argument("name", choices=("baselines", "beta-sweep", "dz-sweep", "k-ablation",
                                    "rho-robustness", "seed-stats", "distributed"))
    p.add_argument("--seeds", type=_seed_list)
    p.add_argument("--workers", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--rounds", type=int)

    p = sub.add_parser("distributed", help="distributed vs centralized comparison")
    _common(p, "synthetic")
    p.add_argument("--clients", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seeds", type=_seed_list)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("data", help="dataset utilities")
    dsub = p.add_subparsers(dest="data_verb", parser_class=_Parser, required=True)
    g = dsub.add_parser("gen", help="generate or materialize a dataset cache")
    _common(g, "synthetic")
    g.add_argument("--seed", type=int)
    g.add_argument("--n", type=int)
    f = dsub.add_parser("fetch-check", help="report whether a dataset is available")
    _common(f, "mnist-composite")
    return parser


_TYPES = {"beta": float, "lam": float, "lambda": float, "dz": int, "k": int, "epochs": int,
          "batch": int, "lr": float, "rho": float, "seed": int, "seeds": _seed_list,
          "clients": int, "rounds": int, "workers": int, "n": int,
          "full": lambda v: str(v).lower() in ("1", "true", "yes", "on")}


def _merge_config(args):
    if not getattr(args, "config", None):
        return args
    for key, raw in read_config_file(args.config).items():
        dest = "lam" if key == "lambda" else key
        if not hasattr(args, dest):
            raise ConfigError(f"unknown config key {key!r}")
        if getattr(args, dest) is None:
            try:
                setattr(args, dest, _TYPES.get(key, str)(raw))
            except ValueError:
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return args


def _train_overrides(args) -> dict:
    return dict(beta=args.beta, lam=args.lam, d_z=args.dz, k=args.k, epochs=args.epochs,
                batch_size=args.batch, lr=args.lr)


def _emit(obj, out=None):
    text = json.dumps(obj, sort_keys=True, default=float)
    if out:
        with open(out, "a", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)


# ---------------------------------------------------------------------------
# verbs

def cmd_train(args) -> int:
    from .checkpoint import load_trainer, save_checkpoint
    from .experiments import default_dataset, default_train_config, load_dataset
    from .trainer import GppTrainer

    full = bool(args.full)
    ds = default_dataset(args.dataset, full, args.rho or 0.0)
    train, _ = load_dataset(ds)
    out = args.out or "gpp-model.ckpt"
    if args.resume:
        trainer = load_trainer(args.resume, train)
        if args.epochs:
            trainer.cfg.epochs = args.epochs
    else:
        cfg = default_train_config(args.dataset, full, seed=args.seed, **_train_overrides(args))
        trainer = GppTrainer(train, cfg, args.method or "gpp",
                             0.5 if args.method == "noisy-encoder" else 0.0)

    def every(tr, loss):
        log.info("epoch %d encoder loss %.6g", tr.epoch, loss)
        if args.checkpoint_every and tr.epoch % args.checkpoint_every == 0:
            save_checkpoint(tr, out + ".trainer")

    model = trainer.run(callback=every)
    save_checkpoint(trainer, out)
    _emit({"checkpoint": out, "method": model.method, "epochs": trainer.epoch,
           "final_encoder_loss": model.traces["epoch_encoder_loss"][-1],
           "config": trainer.cfg.to_dict()})
    return EXIT_OK


def cmd_audit(args) -> int:
    from .audit import run_audit
    from .checkpoint import load_checkpoint
    from .experiments import default_dataset, default_probe, load_dataset

    model = load_checkpoint(args.checkpoint)
    ds = default_dataset(args.dataset, bool(args.full), args.rho or 0.0)
    train, test = load_dataset(ds)
    if train.d_x != model.encoder.d_x:
        raise ConfigError(f"checkpoint expects d_x={model.encoder.d_x}, "
                          f"dataset {args.dataset} has d_x={train.d_x}")
    spec = default_probe(args.dataset, model.config)
    rep = run_audit(model, train, test, spec, args.seeds or [0], mode=args.mode or "mean")
    _emit(rep.to_dict(), args.out)
    return EXIT_OK


def _run_grid(cfg, args) -> int:
    from .experiments import run_experiment
    from .results import format_record

    def show(rec):
        sys.stdout.write(format_record(rec, "json-lines"))
        sys.stdout.flush()

    records = run_experiment(cfg, progress=show)
    log.info("%d records written as %s", len(records), cfg.fmt)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import make_config

    cfg = make_config(args.name, args.dataset, bool(args.full), args.seeds,
                      rho=args.rho, **_train_overrides(args))
    cfg.out = args.out
    cfg.fmt = args.format or "json-lines"
    if args.workers:
        cfg.workers = args.workers
    if args.clients:
        cfg.clients = args.clients
    if args.rounds:
        cfg.rounds = args.rounds
    return _run_grid(cfg, args)


def cmd_distributed(args) -> int:
    from .experiments import make_config

    cfg = make_config("distributed", args.dataset, bool(args.full), args.seeds,
                      rho=args.rho, **_train_overrides(args))
    cfg.out = args.out
    cfg.fmt = args.format or "json-lines"
    cfg.clients = args.clients or 5
    cfg.rounds = args.rounds
    if args.dataset == "hapt":
        cfg.partition = "by-sensitive-class"
    if args.workers:
        cfg.workers = args.workers
    return _run_grid(cfg, args)


def cmd_data(args) -> int:
    from .data import (data_dir, gen_correlated_synthetic, load_mnist,
                       materialize_mnist_sample, save_dataset_cache)
    from .experiments import SYNTH_D_X, _hapt_paths, default_dataset, load_dataset

    if args.data_verb == "fetch-check":
        if args.dataset == "synthetic":
            _emit({"dataset": "synthetic", "available": True, "source": "generated"})
            return EXIT_OK
        if args.dataset == "hapt":
            paths = _hapt_paths()
            ok = all(os.path.exists(p) for p in paths)
            _emit({"dataset": "hapt", "available": ok, "paths": list(paths)})
            if not ok:
                raise DataError(f"HAPT CSVs missing; place them at {paths[0]} and {paths[1]}")
            return EXIT_OK
        imgs, _ = load_mnist("train")
        timgs, _ = load_mnist("test")
        _emit({"dataset": "mnist-composite", "available": True,
               "train_digits": int(imgs.shape[0]), "test_digits": int(timgs.shape[0]),
               "data_dir": str(data_dir())})
        return EXIT_OK

    # gen
    seed = args.seed or 0
    if args.dataset == "synthetic":
        n = args.n or 10000
        ds = gen_correlated_synthetic(n, SYNTH_D_X, args.rho or 0.0, seed)
    elif args.dataset == "mnist-composite":
        materialize_mnist_sample()
        spec = default_dataset("mnist-composite", bool(args.full))
        ds, _ = load_dataset(spec)
    else:
        ds, _ = load_dataset(default_dataset("hapt"))
    out = args.out or os.path.join(str(data_dir()), f"{args.dataset}-seed{seed}.gppd")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_dataset_cache(ds, out)
    _emit({"dataset": args.dataset, "path": out, "n": ds.n, "d_x": ds.d_x})
    return EXIT_OK


VERBS = {"train": cmd_train, "audit": cmd_audit, "experiment": cmd_experiment,
         "distributed": cmd_distributed, "data": cmd_data}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _merge_config(args)
        return VERBS[args.verb](args)
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        # checked first: ParseError is also a ValueError
        print(f"gpp: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, ValueError) as exc:
        print(f"gpp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"gpp: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
