"""Command-line entry point: train, eval, score, gradcheck, synth."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .backbone import build_model
from .checkpoint import import_checkpoint
from .config import CONFIG_NAME, RunConfig, load_config
from .data import IdentityDataset, generate_synthetic, load_dataset, split_protocol, write_generic
from .errors import ConfigError, ProtocolError, SvreidError
from .evaluate import emit_cmc_csv, evaluate_cmc, format_rank_table, rank_table, write_rank_csv
from .head import VerificationHead, pair_score
from .imaging import read_image, resize_normalize
from .train import CHECKPOINT_NAME, LOG_NAME, derive_seed, train

log = logging.getLogger("svreid")

CUHK01_TEST_IDS = 486

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config plumbing


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="run seed (train.seed)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="cap BLAS threads; 1 gives the reference order")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any dotted config key")
    p.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help='dataset directory, or "synth" for generated data')
    p.add_argument("--format", choices=["auto", "cuhk01", "generic", "synthetic"])
    p.add_argument("--synth-ids", type=int, help="identities to generate with --data synth")
    p.add_argument("--per-camera", type=int, help="images per camera to generate with --data synth")
    p.add_argument("--test-ids", type=int, help="identities held out for testing (default 486 for CUHK01, else 0)")


FLAG_KEYS = {
    "seed": "train.seed",
    "data": "data.source",
    "format": "data.format",
    "synth_ids": "data.synth_ids",
    "per_camera": "data.per_camera",
    "test_ids": "data.test_ids",
    "steps": "train.steps",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "trials": "eval.trials",
}


def resolve_config(args: argparse.Namespace, base: Optional[RunConfig] = None) -> RunConfig:
    """base (e.g. a run's config.txt) < --config file < --set < dedicated flags."""
    cfg = base or RunConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    overrides = {}
    for item in args.set:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return cfg.with_overrides(overrides)


def _run_config_near(checkpoint: Path) -> RunConfig:
    path = checkpoint.parent / CONFIG_NAME
    return load_config(path) if path.is_file() else RunConfig()


# ---------------------------------------------------------------- datasets


def resolved_format(cfg: RunConfig) -> str:
    if cfg.data.is_synthetic:
        return "synthetic"
    if cfg.data.format != "auto":
        return cfg.data.format
    root = Path(cfg.data.source)
    return "generic" if root.is_dir() and any(p.is_dir() for p in root.iterdir()) else "cuhk01"


def load_run_dataset(cfg: RunConfig) -> IdentityDataset:
    b = cfg.backbone
    if cfg.data.is_synthetic:
        return generate_synthetic(cfg.data.synth_ids, cfg.data.per_camera, derive_seed(cfg.seed, "synthetic"), b.height, b.width)
    return load_dataset(cfg.data.source, resolved_format(cfg), b.height, b.width)


def split_run_dataset(cfg: RunConfig, ds: IdentityDataset) -> tuple[IdentityDataset, IdentityDataset]:
    n_test = cfg.data.test_ids
    if n_test is None:
        n_test = CUHK01_TEST_IDS if resolved_format(cfg) == "cuhk01" else 0
    if n_test == 0:
        return ds, ds.subset([], "test")
    return split_protocol(ds, n_test, derive_seed(cfg.seed, "split"))


def _require_data(cfg: RunConfig) -> None:
    if not cfg.data.source and cfg.data.format != "synthetic":
        raise UsageError("no dataset given: pass --data DIR or --data synth")


def _load_model(cfg: RunConfig, checkpoint: Path):
    mc = cfg.model_config()
    return import_checkpoint(build_model(mc, seed=0), checkpoint, VerificationHead.zeros(mc.descriptor_dim))


# ---------------------------------------------------------------- commands


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    _require_data(cfg)
    cfg = cfg.with_overrides({"data.format": resolved_format(cfg)})
    train_ds, _ = split_run_dataset(cfg, load_run_dataset(cfg))
    out = Path(args.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out)
    mc = cfg.model_config()
    model = build_model(mc, seed=derive_seed(cfg.seed, "init"))
    head = VerificationHead.zeros(mc.descriptor_dim, dropout=cfg.train.dropout)
    ckpt, train_log = train(train_ds, model, head, cfg.train, cfg.augment, out)
    if train_log.rows:
        last = train_log.rows[-1]
        print(f"trained {len(train_log.rows)} epoch(s): loss {last.loss:.4f}, pair accuracy {last.pair_accuracy:.3f}")
    print(f"wrote {ckpt} and {out / LOG_NAME}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = Path(args.checkpoint)
    cfg = resolve_config(args, _run_config_near(checkpoint))
    _require_data(cfg)
    model, head = _load_model(cfg, checkpoint)
    full = load_run_dataset(cfg)
    train_ds, test_ds = split_run_dataset(cfg, full)
    ds = {"train": train_ds, "test": test_ds, "all": full}[args.split]
    if not len(ds):
        raise ProtocolError(f"the {args.split} split is empty (data.test_ids = {cfg.data.test_ids})")
    cmc = evaluate_cmc(model, head, ds, derive_seed(cfg.seed, "gallery"), cfg.eval.trials)
    table = rank_table(cmc)
    out = Path(args.out) if args.out else checkpoint.parent
    out.mkdir(parents=True, exist_ok=True)
    emit_cmc_csv(cmc, out / "cmc.csv")
    write_rank_csv(table, out / "ranks.csv")
    print(format_rank_table(table))
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    checkpoint = Path(args.checkpoint)
    cfg = resolve_config(args, _run_config_near(checkpoint))
    model, head = _load_model(cfg, checkpoint)
    b = cfg.backbone
    img_a = resize_normalize(read_image(args.img_a), b.height, b.width)
    img_b = resize_normalize(read_image(args.img_b), b.height, b.width)
    print(f"{pair_score(model, head, img_a, img_b):.6f}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from .gradcheck import run_suite

    results = run_suite(args.op or None, seed=args.seed or 0, tol=args.tol)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name.ljust(width)}  {r.error:.3e}  tol {r.tol:.0e}  {'ok' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def cmd_synth(args: argparse.Namespace) -> int:
    if not args.out:
        raise UsageError("synth needs --out DIR")
    cfg = resolve_config(args).with_overrides(
        {"data.source": "synth", "data.format": "synthetic", "data.synth_ids": args.ids, "data.per_camera": args.per_camera}
    )
    ds = load_run_dataset(cfg)
    files = write_generic(ds, args.out)
    cfg.write(args.out)
    print(f"wrote {len(files)} images of {ds.n_identities} identities to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svreid", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the Siamese network")
    _common(p)
    _data_flags(p)
    p.add_argument("--steps", type=int, help="total optimizer steps (overrides --epochs)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train, subparser=p)

    p = sub.add_parser("eval", help="CMC evaluation of a checkpoint")
    _common(p)
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.add_argument("--trials", type=int, help="gallery draws to average")
    p.set_defaults(func=cmd_eval, subparser=p)

    p = sub.add_parser("score", help="same-person probability of two images")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--img-a", required=True)
    p.add_argument("--img-b", required=True)
    p.set_defaults(func=cmd_score, subparser=p)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--op", action="append", help="check only this op (repeatable)")
    p.add_argument("--tol", type=float, help="override every threshold")
    p.set_defaults(func=cmd_gradcheck, subparser=p)

    p = sub.add_parser("synth", help="write a synthetic dataset in the generic layout")
    _common(p)
    p.add_argument("--ids", type=int, default=8)
    p.add_argument("--per-camera", type=int, default=2)
    p.set_defaults(func=cmd_synth, subparser=p)
    return parser


def _thread_limit(n: Optional[int]):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, format="%(message)s")
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        args.subparser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SvreidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
