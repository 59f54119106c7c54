"""Command-line driver: ``sivit <command> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure,
4 I/O error. Options resolve as flags > ``--config`` file > defaults, where
the config file holds ``key = value`` lines named like the long flags.
Set ``SIVIT_VERBOSE`` to 0 (quiet), 1 (default) or 2 (debug).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import datasynth as ds
from . import evalviz as ev
from . import gradcheck
from . import heads as hd
from . import tensor as T
from . import train as tr
from .bagging import PatchGrid, shuffle_distribute, split_patches
from .model import SIViT

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
VERBOSITY_ENV = "SIVIT_VERBOSE"
log = logging.getLogger("sivit")


class UsageError(ValueError):
    pass


# -- option resolution ------------------------------------------------------------------

def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in str(text).split(",") if x.strip()]


# name -> (type, default, help); every entry becomes a ``--name`` flag
TRAIN_OPTIONS = {
    "strategy": (str, "si", f"one of {', '.join(tr.STRATEGIES)}"),
    "patch_size": (int, 8, "patch side in pixels"),
    "head_weights": (str, "1:1:1", "CLS:REG_USF:REG_SF loss weights"),
    "epochs": (int, 50, "training epochs"),
    "batch_size": (int, 32, "images per batch"),
    "lr": (float, 3e-4, "peak learning rate"),
    "weight_decay": (float, 0.05, "decoupled weight decay"),
    "embed_dim": (int, 64, "token width"),
    "depth": (int, 2, "transformer blocks"),
    "heads": (int, 4, "attention heads"),
    "mlp_ratio": (int, 4, "MLP hidden width / token width"),
    "normalize_labels": (_bool, False, "divide bag soft labels by the patch count"),
    "reg_mode": (str, "token", "REG head: per-token MLP then sum ('token') or pool then MLP ('pool')"),
    "two_updates": (_bool, False, "separate optimizer updates for the SF and USF passes"),
    "augment": (_bool, True, "train-time augmentation"),
    "cutout_frac": (float, 0.5, "CutOut square side as a fraction of the image"),
    "mix_alpha": (float, 1.0, "Beta(alpha, alpha) parameter for MixUp/CutMix"),
    "seed": (int, 0, "training seed"),
    "split_seed": (int, 0, "seed of the train/val/test split of a flat dataset"),
}

GENERATE_OPTIONS = {
    "seed": (int, 0, "dataset seed"),
    "pos": (int, 16, "positive (cancer) samples"),
    "neg": (int, 16, "negative samples"),
    "image_size": (int, 64, "image side in pixels"),
    "k": (int, 2, "number of mask categories"),
    "perturb": (_bool, True, "impurities, blur, colour cast and noise"),
}


def _add_options(parser: argparse.ArgumentParser, options: dict) -> None:
    for name, (_, default, text) in options.items():
        parser.add_argument("--" + name.replace("_", "-"), dest=name, default=None, help=f"{text} (default {default})")


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def resolve(args: argparse.Namespace, options: dict) -> dict:
    """Flags > config file > defaults, every value converted to its declared type."""
    from_file = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(from_file) - set(options)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = {}
    for name, (kind, default, _) in options.items():
        flag = getattr(args, name, None)
        raw = flag if flag is not None else from_file.get(name, default)
        try:
            out[name] = kind(raw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {name}: {raw!r}") from exc
    return out


def train_config(opts: dict) -> tr.TrainConfig:
    if opts["strategy"] not in tr.STRATEGIES:
        raise UsageError(f"unknown strategy {opts['strategy']!r}; choose from {', '.join(tr.STRATEGIES)}")
    cfg = tr.TrainConfig(
        epochs=opts["epochs"], batch_size=opts["batch_size"], lr=opts["lr"], weight_decay=opts["weight_decay"],
        strategy=opts["strategy"], head_weights=hd.HeadWeights.parse(opts["head_weights"]),
        patch_size=opts["patch_size"], embed_dim=opts["embed_dim"], depth=opts["depth"], heads=opts["heads"],
        mlp_ratio=opts["mlp_ratio"], normalize_labels=opts["normalize_labels"], reg_mode=opts["reg_mode"],
        two_updates=opts["two_updates"], cutout_frac=opts["cutout_frac"], mix_alpha=opts["mix_alpha"],
        seed=opts["seed"], augment=tr.AugmentConfig(enabled=opts["augment"]),
    )
    cfg.validate()
    return cfg


@dataclass
class RunManifest:
    config: dict
    seed: int
    paths: dict = field(default_factory=dict)
    tool_version: str = __version__

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- commands -------------------------------------------------------------------------------

def cmd_generate(args) -> int:
    opts = resolve(args, GENERATE_OPTIONS)
    cfg = ds.GenConfig(image_size=opts["image_size"], n_categories=opts["k"], perturb=opts["perturb"],
                       seed=opts["seed"])
    if opts["pos"] < 0 or opts["neg"] < 0:
        raise UsageError("--pos and --neg must be non-negative")
    samples = ds.generate_dataset(cfg, opts["pos"], opts["neg"])
    ds.write_dataset(samples, args.out)
    log.info("wrote %d samples to %s", len(samples), args.out)
    return EXIT_OK


def _splits(data: str, split_seed: int) -> dict[str, list[ds.ImageSample]]:
    splits = ds.load_splits(data, split_seed)
    if not splits.get("train"):
        raise UsageError(f"dataset {data} has no training samples")
    return splits


def evaluate_rows(model: SIViT, splits: dict, names=("val", "test")) -> list[tuple[str, dict]]:
    rows = []
    for name in names:
        if splits.get(name):
            rows.append((name, ev.metrics(tr.evaluate(model, splits[name]))))
    return rows


def run_training(data: str, opts: dict, out: Path, splits=None) -> list[tuple[str, dict]]:
    """Train one configuration into ``out``; returns the evaluation rows."""
    cfg = train_config(opts)
    splits = splits or _splits(data, opts["split_seed"])
    out.mkdir(parents=True, exist_ok=True)
    paths = {"data": str(data), "checkpoint": str(out / "best.ckpt"), "metrics": str(out / "metrics.csv"),
             "steps": str(out / "steps.csv"), "eval": str(out / "eval.csv")}
    RunManifest(config=dict(opts), seed=opts["seed"], paths=paths).write(out / "manifest.json")
    image_size = splits["train"][0].image_size
    model = tr.build_model(cfg, image_size, splits["train"][0].n_categories)
    tr.fit(model, splits["train"], splits.get("val", []), cfg, out, log=log.debug)
    rows = evaluate_rows(model, splits)
    ev.write_metrics_csv(out / "eval.csv", rows)
    return rows


def cmd_train(args) -> int:
    opts = resolve(args, TRAIN_OPTIONS)
    rows = run_training(args.data, opts, Path(args.out))
    for name, m in rows:
        log.info("%s: %s", name, "  ".join(f"{k} {m[k]:.4f}" for k in ev.METRIC_NAMES))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = SIViT.load(args.checkpoint)
    splits = ds.load_splits(args.data, args.split_seed)
    if not splits.get(args.split):
        raise UsageError(f"split {args.split!r} is empty in {args.data}")
    rows = evaluate_rows(model, splits, (args.split,))
    if args.out:
        ev.write_metrics_csv(args.out, rows)
    for name, m in rows:
        print(f"{name}: " + "  ".join(f"{k} {m[k]:.4f}" for k in ev.METRIC_NAMES))
    return EXIT_OK


def format_table(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[c if isinstance(c, str) else f"{c:.4f}" for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells) + "\n"


def _write_table(out: Path, stem: str, header: list[str], rows: list[list]) -> str:
    with open(out / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([c if isinstance(c, str) else repr(float(c)) for c in r])
    text = format_table(header, rows)
    (out / f"{stem}.txt").write_text(text, encoding="utf-8")
    return text


def cmd_compare(args) -> int:
    opts = resolve(args, TRAIN_OPTIONS)
    strategies, seeds = _str_list(args.strategies), _int_list(args.seeds)
    if not strategies or not seeds:
        raise UsageError("--strategies and --seeds must be non-empty")
    for s in strategies:
        if s not in tr.STRATEGIES:
            raise UsageError(f"unknown strategy {s!r}")
    out = Path(args.out)
    splits = _splits(args.data, opts["split_seed"])
    rows = []
    for strategy in strategies:
        runs = []
        for seed in seeds:
            run_opts = dict(opts, strategy=strategy, seed=seed)
            result = dict(run_training(args.data, run_opts, out / "runs" / f"{strategy}_seed{seed}", splits))
            runs.append(result["test"])
            log.info("%s seed %d: test accuracy %.4f", strategy, seed, result["test"]["accuracy"])
        rows.append([strategy, str(len(seeds))] + [statistics.median(r[k] for r in runs) for k in ev.METRIC_NAMES])
    print(_write_table(out, "compare", ["strategy", "runs", *ev.METRIC_NAMES], rows), end="")
    return EXIT_OK


def cmd_sweep_patch(args) -> int:
    opts = resolve(args, TRAIN_OPTIONS)
    sizes = _int_list(args.sizes)
    if not sizes:
        raise UsageError("--sizes must be non-empty")
    out = Path(args.out)
    splits = _splits(args.data, opts["split_seed"])
    header = ["patch_size", "status", *ev.METRIC_NAMES, "error"]
    rows = []
    for p in sizes:
        try:
            result = dict(run_training(args.data, dict(opts, patch_size=p), out / "runs" / f"p{p}", splits))
            rows.append([str(p), "ok"] + [result["test"][k] for k in ev.METRIC_NAMES] + [""])
        except (ValueError, T.NumericalError) as exc:
            log.warning("patch size %d failed: %s", p, exc)
            rows.append([str(p), "error"] + ["nan"] * len(ev.METRIC_NAMES) + [str(exc)])
    print(_write_table(out, "sweep", header, rows), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cases = gradcheck.registry()
    if args.only:
        wanted = _str_list(args.only)
        missing = [n for n in wanted if n not in cases]
        if missing:
            raise UsageError(f"unknown gradient checks: {', '.join(missing)}")
        cases = {n: cases[n] for n in wanted}
    results = gradcheck.run_all(cases, seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name.ljust(width)}  max_err {r.max_error:.3e}  {'PASS' if r.passed else 'FAIL'}  {r.seconds:.2f}s")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} passed (tolerance {gradcheck.TOLERANCE:g})")
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_visualize(args) -> int:
    model = SIViT.load(args.checkpoint)
    splits = ds.load_splits(args.data, args.split_seed)
    samples = splits.get(args.split) or []
    if args.limit is not None:
        samples = samples[:args.limit]
    if not samples:
        raise UsageError(f"no samples in split {args.split!r} of {args.data}")
    images, masks, _ = tr.stack(samples)
    images, masks = tr.eval_transform(images, masks, tr.AugmentConfig())
    if model.cfg.image_size != images.shape[1]:
        raise UsageError(f"checkpoint expects {model.cfg.image_size}px images, data has {images.shape[1]}px")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = [s.sample_id for s in samples]
    if args.shuffled:
        p = model.cfg.patch_size
        grids = [PatchGrid(split_patches(img, p), split_patches(m, p, channels=False), p, name, model.n_categories)
                 for img, m, name in zip(images, masks, names)]
        bags, _ = shuffle_distribute(grids, np.random.default_rng(args.seed), model.normalize_labels)
        images = np.stack([b.image for b in bags])
        names = [f"bag{i:03d}" for i in range(len(bags))]
    for img, name in zip(images, names):
        ev.write_map(ev.attribution(model, img, args.target), out / f"{name}.pgm")
    log.info("wrote %d maps to %s", len(names), out)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sivit", description="Shuffle-instances ViT experiments on synthetic cytology images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    _add_options(p, GENERATE_OPTIONS)
    p.set_defaults(func=cmd_generate)

    def trainer(name, func, text):
        q = sub.add_parser(name, help=text)
        q.add_argument("--data", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--config")
        _add_options(q, TRAIN_OPTIONS)
        q.set_defaults(func=func)
        return q

    trainer("train", cmd_train, "train one model")
    q = trainer("compare", cmd_compare, "train several strategies over several seeds and tabulate medians")
    q.add_argument("--strategies", default="naive,si")
    q.add_argument("--seeds", default="0")
    q = trainer("sweep-patch", cmd_sweep_patch, "train one model per patch size")
    q.add_argument("--sizes", required=True)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--out", help="metrics CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    p.add_argument("--only", help="comma-separated case names")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("visualize", help="write attribution maps as PGM files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--target", type=int, default=1, choices=(0, 1))
    p.add_argument("--limit", type=int)
    p.add_argument("--shuffled", action="store_true", help="regroup patches across samples before attribution")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    p.set_defaults(func=cmd_visualize)
    return parser


def _setup_logging() -> None:
    level = {"0": logging.WARNING, "1": logging.INFO, "2": logging.DEBUG}.get(os.environ.get(VERBOSITY_ENV, "1"),
                                                                             logging.INFO)
    logging.basicConfig(level=level, format="%(message)s", stream=sys.stderr, force=True)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except T.NumericalError as exc:
        print(f"sivit: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"sivit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"sivit: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
