"""Command-line entry point: ``tripletdrn <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import experiments, gradcheck
from .data import PPMError, SynthSpec, generate_groups, generate_synthetic, load_dataset, load_image, save_dataset
from .model import ModelConfig, build_model, embed_batch, five_crop_embed, load_checkpoint, save_checkpoint
from .retrieval import EmbeddingIndex, IndexFormatError, build_index, query_topk
from .tensor import ConfigError
from .trainer import PRESETS, TrainConfig, TrainingDiverged, preset, train, write_stats

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

PATH_KEYS = ("data", "checkpoint", "index", "report", "stats", "checkpoint_dir")


class DataError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: preset("desk"))
    synth: SynthSpec = field(default_factory=SynthSpec)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        name = d.get("preset", "desk")
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        for key in ("model", "train", "synth", "paths"):
            if not isinstance(d.get(key, {}), dict):
                raise ConfigError(f"{key} must be a JSON object")
        paths = dict(d.get("paths", {}))
        bad = set(paths) - set(PATH_KEYS)
        if bad:
            raise ConfigError(f"unknown paths keys: {sorted(bad)}")
        seed = d.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError(f"seed must be an integer, got {seed!r}")
        try:
            train_cfg = TrainConfig.from_dict({**PRESETS[name].to_dict(), **d.get("train", {})})
            model_cfg = ModelConfig.from_dict(d.get("model", {}))
            synth = SynthSpec.from_dict(d.get("synth", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return cls(name, seed, model_cfg, train_cfg, synth, paths)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "paths": dict(sorted(self.paths.items())),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.synth.validate()
        if self.train.crop and self.train.crop != self.model.input_size:
            raise ConfigError(f"train crop {self.train.crop} differs from model input_size {self.model.input_size}")


def resolve_config(args) -> RunConfig:
    """Preset, then JSON file, then command-line flags."""
    raw: dict = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
    if getattr(args, "preset", None):
        raw = {**raw, "preset": args.preset}
        if args.preset == "paper" and "input_size" not in raw.get("model", {}):
            # the full-scale recipe trains on center crops; the network input follows the crop
            raw = {**raw, "model": {**raw.get("model", {}), "input_size": PRESETS["paper"].crop}}
    cfg = RunConfig.from_dict(raw)
    overrides = {}
    for key in ("lr", "epochs", "margin", "strategy", "momentum", "weight_decay"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.seed
    train_cfg = replace(cfg.train, seed=seed, **overrides)
    paths = dict(cfg.paths)
    for key in PATH_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            paths[key] = str(val)
    cfg = replace(cfg, seed=seed, train=train_cfg, paths=paths)
    cfg.validate()
    return cfg


def _require(cfg: RunConfig, key: str) -> Path:
    if key not in cfg.paths:
        raise ConfigError(f"missing path {key!r}: pass --{key.replace('_', '-')} or set paths.{key}")
    return Path(cfg.paths[key])


def _existing(cfg: RunConfig, key: str) -> Path:
    p = _require(cfg, key)
    if not p.exists():
        raise DataError(f"{key} path {p} does not exist")
    return p


def _echo(cfg: RunConfig) -> None:
    print("effective config: " + cfg.canonical_json())


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = _require(cfg, "data")
    _echo(cfg)
    if args.groups:
        ds = generate_groups(cfg.synth, cfg.seed, groups=args.groups)
    else:
        ds = generate_synthetic(cfg.synth, cfg.seed)
    save_dataset(ds, out)
    print(" ".join(f"{name}={len(recs)}" for name, recs in ds.splits.items()))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _echo(cfg)
    if args.dry_run:
        return EXIT_OK
    ds = load_dataset(_existing(cfg, "data"))
    out = _require(cfg, "checkpoint")
    recs = ds.splits.get("train")
    if not recs:
        raise DataError("dataset has no training images")
    images = experiments.prepare(recs, cfg.train)
    if images.shape[-1] != cfg.model.input_size or images.shape[-2] != cfg.model.input_size:
        raise ConfigError(f"training images are {images.shape[-2]}x{images.shape[-1]}, model expects {cfg.model.input_size}")
    model = build_model(cfg.model, cfg.seed)
    stats = train(model, images, [r.label for r in recs], cfg.train, checkpoint_dir=cfg.paths.get("checkpoint_dir"))
    save_checkpoint(model, out)
    if "stats" in cfg.paths:
        write_stats(stats, cfg.paths["stats"])
    for s in stats:
        print(f"epoch {s.epoch:3d}  loss {s.mean_loss:.4f}  active {s.active_fraction:.3f}  p {s.gem_p:.3f}")
    return EXIT_OK


def cmd_embed(args) -> int:
    model = load_checkpoint(_existing_path(args.checkpoint, "checkpoint"))
    ds = load_dataset(_existing_path(args.data, "data"))
    if args.split not in ds.splits:
        raise DataError(f"dataset has no split {args.split!r}; available: {sorted(ds.splits)}")
    recs = ds.splits[args.split]
    vecs = experiments.embed_records(model, recs) if recs else np.zeros((0, model.config.embed_dim))
    index = build_index(zip([r.id for r in recs], vecs), dim=model.config.embed_dim)
    index.save(args.out)
    print(f"embedded {len(index)} images from split {args.split!r} into {args.out}")
    return EXIT_OK


def cmd_index(args) -> int:
    parts = [EmbeddingIndex.load(_existing_path(p, "index")) for p in args.inputs]
    dims = {p.dim for p in parts}
    if len(dims) > 1:
        raise DataError(f"indexes have different dimensions: {sorted(dims)}")
    items = [(vid, vec) for p in parts for vid, vec in zip(p.ids, p.vectors)]
    merged = build_index(items, dim=dims.pop())
    merged.save(args.out)
    print(f"index with {len(merged)} entries of dimension {merged.dim} written to {args.out}")
    return EXIT_OK


def cmd_query(args) -> int:
    index = EmbeddingIndex.load(_existing_path(args.index, "index"))
    if (args.image is None) == (args.id is None):
        raise ConfigError("pass exactly one of --image or --id")
    if args.id is not None:
        if args.id not in index.ids:
            raise DataError(f"id {args.id!r} is not in the index")
        q = index.vectors[index.ids.index(args.id)]
    else:
        if args.checkpoint is None:
            raise ConfigError("--image needs --checkpoint")
        model = load_checkpoint(_existing_path(args.checkpoint, "checkpoint"))
        img = load_image(_existing_path(args.image, "image")).pixels
        size = model.config.input_size
        if img.shape[1:] == (size, size):
            q = embed_batch(img[None], model)[0]
        else:
            q = five_crop_embed(img, model).values
    res = query_topk(index, q, args.k)
    for vid, dist in res:
        print(f"{vid}\t{dist:.6f}")
    if res.truncated:
        print(f"note: k={args.k} exceeds the index size {len(index)}", file=sys.stderr)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = load_checkpoint(_existing_path(args.checkpoint, "checkpoint"))
    ds = load_dataset(_existing_path(args.data, "data"))
    config = {"checkpoint": str(args.checkpoint), "data": str(args.data), "model": model.config.to_dict()}
    report = experiments.evaluate_dataset(model, ds, config=config)
    text = report.to_text()
    if args.out:
        Path(args.out + ".txt").write_text(text)
        Path(args.out + ".json").write_text(report.to_json())
    print(text, end="")
    for name, secs in report.timings.items():
        print(f"{name} time: {secs:.3f}s", file=sys.stderr)
    return EXIT_OK


def cmd_compare_miners(args) -> int:
    cfg = resolve_config(args)
    if args.seeds < 5:
        raise ConfigError("compare-miners needs at least 5 seeds")
    _echo(cfg)
    setup = experiments.DeskSetup(cfg.synth, cfg.model, cfg.train)
    table = experiments.compare_miners(setup, range(cfg.seed, cfg.seed + args.seeds), log=lambda m: print(m, file=sys.stderr))
    text = experiments.format_table(table)
    print(text)
    if "report" in cfg.paths:
        Path(cfg.paths["report"]).write_text(json.dumps({"config": cfg.to_dict(), "mp@5": table}, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok, text = gradcheck.report(args.instances, args.seed)
    print(text)
    return EXIT_OK if ok else EXIT_VERIFY


def _existing_path(p, what: str) -> Path:
    p = Path(p)
    if not p.exists():
        raise DataError(f"{what} {p} does not exist")
    return p


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_flags(p, train_flags=True):
    p.add_argument("--config", help="RunConfig JSON file; flags given here take precedence")
    p.add_argument("--seed", type=int)
    if train_flags:
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--margin", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--weight-decay", dest="weight_decay", type=float)
        p.add_argument("--strategy")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tripletdrn", description="Dilated residual retrieval embeddings trained with triplet mining.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    _config_flags(p, train_flags=False)
    p.add_argument("--out", dest="data", help="output directory")
    p.add_argument("--groups", type=int, default=0, help="groups-of-four dataset with this many groups")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset's train split")
    _config_flags(p)
    p.add_argument("--data")
    p.add_argument("--out", dest="checkpoint", help="checkpoint path")
    p.add_argument("--stats", help="per-epoch CSV")
    p.add_argument("--checkpoint-dir", dest="checkpoint_dir", help="also save a checkpoint per epoch")
    p.add_argument("--dry-run", action="store_true", help="echo the effective config and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", help="embed one split into an index file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="gallery")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("index", help="merge index files, validating ids and dimensions")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="top-k search by image or by indexed id")
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--image")
    p.add_argument("--id")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="mP@1/5/10 or recall@4 report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="writes OUT.txt and OUT.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare-miners", help="train all four mining strategies over several seeds")
    _config_flags(p)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--report", help="JSON table output")
    p.set_defaults(func=cmd_compare_miners)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (DataError, PPMError, IndexFormatError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
