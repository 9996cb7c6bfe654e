"""Command-line entry point: ``mulcon <subcommand> [--config PATH] [--out DIR] [--seed N] [key=value ...]``.

Trailing ``key=value`` pairs override entries of the JSON run config by dotted
path (``step1.lr=0.001``, ``model.heads=2``); later pairs win. Every
subcommand writes the resolved config to ``<out>/config.json`` before doing
anything else. Exit codes: 0 success, 1 runtime failure, 2 bad arguments.
Failures print a one-line JSON object ``{"error": ..., "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import data as D
from . import evaluate as E
from .model import init_model
from .training import TrainConfig, load_checkpoint, load_data, run_variant

log = logging.getLogger("mulcon")

SUBCOMMANDS = ("gen-data", "train", "eval", "retrieve", "export-embeddings", "export-attention", "gradcheck")


class UsageError(ValueError):
    """Rejected command line; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mulcon", description="Label-level contrastive multi-label classification on synthetic glyph images.")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("overrides", nargs="*", metavar="key=value", help="dotted config overrides")
    p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
    p.add_argument("--out", default="mulcon_out", help="output directory (default: %(default)s)")
    p.add_argument("--seed", type=int, help="run seed; for gen-data this is the dataset seed")
    p.add_argument("--checkpoint", help="model checkpoint for eval/retrieve/export-*")
    p.add_argument("--split", choices=("train", "test"), default="test", help="split used by eval/retrieve/export-*")
    p.add_argument("--index", type=int, default=0, help="query / image index for retrieve and export-attention")
    p.add_argument("--labels", help="comma-separated query labels for retrieve (default: all active)")
    p.add_argument("--head-label", type=int, help="label whose per-head maps export-attention writes")
    p.add_argument("-k", type=int, default=4, help="number of retrieval hits")
    p.add_argument("--instances", type=int, default=20, help="random instances per gradcheck case")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


# -- config resolution -------------------------------------------------------------


def parse_overrides(pairs: Sequence[str]) -> List[tuple]:
    out = []
    for pair in pairs:
        key, sep, raw = pair.partition("=")
        if not sep or not key or any(not part for part in key.split(".")):
            raise UsageError(f"malformed override {pair!r}; expected dotted.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out.append((key.split("."), value))
    return out


def apply_overrides(doc: dict, overrides: Sequence[tuple]) -> dict:
    for path, value in overrides:
        node = doc
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise UsageError(f"override {'.'.join(path)!r} does not name a config section")
            node = node[part]
        if path[-1] not in node:
            raise UsageError(f"unknown config key {'.'.join(path)!r}")
        node[path[-1]] = value
    return doc


def resolve_config(args) -> TrainConfig:
    overrides = parse_overrides(args.overrides)
    if args.config:
        doc = json.loads(Path(args.config).read_text())
    elif args.checkpoint and (Path(args.checkpoint).parent / "config.json").exists():
        doc = json.loads((Path(args.checkpoint).parent / "config.json").read_text())
    else:
        doc = TrainConfig().to_dict()
    doc = apply_overrides(TrainConfig.from_dict(doc).to_dict(), overrides)
    if args.seed is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        if args.subcommand == "gen-data":
            doc["data"]["seed"] = args.seed
        else:
            doc["seed"] = args.seed
    try:
        return TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


# -- subcommands -------------------------------------------------------------------------


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


def _split(config: TrainConfig, which: str):
    train, test = load_data(config)
    return train if which == "train" else test


def _model(config: TrainConfig, checkpoint: Optional[str]):
    if not checkpoint:
        raise UsageError("--checkpoint is required for this subcommand")
    from .checkpoint import load_tensors

    kind = "backbone" if "head.w" in load_tensors(checkpoint) else "mulcon"
    model = init_model(config.model, config.seed, kind, config.np_dtype)
    load_checkpoint(model, checkpoint)
    return model


def cmd_gen_data(config: TrainConfig, args, out: Path) -> int:
    train, test = D.gen_dataset(config.data)
    D.save_dataset(train, out / "train.mlgd")
    D.save_dataset(test, out / "test.mlgd")
    _emit({"train": len(train), "test": len(test), "path": str(out),
           "label_marginals": train.labels.mean(axis=0).round(4).tolist()})
    return 0


def cmd_train(config: TrainConfig, args, out: Path) -> int:
    train, test = load_data(config)
    result = run_variant(config, train, test, out_dir=out)
    summary = {"variant": config.variant, "seed": config.seed, "out": str(out),
               "seconds": round(result.log.wall_clock, 2), **result.test_metrics.summary()}
    _emit(summary)
    return 0


def cmd_eval(config: TrainConfig, args, out: Path) -> int:
    report = E.evaluate_split(_model(config, args.checkpoint), _split(config, args.split))
    (out / "metrics.json").write_text(report.to_json())
    print(report.to_json())
    return 0


def cmd_retrieve(config: TrainConfig, args, out: Path) -> int:
    model = _model(config, args.checkpoint)
    split = _split(config, args.split)
    if not 0 <= args.index < len(split):
        raise UsageError(f"--index {args.index} outside split of {len(split)} images")
    _, g = E.predict(model, split.float_images(dtype=model.dtype), return_embeddings=True)
    if args.labels:
        labels = [int(x) for x in args.labels.split(",")]
    else:
        labels = np.flatnonzero(split.labels[args.index]).tolist()
    if not labels:
        raise UsageError(f"image {args.index} has no active labels; pass --labels")
    res = E.retrieve(g[args.index], labels, g, k=args.k, query_id=args.index)
    doc = {
        "query_id": res.query_id,
        "labels": res.labels,
        "hits": [dict(h.__dict__, labels=np.flatnonzero(split.labels[h.image_id]).tolist()) for h in res.hits],
    }
    (out / "retrieval.json").write_text(json.dumps(doc, indent=2))
    _emit(doc)
    return 0


def cmd_export_embeddings(config: TrainConfig, args, out: Path) -> int:
    path = out / f"embeddings_{args.split}.csv"
    rows = E.export_embeddings(_model(config, args.checkpoint), _split(config, args.split), path)
    _emit({"rows": rows, "path": str(path)})
    return 0


def cmd_export_attention(config: TrainConfig, args, out: Path) -> int:
    model = _model(config, args.checkpoint)
    if model.kind != "mulcon":
        raise UsageError("attention maps need a label-level (mulcon) checkpoint")
    split = _split(config, args.split)
    if not 0 <= args.index < len(split):
        raise UsageError(f"--index {args.index} outside split of {len(split)} images")
    image = split.float_images(dtype=model.dtype)[args.index]
    prefix = out / f"attn_{args.split}{args.index}"
    maps = E.export_attention(model, image, split.labels[args.index], prefix, args.head_label)
    _emit({"files": [f"{prefix}_{stem}.pgm" for stem in maps], "grid": model.config.encoder.grid})
    return 0


def cmd_gradcheck(config: TrainConfig, args, out: Path) -> int:
    from .gradcheck import run_gradcheck

    report = run_gradcheck(instances=args.instances, seed=config.seed)
    for r in report.results:
        print(r.line())
    print(f"{'all passed' if report.passed else 'FAILURES'} in {report.seconds:.1f}s")
    (out / "gradcheck.json").write_text(json.dumps(report.to_dict(), indent=2))
    return 0 if report.passed else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "retrieve": cmd_retrieve,
    "export-embeddings": cmd_export_embeddings,
    "export-attention": cmd_export_attention,
    "gradcheck": cmd_gradcheck,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_intermixed_args(argv)
        config = resolve_config(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail("usage", f"cannot read config: {exc}", 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.to_json())
        return COMMANDS[args.subcommand](config, args, out)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except Exception as exc:  # noqa: BLE001 - every runtime failure becomes a structured exit 1
        log.debug("failure", exc_info=True)
        return _fail(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
