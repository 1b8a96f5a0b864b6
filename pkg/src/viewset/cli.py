"""Command-line entry point: ``viewset <command> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import RunConfig
from .data import Dataset, DatasetSplit, SyntheticConfig, generate_synthetic, split
from .encoder import EncoderConfig
from .errors import CheckpointError, ConfigError, InputError, StateError
from .head import HeadConfig, smoothed_cross_entropy
from .initializer import InitializerConfig
from .model import ViewSetModel, load_model
from .numerics import NumericsError
from .pipeline import evaluate_split, fixed_view_subsets, train_model
from .retrieval import METRICS, model_predictions, retrieve, write_rank_lists
from .training import rng_stream

log = logging.getLogger("viewset")

ABLATION_AXES = {
    "blocks": ("num_blocks", "0,1,2,4"),
    "pos-enc": ("use_position_encoding", "false,true"),
    "cls-token": ("use_class_token", "false,true"),
    "transition": ("transition", "max,mean,concat_max_mean"),
    "decoder": ("decoder_hidden", "none;512;1024,512"),
    "views": ("views_per_shape", "1,4,8,20"),
}


class CommandError(Exception):
    pass


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.set(*item.split("=", 1))
    for flag in ("seed", "dataset", "split_file", "out_dir", "target"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, flag, value)
    cfg.validate()
    return cfg


def _load_data(cfg: RunConfig) -> tuple[Dataset, DatasetSplit]:
    for path in (cfg.dataset, cfg.split_file):
        if not Path(path).exists():
            raise InputError(f"file not found: {path}")
    dataset = Dataset.load(cfg.dataset)
    return dataset, DatasetSplit.load(cfg.split_file, dataset)


def _parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        ratios = tuple(float(r) for r in text.split(","))
    except ValueError:
        raise CommandError(f"--ratios must be three comma-separated numbers, got {text!r}") from None
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9 or ratios[0] <= 0:
        raise CommandError(f"--ratios must be three nonnegative numbers summing to 1 with a positive train share, got {text!r}")
    return ratios


def cmd_gen(args) -> int:
    ratios = _parse_ratios(args.ratios)
    cfg = SyntheticConfig(args.classes, args.subclasses, args.shapes, args.views, args.dim, None, args.margin,
                          args.noise, args.subclass_separation, args.shape_jitter, args.viewpoint_spread, args.seed)
    dataset = generate_synthetic(cfg)
    parts = split(dataset, ratios, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset.save(out / "dataset.txt")
    parts.save(out / "split.txt")
    print(f"wrote {len(dataset.shapes)} shapes ({args.classes} classes, {args.views} views, dim {args.dim}) "
          f"to {out / 'dataset.txt'}; split {len(parts.train)}/{len(parts.val)}/{len(parts.test)} -> {out / 'split.txt'}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    dataset, parts = _load_data(cfg)
    model, logs = train_model(cfg, dataset, parts, args.stage, args.skip_stage1, cfg.out_dir, args.resume)
    if logs:
        last = logs[-1]
        print(f"epoch {last.epoch}: loss {last.train_loss:.4f} train acc {last.train_acc:.4f} "
              f"val class acc {last.val_class_acc:.4f} val inst acc {last.val_inst_acc:.4f}")
    print(f"outputs in {cfg.out_dir}")
    return 0


def _load_ckpt(path: str):
    if not Path(path).exists():
        raise InputError(f"checkpoint not found: {path}")
    return load_model(path)


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    dataset, parts = _load_data(cfg)
    model, _, _ = _load_ckpt(args.checkpoint)
    m = cfg.views_per_shape or None
    cls_acc, inst_acc, probs = evaluate_split(model, dataset, parts, args.part, cfg.target, m, cfg.seed)
    print(f"class_acc={cls_acc!r}")
    print(f"inst_acc={inst_acc!r}")
    if args.predictions:
        shapes = parts.select(dataset, args.part)
        lines = ["shape_id,predicted_class,confidence" + "".join(f",p{k}" for k in range(probs.shape[1]) if args.dist)]
        for s, p in zip(shapes, probs):
            c = int(np.argmax(p))
            extra = "".join(f",{float(v)!r}" for v in p) if args.dist else ""
            lines.append(f"{s.shape_id},{c},{float(p[c])!r}{extra}")
        Path(args.predictions).write_text("\n".join(lines) + "\n")
    return 0


def cmd_retrieve(args) -> int:
    cfg = _run_config(args)
    if args.subcategory_checkpoint is None and not args.no_subcat:
        raise CommandError("missing --subcategory-checkpoint; pass --no-subcat for single-pass ranking")
    dataset, parts = _load_data(cfg)
    cat_model, _, _ = _load_ckpt(args.category_checkpoint)
    sub_model = None if args.no_subcat else _load_ckpt(args.subcategory_checkpoint)[0]
    shapes = parts.select(dataset, args.part)
    if not shapes:
        raise InputError(f"split part {args.part!r} is empty")
    views = fixed_view_subsets(shapes, cfg.views_per_shape or None, cfg.seed)
    cat_probs, sub_pred = model_predictions(shapes, cat_model, sub_model, views)
    ids = [s.shape_id for s in shapes]
    ranks, report = retrieve(ids, ids, cat_probs, sub_pred, parts.labels, parts.sublabels, cfg.top_n)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_rank_lists(out / "ranklists.txt", ranks, cfg.top_n)
    (out / "metrics.csv").write_text(report.to_csv())
    for name, row in (("micro", report.micro), ("macro", report.macro)):
        print(name + " " + " ".join(f"{m}={row[m]:.4f}" for m in METRICS))
    return 0


def _ablation_values(axis: str, text: str | None) -> list[str]:
    key, default = ABLATION_AXES[axis]
    sep = ";" if axis == "decoder" else ","
    return [v.strip() for v in (text or default).split(sep) if v.strip()]


def cmd_ablate(args) -> int:
    if args.axis not in ABLATION_AXES:
        raise CommandError(f"unknown axis {args.axis!r}; valid axes: {', '.join(ABLATION_AXES)}")
    base = _run_config(args)
    dataset, parts = _load_data(base)
    key = ABLATION_AXES[args.axis][0]
    rows = ["axis,value,class_acc,inst_acc"]
    for value in _ablation_values(args.axis, args.values):
        cfg = dataclasses.replace(base)
        cfg.set(key, "" if value == "none" else value)
        cfg.validate()
        model, _ = train_model(cfg, dataset, parts)
        m = cfg.views_per_shape or None
        cls_acc, inst_acc, _ = evaluate_split(model, dataset, parts, "test", cfg.target, m, cfg.seed)
        rows.append(f"{args.axis},{value},{cls_acc!r},{inst_acc!r}")
        print(rows[-1])
    text = "\n".join(rows) + "\n"
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(text)
    return 0


def tiny_gradcheck_setup(seed: int = 0, views: int = 4, dim: int = 16, heads: int = 2, blocks: int = 2,
                         classes: int = 3, feature_dim: int = 5):
    """A small deterministic model, input and loss closure for gradient checking."""
    rng = rng_stream(seed, "gradcheck")
    model = ViewSetModel(InitializerConfig("precomputed", dim, feature_dim),
                         EncoderConfig(blocks, heads, dim, 2, 0.0, max_views=views),
                         HeadConfig(classes, decoder_hidden=(dim,)), rng)
    x = rng.normal(size=(2, views, feature_dim))
    y = np.array([0, classes - 1])

    def closure():
        return smoothed_cross_entropy(model(x, training=False), y, 0.1)

    return model, closure


def run_gradcheck(step: float = 1e-5, seed: int = 0, corrupt: bool = False) -> float:
    model, closure = tiny_gradcheck_setup(seed)
    if corrupt:
        with nx.corrupted_backward():
            return nx.grad_check(closure, model.parameters(), step)
    return nx.grad_check(closure, model.parameters(), step)


def cmd_gradcheck(args) -> int:
    err = run_gradcheck(args.step, args.seed or 0, args.corrupt_backward)
    ok = err <= args.tolerance
    print(f"max_relative_error={err!r} tolerance={args.tolerance!r} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_dump_attention(args) -> int:
    cfg = _run_config(args)
    dataset = Dataset.load(cfg.dataset)
    model, _, _ = _load_ckpt(args.checkpoint)
    lookup = dataset.by_id()
    if args.shape_id not in lookup:
        raise InputError(f"unknown shape id {args.shape_id!r}")
    record: list[np.ndarray] = []
    with nx.no_grad():
        model.forward(lookup[args.shape_id].views[None], training=False, record=record)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for b, attn in enumerate(record):
        a = attn[0]
        lines = ["head,view," + ",".join(f"a{j}" for j in range(a.shape[-1]))]
        for h in range(a.shape[0]):
            for i in range(a.shape[1]):
                lines.append(f"{h},{i}," + ",".join(repr(float(v)) for v in a[h, i]))
        (out / f"attention_block{b}.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(record)} attention files to {out}")
    return 0


def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    if data:
        p.add_argument("--dataset", help="feature file")
        p.add_argument("--split", dest="split_file", help="split file")
    p.add_argument("--out", dest="out_dir", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewset", description="View-set attention classifier and retrieval tools")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-view dataset and split")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--subclasses", type=int, default=2)
    p.add_argument("--shapes", type=int, default=40, help="shapes per class")
    p.add_argument("--views", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--margin", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--subclass-separation", type=float, default=2.5)
    p.add_argument("--shape-jitter", type=float, default=0.5)
    p.add_argument("--viewpoint-spread", type=float, default=0.3)
    p.add_argument("--ratios", default="0.6,0.2,0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="two-stage training")
    _common(p)
    p.add_argument("--stage", choices=("1", "2", "both"), default="both")
    p.add_argument("--skip-stage1", action="store_true", help="train end to end from random init")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--target", choices=("label", "sublabel"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="class and instance accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--part", default="test", choices=("train", "val", "test"))
    p.add_argument("--target", choices=("label", "sublabel"))
    p.add_argument("--predictions", help="write shape_id,predicted_class,confidence CSV")
    p.add_argument("--dist", action="store_true", help="include the full distribution in --predictions")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("retrieve", help="two-pass retrieval and ranking metrics")
    _common(p)
    p.add_argument("--category-checkpoint", required=True)
    p.add_argument("--subcategory-checkpoint")
    p.add_argument("--no-subcat", action="store_true", help="single-pass ranking")
    p.add_argument("--part", default="test", choices=("train", "val", "test"))
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("ablate", help="train one variant per value of an ablation axis")
    _common(p)
    p.add_argument("--axis", required=True, help=f"one of {', '.join(ABLATION_AXES)}")
    p.add_argument("--values", help="comma-separated values (';' for decoder widths)")
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="compare backprop with central differences on a tiny model")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attention", help="write per-block attention matrices of one shape as CSV")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--shape-id", required=True)
    p.set_defaults(func=cmd_dump_attention)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: corrupt checkpoint ({exc})", file=sys.stderr)
    except (CommandError, ConfigError, InputError, StateError, NumericsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
