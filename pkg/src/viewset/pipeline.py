"""End-to-end helpers shared by the command line and the acceptance suite."""
from __future__ import annotations

import logging
import zlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig
from .data import Dataset, DatasetSplit, subset_views
from .errors import CheckpointError, InputError
from .initializer import ShapeRecord
from .model import ViewSetModel, load_checkpoint, load_model, save_model
from .training import (AdamW, EpochLog, LOG_HEADER, evaluate, format_log, labels_of, rng_stream, train_stage1,
                       train_stage2)

log = logging.getLogger(__name__)

STAGE1_CKPT = "stage1.ckpt"
MODEL_CKPT = "model.ckpt"
TRAIN_LOG = "train_log.csv"


def num_targets(shapes: Sequence[ShapeRecord], target: str) -> int:
    return int(labels_of(shapes, target).max()) + 1


def build_model(cfg: RunConfig, dataset: Dataset) -> ViewSetModel:
    cfg.validate()
    return ViewSetModel(cfg.init_config(dataset.dim), cfg.encoder_config(),
                        cfg.head_config(num_targets(dataset.shapes, cfg.target)), rng_stream(cfg.seed, "init"))


def fixed_view_subsets(shapes: Sequence[ShapeRecord], m: int | None, seed: int) -> list[np.ndarray] | None:
    """Evaluation subsets of ``m`` views per shape, fixed by seed and shape id."""
    if not m:
        return None
    return [subset_views(s, m, seed=(seed << 32) ^ zlib.crc32(s.shape_id.encode())) for s in shapes]


def _load_log(path: Path) -> list[EpochLog]:
    rows = []
    lines = path.read_text().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise InputError(f"{path} is not a training log")
    for line in lines[1:]:
        e, *rest = line.split(",")
        rows.append(EpochLog(int(e), *(float(v) for v in rest)))
    return rows


def train_model(cfg: RunConfig, dataset: Dataset, split: DatasetSplit, stage: str = "both",
                skip_stage1: bool = False, out_dir: str | Path | None = None,
                resume: bool = False) -> tuple[ViewSetModel, list[EpochLog]]:
    """Run stage 1, stage 2 or both, writing checkpoints and the log to ``out_dir``.

    Stage 2 after a separate stage-1 run picks up ``stage1.ckpt`` from ``out_dir``.
    """
    train = split.select(dataset, "train")
    val = split.select(dataset, "val")
    if not train:
        raise InputError("the training split is empty")
    tc = cfg.train_config()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, dataset)
    k = model.head_cfg.num_classes

    if stage in ("1", "both") and not skip_stage1:
        train_stage1(train, model.initializer, k, tc, cfg.seed, cfg.target, cfg.label_smoothing)
        if out is not None:
            save_model(out / STAGE1_CKPT, model, meta={"stage": 1})
        if stage == "1":
            return model, []
    elif stage == "2" and not skip_stage1:
        path = out / STAGE1_CKPT if out is not None else None
        if path is None or not path.exists():
            raise InputError("no stage-1 checkpoint found; run --stage 1 first or pass --skip-stage1")
        tensors, _ = load_checkpoint(path)
        init_keys = {key: v for key, v in tensors.items() if key.startswith("init.")}
        model.load_state_dict(init_keys, strict=False)

    start, logs, opt = 0, [], None
    if resume and out is not None and (out / MODEL_CKPT).exists():
        model, extra, meta = load_model(out / MODEL_CKPT)
        start = int(meta.get("epoch", 0))
        params = model.parameters()
        if tc.freeze_initializer:
            frozen = {id(p) for p in model.initializer.parameters()}
            params = [p for p in params if id(p) not in frozen]
        opt = AdamW(params, (tc.beta1, tc.beta2), tc.adam_eps, tc.weight_decay)
        try:
            opt.load_state(extra)
        except KeyError as exc:
            raise CheckpointError(f"missing optimizer key {exc.args[0]}", exc.args[0]) from None
        if (out / TRAIN_LOG).exists():
            logs = _load_log(out / TRAIN_LOG)[:start]
        log.info("resuming from epoch %d", start)

    val_views = fixed_view_subsets(val, tc.views_per_shape, cfg.seed) if val else None

    def checkpoint(epoch, optimizer, rows):
        if out is None:
            return
        save_model(out / MODEL_CKPT, model, extra=optimizer.state(), meta={"stage": 2, "epoch": epoch + 1})
        (out / TRAIN_LOG).write_text(format_log(logs + rows))

    model, rows = train_stage2(model, train, tc, cfg.seed, val or None, cfg.target, val_views, start, opt, checkpoint)
    return model, logs + rows


def evaluate_split(model: ViewSetModel, dataset: Dataset, split: DatasetSplit, part: str = "test",
                   target: str = "label", views_per_shape: int | None = None, seed: int = 0):
    shapes = split.select(dataset, part)
    if not shapes:
        raise InputError(f"split part {part!r} is empty")
    return evaluate(model, shapes, target, fixed_view_subsets(shapes, views_per_shape, seed))
