"""Two-stage optimization, optimizers and the warmup-restart cosine schedule."""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError
from .head import smoothed_cross_entropy
from .initializer import Initializer, ShapeRecord, xavier
from .model import ViewSetModel
from .numerics import Parameter, Tensor


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (data, init, dropout, perm, ...)."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


@dataclass
class ScheduleConfig:
    peak_lr: float = 1e-3
    interval_epochs: float = 100
    warmup_epochs: float = 5
    peak_decay: float = 0.4
    total_epochs: float = 300

    def validate(self) -> None:
        if not 0 < self.warmup_epochs < self.interval_epochs:
            raise ConfigError("need 0 < warmup_epochs < interval_epochs")
        if not 0 <= self.peak_decay < 1:
            raise ConfigError("need 0 <= peak_decay < 1")
        if self.peak_lr <= 0 or self.total_epochs <= 0:
            raise ConfigError("peak_lr and total_epochs must be positive")


def lr_at(epoch: float, cfg: ScheduleConfig) -> float:
    """Learning rate at a (fractional) epoch.

    Each restart interval warms up linearly from 0 to its peak, then follows a
    half cosine back towards 0. The peak shrinks by ``peak_decay`` per interval.
    """
    if not 0 <= epoch <= cfg.total_epochs:
        raise InputError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    i = int(epoch // cfg.interval_epochs)
    t = epoch - i * cfg.interval_epochs
    peak = cfg.peak_lr * (1.0 - cfg.peak_decay) ** i
    if t < cfg.warmup_epochs:
        return peak * t / cfg.warmup_epochs
    frac = (t - cfg.warmup_epochs) / (cfg.interval_epochs - cfg.warmup_epochs)
    return peak * (1.0 + math.cos(math.pi * frac)) / 2.0


def cosine_anneal(epoch: float, base_lr: float, total_epochs: float) -> float:
    return base_lr * (1.0 + math.cos(math.pi * min(epoch / total_epochs, 1.0))) / 2.0


class SGD:
    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, lr: float) -> None:
        sgd_step(self.params, [p.grad for p in self.params], lr, self.momentum, self.buf, self.weight_decay)
        self.steps += 1


def sgd_step(params, grads, lr: float, momentum: float, buffers: list[np.ndarray], weight_decay: float = 0.0) -> None:
    """Classical momentum: ``v = mu*v + g; p -= lr*v``."""
    for i, (p, g) in enumerate(zip(params, grads)):
        if weight_decay:
            g = g + weight_decay * p.data
        buffers[i] = momentum * buffers[i] + g
        p.assign(p.data - lr * buffers[i])


class AdamW:
    def __init__(self, params: Sequence[Parameter], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.steps = 0

    def step(self, lr: float) -> None:
        self.steps += 1
        adamw_step(self.params, [p.grad for p in self.params], lr, self.beta1, self.beta2, self.eps,
                   self.weight_decay, self.m, self.v, self.steps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array(float(self.steps))}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"opt.m.{p.name}"] = m
            out[f"opt.v.{p.name}"] = v
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.steps = int(state["opt.step"])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(state[f"opt.m.{p.name}"])
            self.v[i] = np.array(state[f"opt.v.{p.name}"])


def adamw_step(params, grads, lr, beta1, beta2, eps, weight_decay, m, v, step: int) -> None:
    """Adam moments with bias correction and decoupled weight decay."""
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for i, (p, g) in enumerate(zip(params, grads)):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        update = (m[i] / c1) / (np.sqrt(v[i] / c2) + eps) + weight_decay * p.data
        p.assign(p.data - lr * update)


# ------------------------------------------------------------------- loops

@dataclass
class TrainConfig:
    stage1_epochs: int = 30
    stage1_lr: float = 0.01
    stage1_momentum: float = 0.9
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    # views fed per shape; None keeps every view
    views_per_shape: int | None = None
    freeze_initializer: bool = False
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_class_acc: float
    val_inst_acc: float


LOG_HEADER = "epoch,lr,train_loss,train_acc,val_class_acc,val_inst_acc"


def format_log(rows: Sequence[EpochLog]) -> str:
    lines = [LOG_HEADER]
    for r in rows:
        lines.append(f"{r.epoch},{r.lr!r},{r.train_loss!r},{r.train_acc!r},{r.val_class_acc!r},{r.val_inst_acc!r}")
    return "\n".join(lines) + "\n"


def labels_of(shapes: Sequence[ShapeRecord], target: str) -> np.ndarray:
    return np.array([s.label if target == "label" else s.sublabel for s in shapes], dtype=np.int64)


def _batch_views(shapes: Sequence[ShapeRecord], idx, rng: np.random.Generator | None, m: int | None) -> np.ndarray:
    """Stack the view sets of ``shapes[idx]``; with ``rng`` each set is shuffled (and subsampled to ``m``)."""
    out = []
    for i in idx:
        v = shapes[i].views
        if rng is not None:
            order = rng.permutation(len(v))
            v = v[order[:m] if m else order]
        elif m:
            v = v[:m]
        out.append(v)
    return np.stack(out)


def accuracies(pred: np.ndarray, truth: np.ndarray) -> tuple[float, float]:
    """(class accuracy, instance accuracy): mean per-class recall and overall hit rate."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if truth.size == 0:
        raise InputError("cannot score an empty split")
    inst = float(np.mean(pred == truth))
    per_class = [float(np.mean(pred[truth == c] == c)) for c in np.unique(truth)]
    return float(np.mean(per_class)), inst


def evaluate(model: ViewSetModel, shapes: Sequence[ShapeRecord], target: str = "label",
             views: Sequence[np.ndarray] | None = None, batch_size: int = 64) -> tuple[float, float, np.ndarray]:
    """Class accuracy, instance accuracy and class distributions over ``shapes``.

    ``views`` overrides the stored view sets (e.g. fixed evaluation subsets).
    """
    if len(shapes) == 0:
        raise InputError("cannot evaluate an empty split")
    sets = list(views) if views is not None else [s.views for s in shapes]
    probs = []
    for start in range(0, len(sets), batch_size):
        p, _ = model.predict(np.stack(sets[start:start + batch_size]))
        probs.append(p)
    probs = np.concatenate(probs)
    cls, inst = accuracies(probs.argmax(axis=1), labels_of(shapes, target))
    return cls, inst, probs


class StageOneHead:
    """Temporary classifier for stage 1: per-view affine logits averaged over views."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.w = Parameter(xavier(rng, dim, num_classes), "stage1.w")
        self.b = Parameter(np.zeros(num_classes), "stage1.b")

    def parameters(self) -> list[Parameter]:
        return [self.w, self.b]

    def __call__(self, z: Tensor) -> Tensor:
        return nx.mean_over(z @ self.w + self.b, -2)


def train_stage1(shapes: Sequence[ShapeRecord], initializer: Initializer, num_classes: int, cfg: TrainConfig,
                 seed: int = 0, target: str = "label", label_smoothing: float = 0.1) -> tuple[Initializer, float]:
    """Pretrain ``initializer`` alone with SGD and cosine annealing.

    Returns the initializer (trained in place) and the final training accuracy
    of the throwaway head.
    """
    if len(shapes) == 0:
        raise InputError("stage 1 needs a nonempty dataset")
    head = StageOneHead(initializer.cfg.output_dim, num_classes, rng_stream(seed, "stage1-head"))
    params = initializer.parameters() + head.parameters()
    opt = SGD(params, momentum=cfg.stage1_momentum)
    perm_rng = rng_stream(seed, "stage1-perm")
    labels = labels_of(shapes, target)
    n, bs = len(shapes), max(1, cfg.batch_size)
    steps = math.ceil(n / bs)
    correct = 0
    for epoch in range(cfg.stage1_epochs):
        order = perm_rng.permutation(n)
        correct = 0
        for s in range(steps):
            idx = order[s * bs:(s + 1) * bs]
            x = Tensor(_batch_views(shapes, idx, perm_rng, cfg.views_per_shape))
            nx.zero_grad(params)
            logits = head(initializer(x, training=True))
            loss = smoothed_cross_entropy(logits, labels[idx], label_smoothing)
            correct += int(np.sum(logits.data.argmax(axis=1) == labels[idx]))
            nx.backward(loss)
            opt.step(cosine_anneal(epoch + s / steps, cfg.stage1_lr, cfg.stage1_epochs))
    return initializer, correct / n


def train_stage2(model: ViewSetModel, train: Sequence[ShapeRecord], cfg: TrainConfig, seed: int = 0,
                 val: Sequence[ShapeRecord] | None = None, target: str = "label",
                 val_views: Sequence[np.ndarray] | None = None, start_epoch: int = 0,
                 optimizer: AdamW | None = None,
                 on_epoch: Callable[[int, AdamW, list[EpochLog]], None] | None = None) -> tuple[ViewSetModel, list[EpochLog]]:
    """Jointly optimize the whole model with AdamW under :func:`lr_at`.

    Every epoch each shape's views are fed in a fresh random order. The learning
    rate is updated per step from the fractional epoch; the log records the
    rate at each epoch start.
    """
    sched = cfg.schedule
    sched.validate()
    if len(train) == 0:
        raise InputError("stage 2 needs a nonempty training split")
    params = model.parameters()
    if cfg.freeze_initializer:
        frozen = {id(p) for p in model.initializer.parameters()}
        params = [p for p in params if id(p) not in frozen]
    opt = optimizer or AdamW(params, (cfg.beta1, cfg.beta2), cfg.adam_eps, cfg.weight_decay)
    labels = labels_of(train, target)
    eps = model.head_cfg.label_smoothing
    n, bs = len(train), max(1, cfg.batch_size)
    steps = math.ceil(n / bs)
    logs: list[EpochLog] = []
    total = int(sched.total_epochs)
    for epoch in range(start_epoch, total):
        # streams are keyed by epoch so a resumed run draws what an uninterrupted one would
        perm_rng = rng_stream(seed, f"perm-{epoch}")
        drop_rng = rng_stream(seed, f"dropout-{epoch}")
        order = perm_rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for s in range(steps):
            idx = order[s * bs:(s + 1) * bs]
            x = Tensor(_batch_views(train, idx, perm_rng, cfg.views_per_shape))
            nx.zero_grad(model.parameters())
            logits = model(x, training=True, rng=drop_rng)
            loss = smoothed_cross_entropy(logits, labels[idx], eps)
            nx.backward(loss)
            opt.step(lr_at(epoch + s / steps, sched))
            loss_sum += loss.item() * len(idx)
            correct += int(np.sum(logits.data.argmax(axis=1) == labels[idx]))
        vc = vi = float("nan")
        if val:
            vc, vi, _ = evaluate(model, val, target, val_views)
        logs.append(EpochLog(epoch, lr_at(epoch, sched), loss_sum / n, correct / n, vc, vi))
        model.trained = True
        if on_epoch is not None:
            on_epoch(epoch, opt, logs)
    return model, logs
