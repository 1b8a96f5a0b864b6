"""Synthetic multi-view datasets, view subsampling and stratified splits."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import ConfigError, InputError
from .initializer import ShapeRecord, load_features, save_features


@dataclass
class SyntheticConfig:
    num_classes: int = 8
    subclasses: int = 2
    shapes_per_class: int = 40
    views: int = 20
    feature_dim: int = 32
    # (C, H, W) renders instead of feature rows when set
    image_shape: tuple[int, int, int] | None = None
    margin: float = 5.0
    noise: float = 1.0
    subclass_separation: float = 2.5
    shape_jitter: float = 0.5
    viewpoint_spread: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1 or self.subclasses < 1 or self.shapes_per_class < 1:
            raise ConfigError("class, subclass and shape counts must be positive")
        if self.views < 1:
            raise ConfigError("views per shape must be >= 1")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if min(self.noise, self.subclass_separation, self.shape_jitter, self.viewpoint_spread) < 0:
            raise ConfigError("noise, separation, jitter and spread must be >= 0")


@dataclass
class Dataset:
    dim: int
    shapes: list[ShapeRecord]
    # class prototypes; kept for oracles, not persisted
    prototypes: np.ndarray | None = field(default=None, repr=False)

    def by_id(self) -> dict[str, ShapeRecord]:
        return {s.shape_id: s for s in self.shapes}

    def save(self, path: str | Path) -> None:
        flat = [ShapeRecord(s.shape_id, s.label, s.sublabel, s.views.reshape(len(s.views), -1)) for s in self.shapes]
        save_features(path, flat, self.dim)

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        dim, shapes = load_features(path)
        return cls(dim, shapes)


def _spread_points(rng: np.random.Generator, count: int, dim: int, distance: float) -> np.ndarray:
    """``count`` points whose pairwise distances all equal ``distance`` when count <= dim."""
    if count <= dim:
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        return q[:count] * (distance / math.sqrt(2.0))
    return rng.normal(0.0, distance / math.sqrt(2.0 * dim), size=(count, dim))


def viewpoint_maps(rng: np.random.Generator, count: int, dim: int, spread: float) -> np.ndarray:
    """Random rotations ``exp(spread * S)`` with S skew-symmetric; identity at spread 0."""
    out = np.empty((count, dim, dim))
    for i in range(count):
        if spread == 0:
            out[i] = np.eye(dim)
            continue
        g = rng.normal(size=(dim, dim)) / math.sqrt(dim)
        out[i] = expm(spread * (g - g.T) / math.sqrt(2.0))
    return out


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw a labelled multi-view dataset.

    Each class has a prototype, each subclass an offset from it, each shape a
    further jitter. The M views of a shape apply M fixed rotations ("cameras")
    to the shape vector and add independent Gaussian noise of standard
    deviation ``noise`` per coordinate. Views are stored in a random order.
    Sublabels are global: ``label * subclasses + s``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    f = cfg.feature_dim
    protos = _spread_points(rng, cfg.num_classes, f, cfg.margin)
    subs = np.stack([_spread_points(rng, cfg.subclasses, f, cfg.subclass_separation)
                     for _ in range(cfg.num_classes)])
    subs -= subs.mean(axis=1, keepdims=True)
    cameras = viewpoint_maps(rng, cfg.views, f, cfg.viewpoint_spread)
    render = None
    if cfg.image_shape is not None:
        render = rng.normal(0.0, 1.0 / math.sqrt(f), size=(int(np.prod(cfg.image_shape)), f))
    shapes = []
    width = 4 if cfg.num_classes * cfg.shapes_per_class < 10_000 else 6
    for k in range(cfg.num_classes):
        for j in range(cfg.shapes_per_class):
            s = j % cfg.subclasses
            x = protos[k] + subs[k, s] + rng.normal(0.0, cfg.shape_jitter / math.sqrt(f), size=f)
            views = np.einsum("vij,j->vi", cameras, x) + rng.normal(0.0, cfg.noise, size=(cfg.views, f))
            views = views[rng.permutation(cfg.views)]
            if render is not None:
                views = 1.0 / (1.0 + np.exp(-(views @ render.T)))
                views = views.reshape(cfg.views, *cfg.image_shape)
            sid = f"s{k * cfg.shapes_per_class + j:0{width}d}"
            shapes.append(ShapeRecord(sid, k, k * cfg.subclasses + s, views))
    dim = f if render is None else int(np.prod(cfg.image_shape))
    return Dataset(dim, shapes, protos)


def subset_views(shape: ShapeRecord | np.ndarray, m: int, seed: int) -> np.ndarray:
    """``m`` of the shape's views drawn uniformly without replacement."""
    views = shape.views if isinstance(shape, ShapeRecord) else np.asarray(shape)
    if not 1 <= m <= len(views):
        raise InputError(f"cannot pick {m} views from {len(views)}")
    idx = np.random.default_rng(seed).choice(len(views), size=m, replace=False)
    return views[idx]


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    labels: dict[str, int]
    sublabels: dict[str, int]

    def parts(self) -> dict[str, list[str]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def select(self, dataset: Dataset, part: str) -> list[ShapeRecord]:
        lookup = dataset.by_id()
        try:
            return [lookup[i] for i in self.parts()[part]]
        except KeyError as exc:
            raise InputError(f"split refers to unknown shape or part {exc}") from None

    def save(self, path: str | Path) -> None:
        text = "".join(f"{name}: {' '.join(ids)}\n" for name, ids in self.parts().items())
        Path(path).write_text(text)

    @classmethod
    def load(cls, path: str | Path, dataset: Dataset) -> "DatasetSplit":
        parts = {"train": [], "val": [], "test": []}
        for n, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            name, _, rest = line.partition(":")
            if name.strip() not in parts:
                raise InputError(f"split file line {n}: unknown part {name!r}")
            parts[name.strip()] = rest.split()
        lookup = dataset.by_id()
        return cls(parts["train"], parts["val"], parts["test"],
                   {i: s.label for i, s in lookup.items()}, {i: s.sublabel for i, s in lookup.items()})


def split(dataset: Dataset, ratios: Sequence[float] = (0.6, 0.2, 0.2), seed: int = 0) -> DatasetSplit:
    """Stratified train/val/test split; val and test counts are floored per class."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InputError(f"ratios must be three nonnegative numbers summing to 1, got {tuple(ratios)}")
    if ratios[0] <= 0:
        raise InputError("the train ratio must be positive")
    rng = np.random.default_rng(seed)
    by_class: dict[int, list[str]] = {}
    for s in dataset.shapes:
        by_class.setdefault(s.label, []).append(s.shape_id)
    train, val, test = [], [], []
    for label in sorted(by_class):
        ids = sorted(by_class[label])
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n = len(ids)
        n_val = math.floor(n * ratios[1] + 1e-9)
        n_test = math.floor(n * ratios[2] + 1e-9)
        n_train = n - n_val - n_test
        if n_train < 1 or (ratios[1] > 0 and n_val < 1) or (ratios[2] > 0 and n_test < 1):
            raise InputError(f"class {label} has {n} shapes, too few to stratify at ratios {tuple(ratios)}")
        train += ids[:n_train]
        val += ids[n_train:n_train + n_val]
        test += ids[n_train + n_val:]
    lookup = dataset.by_id()
    return DatasetSplit(sorted(train), sorted(val), sorted(test),
                        {i: s.label for i, s in lookup.items()}, {i: s.sublabel for i, s in lookup.items()})
