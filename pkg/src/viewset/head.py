"""Transition (view set to descriptor), decoder and the training loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError
from .initializer import xavier
from .numerics import DimensionError, Parameter, Tensor

TRANSITIONS = ("max", "mean", "concat_max_mean")


@dataclass
class HeadConfig:
    num_classes: int = 40
    transition_kind: str = "concat_max_mean"
    # hidden widths between the descriptor and the K logits
    decoder_hidden: tuple[int, ...] = (512,)
    label_smoothing: float = 0.1

    def descriptor_dim(self, view_dim: int) -> int:
        return 2 * view_dim if self.transition_kind == "concat_max_mean" else view_dim

    def decoder_layers(self, view_dim: int) -> list[int]:
        return [self.descriptor_dim(view_dim), *self.decoder_hidden, self.num_classes]

    def validate(self) -> None:
        if self.transition_kind not in TRANSITIONS:
            raise ConfigError(f"transition must be one of {TRANSITIONS}, got {self.transition_kind!r}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.label_smoothing > 0 and self.num_classes < 2:
            raise ConfigError("label smoothing needs at least two classes")
        if any(w < 1 for w in self.decoder_hidden):
            raise ConfigError("decoder widths must be positive")


def transition(z: Tensor, kind: str = "concat_max_mean") -> Tensor:
    """Pool the view axis (second to last) of ``z`` into one descriptor."""
    if z.shape[-2] == 0:
        raise InputError("cannot pool an empty view set")
    if kind == "max":
        return nx.max_over(z, -2)
    if kind == "mean":
        return nx.mean_over(z, -2)
    if kind == "concat_max_mean":
        return nx.concat([nx.max_over(z, -2), nx.mean_over(z, -2)], axis=-1)
    raise ConfigError(f"unknown transition {kind!r}")


class Decoder:
    """MLP from descriptor to logits: affine maps with ReLU in between."""

    def __init__(self, widths: list[int], rng: np.random.Generator):
        self.widths = list(widths)
        self.layers = [
            (Parameter(xavier(rng, a, b), f"dec{i}.w"), Parameter(np.zeros(b), f"dec{i}.b"))
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    def parameters(self) -> list[Parameter]:
        return [p for pair in self.layers for p in pair]

    def __call__(self, d: Tensor) -> Tensor:
        return decode(d, self.layers)


def decode(d: Tensor, layers: list[tuple[Parameter, Parameter]]) -> Tensor:
    if d.shape[-1] != layers[0][0].shape[0]:
        raise DimensionError(f"descriptor width {d.shape[-1]} != decoder input {layers[0][0].shape[0]}")
    x = d
    for i, (w, b) in enumerate(layers):
        x = x @ w + b if x.ndim > 1 else nx.reshape(nx.reshape(x, (1, -1)) @ w + b, (-1,))
        if i < len(layers) - 1:
            x = nx.relu(x)
    return x


def smoothed_target(labels: np.ndarray, k: int, eps: float) -> np.ndarray:
    """One row per label: 1-eps on the label, eps/(k-1) elsewhere."""
    labels = np.asarray(labels)
    off = eps / (k - 1) if k > 1 else 0.0
    t = np.full((labels.size, k), off)
    t[np.arange(labels.size), labels.reshape(-1)] = 1.0 - eps
    return t


def smoothed_cross_entropy(logits: Tensor, labels, eps: float = 0.1) -> Tensor:
    """Label-smoothed cross-entropy, averaged over the batch.

    ``logits`` is K or B×K; ``labels`` a class index or B indices.
    """
    if logits.ndim == 1:
        logits = nx.reshape(logits, (1, -1))
    k = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape[0] != logits.shape[0]:
        raise InputError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= k:
        raise InputError(f"labels must be class indices in [0, {k}), got {labels.tolist()}")
    target = Tensor(smoothed_target(labels, k, eps))
    per_row = nx.total(nx.mul(nx.log_softmax_rows(logits), target))
    return per_row * (-1.0 / logits.shape[0])


def probabilities(logits: Tensor) -> np.ndarray:
    with nx.no_grad():
        return nx.softmax_rows(logits).data


def argmax_lowest(p: np.ndarray) -> np.ndarray:
    """Argmax along the last axis; ties go to the lowest index."""
    return np.argmax(p, axis=-1)
