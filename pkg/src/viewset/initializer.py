"""Per-view feature extraction producing the initial view matrix.

Two families of initializer exist: shallow convolution stacks over raw view
images, and a learned affine projection over precomputed feature rows. Either
way each view is processed on its own, so no information crosses views before
the encoder.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, InputError
from .numerics import DimensionError, Parameter, Tensor

KINDS = ("shallow_conv_1", "shallow_conv_2", "precomputed")


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    if k > n + 2 * padding:
        raise DimensionError(f"kernel {k} larger than padded input {n + 2 * padding}")
    return (n + 2 * padding - k) // stride + 1


def _window(xp: np.ndarray, ki: int, kj: int, ho: int, wo: int, stride: int) -> np.ndarray:
    return xp[..., ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride]


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N×C×H×W or C×H×W) with ``kernels`` (O×C×k×k).

    Products are accumulated in (channel, row, column) kernel order, then the
    bias is added.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    o, ck, k, k2 = kernels.shape
    if ck != c or k != k2:
        raise DimensionError(f"kernel shape {kernels.shape} does not fit input channels {c}")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wd = kernels.data
    out = np.zeros((n, o, ho, wo))
    for ci in range(c):
        for ki in range(k):
            for kj in range(k):
                out += wd[None, :, ci, ki, kj, None, None] * _window(xp[:, ci:ci + 1], ki, kj, ho, wo, stride)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def back(g):
        g4 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(wd)
        for ki in range(k):
            for kj in range(k):
                win = _window(xp, ki, kj, ho, wo, stride)
                gw[:, :, ki, kj] = np.einsum("noij,ncij->oc", g4, win)
                gxp[..., ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += np.einsum(
                    "noij,oc->ncij", g4, wd[:, :, ki, kj]
                )
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        grads = [gx[0] if squeeze else gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return nx.custom_op(out[0] if squeeze else out, parents, back)


def max_pool(x: Tensor, k: int, stride: int, padding: int = 0) -> Tensor:
    """Windowed maximum; padded cells act as negative infinity."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    n, c, h, w = xd.shape
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    stack = np.stack([_window(xp, ki, kj, ho, wo, stride) for ki in range(k) for kj in range(k)], axis=-1)
    arg = stack.argmax(axis=-1)
    out = np.take_along_axis(stack, arg[..., None], axis=-1)[..., 0]

    def back(g):
        g4 = g[None] if squeeze else g
        gxp = np.zeros_like(xp)
        for off in range(k * k):
            ki, kj = divmod(off, k)
            gxp[..., ki:ki + stride * (ho - 1) + 1:stride, kj:kj + stride * (wo - 1) + 1:stride] += np.where(
                arg == off, g4, 0.0
            )
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return (gx[0] if squeeze else gx,)

    return nx.custom_op(out[0] if squeeze else out, (x,), back)


class BatchNorm2d:
    """Per-channel normalization with running statistics (momentum 0.1)."""

    def __init__(self, channels: int, prefix: str, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = Parameter(np.ones(channels), f"{prefix}.g")
        self.bias = Parameter(np.zeros(channels), f"{prefix}.b")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.prefix = prefix

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        xd = x.data
        g, b = self.gain.data[None, :, None, None], self.bias.data[None, :, None, None]
        if not training:
            inv = 1.0 / np.sqrt(self.running_var + self.eps)[None, :, None, None]
            mu = self.running_mean[None, :, None, None]
            xhat = (xd - mu) * inv
            out = xhat * g + b

            def back_eval(grad):
                return grad * g * inv, (grad * xhat).sum(axis=(0, 2, 3)), grad.sum(axis=(0, 2, 3))

            return nx.custom_op(out, (x, self.gain, self.bias), back_eval)

        axes = (0, 2, 3)
        count = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=axes, keepdims=True)
        var = ((xd - mu) ** 2).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (xd - mu) * inv
        out = xhat * g + b
        m = self.momentum
        unbiased = var.reshape(-1) * count / max(count - 1, 1)
        self.running_mean = (1 - m) * self.running_mean + m * mu.reshape(-1)
        self.running_var = (1 - m) * self.running_var + m * unbiased

        def back(grad):
            gh = grad * g
            gx = inv * (gh - gh.mean(axis=axes, keepdims=True) - xhat * (gh * xhat).mean(axis=axes, keepdims=True))
            return gx, (grad * xhat).sum(axis=axes), grad.sum(axis=axes)

        return nx.custom_op(out, (x, self.gain, self.bias), back)

    def parameters(self) -> list[Parameter]:
        return [self.gain, self.bias]

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"{self.prefix}.mean": self.running_mean, f"{self.prefix}.var": self.running_var}


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    half = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-half, half, size=shape if shape is not None else (fan_in, fan_out))


@dataclass
class InitializerConfig:
    kind: str = "precomputed"
    output_dim: int = 512
    # precomputed feature width; ignored by the conv paths
    input_dim: int = 512
    image_shape: tuple[int, int, int] = (3, 224, 224)

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"initializer kind must be one of {KINDS}, got {self.kind!r}")
        if self.output_dim < 1 or self.input_dim < 1:
            raise ConfigError("initializer widths must be positive")
        if len(self.image_shape) != 3 or min(self.image_shape) < 1:
            raise ConfigError(f"bad image shape {self.image_shape}")


def conv_stack_layout(cfg: InitializerConfig) -> list[tuple[str, int, int, int, int, int]]:
    """(name, in, out, k, stride, padding) for each conv layer of a shallow stack."""
    layers = [("conv1", cfg.image_shape[0], 64, 7, 2, 3)]
    if cfg.kind == "shallow_conv_2":
        layers.append(("conv2", 64, 32, 3, 2, 1))
    return layers


def flattened_width(cfg: InitializerConfig) -> int:
    """Width of the flattened activation map that feeds the projection."""
    if cfg.kind == "precomputed":
        return cfg.input_dim
    _, h, w = cfg.image_shape
    h, w = _out_size(h, 7, 2, 3), _out_size(w, 7, 2, 3)
    h, w = _out_size(h, 3, 2, 1), _out_size(w, 3, 2, 1)
    channels = 64
    if cfg.kind == "shallow_conv_2":
        h, w = _out_size(h, 3, 2, 1), _out_size(w, 3, 2, 1)
        channels = 32
    return channels * h * w


def parameter_count(cfg: InitializerConfig) -> int:
    """Learnable scalars in an initializer, computed without allocating it."""
    cfg.validate()
    layers = conv_stack_layout(cfg) if cfg.kind != "precomputed" else []
    # conv weight, conv bias, then the BN gain and shift
    n = sum(cout * cin * k * k + 3 * cout for _, cin, cout, k, _, _ in layers)
    return n + flattened_width(cfg) * cfg.output_dim + cfg.output_dim


class Initializer:
    def __init__(self, cfg: InitializerConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.convs: list[tuple[Parameter, Parameter, BatchNorm2d, int, int]] = []
        if cfg.kind != "precomputed":
            for name, cin, cout, k, s, p in conv_stack_layout(cfg):
                w = Parameter(xavier(rng, cin * k * k, cout * k * k, (cout, cin, k, k)), f"init.{name}.w")
                b = Parameter(np.zeros(cout), f"init.{name}.b")
                bn = BatchNorm2d(cout, f"init.bn{name[-1]}")
                self.convs.append((w, b, bn, s, p))
        flat = flattened_width(cfg)
        self.proj_w = Parameter(xavier(rng, flat, cfg.output_dim), "init.proj.w")
        self.proj_b = Parameter(np.zeros(cfg.output_dim), "init.proj.b")

    def parameters(self) -> list[Parameter]:
        out = []
        for w, b, bn, _, _ in self.convs:
            out += [w, b, *bn.parameters()]
        return out + [self.proj_w, self.proj_b]

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for _, _, bn, _, _ in self.convs:
            out.update(bn.buffers())
        return out

    def set_buffer(self, key: str, value: np.ndarray) -> None:
        for _, _, bn, _, _ in self.convs:
            if key == f"{bn.prefix}.mean":
                bn.running_mean = np.array(value, dtype=np.float64)
                return
            if key == f"{bn.prefix}.var":
                bn.running_var = np.array(value, dtype=np.float64)
                return
        raise KeyError(key)

    def __call__(self, views: Tensor, training: bool = False) -> Tensor:
        """Map views of shape (B, M, F) or (B, M, C, H, W) to (B, M, D)."""
        b, m = views.shape[:2]
        if self.cfg.kind == "precomputed":
            if views.ndim != 3 or views.shape[2] != self.cfg.input_dim:
                raise InputError(f"expected feature rows of width {self.cfg.input_dim}, got shape {views.shape}")
            return nx.matmul(views, self.proj_w) + self.proj_b
        if views.ndim != 5 or tuple(views.shape[2:]) != tuple(self.cfg.image_shape):
            raise InputError(f"expected views of shape {self.cfg.image_shape}, got {views.shape[2:]}")
        x = nx.reshape(views, (b * m, *views.shape[2:]))
        for idx, (w, bias, bn, s, p) in enumerate(self.convs):
            x = nx.relu(bn(conv2d(x, w, bias, stride=s, padding=p), training))
            if idx == 0:
                x = max_pool(x, 3, 2, 1)
        x = nx.reshape(x, (b, m, -1))
        return nx.matmul(x, self.proj_w) + self.proj_b


def initialize_view_set(views: Sequence[np.ndarray] | np.ndarray, initializer: Initializer) -> Tensor:
    """Initial representation (M×D) of one view set.

    ``views`` holds M feature rows or M C×H×W images; all must share a shape.
    """
    if len(views) == 0:
        raise InputError("a view set needs at least one view")
    shapes = {np.shape(v) for v in views}
    if len(shapes) != 1:
        raise InputError(f"views disagree in geometry: {sorted(shapes)}")
    arr = np.stack([np.asarray(v, dtype=np.float64) for v in views])
    with nx.no_grad():
        z = initializer(Tensor(arr[None]), training=False)
    return nx.reshape(z, z.shape[1:])


# ---------------------------------------------------------------- feature files

class FeatureFormatError(InputError):
    def __init__(self, message: str, line: int | None = None, shape_id: str | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)
        self.line = line
        self.shape_id = shape_id


@dataclass
class ShapeRecord:
    shape_id: str
    label: int
    sublabel: int
    views: np.ndarray = field(repr=False)


def save_features(path: str | Path, shapes: Sequence[ShapeRecord], dim: int) -> None:
    lines = [f"dim={dim} shapes={len(shapes)}"]
    for s in shapes:
        views = np.asarray(s.views, dtype=np.float64)
        if views.ndim != 2 or views.shape[1] != dim:
            raise InputError(f"shape {s.shape_id}: rows must have width {dim}")
        lines.append(f"shape {s.shape_id} label={s.label} sublabel={s.sublabel} views={len(views)}")
        lines.extend(" ".join(repr(v) for v in row) for row in views.tolist())
    Path(path).write_text("\n".join(lines) + "\n")


def _field(token: str, key: str, lineno: int, shape_id=None) -> int:
    if not token.startswith(key + "="):
        raise FeatureFormatError(f"expected {key}=<int>, got {token!r}", lineno, shape_id)
    try:
        return int(token[len(key) + 1:])
    except ValueError:
        raise FeatureFormatError(f"bad integer in {token!r}", lineno, shape_id) from None


def load_features(path: str | Path) -> tuple[int, list[ShapeRecord]]:
    """Parse a feature file; returns the declared width and the shapes in file order."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FeatureFormatError("empty file, missing header", 1)
    head = lines[0].split()
    if len(head) != 2:
        raise FeatureFormatError("header must be 'dim=<D> shapes=<N>'", 1)
    dim, count = _field(head[0], "dim", 1), _field(head[1], "shapes", 1)
    shapes: list[ShapeRecord] = []
    i = 1
    for _ in range(count):
        if i >= len(lines):
            raise FeatureFormatError(f"expected {count} shapes, found {len(shapes)}", i + 1)
        tok = lines[i].split()
        if len(tok) != 5 or tok[0] != "shape":
            raise FeatureFormatError(f"expected a shape line, got {lines[i]!r}", i + 1)
        sid = tok[1]
        label = _field(tok[2], "label", i + 1, sid)
        sublabel = _field(tok[3], "sublabel", i + 1, sid)
        nviews = _field(tok[4], "views", i + 1, sid)
        rows = []
        for r in range(nviews):
            lineno = i + 2 + r
            if lineno - 1 >= len(lines):
                raise FeatureFormatError(f"shape {sid}: file ends before view {r}", lineno, sid)
            parts = lines[lineno - 1].split()
            if len(parts) != dim:
                raise FeatureFormatError(f"shape {sid}: row has {len(parts)} values, declared dim={dim}", lineno, sid)
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise FeatureFormatError(f"shape {sid}: non-numeric value", lineno, sid) from None
        views = np.array(rows, dtype=np.float64).reshape(nviews, dim)
        if not np.all(np.isfinite(views)):
            raise FeatureFormatError(f"shape {sid}: non-finite value", i + 1, sid)
        shapes.append(ShapeRecord(sid, label, sublabel, views))
        i += 1 + nviews
    if any(line.strip() for line in lines[i:]):
        raise FeatureFormatError("trailing content after the declared shapes", i + 1)
    return dim, shapes
