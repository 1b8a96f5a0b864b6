"""The assembled classifier plus its checkpoint codec.

Checkpoints are flat key to tensor archives. Layout::

    VSCKPT 1 <count>
    meta <json object>
    <key> <ndim> <d1> ... <dn>
    <little-endian float64 bytes>
    ...
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from . import numerics as nx
from .encoder import Encoder, EncoderConfig
from .errors import CheckpointError, ConfigError
from .head import Decoder, HeadConfig, argmax_lowest, probabilities, transition
from .initializer import Initializer, InitializerConfig
from .numerics import Parameter, Tensor

MAGIC = b"VSCKPT 1"


class ViewSetModel:
    def __init__(self, init_cfg: InitializerConfig, enc_cfg: EncoderConfig, head_cfg: HeadConfig,
                 rng: np.random.Generator):
        head_cfg.validate()
        if init_cfg.output_dim != enc_cfg.view_dim:
            raise ConfigError(f"initializer output {init_cfg.output_dim} != encoder width {enc_cfg.view_dim}")
        self.init_cfg, self.enc_cfg, self.head_cfg = init_cfg, enc_cfg, head_cfg
        self.initializer = Initializer(init_cfg, rng)
        self.encoder = Encoder(enc_cfg, rng)
        self.decoder = Decoder(head_cfg.decoder_layers(enc_cfg.view_dim), rng)
        self.trained = False

    def parameters(self) -> list[Parameter]:
        return self.initializer.parameters() + self.encoder.parameters() + self.decoder.parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def forward(self, views, training: bool = False, rng: np.random.Generator | None = None,
                record: list | None = None) -> Tensor:
        """Logits (B×K) for a batch of view sets shaped (B, M, ...)."""
        x = views if isinstance(views, Tensor) else Tensor(views)
        z0 = self.initializer(x, training)
        z = self.encoder(z0, training, rng, record)
        return self.decoder(transition(z, self.head_cfg.transition_kind))

    __call__ = forward

    def predict(self, views) -> tuple[np.ndarray, np.ndarray]:
        """Class distributions and predicted classes, in eval mode.

        ``views`` may be one view set (M, ...) or a batch (B, M, ...).
        """
        arr = np.asarray(views, dtype=np.float64)
        single = arr.ndim == (2 if self.init_cfg.kind == "precomputed" else 4)
        if single:
            arr = arr[None]
        with nx.no_grad():
            p = probabilities(self.forward(arr, training=False))
        if single:
            p = p[0]
        return p, argmax_lowest(p)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters().items()}
        state.update(self.initializer.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.named_parameters()
        buffers = self.initializer.buffers()
        for key, value in state.items():
            if key in params:
                if params[key].shape != value.shape:
                    raise CheckpointError(f"{key}: shape {value.shape} != model {params[key].shape}", key)
                params[key].assign(value)
            elif key in buffers:
                if buffers[key].shape != value.shape:
                    raise CheckpointError(f"{key}: shape {value.shape} != model {buffers[key].shape}", key)
                self.initializer.set_buffer(key, value)
            elif strict and not key.startswith("opt."):
                raise CheckpointError(f"unexpected key {key}", key)
        if strict:
            missing = sorted(set(params) | set(buffers))
            missing = [k for k in missing if k not in state]
            if missing:
                raise CheckpointError(f"missing key {missing[0]}", missing[0])

    def config_dict(self) -> dict:
        return {
            "initializer": dataclasses.asdict(self.init_cfg),
            "encoder": dataclasses.asdict(self.enc_cfg),
            "head": dataclasses.asdict(self.head_cfg),
        }

    @classmethod
    def from_config_dict(cls, cfg: dict, rng: np.random.Generator | None = None) -> "ViewSetModel":
        init = dict(cfg["initializer"])
        init["image_shape"] = tuple(init["image_shape"])
        head = dict(cfg["head"])
        head["decoder_hidden"] = tuple(head["decoder_hidden"])
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(InitializerConfig(**init), EncoderConfig(**cfg["encoder"]), HeadConfig(**head), rng)


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    chunks = [MAGIC + f" {len(tensors)}\n".encode()]
    chunks.append(b"meta " + json.dumps(meta or {}, sort_keys=True).encode() + b"\n")
    for key in sorted(tensors):
        arr = np.asarray(tensors[key], dtype="<f8")
        dims = " ".join(str(d) for d in arr.shape)
        chunks.append(f"{key} {arr.ndim}{' ' + dims if dims else ''}\n".encode())
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint; malformed entries raise :class:`CheckpointError` naming the key."""
    raw = Path(path).read_bytes()
    pos = 0

    def line(key=None) -> str:
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CheckpointError(f"truncated checkpoint{' at ' + key if key else ''}", key)
        text = raw[pos:end].decode("utf-8", errors="replace")
        pos = end + 1
        return text

    head = line()
    if not head.startswith(MAGIC.decode()):
        raise CheckpointError("not a checkpoint file (bad magic)")
    try:
        count = int(head.split()[2])
    except (IndexError, ValueError):
        raise CheckpointError("bad checkpoint header") from None
    meta_line = line()
    if not meta_line.startswith("meta "):
        raise CheckpointError("missing meta line")
    try:
        meta = json.loads(meta_line[5:])
    except json.JSONDecodeError:
        raise CheckpointError("unreadable meta line") from None
    tensors: dict[str, np.ndarray] = {}
    prev = None
    for _ in range(count):
        parts = line(prev).split()
        key = parts[0] if parts else prev
        try:
            ndim = int(parts[1])
            shape = tuple(int(d) for d in parts[2:2 + ndim])
            if len(shape) != ndim or any(d < 0 for d in shape):
                raise ValueError
        except (IndexError, ValueError):
            raise CheckpointError(f"bad header for key {key}", key) from None
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(raw):
            raise CheckpointError(f"data for key {key} is truncated", key)
        arr = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite values in key {key}", key)
        pos += nbytes
        tensors[key] = arr
        prev = key
    if pos != len(raw):
        raise CheckpointError(f"trailing bytes after key {prev}", prev)
    return tensors, meta


def save_model(path: str | Path, model: ViewSetModel, extra: dict[str, np.ndarray] | None = None,
               meta: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    tensors.update(extra or {})
    save_checkpoint(path, tensors, {"config": model.config_dict(), "trained": model.trained, **(meta or {})})


def load_model(path: str | Path) -> tuple[ViewSetModel, dict[str, np.ndarray], dict]:
    """Rebuild a model from a checkpoint; returns (model, non-model tensors, meta)."""
    tensors, meta = load_checkpoint(path)
    if "config" not in meta:
        raise CheckpointError("checkpoint has no model config")
    try:
        model = ViewSetModel.from_config_dict(meta["config"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"bad model config: {exc}") from None
    model.load_state_dict(tensors)
    model.trained = bool(meta.get("trained", False))
    extra = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    return model, extra, meta
