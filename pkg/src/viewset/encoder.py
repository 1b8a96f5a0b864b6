"""View-set encoder: stacked pre-LN multi-head self-attention blocks.

No positional encoding and no class token by default, so the encoder is
permutation-equivariant over views. Both can be switched on for ablations.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .initializer import xavier
from .numerics import Parameter, Tensor

BLOCK_KEYS = ("wq", "wk", "wv", "wo", "ln1.g", "ln1.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2", "ln2.g", "ln2.b")


@dataclass
class EncoderConfig:
    num_blocks: int = 4
    num_heads: int = 8
    view_dim: int = 512
    mlp_ratio: int = 2
    dropout_rate: float = 0.1
    use_position_encoding: bool = False
    use_class_token: bool = False
    # None means sqrt(view_dim / num_heads)
    temperature: float | None = None
    max_views: int = 20
    ln_eps: float = 1e-5

    @property
    def tau(self) -> float:
        return self.temperature if self.temperature is not None else math.sqrt(self.view_dim / self.num_heads)

    def validate(self) -> None:
        if self.num_blocks < 0:
            raise ConfigError("num_blocks must be >= 0")
        if self.num_heads < 1 or self.view_dim % self.num_heads:
            raise ConfigError(f"view_dim {self.view_dim} not divisible by num_heads {self.num_heads}")
        if self.tau <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.mlp_ratio < 1 or self.max_views < 1:
            raise ConfigError("mlp_ratio and max_views must be positive")


class AttentionBlockParams:
    """Weights of one attention block, named by their checkpoint keys."""

    def __init__(self, index: int, dim: int, mlp_ratio: int, rng: np.random.Generator):
        hidden = mlp_ratio * dim
        p = f"block{index}."
        self.wq = Parameter(xavier(rng, dim, dim), p + "wq")
        self.wk = Parameter(xavier(rng, dim, dim), p + "wk")
        self.wv = Parameter(xavier(rng, dim, dim), p + "wv")
        self.wo = Parameter(xavier(rng, dim, dim), p + "wo")
        self.ln1_g = Parameter(np.ones(dim), p + "ln1.g")
        self.ln1_b = Parameter(np.zeros(dim), p + "ln1.b")
        self.w1 = Parameter(xavier(rng, dim, hidden), p + "mlp.w1")
        self.b1 = Parameter(np.zeros(hidden), p + "mlp.b1")
        self.w2 = Parameter(xavier(rng, hidden, dim), p + "mlp.w2")
        self.b2 = Parameter(np.zeros(dim), p + "mlp.b2")
        self.ln2_g = Parameter(np.ones(dim), p + "ln2.g")
        self.ln2_b = Parameter(np.zeros(dim), p + "ln2.b")

    def parameters(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo, self.ln1_g, self.ln1_b,
                self.w1, self.b1, self.w2, self.b2, self.ln2_g, self.ln2_b]


def correlation_matrix(z: Tensor, wq, wk, tau: float) -> Tensor:
    """Row-stochastic M×M matrix of attention between every ordered view pair."""
    q = z @ wq if wq is not None else z
    k = z @ wk if wk is not None else z
    return nx.softmax_rows(nx.matmul_t(q, k) / tau)


def apply_correlations(a: Tensor, z: Tensor, wv) -> Tensor:
    """Inject correlations into the views: ``A · Z · W_V``."""
    v = z @ wv if wv is not None else z
    return nx.mix_rows(a, v)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, m, d = x.shape
    x = nx.reshape(x, (*lead, m, h, d // h))
    n = x.ndim
    return nx.transpose(x, (*range(n - 3), n - 2, n - 3, n - 1))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, m, dh = x.shape
    n = x.ndim
    x = nx.transpose(x, (*range(n - 3), n - 2, n - 3, n - 1))
    return nx.reshape(x, (*lead, m, h * dh))


def msa_forward(z: Tensor, params: AttentionBlockParams, cfg: EncoderConfig, record: list | None = None) -> Tensor:
    """Multi-head self-attention over the rows of ``z`` (…×M×D)."""
    h = cfg.num_heads
    q = _split_heads(z @ params.wq, h)
    k = _split_heads(z @ params.wk, h)
    v = _split_heads(z @ params.wv, h)
    a = nx.softmax_rows(nx.matmul_t(q, k) / cfg.tau)
    if record is not None:
        record.append(a.data)
    return _merge_heads(nx.mix_rows(a, v)) @ params.wo


def attention_block_forward(z: Tensor, params: AttentionBlockParams, cfg: EncoderConfig, training: bool = False,
                            rng: np.random.Generator | None = None, record: list | None = None) -> Tensor:
    p = cfg.dropout_rate
    y = nx.layer_norm(z, params.ln1_g, params.ln1_b, cfg.ln_eps)
    z_hat = nx.dropout(msa_forward(y, params, cfg, record), p, rng, training) + z
    y = nx.layer_norm(z_hat, params.ln2_g, params.ln2_b, cfg.ln_eps)
    y = nx.relu(y @ params.w1 + params.b1) @ params.w2 + params.b2
    return nx.dropout(y, p, rng, training) + z_hat


def encoder_forward(z0: Tensor, blocks: list[AttentionBlockParams], cfg: EncoderConfig, training: bool = False,
                    rng: np.random.Generator | None = None, record: list | None = None,
                    pos_embed: Parameter | None = None, cls_token: Parameter | None = None) -> Tensor:
    z = z0
    m = z.shape[-2]
    if cfg.use_position_encoding:
        if pos_embed is None:
            raise ConfigError("position encoding enabled but no embedding given")
        if m > pos_embed.shape[0]:
            raise ConfigError(f"{m} views exceed max_views={pos_embed.shape[0]}")
        z = z + nx.take_rows(pos_embed, 0, m, axis=0)
    if cfg.use_class_token:
        if cls_token is None:
            raise ConfigError("class token enabled but no token given")
        lead = z.shape[:-2]
        tok = nx.reshape(cls_token, (1,) * len(lead) + (1, z.shape[-1]))
        tok = tok + Tensor(np.zeros((*lead, 1, z.shape[-1])))
        z = nx.concat([tok, z], axis=-2)
    for blk in blocks:
        z = attention_block_forward(z, blk, cfg, training, rng, record)
    if cfg.use_class_token:
        z = nx.take_rows(z, 1, m + 1, axis=-2)
    return z


class Encoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.blocks = [AttentionBlockParams(i, cfg.view_dim, cfg.mlp_ratio, rng) for i in range(cfg.num_blocks)]
        self.pos_embed = None
        self.cls_token = None
        if cfg.use_position_encoding:
            self.pos_embed = Parameter(rng.normal(0.0, 0.02, (cfg.max_views, cfg.view_dim)), "enc.pos")
        if cfg.use_class_token:
            self.cls_token = Parameter(rng.normal(0.0, 0.02, cfg.view_dim), "enc.cls")

    def parameters(self) -> list[Parameter]:
        out = [p for b in self.blocks for p in b.parameters()]
        return out + [p for p in (self.pos_embed, self.cls_token) if p is not None]

    def __call__(self, z0: Tensor, training: bool = False, rng=None, record: list | None = None) -> Tensor:
        return encoder_forward(z0, self.blocks, self.cfg, training, rng, record, self.pos_embed, self.cls_token)
