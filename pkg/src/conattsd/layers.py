"""Parameterized layers: linear, GRU cell, layer norm, dropout, attention, Transformer block.

All layers are plain functions of a parameter record and an input tensor.
Inputs may carry arbitrary leading (batch) axes.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _unbroadcast, from_op
from .errors import ConfigError, ShapeError

MASK_LOGIT = -1e9
LAYER_NORM_EPS = 1e-5
MLP_EXPANSION = 4


# ----------------------------------------------------------------- records
@dataclass(frozen=True)
class LinearParams:
    weight: Tensor  # out x in
    bias: Tensor | None = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"linear weight must be 2-d, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"linear bias {self.bias.shape} does not match weight {self.weight.shape}")


@dataclass(frozen=True)
class GRUCellParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @property
    def hidden(self) -> int:
        return self.U_z.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    def __post_init__(self):
        hidden, inp = self.W_z.shape
        for name in ("W_z", "W_r", "W_h"):
            if getattr(self, name).shape != (hidden, inp):
                raise ShapeError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(hidden, inp)}")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (hidden, hidden):
                raise ShapeError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(hidden, hidden)}")
        for name in ("b_z", "b_r", "b_h"):
            if getattr(self, name).shape != (hidden,):
                raise ShapeError(f"GRU {name} has shape {getattr(self, name).shape}, expected {(hidden,)}")


@dataclass(frozen=True)
class AttentionParams:
    """Query/key/value/output projections; head k owns rows k*d_k:(k+1)*d_k."""

    query: LinearParams
    key: LinearParams  # no bias: a key bias only shifts each query's logits uniformly
    value: LinearParams
    output: LinearParams
    heads: int = 1

    def __post_init__(self):
        d = self.query.out_dim
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"model dim {d} is not divisible by {self.heads} heads")


@dataclass(frozen=True)
class TransformerBlockParams:
    attention: AttentionParams
    mlp_in: LinearParams
    mlp_out: LinearParams
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor


@dataclass(frozen=True)
class DropoutConfig:
    rate: float = 0.5
    mode: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.mode not in ("train", "eval"):
            raise ConfigError(f"dropout mode must be 'train' or 'eval', got {self.mode!r}")


def named_tensors(record, prefix: str) -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted name, tensor)`` for every tensor inside a parameter record."""
    for f in dataclasses.fields(record):
        value = getattr(record, f.name)
        name = f"{prefix}.{f.name}"
        if isinstance(value, Tensor):
            yield name, value
        elif dataclasses.is_dataclass(value):
            yield from named_tensors(value, name)


def linear_from(table: Mapping[str, Tensor], prefix: str) -> LinearParams:
    return LinearParams(table[f"{prefix}.weight"], table.get(f"{prefix}.bias"))


def gru_from(table: Mapping[str, Tensor], prefix: str) -> GRUCellParams:
    names = [f.name for f in dataclasses.fields(GRUCellParams)]
    return GRUCellParams(**{n: table[f"{prefix}.{n}"] for n in names})


def block_from(table: Mapping[str, Tensor], prefix: str, heads: int) -> TransformerBlockParams:
    a = f"{prefix}.attention"
    attention = AttentionParams(
        query=linear_from(table, f"{a}.query"),
        key=linear_from(table, f"{a}.key"),
        value=linear_from(table, f"{a}.value"),
        output=linear_from(table, f"{a}.output"),
        heads=heads,
    )
    return TransformerBlockParams(
        attention=attention,
        mlp_in=linear_from(table, f"{prefix}.mlp_in"),
        mlp_out=linear_from(table, f"{prefix}.mlp_out"),
        **{n: table[f"{prefix}.{n}"] for n in ("norm1_gain", "norm1_bias", "norm2_gain", "norm2_bias")},
    )


# ------------------------------------------------------------ initializers
def glorot(rng: np.random.Generator, out_dim: int, in_dim: int, dtype) -> Tensor:
    bound = math.sqrt(6.0 / (in_dim + out_dim))
    return Tensor(rng.uniform(-bound, bound, size=(out_dim, in_dim)), dtype=dtype)


def init_linear(rng, in_dim: int, out_dim: int, dtype, bias: bool = True) -> LinearParams:
    w = glorot(rng, out_dim, in_dim, dtype)
    return LinearParams(w, Tensor(np.zeros(out_dim), dtype=dtype) if bias else None)


def init_gru(rng, input_dim: int, hidden: int, dtype) -> GRUCellParams:
    ws = {f"W_{g}": glorot(rng, hidden, input_dim, dtype) for g in "zrh"}
    us = {f"U_{g}": glorot(rng, hidden, hidden, dtype) for g in "zrh"}
    bs = {f"b_{g}": Tensor(np.zeros(hidden), dtype=dtype) for g in "zrh"}
    return GRUCellParams(**ws, **us, **bs)


def init_transformer_block(rng, dim: int, heads: int, dtype) -> TransformerBlockParams:
    if heads < 1 or dim % heads:
        raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
    attention = AttentionParams(
        query=init_linear(rng, dim, dim, dtype),
        key=init_linear(rng, dim, dim, dtype, bias=False),
        value=init_linear(rng, dim, dim, dtype),
        output=init_linear(rng, dim, dim, dtype),
        heads=heads,
    )
    def ones():
        return Tensor(np.ones(dim), dtype=dtype)

    def zeros():
        return Tensor(np.zeros(dim), dtype=dtype)

    return TransformerBlockParams(
        attention=attention,
        mlp_in=init_linear(rng, dim, MLP_EXPANSION * dim, dtype),
        mlp_out=init_linear(rng, MLP_EXPANSION * dim, dim, dtype),
        norm1_gain=ones(),
        norm1_bias=zeros(),
        norm2_gain=ones(),
        norm2_bias=zeros(),
    )


# ------------------------------------------------------------------ layers
def linear_forward(p: LinearParams, x: Tensor) -> Tensor:
    """``x @ W.T + b`` over the trailing axis."""
    w, b = p.weight, p.bias
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input trailing extent {x.shape[-1]} != weight in-dim {w.shape[1]} "
                         f"(input {x.shape}, weight {w.shape})")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        grads = [g @ w.data, g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return from_op(out, parents, backward)


def _gate(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))  # overflow-free logistic


def gru_cell_step(p: GRUCellParams, x: Tensor, h_prev: Tensor) -> Tensor:
    """One GRU update with the reset gate applied inside the candidate's recurrent term.

    A single fused primitive: the gates are recomputed from cached
    activations in the backward pass instead of as separate tape nodes.
    """
    if x.shape[-1] != p.input_dim or h_prev.shape[-1] != p.hidden:
        raise ShapeError(f"GRU step: input {x.shape} / state {h_prev.shape} do not match "
                         f"params (input {p.input_dim}, hidden {p.hidden})")
    lead = np.broadcast_shapes(x.shape[:-1], h_prev.shape[:-1])
    xd = np.broadcast_to(x.data, lead + x.shape[-1:])
    h = np.broadcast_to(h_prev.data, lead + h_prev.shape[-1:])
    z = _gate(xd @ p.W_z.data.T + p.b_z.data + h @ p.U_z.data.T)
    r = _gate(xd @ p.W_r.data.T + p.b_r.data + h @ p.U_r.data.T)
    rh = r * h
    c = np.tanh(xd @ p.W_h.data.T + p.b_h.data + rh @ p.U_h.data.T)
    out = h + z * (c - h)
    parents = (x, h_prev, p.W_z, p.W_r, p.W_h, p.U_z, p.U_r, p.U_h, p.b_z, p.b_r, p.b_h)

    def backward(g):
        d_az = g * (c - h) * z * (1.0 - z)
        d_ah = g * z * (1.0 - c * c)
        d_rh = d_ah @ p.U_h.data
        d_ar = d_rh * h * r * (1.0 - r)
        dx = d_az @ p.W_z.data + d_ar @ p.W_r.data + d_ah @ p.W_h.data
        dh = g * (1.0 - z) + d_rh * r + d_az @ p.U_z.data + d_ar @ p.U_r.data
        flat = lambda a: a.reshape(-1, a.shape[-1])
        x2, h2, rh2 = flat(xd), flat(h), flat(rh)
        az2, ar2, ah2 = flat(d_az), flat(d_ar), flat(d_ah)
        return (_unbroadcast(dx, x.shape), _unbroadcast(dh, h_prev.shape),
                az2.T @ x2, ar2.T @ x2, ah2.T @ x2,
                az2.T @ h2, ar2.T @ h2, ah2.T @ rh2,
                az2.sum(axis=0), ar2.sum(axis=0), ah2.sum(axis=0))

    return from_op(out, parents, backward)


def layer_norm(gain: Tensor, bias: Tensor, x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the trailing axis with the biased variance, then apply gain and bias."""
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm needs a trailing extent >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match trailing extent {d}")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return from_op(out, (x, gain, bias), backward)


def mask_bias(mask: np.ndarray | None, dtype) -> np.ndarray | None:
    """Additive logit bias: 0 where ``mask`` is true, ``MASK_LOGIT`` elsewhere."""
    if mask is None:
        return None
    return np.where(np.asarray(mask, dtype=bool), 0.0, MASK_LOGIT).astype(dtype)


def multi_head_self_attention(p: AttentionParams, x: Tensor, mask: np.ndarray | None = None,
                              return_weights: bool = False):
    """Scaled dot-product self-attention over the second-to-last axis.

    ``mask`` has the shape of ``x`` without its trailing axis; false entries
    are padding and receive a ``MASK_LOGIT`` logit as keys.
    """
    *lead, n, d = x.shape
    if d != p.query.in_dim:
        raise ShapeError(f"attention: input dim {d} != projection dim {p.query.in_dim}")
    heads = p.heads
    dk = d // heads
    lead = tuple(lead)
    split = lead + (n, heads, dk)
    order = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)

    def project(lp):
        return ad.transpose(ad.reshape(linear_forward(lp, x), split), order)

    q, k, v = project(p.query), project(p.key), project(p.value)
    logits = ad.scale(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
    bias = mask_bias(mask, x.dtype)
    if bias is not None:
        logits = logits + Tensor(bias[..., None, None, :])
    weights = ad.softmax(logits, axis=-1)
    mixed = ad.reshape(ad.transpose(ad.matmul(weights, v), order), lead + (n, d))
    out = linear_forward(p.output, mixed)
    return (out, weights) if return_weights else out


def transformer_block(p: TransformerBlockParams, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Post-norm block: attention sublayer then MLP sublayer, each residual + LayerNorm."""
    y1 = layer_norm(p.norm1_gain, p.norm1_bias, x + multi_head_self_attention(p.attention, x, mask))
    hidden = ad.relu(linear_forward(p.mlp_in, y1))
    return layer_norm(p.norm2_gain, p.norm2_bias, y1 + linear_forward(p.mlp_out, hidden))


def dropout_apply(cfg: DropoutConfig, x: Tensor, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout in train mode; identity in eval mode or at rate 0."""
    if cfg.mode == "eval" or cfg.rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= cfg.rate
    return x * Tensor(keep / (1.0 - cfg.rate), dtype=x.dtype)
