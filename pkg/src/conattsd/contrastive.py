"""Inter-modality contrastive attention.

For a directed pair ``X→Y`` the anchor modality X supplies the query and the
target modality Y supplies keys and values.  Conventional weights come from a
scaled dot-product softmax; opponent weights are ``softmax(1 - a_c)`` and put
their mass on the least relevant positions.  The contrastive vector is the
opponent-weighted sum of the target rows.

Queries are the anchor's per-utterance vectors; keys and values are the
target's whole utterance sequence.  No learned projections are involved.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .layers import mask_bias

MODALITIES = ("T", "A", "V")
_ARROW = re.compile(r"^\s*([TAV])\s*(?:→|->)\s*([TAV])\s*$")


@dataclass(frozen=True)
class DirectedBiModalVariant:
    anchor: str
    target: str

    def __post_init__(self):
        if self.anchor not in MODALITIES or self.target not in MODALITIES:
            raise ConfigError(f"unknown modality in variant {self.anchor}→{self.target}")
        if self.anchor == self.target:
            raise ConfigError(f"variant needs two distinct modalities, got {self.anchor}→{self.target}")

    @classmethod
    def parse(cls, text: str) -> "DirectedBiModalVariant":
        m = _ARROW.match(text)
        if not m:
            raise ConfigError(f"cannot parse directed variant {text!r} (expected e.g. 'T→A' or 'T->A')")
        return cls(m.group(1), m.group(2))

    def __str__(self) -> str:
        return f"{self.anchor}→{self.target}"


DEFAULT_VARIANTS = (DirectedBiModalVariant("T", "A"), DirectedBiModalVariant("T", "V"))


@dataclass
class AttentionOutput:
    conventional: Tensor  # a_c, (..., n_queries, n_keys)
    opponent: Tensor  # a_o, same shape
    contrastive: Tensor  # r, (..., n_queries, hidden)


def _key_bias(mask, n: int, dtype) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != n:
        raise ShapeError(f"key mask {mask.shape} does not match {n} keys")
    if not mask.any(axis=-1).all():
        raise ContractError("every key position is masked")
    return mask_bias(mask, dtype)


def contrastive_attention(queries: Tensor, keys: Tensor, values: Tensor, mask=None) -> AttentionOutput:
    """Batched contrastive attention.

    ``queries`` is ``(..., m, d)``, ``keys``/``values`` are ``(..., n, d)``;
    ``mask`` is ``(..., n)`` with false entries excluded before both softmaxes.
    """
    if keys.shape[:-1] != values.shape[:-1]:
        raise ShapeError(f"keys {keys.shape} and values {values.shape} disagree on positions")
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError(f"query dim {queries.shape[-1]} != key dim {keys.shape[-1]}")
    n = keys.shape[-2]
    bias = _key_bias(mask, n, queries.dtype)
    logits = ad.scale(ad.matmul(queries, ad.swapaxes(keys, -1, -2)), 1.0 / math.sqrt(keys.shape[-1]))
    if bias is not None:
        bias_t = Tensor(bias[..., None, :], dtype=queries.dtype)
        logits = logits + bias_t
    a_c = ad.softmax(logits, axis=-1)
    flipped = ad.one_minus(a_c)
    if bias is not None:
        flipped = flipped + bias_t
    a_o = ad.softmax(flipped, axis=-1)
    return AttentionOutput(a_c, a_o, ad.matmul(a_o, values))


def conventional_weights(q: Tensor, keys: Tensor, mask=None) -> Tensor:
    """``softmax(q·K_j / sqrt(d_k))`` over the ``n`` key rows, for a single query ``q``."""
    if keys.shape[-1] != q.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {keys.shape[-1]}")
    n = keys.shape[-2]
    bias = _key_bias(mask, n, q.dtype)
    logits = ad.scale(ad.reshape(ad.matmul(keys, ad.reshape(q, q.shape + (1,))), keys.shape[:-1]),
                      1.0 / math.sqrt(keys.shape[-1]))
    if bias is not None:
        logits = logits + Tensor(bias, dtype=q.dtype)
    return ad.softmax(logits, axis=-1)


def opponent_weights(a_c: Tensor, mask=None) -> Tensor:
    """``softmax(1 - a_c)`` with masked positions excluded again."""
    bias = _key_bias(mask, a_c.shape[-1], a_c.dtype)
    flipped = ad.one_minus(a_c)
    if bias is not None:
        flipped = flipped + Tensor(bias, dtype=a_c.dtype)
    return ad.softmax(flipped, axis=-1)


def contrastive_vector(a_o: Tensor, values: Tensor) -> Tensor:
    """Opponent-weighted sum of value rows: ``(..., n)`` x ``(..., n, d)`` -> ``(..., d)``."""
    if values.shape[:-1] != a_o.shape:
        raise ShapeError(f"weights {a_o.shape} do not match value rows {values.shape}")
    row = ad.reshape(a_o, a_o.shape[:-1] + (1, a_o.shape[-1]))
    out = ad.matmul(row, values)
    return ad.reshape(out, a_o.shape[:-1] + (values.shape[-1],))


def inter_modality_contrastive(variant: DirectedBiModalVariant, h_anchor, h_target, i: int) -> Tensor:
    """Contrastive vector for utterance ``i``: query = anchor row ``i``, keys = values = target rows.

    ``h_anchor``/``h_target`` are :class:`ContextVectorSequence` objects (or
    bare ``(n, d)`` tensors) for the modalities named by ``variant``.
    """
    anchor, mask_a = _unpack(h_anchor)
    target, mask_t = _unpack(h_target)
    if anchor.shape != target.shape:
        raise ShapeError(f"{variant}: anchor {anchor.shape} and target {target.shape} differ")
    if mask_a is not None and mask_t is not None and not np.array_equal(mask_a, mask_t):
        raise ContractError(f"{variant}: anchor and target masks differ")
    mask = mask_t if mask_t is not None else mask_a
    q = ad.getitem(anchor, (Ellipsis, i, slice(None)))
    a_c = conventional_weights(q, target, mask)
    a_o = opponent_weights(a_c, mask)
    return contrastive_vector(a_o, target)


def _unpack(seq):
    if isinstance(seq, Tensor):
        return seq, None
    return seq.h, seq.mask
