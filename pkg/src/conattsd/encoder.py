"""Per-modality sequential context encoder.

A dual GRU recurrence keeps one global state per utterance and one state per
speaker; a Transformer stack then refines the global-state sequence into the
context vectors used downstream.  Tensors carry optional leading batch axes:
utterance sequences are ``(..., n, hidden)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .layers import GRUCellParams, TransformerBlockParams, gru_cell_step, transformer_block


@dataclass
class EncoderState:
    """Recurrence variables after processing a whole sequence.

    ``speaker_history[i]`` holds every speaker's state right after step ``i``
    with shape ``(..., n_speakers, hidden)``.
    """

    global_states: list[Tensor] = field(default_factory=list)
    contexts: list[Tensor] = field(default_factory=list)
    speaker_history: list[Tensor] = field(default_factory=list)

    @property
    def speaker_states(self) -> Tensor:
        return self.speaker_history[-1]

    def global_sequence(self) -> Tensor:
        return ad.stack(self.global_states, axis=-2)


@dataclass
class ContextVectorSequence:
    h: Tensor  # (..., n, hidden), padded rows are zero
    mask: np.ndarray  # (..., n) bool, True for real utterances


def compute_context(global_history: Tensor | None, u_proj: Tensor, return_weights: bool = False):
    """Dot-product attention of the projected utterance over earlier global states.

    ``global_history`` is ``(..., k, hidden)`` or ``None`` when no utterance
    has been processed; the context is then a zero vector.
    """
    if global_history is None:
        zero = Tensor(np.zeros(u_proj.shape), dtype=u_proj.dtype)
        return (zero, None) if return_weights else zero
    if global_history.shape[-1] != u_proj.shape[-1]:
        raise ShapeError(f"context: history {global_history.shape} vs utterance {u_proj.shape}")
    scores = ad.matmul(global_history, ad.reshape(u_proj, u_proj.shape + (1,)))  # (..., k, 1)
    weights = ad.softmax(scores, axis=-2)
    c = ad.matmul(ad.swapaxes(weights, -1, -2), global_history)  # (..., 1, hidden)
    c = ad.reshape(c, u_proj.shape)
    if return_weights:
        return c, ad.reshape(weights, weights.shape[:-1])
    return c


def speaker_onehot(speakers: np.ndarray, n_speakers: int | None = None) -> np.ndarray:
    """``(..., n)`` integer speaker slots (-1 = padding) to ``(..., n, S)`` one-hot."""
    speakers = np.asarray(speakers, dtype=np.int64)
    if n_speakers is None:
        n_speakers = int(speakers.max()) + 1 if speakers.size else 1
    n_speakers = max(n_speakers, 1)
    return (speakers[..., None] == np.arange(n_speakers)).astype(np.float64)


def gru_recurrence(u: Tensor, speakers: np.ndarray, gru_global: GRUCellParams,
                   gru_speaker: GRUCellParams) -> EncoderState:
    """Run the global/speaker recurrence over ``u`` of shape ``(..., n, hidden)``.

    ``speakers`` gives each utterance's speaker slot (``-1`` for padding, which
    leaves every speaker state untouched).  Global and speaker states start at
    zero.
    """
    if u.ndim < 2:
        raise ShapeError(f"recurrence input must be (..., n, hidden), got {u.shape}")
    n, hidden = u.shape[-2], u.shape[-1]
    speakers = np.asarray(speakers)
    if speakers.shape != u.shape[:-1]:
        raise ShapeError(f"speaker ids {speakers.shape} do not match utterances {u.shape[:-1]}")
    if (speakers >= 0).sum() == 0:
        raise ContractError("cannot encode an empty conversation")
    onehot = speaker_onehot(speakers)
    lead = u.shape[:-2]
    g = Tensor(np.zeros(lead + (hidden,)), dtype=u.dtype)
    q = Tensor(np.zeros(lead + (onehot.shape[-1], hidden)), dtype=u.dtype)
    state = EncoderState()
    for i in range(n):
        u_i = ad.getitem(u, (Ellipsis, i, slice(None)))
        history = state.global_sequence() if state.global_states else None
        c_i = compute_context(history, u_i)
        select = Tensor(onehot[..., i, :, None], dtype=u.dtype)  # (..., S, 1)
        q_prev = ad.sum(q * select, axis=-2)
        g = gru_cell_step(gru_global, ad.concat([u_i, q_prev], axis=-1), g)
        q_new = gru_cell_step(gru_speaker, ad.concat([u_i, c_i], axis=-1), q_prev)
        q = q * Tensor(1.0 - select.data, dtype=u.dtype) + select * ad.reshape(q_new, q_new.shape[:-1] + (1, hidden))
        state.global_states.append(g)
        state.contexts.append(c_i)
        state.speaker_history.append(q)
    return state


def positional_encoding(n: int, dim: int, dtype=np.float64) -> np.ndarray:
    """Sinusoidal encodings, ``(n, dim)``: sin on even columns, cos on odd ones."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -(np.arange(0, dim, 2, dtype=np.float64) / dim))
    pe = np.zeros((n, dim))
    pe[:, 0::2] = np.sin(pos * rates)
    pe[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return pe.astype(dtype)


def transformer_refine(g_seq: Tensor, mask: np.ndarray | None, blocks: Sequence[TransformerBlockParams],
                       positional: bool = True) -> ContextVectorSequence:
    """Add positional encodings and apply the Transformer stack; padded rows are zeroed."""
    n, dim = g_seq.shape[-2], g_seq.shape[-1]
    mask = np.ones(g_seq.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != g_seq.shape[:-1]:
        raise ShapeError(f"mask {mask.shape} does not match sequence {g_seq.shape[:-1]}")
    x = g_seq + Tensor(positional_encoding(n, dim), dtype=g_seq.dtype) if positional else g_seq
    for block in blocks:
        x = transformer_block(block, x, mask)
    return ContextVectorSequence(apply_row_mask(x, mask), mask)


def apply_row_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    if mask.all():
        return x
    return x * Tensor(mask[..., None].astype(np.float64), dtype=x.dtype)
