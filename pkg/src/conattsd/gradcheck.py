"""Finite-difference verification of every differentiable component.

Each check builds a small random problem, compares tape gradients with
central differences in 64-bit, and reports the worst relative error.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_difference_check
from .contrastive import contrastive_attention
from .data import Conversation, Utterance
from .encoder import gru_recurrence, transformer_refine
from .layers import (
    LinearParams,
    gru_cell_step,
    init_gru,
    init_transformer_block,
    layer_norm,
    linear_forward,
    multi_head_self_attention,
    named_tensors,
    transformer_block,
    block_from,
    gru_from,
)
from .model import ModelConfig, collate, decode, encode_modality, fuse, init_parameters
from .training import cross_entropy_loss

EPS = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    component: str
    error: float
    seconds: float

    def passed(self, tolerance: float = TOLERANCE) -> bool:
        return self.error < tolerance


def tiny_config() -> ModelConfig:
    return ModelConfig(input_dims={"T": 6, "A": 4, "V": 5}, hidden=8, blocks=1, heads=2, dropout=0.5, seed=3)


def tiny_conversation(rng: np.random.Generator, dims=None, labels=(0, 1, 1), speakers=("A", "B", "A")) -> Conversation:
    dims = dims or {"T": 6, "A": 4, "V": 5}
    utts = [Utterance(rng.standard_normal(dims["T"]), rng.standard_normal(dims["A"]), rng.standard_normal(dims["V"]),
                      speaker=s, label=y, is_target=True) for s, y in zip(speakers, labels)]
    return Conversation("gradcheck", "synthetic", tuple(utts))


def _projection(rng) -> Callable[[Tensor], Tensor]:
    """Random linear read-out ``sum(w * y)`` so every output entry matters."""
    cache = {}

    def read(y: Tensor) -> Tensor:
        if y.shape not in cache:
            cache[y.shape] = Tensor(rng.standard_normal(y.shape))
        return ad.sum(y * cache[y.shape])

    return read


def _primitive_checks(rng) -> dict[str, tuple[Callable, dict]]:
    read = _projection(rng)
    checks = {
        "matmul": (lambda p: read(ad.matmul(p["a"], p["b"])), {"a": (3, 4), "b": (4, 2)}),
        "matmul(batched)": (lambda p: read(ad.matmul(p["a"], p["b"])), {"a": (2, 3, 4), "b": (4, 2)}),
        "add/sub/mul(broadcast)": (lambda p: read((p["a"] + p["b"]) * p["a"] - p["b"]), {"a": (3, 4), "b": (4,)}),
        "div": (lambda p: read(p["a"] / (ad.exp(p["b"]) + 1.0)), {"a": (3, 4), "b": (3, 1)}),
        "softmax": (lambda p: read(ad.softmax(p["x"], axis=-1)), {"x": (3, 5)}),
        "softmax(axis0)": (lambda p: read(ad.softmax(p["x"], axis=0)), {"x": (3, 5)}),
        "log_softmax": (lambda p: read(ad.log_softmax(p["x"], axis=-1)), {"x": (4, 2)}),
        "sigmoid": (lambda p: read(ad.sigmoid(p["x"])), {"x": (6,)}),
        "tanh": (lambda p: read(ad.tanh(p["x"])), {"x": (6,)}),
        "relu": (lambda p: read(ad.relu(p["x"])), {"x": (6,)}),
        "one_minus/scale": (lambda p: read(ad.scale(ad.one_minus(p["x"]), -2.5)), {"x": (6,)}),
        "exp/log/sqrt": (lambda p: read(ad.log(ad.sqrt(ad.exp(p["x"]) + 1.0))), {"x": (6,)}),
        "sum/mean": (lambda p: read(ad.sum(p["x"], axis=1)) + ad.mean(p["x"] * p["x"]), {"x": (3, 4)}),
        "transpose/reshape": (lambda p: read(ad.reshape(ad.transpose(p["x"], (2, 0, 1)), (4, 6))), {"x": (2, 3, 4)}),
        "concat/stack": (lambda p: read(ad.concat([p["a"], ad.stack([p["b"], p["b"]], axis=0)], axis=0)),
                         {"a": (1, 3), "b": (3,)}),
        "slice/index": (lambda p: read(ad.getitem(p["x"], (slice(1, 3), 2))) + read(ad.slice_(p["x"], 1, 0, 2)),
                        {"x": (4, 3)}),
    }
    return {name: (fn, {k: Tensor(rng.standard_normal(s)) for k, s in shapes.items()})
            for name, (fn, shapes) in checks.items()}


def _layer_checks(rng) -> dict[str, tuple[Callable, dict]]:
    read = _projection(rng)
    out: dict[str, tuple[Callable, dict]] = {}

    out["linear"] = (lambda p: read(linear_forward(LinearParams(p["w"], p["b"]), p["x"])),
                     {"w": Tensor(rng.standard_normal((3, 5))), "b": Tensor(rng.standard_normal(3)),
                      "x": Tensor(rng.standard_normal((2, 5)))})

    gru = dict(named_tensors(init_gru(rng, 4, 3, np.float64), "gru"))
    gru = {k: Tensor(v.data + 0.1 * rng.standard_normal(v.shape)) for k, v in gru.items()}
    gru["x"] = Tensor(rng.standard_normal(4))
    gru["h"] = Tensor(rng.standard_normal(3))
    out["gru_cell"] = (lambda p: read(gru_cell_step(gru_from(p, "gru"), p["x"], p["h"])), gru)

    out["layer_norm"] = (lambda p: read(layer_norm(p["g"], p["b"], p["x"])),
                         {"g": Tensor(rng.standard_normal(5)), "b": Tensor(rng.standard_normal(5)),
                          "x": Tensor(rng.standard_normal((3, 5)))})

    block = dict(named_tensors(init_transformer_block(rng, 8, 2, np.float64), "blk"))
    block = {k: Tensor(v.data + 0.1 * rng.standard_normal(v.shape)) for k, v in block.items()}
    block["x"] = Tensor(rng.standard_normal((2, 8)))

    def attention(p):
        b = block_from(p, "blk", 2)
        return read(multi_head_self_attention(b.attention, p["x"], np.array([True, True])))

    out["self_attention"] = (attention, block)
    out["transformer_block"] = (lambda p: read(transformer_block(block_from(p, "blk", 2), p["x"])), block)
    return out


def _encoder_checks(rng) -> dict[str, tuple[Callable, dict]]:
    read = _projection(rng)
    hidden = 8
    params = {}
    params.update(named_tensors(init_gru(rng, 2 * hidden, hidden, np.float64), "g"))
    params.update(named_tensors(init_gru(rng, 2 * hidden, hidden, np.float64), "q"))
    params.update(named_tensors(init_transformer_block(rng, hidden, 2, np.float64), "b0"))
    params = {k: Tensor(v.data + 0.1 * rng.standard_normal(v.shape)) for k, v in params.items()}
    params["u"] = Tensor(rng.standard_normal((3, hidden)))
    speakers = np.array([0, 1, 0])

    def pipeline(p):
        state = gru_recurrence(p["u"], speakers, gru_from(p, "g"), gru_from(p, "q"))
        ctx = transformer_refine(state.global_sequence(), None, [block_from(p, "b0", 2)])
        return read(ctx.h)

    keys = Tensor(rng.standard_normal((2, 4, 5)))
    contrast = {"q": Tensor(rng.standard_normal((2, 4, 5))), "k": keys, "v": Tensor(rng.standard_normal((2, 4, 5)))}
    mask = np.array([[True, True, True, False], [True, True, True, True]])

    def contrastive(p):
        res = contrastive_attention(p["q"], p["k"], p["v"], mask)
        return read(res.contrastive) + read(res.opponent)

    logits = {"z": Tensor(rng.standard_normal((2, 3, 2)))}
    labels = np.array([[0, 1, 1], [1, 0, 0]])
    loss_mask = np.array([[True, False, True], [True, True, True]])
    return {
        "recurrence+transformer": (pipeline, params),
        "contrastive_attention": (contrastive, contrast),
        "cross_entropy": (lambda p: cross_entropy_loss(p["z"], labels, loss_mask), logits),
    }


def _model_check(rng) -> dict[str, tuple[Callable, dict]]:
    # Relative error against a 1e-8 floor is limited by FD roundoff (about
    # 1e-11 absolute at this loss scale), so entries with |g| below ~1e-7 fail
    # regardless of correctness.  The draw used by ``run_suite`` keeps every
    # nonzero entry above 4e-7.
    cfg = tiny_config()
    params = init_parameters(cfg, np.float64)
    params = {k: Tensor(v.data + 0.05 * rng.standard_normal(v.shape)) for k, v in params.items()}
    batch = collate([tiny_conversation(rng)], cfg.input_dims)
    owned = {m: [k for k in params if k.split(".")[1] == m] for m in cfg.modalities}
    cache: dict[str, tuple[list, object]] = {}

    def context(p, m):
        # a central difference bumps one tensor at a time; the other
        # modalities' encoders see identical inputs and are reused
        key = [p[k] for k in owned[m]]
        hit = cache.get(m)
        if hit is not None and all(a is b for a, b in zip(hit[0], key)) and not any(t.requires_grad for t in key):
            return hit[1]
        out = encode_modality(p, cfg, batch, m, "eval")
        cache[m] = (key, out)
        return out

    def loss(p):
        enc = fuse(cfg, {m: context(p, m) for m in cfg.modalities}, batch, "eval")
        return cross_entropy_loss(decode(p, enc.beta), batch.labels, batch.targets)

    return {"conattsd(forward+loss)": (loss, params)}


def run_suite(seed: int = 0, eps: float = EPS, components: set[str] | None = None) -> list[CheckResult]:
    """Run every check in 64-bit with non-finite detection enabled."""
    results = []
    with ad.precision(64), ad.verification():
        rng = np.random.default_rng(seed)
        checks = {}
        for group in (_primitive_checks, _layer_checks, _encoder_checks):
            checks.update(group(rng))
        checks.update(_model_check(np.random.default_rng(seed + 1)))
        for name, (fn, params) in checks.items():
            if components is not None and name not in components:
                continue
            start = time.perf_counter()
            error = finite_difference_check(fn, params, eps)
            results.append(CheckResult(name, error, time.perf_counter() - start))
    return results
