"""ConAttSD classifier: projections, modality encoders, contrastive attention, fusion, decoder."""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .contrastive import DEFAULT_VARIANTS, MODALITIES, AttentionOutput, DirectedBiModalVariant, contrastive_attention
from .data import MUSTARD_DIMS, Conversation
from .encoder import ContextVectorSequence, apply_row_mask, gru_recurrence, transformer_refine
from .errors import ConfigError, DataError
from .layers import (
    DropoutConfig,
    block_from,
    dropout_apply,
    gru_from,
    init_gru,
    init_linear,
    init_transformer_block,
    linear_forward,
    linear_from,
    named_tensors,
)

Parameters = dict[str, Tensor]
N_CLASSES = 2


@dataclass(frozen=True)
class ModelConfig:
    input_dims: dict = field(default_factory=lambda: dict(MUSTARD_DIMS))
    hidden: int = 150
    blocks: int = 3
    heads: int = 6
    dropout: float = 0.5
    modalities: tuple[str, ...] = MODALITIES
    variants: tuple[DirectedBiModalVariant, ...] = DEFAULT_VARIANTS
    use_transformer: bool = True
    positional_encoding: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(m for m in MODALITIES if m in self.modalities))
        object.__setattr__(self, "variants", tuple(
            v if isinstance(v, DirectedBiModalVariant) else DirectedBiModalVariant.parse(v) for v in self.variants))
        if not self.modalities:
            raise ConfigError("at least one modality must be enabled")
        for m in self.modalities:
            if int(self.input_dims.get(m, 0)) < 1:
                raise ConfigError(f"input dim for enabled modality {m} must be positive")
        for v in self.variants:
            if v.anchor not in self.modalities or v.target not in self.modalities:
                raise ConfigError(f"variant {v} references a disabled modality (enabled: {'+'.join(self.modalities)})")
        if len(set(self.variants)) != len(self.variants):
            raise ConfigError("duplicate contrastive variants")
        if self.hidden < 2:
            raise ConfigError("hidden size must be at least 2")
        if self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide hidden size {self.hidden}")
        if self.blocks < 0:
            raise ConfigError("block count must be non-negative")
        DropoutConfig(self.dropout)

    @property
    def fused_dim(self) -> int:
        return (len(self.modalities) + len(self.variants)) * self.hidden

    @property
    def label(self) -> str:
        mods = "+".join(self.modalities)
        text = mods
        if self.variants:
            text = f"{mods}|" + " + ".join(str(v) for v in self.variants)
        return ("g-only:" if not self.use_transformer else "") + text

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_dims"] = {m: int(self.input_dims[m]) for m in MODALITIES if m in self.input_dims}
        d["modalities"] = list(self.modalities)
        d["variants"] = [str(v) for v in self.variants]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "modalities" in kwargs:
            kwargs["modalities"] = tuple(kwargs["modalities"])
        if "variants" in kwargs:
            kwargs["variants"] = tuple(DirectedBiModalVariant.parse(v) if isinstance(v, str) else v
                                       for v in kwargs["variants"])
        if "input_dims" in kwargs:
            kwargs["input_dims"] = {m: int(v) for m, v in kwargs["input_dims"].items()}
        return cls(**kwargs)


# ------------------------------------------------------------- ablations
_MODS = re.compile(r"^[TAV](\+[TAV])*$")


def configure_variant(base: ModelConfig, spec: str) -> ModelConfig:
    """Derive an ablation config from a descriptor.

    Accepted forms (whitespace is ignored)::

        "T+A"            sequential context encoder only, on the listed modalities
        "T→A"            T+A+V encoder plus the listed contrastive variant(s);
        "T→A + T→V"      ``->`` works in place of ``→``
        "T+A|T→A"        explicit modalities plus variants
        "g-only:T+A+V"   GRU-only baseline (no Transformer), concatenated global states
        "conattsd"       the default model (T+A+V with T→A and T→V)
    """
    text = spec.strip()
    use_transformer = True
    if text.lower().startswith("g-only:"):
        use_transformer = False
        text = text[len("g-only:"):]
    text = text.replace(" ", "")
    if text.lower() in ("conattsd", "full", "default"):
        mods, variants = MODALITIES, DEFAULT_VARIANTS
    else:
        if "|" in text:
            mod_text, var_text = text.split("|", 1)
        elif "→" in text or "->" in text:
            mod_text, var_text = "T+A+V", text
        else:
            mod_text, var_text = text, ""
        if not _MODS.match(mod_text):
            raise ConfigError(f"cannot parse modality list {mod_text!r} in ablation spec {spec!r}")
        mods = tuple(mod_text.split("+"))
        if len(set(mods)) != len(mods):
            raise ConfigError(f"repeated modality in ablation spec {spec!r}")
        variants = tuple(DirectedBiModalVariant.parse(v) for v in var_text.split("+") if v) if var_text else ()
    for v in variants:
        if v.anchor not in mods or v.target not in mods:
            raise ConfigError(f"ablation spec {spec!r}: variant {v} references a disabled modality")
    return dataclasses.replace(base, modalities=tuple(mods), variants=tuple(variants),
                               use_transformer=use_transformer)


# ------------------------------------------------------------ parameters
def init_parameters(cfg: ModelConfig, dtype=None) -> Parameters:
    """Glorot-uniform weights, zero biases, unit LayerNorm gains; deterministic in ``cfg.seed``."""
    dtype = np.dtype(dtype) if dtype is not None else ad.get_default_dtype()
    rng = np.random.default_rng(cfg.seed)
    h = cfg.hidden
    params: Parameters = {}

    def put(record, prefix):
        for name, t in named_tensors(record, prefix):
            params[name] = Tensor(t.data, requires_grad=True, name=name)

    for m in cfg.modalities:
        put(init_linear(rng, cfg.input_dims[m], h, dtype), f"proj.{m}")
        put(init_gru(rng, 2 * h, h, dtype), f"gru_g.{m}")
        put(init_gru(rng, 2 * h, h, dtype), f"gru_p.{m}")
        if cfg.use_transformer:
            for b in range(cfg.blocks):
                put(init_transformer_block(rng, h, cfg.heads, dtype), f"blocks.{m}.{b}")
    put(init_linear(rng, cfg.fused_dim, N_CLASSES, dtype), "decoder")
    return params


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in init_parameters(cfg, np.float32).items()}


def parameter_count(params: Mapping[str, Tensor]) -> int:
    return int(np.sum([p.size for p in params.values()]))


def cast_parameters(params: Mapping[str, Tensor], dtype) -> Parameters:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


# ----------------------------------------------------------------- batches
@dataclass
class Batch:
    ids: list[str]
    features: dict[str, np.ndarray]  # modality -> (B, n, d)
    speakers: np.ndarray  # (B, n) slot per conversation, -1 for padding
    mask: np.ndarray  # (B, n) real utterances
    targets: np.ndarray  # (B, n) labeled target utterances
    labels: np.ndarray  # (B, n) 0/1, 0 where unlabeled

    def __len__(self) -> int:
        return len(self.ids)


def collate(conversations: Sequence[Conversation], input_dims: Mapping[str, int],
            modalities: Sequence[str] = MODALITIES) -> Batch:
    """Right-pad conversations into dense arrays."""
    if not conversations:
        raise DataError("cannot collate an empty list of conversations")
    b = len(conversations)
    n = max(len(c) for c in conversations)
    feats = {m: np.zeros((b, n, int(input_dims[m]))) for m in modalities}
    speakers = np.full((b, n), -1, dtype=np.int64)
    mask = np.zeros((b, n), dtype=bool)
    targets = np.zeros((b, n), dtype=bool)
    labels = np.zeros((b, n), dtype=np.int64)
    for i, conv in enumerate(conversations):
        slots: dict[str, int] = {}
        for j, u in enumerate(conv.utterances):
            for m in modalities:
                f = u.feature(m)
                if f.shape[0] != feats[m].shape[2]:
                    raise DataError(f"conversation {conv.id!r} utterance {j}: modality {m} has dim "
                                    f"{f.shape[0]}, model expects {feats[m].shape[2]}")
                feats[m][i, j] = f
            speakers[i, j] = slots.setdefault(u.speaker, len(slots))
            mask[i, j] = True
            if u.is_target and u.label is not None:
                targets[i, j] = True
                labels[i, j] = u.label
    return Batch([c.id for c in conversations], feats, speakers, mask, targets, labels)


# ----------------------------------------------------------------- forward
@dataclass
class Encoded:
    context: dict[str, ContextVectorSequence]
    attention: dict[str, AttentionOutput]
    beta: Tensor  # (B, n, fused_dim)


def encode_modality(params: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, m: str, mode: str = "eval",
                    rng: np.random.Generator | None = None) -> ContextVectorSequence:
    """Projection, recurrence and (optionally) Transformer refinement for one modality."""
    drop = DropoutConfig(cfg.dropout, mode)
    dtype = params["decoder.weight"].dtype
    x = Tensor(batch.features[m], dtype=dtype)
    u = dropout_apply(drop, linear_forward(linear_from(params, f"proj.{m}"), x), rng)
    state = gru_recurrence(u, batch.speakers, gru_from(params, f"gru_g.{m}"), gru_from(params, f"gru_p.{m}"))
    g_seq = state.global_sequence()
    if cfg.use_transformer:
        blocks = [block_from(params, f"blocks.{m}.{b}", cfg.heads) for b in range(cfg.blocks)]
        return transformer_refine(g_seq, batch.mask, blocks, cfg.positional_encoding)
    return ContextVectorSequence(apply_row_mask(g_seq, batch.mask), batch.mask)


def fuse(cfg: ModelConfig, context: Mapping[str, ContextVectorSequence], batch: Batch, mode: str = "eval",
         rng: np.random.Generator | None = None) -> Encoded:
    """Contrastive vectors for every variant, then the fusion vector."""
    drop = DropoutConfig(cfg.dropout, mode)
    attention = {}
    for v in cfg.variants:
        target = context[v.target].h
        attention[str(v)] = contrastive_attention(context[v.anchor].h, target, target, batch.mask)
    parts = [dropout_apply(drop, context[m].h, rng) for m in cfg.modalities]
    parts += [attention[str(v)].contrastive for v in cfg.variants]
    beta = ad.concat(parts, axis=-1) if len(parts) > 1 else parts[0]
    return Encoded(dict(context), attention, beta)


def encode(params: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, mode: str = "eval",
           rng: np.random.Generator | None = None) -> Encoded:
    """Everything up to the fusion vector."""
    context = {m: encode_modality(params, cfg, batch, m, mode, rng) for m in cfg.modalities}
    return fuse(cfg, context, batch, mode, rng)


def decode(params: Mapping[str, Tensor], beta: Tensor) -> Tensor:
    return linear_forward(linear_from(params, "decoder"), beta)


def forward_batch(params, cfg: ModelConfig, batch: Batch, mode: str = "eval", rng=None) -> Tensor:
    """Per-utterance logits ``(B, n, 2)``; softmax is left to the loss / prediction."""
    return decode(params, encode(params, cfg, batch, mode, rng).beta)


def forward(params, cfg: ModelConfig, conv: Conversation, mode: str = "eval", rng=None) -> Tensor:
    """Per-utterance logits ``(n, 2)`` for one conversation."""
    logits = forward_batch(params, cfg, collate([conv], cfg.input_dims, cfg.modalities), mode, rng)
    return ad.reshape(logits, logits.shape[1:])


def probabilities(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decide(logits) -> tuple[np.ndarray, np.ndarray]:
    """Label 1 only when its probability is strictly larger; ties go to 0."""
    probs = probabilities(logits)
    return (probs[..., 1] > probs[..., 0]).astype(np.int64), probs


def predict(params, cfg: ModelConfig, conv: Conversation) -> tuple[np.ndarray, np.ndarray]:
    """Labels ``(n,)`` and class probabilities ``(n, 2)`` for every utterance."""
    return decide(forward(params, cfg, conv, "eval"))
