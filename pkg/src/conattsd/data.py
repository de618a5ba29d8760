"""Conversation data model, feature file format, splitting, and a synthetic generator.

File format (line-delimited JSON, UTF-8)
----------------------------------------
Line 1 is a header::

    {"format": "conattsd-features", "version": 1, "dims": {"T": 768, "A": 298, "V": 2048}}

optionally with ``"sidecar": "<file name>"`` naming a binary container in the
same directory.  Every following non-empty line is one conversation::

    {"id": "c17", "source": "Friends", "utterances": [
        {"speaker": "CHANDLER", "target": false, "label": null, "T": [...], "A": [...], "V": [...]},
        ...]}

A feature entry is either a list of numbers or ``{"offset": k}``, meaning
``dims[m]`` little-endian float32 values starting at element ``k`` of the
sidecar.  An optional ``"meta"`` object per conversation is carried through
untouched.  Target utterances must carry a 0/1 label.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, DataError

FORMAT_NAME = "conattsd-features"
FORMAT_VERSION = 1
MODALITIES = ("T", "A", "V")
MUSTARD_DIMS = {"T": 768, "A": 298, "V": 2048}


def _frozen(values, dim=None) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DataError(f"feature must be a vector, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DataError(f"feature has {arr.shape[0]} values, expected {dim}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Utterance:
    text_feat: np.ndarray
    audio_feat: np.ndarray
    visual_feat: np.ndarray
    speaker: str
    label: int | None = None
    is_target: bool = False

    def __post_init__(self):
        for name in ("text_feat", "audio_feat", "visual_feat"):
            value = getattr(self, name)
            if not (isinstance(value, np.ndarray) and not value.flags.writeable and value.dtype == np.float64):
                object.__setattr__(self, name, _frozen(value))
        if self.label is not None and self.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {self.label!r}")
        if self.is_target and self.label is None:
            raise DataError("target utterance has no label")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Utterance):
            return NotImplemented
        return (self.speaker, self.label, self.is_target) == (other.speaker, other.label, other.is_target) and all(
            np.array_equal(self.feature(m), other.feature(m)) for m in MODALITIES)

    __hash__ = None

    def feature(self, modality: str) -> np.ndarray:
        return {"T": self.text_feat, "A": self.audio_feat, "V": self.visual_feat}[modality]


@dataclass(frozen=True)
class Conversation:
    id: str
    source: str
    utterances: tuple[Utterance, ...]
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        if not self.utterances:
            raise DataError(f"conversation {self.id!r} has no utterances")
        if not any(u.is_target for u in self.utterances):
            raise DataError(f"conversation {self.id!r} has no target utterance")

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def targets(self) -> list[int]:
        return [i for i, u in enumerate(self.utterances) if u.is_target]


@dataclass
class FeatureDataset:
    dims: dict[str, int]
    conversations: list[Conversation]
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.dims = {m: int(self.dims[m]) for m in MODALITIES}
        for conv in self.conversations:
            for j, u in enumerate(conv.utterances):
                for m in MODALITIES:
                    if u.feature(m).shape[0] != self.dims[m]:
                        raise DataError(f"conversation {conv.id!r} utterance {j}: modality {m} has "
                                        f"{u.feature(m).shape[0]} values, header declares {self.dims[m]}")

    def __len__(self) -> int:
        return len(self.conversations)

    @property
    def class_counts(self) -> dict[int, int]:
        counts = Counter(u.label for c in self.conversations for u in c.utterances if u.is_target)
        return {0: counts.get(0, 0), 1: counts.get(1, 0)}

    @property
    def sources(self) -> list[str]:
        return sorted({c.source for c in self.conversations})

    def subset(self, conversations: Iterable[Conversation]) -> "FeatureDataset":
        return FeatureDataset(dict(self.dims), list(conversations), self.version)


# ------------------------------------------------------------------ loading
def _parse_feature(value, modality, dim, sidecar, where):
    if isinstance(value, dict):
        if sidecar is None:
            raise DataError(f"{where}: modality {modality} references a sidecar but the header names none")
        offset = value.get("offset")
        if not isinstance(offset, int) or offset < 0 or offset + dim > sidecar.shape[0]:
            raise DataError(f"{where}: modality {modality} sidecar offset {offset!r} out of range")
        return _frozen(sidecar[offset:offset + dim].astype(np.float64))
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise DataError(f"{where}: modality {modality} must be a list of numbers")
    if len(value) != dim:
        raise DataError(f"{where}: modality {modality} has {len(value)} values, header declares {dim}")
    arr = _frozen(value)
    if not np.isfinite(arr).all():
        raise DataError(f"{where}: modality {modality} contains non-finite values")
    return arr


def load_dataset(path: str | os.PathLike) -> FeatureDataset:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:1: malformed header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DataError(f"{path}:1: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}:1: unsupported format version {header.get('version')!r}")
    dims = header.get("dims")
    if not isinstance(dims, dict) or any(not isinstance(dims.get(m), int) or dims[m] < 1 for m in MODALITIES):
        raise DataError(f"{path}:1: header must declare positive integer dims for T, A and V")
    sidecar = None
    if header.get("sidecar"):
        side_path = path.parent / header["sidecar"]
        if not side_path.exists():
            raise DataError(f"{path}:1: sidecar {side_path} not found")
        sidecar = np.fromfile(side_path, dtype="<f4")

    conversations = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        where = f"{path}:{lineno}"
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{where}: malformed line: {exc.msg}") from None
        if not isinstance(record, dict):
            raise DataError(f"{where}: record must be an object")
        conv_id = record.get("id")
        if not isinstance(conv_id, str) or not conv_id:
            raise DataError(f"{where}: missing conversation id")
        if conv_id in seen:
            raise DataError(f"{where}: duplicate conversation id {conv_id!r}")
        seen.add(conv_id)
        source = record.get("source")
        if not isinstance(source, str) or not source:
            raise DataError(f"{where}: conversation {conv_id!r} has no source")
        raw_utts = record.get("utterances")
        if not isinstance(raw_utts, list) or not raw_utts:
            raise DataError(f"{where}: conversation {conv_id!r} has no utterances")
        utterances = []
        for j, raw in enumerate(raw_utts):
            uwhere = f"{where}: conversation {conv_id!r} utterance {j}"
            if not isinstance(raw, dict):
                raise DataError(f"{uwhere}: must be an object")
            speaker = raw.get("speaker")
            if not isinstance(speaker, str) or not speaker:
                raise DataError(f"{uwhere}: missing speaker")
            is_target = raw.get("target", False)
            if not isinstance(is_target, bool):
                raise DataError(f"{uwhere}: 'target' must be true or false")
            label = raw.get("label")
            if label is not None and (isinstance(label, bool) or label not in (0, 1)):
                raise DataError(f"{uwhere}: label must be 0, 1 or null, got {label!r}")
            if is_target and label is None:
                raise DataError(f"{uwhere}: target utterance is missing its label")
            feats = [_parse_feature(raw.get(m), m, dims[m], sidecar, uwhere) for m in MODALITIES]
            utterances.append(Utterance(*feats, speaker=speaker, label=label, is_target=is_target))
        if not any(u.is_target for u in utterances):
            raise DataError(f"{where}: conversation {conv_id!r} has no target utterance")
        meta = record.get("meta", {})
        if not isinstance(meta, dict):
            raise DataError(f"{where}: 'meta' must be an object")
        conversations.append(Conversation(conv_id, source, tuple(utterances), meta))
    return FeatureDataset(dict(dims), conversations, FORMAT_VERSION)


def save_dataset(ds: FeatureDataset, path: str | os.PathLike, sidecar: bool = False) -> None:
    """Write the canonical form of ``ds``; ``sidecar=True`` stores features as float32 in ``<path>.bin``."""
    path = Path(path)
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "dims": {m: ds.dims[m] for m in MODALITIES}}
    blocks: list[np.ndarray] = []
    offset = 0
    if sidecar:
        header["sidecar"] = path.name + ".bin"
    lines = [json.dumps(header, separators=(",", ":"), ensure_ascii=False)]
    for conv in ds.conversations:
        utts = []
        for u in conv.utterances:
            item = {"speaker": u.speaker, "target": u.is_target, "label": u.label}
            for m in MODALITIES:
                feat = u.feature(m)
                if sidecar:
                    blocks.append(feat.astype("<f4"))
                    item[m] = {"offset": offset}
                    offset += feat.shape[0]
                else:
                    item[m] = [float(v) for v in feat]
            utts.append(item)
        record = {"id": conv.id, "source": conv.source, "utterances": utts}
        if conv.meta:
            record["meta"] = conv.meta
        lines.append(json.dumps(record, separators=(",", ":"), ensure_ascii=False))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if sidecar:
        data = np.concatenate(blocks) if blocks else np.zeros(0, dtype="<f4")
        data.astype("<f4").tofile(path.parent / header["sidecar"])


# ---------------------------------------------------------------- splitting
def split_speaker_independent(ds: FeatureDataset, train_sources: Sequence[str],
                              test_sources: Sequence[str]) -> tuple[FeatureDataset, FeatureDataset]:
    """Assign conversations by source show so no show appears on both sides."""
    train_set, test_set = set(train_sources), set(test_sources)
    if not train_set or not test_set:
        raise ContractError("both train and test source lists must be non-empty")
    overlap = train_set & test_set
    if overlap:
        raise ContractError(f"sources listed for both train and test: {sorted(overlap)}")
    known = set(ds.sources)
    unknown = (train_set | test_set) - known
    if unknown:
        raise ContractError(f"unknown sources {sorted(unknown)}; dataset has {sorted(known)}")
    unassigned = known - train_set - test_set
    if unassigned:
        raise ContractError(f"sources {sorted(unassigned)} are in neither split")
    train = [c for c in ds.conversations if c.source in train_set]
    test = [c for c in ds.conversations if c.source in test_set]
    return ds.subset(train), ds.subset(test)


# ---------------------------------------------------------------- synthetic
_INCONGRUENT = [(t, a, v) for t in (1, -1) for a in (1, -1) for v in (1, -1) if not t == a == v]


@dataclass(frozen=True)
class SyntheticConfig:
    n_conversations: int = 64
    min_length: int = 2
    max_length: int = 5
    n_speakers: int = 2
    dims: tuple[int, int, int] = (16, 16, 16)
    noise: float = 0.5
    strength: float = 1.0
    n_sources: int = 1
    context: str = "neutral"
    seed: int = 0

    def __post_init__(self):
        if self.n_conversations < 1:
            raise ContractError("n_conversations must be positive")
        if not 1 <= self.min_length <= self.max_length:
            raise ContractError("need 1 <= min_length <= max_length")
        if self.n_speakers < 1 or self.n_sources < 1:
            raise ContractError("n_speakers and n_sources must be positive")
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ContractError(f"synthetic dims must be three values >= 2, got {self.dims}")
        if self.noise < 0 or not math.isfinite(self.noise):
            raise ContractError("noise must be finite and >= 0")
        if self.context not in ("neutral", "congruent"):
            raise ContractError("context must be 'neutral' or 'congruent'")


def incongruity_label(polarity: dict[str, int]) -> int:
    """1 when text polarity disagrees with audio or visual polarity."""
    return int(polarity["T"] != polarity["A"] or polarity["T"] != polarity["V"])


def generate_synthetic(cfg: SyntheticConfig) -> FeatureDataset:
    """Conversations whose final utterance is sarcastic iff its modalities disagree in polarity.

    Every utterance plants a polarity of ``±strength`` in coordinate 0 of each
    modality; all other coordinates are noise.  Context utterances carry
    polarity 0 by default (``context="congruent"`` gives them one shared
    random polarity).  The target's label is drawn first (exactly balanced up to one
    for odd counts); a label-1 target gets one of the six incongruent polarity
    triples uniformly, so each modality's polarity alone is independent of the
    label.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_conversations
    labels = np.array([1] * (n // 2) + [0] * (n - n // 2))
    labels = labels[rng.permutation(n)]
    dims = dict(zip(MODALITIES, cfg.dims))
    conversations = []
    for k in range(n):
        length = int(rng.integers(cfg.min_length, cfg.max_length + 1))
        speakers = rng.integers(0, cfg.n_speakers, size=length)
        utterances = []
        for j in range(length):
            is_target = j == length - 1
            if not is_target:
                p = int(rng.choice((-1, 1))) if cfg.context == "congruent" else 0
                polarity = {m: p for m in MODALITIES}
            elif labels[k] == 0:
                p = int(rng.choice((-1, 1)))
                polarity = {m: p for m in MODALITIES}
            else:
                triple = _INCONGRUENT[int(rng.integers(len(_INCONGRUENT)))]
                polarity = dict(zip(MODALITIES, triple))
            feats = []
            for m in MODALITIES:
                x = cfg.noise * rng.standard_normal(dims[m])
                x[0] += cfg.strength * polarity[m]
                feats.append(x)
            utterances.append(Utterance(*feats, speaker=f"S{int(speakers[j])}",
                                        label=int(labels[k]) if is_target else None, is_target=is_target))
        source = "synthetic" if cfg.n_sources == 1 else f"show{k % cfg.n_sources}"
        meta = {"polarity": polarity}
        conversations.append(Conversation(f"syn{k:05d}", source, tuple(utterances), meta))
    return FeatureDataset(dims, conversations)
