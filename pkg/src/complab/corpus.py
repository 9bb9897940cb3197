"""Byte-level tokenization and deterministic batch construction.

Text is modeled at the byte level: 256 byte values plus pad/bos/eos
specials, vocab size 259. Labels are the input shifted left by one;
positions with no next token (padding and each row's final real token)
carry IGNORE_INDEX and a zero attention mask. The mask gates loss and
statistics only; attention itself stays causal over the whole row.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, ParameterError

log = logging.getLogger(__name__)

IGNORE_INDEX = -100


class ByteTokenizer:
    """Reversible tokenizer over arbitrary byte strings."""

    PAD = 256
    BOS = 257
    EOS = 258

    @property
    def vocab_size(self) -> int:
        return 259

    def encode(self, text, add_specials: bool = True) -> np.ndarray:
        """str or bytes -> int32 ids, optionally wrapped in bos/eos."""
        raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        ids = list(raw)
        if add_specials:
            ids = [self.BOS] + ids + [self.EOS]
        return np.array(ids, dtype=np.int32)

    def decode_bytes(self, ids) -> bytes:
        """Inverse of encode: drops special ids, keeps every byte."""
        return bytes(int(i) for i in np.asarray(ids).reshape(-1) if 0 <= int(i) < 256)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")


@dataclass
class Batch:
    """input_ids/labels (B, L) int32, attention_mask (B, L) {0,1} int8.

    Invariant: attention_mask[i, j] == 0 exactly when
    labels[i, j] == IGNORE_INDEX.
    """

    input_ids: np.ndarray
    labels: np.ndarray
    attention_mask: np.ndarray

    def __post_init__(self):
        if self.input_ids.shape != self.labels.shape or \
                self.input_ids.shape != self.attention_mask.shape:
            raise InputError(
                f"batch field shapes differ: ids {self.input_ids.shape}, "
                f"labels {self.labels.shape}, mask {self.attention_mask.shape}"
            )
        ignored = self.labels == IGNORE_INDEX
        if not np.array_equal(self.attention_mask == 0, ignored):
            raise InputError("attention mask zeros must align with ignored labels")

    @property
    def num_target_tokens(self) -> int:
        return int(self.attention_mask.sum())


def load_corpus(paths: Iterable) -> list[bytes]:
    """Read documents from text files, sorted by path for determinism.
    Empty files are skipped with a warning; zero readable files is an error."""
    docs = []
    ordered = sorted(Path(p) for p in paths)
    for p in ordered:
        try:
            raw = p.read_bytes()
        except OSError as e:
            log.warning("skipping unreadable corpus file %s: %s", p, e)
            continue
        if not raw:
            log.warning("skipping empty corpus file %s", p)
            continue
        docs.append(raw)
    if not docs:
        raise FileNotFoundError(
            f"no readable non-empty corpus files among {len(ordered)} paths"
        )
    return docs


def load_corpus_dir(directory) -> list[bytes]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory not found: {d}")
    return load_corpus(d.rglob("*.txt"))


def split(docs: Sequence, fractions, seed: int):
    """Shuffle documents and split into len(fractions) disjoint covering
    parts. Boundaries come from the cumulative fractions floored, so every
    document lands in exactly one part."""
    fractions = tuple(float(f) for f in fractions)
    for f in fractions:
        if not 0.0 <= f <= 1.0:
            raise ParameterError(f"split fraction {f} outside [0, 1]")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ParameterError(f"split fractions sum to {sum(fractions)}, expected 1")
    order = np.random.default_rng(seed).permutation(len(docs))
    shuffled = [docs[i] for i in order]
    parts = []
    start = 0
    acc = 0.0
    for f in fractions[:-1]:
        acc += f
        end = int(acc * len(docs))
        parts.append(shuffled[start:end])
        start = end
    parts.append(shuffled[start:])
    return tuple(parts)


def make_batches(docs: Sequence, tokenizer: ByteTokenizer, max_len: int,
                 batch_size: int, seed: int) -> list[Batch]:
    """Tokenize documents, chunk to max_len, shuffle chunks, group into
    batches. Deterministic for a fixed (docs, max_len, batch_size, seed)."""
    if max_len < 2:
        raise ParameterError(f"max_len must be at least 2, got {max_len}")
    if batch_size < 1:
        raise ParameterError(f"batch_size must be positive, got {batch_size}")
    chunks = []
    for doc in docs:
        ids = tokenizer.encode(doc)
        for start in range(0, len(ids), max_len):
            piece = ids[start:start + max_len]
            if len(piece) >= 2:  # need at least one next-token target
                chunks.append(piece)
    if not chunks:
        return []
    order = np.random.default_rng(seed).permutation(len(chunks))
    chunks = [chunks[i] for i in order]

    batches = []
    for at in range(0, len(chunks), batch_size):
        group = chunks[at:at + batch_size]
        b = len(group)
        input_ids = np.full((b, max_len), tokenizer.PAD, dtype=np.int32)
        labels = np.full((b, max_len), IGNORE_INDEX, dtype=np.int32)
        mask = np.zeros((b, max_len), dtype=np.int8)
        for row, piece in enumerate(group):
            n = len(piece)
            input_ids[row, :n] = piece
            labels[row, :n - 1] = piece[1:]
            mask[row, :n - 1] = 1
        batches.append(Batch(input_ids, labels, mask))
    return batches


@dataclass
class SplitData:
    """The four working sets every pipeline consumes."""

    train: list[Batch]
    calibration: list[Batch]
    finetune: list[Batch]
    heldout: list[Batch]


def prepare_data(docs: Sequence, tokenizer: ByteTokenizer, max_len: int,
                 batch_size: int, fractions, seed: int) -> SplitData:
    """Split documents and batch each part with a seed derived from the
    part index, so the four sets shuffle independently but reproducibly."""
    parts = split(docs, fractions, seed)
    if len(parts) != 4:
        raise ParameterError(f"expected 4 split fractions, got {len(parts)}")
    ss = np.random.SeedSequence([int(seed), 0xBA7C4])
    part_seeds = [int(s) for s in ss.generate_state(4)]
    train, cal, ft, held = (
        make_batches(part, tokenizer, max_len, batch_size, part_seeds[i])
        for i, part in enumerate(parts)
    )
    return SplitData(train=train, calibration=cal, finetune=ft, heldout=held)
