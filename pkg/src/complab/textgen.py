"""Deterministic synthetic corpus for desk-scale experiments.

Documents are word walks over a fixed synthetic language: a content
lexicon of pronounceable words, a small closed class of short function
words, and a sparse bigram graph that fixes which content words may
follow which. The language is built once from a module constant, so
every machine sees the same lexicon and the same transition table; the
corpus seed only drives the walks. Words are short, so models learn
the spellings quickly and spend the rest of their budget on the
transition tables. Those tables are sharp: each word allows only a
handful of successors with a fixed geometric preference among them,
so getting a transition right or wrong moves the loss. Every document
also commits to one topic. A topic owns a slice of the lexicon,
boosts it, and rewires the chains between its own words with a
private successor table, the way real corpora reuse one vocabulary
but pair words differently by subject. Spelling and grammar transfer
across topics, but most of the predictable structure in a document is
its topic's private table, and a small split of documents only covers
the topics it happens to contain, so what a short finetune can repair
depends on which documents it was given.
"""

from __future__ import annotations

import functools
from pathlib import Path

import numpy as np

from .errors import ParameterError

_LANGUAGE_SEED = 71
_N_FUNCTION = 16
_N_CONTENT = 600
_KMAX = 8
_FUNCTION_RATE = 0.3
_N_TOPICS = 60
_TOPIC_SIZE = 120
_TOPIC_BOOST = 6.0
_GEOM = 0.55

_ONSETS = [
    "b", "br", "c", "cl", "d", "dr", "f", "fr", "g", "gr", "h", "j",
    "k", "l", "m", "n", "p", "pl", "r", "s", "st", "t", "tr", "v", "w",
]
_NUCLEI = ["a", "e", "i", "o", "u", "ai", "ee", "oa"]
_CODAS = ["", "n", "r", "s", "t", "l", "k", "m"]


def _draw_word(rng: np.random.Generator, n_syllables: int) -> str:
    parts = []
    for i in range(n_syllables):
        parts.append(_ONSETS[rng.integers(len(_ONSETS))])
        parts.append(_NUCLEI[rng.integers(len(_NUCLEI))])
        # closed syllables only at the end keeps clusters pronounceable
        if i == n_syllables - 1:
            parts.append(_CODAS[rng.integers(len(_CODAS))])
    return "".join(parts)


class _Language:
    """Lexicons plus transition tables, shared by all documents."""

    def __init__(self, content, function, weights, succ, succ_len,
                 fun_pref, topic_boost, member_slot, topic_succ,
                 topic_succ_len, geom):
        self.content = content
        self.function = function
        self.weights = weights
        self.succ = succ
        self.succ_len = succ_len
        self.fun_pref = fun_pref
        self.topic_boost = topic_boost
        self.member_slot = member_slot
        self.topic_succ = topic_succ
        self.topic_succ_len = topic_succ_len
        self.geom = geom


@functools.lru_cache(maxsize=1)
def _language() -> _Language:
    rng = np.random.default_rng(_LANGUAGE_SEED)

    seen = set()
    function: list[str] = []
    while len(function) < _N_FUNCTION:
        w = _draw_word(rng, 1)
        if w not in seen:
            seen.add(w)
            function.append(w)
    content: list[str] = []
    while len(content) < _N_CONTENT:
        w = _draw_word(rng, 2)
        if w not in seen:
            seen.add(w)
            content.append(w)

    ranks = np.arange(_N_CONTENT, dtype=np.float64)
    weights = 1.0 / (ranks + 10.0) ** 0.7
    weights /= weights.sum()

    # small uniform-random successor sets with a fixed geometric preference
    # order inside each set keep the conditionals sharp
    noise = rng.gumbel(size=(_N_CONTENT, _N_CONTENT))
    np.fill_diagonal(noise, -np.inf)
    top = np.argpartition(-noise, _KMAX, axis=1)[:, :_KMAX].astype(np.int32)
    succ_len = rng.integers(3, _KMAX + 1, size=_N_CONTENT).astype(np.int32)
    geom = _GEOM ** np.arange(_KMAX, dtype=np.float64)

    # every content word prefers two of the function words
    first = rng.integers(0, _N_FUNCTION, size=_N_CONTENT)
    second = (first + 1 + rng.integers(0, _N_FUNCTION - 1,
                                       size=_N_CONTENT)) % _N_FUNCTION
    fun_pref = np.stack([first, second], axis=1).astype(np.int32)

    # each topic owns a slice of the lexicon and rewires the chains between
    # its own words, so documents share spelling and grammar while the actual
    # word-to-word associations differ from topic to topic
    topic_boost = np.ones((_N_TOPICS, _N_CONTENT), dtype=np.float64)
    member_slot = np.full((_N_TOPICS, _N_CONTENT), -1, dtype=np.int32)
    topic_succ = np.zeros((_N_TOPICS, _TOPIC_SIZE, _KMAX), dtype=np.int32)
    topic_succ_len = rng.integers(
        3, _KMAX + 1, size=(_N_TOPICS, _TOPIC_SIZE)).astype(np.int32)
    for t in range(_N_TOPICS):
        members = rng.choice(_N_CONTENT, size=_TOPIC_SIZE, replace=False)
        topic_boost[t, members] = _TOPIC_BOOST
        member_slot[t, members] = np.arange(_TOPIC_SIZE)
        local = rng.gumbel(size=(_TOPIC_SIZE, _TOPIC_SIZE))
        np.fill_diagonal(local, -np.inf)
        slots = np.argpartition(-local, _KMAX, axis=1)[:, :_KMAX]
        topic_succ[t] = members[slots]

    return _Language(content, function, weights, top, succ_len,
                     fun_pref, topic_boost, member_slot, topic_succ,
                     topic_succ_len, geom)


def _pick(rng: np.random.Generator, weights: np.ndarray) -> int:
    cum = np.cumsum(weights)
    return int(np.searchsorted(cum, rng.random() * cum[-1]))


def _walk(rng: np.random.Generator, lang: _Language, topic: int,
          n_content: int, glue: bool = True) -> list:
    """n_content content words; function words slip in between them."""
    boost = lang.topic_boost[topic]
    slot_of = lang.member_slot[topic]
    idx = _pick(rng, lang.weights * boost)
    out = [lang.content[idx]]
    for _ in range(n_content - 1):
        if glue and rng.random() < _FUNCTION_RATE:
            pick = 0 if rng.random() < 0.65 else 1
            out.append(lang.function[int(lang.fun_pref[idx, pick])])
        slot = int(slot_of[idx])
        if slot >= 0:
            k = int(lang.topic_succ_len[topic, slot])
            ids = lang.topic_succ[topic, slot, :k]
            idx = int(ids[_pick(rng, lang.geom[:k])])
        else:
            k = int(lang.succ_len[idx])
            ids = lang.succ[idx, :k]
            idx = int(ids[_pick(rng, lang.geom[:k] * boost[ids])])
        out.append(lang.content[idx])
    return out


def _sentence(rng: np.random.Generator, lang: _Language, topic: int) -> str:
    words = _walk(rng, lang, topic, int(rng.integers(5, 12)))
    if len(words) >= 9:
        words[int(rng.integers(3, 6))] += ","
    text = " ".join(words)
    return text[0].upper() + text[1:] + "."


def _title(rng: np.random.Generator, lang: _Language, topic: int) -> str:
    words = _walk(rng, lang, topic, int(rng.integers(2, 5)), glue=False)
    text = " ".join(words)
    return text[0].upper() + text[1:]


def generate_document(seed: int, doc_index: int, target_bytes: int = 9000) -> str:
    """One document of roughly target_bytes, stable for (seed, doc_index)."""
    if target_bytes < 200:
        raise ParameterError(f"target_bytes too small: {target_bytes}")
    lang = _language()
    rng = np.random.default_rng(np.random.SeedSequence([seed, doc_index]))
    topic = int(rng.integers(_N_TOPICS))
    title = _title(rng, lang, topic)
    parts = [title, ""]
    size = len(title)
    while size < target_bytes:
        n_sentences = int(rng.integers(3, 7))
        paragraph = " ".join(_sentence(rng, lang, topic)
                             for _ in range(n_sentences))
        parts.append(paragraph)
        parts.append("")
        size += len(paragraph) + 2
    return "\n".join(parts).rstrip() + "\n"


def generate_corpus(out_dir, n_docs: int = 150, seed: int = 7,
                    target_bytes: int = 9000) -> list:
    """Write n_docs documents as doc_000.txt ... into out_dir."""
    if n_docs < 1:
        raise ParameterError(f"n_docs must be positive, got {n_docs}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n_docs):
        p = out / f"doc_{i:03d}.txt"
        p.write_text(generate_document(seed, i, target_bytes), encoding="utf-8")
        paths.append(p)
    return paths


@functools.lru_cache(maxsize=1)
def _prompts() -> tuple:
    """Ten fixed prompts drawn from the language, four with a context line."""
    lang = _language()
    rng = np.random.default_rng(_LANGUAGE_SEED + 5)
    items = []
    for j in range(10):
        topic = int(rng.integers(_N_TOPICS))
        words = _walk(rng, lang, topic, int(rng.integers(3, 6)))
        prompt = " ".join(words)
        prompt = prompt[0].upper() + prompt[1:]
        context = _sentence(rng, lang, topic) if j % 2 == 0 and j > 0 else None
        items.append((prompt, context))
    return tuple(items)


def write_prompts(path) -> None:
    """Standard prompt fixture: one prompt per line, optional tab-separated
    context."""
    lines = []
    for prompt, context in _prompts():
        lines.append(f"{prompt}\t{context}" if context else prompt)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
