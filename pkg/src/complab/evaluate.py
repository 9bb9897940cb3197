"""Quality metrics for compressed models.

Perplexity is exp of the mean next-token NLL over unmasked positions.
Fluency maps a perplexity through 1 - 1/(1 + log2(ppl)). Note the
direction: the formula rises as perplexity rises, so a more surprising
response scores as more "fluent". It is implemented verbatim as the
quality pipeline defines it and flagged here rather than inverted;
comparisons between models remain meaningful because every model is
scored the same way.

Coherence is the cosine between mean-pooled token embeddings of the
response and its context. Readability is a Flesch reading-ease score
(206.835 - 1.015 * words/sentence - 84.6 * syllables/word) clamped to
[0, 100] and rescaled to [0, 1], with syllables counted as vowel groups
(aeiouy, minimum one per word). Clarity averages fluency, coherence
clamped to [0, 1], and readability.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .corpus import ByteTokenizer, make_batches
from .errors import ParameterError
from .model import TransformerModel
from .quant import QuantizedTensor, storage_size

_WORD_RE = re.compile(r"\S*[A-Za-z0-9]\S*")
_VOWEL_GROUP_RE = re.compile(r"[aeiouy]+")
_SENTENCE_SPLIT_RE = re.compile(r"[.!?]+")


@dataclass
class EvalConfig:
    max_eval_batches: int = 24
    max_new_tokens: int = 64

    def __post_init__(self):
        if self.max_eval_batches < 1:
            raise ParameterError(
                f"max_eval_batches must be positive, got {self.max_eval_batches}"
            )
        if self.max_new_tokens < 1:
            raise ParameterError(
                f"max_new_tokens must be positive, got {self.max_new_tokens}"
            )


@dataclass
class EvalReport:
    perplexity: float
    fluency: float
    coherence: float
    readability: float
    clarity: float
    size_bytes: int
    compression_ratio: float
    g_eval: Optional[float] = None
    prompt_alignment: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "perplexity": self.perplexity,
            "fluency": self.fluency,
            "coherence": self.coherence,
            "readability": self.readability,
            "clarity": self.clarity,
            "size_bytes": self.size_bytes,
            "compression_ratio": self.compression_ratio,
            "g_eval": self.g_eval,
            "prompt_alignment": self.prompt_alignment,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def perplexity(model: TransformerModel, batches, max_batches: int = None) -> float:
    """exp(mean NLL) over unmasked positions, accumulated in float64."""
    if max_batches is not None:
        batches = batches[:max_batches]
    if not batches:
        raise ParameterError("perplexity needs at least one batch")
    total = 0.0
    count = 0.0
    for batch in batches:
        with T.no_grad():
            logits = model.forward(batch.input_ids, batch.attention_mask)
        z = logits.data.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        safe = np.where(batch.labels < 0, 0, batch.labels)
        picked = np.take_along_axis(logp, safe[..., None], -1)[..., 0]
        mask = batch.attention_mask.astype(np.float64)
        total -= (picked * mask).sum()
        count += mask.sum()
    if count == 0:
        raise ParameterError("no unmasked positions to score")
    return float(np.exp(total / count))


def fluency_from_perplexity(ppl: float) -> float:
    """1 - 1/(1 + log2(ppl)); see the module note on its direction."""
    if not math.isfinite(ppl) or ppl < 1.0:
        raise ParameterError(f"perplexity must be finite and >= 1, got {ppl}")
    return 1.0 - 1.0 / (1.0 + math.log2(ppl))


def compression_ratio(base_size: float, compressed_size: float) -> float:
    """How many times smaller the compressed artifact is than the base."""
    if not compressed_size > 0:
        raise ParameterError(
            f"compressed size must be positive, got {compressed_size}"
        )
    return float(base_size) / float(compressed_size)


def count_syllables(word: str) -> int:
    """Vowel-group count (aeiouy), never less than one."""
    return max(1, len(_VOWEL_GROUP_RE.findall(word.lower())))


def readability(text: str) -> float:
    """Flesch reading ease clamped to [0, 100], rescaled to [0, 1]."""
    words = _WORD_RE.findall(text)
    if not words:
        raise ParameterError("readability needs at least one word")
    sentences = sum(
        1 for seg in _SENTENCE_SPLIT_RE.split(text) if _WORD_RE.search(seg)
    )
    sentences = max(1, sentences)
    syllables = sum(count_syllables(w) for w in words)
    score = 206.835 - 1.015 * (len(words) / sentences) - 84.6 * (syllables / len(words))
    return min(100.0, max(0.0, score)) / 100.0


class MeanPooledEmbedder:
    """Embeds text as the mean of its byte-token embedding vectors."""

    def __init__(self, model: TransformerModel, tokenizer: ByteTokenizer):
        table = model.token_embedding
        self.table = (table.dequantize() if isinstance(table, QuantizedTensor)
                      else table.data)
        self.tokenizer = tokenizer

    def embed(self, text: str) -> np.ndarray:
        ids = self.tokenizer.encode(text, add_specials=False)
        if ids.size == 0:
            raise ParameterError("cannot embed empty text")
        return self.table[ids].mean(axis=0)


def coherence(response: str, context: str, embedder: MeanPooledEmbedder) -> float:
    """Cosine similarity of mean-pooled embeddings; 0.0 when either side
    has zero norm."""
    a = embedder.embed(response)
    b = embedder.embed(context)
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def clarity(fluency: float, coherence_value: float, readability_value: float) -> float:
    for name, v in (("fluency", fluency), ("coherence", coherence_value),
                    ("readability", readability_value)):
        if not math.isfinite(v):
            raise ParameterError(f"{name} must be finite, got {v}")
    clamped = min(1.0, max(0.0, coherence_value))
    return (fluency + clamped + readability_value) / 3.0


def generate(model: TransformerModel, tokenizer: ByteTokenizer, prompt: str,
             max_new_tokens: int = 64) -> str:
    """Greedy continuation of the prompt, decoded to text. Stops at eos
    (or pad, which an undertrained model may emit). Deterministic."""
    if max_new_tokens < 1:
        raise ParameterError(f"max_new_tokens must be positive, got {max_new_tokens}")
    window = model.config.max_seq_len
    prompt_bytes = prompt.encode("utf-8") if isinstance(prompt, str) else bytes(prompt)
    ids = [tokenizer.BOS] + list(prompt_bytes[-(window - 1):])
    out = []
    for _ in range(max_new_tokens):
        ctx = np.array([ids[-window:]], dtype=np.int32)
        with T.no_grad():
            logits = model.forward(ctx)
        nxt = int(np.argmax(logits.data[0, -1]))
        if nxt in (tokenizer.EOS, tokenizer.PAD):
            break
        out.append(nxt)
        ids.append(nxt)
    return tokenizer.decode(np.array(out, dtype=np.int32)) if out else ""


def load_prompts(path) -> list[tuple[str, Optional[str]]]:
    """One prompt per line; an optional tab separates prompt from context.
    Blank lines are skipped."""
    from pathlib import Path

    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"prompt file not found: {p}")
    prompts = []
    for line in p.read_text(encoding="utf-8").splitlines():
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if "\t" in line:
            prompt, context = line.split("\t", 1)
            prompts.append((prompt, context))
        else:
            prompts.append((line, None))
    if not prompts:
        raise ParameterError(f"prompt file {p} has no prompts")
    return prompts


def _response_perplexity(scorer: TransformerModel, tokenizer: ByteTokenizer,
                         text: str) -> float:
    data = text.encode("utf-8")
    batches = make_batches([data], tokenizer, scorer.config.max_seq_len,
                           batch_size=4, seed=0)
    return perplexity(scorer, batches)


def evaluate(model: TransformerModel, data, prompts, tokenizer: ByteTokenizer,
             reference_model: TransformerModel = None,
             base_size_bytes: int = None, judge_config=None,
             cfg: EvalConfig = None) -> EvalReport:
    """Full metric sweep: held-out perplexity, response-quality scores
    averaged over prompts, storage accounting, and optional judge scores.

    The reference model (the teacher, when a pipeline calls this) scores
    response perplexity for fluency and provides the embedding table for
    coherence, so every compressed model is judged by the same yardstick;
    without one the evaluated model scores itself. Degenerate responses
    (empty or wordless) contribute zero to the response metrics instead
    of failing the sweep.
    """
    cfg = cfg or EvalConfig()
    ppl = perplexity(model, data.heldout, cfg.max_eval_batches)
    scorer = reference_model if reference_model is not None else model
    embedder = MeanPooledEmbedder(scorer, tokenizer)

    if not prompts:
        raise ParameterError("evaluation needs at least one prompt")
    fluencies, coherences, readabilities = [], [], []
    responses = []
    for prompt, context in prompts:
        response = generate(model, tokenizer, prompt, cfg.max_new_tokens)
        responses.append(response)
        fluencies.append(
            fluency_from_perplexity(_response_perplexity(scorer, tokenizer, response))
        )
        if _WORD_RE.search(response):
            readabilities.append(readability(response))
        else:
            readabilities.append(0.0)
        if response:
            coherences.append(coherence(response, context or prompt, embedder))
        else:
            coherences.append(0.0)

    mean_f = float(np.mean(fluencies))
    mean_c = float(np.mean(coherences))
    mean_r = float(np.mean(readabilities))
    size = storage_size(model)

    g_eval = None
    alignment = None
    if judge_config is not None and judge_config.enabled:
        from . import judge as judge_mod

        scores = []
        aligns = []
        for (prompt, _), response in zip(prompts, responses):
            req = judge_mod.JudgeRequest(prompt=prompt, response=response)
            scores.append(judge_mod.score(req, judge_config).aggregate)
            aligns.append(judge_mod.prompt_alignment(req, judge_config))
        g_eval = float(np.mean(scores))
        alignment = float(np.mean(aligns))

    return EvalReport(
        perplexity=ppl,
        fluency=mean_f,
        coherence=mean_c,
        readability=mean_r,
        clarity=clarity(mean_f, mean_c, mean_r),
        size_bytes=size,
        compression_ratio=(compression_ratio(base_size_bytes, size)
                           if base_size_bytes else 1.0),
        g_eval=g_eval,
        prompt_alignment=alignment,
    )
