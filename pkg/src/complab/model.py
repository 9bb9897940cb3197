"""Decoder-only toy transformer with RMSNorm pre-norm blocks and a
SiLU-gated feed-forward network.

Parameters live in named slots so stages can swap them wholesale: each
slot holds either a trainable Tensor (full precision) or a
QuantizedTensor (4-bit). Quantized models run inference by dequantizing
each slot on the fly; the reconstructions are cached per parameter
object, and any parameter swap invalidates the cache.

Attention is causal only. Padding sits at the tail of every row, after
the causal horizon of all real positions, so masked positions are
excluded from losses and statistics rather than from attention math.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, ParameterError
from .quant import Precision, QuantizedTensor
from .tensor import Tensor

Param = Union[Tensor, QuantizedTensor]


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    d_ff: object  # int, or per-layer list once pruning narrows layers
    max_seq_len: int

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if isinstance(self.d_ff, int):
            self.d_ff = [self.d_ff] * self.n_layers
        else:
            self.d_ff = [int(x) for x in self.d_ff]
        if len(self.d_ff) != self.n_layers:
            raise ConfigError(
                f"d_ff has {len(self.d_ff)} entries for {self.n_layers} layers"
            )
        if any(x < 1 for x in self.d_ff):
            raise ConfigError(f"d_ff entries must be positive, got {self.d_ff}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": list(self.d_ff),
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(
                vocab_size=d["vocab_size"],
                d_model=d["d_model"],
                n_layers=d["n_layers"],
                n_heads=d["n_heads"],
                d_ff=d["d_ff"],
                max_seq_len=d["max_seq_len"],
            )
        except KeyError as e:
            raise ConfigError(f"model config missing field {e.args[0]!r}") from None

    def copy(self) -> "ModelConfig":
        return ModelConfig.from_dict(self.to_dict())


@dataclass
class FfnBlock:
    """gate/up (d_model, d_ff), down (d_ff, d_model)."""

    gate: Param
    up: Param
    down: Param


@dataclass
class TransformerLayer:
    attn_norm: Param
    wq: Param
    wk: Param
    wv: Param
    wo: Param
    ffn_norm: Param
    ffn: FfnBlock


class TransformerModel:
    def __init__(self, config: ModelConfig, params: dict[str, Param]):
        self.config = config
        self.precision = Precision.FULL
        self.quant_block_size = None
        self.token_embedding = params["token_embedding"]
        self.position_embedding = params["position_embedding"]
        self.layers: list[TransformerLayer] = []
        for i in range(config.n_layers):
            p = f"layers.{i}."
            self.layers.append(TransformerLayer(
                attn_norm=params[p + "attn_norm"],
                wq=params[p + "wq"],
                wk=params[p + "wk"],
                wv=params[p + "wv"],
                wo=params[p + "wo"],
                ffn_norm=params[p + "ffn_norm"],
                ffn=FfnBlock(
                    gate=params[p + "ffn.gate"],
                    up=params[p + "ffn.up"],
                    down=params[p + "ffn.down"],
                ),
            ))
        self.final_norm = params["final_norm"]
        self.lm_head = params["lm_head"]
        self._dq_cache: dict[str, tuple[int, Tensor]] = {}

    # -- parameter plumbing -------------------------------------------------

    def _slot_refs(self):
        """(name, owner, attribute) triples in canonical serialization order."""
        refs = [
            ("token_embedding", self, "token_embedding"),
            ("position_embedding", self, "position_embedding"),
        ]
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}."
            refs += [
                (p + "attn_norm", layer, "attn_norm"),
                (p + "wq", layer, "wq"),
                (p + "wk", layer, "wk"),
                (p + "wv", layer, "wv"),
                (p + "wo", layer, "wo"),
                (p + "ffn_norm", layer, "ffn_norm"),
                (p + "ffn.gate", layer.ffn, "gate"),
                (p + "ffn.up", layer.ffn, "up"),
                (p + "ffn.down", layer.ffn, "down"),
            ]
        refs += [("final_norm", self, "final_norm"), ("lm_head", self, "lm_head")]
        return refs

    def named_parameters(self) -> list[tuple[str, Param]]:
        return [(name, getattr(owner, attr)) for name, owner, attr in self._slot_refs()]

    def map_parameters(self, fn):
        """Replace every parameter with fn(name, param); clears the
        dequantization cache."""
        for name, owner, attr in self._slot_refs():
            setattr(owner, attr, fn(name, getattr(owner, attr)))
        self._dq_cache.clear()

    def trainable_parameters(self) -> list[Tensor]:
        out = []
        for _, p in self.named_parameters():
            if isinstance(p, Tensor) and p.requires_grad:
                out.append(p)
        return out

    def parameter_count(self) -> int:
        """Logical element count, independent of storage precision."""
        total = 0
        for _, p in self.named_parameters():
            total += p.element_count if isinstance(p, QuantizedTensor) else p.size
        return total

    def copy(self) -> "TransformerModel":
        params = {}
        for name, p in self.named_parameters():
            if isinstance(p, QuantizedTensor):
                params[name] = p.copy()
            else:
                params[name] = Tensor(p.data.copy(), requires_grad=p.requires_grad)
        dup = TransformerModel(self.config.copy(), params)
        dup.precision = self.precision
        dup.quant_block_size = self.quant_block_size
        return dup

    def _weight(self, name: str, p: Param) -> Tensor:
        if isinstance(p, Tensor):
            return p
        hit = self._dq_cache.get(name)
        if hit is not None and hit[0] == id(p):
            return hit[1]
        t = Tensor(p.dequantize())
        self._dq_cache[name] = (id(p), t)
        return t

    # -- forward ------------------------------------------------------------

    def forward(self, tokens: np.ndarray, attention_mask=None,
                collect_ffn: bool = False):
        """tokens (B, L) ints -> logits (B, L, vocab). attention_mask is
        accepted for interface symmetry and validated, but attention stays
        causal; the mask gates losses elsewhere. With collect_ffn=True also
        returns each layer's post-gating FFN activation (B, L, d_ff)."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise InputError(f"tokens must be 2-D (batch, length), got {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise InputError(f"tokens must be integers, got dtype {tokens.dtype}")
        b, length = tokens.shape
        if length > self.config.max_seq_len:
            raise InputError(
                f"sequence length {length} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise InputError(
                f"token ids out of range [0, {self.config.vocab_size}): "
                f"min={tokens.min()}, max={tokens.max()}"
            )
        if attention_mask is not None and np.asarray(attention_mask).shape != tokens.shape:
            raise InputError(
                f"attention_mask shape {np.asarray(attention_mask).shape} "
                f"does not match tokens {tokens.shape}"
            )

        w = self._weight
        cfg = self.config
        x = T.add(
            T.embedding(w("token_embedding", self.token_embedding), tokens),
            T.narrow(w("position_embedding", self.position_embedding), 0, 0, length),
        )
        mask = Tensor(_causal_mask(length))
        inv_sqrt = 1.0 / math.sqrt(cfg.head_dim)
        ffn_acts = []
        for i, layer in enumerate(self.layers):
            p = f"layers.{i}."
            h = T.rms_norm(x, w(p + "attn_norm", layer.attn_norm))
            q = _heads(T.matmul(h, w(p + "wq", layer.wq)), cfg.n_heads)
            k = _heads(T.matmul(h, w(p + "wk", layer.wk)), cfg.n_heads)
            v = _heads(T.matmul(h, w(p + "wv", layer.wv)), cfg.n_heads)
            scores = T.add(T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), inv_sqrt), mask)
            ctx = T.matmul(T.softmax(scores), v)  # (B, H, L, hd)
            merged = T.reshape(T.swapaxes(ctx, 1, 2), (b, length, cfg.d_model))
            x = T.add(x, T.matmul(merged, w(p + "wo", layer.wo)))

            h2 = T.rms_norm(x, w(p + "ffn_norm", layer.ffn_norm))
            gated = T.mul(
                T.silu(T.matmul(h2, w(p + "ffn.gate", layer.ffn.gate))),
                T.matmul(h2, w(p + "ffn.up", layer.ffn.up)),
            )
            if collect_ffn:
                ffn_acts.append(gated)
            x = T.add(x, T.matmul(gated, w(p + "ffn.down", layer.ffn.down)))

        x = T.rms_norm(x, w("final_norm", self.final_norm))
        logits = T.matmul(x, w("lm_head", self.lm_head))
        return (logits, ffn_acts) if collect_ffn else logits


def _heads(x: Tensor, n_heads: int) -> Tensor:
    b, length, d = x.shape
    return T.swapaxes(T.reshape(x, (b, length, n_heads, d // n_heads)), 1, 2)


@functools.lru_cache(maxsize=8)
def _causal_mask(length: int) -> np.ndarray:
    m = np.triu(np.full((length, length), -1e9, dtype=np.float32), k=1)
    m.flags.writeable = False
    return m


def init_model(config: ModelConfig, seed: int) -> TransformerModel:
    """Fresh full-precision model. Weights draw from normal(0, 0.02) in
    canonical parameter order, norms start at one; bit-identical per seed."""
    rng = np.random.default_rng(seed)
    d, v = config.d_model, config.vocab_size

    def normal(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape).astype(np.float32),
                      requires_grad=True)

    def ones(n):
        return Tensor(np.ones(n, dtype=np.float32), requires_grad=True)

    params: dict[str, Param] = {
        "token_embedding": normal(v, d),
        "position_embedding": normal(config.max_seq_len, d),
    }
    for i in range(config.n_layers):
        p = f"layers.{i}."
        dff = config.d_ff[i]
        params[p + "attn_norm"] = ones(d)
        params[p + "wq"] = normal(d, d)
        params[p + "wk"] = normal(d, d)
        params[p + "wv"] = normal(d, d)
        params[p + "wo"] = normal(d, d)
        params[p + "ffn_norm"] = ones(d)
        params[p + "ffn.gate"] = normal(d, dff)
        params[p + "ffn.up"] = normal(d, dff)
        params[p + "ffn.down"] = normal(dff, d)
    params["final_norm"] = ones(d)
    params["lm_head"] = normal(d, v)
    return TransformerModel(config, params)


def expected_parameter_count(config: ModelConfig) -> int:
    """Closed-form element count for a model of this shape."""
    d, v = config.d_model, config.vocab_size
    total = v * d + config.max_seq_len * d  # embeddings
    for dff in config.d_ff:
        total += 2 * d  # two norm gains
        total += 4 * d * d  # wq, wk, wv, wo
        total += 3 * d * dff  # gate, up, down
    total += d  # final norm
    total += d * v  # untied head
    return total


def language_model_loss(model: TransformerModel, batch) -> Tensor:
    """Mean next-token cross-entropy over unmasked positions."""
    mask = batch.attention_mask.astype(np.float32)
    denom = float(mask.sum())
    if denom == 0:
        raise ParameterError("batch has no unmasked positions to score")
    logits = model.forward(batch.input_ids, batch.attention_mask)
    logp = T.log_softmax(logits)
    safe_labels = np.where(batch.labels < 0, 0, batch.labels)
    if safe_labels.max() >= model.config.vocab_size:
        raise InputError(
            f"label id {safe_labels.max()} outside vocab {model.config.vocab_size}"
        )
    picked = T.gather_last(logp, safe_labels)
    return T.scale(T.tsum(T.mul(picked, Tensor(mask))), -1.0 / denom)
