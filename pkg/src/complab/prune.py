"""Structured FFN pruning with blended weight/activation importance.

Each FFN neuron i owns column i of the gate and up projections and row
i of the down projection. Importance blends two per-layer-normalized
signals half and half: the L1 mass of the neuron's gate and up weights,
and the mean absolute post-gating activation silu(gate(x)) * up(x) over
calibration data (masked positions excluded). The lowest-scoring
floor(ratio * d_ff) neurons are removed; surviving weights are copied
bit-identically. An optional finetune pass follows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import SplitData
from .errors import OrderingConstraintError, ParameterError, ShapeError
from .model import FfnBlock, TransformerModel, language_model_loss
from .quant import Precision
from .reports import StageReport
from .tensor import Tensor

_PPL_BATCH_CAP = 12


@dataclass
class PruneConfig:
    ratio: float = 0.3
    calibration_batches: int = 8
    finetune_steps: int = 200
    learning_rate: float = 5e-4

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ParameterError(f"prune ratio must be in [0, 1), got {self.ratio}")
        if self.calibration_batches < 1:
            raise ParameterError(
                f"calibration_batches must be positive, got {self.calibration_batches}"
            )
        if self.finetune_steps < 0:
            raise ParameterError(
                f"finetune_steps must be non-negative, got {self.finetune_steps}"
            )
        if not self.learning_rate > 0:
            raise ParameterError(
                f"learning_rate must be positive, got {self.learning_rate}"
            )

    def to_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "calibration_batches": self.calibration_batches,
            "finetune_steps": self.finetune_steps,
            "learning_rate": self.learning_rate,
        }


def weight_importance(ffn: FfnBlock) -> np.ndarray:
    """Per-neuron L1 mass of gate and up columns -> (d_ff,) float64."""
    gate, up = ffn.gate.data, ffn.up.data
    return (np.abs(gate).sum(axis=0, dtype=np.float64)
            + np.abs(up).sum(axis=0, dtype=np.float64))


def activation_importance(model: TransformerModel, batches) -> list[np.ndarray]:
    """Mean |post-gating activation| per neuron over unmasked positions,
    one (d_ff,) array per layer."""
    if not batches:
        raise ParameterError("activation importance needs at least one batch")
    totals = [np.zeros(dff, dtype=np.float64) for dff in model.config.d_ff]
    count = 0.0
    for batch in batches:
        with T.no_grad():
            _, acts = model.forward(batch.input_ids, batch.attention_mask,
                                    collect_ffn=True)
        mask = batch.attention_mask.astype(np.float64)
        count += mask.sum()
        for i, act in enumerate(acts):
            totals[i] += (np.abs(act.data, dtype=np.float64)
                          * mask[..., None]).sum(axis=(0, 1))
    if count == 0:
        raise ParameterError("calibration batches have no unmasked positions")
    return [t / count for t in totals]


def combine_scores(weight: np.ndarray, activation: np.ndarray) -> np.ndarray:
    """Half-and-half blend after normalizing each signal by its own max.
    An all-zero signal normalizes to zeros instead of dividing by zero."""
    if weight.shape != activation.shape:
        raise ShapeError(
            f"importance shapes differ: weight {weight.shape}, "
            f"activation {activation.shape}"
        )

    def norm(x):
        m = x.max()
        return x / m if m > 0 else np.zeros_like(x)

    return 0.5 * norm(weight.astype(np.float64)) + 0.5 * norm(
        activation.astype(np.float64)
    )


def select_keep_indices(scores: np.ndarray, ratio: float) -> np.ndarray:
    """Indices that survive pruning the floor(ratio * d_ff) lowest scores,
    sorted ascending. Among tied scores the lower index survives."""
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"prune ratio must be in [0, 1), got {ratio}")
    d_ff = len(scores)
    n_prune = int(np.floor(ratio * d_ff))
    if n_prune == 0:
        return np.arange(d_ff)
    # ascending score; equal scores order by descending index so the
    # higher index is pruned first
    order = np.lexsort((-np.arange(d_ff), scores))
    pruned = set(order[:n_prune].tolist())
    return np.array([i for i in range(d_ff) if i not in pruned])


def prune_ffn(ffn: FfnBlock, keep: np.ndarray) -> FfnBlock:
    """New block keeping only the given neurons; weights copy bit-identically."""
    if len(keep) == 0:
        raise ParameterError("cannot prune every neuron in a layer")
    return FfnBlock(
        gate=Tensor(ffn.gate.data[:, keep].copy(), requires_grad=True),
        up=Tensor(ffn.up.data[:, keep].copy(), requires_grad=True),
        down=Tensor(ffn.down.data[keep, :].copy(), requires_grad=True),
    )


def _perplexity(model: TransformerModel, batches) -> float:
    # local NLL-based perplexity to keep this module import-light
    total, count = 0.0, 0.0
    for batch in batches[:_PPL_BATCH_CAP]:
        with T.no_grad():
            loss = language_model_loss(model, batch)
        n = float(batch.attention_mask.sum())
        total += loss.item() * n
        count += n
    return float(np.exp(total / count)) if count else float("nan")


def run_prune(model: TransformerModel, data: SplitData, cfg: PruneConfig,
              seed: int) -> StageReport:
    """Prune every layer's FFN in place, then optionally finetune."""
    if model.precision is not Precision.FULL:
        raise OrderingConstraintError(
            "pruning scores and rebuilds weights and requires full precision; "
            f"model is {model.precision.value}"
        )
    t0 = time.perf_counter()
    if cfg.ratio == 0.0:
        return StageReport(
            stage="P",
            duration_seconds=time.perf_counter() - t0,
            details={"ratio": 0.0, "no_op": True,
                     "per_layer_width": list(model.config.d_ff)},
        )

    cal = data.calibration[:cfg.calibration_batches]
    if not cal:
        raise ParameterError("pruning needs calibration batches")
    pre_ppl = _perplexity(model, data.heldout)

    widths_before = list(model.config.d_ff)
    act_scores = activation_importance(model, cal)
    kept_counts = []
    for i, layer in enumerate(model.layers):
        combined = combine_scores(weight_importance(layer.ffn), act_scores[i])
        keep = select_keep_indices(combined, cfg.ratio)
        layer.ffn = prune_ffn(layer.ffn, keep)
        model.config.d_ff[i] = len(keep)
        kept_counts.append(len(keep))
    model._dq_cache.clear()

    if cfg.finetune_steps > 0:
        if not data.finetune:
            raise ParameterError("finetuning needs finetune batches")
        opt = T.Adam(model.trainable_parameters(), lr=cfg.learning_rate)
        rng = np.random.default_rng(seed)
        order = []
        for _ in range(cfg.finetune_steps):
            if not order:
                order = list(rng.permutation(len(data.finetune)))
            batch = data.finetune[order.pop(0)]
            loss = language_model_loss(model, batch)
            loss.backward()
            opt.step()

    post_ppl = _perplexity(model, data.heldout)
    return StageReport(
        stage="P",
        duration_seconds=time.perf_counter() - t0,
        details={
            "ratio": cfg.ratio,
            "finetune_steps": cfg.finetune_steps,
            "per_layer_width_before": widths_before,
            "per_layer_kept": kept_counts,
            "pre_perplexity": pre_ppl,
            "post_perplexity": post_ppl,
        },
    )
