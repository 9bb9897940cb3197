"""Plain language-model training for the teacher and base student."""

from __future__ import annotations

import time

import numpy as np

from . import tensor as T
from .errors import ParameterError, PrecisionStateError
from .model import TransformerModel, language_model_loss
from .quant import Precision
from .reports import StageReport


def train_lm(model: TransformerModel, batches, steps: int, learning_rate: float,
             seed: int, log_every: int = 100, log=None) -> StageReport:
    """Next-token training with Adam; batch order reshuffles each epoch."""
    if model.precision is not Precision.FULL:
        raise PrecisionStateError("cannot train a quantized model")
    if steps < 0:
        raise ParameterError(f"steps must be non-negative, got {steps}")
    if not batches:
        raise ParameterError("training needs at least one batch")

    t0 = time.perf_counter()
    first_loss = None
    final_loss = None
    if steps > 0:
        opt = T.Adam(model.trainable_parameters(), lr=learning_rate)
        rng = np.random.default_rng(seed)
        order: list[int] = []
        for step in range(steps):
            if not order:
                order = list(rng.permutation(len(batches)))
            loss = language_model_loss(model, batches[order.pop(0)])
            loss.backward()
            opt.step()
            val = loss.item()
            final_loss = val
            if first_loss is None:
                first_loss = val
            if log is not None and (step + 1) % log_every == 0:
                log(f"step {step + 1}/{steps} loss {val:.4f}")
    return StageReport(
        stage="train",
        duration_seconds=time.perf_counter() - t0,
        details={"steps": steps, "first_loss": first_loss,
                 "final_loss": final_loss},
    )
