"""Knowledge distillation: blended task and softened-teacher KL loss.

The loss is (1 - alpha) * task + alpha * distill. The task term is the
usual next-token cross-entropy. The distill term softens both logit
sets by a temperature, takes KL(teacher || student) per position, and
multiplies by temperature**2 so its gradient scale stays comparable
across temperatures. Positions with a zero attention mask contribute to
neither term. Teacher logits never receive gradient.

Teacher and student may have different vocabulary sizes; the KL term is
computed on the first min(Vs, Vt) logits of each (both softmaxes taken
after truncation). The task term always uses the student's full vocab.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import Batch
from .errors import (
    InputError,
    OrderingConstraintError,
    ParameterError,
    ShapeError,
)
from .quant import Precision
from .reports import StageReport
from .tensor import Tensor


@dataclass
class DistillConfig:
    alpha: float = 0.3
    temperature: float = 4.0
    steps: int = 300
    learning_rate: float = 3e-4

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must be in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ParameterError(
                f"temperature must be positive, got {self.temperature}"
            )
        if self.steps < 0:
            raise ParameterError(f"steps must be non-negative, got {self.steps}")
        if not self.learning_rate > 0:
            raise ParameterError(
                f"learning_rate must be positive, got {self.learning_rate}"
            )

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "temperature": self.temperature,
            "steps": self.steps,
            "learning_rate": self.learning_rate,
        }


def soften(logits: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature-scaled softmax over the last axis, in numpy."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = logits.astype(np.float32) / np.float32(temperature)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _task_term(student_logits: Tensor, labels: np.ndarray,
               mask: np.ndarray, denom: float) -> Tensor:
    vocab = student_logits.shape[-1]
    safe = np.where(labels < 0, 0, labels)
    if safe.size and safe.max() >= vocab:
        raise InputError(f"label id {safe.max()} outside student vocab {vocab}")
    logp = T.log_softmax(student_logits)
    picked = T.gather_last(logp, safe)
    return T.scale(T.tsum(T.mul(picked, Tensor(mask))), -1.0 / denom)


def _distill_term(student_logits: Tensor, teacher_logits: np.ndarray,
                  mask: np.ndarray, temperature: float, denom: float) -> Tensor:
    v_common = min(student_logits.shape[-1], teacher_logits.shape[-1])
    s_logp = T.log_softmax(
        T.narrow(student_logits, student_logits.ndim - 1, 0, v_common), temperature
    )
    t_probs = soften(teacher_logits[..., :v_common], temperature)
    # KL(p_t || p_s) = sum p log p - sum p log q; the entropy half is a
    # constant but keeps the loss value an honest KL
    plogp = np.where(t_probs > 0, t_probs * np.log(t_probs), 0.0)
    entropy_part = float((plogp.sum(axis=-1) * mask).sum())
    cross = T.tsum(T.mul(s_logp, Tensor(t_probs * mask[..., None])))
    kl_mean = T.scale(
        T.add(Tensor(np.float32(entropy_part)), T.scale(cross, -1.0)), 1.0 / denom
    )
    return T.scale(kl_mean, float(temperature) ** 2)


def distill_loss(student_logits: Tensor, teacher_logits, labels: np.ndarray,
                 mask: np.ndarray, cfg: DistillConfig) -> Tensor:
    """Blended loss as a scalar tensor on the student's graph."""
    if isinstance(teacher_logits, Tensor):
        teacher_logits = teacher_logits.data  # teacher side carries no grad
    teacher_logits = np.asarray(teacher_logits, dtype=np.float32)
    if student_logits.shape[:-1] != teacher_logits.shape[:-1]:
        raise ShapeError(
            f"student {student_logits.shape} and teacher {teacher_logits.shape} "
            f"disagree on batch/sequence dims"
        )
    mask = np.asarray(mask).astype(np.float32)
    if mask.shape != student_logits.shape[:-1]:
        raise ShapeError(
            f"mask {mask.shape} does not match logits {student_logits.shape}"
        )
    denom = float(mask.sum())
    if denom == 0:
        raise ParameterError("all positions are masked; nothing to distill")

    if cfg.alpha == 0.0:
        return _task_term(student_logits, labels, mask, denom)
    distill = _distill_term(student_logits, teacher_logits, mask,
                            cfg.temperature, denom)
    if cfg.alpha == 1.0:
        return distill
    task = _task_term(student_logits, labels, mask, denom)
    return T.add(T.scale(task, 1.0 - cfg.alpha), T.scale(distill, cfg.alpha))


def run_kd(teacher, student, batches: list[Batch], cfg: DistillConfig,
           seed: int) -> StageReport:
    """Train the student against the teacher for cfg.steps batches.
    Batch order reshuffles every epoch from the given seed. The teacher
    is read-only; with steps=0 the student is untouched."""
    if student.precision is not Precision.FULL:
        raise OrderingConstraintError(
            "distillation trains the student and requires full precision; "
            f"student is {student.precision.value}"
        )
    if not batches:
        raise ParameterError("distillation needs at least one batch")

    t0 = time.perf_counter()
    first_loss = None
    final_loss = None
    if cfg.steps > 0:
        opt = T.Adam(student.trainable_parameters(), lr=cfg.learning_rate)
        rng = np.random.default_rng(seed)
        order = []
        for step in range(cfg.steps):
            if not order:
                order = list(rng.permutation(len(batches)))
            batch = batches[order.pop(0)]
            with T.no_grad():
                t_logits = teacher.forward(batch.input_ids, batch.attention_mask)
            s_logits = student.forward(batch.input_ids, batch.attention_mask)
            loss = distill_loss(s_logits, t_logits, batch.labels,
                                batch.attention_mask, cfg)
            loss.backward()
            opt.step()
            val = loss.item()
            final_loss = val
            if first_loss is None:
                first_loss = val
    return StageReport(
        stage="KD",
        duration_seconds=time.perf_counter() - t0,
        details={
            "steps": cfg.steps,
            "alpha": cfg.alpha,
            "temperature": cfg.temperature,
            "learning_rate": cfg.learning_rate,
            "first_loss": first_loss,
            "final_loss": final_loss,
        },
    )
