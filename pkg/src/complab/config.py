"""TOML configuration for the command-line workflow.

Sections: [corpus], [model.teacher], [model.student], [kd], [prune],
[quant], [pipeline], [eval], [judge]. Every field has a default, so an
empty file (or no file) is a valid config. Unknown sections or keys are
rejected rather than ignored: a typo that silently falls back to a
default wastes a training run. Judge credentials come from environment
variables only; the [judge] section holds behavior knobs.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .distill import DistillConfig
from .errors import ConfigError
from .evaluate import EvalConfig
from .model import ModelConfig
from .prune import PruneConfig


@dataclass
class CorpusSection:
    dir: str = "corpus"
    max_seq_len: int = 128
    batch_size: int = 16
    train_fraction: float = 0.70
    calibration_fraction: float = 0.05
    finetune_fraction: float = 0.15
    heldout_fraction: float = 0.10
    seed: int = 1234


@dataclass
class ModelSection:
    """Architecture plus its own training budget (used by cmd_train)."""

    n_layers: int = 2
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 256
    steps: int = 3600
    learning_rate: float = 1e-3
    log_every: int = 100


def _teacher_defaults() -> ModelSection:
    return ModelSection(n_layers=4, d_model=256, n_heads=4, d_ff=512,
                        steps=3600)


@dataclass
class KdSection:
    alpha: float = 0.3
    temperature: float = 4.0
    steps: int = 300
    learning_rate: float = 3e-4


@dataclass
class PruneSection:
    ratio: float = 0.3
    calibration_batches: int = 8
    finetune_steps: int = 200
    learning_rate: float = 5e-4


@dataclass
class QuantSection:
    block_size: int = 64


@dataclass
class PipelineSection:
    master_seed: int = 20240901
    out_dir: str = "runs"


@dataclass
class EvalSection:
    max_eval_batches: int = 24
    max_new_tokens: int = 64
    prompts: str = "prompts.txt"


@dataclass
class JudgeSection:
    # endpoint and key stay in JUDGE_ENDPOINT / JUDGE_API_KEY
    stub: bool = False
    timeout: float = 10.0
    max_retries: int = 3
    backoff_seconds: float = 0.25


@dataclass
class AppConfig:
    corpus: CorpusSection = field(default_factory=CorpusSection)
    teacher: ModelSection = field(default_factory=_teacher_defaults)
    student: ModelSection = field(default_factory=ModelSection)
    kd: KdSection = field(default_factory=KdSection)
    prune: PruneSection = field(default_factory=PruneSection)
    quant: QuantSection = field(default_factory=QuantSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    eval: EvalSection = field(default_factory=EvalSection)
    judge: JudgeSection = field(default_factory=JudgeSection)

    def teacher_config(self, vocab_size: int = 259,
                       max_seq_len: int | None = None) -> ModelConfig:
        return _model_config(self.teacher, vocab_size,
                             max_seq_len or self.corpus.max_seq_len)

    def student_config(self, vocab_size: int = 259,
                       max_seq_len: int | None = None) -> ModelConfig:
        return _model_config(self.student, vocab_size,
                             max_seq_len or self.corpus.max_seq_len)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(alpha=self.kd.alpha,
                             temperature=self.kd.temperature,
                             steps=self.kd.steps,
                             learning_rate=self.kd.learning_rate)

    def prune_config(self) -> PruneConfig:
        return PruneConfig(ratio=self.prune.ratio,
                           calibration_batches=self.prune.calibration_batches,
                           finetune_steps=self.prune.finetune_steps,
                           learning_rate=self.prune.learning_rate)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(max_eval_batches=self.eval.max_eval_batches,
                          max_new_tokens=self.eval.max_new_tokens)


def _model_config(section: ModelSection, vocab_size: int,
                  max_seq_len: int) -> ModelConfig:
    return ModelConfig(n_layers=section.n_layers, d_model=section.d_model,
                       n_heads=section.n_heads, d_ff=section.d_ff,
                       vocab_size=vocab_size, max_seq_len=max_seq_len)


_SECTIONS = {
    "corpus": CorpusSection,
    "kd": KdSection,
    "prune": PruneSection,
    "quant": QuantSection,
    "pipeline": PipelineSection,
    "eval": EvalSection,
    "judge": JudgeSection,
}

_MODEL_SUBSECTIONS = ("teacher", "student")


def _fill(cls, table: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    for key, value in table.items():
        if isinstance(value, dict):
            raise ConfigError(f"[{section}] {key} must be a value, not a table")
    try:
        return cls(**table)
    except TypeError as exc:
        raise ConfigError(f"bad value in [{section}]: {exc}") from exc


def parse_config(text: str) -> AppConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    unknown = sorted(set(raw) - set(_SECTIONS) - {"model"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    cfg = AppConfig()
    for name, table in raw.items():
        if not isinstance(table, dict):
            raise ConfigError(f"top-level key {name!r} must be a [{name}] table")
        if name == "model":
            bad = sorted(set(table) - set(_MODEL_SUBSECTIONS))
            if bad:
                raise ConfigError(
                    f"unknown model section(s): {', '.join(bad)}; "
                    f"expected [model.teacher] or [model.student]")
            for sub, subtable in table.items():
                if not isinstance(subtable, dict):
                    raise ConfigError(f"[model] {sub} must be a table")
                base = (_teacher_defaults() if sub == "teacher"
                        else ModelSection())
                merged = {**dataclasses.asdict(base), **subtable}
                setattr(cfg, sub, _fill(ModelSection, merged, f"model.{sub}"))
        else:
            setattr(cfg, name, _fill(_SECTIONS[name], table, name))
    return cfg


def load_config(path=None) -> AppConfig:
    """Load a TOML config file; None means all defaults."""
    if path is None:
        return AppConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))
