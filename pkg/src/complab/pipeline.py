"""Compression pipelines: sequence grammar, expansion, validation, execution.

A sequence names an ordering of the three techniques, "KD", "P", "Q",
as a dash-joined string: either a single technique or a permutation of
all three. Expansion turns the name into executable stages under two
rules. First, a 4-bit model cannot be trained or restructured, so any
KD or P that follows a quantization gets an implicit dequantization "D"
in front of it. Second, a three-technique pipeline must deliver a
4-bit artifact, so a final re-quantization is appended unless the
sequence already ends in Q. "Q-P-KD" therefore runs Q-D-P-KD-Q.

Each stage draws its own seed from the run's master seed, and every
run writes a manifest that records enough to reproduce it bit for bit.
Wall-clock timings go to a separate sidecar so manifests from repeat
runs stay byte-identical.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import model_hash, serialize
from .distill import DistillConfig, run_kd
from .errors import (
    ParameterError,
    PipelineValidationError,
    PrecisionStateError,
    SequenceParseError,
)
from .evaluate import EvalConfig, EvalReport, evaluate
from .prune import PruneConfig, run_prune
from .quant import (
    DEFAULT_BLOCK_SIZE,
    Precision,
    dequantize_model,
    quantize_model,
    storage_size,
)
from .reports import StageReport

TECHNIQUES = ("KD", "P", "Q")
SINGLE_SEQUENCES = ["KD", "P", "Q"]
THREE_TECHNIQUE_SEQUENCES = [
    "KD-P-Q", "KD-Q-P", "P-KD-Q", "P-Q-KD", "Q-KD-P", "Q-P-KD",
]
ALL_SEQUENCES = SINGLE_SEQUENCES + THREE_TECHNIQUE_SEQUENCES


def parse_sequence(name: str) -> list[str]:
    """Split a sequence name into technique tokens and check the grammar."""
    if not isinstance(name, str) or not name:
        raise SequenceParseError(f"sequence must be a non-empty string, got {name!r}")
    tokens = name.split("-")
    for tok in tokens:
        if tok not in TECHNIQUES:
            raise SequenceParseError(
                f"unknown technique {tok!r} in {name!r}; valid tokens are "
                f"{', '.join(TECHNIQUES)}"
            )
    if len(set(tokens)) != len(tokens):
        raise SequenceParseError(f"sequence {name!r} repeats a technique")
    if len(tokens) not in (1, 3):
        raise SequenceParseError(
            f"sequence {name!r} must use one technique or all three"
        )
    return tokens


def expand(name: str) -> list[str]:
    """Executable stage list for a sequence name; see the module note."""
    tokens = parse_sequence(name)
    stages: list[str] = []
    quantized = False
    for tok in tokens:
        if tok == "Q":
            stages.append("Q")
            quantized = True
        else:
            if quantized:
                stages.append("D")
                quantized = False
            stages.append(tok)
    if len(tokens) == 3 and stages[-1] != "Q":
        stages.append("Q")
    return stages


def render(stages: list[str]) -> str:
    return "-".join(stages)


def validate(stages: list[str]) -> list[str]:
    """All rule violations in an expanded stage list (empty means valid):
    training or restructuring while 4-bit, dequantizing a full-precision
    model, double quantization, and a three-technique pipeline that does
    not deliver a 4-bit artifact."""
    violations = []
    known = {"KD", "P", "Q", "D"}
    for i, st in enumerate(stages):
        if st not in known:
            violations.append(f"stage {i}: unknown stage {st!r}")
    quantized = False
    for i, st in enumerate(stages):
        if st == "KD" and quantized:
            violations.append(
                f"stage {i}: KD trains the student but the model is 4-bit"
            )
        elif st == "P" and quantized:
            violations.append(
                f"stage {i}: P scores and rebuilds weights but the model is 4-bit"
            )
        elif st == "Q":
            if quantized:
                violations.append(f"stage {i}: Q on an already 4-bit model")
            quantized = True
        elif st == "D":
            if not quantized:
                violations.append(f"stage {i}: D on a full-precision model")
            quantized = False
    used = {s for s in stages if s in TECHNIQUES}
    if len(used) == 3 and stages and stages[-1] != "Q":
        violations.append(
            "a three-technique pipeline must end quantized; final stage is "
            f"{stages[-1]!r}"
        )
    return violations


@dataclass
class PipelineSpec:
    name: str
    stages: list[str]
    kd: DistillConfig = field(default_factory=DistillConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    quant_block_size: int = DEFAULT_BLOCK_SIZE

    @classmethod
    def from_name(cls, name: str, kd: DistillConfig = None,
                  prune: PruneConfig = None,
                  quant_block_size: int = DEFAULT_BLOCK_SIZE) -> "PipelineSpec":
        return cls(
            name=name,
            stages=expand(name),
            kd=kd or DistillConfig(),
            prune=prune or PruneConfig(),
            quant_block_size=quant_block_size,
        )


def stage_seed(master_seed: int, stage_index: int) -> int:
    """Per-stage seed fanned out from the master seed; recorded in the
    manifest so any stage can be replayed in isolation."""
    ss = np.random.SeedSequence([int(master_seed), int(stage_index)])
    return int(ss.generate_state(1)[0])


@dataclass
class RunManifest:
    sequence: str
    stages: list[str]
    master_seed: int
    stage_seeds: list[int]
    base_model_hash: str
    final_model_hash: str
    configs: dict
    stage_reports: list[dict]
    eval: dict

    def to_json(self) -> str:
        payload = {
            "sequence": self.sequence,
            "stages": self.stages,
            "master_seed": self.master_seed,
            "stage_seeds": self.stage_seeds,
            "base_model_hash": self.base_model_hash,
            "final_model_hash": self.final_model_hash,
            "configs": self.configs,
            "stage_reports": self.stage_reports,
            "eval": self.eval,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        d = json.loads(text)
        return cls(
            sequence=d["sequence"],
            stages=d["stages"],
            master_seed=d["master_seed"],
            stage_seeds=d["stage_seeds"],
            base_model_hash=d["base_model_hash"],
            final_model_hash=d["final_model_hash"],
            configs=d["configs"],
            stage_reports=d["stage_reports"],
            eval=d["eval"],
        )

    @property
    def eval_report(self) -> EvalReport:
        return EvalReport.from_dict(self.eval)


def execute(spec: PipelineSpec, base_model, teacher, data, prompts, tokenizer,
            master_seed: int, judge_config=None,
            eval_cfg: EvalConfig = None):
    """Run every stage of the spec on a copy of the base model, then
    evaluate. Returns (final_model, manifest, timings_dict)."""
    violations = validate(spec.stages)
    if violations:
        raise PipelineValidationError(violations)
    if base_model.precision is not Precision.FULL:
        raise PrecisionStateError("pipelines start from a full-precision base model")
    if "KD" in spec.stages and teacher is None:
        raise ParameterError(f"sequence {spec.name} distills and needs a teacher")

    work = base_model.copy()
    base_size = storage_size(base_model)
    seeds = [stage_seed(master_seed, i) for i in range(len(spec.stages))]
    reports: list[StageReport] = []
    t_start = time.perf_counter()
    for i, st in enumerate(spec.stages):
        if st == "KD":
            reports.append(run_kd(teacher, work, data.train, spec.kd, seeds[i]))
        elif st == "P":
            reports.append(run_prune(work, data, spec.prune, seeds[i]))
        elif st == "Q":
            reports.append(quantize_model(work, spec.quant_block_size))
        else:
            reports.append(dequantize_model(work))

    t_eval = time.perf_counter()
    eval_report = evaluate(
        work, data, prompts, tokenizer,
        reference_model=teacher,
        base_size_bytes=base_size,
        judge_config=judge_config,
        cfg=eval_cfg,
    )
    t_end = time.perf_counter()

    manifest = RunManifest(
        sequence=spec.name,
        stages=list(spec.stages),
        master_seed=int(master_seed),
        stage_seeds=seeds,
        base_model_hash=model_hash(base_model),
        final_model_hash=model_hash(work),
        configs={
            "kd": spec.kd.to_dict(),
            "prune": spec.prune.to_dict(),
            "quant": {"block_size": spec.quant_block_size},
        },
        stage_reports=[r.to_dict() for r in reports],
        eval=eval_report.to_dict(),
    )
    timings = {
        "stages": [
            {"stage": r.stage, "seconds": r.duration_seconds} for r in reports
        ],
        "eval_seconds": t_end - t_eval,
        "total_seconds": t_end - t_start,
    }
    return work, manifest, timings


def write_run(out_dir, name: str, model, manifest: RunManifest,
              timings: Optional[dict] = None) -> dict:
    """Persist a finished run: <name>.ckpt, <name>.manifest.json, and a
    <name>.timing.json sidecar. Returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{name}.ckpt"
    man = out / f"{name}.manifest.json"
    serialize(model, ckpt)
    man.write_text(manifest.to_json(), encoding="utf-8")
    paths = {"checkpoint": ckpt, "manifest": man}
    if timings is not None:
        timing = out / f"{name}.timing.json"
        timing.write_text(json.dumps(timings, indent=2) + "\n", encoding="utf-8")
        paths["timing"] = timing
    return paths
