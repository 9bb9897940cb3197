"""Compression-ordering laboratory for toy language models.

The package studies how the order of three compression techniques --
knowledge distillation (KD), structured feed-forward pruning (P), and
4-bit blockwise quantization (Q) -- changes the quality of a small
byte-level transformer. Pipelines are named by their ordering
("KD-P-Q", "Q-P-KD", ...), expanded into explicit stage lists with
dequantization inserted where training follows quantization, executed
deterministically from a master seed, and scored with a fixed metric
suite plus an optional external judge.
"""

from .checkpoint import deserialize, model_hash, serialize
from .corpus import (IGNORE_INDEX, Batch, ByteTokenizer, SplitData,
                     load_corpus, load_corpus_dir, make_batches, prepare_data)
from .distill import DistillConfig, distill_loss, run_kd
from .errors import (CheckpointFormatError, CompressionLabError, ConfigError,
                     InputError, NumericError, OrderingConstraintError,
                     ParameterError, PipelineValidationError,
                     PrecisionStateError, ProtocolError, SequenceParseError,
                     ShapeError, TransportError, UsageError)
from .evaluate import (EvalConfig, EvalReport, clarity, coherence,
                       compression_ratio, evaluate, fluency_from_perplexity,
                       generate, load_prompts, perplexity, readability)
from .judge import JudgeConfig, JudgeRequest, JudgeScore, score, score_many
from .model import ModelConfig, TransformerModel, init_model
from .pipeline import (ALL_SEQUENCES, SINGLE_SEQUENCES,
                       THREE_TECHNIQUE_SEQUENCES, PipelineSpec, RunManifest,
                       execute, expand, parse_sequence, render, stage_seed,
                       validate, write_run)
from .prune import PruneConfig, run_prune
from .quant import (NF4_LEVELS, Precision, QuantizedTensor, dequantize_model,
                    quantize_model, quantization_error_bound)
from .tensor import Adam, Tensor, no_grad
from .train import train_lm

__version__ = "0.1.0"

__all__ = [
    "ALL_SEQUENCES",
    "Adam",
    "Batch",
    "ByteTokenizer",
    "CheckpointFormatError",
    "CompressionLabError",
    "ConfigError",
    "DistillConfig",
    "EvalConfig",
    "EvalReport",
    "IGNORE_INDEX",
    "InputError",
    "JudgeConfig",
    "JudgeRequest",
    "JudgeScore",
    "ModelConfig",
    "NF4_LEVELS",
    "NumericError",
    "OrderingConstraintError",
    "ParameterError",
    "PipelineSpec",
    "PipelineValidationError",
    "Precision",
    "PrecisionStateError",
    "ProtocolError",
    "PruneConfig",
    "QuantizedTensor",
    "RunManifest",
    "SINGLE_SEQUENCES",
    "SequenceParseError",
    "ShapeError",
    "SplitData",
    "THREE_TECHNIQUE_SEQUENCES",
    "Tensor",
    "TransformerModel",
    "TransportError",
    "UsageError",
    "clarity",
    "coherence",
    "compression_ratio",
    "deserialize",
    "dequantize_model",
    "distill_loss",
    "evaluate",
    "execute",
    "expand",
    "fluency_from_perplexity",
    "generate",
    "init_model",
    "load_corpus",
    "load_corpus_dir",
    "load_prompts",
    "make_batches",
    "model_hash",
    "no_grad",
    "parse_sequence",
    "perplexity",
    "prepare_data",
    "quantization_error_bound",
    "quantize_model",
    "readability",
    "render",
    "run_kd",
    "run_prune",
    "score",
    "score_many",
    "serialize",
    "stage_seed",
    "train_lm",
    "validate",
    "write_run",
    "__version__",
]
