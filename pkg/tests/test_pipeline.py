import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from complab.corpus import ByteTokenizer, SplitData, make_batches
from complab.distill import DistillConfig
from complab.errors import (
    ParameterError,
    PipelineValidationError,
    SequenceParseError,
)
from complab.model import ModelConfig, init_model
from complab.pipeline import (
    ALL_SEQUENCES,
    THREE_TECHNIQUE_SEQUENCES,
    PipelineSpec,
    RunManifest,
    execute,
    expand,
    render,
    stage_seed,
    validate,
    write_run,
)
from complab.prune import PruneConfig
from complab.quant import Precision


class TestExpansion:
    # every sequence's executable form, written out by hand
    TABLE = {
        "KD": ["KD"],
        "P": ["P"],
        "Q": ["Q"],
        "KD-P-Q": ["KD", "P", "Q"],
        "P-KD-Q": ["P", "KD", "Q"],
        "KD-Q-P": ["KD", "Q", "D", "P", "Q"],
        "P-Q-KD": ["P", "Q", "D", "KD", "Q"],
        "Q-KD-P": ["Q", "D", "KD", "P", "Q"],
        "Q-P-KD": ["Q", "D", "P", "KD", "Q"],
    }

    @pytest.mark.parametrize("name,stages", sorted(TABLE.items()))
    def test_expansion_table(self, name, stages):
        assert expand(name) == stages

    def test_all_expansions_validate_clean(self):
        for name in ALL_SEQUENCES:
            assert validate(expand(name)) == []

    def test_three_technique_pipelines_end_quantized(self):
        for name in THREE_TECHNIQUE_SEQUENCES:
            assert expand(name)[-1] == "Q"

    @given(st.permutations(["KD", "P", "Q"]))
    @settings(max_examples=10, deadline=None)
    def test_dequantize_precedes_training_after_q(self, perm):
        stages = expand("-".join(perm))
        quantized = False
        for s in stages:
            if s == "Q":
                quantized = True
            elif s == "D":
                quantized = False
            else:
                assert not quantized, stages

    def test_render_round_trip(self):
        assert render(["Q", "D", "P", "KD", "Q"]) == "Q-D-P-KD-Q"


class TestParsing:
    @pytest.mark.parametrize("bad", [
        "", "KD-KD-Q", "X-P-Q", "KD-P", "kd-p-q", "D", "KD-P-Q-KD",
    ])
    def test_rejects_bad_sequences(self, bad):
        with pytest.raises(SequenceParseError):
            expand(bad)

    def test_error_names_valid_tokens(self):
        with pytest.raises(SequenceParseError, match="KD, P, Q"):
            expand("Z")


class TestValidation:
    def test_kd_under_quantization_flagged(self):
        violations = validate(["Q", "KD"])
        assert any("KD" in v and "4-bit" in v for v in violations)

    def test_prune_under_quantization_flagged(self):
        assert any("P" in v for v in validate(["Q", "P"]))

    def test_dequantize_without_quantize_flagged(self):
        assert validate(["D"]) != []

    def test_double_quantization_flagged(self):
        assert any("already" in v for v in validate(["Q", "Q"]))

    def test_three_technique_not_ending_q_flagged(self):
        violations = validate(["Q", "D", "KD", "P"])
        assert any("end quantized" in v for v in violations)

    def test_reports_every_violation(self):
        violations = validate(["D", "Q", "KD", "P"])
        assert len(violations) >= 3


class TestStageSeeds:
    def test_deterministic(self):
        assert stage_seed(1234, 0) == stage_seed(1234, 0)

    def test_varies_by_index_and_master(self):
        seeds = {stage_seed(7, i) for i in range(6)}
        assert len(seeds) == 6
        assert stage_seed(7, 0) != stage_seed(8, 0)

    def test_uint32_range(self):
        s = stage_seed(2 ** 40, 3)
        assert 0 <= s < 2 ** 32


@pytest.fixture(scope="module")
def tiny_world():
    tok = ByteTokenizer()
    teacher = init_model(ModelConfig(tok.vocab_size, 16, 2, 2, 24, 32), seed=1)
    base = init_model(ModelConfig(tok.vocab_size, 8, 1, 2, 16, 32), seed=2)
    docs = [(f"tiny pipeline doc {i} with words. " * 3).encode() for i in range(16)]
    batches = make_batches(docs, tok, max_len=32, batch_size=4, seed=0)
    q = max(1, len(batches) // 4)
    data = SplitData(train=batches[:2 * q], calibration=batches[2 * q:3 * q],
                     finetune=batches[:q], heldout=batches[3 * q:])
    prompts = [("say something", None), ("about cats", "pets")]
    return tok, teacher, base, data, prompts


def fast_spec(name):
    return PipelineSpec.from_name(
        name,
        kd=DistillConfig(steps=4, learning_rate=1e-3),
        prune=PruneConfig(ratio=0.25, calibration_batches=1, finetune_steps=3),
        quant_block_size=16,
    )


class TestExecute:
    def test_full_pipeline_artifacts(self, tiny_world):
        tok, teacher, base, data, prompts = tiny_world
        from complab.evaluate import EvalConfig

        model, manifest, timings = execute(
            fast_spec("KD-P-Q"), base, teacher, data, prompts, tok,
            master_seed=11, eval_cfg=EvalConfig(max_eval_batches=2, max_new_tokens=4),
        )
        assert model.precision is Precision.QUANTIZED_4BIT
        assert manifest.stages == ["KD", "P", "Q"]
        assert [r["stage"] for r in manifest.stage_reports] == ["KD", "P", "Q"]
        assert len(manifest.stage_seeds) == 3
        assert manifest.eval["compression_ratio"] > 1.0
        assert manifest.final_model_hash != manifest.base_model_hash
        assert timings["total_seconds"] > 0
        # base model must not be touched
        assert base.precision is Precision.FULL

    def test_rerun_is_bit_identical(self, tiny_world):
        tok, teacher, base, data, prompts = tiny_world
        from complab.checkpoint import serialize_bytes
        from complab.evaluate import EvalConfig

        cfg = EvalConfig(max_eval_batches=2, max_new_tokens=4)
        m1, man1, _ = execute(fast_spec("Q-P-KD"), base, teacher, data,
                              prompts, tok, master_seed=5, eval_cfg=cfg)
        m2, man2, _ = execute(fast_spec("Q-P-KD"), base, teacher, data,
                              prompts, tok, master_seed=5, eval_cfg=cfg)
        assert man1.to_json() == man2.to_json()
        assert serialize_bytes(m1) == serialize_bytes(m2)

    def test_master_seed_changes_outcome(self, tiny_world):
        tok, teacher, base, data, prompts = tiny_world
        from complab.evaluate import EvalConfig

        cfg = EvalConfig(max_eval_batches=2, max_new_tokens=4)
        _, man1, _ = execute(fast_spec("KD-P-Q"), base, teacher, data,
                             prompts, tok, master_seed=1, eval_cfg=cfg)
        _, man2, _ = execute(fast_spec("KD-P-Q"), base, teacher, data,
                             prompts, tok, master_seed=2, eval_cfg=cfg)
        assert man1.final_model_hash != man2.final_model_hash

    def test_requantizing_pipeline_runs(self, tiny_world):
        tok, teacher, base, data, prompts = tiny_world
        from complab.evaluate import EvalConfig

        model, manifest, _ = execute(
            fast_spec("Q-KD-P"), base, teacher, data, prompts, tok,
            master_seed=3, eval_cfg=EvalConfig(max_eval_batches=1, max_new_tokens=4),
        )
        assert manifest.stages == ["Q", "D", "KD", "P", "Q"]
        assert model.precision is Precision.QUANTIZED_4BIT
        # pruning narrowed the layer: floor(0.25 * 16) = 4 pruned
        assert model.config.d_ff == [12]

    def test_invalid_spec_rejected(self, tiny_world):
        tok, teacher, base, data, prompts = tiny_world
        bad = PipelineSpec(name="handmade", stages=["Q", "KD"])
        with pytest.raises(PipelineValidationError) as exc:
            execute(bad, base, teacher, data, prompts, tok, master_seed=0)
        assert exc.value.violations

    def test_kd_requires_teacher(self, tiny_world):
        tok, _, base, data, prompts = tiny_world
        with pytest.raises(ParameterError, match="teacher"):
            execute(fast_spec("KD"), base, None, data, prompts, tok, master_seed=0)

    def test_single_technique_q(self, tiny_world):
        tok, teacher, base, data, prompts = tiny_world
        from complab.evaluate import EvalConfig

        model, manifest, _ = execute(
            fast_spec("Q"), base, teacher, data, prompts, tok, master_seed=9,
            eval_cfg=EvalConfig(max_eval_batches=1, max_new_tokens=4),
        )
        assert manifest.stages == ["Q"]
        assert model.precision is Precision.QUANTIZED_4BIT


class TestWriteRun:
    def test_files_and_round_trip(self, tiny_world, tmp_path):
        tok, teacher, base, data, prompts = tiny_world
        from complab.checkpoint import deserialize, model_hash
        from complab.evaluate import EvalConfig

        model, manifest, timings = execute(
            fast_spec("P"), base, teacher, data, prompts, tok, master_seed=4,
            eval_cfg=EvalConfig(max_eval_batches=1, max_new_tokens=4),
        )
        paths = write_run(tmp_path, "P", model, manifest, timings)
        assert paths["checkpoint"].name == "P.ckpt"
        assert paths["manifest"].name == "P.manifest.json"
        assert paths["timing"].name == "P.timing.json"
        loaded = RunManifest.from_json(paths["manifest"].read_text())
        assert loaded.sequence == manifest.sequence
        assert loaded.eval == manifest.eval
        assert model_hash(deserialize(paths["checkpoint"])) == \
            manifest.final_model_hash
