"""Pruning tests.

Hand-computed oracle for the importance example: gate columns
[[1,-2],[0,3]] give L1 sums [1, 5]; up columns [[2,0],[-1,1]] give
[3, 1]; summed weight importance is [4, 6]. With activations [0.2, 0.1]
the max-normalized blend is [0.5*(4/6)+0.5*1, 0.5*1+0.5*0.5] =
[0.8333..., 0.75].
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from complab.checkpoint import model_hash
from complab.corpus import ByteTokenizer, SplitData, make_batches
from complab.errors import OrderingConstraintError, ParameterError, ShapeError
from complab.model import FfnBlock, ModelConfig, expected_parameter_count, init_model
from complab.prune import (
    PruneConfig,
    activation_importance,
    combine_scores,
    prune_ffn,
    run_prune,
    select_keep_indices,
    weight_importance,
)
from complab.quant import quantize_model
from complab.tensor import Tensor


def ffn_from(gate, up, down):
    return FfnBlock(
        gate=Tensor(np.array(gate, np.float32), requires_grad=True),
        up=Tensor(np.array(up, np.float32), requires_grad=True),
        down=Tensor(np.array(down, np.float32), requires_grad=True),
    )


class TestWeightImportance:
    def test_hand_example(self):
        ffn = ffn_from([[1, -2], [0, 3]], [[2, 0], [-1, 1]],
                       [[1, 1], [1, 1]])
        np.testing.assert_allclose(weight_importance(ffn), [4.0, 6.0])

    def test_down_projection_does_not_count(self):
        a = ffn_from([[1, 1]], [[1, 1]], [[0], [0]])
        b = ffn_from([[1, 1]], [[1, 1]], [[9], [9]])
        np.testing.assert_allclose(weight_importance(a), weight_importance(b))


class TestCombineScores:
    def test_hand_example(self):
        got = combine_scores(np.array([4.0, 6.0]), np.array([0.2, 0.1]))
        np.testing.assert_allclose(got, [0.5 * 4 / 6 + 0.5, 0.75], rtol=1e-12)

    def test_all_zero_signal_contributes_zeros(self):
        got = combine_scores(np.array([2.0, 4.0]), np.zeros(2))
        np.testing.assert_allclose(got, [0.25, 0.5])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            combine_scores(np.ones(3), np.ones(4))


class TestSelection:
    def test_prunes_lowest_scores(self):
        keep = select_keep_indices(np.array([5.0, 1.0, 3.0, 1.0]), 0.5)
        assert keep.tolist() == [0, 2]

    def test_ties_keep_lower_index(self):
        keep = select_keep_indices(np.ones(4), 0.25)
        assert keep.tolist() == [0, 1, 2]

    def test_floor_arithmetic(self):
        keep = select_keep_indices(np.arange(10, dtype=float), 0.33)
        assert len(keep) == 7  # floor(3.3) = 3 pruned

    def test_ratio_zero_keeps_all(self):
        keep = select_keep_indices(np.arange(5, dtype=float), 0.0)
        assert keep.tolist() == [0, 1, 2, 3, 4]

    @given(st.integers(2, 64), st.floats(0.0, 0.99), st.integers(0, 1000))
    @settings(max_examples=80, deadline=None)
    def test_selection_properties(self, d_ff, ratio, seed):
        scores = np.random.default_rng(seed).random(d_ff)
        keep = select_keep_indices(scores, ratio)
        assert len(keep) == d_ff - int(np.floor(ratio * d_ff))
        assert np.all(np.diff(keep) > 0)
        assert keep.min() >= 0 and keep.max() < d_ff

    def test_rejects_ratio_one(self):
        with pytest.raises(ParameterError):
            select_keep_indices(np.ones(4), 1.0)


class TestRebuild:
    def test_survivors_bit_identical(self):
        rng = np.random.default_rng(0)
        ffn = ffn_from(rng.normal(size=(4, 6)), rng.normal(size=(4, 6)),
                       rng.normal(size=(6, 4)))
        keep = np.array([0, 2, 5])
        out = prune_ffn(ffn, keep)
        np.testing.assert_array_equal(out.gate.data, ffn.gate.data[:, keep])
        np.testing.assert_array_equal(out.up.data, ffn.up.data[:, keep])
        np.testing.assert_array_equal(out.down.data, ffn.down.data[keep, :])

    def test_empty_keep_rejected(self):
        ffn = ffn_from(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 2)))
        with pytest.raises(ParameterError):
            prune_ffn(ffn, np.array([], dtype=int))


@pytest.fixture
def small_setup():
    tok = ByteTokenizer()
    cfg = ModelConfig(tok.vocab_size, 16, 2, 2, 20, 32)
    model = init_model(cfg, seed=11)
    docs = [(f"sample text number {i} with some words. " * 4).encode()
            for i in range(12)]
    batches = make_batches(docs, tok, max_len=32, batch_size=4, seed=0)
    third = max(1, len(batches) // 3)
    data = SplitData(
        train=batches[:third],
        calibration=batches[third:2 * third],
        finetune=batches[:2 * third],
        heldout=batches[2 * third:],
    )
    return model, data


class TestActivationImportance:
    def test_single_position_matches_recorded_forward(self, small_setup):
        model, data = small_setup
        batch = data.calibration[0]
        # keep exactly one unmasked position
        row, col = np.argwhere(batch.attention_mask == 1)[0]
        labels = np.full_like(batch.labels, -100)
        labels[row, col] = batch.labels[row, col]
        mask = np.zeros_like(batch.attention_mask)
        mask[row, col] = 1
        from complab.corpus import Batch
        single = Batch(batch.input_ids, labels, mask)

        scores = activation_importance(model, [single])
        from complab import tensor as T
        with T.no_grad():
            _, acts = model.forward(single.input_ids, collect_ffn=True)
        for layer_idx, act in enumerate(acts):
            np.testing.assert_allclose(
                scores[layer_idx], np.abs(act.data[row, col]), rtol=1e-6
            )

    def test_masked_positions_excluded(self, small_setup):
        model, data = small_setup
        batch = data.calibration[0]
        scores_a = activation_importance(model, [batch])
        tampered_ids = batch.input_ids.copy()
        pad_cols = np.where(batch.attention_mask[0] == 0)[0]
        tampered_ids[0, pad_cols[-1]] = 5
        from complab.corpus import Batch
        tampered = Batch(tampered_ids, batch.labels, batch.attention_mask)
        scores_b = activation_importance(model, [tampered])
        for a, b in zip(scores_a, scores_b):
            np.testing.assert_array_equal(a, b)

    def test_empty_batches_rejected(self, small_setup):
        model, _ = small_setup
        with pytest.raises(ParameterError):
            activation_importance(model, [])


class TestRunPrune:
    def test_widths_and_param_count(self, small_setup):
        model, data = small_setup
        cfg = PruneConfig(ratio=0.3, calibration_batches=2, finetune_steps=0)
        report = run_prune(model, data, cfg, seed=0)
        # floor(0.3 * 20) = 6 pruned, 14 kept per layer
        assert model.config.d_ff == [14, 14]
        assert report.details["per_layer_kept"] == [14, 14]
        assert report.details["per_layer_width_before"] == [20, 20]
        assert model.parameter_count() == expected_parameter_count(model.config)

    def test_pruned_model_matches_zeroed_oracle(self, small_setup):
        model, data = small_setup
        ids = data.heldout[0].input_ids[:1]
        cal = data.calibration[:2]
        act = activation_importance(model, cal)
        zeroed = model.copy()
        pruned = model.copy()
        for i, layer in enumerate(pruned.layers):
            combined = combine_scores(weight_importance(layer.ffn), act[i])
            keep = select_keep_indices(combined, 0.3)
            dropped = sorted(set(range(len(combined))) - set(keep.tolist()))
            # zeroing a neuron's gate column and down row silences it
            zeroed.layers[i].ffn.gate.data[:, dropped] = 0.0
            zeroed.layers[i].ffn.down.data[dropped, :] = 0.0
            layer.ffn = prune_ffn(layer.ffn, keep)
            pruned.config.d_ff[i] = len(keep)
        np.testing.assert_allclose(
            pruned.forward(ids).data, zeroed.forward(ids).data, atol=2e-5
        )

    def test_ratio_zero_is_noop(self, small_setup):
        model, data = small_setup
        before = model_hash(model)
        report = run_prune(model, data, PruneConfig(ratio=0.0), seed=0)
        assert model_hash(model) == before
        assert report.details["no_op"] is True

    def test_finetune_improves_random_init(self, small_setup):
        model, data = small_setup
        cfg = PruneConfig(ratio=0.2, calibration_batches=2, finetune_steps=25,
                          learning_rate=3e-3)
        report = run_prune(model, data, cfg, seed=0)
        assert report.details["post_perplexity"] < report.details["pre_perplexity"]

    def test_deterministic(self, small_setup):
        model, data = small_setup
        cfg = PruneConfig(ratio=0.3, calibration_batches=2, finetune_steps=5)
        m1, m2 = model.copy(), model.copy()
        run_prune(m1, data, cfg, seed=7)
        run_prune(m2, data, cfg, seed=7)
        assert model_hash(m1) == model_hash(m2)

    def test_quantized_model_rejected(self, small_setup):
        model, data = small_setup
        quantize_model(model, block_size=8)
        with pytest.raises(OrderingConstraintError):
            run_prune(model, data, PruneConfig(), seed=0)

    def test_report_notes_perplexities(self, small_setup):
        model, data = small_setup
        cfg = PruneConfig(ratio=0.3, calibration_batches=1, finetune_steps=0)
        report = run_prune(model, data, cfg, seed=0)
        assert np.isfinite(report.details["pre_perplexity"])
        assert np.isfinite(report.details["post_perplexity"])


class TestConfigValidation:
    @pytest.mark.parametrize("kw", [
        dict(ratio=-0.1), dict(ratio=1.0), dict(calibration_batches=0),
        dict(finetune_steps=-1), dict(learning_rate=0.0),
    ])
    def test_rejects_bad_values(self, kw):
        with pytest.raises(ParameterError):
            PruneConfig(**kw)
