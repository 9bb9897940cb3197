import json

import numpy as np
import pytest

from complab.checkpoint import (
    MAGIC,
    deserialize,
    deserialize_bytes,
    model_hash,
    serialize,
    serialize_bytes,
    serialized_size,
)
from complab.errors import CheckpointFormatError
from complab.model import ModelConfig, init_model
from complab.quant import (
    Precision,
    QuantizedTensor,
    dequantize_model,
    payload_size,
    quantize_model,
)


@pytest.fixture
def model():
    cfg = ModelConfig(vocab_size=17, d_model=8, n_layers=2, n_heads=2,
                      d_ff=12, max_seq_len=16)
    return init_model(cfg, seed=5)


class TestRoundTrip:
    def test_full_precision(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        written = serialize(model, path)
        assert written == path.stat().st_size == serialized_size(model)
        loaded = deserialize(path)
        assert loaded.config == model.config
        assert loaded.precision is Precision.FULL
        assert model_hash(loaded) == model_hash(model)
        for (_, a), (_, b) in zip(model.named_parameters(),
                                  loaded.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_quantized(self, model, tmp_path):
        quantize_model(model, block_size=8)
        path = tmp_path / "q.ckpt"
        serialize(model, path)
        loaded = deserialize(path)
        assert loaded.precision is Precision.QUANTIZED_4BIT
        assert loaded.quant_block_size == 8
        assert model_hash(loaded) == model_hash(model)
        for (_, a), (_, b) in zip(model.named_parameters(),
                                  loaded.named_parameters()):
            assert isinstance(b, QuantizedTensor)
            np.testing.assert_array_equal(a.codes, b.codes)
            np.testing.assert_array_equal(a.scales, b.scales)

    def test_serialization_is_deterministic(self, model):
        assert serialize_bytes(model) == serialize_bytes(model)

    def test_loaded_model_is_trainable(self, model, tmp_path):
        path = tmp_path / "m.ckpt"
        serialize(model, path)
        loaded = deserialize(path)
        assert len(loaded.trainable_parameters()) == len(model.named_parameters())


class TestFormatErrors:
    def test_bad_magic_reports_offset_zero(self, model):
        data = b"NOPE" + serialize_bytes(model)[4:]
        with pytest.raises(CheckpointFormatError, match="offset 0"):
            deserialize_bytes(data)

    def test_bad_version_reports_offset(self, model):
        data = bytearray(serialize_bytes(model))
        data[4:6] = (99).to_bytes(2, "little")
        with pytest.raises(CheckpointFormatError, match="version 99 at offset 4"):
            deserialize_bytes(bytes(data))

    def test_truncated_header(self):
        with pytest.raises(CheckpointFormatError, match="truncated header"):
            deserialize_bytes(MAGIC)

    def test_truncated_payload_reports_offset(self, model):
        data = serialize_bytes(model)
        with pytest.raises(CheckpointFormatError, match="truncated payload.*offset"):
            deserialize_bytes(data[:-10])

    def test_trailing_bytes_rejected(self, model):
        data = serialize_bytes(model) + b"\x00\x00"
        with pytest.raises(CheckpointFormatError, match="trailing"):
            deserialize_bytes(data)

    def test_invalid_manifest_json(self, model):
        good = serialize_bytes(model)
        bad_manifest = b"{not json"
        data = (MAGIC + (1).to_bytes(2, "little")
                + len(bad_manifest).to_bytes(4, "little") + bad_manifest)
        with pytest.raises(CheckpointFormatError, match="invalid manifest JSON"):
            deserialize_bytes(data)
        assert good[:4] == MAGIC  # sanity: fixture untouched

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            deserialize(tmp_path / "absent.ckpt")


class TestManifestContent:
    def test_manifest_is_canonical_json(self, model):
        data = serialize_bytes(model)
        mlen = int.from_bytes(data[6:10], "little")
        raw = data[10:10 + mlen]
        manifest = json.loads(raw)
        recanon = json.dumps(manifest, sort_keys=True,
                             separators=(",", ":")).encode()
        assert raw == recanon
        names = [t["name"] for t in manifest["tensors"]]
        assert names[0] == "token_embedding" and names[-1] == "lm_head"

    def test_quantized_payload_matches_formula(self, model):
        quantize_model(model, block_size=8)
        expected = 0
        for _, p in model.named_parameters():
            n = p.element_count
            expected += (n + 1) // 2 + 4 * ((n + 7) // 8)
        assert payload_size(model) == expected


class TestPrecisionGates:
    def test_double_quantize_rejected(self, model):
        quantize_model(model, block_size=8)
        from complab.errors import PrecisionStateError
        with pytest.raises(PrecisionStateError):
            quantize_model(model, block_size=8)

    def test_dequantize_full_precision_rejected(self, model):
        from complab.errors import PrecisionStateError
        with pytest.raises(PrecisionStateError):
            dequantize_model(model)

    def test_quantize_dequantize_requantize_is_stable(self, model):
        quantize_model(model, block_size=8)
        first = model_hash(model)
        dequantize_model(model)
        quantize_model(model, block_size=8)
        assert model_hash(model) == first
