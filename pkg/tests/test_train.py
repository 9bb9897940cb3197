import pytest

from complab.checkpoint import model_hash
from complab.corpus import ByteTokenizer, make_batches
from complab.errors import ParameterError, PrecisionStateError
from complab.model import ModelConfig, init_model
from complab.quant import quantize_model
from complab.train import train_lm


@pytest.fixture()
def setup():
    tok = ByteTokenizer()
    model = init_model(ModelConfig(tok.vocab_size, 16, 2, 2, 24, 32), seed=4)
    docs = [(f"training doc {i} about small machines. " * 3).encode()
            for i in range(8)]
    batches = make_batches(docs, tok, max_len=32, batch_size=4, seed=1)
    return model, batches


def test_loss_decreases(setup):
    model, batches = setup
    report = train_lm(model, batches, steps=30, learning_rate=5e-3, seed=0)
    assert report.stage == "train"
    assert report.details["final_loss"] < report.details["first_loss"]


def test_zero_steps_is_identity(setup):
    model, batches = setup
    before = model_hash(model)
    report = train_lm(model, batches, steps=0, learning_rate=1e-3, seed=0)
    assert model_hash(model) == before
    assert report.details["first_loss"] is None
    assert report.details["final_loss"] is None


def test_deterministic_given_seed(setup):
    _, batches = setup
    cfg = ModelConfig(259, 16, 2, 2, 24, 32)
    m1 = init_model(cfg, seed=9)
    m2 = init_model(cfg, seed=9)
    train_lm(m1, batches, steps=8, learning_rate=1e-3, seed=5)
    train_lm(m2, batches, steps=8, learning_rate=1e-3, seed=5)
    assert model_hash(m1) == model_hash(m2)


def test_seed_changes_batch_order(setup):
    _, batches = setup
    cfg = ModelConfig(259, 16, 2, 2, 24, 32)
    m1 = init_model(cfg, seed=9)
    m2 = init_model(cfg, seed=9)
    train_lm(m1, batches, steps=8, learning_rate=1e-3, seed=5)
    train_lm(m2, batches, steps=8, learning_rate=1e-3, seed=6)
    assert model_hash(m1) != model_hash(m2)


def test_log_callback_fires(setup):
    model, batches = setup
    lines = []
    train_lm(model, batches, steps=4, learning_rate=1e-3, seed=0,
             log_every=2, log=lines.append)
    assert len(lines) == 2
    assert "loss" in lines[0]


def test_rejects_quantized_model(setup):
    model, batches = setup
    quantize_model(model, block_size=16)
    with pytest.raises(PrecisionStateError):
        train_lm(model, batches, steps=1, learning_rate=1e-3, seed=0)


def test_rejects_empty_batches(setup):
    model, _ = setup
    with pytest.raises(ParameterError):
        train_lm(model, [], steps=1, learning_rate=1e-3, seed=0)


def test_rejects_negative_steps(setup):
    model, batches = setup
    with pytest.raises(ParameterError):
        train_lm(model, batches, steps=-1, learning_rate=1e-3, seed=0)
