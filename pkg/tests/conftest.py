import numpy as np
import pytest

from ttstream.model import EncoderConfig, ModelConfig
from ttstream.modelio import random_init


def desk_config(arch="transformer", **enc):
    base = dict(arch=arch, num_layers=4, d_model=64, num_heads=4, ffn_dim=128,
                relpos_left=16, relpos_right=4, input_dim=8)
    base.update(enc)
    return ModelConfig(EncoderConfig(**base), vocab_size=16)


def tiny_config(arch="transformer", vocab_size=4, **enc):
    base = dict(arch=arch, num_layers=2, d_model=16, num_heads=2, ffn_dim=32,
                relpos_left=8, relpos_right=3, input_dim=6)
    base.update(enc)
    return ModelConfig(EncoderConfig(**base), vocab_size=vocab_size)


@pytest.fixture(scope="session")
def transformer_model():
    return random_init(desk_config("transformer"), seed=0)


@pytest.fixture(scope="session")
def conformer_model():
    return random_init(desk_config("conformer"), seed=1)


@pytest.fixture(params=["transformer", "conformer"])
def desk_model(request, transformer_model, conformer_model):
    return transformer_model if request.param == "transformer" else conformer_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        ok, detail = results[key]
        terminalreporter.write_line(f"CRITERION {key}: {'PASS' if ok else 'FAIL'} - {detail}")
