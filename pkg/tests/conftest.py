import numpy as np
import pytest

from dacvlm.model import ModelConfig, VLModel, pretrain_base_lm
from dacvlm.synth import text_only
from dacvlm.tokenizer import Tokenizer

TINY = dict(n_layers=2, d=16, d_ff=32, n_heads=2, d1=8, context=256)


@pytest.fixture(scope="session")
def tok():
    return Tokenizer()


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(**TINY)


@pytest.fixture(scope="session")
def tiny_base(tiny_config):
    """A briefly trained dense base LM (weights are not at their init values)."""
    texts = [text_only(i) for i in range(200)]
    return pretrain_base_lm(tiny_config, texts, steps=30, seed=0, lr=1e-2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def perturbed(model: VLModel, seed: int, scale: float = 0.05) -> VLModel:
    """Copy of ``model`` with every tensor jittered (branches become distinct)."""
    m = model.copy()
    r = np.random.default_rng(seed)
    for t in m.parameters():
        t.data = t.data + r.normal(0.0, scale, t.shape)
    return m


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
