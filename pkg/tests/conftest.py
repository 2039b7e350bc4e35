import numpy as np
import pytest

from ipl.model import ModelConfig, TransformerLM
from ipl.prompting import PromptModule

ACCEPTANCE_LINES = []


def record_acceptance(number, title, passed, detail):
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_config():
    return ModelConfig(vocab_size=20, d_e=8, n_layers=1, n_heads=2, d_ff=12, max_len=24)


@pytest.fixture
def tiny_models(tiny_config):
    rng = np.random.default_rng(3)
    lm = TransformerLM(tiny_config, rng=rng)
    pm = PromptModule.for_model(lm, 3, rng=rng)
    return pm, lm


@pytest.fixture
def default_models():
    rng = np.random.default_rng(0)
    lm = TransformerLM(ModelConfig(), rng=rng)
    pm = PromptModule.for_model(lm, 16, rng=rng)
    return pm, lm
