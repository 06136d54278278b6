import numpy as np
import pytest

from regiondebias.data import GeneratorParams, generate
from regiondebias.encoder import EncoderConfig, ToyViTEncoder

PROMPTS = ("A photo of a landbird", "A photo of a waterbird")


@pytest.fixture(scope="session")
def encoder():
    return ToyViTEncoder(EncoderConfig(seed=0))


@pytest.fixture(scope="session")
def small_samples():
    return generate(GeneratorParams(n_samples=40, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def biased_encoder():
    from regiondebias.training import BiasInductionParams, induce_bias
    samples = generate(GeneratorParams(n_samples=200, seed=11))
    x = np.stack([s.image for s in samples])
    y = np.array([s.class_label for s in samples])
    return induce_bias(ToyViTEncoder(EncoderConfig(seed=0)), x, y, PROMPTS, BiasInductionParams(epochs=3))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
