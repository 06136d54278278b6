import numpy as np
import pytest

from regiondebias.encoder import ToyViTEncoder
from regiondebias.exceptions import InputError
from regiondebias.training import BiasInductionParams, induce_bias

from conftest import PROMPTS


def test_induce_bias_is_deterministic_and_pure(encoder, small_samples):
    x = np.stack([s.image for s in small_samples])
    y = np.array([s.class_label for s in small_samples])
    before = {k: v.clone() for k, v in encoder.params.items()}
    a = induce_bias(encoder, x, y, PROMPTS, BiasInductionParams(epochs=1))
    b = induce_bias(encoder, x, y, PROMPTS, BiasInductionParams(epochs=1))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert all(np.array_equal(encoder.params[k], before[k]) for k in before)
    # text tower stays frozen, image tower moves
    assert np.array_equal(a.params["tok_emb"], encoder.params["tok_emb"])
    assert not np.array_equal(a.params["patch_w"], encoder.params["patch_w"])


def test_projection_mode_only_moves_projection(encoder, small_samples):
    x = np.stack([s.image for s in small_samples])
    y = np.array([s.class_label for s in small_samples])
    a = induce_bias(encoder, x, y, PROMPTS, BiasInductionParams(epochs=1, trainable="projection"))
    moved = [k for k in a.params if not np.array_equal(a.params[k], encoder.params[k])]
    assert moved == ["img_proj"]


def test_zero_epochs_returns_copy(encoder):
    a = induce_bias(encoder, np.zeros((0, 32, 32, 3)), np.zeros(0), PROMPTS)
    assert isinstance(a, ToyViTEncoder) and a is not encoder


def test_bias_induction_learns_training_labels(biased_encoder):
    from regiondebias.data import GeneratorParams, generate
    samples = generate(GeneratorParams(n_samples=200, seed=11))
    z = biased_encoder.encode_images(np.stack([s.image for s in samples]))
    pred = np.argmax(z @ biased_encoder.encode_texts(PROMPTS).T, axis=1)
    assert np.mean(pred == [s.class_label for s in samples]) > 0.8


def test_params_validation(encoder):
    with pytest.raises(InputError):
        BiasInductionParams(epochs=-1)
    with pytest.raises(InputError):
        BiasInductionParams(trainable="text")
    with pytest.raises(InputError):
        induce_bias(encoder, np.zeros((2, 32, 32, 3)), np.zeros(3), PROMPTS)
