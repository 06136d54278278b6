import numpy as np
import pytest
from sklearn.base import clone

from regiondebias.debias import DebiasConfig, debias_batch
from regiondebias.estimators import RegionDebiasClassifier
from regiondebias.exceptions import ConfigurationError, InputError

from conftest import PROMPTS


def _data(samples, n=6):
    return (np.stack([s.image for s in samples[:n]]), np.array([s.class_label for s in samples[:n]]),
            np.stack([s.target_mask for s in samples[:n]]))


def test_get_params_and_clone(biased_encoder):
    est = RegionDebiasClassifier(encoder=biased_encoder, variant="noise_filled", seed=3)
    params = est.get_params()
    assert params["variant"] == "noise_filled" and params["seed"] == 3 and params["encoder"] is biased_encoder
    c = clone(est)
    assert c.get_params()["variant"] == "noise_filled"
    c.set_params(variant="full")
    assert c.variant == "full" and est.variant == "noise_filled"


def test_full_matches_pipeline(biased_encoder, small_samples):
    X, y, M = _data(small_samples)
    est = RegionDebiasClassifier(encoder=biased_encoder).fit(X, y)
    assert list(est.classes_) == [0, 1] and est.n_features_in_ == 32 * 32 * 3
    pred = est.predict(X, masks=M)
    ref = debias_batch(X, M, DebiasConfig(), biased_encoder, "full")
    assert list(pred) == [r.predicted_class for r in ref]
    recon = est.transform(X, masks=M)
    keep = M[..., None].repeat(3, -1) == 1
    assert np.array_equal(recon[keep], X[keep])
    assert 0.0 <= est.score(X, y, masks=M) <= 1.0


def test_zero_shot_needs_no_masks(biased_encoder, small_samples):
    X, y, _ = _data(small_samples)
    est = RegionDebiasClassifier(encoder=biased_encoder, variant="zero_shot").fit(X)
    sims = est.decision_function(X)
    assert sims.shape == (len(X), 2)
    assert np.array_equal(est.transform(X), X)
    expected = [int(np.argmax(biased_encoder.encode_texts(PROMPTS) @ z)) for z in biased_encoder.encode_images(X)]
    assert list(est.predict(X)) == expected


def test_workers_do_not_change_results(biased_encoder, small_samples):
    X, _, M = _data(small_samples, 8)
    a = RegionDebiasClassifier(encoder=biased_encoder, workers=1).fit(None).decision_function(X, M)
    b = RegionDebiasClassifier(encoder=biased_encoder, workers=3).fit(None).decision_function(X, M)
    assert np.array_equal(a, b)


def test_validation_errors(biased_encoder, small_samples):
    X, y, M = _data(small_samples)
    with pytest.raises(ConfigurationError):
        RegionDebiasClassifier(encoder=biased_encoder, variant="inpaint").fit(X)
    with pytest.raises(ConfigurationError):
        RegionDebiasClassifier(encoder=biased_encoder, workers=0).fit(X)
    with pytest.raises(InputError):
        RegionDebiasClassifier(encoder=biased_encoder).fit(X, y[:2])
    est = RegionDebiasClassifier(encoder=biased_encoder).fit(X)
    with pytest.raises(InputError):
        est.predict(X)
    with pytest.raises(InputError):
        est.predict(X, masks=M[:2])
    with pytest.raises(InputError):
        est.predict(X * 2, masks=M)
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        RegionDebiasClassifier(encoder=biased_encoder).predict(X, masks=M)
