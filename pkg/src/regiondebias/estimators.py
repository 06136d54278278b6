"""scikit-learn style wrapper around zero-shot classification and region debiasing."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.metrics import accuracy_score
from sklearn.utils.validation import check_is_fitted

from .debias import STEP_RULES, DebiasConfig, debias_batch, predict_from_similarities, prompt_embeddings
from .encoder import ToyViTEncoder, VisionTextEncoder, require_gradients
from .exceptions import ConfigurationError, InputError
from .experiment import ALL_VARIANTS, CHUNK_SIZE, ZERO_SHOT, _map_chunks
from .validation import check_images, check_masks


class RegionDebiasClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Zero-shot classifier that optionally neutralizes the non-target region first.

    ``fit`` learns nothing; it validates the configuration and caches the
    prompt embeddings, so ``y`` is accepted only for API compatibility.
    ``transform`` returns the images the classifier actually sees for the
    selected ``variant`` and ``predict`` classifies them. Every variant other
    than ``zero_shot`` needs per-image target masks.

    Parameters
    ----------
    encoder : VisionTextEncoder, default=None
        Frozen vision-language encoder; ``None`` builds a default
        :class:`ToyViTEncoder`.
    prompts : tuple of str
        One prompt per class, in class-index order.
    variant : str, default="full"
        One of ``zero_shot``, ``target_only``, ``noise_filled``,
        ``random_repaint``, ``full``.
    """

    def __init__(self, encoder: VisionTextEncoder | None = None,
                 prompts=("A photo of a landbird", "A photo of a waterbird"),
                 target_attribute: str = "bird", variant: str = "full", step_size: float = 1.0,
                 max_iterations: int = 500, stop_tolerance: float = 1e-3, noise_sigma: float = 0.1,
                 step_rule: str = "polyak", seed: int = 0, workers: int = 1):
        self.encoder = encoder
        self.prompts = prompts
        self.target_attribute = target_attribute
        self.variant = variant
        self.step_size = step_size
        self.max_iterations = max_iterations
        self.stop_tolerance = stop_tolerance
        self.noise_sigma = noise_sigma
        self.step_rule = step_rule
        self.seed = seed
        self.workers = workers

    def _debias_config(self) -> DebiasConfig:
        return DebiasConfig(tuple(self.prompts), self.target_attribute, self.step_size,
                            self.max_iterations, self.stop_tolerance, self.noise_sigma,
                            self.seed, self.step_rule)

    def fit(self, X, y=None, masks=None):
        if self.variant not in ALL_VARIANTS:
            raise ConfigurationError(f"variant must be one of {ALL_VARIANTS}, got {self.variant!r}")
        if self.step_rule not in STEP_RULES:
            raise ConfigurationError(f"step_rule must be one of {STEP_RULES}")
        if int(self.workers) < 1:
            raise ConfigurationError("workers must be >= 1")
        encoder = self.encoder if self.encoder is not None else ToyViTEncoder()
        if self.variant == "full":
            require_gradients(encoder)
        self.config_ = self._debias_config()
        self.encoder_ = encoder
        self.text_embeddings_ = prompt_embeddings(encoder, self.config_.prompts)
        self.classes_ = np.arange(len(self.config_.prompts))
        if X is not None:
            X = check_images(X, size=encoder.image_size)
            self.n_features_in_ = int(np.prod(X.shape[1:]))
            if y is not None and len(y) != len(X):
                raise InputError(f"X has {len(X)} images but y has {len(y)} labels")
        return self

    def _inputs(self, X, masks):
        check_is_fitted(self, "encoder_")
        X = check_images(X, size=self.encoder_.image_size)
        if self.variant == ZERO_SHOT:
            return X, None
        if masks is None:
            raise InputError(f"variant {self.variant!r} needs target masks")
        return X, check_masks(masks, len(X), X.shape[1:3])

    def _run(self, X, masks):
        X, masks = self._inputs(X, masks)
        if self.variant == ZERO_SHOT:
            t = self.text_embeddings_ / np.linalg.norm(self.text_embeddings_, axis=1, keepdims=True)
            sims = _map_chunks(lambda sl: list(self.encoder_.encode_images(X[sl]) @ t.T), len(X),
                               int(self.workers), CHUNK_SIZE)
            return X, np.array(sims).reshape(len(X), -1)
        keys = [f"x{k}" for k in range(len(X))]
        results = _map_chunks(
            lambda sl: debias_batch(X[sl], masks[sl], self.config_, self.encoder_, self.variant,
                                    keys[sl], self.text_embeddings_),
            len(X), int(self.workers), CHUNK_SIZE)
        recon = np.stack([r.reconstructed for r in results]) if results else X.copy()
        sims = np.array([r.per_prompt_similarity for r in results]).reshape(len(X), -1)
        return recon, sims

    def transform(self, X, masks=None):
        """Images as presented to the zero-shot classifier."""
        return self._run(X, masks)[0]

    def decision_function(self, X, masks=None):
        """Cosine similarity of each (transformed) image to each prompt."""
        return self._run(X, masks)[1]

    def predict(self, X, masks=None):
        sims = self.decision_function(X, masks)
        return self.classes_[predict_from_similarities(sims)]

    def score(self, X, y, masks=None, sample_weight=None):
        return accuracy_score(y, self.predict(X, masks), sample_weight=sample_weight)
