from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import IvaeConfig, encode_conditioning, infer_latents, train_ivae


class IdentifiableVAE(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit(O, y, env=...)``, ``transform(O, y, env)`` -> posterior means.

    ``task="classification"`` one-hot encodes ``y`` in the conditioning
    vector; regression targets enter raw. ``conditional=False`` trains a
    plain VAE with a standard-normal prior.
    """

    def __init__(self, latent_dim=2, hidden=6, decoder_variance=0.01, conditional=True,
                 task="regression", epochs=300, batch_size=64, learning_rate=5e-3, random_state=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.decoder_variance = decoder_variance
        self.conditional = conditional
        self.task = task
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _config(self) -> IvaeConfig:
        return IvaeConfig(
            latent_dim=self.latent_dim, prior_hidden=self.hidden, encoder_hidden=self.hidden,
            decoder_hidden=self.hidden, decoder_variance=self.decoder_variance,
            conditional=self.conditional, epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, seed=int(self.random_state),
        )

    def _conditioning(self, y, env, n):
        if y is None or env is None:
            raise ValueError("y and env are required to condition the encoder")
        y = np.asarray(y, dtype=np.float64)
        if y.shape[0] != n:
            raise ValueError(f"y has {y.shape[0]} rows, expected {n}")
        return encode_conditioning(y, env, self.env_levels_, self.classes_)

    def fit(self, X, y=None, env=None):
        X = check_array(X)
        if self.task not in ("regression", "classification"):
            raise ValueError(f"task must be 'regression' or 'classification', got {self.task!r}")
        if env is None or np.size(env) != X.shape[0]:
            raise ValueError("env labels aligned with X are required")
        self.env_levels_ = sorted(np.unique(env).tolist())
        self.classes_ = sorted(np.unique(y).tolist()) if self.task == "classification" else None
        U = self._conditioning(y, env, X.shape[0])
        result = train_ivae(X, U, self._config())
        self.model_ = result.model
        self.elbo_curve_ = np.asarray(result.elbo_curve)
        self.warnings_ = list(result.warnings)
        self.n_features_in_ = X.shape[1]
        return self

    def posterior(self, X, y=None, env=None):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, model was fitted on {self.n_features_in_}")
        return infer_latents(self.model_, X, self._conditioning(y, env, X.shape[0]))

    def transform(self, X, y=None, env=None):
        return self.posterior(X, y, env).mean

    def fit_transform(self, X, y=None, env=None):
        return self.fit(X, y, env=env).transform(X, y, env)

    def score(self, X, y=None, env=None):
        """Mean lower bound per row at a fixed noise draw."""
        check_is_fitted(self, "model_")
        X = check_array(X)
        return self.model_.elbo(X, self._conditioning(y, env, X.shape[0]), rng=0).total
