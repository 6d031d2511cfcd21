from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .independence import CIConfig
from .rules import EmptyParentSetError, assess_dimensions, fallback_parent


class CausalParentSelector(TransformerMixin, BaseEstimator):
    """Keep the latent columns judged to be direct causes of the target.

    ``fit(X, y, env=...)`` classifies every column against ``y`` and the
    environment labels. With ``fallback=True`` an empty parent set is
    replaced by the column most rank-correlated with ``y`` and
    ``fallback_used_`` is set; otherwise EmptyParentSetError propagates.
    """

    def __init__(self, alpha=0.01, n_perm=500, min_env_rows=100, fallback=False, n_jobs=1, random_state=0):
        self.alpha = alpha
        self.n_perm = n_perm
        self.min_env_rows = min_env_rows
        self.fallback = fallback
        self.n_jobs = n_jobs
        self.random_state = random_state

    def _config(self) -> CIConfig:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        return CIConfig(alpha=self.alpha, n_perm=int(self.n_perm),
                        min_env_rows=int(self.min_env_rows), seed=int(self.random_state))

    def fit(self, X, y, env=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if env is None:
            raise ValueError("env labels are required")
        env = np.asarray(env).ravel()
        if env.size != X.shape[0]:
            raise ValueError(f"env has {env.size} rows, X has {X.shape[0]}")
        self.n_features_in_ = X.shape[1]
        self.verdicts_ = assess_dimensions(X, y, env, self._config(), self.n_jobs)
        parents = [v.latent_index for v in self.verdicts_ if v.is_parent]
        self.fallback_used_ = False
        if not parents:
            if not self.fallback:
                raise EmptyParentSetError(self.verdicts_)
            parents = [fallback_parent(X, y)]
            self.fallback_used_ = True
        self.parents_ = np.asarray(parents, dtype=int)
        return self

    def get_support(self, indices=False):
        check_is_fitted(self, "parents_")
        if indices:
            return self.parents_.copy()
        mask = np.zeros(self.n_features_in_, dtype=bool)
        mask[self.parents_] = True
        return mask

    def transform(self, X):
        check_is_fitted(self, "parents_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, selector was fitted on {self.n_features_in_}")
        return X[:, self.parents_]
