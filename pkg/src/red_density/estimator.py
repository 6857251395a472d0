"""scikit-learn compatible front end."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Standardizer
from .model import ModelConfig, init_model
from .numerics import check_random_state, derive_seed, make_rng
from .training import TrainConfig, train


class RED(DensityMixin, BaseEstimator):
    """Recurrent density estimator for real-valued vectors.

    ``fit`` standardizes the data (unless ``standardize=False``), holds out
    ``validation_fraction`` of the rows for early stopping, adds training noise
    and trains with Adam. ``score_samples`` returns log-densities in the units
    of the original data.

    Parameters
    ----------
    num_units : int
        Hidden size of the conditional GRU.
    transform_hidden : int
        Hidden size of each recurrent transform.
    num_components : int
        Mixture components per conditional.
    num_fcs : int
        Layers in the head mapping GRU states to mixture parameters.
    alpha : float
        Negative-side slope of the transforms' leaky ReLU.
    validation_fraction : float
        Share of rows held out when ``fit`` gets no ``X_val``.
    random_state : int
        Seeds initialization, the validation split, shuffling and noise.

    Examples
    --------
    >>> import numpy as np
    >>> X = np.random.default_rng(0).normal(size=(500, 2))
    >>> est = RED(max_epochs=2).fit(X)
    >>> est.score_samples(X[:3]).shape
    (3,)
    """

    def __init__(
        self,
        num_units=32,
        transform_hidden=8,
        num_components=5,
        num_fcs=2,
        alpha=0.1,
        candidate_activation="sigmoid",
        init_lr=1e-3,
        decay_factor=0.97,
        min_lr=1e-5,
        batch_size=128,
        max_epochs=200,
        patience=10,
        noise_std=0.01,
        grad_clip_norm=5.0,
        validation_fraction=0.1,
        standardize=True,
        random_state=0,
    ):
        self.num_units = num_units
        self.transform_hidden = transform_hidden
        self.num_components = num_components
        self.num_fcs = num_fcs
        self.alpha = alpha
        self.candidate_activation = candidate_activation
        self.init_lr = init_lr
        self.decay_factor = decay_factor
        self.min_lr = min_lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.noise_std = noise_std
        self.grad_clip_norm = grad_clip_norm
        self.validation_fraction = validation_fraction
        self.standardize = standardize
        self.random_state = random_state

    def _configs(self, d):
        seed = 0 if self.random_state is None else int(self.random_state)
        mc = ModelConfig(
            d=d,
            num_units=self.num_units,
            transform_hidden=self.transform_hidden,
            num_components=self.num_components,
            num_fcs=self.num_fcs,
            alpha=self.alpha,
            candidate_activation=self.candidate_activation,
            seed=derive_seed(seed, 10),
        )
        tc = TrainConfig(
            init_lr=self.init_lr,
            decay_factor=self.decay_factor,
            min_lr=min(self.min_lr, self.init_lr),
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=derive_seed(seed, 11),
            noise_std=self.noise_std,
            grad_clip_norm=self.grad_clip_norm,
        )
        return mc, tc

    def fit(self, X, y=None, X_val=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=2)
        if X_val is None:
            seed = 0 if self.random_state is None else int(self.random_state)
            perm = make_rng(derive_seed(seed, 12)).permutation(X.shape[0])
            n_val = max(1, int(round(self.validation_fraction * X.shape[0])))
            X_val, X = X[perm[:n_val]], X[perm[n_val:]]
        else:
            X_val = check_array(X_val, dtype=np.float64)

        self.scaler_ = Standardizer().fit(X) if self.standardize else None
        Xs, Vs = self._to_model_space(X), self._to_model_space(X_val)
        mc, tc = self._configs(X.shape[1])
        self.model_, self.history_ = train(init_model(mc), Xs, Vs, tc)
        self.n_features_in_ = X.shape[1]
        return self

    def _to_model_space(self, X):
        return X if self.scaler_ is None else self.scaler_.transform(X)

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fitted with {self.n_features_in_}")
        return X

    def score_samples(self, X):
        """Log-density of each row of ``X`` in original units."""
        X = self._check(X)
        ld = 0.0 if self.scaler_ is None else self.scaler_.log_abs_det()
        return self.model_.log_prob(self._to_model_space(X)) + ld

    def score(self, X, y=None):
        """Mean log-likelihood per row (higher is better)."""
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "model_")
        rng = check_random_state(random_state)
        Z = self.model_.sample(rng, n_samples)
        return Z if self.scaler_ is None else self.scaler_.inverse_transform(Z)

    def decision_function(self, X):
        """Anomaly score: negative log-density (larger = more anomalous)."""
        return -self.score_samples(X)
