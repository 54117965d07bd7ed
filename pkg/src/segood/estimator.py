"""Scikit-learn style estimator over flat pixel arrays.

The toolkit's pipeline works on images and manifests; this wrapper
exposes the same math through the familiar ``fit(X, y)`` /
``predict(X)`` / ``score_samples(X)`` surface so the scorer composes
with sklearn tooling (clone, get_params, pipelines). Rows of X are
softmax vectors, y holds the true class ids.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .bank import FitConfig, GaussianBank, fit_gaussian
from .scoring import gaussian_distances


class MahalanobisScorer(BaseEstimator):
    """Class-conditional Gaussian scorer for softmax vectors.

    Fits one Gaussian per class on the rows labeled with that class
    (restricted to rows whose argmax agrees with the label, unless
    ``true_positives_only`` is off) and scores rows by Mahalanobis
    distance to their predicted class.

    :param ridge_scale: relative ridge used when inverting covariances.
    :param min_samples_per_class: below this count a class is invalid and
        scores infinite; None means n_features + 1.
    :param true_positives_only: restrict fitting to rows where
        argmax(x) == y.
    """

    def __init__(
        self,
        ridge_scale: float = 1e-6,
        min_samples_per_class: int | None = None,
        true_positives_only: bool = True,
    ):
        self.ridge_scale = ridge_scale
        self.min_samples_per_class = min_samples_per_class
        self.true_positives_only = true_positives_only

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        k = X.shape[1]
        y = y.astype(np.int64)
        if y.min() < 0 or y.max() >= k:
            raise ValueError(f"labels must be class ids in 0..{k - 1}")
        config = FitConfig(
            ridge_scale=self.ridge_scale,
            min_samples_per_class=self.min_samples_per_class,
        )
        if self.true_positives_only:
            keep = np.argmax(X, axis=1) == y
            X, y = X[keep], y[keep]
        min_samples = config.resolved_min_samples(k)
        self.gaussians_ = tuple(
            fit_gaussian(X[y == c], config, class_id=c, min_samples=min_samples) for c in range(k)
        )
        self.classes_ = np.arange(k)
        self.n_features_in_ = k
        self.means_ = np.stack([g.mean for g in self.gaussians_])
        self.counts_ = np.array([g.sample_count for g in self.gaussians_])
        self.valid_ = np.array([g.valid for g in self.gaussians_])
        return self

    @classmethod
    def from_bank(cls, bank: GaussianBank) -> "MahalanobisScorer":
        """Adopt the Gaussians of an already fitted bank."""
        est = cls(
            ridge_scale=bank.config.ridge_scale,
            min_samples_per_class=bank.config.min_samples_per_class,
        )
        est.gaussians_ = bank.gaussians
        est.classes_ = np.arange(bank.n_classes)
        est.n_features_in_ = bank.n_classes
        est.means_ = np.stack([g.mean for g in bank.gaussians])
        est.counts_ = np.array([g.sample_count for g in bank.gaussians])
        est.valid_ = np.array([g.valid for g in bank.gaussians])
        return est

    def predict(self, X):
        """Argmax class per row; ties resolve to the lowest class id."""
        check_is_fitted(self, "gaussians_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return np.argmax(X, axis=1)

    def mahalanobis(self, X, classes=None):
        """Distance of each row to the Gaussian of ``classes`` (default:
        the row's predicted class). Invalid classes give infinity."""
        check_is_fitted(self, "gaussians_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        if classes is None:
            classes = np.argmax(X, axis=1)
        else:
            classes = np.asarray(classes, dtype=np.int64)
            if classes.shape != (X.shape[0],):
                raise ValueError("classes must give one class id per row")
            if classes.min() < 0 or classes.max() >= self.n_features_in_:
                raise ValueError(f"class ids must be in 0..{self.n_features_in_ - 1}")
        out = np.full(X.shape[0], np.inf)
        for c in np.unique(classes):
            gaussian = self.gaussians_[int(c)]
            if not gaussian.valid:
                continue
            idx = np.flatnonzero(classes == c)
            out[idx] = gaussian_distances(X[idx], gaussian)
        return out

    def score_samples(self, X):
        """Negative distance to the predicted class: higher means more
        typical for what the model predicted."""
        return -self.mahalanobis(X)
