import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from segood import FitConfig, MahalanobisScorer, fit_bank, fit_gaussian, load_manifest
from segood.oracles import oracle_mahalanobis

from conftest import make_registry, one_hot_image, random_simplex, write_dataset


def make_xy(rng, n=600, k=4, error_rate=0.15):
    """Flat rows: confident simplex vectors, a slice mislabeled."""
    y_pred = rng.integers(0, k, n)
    base = random_simplex(rng, 1, n, k)[0].astype(np.float64) * 0.4
    X = base + np.eye(k)[y_pred] * 0.6
    X /= X.sum(axis=1, keepdims=True)
    y = y_pred.copy()
    flip = rng.random(n) < error_rate
    y[flip] = (y[flip] + 1) % k
    return X, y


class TestSklearnContract:
    def test_get_set_params_round_trip(self):
        est = MahalanobisScorer(ridge_scale=1e-4, min_samples_per_class=30)
        params = est.get_params()
        assert params == {
            "ridge_scale": 1e-4,
            "min_samples_per_class": 30,
            "true_positives_only": True,
        }
        est.set_params(ridge_scale=1e-2)
        assert est.ridge_scale == 1e-2

    def test_clone_preserves_params(self):
        est = MahalanobisScorer(ridge_scale=1e-5, true_positives_only=False)
        twin = clone(est)
        assert twin.get_params() == est.get_params()

    def test_unfitted_predict_raises(self, rng):
        with pytest.raises(NotFittedError):
            MahalanobisScorer().predict(rng.random((3, 4)))

    def test_fit_returns_self_and_sets_attributes(self, rng):
        X, y = make_xy(rng)
        est = MahalanobisScorer()
        assert est.fit(X, y) is est
        assert est.n_features_in_ == 4
        assert np.array_equal(est.classes_, np.arange(4))
        assert est.means_.shape == (4, 4)
        assert est.counts_.sum() > 0
        assert est.valid_.all()

    def test_label_range_checked(self, rng):
        X, y = make_xy(rng)
        with pytest.raises(ValueError):
            MahalanobisScorer().fit(X, y + 10)

    def test_feature_count_checked_at_predict(self, rng):
        X, y = make_xy(rng)
        est = MahalanobisScorer().fit(X, y)
        with pytest.raises(ValueError):
            est.predict(rng.random((5, 3)))


class TestFitSemantics:
    def test_equals_direct_per_class_fit(self, rng):
        X, y = make_xy(rng)
        est = MahalanobisScorer().fit(X, y)
        config = FitConfig(ridge_scale=est.ridge_scale, min_samples_per_class=None)
        keep = np.argmax(X, axis=1) == y
        Xk, yk = X[keep], y[keep]
        for c in range(4):
            direct = fit_gaussian(Xk[yk == c], config, class_id=c, min_samples=5)
            assert np.array_equal(est.gaussians_[c].mean, direct.mean)
            assert np.array_equal(est.gaussians_[c].precision, direct.precision)

    def test_true_positive_filter_toggle(self, rng):
        X, y = make_xy(rng, error_rate=0.5)
        strict = MahalanobisScorer(true_positives_only=True).fit(X, y)
        loose = MahalanobisScorer(true_positives_only=False).fit(X, y)
        assert loose.counts_.sum() == len(y)
        assert strict.counts_.sum() == int((np.argmax(X, axis=1) == y).sum())
        assert not np.array_equal(strict.means_, loose.means_)

    def test_small_class_marked_invalid(self, rng):
        X, y = make_xy(rng, n=400, k=4, error_rate=0.0)
        # starve class 3 down to two rows, below min_samples = k + 1
        keep = y != 3
        keep[np.flatnonzero(y == 3)[:2]] = True
        X, y = X[keep], y[keep]
        est = MahalanobisScorer().fit(X, y)
        assert not est.valid_[3]
        assert est.valid_[:3].all()

    def test_min_samples_parameter(self, rng):
        X, y = make_xy(rng, n=100, k=4, error_rate=0.0)
        est = MahalanobisScorer(min_samples_per_class=10_000).fit(X, y)
        assert not est.valid_.any()


class TestScoring:
    def test_predict_is_argmax(self, rng):
        X, y = make_xy(rng)
        est = MahalanobisScorer().fit(X, y)
        assert np.array_equal(est.predict(X), np.argmax(X, axis=1))

    def test_mahalanobis_matches_oracle(self, rng):
        X, y = make_xy(rng)
        est = MahalanobisScorer().fit(X, y)
        probe = X[:10]
        d = est.mahalanobis(probe)
        pred = np.argmax(probe, axis=1)
        for i in range(10):
            g = est.gaussians_[pred[i]]
            ref = oracle_mahalanobis(probe[i], g.mean, g.covariance, g.ridge)
            assert d[i] == pytest.approx(ref, rel=1e-8, abs=1e-10)

    def test_explicit_classes_argument(self, rng):
        X, y = make_xy(rng)
        est = MahalanobisScorer().fit(X, y)
        probe = X[:6]
        forced = np.full(6, 2)
        d = est.mahalanobis(probe, classes=forced)
        g = est.gaussians_[2]
        for i in range(6):
            ref = oracle_mahalanobis(probe[i], g.mean, g.covariance, g.ridge)
            assert d[i] == pytest.approx(ref, rel=1e-8, abs=1e-10)
        with pytest.raises(ValueError):
            est.mahalanobis(probe, classes=np.full(6, 9))
        with pytest.raises(ValueError):
            est.mahalanobis(probe, classes=np.zeros(3, dtype=int))

    def test_invalid_class_scores_infinite(self, rng):
        X, y = make_xy(rng, error_rate=0.0)
        keep = y != 3
        est = MahalanobisScorer().fit(X[keep], y[keep])
        assert not est.valid_[3]
        d = est.mahalanobis(X[:5], classes=np.full(5, 3))
        assert np.isinf(d).all()

    def test_score_samples_is_negated_distance(self, rng):
        X, y = make_xy(rng)
        est = MahalanobisScorer().fit(X, y)
        assert np.array_equal(est.score_samples(X[:20]), -est.mahalanobis(X[:20]))


class TestFromBank:
    def test_adopted_bank_scores_identically(self, tmp_path, rng):
        k = 3
        labels = rng.integers(0, k, (20, 20)).astype(np.int32)
        noise = random_simplex(rng, 20, 20, k).astype(np.float64) * 0.3
        data = one_hot_image(labels, k, 0.7).astype(np.float64) + noise
        data /= data.sum(axis=2, keepdims=True)
        path = write_dataset(tmp_path / "ds", make_registry(k), [data.astype(np.float32)], [labels])
        bank = fit_bank(load_manifest(path))
        est = MahalanobisScorer.from_bank(bank)
        assert est.n_features_in_ == k
        probe = random_simplex(rng, 1, 40, k)[0].astype(np.float64)
        pred = np.argmax(probe, axis=1)
        d = est.mahalanobis(probe)
        for i in range(40):
            g = bank.gaussians[pred[i]]
            ref = oracle_mahalanobis(probe[i], g.mean, g.covariance, g.ridge)
            assert d[i] == pytest.approx(ref, rel=1e-8, abs=1e-10)
