import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segood import (
    EmptyDatasetError,
    FitConfig,
    IntegrityError,
    PixelReservoir,
    ValidationError,
    class_correlation,
    fit_bank,
    fit_gaussian,
    load_bank,
    load_manifest,
    precision_residual,
    save_bank,
    select_true_positive_pixels,
)
from segood.bank import GaussianBank
from segood.oracles import oracle_pearson

from conftest import as_mask, as_tensor, make_registry, one_hot_image, random_simplex, write_dataset


class TestFitConfig:
    def test_defaults_match_protocol(self):
        cfg = FitConfig()
        assert cfg.max_pixels_per_class == 10**6
        assert cfg.max_pixels_per_class_per_image == 10**4
        assert cfg.ridge_scale == 1e-6
        assert cfg.min_samples_per_class is None
        assert cfg.resolved_min_samples(19) == 20

    def test_per_image_cap_cannot_exceed_class_cap(self):
        with pytest.raises(ValidationError):
            FitConfig(max_pixels_per_class=10, max_pixels_per_class_per_image=20)

    def test_ridge_must_be_positive(self):
        with pytest.raises(ValidationError):
            FitConfig(ridge_scale=0.0)


class TestPixelSelection:
    def test_per_image_cap_applies(self):
        k = 3
        labels = np.zeros((10, 10), dtype=np.int32)  # 100 pixels of class 0
        cfg = FitConfig(max_pixels_per_class=10, max_pixels_per_class_per_image=5)
        res = PixelReservoir(k, cfg)
        select_true_positive_pixels(as_tensor(one_hot_image(labels, k)), as_mask(labels), cfg, res)
        assert res.pools()[0].shape == (5, k)

    def test_no_true_positives_leaves_pool_empty(self):
        k = 3
        labels = np.zeros((4, 4), dtype=np.int32)
        tensor = one_hot_image(np.ones((4, 4), dtype=np.int32), k)  # predicts class 1
        cfg = FitConfig()
        res = PixelReservoir(k, cfg)
        res.add_image(as_tensor(tensor), as_mask(labels))
        assert res.pools()[0].shape == (0, k)
        assert res.pools()[1].shape == (0, k)  # label 0 everywhere, no TP for class 1

    def test_uncapped_pool_equals_exact_tp_set(self, rng):
        """With caps effectively infinite the pool is the exact set of
        true-positive vectors found by a brute-force scan."""
        k = 4
        cfg = FitConfig(max_pixels_per_class=10**9, max_pixels_per_class_per_image=10**9)
        res = PixelReservoir(k, cfg)
        expected = [[] for _ in range(k)]
        for img in range(3):
            data = random_simplex(rng, 8, 8, k)
            labels = rng.integers(0, k + 1, (8, 8)).astype(np.int32)
            labels[labels == k] = 255
            res.add_image(as_tensor(data), as_mask(labels), image_key=img)
            pred = np.argmax(data, axis=2)
            for r in range(8):
                for c in range(8):
                    if labels[r, c] != 255 and pred[r, c] == labels[r, c]:
                        expected[labels[r, c]].append(data[r, c].astype(np.float64))
        pools = res.pools()
        for c in range(k):
            exp = np.array(sorted(map(tuple, expected[c]))) if expected[c] else np.empty((0, k))
            got = np.array(sorted(map(tuple, pools[c]))) if pools[c].size else np.empty((0, k))
            assert np.array_equal(exp, got)

    def test_ignore_pixels_never_selected(self):
        k = 2
        labels = np.full((4, 4), 255, dtype=np.int32)
        cfg = FitConfig()
        res = PixelReservoir(k, cfg)
        res.add_image(as_tensor(one_hot_image(np.zeros((4, 4), int), k)), as_mask(labels))
        assert res.pools()[0].shape[0] == 0

    def test_insertion_order_does_not_matter(self, rng):
        """Adding the same images under the same keys in any order gives
        byte-identical pools (parallel-merge determinism)."""
        k = 3
        cfg = FitConfig(max_pixels_per_class=40, max_pixels_per_class_per_image=25, rng_seed=7)
        images = []
        for i in range(5):
            data = random_simplex(rng, 6, 6, k)
            labels = rng.integers(0, k, (6, 6)).astype(np.int32)
            images.append((as_tensor(data), as_mask(labels)))
        res_a = PixelReservoir(k, cfg)
        for i, (t, m) in enumerate(images):
            res_a.add_image(t, m, image_key=i)
        res_b = PixelReservoir(k, cfg)
        for i in [3, 0, 4, 1, 2]:
            t, m = images[i]
            res_b.add_image(t, m, image_key=i)
        for pa, pb in zip(res_a.pools(), res_b.pools()):
            assert pa.tobytes() == pb.tobytes()

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 30), st.integers(1, 30))
    def test_caps_never_exceeded(self, seed, cap_class, cap_image):
        cap_image = min(cap_image, cap_class)
        rng = np.random.default_rng(seed)
        k = 3
        cfg = FitConfig(max_pixels_per_class=cap_class, max_pixels_per_class_per_image=cap_image, rng_seed=seed)
        res = PixelReservoir(k, cfg)
        for i in range(3):
            data = random_simplex(rng, 7, 7, k)
            labels = rng.integers(0, k, (7, 7)).astype(np.int32)
            res.add_image(as_tensor(data), as_mask(labels), image_key=i)
        for c, pool in enumerate(res.pools()):
            assert pool.shape[0] <= cap_class
            assert pool.shape[0] <= res.total_candidates[c]


class TestFitGaussian:
    def test_hand_computed_two_class_pool(self):
        pool = np.array([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3]])
        g = fit_gaussian(pool, FitConfig(), class_id=0, min_samples=3)
        assert np.allclose(g.mean, [0.8, 0.2], atol=1e-15)
        expected_cov = np.array([[0.02, -0.02], [-0.02, 0.02]]) / 3.0
        assert np.allclose(g.covariance, expected_cov, atol=1e-15)
        assert g.valid
        assert g.sample_count == 3
        assert precision_residual(g) <= 1e-6

    def test_identical_vectors_zero_covariance(self):
        # dyadic components so the mean and the centering are exact
        pool = np.tile([0.5, 0.25, 0.25], (10, 1))
        cfg = FitConfig(ridge_scale=1e-6)
        g = fit_gaussian(pool, cfg, min_samples=4)
        assert np.all(g.covariance == 0.0)
        # trace zero: ridge falls back to ridge_scale, precision is I/ridge
        assert g.ridge == 1e-6
        assert np.allclose(g.precision, np.eye(3) / 1e-6)

    def test_empty_pool_convention(self):
        g = fit_gaussian(np.empty((0, 4)), FitConfig(), min_samples=5)
        assert not g.valid
        assert np.all(g.mean == 0.0)
        assert g.sample_count == 0

    def test_small_pool_invalid_but_fitted(self):
        pool = np.array([[0.6, 0.4], [0.5, 0.5]])
        g = fit_gaussian(pool, FitConfig(), min_samples=3)
        assert not g.valid
        assert np.allclose(g.mean, [0.55, 0.45])

    def test_covariance_symmetric_and_psd(self, rng):
        pool = rng.random((500, 6))
        g = fit_gaussian(pool, FitConfig(), min_samples=7)
        assert np.max(np.abs(g.covariance - g.covariance.T)) <= 1e-9
        assert np.linalg.eigvalsh(g.covariance).min() >= -1e-9

    def test_precision_residual_bound(self, rng):
        for _ in range(10):
            pool = rng.random((200, 5))
            g = fit_gaussian(pool, FitConfig(), min_samples=6)
            assert precision_residual(g) <= 1e-6

    def test_ridge_trace_rule(self, rng):
        pool = rng.random((100, 4))
        g = fit_gaussian(pool, FitConfig(ridge_scale=1e-3), min_samples=5)
        assert g.ridge == pytest.approx(1e-3 * np.trace(g.covariance) / 4, rel=1e-12)


class TestFitBank:
    def _dataset(self, tmp_path, rng, k=3, n=4, side=12, seed_labels=True):
        reg = make_registry(k)
        tensors, masks = [], []
        for i in range(n):
            labels = rng.integers(0, k, (side, side)).astype(np.int32)
            noise = random_simplex(rng, side, side, k) * 0.2
            data = one_hot_image(labels, k, confidence=0.8).astype(np.float64) + noise
            data /= data.sum(axis=2, keepdims=True)
            tensors.append(data.astype(np.float32))
            masks.append(labels)
        return write_dataset(tmp_path / "ds", reg, tensors, masks)

    def test_single_image_bank_equals_direct_fit(self, tmp_path, rng):
        path = self._dataset(tmp_path, rng, n=1)
        man = load_manifest(path)
        cfg = FitConfig(rng_seed=5)
        bank = fit_bank(man, cfg)
        res = PixelReservoir(3, cfg)
        from segood import load_label_mask, load_softmax_tensor

        t = load_softmax_tensor(man.samples[0].tensor_path, man.registry)
        m = load_label_mask(man.samples[0].label_path, man.registry)
        res.add_image(t, m, image_key=0)
        for c, pool in enumerate(res.pools()):
            direct = fit_gaussian(pool, cfg, class_id=c, min_samples=cfg.resolved_min_samples(3))
            assert np.array_equal(bank.gaussians[c].mean, direct.mean)
            assert np.array_equal(bank.gaussians[c].covariance, direct.covariance)

    def test_same_seed_same_bank(self, tmp_path, rng):
        path = self._dataset(tmp_path, rng)
        man = load_manifest(path)
        b1 = fit_bank(man, FitConfig(rng_seed=9, max_pixels_per_class=50, max_pixels_per_class_per_image=20))
        b2 = fit_bank(man, FitConfig(rng_seed=9, max_pixels_per_class=50, max_pixels_per_class_per_image=20))
        for g1, g2 in zip(b1.gaussians, b2.gaussians):
            assert g1.mean.tobytes() == g2.mean.tobytes()
            assert g1.covariance.tobytes() == g2.covariance.tobytes()
            assert g1.precision.tobytes() == g2.precision.tobytes()

    def test_different_seed_different_pool(self, tmp_path, rng):
        path = self._dataset(tmp_path, rng)
        man = load_manifest(path)
        cfg = dict(max_pixels_per_class=50, max_pixels_per_class_per_image=20)
        b1 = fit_bank(man, FitConfig(rng_seed=1, **cfg))
        b2 = fit_bank(man, FitConfig(rng_seed=2, **cfg))
        assert any(
            g1.mean.tobytes() != g2.mean.tobytes() for g1, g2 in zip(b1.gaussians, b2.gaussians)
        )

    def test_empty_manifest_rejected(self, tmp_path):
        reg = make_registry(3)
        path = write_dataset(tmp_path / "ds", reg, [], [])
        with pytest.raises(EmptyDatasetError):
            fit_bank(load_manifest(path))

    def test_broken_sample_aborts_with_id(self, tmp_path, rng):
        from segood import ValidationError as VErr

        path = self._dataset(tmp_path, rng)
        man = load_manifest(path)
        bad = np.full((12, 12, 3), 0.9, dtype=np.float32)
        from segood import write_softmax_tensor

        write_softmax_tensor(man.samples[1].tensor_path, bad)
        with pytest.raises(VErr) as err:
            fit_bank(man)
        assert "s001" in str(err.value)

    def test_provenance_records_manifest(self, tmp_path, rng):
        path = self._dataset(tmp_path, rng)
        man = load_manifest(path)
        bank = fit_bank(man)
        assert bank.provenance["manifest_name"] == "testset"
        assert bank.provenance["manifest_sha256"] == man.content_hash


class TestCorrelation:
    def _bank_from_means(self, means, valid=None):
        means = np.asarray(means, dtype=np.float64)
        k = means.shape[0]
        cfg = FitConfig()
        gaussians = []
        for c in range(k):
            g = fit_gaussian(np.tile(means[c], (k + 2, 1)), cfg, class_id=c, min_samples=k + 1)
            if valid is not None and not valid[c]:
                g = fit_gaussian(np.empty((0, k)), cfg, class_id=c, min_samples=k + 1)
            gaussians.append(g)
        return GaussianBank(registry=make_registry(k), config=cfg, gaussians=tuple(gaussians), provenance={})

    def test_identical_means_correlate_to_one(self):
        m = np.array([0.5, 0.3, 0.2])
        bank = self._bank_from_means([m, m, [0.2, 0.3, 0.5]])
        corr = class_correlation(bank)
        assert corr.values[0, 1] == pytest.approx(1.0, abs=1e-12)
        assert corr.basis == "mean_vectors"

    def test_negative_affine_means_correlate_to_minus_one(self):
        a = np.array([0.5, 0.3, 0.2])
        b = -2.0 * a + 1.0  # exact negative affine image
        bank = self._bank_from_means([a, b, a[::-1]])
        corr = class_correlation(bank)
        assert corr.values[0, 1] == pytest.approx(-1.0, abs=1e-12)

    def test_matches_oracle_pearson(self, rng):
        means = rng.random((5, 5)) + 0.05
        bank = self._bank_from_means(means)
        corr = class_correlation(bank)
        for i in range(5):
            for j in range(5):
                if i == j:
                    assert corr.values[i, j] == 1.0
                else:
                    assert corr.values[i, j] == pytest.approx(
                        oracle_pearson(means[i], means[j]), abs=1e-12
                    )

    def test_symmetry_and_bounds(self, rng):
        means = rng.random((6, 6)) + 0.05
        corr = class_correlation(self._bank_from_means(means))
        assert np.array_equal(corr.values, corr.values.T)
        assert np.nanmax(np.abs(corr.values)) <= 1.0 + 1e-12

    def test_zero_variance_mean_flagged_nan(self):
        k = 3
        # constant row is exactly representable, so its variance is exactly 0
        means = [[0.25, 0.25, 0.25], [0.5, 0.3, 0.2], [0.2, 0.3, 0.5]]
        bank = self._bank_from_means(means)
        corr = class_correlation(bank)
        assert corr.degenerate[0]
        assert np.isnan(corr.values[0]).all()
        assert not np.isnan(corr.values[1, 2])

    def test_needs_two_valid_classes(self):
        bank = self._bank_from_means(np.eye(3) * 0.5 + 0.1, valid=[True, False, False])
        with pytest.raises(ValidationError):
            class_correlation(bank)


class TestBankPersistence:
    def _bank(self, tmp_path, rng):
        reg = make_registry(3)
        labels = rng.integers(0, 3, (10, 10)).astype(np.int32)
        t = one_hot_image(labels, 3)
        path = write_dataset(tmp_path / "ds", reg, [t], [labels])
        return fit_bank(load_manifest(path))

    def test_round_trip_bit_exact(self, tmp_path, rng):
        bank = self._bank(tmp_path, rng)
        save_bank(bank, tmp_path / "bank.json")
        back = load_bank(tmp_path / "bank.json")
        for g1, g2 in zip(bank.gaussians, back.gaussians):
            assert g1.mean.tobytes() == g2.mean.tobytes()
            assert g1.covariance.tobytes() == g2.covariance.tobytes()
            assert g1.precision.tobytes() == g2.precision.tobytes()
            assert g1.ridge == g2.ridge
            assert g1.sample_count == g2.sample_count
            assert g1.valid == g2.valid
        assert back.registry.class_names == bank.registry.class_names
        assert back.config == bank.config
        # loaded precisions still invert their regularized covariances
        for g in back.gaussians:
            assert precision_residual(g) <= 1e-6

    def test_truncated_file_is_integrity_error(self, tmp_path, rng):
        bank = self._bank(tmp_path, rng)
        path = tmp_path / "bank.json"
        save_bank(bank, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(IntegrityError):
            load_bank(path)

    def test_tampered_payload_is_integrity_error(self, tmp_path, rng):
        bank = self._bank(tmp_path, rng)
        path = tmp_path / "bank.json"
        save_bank(bank, path)
        import json

        # still valid JSON, but the payload no longer matches the stored hash
        doc = json.loads(path.read_text())
        doc["classes"][0]["sample_count"] += 1
        path.write_text(json.dumps(doc))
        with pytest.raises(IntegrityError):
            load_bank(path)

    def test_missing_file_is_integrity_error(self, tmp_path):
        with pytest.raises(IntegrityError):
            load_bank(tmp_path / "absent.json")
