"""Class-conditional Gaussian estimation over softmax outputs.

For every class c the bank holds the mean and covariance of the softmax
vectors of true-positive pixels: pixels whose predicted class (argmax)
and ground-truth label both equal c. The covariance uses the biased 1/N
estimator. The stored precision matrix is the inverse of the ridge-
regularized covariance S + lambda*I with lambda = ridge_scale * tr(S)/K
(falling back to ridge_scale itself when the trace is zero), so it exists
even though softmax vectors live on a simplex and S alone is singular.

Pixel pools are capped twice: per class per image, and per class over the
whole dataset. Both caps draw uniform subsamples keyed by a seed and the
image's position in the manifest, so the fitted bank is a pure function
of (manifest, config) no matter how images are batched or ordered.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .datasets import ClassRegistry, DatasetManifest, LabelMask, SoftmaxTensor, load_label_mask, load_softmax_tensor, validate_pair
from .errors import EmptyDatasetError, IntegrityError, SegoodError, ValidationError
from ._util import atomic_write_bytes, canonical_json, image_rng, sha256_of_json

BANK_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FitConfig:
    """Knobs for bank fitting.

    :param max_pixels_per_class: dataset-wide pool cap per class.
    :param max_pixels_per_class_per_image: cap on pixels one image may
        contribute to one class's pool.
    :param ridge_scale: relative ridge strength for covariance inversion.
    :param min_samples_per_class: pools smaller than this yield an invalid
        class; None means K + 1, resolved at fit time.
    :param rng_seed: seed for all subsampling draws.
    """

    max_pixels_per_class: int = 1_000_000
    max_pixels_per_class_per_image: int = 10_000
    ridge_scale: float = 1e-6
    min_samples_per_class: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.max_pixels_per_class < 1 or self.max_pixels_per_class_per_image < 1:
            raise ValidationError("pixel caps must be positive")
        if self.max_pixels_per_class_per_image > self.max_pixels_per_class:
            raise ValidationError(
                f"per-image cap {self.max_pixels_per_class_per_image} exceeds "
                f"per-class cap {self.max_pixels_per_class}"
            )
        if not (self.ridge_scale > 0.0):
            raise ValidationError(f"ridge_scale must be positive, got {self.ridge_scale}")
        if self.min_samples_per_class is not None and self.min_samples_per_class < 2:
            raise ValidationError("min_samples_per_class must be at least 2")

    def resolved_min_samples(self, n_classes: int) -> int:
        return self.min_samples_per_class if self.min_samples_per_class is not None else n_classes + 1

    def to_dict(self) -> dict:
        return {
            "max_pixels_per_class": self.max_pixels_per_class,
            "max_pixels_per_class_per_image": self.max_pixels_per_class_per_image,
            "ridge_scale": self.ridge_scale,
            "min_samples_per_class": self.min_samples_per_class,
            "rng_seed": self.rng_seed,
        }


@dataclass(frozen=True, eq=False)
class ClassGaussian:
    """Fitted Gaussian of one class: mean, biased covariance, regularized
    precision and the ridge value that produced it."""

    class_id: int
    mean: np.ndarray
    covariance: np.ndarray
    precision: np.ndarray
    ridge: float
    sample_count: int
    valid: bool


@dataclass(frozen=True, eq=False)
class GaussianBank:
    registry: ClassRegistry
    config: FitConfig
    gaussians: tuple[ClassGaussian, ...]
    provenance: dict

    @property
    def n_classes(self) -> int:
        return self.registry.n_classes


@dataclass(frozen=True, eq=False)
class CorrelationMatrix:
    """Pearson correlation between class mean vectors across the K softmax
    components. ``degenerate`` flags classes whose mean has zero variance
    (their rows/columns are NaN). The diagonal is reported but meant to be
    masked in rendering."""

    values: np.ndarray
    basis: str
    degenerate: np.ndarray


# ---------------------------------------------------------------------------
# True-positive pixel pools

_STREAM_POOL = 11


class PixelReservoir:
    """Per-class pools of true-positive softmax vectors under both caps.

    Every candidate pixel receives two uniform priorities from a generator
    keyed by (seed, image_key, class): the first decides the per-image
    subsample (keep the smallest), the second the dataset-wide pool (keep
    the globally smallest). Keep-smallest selection over per-pixel keys is
    a uniform sample and is independent of insertion order, so merging
    images in any order yields the same pool.
    """

    def __init__(self, n_classes: int, config: FitConfig):
        self.n_classes = n_classes
        self.config = config
        self._n_images = 0
        # per class: list of (priority, image_key, pixel_index, vector) column blocks
        self._pri = [[] for _ in range(n_classes)]
        self._key = [[] for _ in range(n_classes)]
        self._idx = [[] for _ in range(n_classes)]
        self._vec = [[] for _ in range(n_classes)]
        self._count = [0] * n_classes
        self.total_candidates = [0] * n_classes

    def add_image(self, tensor: SoftmaxTensor, mask: LabelMask, image_key: int | None = None) -> None:
        validate_pair(tensor, mask)
        if tensor.n_classes != self.n_classes:
            raise ValidationError(
                f"tensor has K={tensor.n_classes}, reservoir was built for {self.n_classes}"
            )
        if image_key is None:
            image_key = self._n_images
        self._n_images += 1

        data = tensor.data.reshape(-1, self.n_classes)
        pred = np.argmax(data, axis=1)
        labels = mask.data.reshape(-1)
        cap_img = self.config.max_pixels_per_class_per_image

        for c in range(self.n_classes):
            sel = np.flatnonzero((pred == c) & (labels == c))
            m = sel.size
            self.total_candidates[c] += m
            if m == 0:
                continue
            rng = image_rng(self.config.rng_seed, image_key, _STREAM_POOL + c)
            u_image = rng.random(m)
            u_pool = rng.random(m)
            if m > cap_img:
                keep = np.argsort(u_image, kind="stable")[:cap_img]
                sel = sel[keep]
                u_pool = u_pool[keep]
            self._pri[c].append(u_pool)
            self._key[c].append(np.full(sel.size, image_key, dtype=np.int64))
            self._idx[c].append(sel.astype(np.int64))
            self._vec[c].append(data[sel].astype(np.float64))
            self._count[c] += sel.size
            if self._count[c] > 2 * self.config.max_pixels_per_class:
                self._compact(c, self.config.max_pixels_per_class)

    def _compact(self, c: int, limit: int) -> None:
        pri = np.concatenate(self._pri[c])
        key = np.concatenate(self._key[c])
        idx = np.concatenate(self._idx[c])
        vec = np.concatenate(self._vec[c])
        order = np.lexsort((idx, key, pri))[:limit]
        self._pri[c] = [pri[order]]
        self._key[c] = [key[order]]
        self._idx[c] = [idx[order]]
        self._vec[c] = [vec[order]]
        self._count[c] = order.size

    def pools(self) -> list[np.ndarray]:
        """Final per-class pools, rows ordered by (priority, image, pixel)."""
        out = []
        for c in range(self.n_classes):
            if self._count[c] == 0:
                out.append(np.empty((0, self.n_classes), dtype=np.float64))
                continue
            self._compact(c, self.config.max_pixels_per_class)
            out.append(self._vec[c][0])
        return out


def select_true_positive_pixels(
    tensor: SoftmaxTensor,
    mask: LabelMask,
    config: FitConfig,
    reservoir: PixelReservoir,
    image_key: int | None = None,
) -> PixelReservoir:
    """Feed one image's true-positive pixels into the per-class pools."""
    if reservoir.config is not config and reservoir.config != config:
        raise ValidationError("reservoir was created with a different FitConfig")
    reservoir.add_image(tensor, mask, image_key=image_key)
    return reservoir


# ---------------------------------------------------------------------------
# Gaussian fitting


def _regularized_precision(covariance: np.ndarray, ridge_scale: float) -> tuple[np.ndarray, float]:
    k = covariance.shape[0]
    trace = float(np.trace(covariance))
    ridge = ridge_scale * trace / k if trace > 0.0 else ridge_scale
    reg = covariance + ridge * np.eye(k)
    try:
        factor = scipy.linalg.cho_factor(reg, lower=True)
        precision = scipy.linalg.cho_solve(factor, np.eye(k))
    except scipy.linalg.LinAlgError:
        precision = np.linalg.inv(reg)
    precision = (precision + precision.T) / 2.0
    return precision, ridge


def fit_gaussian(pool: np.ndarray, config: FitConfig, class_id: int = 0, *, min_samples: int | None = None) -> ClassGaussian:
    """Fit one class Gaussian from its (N, K) pixel pool.

    Empty pools produce a zero mean by convention; pools smaller than the
    minimum sample count are marked invalid but still fitted.
    """
    pool = np.asarray(pool, dtype=np.float64)
    if pool.ndim != 2:
        raise ValidationError(f"pool must be (N, K), got shape {pool.shape}")
    n, k = pool.shape
    if min_samples is None:
        min_samples = config.resolved_min_samples(k)
    if n == 0:
        mean = np.zeros(k)
        cov = np.zeros((k, k))
    else:
        mean = pool.sum(axis=0) / n
        centered = pool - mean
        # einsum keeps the reduction off BLAS so results do not depend on
        # the host's thread count
        cov = np.einsum("ni,nj->ij", centered, centered) / n
        cov = (cov + cov.T) / 2.0
    precision, ridge = _regularized_precision(cov, config.ridge_scale)
    for arr in (mean, cov, precision):
        arr.flags.writeable = False
    return ClassGaussian(
        class_id=class_id,
        mean=mean,
        covariance=cov,
        precision=precision,
        ridge=ridge,
        sample_count=n,
        valid=n >= min_samples,
    )


def precision_residual(gaussian: ClassGaussian) -> float:
    """max |(S + ridge*I) @ P - I|, should be ~0 for a healthy fit."""
    k = gaussian.covariance.shape[0]
    reg = gaussian.covariance + gaussian.ridge * np.eye(k)
    residual = np.einsum("ij,jk->ik", reg, gaussian.precision) - np.eye(k)
    return float(np.max(np.abs(residual)))


def fit_bank(manifest: DatasetManifest, config: FitConfig | None = None) -> GaussianBank:
    """Fit the full bank from a manifest: stream every sample's true
    positives through the capped pools, then fit one Gaussian per class."""
    if config is None:
        config = FitConfig()
    if not manifest.samples:
        raise EmptyDatasetError(f"manifest '{manifest.name}' lists no samples")
    k = manifest.registry.n_classes
    reservoir = PixelReservoir(k, config)
    for index, entry in enumerate(manifest.samples):
        try:
            tensor = load_softmax_tensor(entry.tensor_path, manifest.registry)
            mask = load_label_mask(entry.label_path, manifest.registry)
            validate_pair(tensor, mask)
        except SegoodError as exc:
            raise type(exc)(f"sample '{entry.sample_id}': {exc}") from exc
        reservoir.add_image(tensor, mask, image_key=index)
    min_samples = config.resolved_min_samples(k)
    pools = reservoir.pools()
    gaussians = tuple(
        fit_gaussian(pools[c], config, class_id=c, min_samples=min_samples) for c in range(k)
    )
    provenance = {
        "manifest_name": manifest.name,
        "location_tag": manifest.location_tag,
        "manifest_sha256": manifest.content_hash,
        "n_images": len(manifest.samples),
    }
    return GaussianBank(registry=manifest.registry, config=config, gaussians=gaussians, provenance=provenance)


# ---------------------------------------------------------------------------
# Class correlation


def class_correlation(bank: GaussianBank) -> CorrelationMatrix:
    """Pearson correlation between class mean vectors across components.

    Classes whose mean vector has zero variance across its K components
    (including unfitted classes with all-zero means) get NaN rows and are
    flagged in ``degenerate``.
    """
    if sum(g.valid for g in bank.gaussians) < 2:
        raise ValidationError("class correlation needs at least two valid classes")
    means = np.stack([g.mean for g in bank.gaussians])
    k = means.shape[0]
    centered = means - means.mean(axis=1, keepdims=True)
    sq = np.einsum("ij,ij->i", centered, centered)
    degenerate = sq == 0.0
    values = np.full((k, k), np.nan)
    good = ~degenerate
    if good.any():
        g = np.flatnonzero(good)
        cg = centered[g]
        nrm = np.sqrt(sq[g])
        cross = np.einsum("ij,kj->ik", cg, cg)
        block = cross / np.outer(nrm, nrm)
        block = np.clip(block, -1.0, 1.0)
        block[np.arange(g.size), np.arange(g.size)] = 1.0
        values[np.ix_(g, g)] = block
    values = (values + values.T) / 2.0
    values.flags.writeable = False
    degenerate.flags.writeable = False
    return CorrelationMatrix(values=values, basis="mean_vectors", degenerate=degenerate)


# ---------------------------------------------------------------------------
# Persistence


def _encode_matrix(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii")


def _decode_matrix(text: str, shape: tuple[int, ...], where: str) -> np.ndarray:
    try:
        raw = base64.b64decode(text.encode("ascii"), validate=True)
    except Exception as exc:
        raise IntegrityError(f"{where}: undecodable matrix payload: {exc}") from exc
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise IntegrityError(f"{where}: matrix payload has {len(raw)} bytes, expected {expected}")
    arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    arr.flags.writeable = False
    return arr


def _bank_payload(bank: GaussianBank) -> dict:
    return {
        "schema": BANK_SCHEMA_VERSION,
        "registry": bank.registry.to_dict(),
        "fit_config": bank.config.to_dict(),
        "provenance": bank.provenance,
        "classes": [
            {
                "class_id": g.class_id,
                "sample_count": g.sample_count,
                "valid": g.valid,
                "ridge": g.ridge,
                "mean": _encode_matrix(g.mean),
                "covariance": _encode_matrix(g.covariance),
                "precision": _encode_matrix(g.precision),
            }
            for g in bank.gaussians
        ],
    }


def save_bank(bank: GaussianBank, path: Path | str) -> None:
    """Write the bank as a JSON envelope with base64 float64 matrices and a
    SHA-256 content hash. The write is atomic."""
    payload = _bank_payload(bank)
    document = dict(payload)
    document["sha256"] = sha256_of_json(payload)
    atomic_write_bytes(Path(path), (canonical_json(document) + "\n").encode("utf-8"))


def load_bank(path: Path | str) -> GaussianBank:
    """Load a bank file, verifying its content hash. Any structural damage
    (truncation, tampering, bad base64) is an :class:`IntegrityError`."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read bank file {path}: {exc}") from exc
    try:
        document = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: bank file is not valid JSON: {exc}") from exc
    if not isinstance(document, dict) or "sha256" not in document:
        raise IntegrityError(f"{path}: bank file has no content hash")
    stored = document.pop("sha256")
    actual = sha256_of_json(document)
    if stored != actual:
        raise IntegrityError(f"{path}: content hash mismatch: stored {stored}, computed {actual}")
    try:
        if document["schema"] != BANK_SCHEMA_VERSION:
            raise IntegrityError(f"{path}: unsupported bank schema {document['schema']}")
        registry = ClassRegistry.from_pairs(
            [(c["id"], c["name"]) for c in document["registry"]["classes"]],
            document["registry"]["ignore_id"],
        )
        config = FitConfig(**document["fit_config"])
        k = registry.n_classes
        gaussians = []
        for c in document["classes"]:
            where = f"{path}: class {c.get('class_id')}"
            gaussians.append(
                ClassGaussian(
                    class_id=int(c["class_id"]),
                    mean=_decode_matrix(c["mean"], (k,), where),
                    covariance=_decode_matrix(c["covariance"], (k, k), where),
                    precision=_decode_matrix(c["precision"], (k, k), where),
                    ridge=float(c["ridge"]),
                    sample_count=int(c["sample_count"]),
                    valid=bool(c["valid"]),
                )
            )
        if [g.class_id for g in gaussians] != list(range(k)):
            raise IntegrityError(f"{path}: bank must define classes 0..{k - 1} in order")
        provenance = document["provenance"]
    except IntegrityError:
        raise
    except (KeyError, TypeError, ValueError, SegoodError) as exc:
        raise IntegrityError(f"{path}: malformed bank structure: {exc}") from exc
    return GaussianBank(registry=registry, config=config, gaussians=tuple(gaussians), provenance=provenance)
