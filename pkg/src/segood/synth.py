"""Synthetic dataset generation with planted ground truth.

Each pixel draws a positive random vector concentrated at a designated
class mean (multiplicative lognormal noise, renormalized to the simplex)
and its argmax is forced onto the designated class by swapping two
components when noise flipped the order. Three pixel kinds exist:

* inliers: designated class == label, so argmax == label.
* planted misclassifications: drawn at another class's mean (spread
  scaled by ``misclassification_spread_factor``), label kept, so the
  prediction is wrong but the vector looks like its predicted class.
* planted outliers: drawn at another class's mean, then pushed toward
  uniform by adding ``outlier_shift`` to every component and
  renormalizing. The push preserves the argmax but moves the vector away
  from every class mean, so outliers are both wrong and far.

The ground-truth sidecar records the generator parameters, the planted
pixel indices per sample, and the empirical component means/sds of the
true-positive population per class; the latter are the reference for fit
recovery checks (the planted design means differ from the population
means at order spread^2 because of the renormalization).

Generation is a pure function of the spec: same seed, same bytes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import ClassRegistry, write_label_mask, write_softmax_tensor
from .errors import ValidationError
from ._util import atomic_write_text, canonical_json, image_rng

GROUND_TRUTH_FILENAME = "ground_truth.json"
MANIFEST_FILENAME = "manifest.json"

_STREAM_SYNTH = 1013


def default_class_means(n_classes: int, concentration: float) -> np.ndarray:
    """One mean per class: ``concentration`` mass on its own component,
    the rest spread evenly."""
    if not (0.0 < concentration < 1.0):
        raise ValidationError(f"concentration must be in (0, 1), got {concentration}")
    off = (1.0 - concentration) / (n_classes - 1)
    means = np.full((n_classes, n_classes), off)
    np.fill_diagonal(means, concentration)
    return means


def shifted_means(means: np.ndarray, magnitude: float, seed: int) -> np.ndarray:
    """Perturb the off-diagonal structure of each class mean while keeping
    its dominant component, emulating a domain shift that leaves argmax
    behavior intact but moves vectors off the original distributions."""
    means = np.asarray(means, dtype=np.float64)
    out = means.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 77]))
    k = means.shape[0]
    for c in range(k):
        off = np.arange(k) != c
        w = means[c, off] * np.exp(magnitude * rng.standard_normal(k - 1))
        w *= (1.0 - means[c, c]) / w.sum()
        out[c, off] = w
    return out


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for one synthetic dataset."""

    n_classes: int = 19
    height: int = 32
    width: int = 32
    n_images: int = 4
    class_means: np.ndarray | None = None
    concentration: float = 0.7
    spread: float = 0.08
    misclassification_rate: float = 0.0
    misclassification_spread_factor: float = 1.0
    outlier_rate: float = 0.0
    outlier_shift: float = 0.0
    ignore_rate: float = 0.0
    rng_seed: int = 0
    name: str = "synthetic"
    location_tag: str = "synthetic"

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValidationError(f"need at least 2 classes, got {self.n_classes}")
        if self.height < 1 or self.width < 1 or self.n_images < 1:
            raise ValidationError("height, width and n_images must be positive")
        for name in ("misclassification_rate", "outlier_rate", "ignore_rate"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        if self.misclassification_rate + self.outlier_rate > 1.0:
            raise ValidationError("misclassification_rate + outlier_rate must not exceed 1")
        if self.spread < 0.0 or self.misclassification_spread_factor < 0.0:
            raise ValidationError("spread parameters must be non-negative")
        if self.outlier_shift < 0.0:
            raise ValidationError(f"outlier_shift must be non-negative, got {self.outlier_shift}")
        if self.class_means is not None:
            m = np.asarray(self.class_means, dtype=np.float64)
            if m.shape != (self.n_classes, self.n_classes):
                raise ValidationError(
                    f"class_means must be ({self.n_classes}, {self.n_classes}), got {m.shape}"
                )
            if (m <= 0.0).any():
                raise ValidationError("class_means components must be positive")
            object.__setattr__(self, "class_means", m)

    def resolved_means(self) -> np.ndarray:
        if self.class_means is not None:
            return self.class_means
        return default_class_means(self.n_classes, self.concentration)

    def to_dict(self) -> dict:
        d = {
            "n_classes": self.n_classes,
            "height": self.height,
            "width": self.width,
            "n_images": self.n_images,
            "class_means": None if self.class_means is None else np.asarray(self.class_means).tolist(),
            "concentration": self.concentration,
            "spread": self.spread,
            "misclassification_rate": self.misclassification_rate,
            "misclassification_spread_factor": self.misclassification_spread_factor,
            "outlier_rate": self.outlier_rate,
            "outlier_shift": self.outlier_shift,
            "ignore_rate": self.ignore_rate,
            "rng_seed": self.rng_seed,
            "name": self.name,
            "location_tag": self.location_tag,
        }
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        known = dict(doc)
        if known.get("class_means") is not None:
            known["class_means"] = np.asarray(known["class_means"], dtype=np.float64)
        try:
            return cls(**known)
        except TypeError as exc:
            raise ValidationError(f"bad synth spec: {exc}") from exc


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """What the generator actually planted, kept beside the dataset."""

    spec: SynthSpec
    manifest_path: Path
    registry: ClassRegistry
    population_counts: np.ndarray
    population_means: np.ndarray
    population_sds: np.ndarray
    planted: dict


def _registry_for(spec: SynthSpec) -> ClassRegistry:
    return ClassRegistry(
        class_names=tuple(f"class_{c:02d}" for c in range(spec.n_classes)),
        ignore_id=255,
    )


def _generate_image(spec: SynthSpec, means: np.ndarray, image_index: int):
    k = spec.n_classes
    n = spec.height * spec.width
    rng = image_rng(spec.rng_seed, image_index, _STREAM_SYNTH)

    labels = (np.arange(n) + image_index) % k
    r = rng.random(n)
    is_outlier = r < spec.outlier_rate
    is_mis = ~is_outlier & (r < spec.outlier_rate + spec.misclassification_rate)
    other = (labels + 1 + rng.integers(0, k - 1, size=n)) % k
    planted = is_outlier | is_mis
    target = np.where(planted, other, labels)

    sigma = np.full(n, spec.spread)
    sigma[is_mis] = spec.spread * spec.misclassification_spread_factor
    vectors = means[target] * np.exp(sigma[:, None] * rng.standard_normal((n, k)))
    vectors /= vectors.sum(axis=1, keepdims=True)

    # force the argmax onto the designated class by swapping two components
    am = np.argmax(vectors, axis=1)
    rows = np.flatnonzero(am != target)
    if rows.size:
        hi = vectors[rows, am[rows]].copy()
        vectors[rows, am[rows]] = vectors[rows, target[rows]]
        vectors[rows, target[rows]] = hi

    if is_outlier.any() and spec.outlier_shift > 0.0:
        s = spec.outlier_shift
        vectors[is_outlier] = (vectors[is_outlier] + s) / (1.0 + k * s)

    ignored = rng.random(n) < spec.ignore_rate
    mask = labels.astype(np.int32)
    mask[ignored] = 255

    tensor = vectors.astype(np.float32).reshape(spec.height, spec.width, k)
    return tensor, mask.reshape(spec.height, spec.width), labels, is_outlier, is_mis, ignored


def generate(spec: SynthSpec, out_dir: Path | str) -> GroundTruth:
    """Write the dataset (tensors, masks, manifest, ground-truth sidecar)
    under ``out_dir`` and return the planted ground truth."""
    out_dir = Path(out_dir)
    registry = _registry_for(spec)
    means = spec.resolved_means()
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    k = spec.n_classes
    counts = np.zeros(k, dtype=np.int64)
    sums = np.zeros((k, k))
    sums_sq = np.zeros((k, k))
    planted: dict[str, dict] = {}
    samples = []
    for i in range(spec.n_images):
        sid = f"img_{i:04d}"
        tensor, mask, labels, is_outlier, is_mis, ignored = _generate_image(spec, means, i)
        write_softmax_tensor(out_dir / "tensors" / f"{sid}.npy", tensor)
        write_label_mask(out_dir / "labels" / f"{sid}.png", mask, registry)
        samples.append({"id": sid, "tensor": f"tensors/{sid}.npy", "label": f"labels/{sid}.png"})
        planted[sid] = {
            "outliers": np.flatnonzero(is_outlier).tolist(),
            "misclassified": np.flatnonzero(is_mis).tolist(),
            "ignored": np.flatnonzero(ignored).tolist(),
        }
        # true positives: inliers whose label survived in the mask
        tp = ~(is_outlier | is_mis) & ~ignored
        flat = tensor.reshape(-1, k).astype(np.float64)
        for c in range(k):
            rows = tp & (labels == c)
            counts[c] += int(rows.sum())
            sums[c] += flat[rows].sum(axis=0)
            sums_sq[c] += (flat[rows] ** 2).sum(axis=0)

    with np.errstate(invalid="ignore", divide="ignore"):
        pop_means = sums / counts[:, None]
        pop_sds = np.sqrt(np.maximum(sums_sq / counts[:, None] - pop_means**2, 0.0))

    manifest_doc = {
        "schema": 1,
        "name": spec.name,
        "location_tag": spec.location_tag,
        "registry": registry.to_dict(),
        "samples": samples,
    }
    manifest_path = out_dir / MANIFEST_FILENAME
    atomic_write_text(manifest_path, canonical_json(manifest_doc) + "\n")

    ground_truth_doc = {
        "schema": 1,
        "generator": {**spec.to_dict(), "class_means": means.tolist()},
        "population": {
            "counts": counts.tolist(),
            "means": pop_means.tolist(),
            "sds": pop_sds.tolist(),
        },
        "planted": planted,
    }
    atomic_write_text(out_dir / GROUND_TRUTH_FILENAME, canonical_json(ground_truth_doc) + "\n")

    return GroundTruth(
        spec=spec,
        manifest_path=manifest_path,
        registry=registry,
        population_counts=counts,
        population_means=pop_means,
        population_sds=pop_sds,
        planted=planted,
    )


def load_ground_truth(path: Path | str) -> dict:
    """Read a ground-truth sidecar back as a plain dict."""
    return json.loads(Path(path).read_text("utf-8"))
