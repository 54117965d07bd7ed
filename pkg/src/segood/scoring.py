"""Per-pixel class prediction and Mahalanobis distance maps.

The predicted class of a pixel is the argmax of its softmax vector, with
ties resolved to the lowest class id. A pixel abstains when its maximum
probability does not exceed the abstention threshold; abstained pixels
carry NO_CLASS and an infinite distance. Distances are computed against
the predicted class's Gaussian from the bank:

    d = sqrt((o - mean) @ precision @ (o - mean))

Squared distances may dip a hair below zero through rounding; values in
[-1e-9, 0) clamp to zero, anything lower is a NumericalError. Pixels
predicted as a class whose Gaussian is invalid get an infinite distance,
so they can never be accepted by a finite threshold.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bank import ClassGaussian, GaussianBank
from .datasets import LabelMask, SoftmaxTensor
from .errors import NumericalError, SchemaError, ValidationError

NO_CLASS = -1

NEGATIVE_TOLERANCE = -1e-9


@dataclass(frozen=True, eq=False)
class PredictionMap:
    """Argmax classes (NO_CLASS where abstained), abstention mask and the
    per-pixel maximum probability."""

    predicted: np.ndarray
    abstained: np.ndarray
    max_prob: np.ndarray
    abstain_threshold: float


@dataclass(frozen=True, eq=False)
class DistanceMap:
    """Per-pixel Mahalanobis distance to the predicted class, float64.
    Infinite where abstained or the predicted class is invalid."""

    distances: np.ndarray


@dataclass(frozen=True)
class DistanceStats:
    """Distance extrema over labeled, non-abstained, finite pixels."""

    md_min: float
    md_max: float
    n_eligible: int

    @property
    def empty(self) -> bool:
        return self.n_eligible == 0


def predict(tensor: SoftmaxTensor, abstain_threshold: float = 0.5) -> PredictionMap:
    """Argmax prediction with abstention. A threshold of 0 disables
    abstention (softmax maxima are always positive)."""
    if not (0.0 <= abstain_threshold < 1.0):
        raise ValidationError(f"abstain_threshold must be in [0, 1), got {abstain_threshold}")
    data = tensor.data
    predicted = np.argmax(data, axis=2).astype(np.int32)
    max_prob = data.max(axis=2)
    abstained = max_prob <= abstain_threshold
    predicted[abstained] = NO_CLASS
    for arr in (predicted, abstained):
        arr.flags.writeable = False
    return PredictionMap(
        predicted=predicted,
        abstained=abstained,
        max_prob=max_prob,
        abstain_threshold=abstain_threshold,
    )


def gaussian_distances(vectors: np.ndarray, gaussian: ClassGaussian) -> np.ndarray:
    """Distances of (N, K) vectors to one class Gaussian."""
    delta = np.asarray(vectors, dtype=np.float64) - gaussian.mean
    # einsum (not BLAS) keeps the reduction order fixed across hosts
    q = np.einsum("ni,ij,nj->n", delta, gaussian.precision, delta)
    worst = q.min() if q.size else 0.0
    if worst < NEGATIVE_TOLERANCE:
        raise NumericalError(
            f"squared distance {worst!r} for class {gaussian.class_id} is below "
            f"{NEGATIVE_TOLERANCE}; precision matrix is corrupt"
        )
    return np.sqrt(np.maximum(q, 0.0))


def mahalanobis_map(tensor: SoftmaxTensor, pred: PredictionMap, bank: GaussianBank) -> DistanceMap:
    """Distance of every pixel to its predicted class's Gaussian.

    Abstained pixels and pixels of invalid classes come out infinite.
    Ignore-labeled pixels are scored like any other; labels play no role
    here.
    """
    if tensor.n_classes != bank.n_classes:
        raise SchemaError(
            f"tensor has K={tensor.n_classes} but bank was fitted for {bank.n_classes} classes"
        )
    if tensor.data.shape[:2] != pred.predicted.shape:
        raise SchemaError(
            f"tensor is {tensor.data.shape[:2]} but prediction map is {pred.predicted.shape}"
        )
    h, w, k = tensor.data.shape
    flat = tensor.data.reshape(-1, k)
    predicted = pred.predicted.reshape(-1)
    distances = np.full(h * w, np.inf)
    for c in range(k):
        idx = np.flatnonzero(predicted == c)
        if idx.size == 0:
            continue
        gaussian = bank.gaussians[c]
        if not gaussian.valid:
            continue
        distances[idx] = gaussian_distances(flat[idx], gaussian)
    distances = distances.reshape(h, w)
    distances.flags.writeable = False
    return DistanceMap(distances=distances)


def distance_stats(dmap: DistanceMap, mask: LabelMask) -> DistanceStats:
    """Min and max distance over labeled, finite pixels.

    Abstained and invalid-class pixels are infinite and therefore never
    eligible. An image with no eligible pixel yields an empty result
    (NaN extrema) rather than an error.
    """
    if dmap.distances.shape != mask.data.shape:
        raise SchemaError(
            f"distance map is {dmap.distances.shape} but label mask is {mask.data.shape}"
        )
    eligible = mask.labeled() & np.isfinite(dmap.distances)
    n = int(eligible.sum())
    if n == 0:
        return DistanceStats(md_min=float("nan"), md_max=float("nan"), n_eligible=0)
    values = dmap.distances[eligible]
    return DistanceStats(md_min=float(values.min()), md_max=float(values.max()), n_eligible=n)


def write_distance_map(path, dmap: DistanceMap) -> None:
    """Export a distance map as NPY float32 (H, W); infinities survive."""
    from numpy.lib import format as npy_format

    arr = np.ascontiguousarray(dmap.distances, dtype="<f4")
    with open(path, "wb") as fh:
        npy_format.write_array(fh, arr, version=(1, 0), allow_pickle=False)
