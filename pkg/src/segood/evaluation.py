"""Risk-coverage sweeps and AUC separability.

A pixel is accepted at threshold eps when it did not abstain and its
distance is strictly below eps. For one image the threshold runs over 60
evenly spaced points from the image's own MD_min to MD_max (extrema over
labeled, non-abstained, finite pixels); the final point is nudged up by a
relative 1e-9 so the strict comparison accepts every finite pixel and the
curve ends at the no-rejection baseline.

Per point:

    risk     = 1 - mIoU over accepted-and-labeled pixels
               (0 and a degenerate flag when nothing is accepted)
    coverage = accepted-and-labeled / labeled

Dataset curves are the unweighted mean of the per-image curves, index by
index. Images without a single eligible pixel are excluded and reported
as warnings.

Separability is the probability that a correctly classified pixel scores
above (negative distance) a misclassified one, computed as a Mann-Whitney
rank statistic with half credit for ties. Populations pool over the
dataset by default; a per-image averaging mode is available and reports
label which one was used.

Scalar reductions here (mIoU, per-index means) deliberately use plain
sequential Python sums: results must be reproducible bit for bit against
an independent recomputation, and pairwise summation would reorder the
arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .bank import GaussianBank
from .datasets import ClassRegistry, DatasetManifest, LabelMask, load_label_mask, load_softmax_tensor, validate_pair
from .errors import EmptyDatasetError, SchemaError, SegoodError, ValidationError
from .scoring import DistanceMap, PredictionMap, distance_stats, mahalanobis_map, predict
from ._util import image_rng

DEFAULT_SWEEP_POINTS = 60
AUC_SUBSAMPLE_CAP = 10_000_000

_STREAM_AUC = 211

# risk should not grow as the threshold loosens; increases beyond this
# slack flag the curve as non-monotone
RISK_MONOTONE_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class ConfusionTotals:
    """Per-class true positive / false positive / false negative counts
    over the accepted-and-labeled pixel subset."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray


@dataclass(frozen=True)
class IouResult:
    miou: float
    per_class: tuple[float, ...]
    totals: ConfusionTotals
    degenerate: bool


@dataclass(frozen=True)
class SweepPoint:
    threshold_index: int
    epsilon: float
    risk: float
    coverage: float
    degenerate: bool
    n_degenerate: int = 0


@dataclass(frozen=True, eq=False)
class ImageSweep:
    sample_id: str
    points: tuple[SweepPoint, ...]
    md_min: float
    md_max: float
    baseline_risk: float
    baseline_coverage: float
    excluded: bool = False
    reason: str | None = None


@dataclass(frozen=True, eq=False)
class RiskCoverageCurve:
    points: tuple[SweepPoint, ...]
    baseline_iou: float
    baseline_coverage: float
    n_images: int | None
    auc: float | None = None


@dataclass(frozen=True)
class AucResult:
    value: float
    mode: str
    n_pos: int
    n_neg: int
    reason: str | None = None


def accepted_subset(dmap: DistanceMap, pred: PredictionMap, epsilon: float) -> np.ndarray:
    """Boolean (H, W) mask: not abstained and distance strictly below
    epsilon. Infinite distances are rejected at every threshold, infinity
    included."""
    return (~pred.abstained) & (dmap.distances < epsilon)


def iou(pred: PredictionMap, mask: LabelMask, accept: np.ndarray, registry: ClassRegistry) -> IouResult:
    """Macro mIoU over the accepted-and-labeled subset.

    Classes with an empty union are skipped; when every class is empty the
    result is flagged degenerate (mIoU is NaN).
    """
    if accept.shape != mask.data.shape or pred.predicted.shape != mask.data.shape:
        raise SchemaError("prediction, mask and acceptance shapes must agree")
    k = registry.n_classes
    sel = accept & mask.labeled()
    labels = mask.data[sel]
    predicted = pred.predicted[sel]
    # column 0 collects the NO_CLASS sentinel; it can only contribute FN
    conf = np.bincount(labels * (k + 1) + (predicted + 1), minlength=k * (k + 1)).reshape(k, k + 1)
    tp = conf[np.arange(k), np.arange(k) + 1]
    fp = conf[:, 1:].sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    totals = ConfusionTotals(tp=tp, fp=fp, fn=fn)
    per_class = []
    for c in range(k):
        union = int(tp[c]) + int(fp[c]) + int(fn[c])
        if union > 0:
            per_class.append(int(tp[c]) / union)
    if not per_class:
        return IouResult(miou=float("nan"), per_class=(), totals=totals, degenerate=True)
    miou = sum(per_class) / len(per_class)
    return IouResult(miou=miou, per_class=tuple(per_class), totals=totals, degenerate=False)


def _risk_coverage_at(pred, mask, dmap, registry, epsilon, n_labeled):
    accept = accepted_subset(dmap, pred, epsilon)
    result = iou(pred, mask, accept, registry)
    covered = int((accept & mask.labeled()).sum())
    coverage = covered / n_labeled
    risk = 0.0 if result.degenerate else 1.0 - result.miou
    return risk, coverage, result.degenerate


def sweep_epsilons(md_min: float, md_max: float, n_points: int) -> np.ndarray:
    """The threshold grid: linspace over [md_min, md_max] with the last
    point lifted just above md_max so strict comparison includes it."""
    eps = np.linspace(md_min, md_max, n_points)
    top = md_max * (1.0 + 1e-9)
    if not top > md_max:
        top = np.nextafter(md_max, np.inf)
    eps[-1] = top
    return eps


def sweep_image(
    dmap: DistanceMap,
    pred: PredictionMap,
    mask: LabelMask,
    registry: ClassRegistry,
    n_points: int = DEFAULT_SWEEP_POINTS,
    sample_id: str = "",
) -> ImageSweep:
    """Risk-coverage sweep of one image over its own distance range."""
    if n_points < 2:
        raise ValidationError(f"sweep needs at least 2 points, got {n_points}")
    stats = distance_stats(dmap, mask)
    if stats.empty:
        return ImageSweep(
            sample_id=sample_id,
            points=(),
            md_min=float("nan"),
            md_max=float("nan"),
            baseline_risk=float("nan"),
            baseline_coverage=float("nan"),
            excluded=True,
            reason="no labeled, non-abstained pixel with finite distance",
        )
    n_labeled = int(mask.labeled().sum())
    points = []
    for t, eps in enumerate(sweep_epsilons(stats.md_min, stats.md_max, n_points)):
        risk, coverage, degenerate = _risk_coverage_at(pred, mask, dmap, registry, float(eps), n_labeled)
        points.append(
            SweepPoint(
                threshold_index=t,
                epsilon=float(eps),
                risk=risk,
                coverage=coverage,
                degenerate=degenerate,
                n_degenerate=int(degenerate),
            )
        )
    # full acceptance: every non-abstained, finite-distance pixel
    base_risk, base_coverage, base_degenerate = _risk_coverage_at(
        pred, mask, dmap, registry, float("inf"), n_labeled
    )
    return ImageSweep(
        sample_id=sample_id,
        points=tuple(points),
        md_min=stats.md_min,
        md_max=stats.md_max,
        baseline_risk=base_risk,
        baseline_coverage=base_coverage,
    )


def aggregate_dataset(sweeps: list[ImageSweep]) -> RiskCoverageCurve:
    """Unweighted per-index mean of the usable image sweeps.

    A dataset point is degenerate only when every image is degenerate
    there, which coincides with a mean coverage of exactly zero.
    """
    usable = [s for s in sweeps if not s.excluded]
    if not usable:
        raise EmptyDatasetError("no image produced a usable sweep")
    n_points = len(usable[0].points)
    if any(len(s.points) != n_points for s in usable):
        raise ValidationError("cannot aggregate sweeps with different point counts")
    n = len(usable)
    points = []
    for t in range(n_points):
        col = [s.points[t] for s in usable]
        n_degenerate = sum(p.degenerate for p in col)
        points.append(
            SweepPoint(
                threshold_index=t,
                epsilon=sum(p.epsilon for p in col) / n,
                risk=sum(p.risk for p in col) / n,
                coverage=sum(p.coverage for p in col) / n,
                degenerate=n_degenerate == n,
                n_degenerate=n_degenerate,
            )
        )
    baseline_risk = sum(s.baseline_risk for s in usable) / n
    baseline_coverage = sum(s.baseline_coverage for s in usable) / n
    return RiskCoverageCurve(
        points=tuple(points),
        baseline_iou=1.0 - baseline_risk,
        baseline_coverage=baseline_coverage,
        n_images=n,
    )


def risk_nonmonotone_index(curve: RiskCoverageCurve) -> int | None:
    """First index where loosening the threshold lowers the risk, i.e. the
    stricter point carried more risk. None when the curve behaves."""
    pts = curve.points
    for t in range(len(pts) - 1):
        if pts[t].degenerate or pts[t + 1].degenerate:
            continue
        if pts[t].risk > pts[t + 1].risk + RISK_MONOTONE_SLACK:
            return t
    return None


# ---------------------------------------------------------------------------
# Separability (AUC)


def mann_whitney_auc(scores_pos: np.ndarray, scores_neg: np.ndarray) -> float:
    """P(score_pos > score_neg) with half credit for ties, via midranks."""
    n_pos = len(scores_pos)
    n_neg = len(scores_neg)
    pooled = np.concatenate([np.asarray(scores_pos, dtype=np.float64), np.asarray(scores_neg, dtype=np.float64)])
    ranks = rankdata(pooled, method="average")
    rank_sum = float(ranks[:n_pos].sum())
    u = rank_sum - n_pos * (n_pos + 1) / 2
    return u / (n_pos * n_neg)


class _Population:
    """Capped pool of scores with order-independent uniform subsampling:
    keep the entries with the smallest seeded priorities."""

    def __init__(self, cap: int):
        self.cap = cap
        self._scores: list[np.ndarray] = []
        self._pri: list[np.ndarray] = []
        self._size = 0

    def add(self, scores: np.ndarray, priorities: np.ndarray) -> None:
        if scores.size == 0:
            return
        self._scores.append(scores)
        self._pri.append(priorities)
        self._size += scores.size
        if self._size > 2 * self.cap:
            self._compact()

    def _compact(self) -> None:
        scores = np.concatenate(self._scores)
        pri = np.concatenate(self._pri)
        keep = np.argsort(pri, kind="stable")[: self.cap]
        self._scores = [scores[keep]]
        self._pri = [pri[keep]]
        self._size = keep.size

    def values(self) -> np.ndarray:
        if not self._scores:
            return np.empty(0)
        if self._size > self.cap:
            self._compact()
        return np.concatenate(self._scores)


def dataset_auc(
    records,
    *,
    mode: str = "pooled",
    subsample_cap: int = AUC_SUBSAMPLE_CAP,
    seed: int = 0,
) -> AucResult:
    """Separability over a dataset.

    ``records`` yields (image_key, dmap, pred, mask) tuples. Positives are
    correctly classified pixels, negatives misclassified ones; both are
    restricted to labeled, non-abstained pixels and scored by negative
    distance. ``mode`` is "pooled" (one statistic over all pixels, the
    default) or "per-image" (unweighted mean of per-image statistics).
    """
    if mode not in ("pooled", "per-image"):
        raise ValidationError(f"auc mode must be 'pooled' or 'per-image', got {mode!r}")
    pos = _Population(cap=subsample_cap)
    neg = _Population(cap=subsample_cap)
    per_image: list[float] = []
    n_pos_total = 0
    n_neg_total = 0
    for image_key, dmap, pred, mask in records:
        eligible = mask.labeled() & ~pred.abstained
        correct = eligible & (pred.predicted == mask.data)
        wrong = eligible & (pred.predicted != mask.data)
        s_pos = -dmap.distances[correct]
        s_neg = -dmap.distances[wrong]
        n_pos_total += s_pos.size
        n_neg_total += s_neg.size
        if mode == "pooled":
            rng = image_rng(seed, image_key, _STREAM_AUC)
            pos.add(s_pos, rng.random(s_pos.size))
            neg.add(s_neg, rng.random(s_neg.size))
        else:
            if s_pos.size and s_neg.size:
                per_image.append(mann_whitney_auc(s_pos, s_neg))
    if mode == "pooled":
        s_pos = pos.values()
        s_neg = neg.values()
        if s_pos.size == 0 or s_neg.size == 0:
            which = "positive" if s_pos.size == 0 else "negative"
            return AucResult(
                value=float("nan"), mode=mode, n_pos=int(s_pos.size), n_neg=int(s_neg.size),
                reason=f"empty {which} population",
            )
        return AucResult(
            value=mann_whitney_auc(s_pos, s_neg), mode=mode, n_pos=int(s_pos.size), n_neg=int(s_neg.size)
        )
    if not per_image:
        return AucResult(
            value=float("nan"), mode=mode, n_pos=n_pos_total, n_neg=n_neg_total,
            reason="no image had both populations non-empty",
        )
    return AucResult(
        value=sum(per_image) / len(per_image), mode=mode, n_pos=n_pos_total, n_neg=n_neg_total
    )


# ---------------------------------------------------------------------------
# Dataset driver


@dataclass(frozen=True, eq=False)
class DatasetEvaluation:
    manifest_name: str
    location_tag: str
    curve: RiskCoverageCurve
    auc: AucResult
    n_images: int
    n_excluded: int
    warnings: tuple[str, ...]
    risk_nonmonotone: bool
    risk_nonmonotone_index: int | None
    sweeps: tuple[ImageSweep, ...]


def evaluate_dataset(
    bank: GaussianBank,
    manifest: DatasetManifest,
    *,
    n_points: int = DEFAULT_SWEEP_POINTS,
    abstain_threshold: float = 0.5,
    auc_mode: str = "pooled",
    auc_subsample_cap: int = AUC_SUBSAMPLE_CAP,
    seed: int = 0,
    distance_sink=None,
) -> DatasetEvaluation:
    """Run the full per-image pipeline over a manifest and aggregate.

    ``distance_sink``, when given, is called as sink(entry, dmap) after
    each image is scored (used for distance-map export).
    """
    if bank.registry.class_names != manifest.registry.class_names:
        raise SchemaError(
            f"manifest '{manifest.name}' registry does not match the bank's class table"
        )
    if not manifest.samples:
        raise EmptyDatasetError(f"manifest '{manifest.name}' lists no samples")
    sweeps = []
    auc_records = []
    warnings = []
    for index, entry in enumerate(manifest.samples):
        try:
            tensor = load_softmax_tensor(entry.tensor_path, manifest.registry)
            mask = load_label_mask(entry.label_path, manifest.registry)
            validate_pair(tensor, mask)
        except SegoodError as exc:
            raise type(exc)(f"sample '{entry.sample_id}': {exc}") from exc
        pred = predict(tensor, abstain_threshold)
        dmap = mahalanobis_map(tensor, pred, bank)
        if distance_sink is not None:
            distance_sink(entry, dmap)
        sweep = sweep_image(dmap, pred, mask, manifest.registry, n_points, sample_id=entry.sample_id)
        if sweep.excluded:
            warnings.append(f"sample '{entry.sample_id}' excluded: {sweep.reason}")
        sweeps.append(sweep)
        auc_records.append((index, dmap, pred, mask))
    curve = aggregate_dataset(sweeps)
    auc = dataset_auc(auc_records, mode=auc_mode, subsample_cap=auc_subsample_cap, seed=seed)
    curve = RiskCoverageCurve(
        points=curve.points,
        baseline_iou=curve.baseline_iou,
        baseline_coverage=curve.baseline_coverage,
        n_images=curve.n_images,
        auc=auc.value,
    )
    nonmono = risk_nonmonotone_index(curve)
    return DatasetEvaluation(
        manifest_name=manifest.name,
        location_tag=manifest.location_tag,
        curve=curve,
        auc=auc,
        n_images=len(manifest.samples),
        n_excluded=sum(s.excluded for s in sweeps),
        warnings=tuple(warnings),
        risk_nonmonotone=nonmono is not None,
        risk_nonmonotone_index=nonmono,
        sweeps=tuple(sweeps),
    )
