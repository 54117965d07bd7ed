"""Independent reference implementations used to cross-check the main
code paths.

Nothing here may import from the scoring, evaluation or bank modules, and
nothing here may call numpy.linalg or scipy: the point is a second route
to the same numbers. The distance oracle solves its linear system by
Gaussian elimination with partial pivoting; the separability oracle
counts pairs; the IoU oracle counts per-class sets with plain loops.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericalError


def solve_partial_pivot(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve A x = b by row elimination with partial pivoting."""
    a = np.array(matrix, dtype=np.float64)
    b = np.array(rhs, dtype=np.float64)
    n = b.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"matrix is {a.shape}, rhs has {n} entries")
    for col in range(n):
        pivot = col + int(np.argmax(np.abs(a[col:, col])))
        if a[pivot, col] == 0.0:
            raise NumericalError(f"singular system: no pivot in column {col}")
        if pivot != col:
            a[[col, pivot]] = a[[pivot, col]]
            b[[col, pivot]] = b[[pivot, col]]
        for row in range(col + 1, n):
            factor = a[row, col] / a[col, col]
            if factor != 0.0:
                a[row, col:] -= factor * a[col, col:]
                b[row] -= factor * b[col]
    x = np.zeros(n)
    for row in range(n - 1, -1, -1):
        x[row] = (b[row] - float(np.dot(a[row, row + 1:], x[row + 1:]))) / a[row, row]
    return x


def oracle_mahalanobis(vector, mean, covariance, ridge: float) -> float:
    """Distance sqrt(d^T (S + ridge*I)^-1 d) via an elimination solve."""
    delta = np.asarray(vector, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    cov = np.asarray(covariance, dtype=np.float64)
    system = cov + ridge * np.eye(cov.shape[0])
    x = solve_partial_pivot(system, delta)
    q = float(np.dot(delta, x))
    if q < 0.0:
        q = 0.0
    return float(np.sqrt(q))


def oracle_auc(scores_pos, scores_neg) -> float:
    """Pair counting: wins plus half the ties over all pos/neg pairs."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        return float("nan")
    wins = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def oracle_iou(predicted, labels, accept, n_classes: int) -> tuple[float, bool]:
    """Macro mIoU over accepted pixels by explicit per-class counting.

    ``labels`` uses class ids only for pixels to be counted; callers must
    pre-exclude ignore-labeled pixels from ``accept``. Returns (mIoU,
    degenerate); degenerate means no class had a nonzero union and the
    mIoU is NaN.
    """
    predicted = [int(v) for v in np.asarray(predicted).reshape(-1)]
    labels = [int(v) for v in np.asarray(labels).reshape(-1)]
    accept = [bool(v) for v in np.asarray(accept).reshape(-1)]
    tp = [0] * n_classes
    fp = [0] * n_classes
    fn = [0] * n_classes
    for p, l, a in zip(predicted, labels, accept):
        if not a:
            continue
        if p == l:
            tp[l] += 1
        else:
            fn[l] += 1
            if 0 <= p < n_classes:
                fp[p] += 1
    ious = []
    for c in range(n_classes):
        union = tp[c] + fp[c] + fn[c]
        if union > 0:
            ious.append(tp[c] / union)
    if not ious:
        return float("nan"), True
    return sum(ious) / len(ious), False


def oracle_pearson(a, b) -> float:
    """Plain-formula Pearson correlation of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.size
    ma = float(a.sum()) / n
    mb = float(b.sum()) / n
    da = a - ma
    db = b - mb
    num = float((da * db).sum())
    den = float(np.sqrt((da * da).sum())) * float(np.sqrt((db * db).sum()))
    if den == 0.0:
        return float("nan")
    return num / den
