"""Detection and localization metrics plus motion-magnitude statistics.

Only valid (unmasked) pixels ever enter a metric.  Ranking average
precision handles tied scores as blocks sharing the precision at the block
end, which makes a constant prediction score exactly the positive
prevalence.  Spearman correlation uses average ranks for ties (Pearson on
rank vectors), which reduces to 1 - 6*sum(d^2)/(n(n^2-1)) when there are
none.  Motion statistics normalize flow magnitude by the image diagonal,
making them resolution-independent; total motion sums per-pair means and
mean motion divides by the clip duration in seconds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, ShapeError
from .tensor_io import Raster2D


@dataclass
class LocalizationCase:
    """One inconsistency map against a ground-truth region."""

    prediction: Raster2D  # 1-channel scores, higher = more inconsistent
    gt_mask: np.ndarray  # (H, W) bool
    gt_magnitude: Optional[Raster2D] = None

    def __post_init__(self):
        self.gt_mask = np.asarray(self.gt_mask, dtype=bool)
        if self.gt_mask.shape != (self.prediction.height, self.prediction.width):
            raise ShapeError("ground-truth mask and prediction resolutions differ")

    def flat_valid(self) -> tuple[np.ndarray, np.ndarray]:
        ok = self.prediction.valid_mask()
        return self.prediction.plane()[ok].astype(np.float64), self.gt_mask[ok]


@dataclass
class MotionStats:
    per_pair: list[float]
    total_motion: float
    mean_motion: float
    duration: float


def ranking_ap(case: LocalizationCase) -> float:
    """Threshold-free average precision of the pixel ranking.

    Pixels are sorted by score descending; AP is the mean, over positive
    pixels, of the precision at that pixel, with tied scores treated as one
    block that shares the precision at the block boundary.
    """
    scores, labels = case.flat_valid()
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DomainError("ranking AP needs at least one positive valid pixel")
    if n_pos == len(labels):
        raise DomainError("ranking AP needs at least one negative valid pixel")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    # block boundaries: last index of each run of equal scores
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    ends = np.concatenate([boundary, [len(sorted_scores) - 1]])
    cum_tp = np.cumsum(sorted_labels)
    tp_at_end = cum_tp[ends]
    tp_in_block = np.diff(np.concatenate([[0], tp_at_end]))
    precision = tp_at_end / (ends + 1.0)
    return float((tp_in_block * precision).sum() / n_pos)


def best_threshold_iou_f1(case: LocalizationCase) -> tuple[float, float]:
    """Max IoU and max F1 over thresholds at every distinct score value.

    A pixel is predicted positive when its score >= threshold; both maxima
    are taken independently.
    """
    scores, labels = case.flat_valid()
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise DomainError("threshold metrics need at least one positive valid pixel")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    ends = np.concatenate([boundary, [len(sorted_scores) - 1]])
    cum_tp = np.cumsum(sorted_labels)

    tp = cum_tp[ends].astype(np.float64)
    predicted = ends + 1.0
    fp = predicted - tp
    fn = n_pos - tp
    iou = tp / (tp + fp + fn)
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    return float(iou.max()), float(f1.max())


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srcc(a: Sequence[float], b: Sequence[float]) -> float:
    """Spearman's rank correlation with average ranks for ties."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DomainError("srcc expects two equal-length 1-D sequences")
    if len(a) < 2:
        raise DomainError("srcc needs at least two observations")
    ra = _average_ranks(a)
    rb = _average_ranks(b)
    da = ra - ra.mean()
    db = rb - rb.mean()
    va = float((da * da).sum())
    vb = float((db * db).sum())
    if va == 0.0 or vb == 0.0:
        raise DomainError("srcc undefined: one input has zero rank variance")
    return float((da * db).sum() / np.sqrt(va * vb))


def anomaly_argmax(per_frame_scores: Sequence[float]) -> int:
    """Index of the largest score; the first index wins exact ties."""
    scores = list(per_frame_scores)
    if not scores:
        raise DomainError("anomaly detection needs at least one frame score")
    return int(np.argmax(scores))


def motion_stats(flows: Sequence[Raster2D], fps: float, pair_step: int = 1) -> MotionStats:
    """Diagonal-normalized motion magnitude over an ordered flow sequence.

    Each pair contributes the valid-pixel mean of |flow| / diag; pairs with
    no valid pixels are excluded.  Total motion is the sum of those means;
    mean motion divides by the spanned duration (pairs * pair_step / fps).
    """
    if not flows:
        raise DomainError("motion stats need at least one flow field")
    if fps <= 0:
        raise DomainError(f"fps must be positive, got {fps}")
    per_pair: list[float] = []
    for flow in flows:
        diag = float(np.hypot(flow.width, flow.height))
        ok = flow.valid_mask()
        if not ok.any():
            continue
        mag = np.hypot(
            flow.data[:, :, 0].astype(np.float64), flow.data[:, :, 1].astype(np.float64)
        )
        per_pair.append(float(mag[ok].mean() / diag))
    total = float(np.sum(per_pair)) if per_pair else 0.0
    duration = len(flows) * pair_step / fps
    return MotionStats(
        per_pair=per_pair,
        total_motion=total,
        mean_motion=total / duration if duration > 0 else 0.0,
        duration=duration,
    )


def macro_average(values: Sequence[float]) -> float:
    """Unweighted mean over cases."""
    vals = list(values)
    if not vals:
        raise DomainError("macro average of an empty list")
    return float(np.mean(vals))
