"""Quantitative instruments: consensus IoU, success curves, AUC, similarity
difference, box extraction, and the false-negative detection report."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sacl import fnd_select

DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(21))


@dataclass(frozen=True)
class AnnotationRecord:
    """Ground truth for one scene: a binary mask or annotator boxes."""

    scene_id: int
    mask: np.ndarray | None = None        # (H, W) bool
    boxes: tuple = ()                     # ((r0, c0, r1, c1) inclusive, ...)
    shape: tuple | None = None            # required with boxes

    def consensus(self):
        """Per-pixel agreement map: box votes over the majority quorum, capped at 1."""
        if self.mask is not None:
            if not self.mask.any():
                raise ValueError("annotation mask is empty")
            return self.mask.astype(np.float64)
        if not self.boxes:
            raise ValueError("annotation has neither mask nor boxes")
        votes = np.zeros(self.shape, dtype=np.float64)
        for r0, c0, r1, c1 in self.boxes:
            if r0 < 0 or c0 < 0 or r1 >= self.shape[0] or c1 >= self.shape[1]:
                raise ValueError(f"box {(r0, c0, r1, c1)} outside image {self.shape}")
            votes[r0:r1 + 1, c0:c1 + 1] += 1.0
        quorum = -(-len(self.boxes) // 2)  # ceil(B/2)
        return np.minimum(1.0, votes / quorum)


def ciou(values, annotation: AnnotationRecord, threshold=0.5):
    """Consensus IoU of the thresholded map against the agreement map.

    Reduces to plain IoU for a single mask or box.
    """
    consensus = annotation.consensus()
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != consensus.shape:
        raise ValueError(f"ciou: map {arr.shape} vs annotation {consensus.shape}")
    pred = arr > threshold
    gt_support = consensus > 0.0
    hits = consensus[pred].sum()
    misses = np.count_nonzero(pred & ~gt_support)
    denom = consensus.sum() + misses
    return float(hits / denom) if denom > 0 else 0.0


def success_curve(scores, thresholds=DEFAULT_THRESHOLDS):
    """Fraction of samples at or above each threshold."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("success_curve: no scores")
    return tuple(float(np.count_nonzero(arr >= t) / arr.size) for t in thresholds)


def auc(ratios, thresholds=DEFAULT_THRESHOLDS):
    """Trapezoidal area under the success curve, normalized to [0, 1]."""
    xs = np.asarray(thresholds, dtype=np.float64)
    ys = np.asarray(ratios, dtype=np.float64)
    if xs.shape != ys.shape:
        raise ValueError("auc: ratios do not align with the threshold grid")
    return float(np.trapz(ys, xs) / (xs[-1] - xs[0]))


def sim_diff(values, gt_mask):
    """Mean map value over the object minus the mean over the background."""
    mask = np.asarray(gt_mask, dtype=bool)
    arr = np.asarray(values, dtype=np.float64)
    if arr.shape != mask.shape:
        raise ValueError(f"sim_diff: map {arr.shape} vs mask {mask.shape}")
    if mask.all() or not mask.any():
        raise ValueError("sim_diff needs both object and background pixels")
    return float(arr[mask].mean() - arr[~mask].mean())


def extract_box(values, threshold=0.7):
    """Tight box around the supra-threshold region; None when nothing passes."""
    arr = np.asarray(values, dtype=np.float64)
    rows, cols = np.nonzero(arr > threshold)
    if rows.size == 0:
        return None
    return (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def box_area(box):
    r0, c0, r1, c1 = box
    return max(0, r1 - r0 + 1) * max(0, c1 - c0 + 1)


def iou(box_a, box_b):
    """Pixel IoU of two inclusive boxes; any empty box scores 0."""
    if box_a is None or box_b is None:
        return 0.0
    r0 = max(box_a[0], box_b[0])
    c0 = max(box_a[1], box_b[1])
    r1 = min(box_a[2], box_b[2])
    c1 = min(box_a[3], box_b[3])
    if r1 < r0 or c1 < c0:
        return 0.0
    inter = (r1 - r0 + 1) * (c1 - c0 + 1)
    union = box_area(box_a) + box_area(box_b) - inter
    return float(inter / union)


def mask_box(mask):
    """Tight box of a boolean mask, or None when empty."""
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        return None
    return (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


@dataclass(frozen=True)
class FndReport:
    batches: int
    mean_actual: float      # same-class candidates per batch
    mean_detected: float    # of those, how many the selection excluded
    recall: float


def fnd_report(audio_batches, label_batches, k) -> FndReport:
    """Score false-negative detection against oracle class labels.

    Actual false negatives are the same-class-as-anchor candidates; detected
    ones are those excluded by the bottom-k similarity selection.
    """
    from .sacl import audio_sim_matrix
    total_actual = 0
    total_detected = 0
    for feats, labels in zip(audio_batches, label_batches):
        sims = audio_sim_matrix(feats)
        n = len(labels)
        for i in range(n):
            selected = set(fnd_select(sims, i, k).selected)
            for j in range(n):
                if j == i or labels[j] != labels[i]:
                    continue
                total_actual += 1
                if j not in selected:
                    total_detected += 1
    count = len(label_batches)
    recall = total_detected / total_actual if total_actual else 1.0
    return FndReport(count, total_actual / count, total_detected / count, recall)
