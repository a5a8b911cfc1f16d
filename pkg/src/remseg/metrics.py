"""Region similarity (J) and contour accuracy (F) for binary masks."""

import math

import numpy as np
from scipy import ndimage

from .errors import ShapeError

_EIGHT = np.ones((3, 3), dtype=bool)


def _pair(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} vs gt {gt.shape}")
    return pred, gt


def region_similarity(pred, gt) -> float:
    """Intersection over union; 1 when both masks are empty."""
    pred, gt = _pair(pred, gt)
    union = np.count_nonzero(pred | gt)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & gt) / union


def boundary(mask) -> np.ndarray:
    """Foreground pixels with at least one background pixel among their 8 neighbours.

    Pixels outside the image count as background.
    """
    mask = np.asarray(mask).astype(bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_EIGHT, border_value=0)


def default_tolerance(shape) -> int:
    """0.8% of the image diagonal, rounded up."""
    h, w = shape[-2:]
    return int(math.ceil(0.008 * math.hypot(h, w)))


def contour_accuracy(pred, gt, tol=None) -> float:
    """Boundary F-measure: harmonic mean of boundary precision and recall within ``tol`` pixels."""
    pred, gt = _pair(pred, gt)
    if tol is None:
        tol = default_tolerance(pred.shape)
    if tol < 0:
        raise ValueError("tol must be >= 0")
    bp, bg = boundary(pred), boundary(gt)
    n_p, n_g = np.count_nonzero(bp), np.count_nonzero(bg)
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    dist_to_g = ndimage.distance_transform_edt(~bg)
    dist_to_p = ndimage.distance_transform_edt(~bp)
    precision = np.count_nonzero(dist_to_g[bp] <= tol) / n_p
    recall = np.count_nonzero(dist_to_p[bg] <= tol) / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def sequence_scores(pred_masks, gt_masks, tol=None):
    """Per-frame (J, F) arrays for aligned (F, H, W) stacks."""
    pred_masks, gt_masks = np.asarray(pred_masks), np.asarray(gt_masks)
    if pred_masks.shape != gt_masks.shape:
        raise ShapeError(f"pred {pred_masks.shape} vs gt {gt_masks.shape}")
    j = np.array([region_similarity(p, g) for p, g in zip(pred_masks, gt_masks)])
    f = np.array([contour_accuracy(p, g, tol) for p, g in zip(pred_masks, gt_masks)])
    return j, f
