"""Segmentation quality and agreement metrics for binary masks.

Conventions (the choices matter on degenerate inputs, so they are pinned
here and tested):

* dice / iou return 1.0 when both masks are empty.
* hd95 returns ``inf`` (with a warning) when either mask is empty.
* hd95 pools boundary-to-boundary distances from both directions and takes
  the 95th percentile with linear interpolation.
* the energy-distance kernel is d = 1 - IoU, expectations over all ordered
  pairs (self-pairs included).
* agreement is 100 x mean pairwise Dice over unordered sample pairs.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


@dataclass
class MetricReport:
    dice: float
    iou: float
    hd95: float
    ged: float
    agreement: float


def _as_bool(mask) -> np.ndarray:
    arr = np.asarray(mask)
    return arr.astype(bool)


def dice(a, b) -> float:
    """2|a n b| / (|a| + |b|); 1.0 when both masks are empty."""
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


def iou(a, b) -> float:
    """|a n b| / |a u b|; 1.0 when both masks are empty."""
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def boundary_pixels(mask) -> np.ndarray:
    """Coordinates [n, 2] of foreground pixels with >= 1 background 4-neighbor.

    Pixels on the image edge count their out-of-bounds side as background.
    """
    m = _as_bool(mask)
    if m.ndim != 2:
        raise ValueError(f"expected 2-D mask, got shape {m.shape}")
    padded = np.pad(m, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    boundary = m & ~interior
    return np.argwhere(boundary)


def hd95(a, b) -> float:
    """95th percentile of pooled symmetric boundary-to-boundary distances."""
    a, b = _as_bool(a), _as_bool(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    pa, pb = boundary_pixels(a), boundary_pixels(b)
    if len(pa) == 0 or len(pb) == 0:
        warnings.warn("hd95 on an empty mask; returning inf", stacklevel=2)
        return float("inf")
    d_ab = cKDTree(pb.astype(float)).query(pa.astype(float))[0]
    d_ba = cKDTree(pa.astype(float)).query(pb.astype(float))[0]
    pooled = np.concatenate([d_ab, d_ba])
    return float(np.percentile(pooled, 95, method="linear"))


def ged(samples, references) -> float:
    """Energy distance between two sets of masks with kernel d = 1 - IoU.

    GED^2 = 2 E[d(S,Y)] - E[d(S,S')] - E[d(Y,Y')] over all ordered pairs;
    returns sqrt(max(GED^2, 0)).
    """
    samples = [_as_bool(s) for s in samples]
    references = [_as_bool(r) for r in references]
    if not samples or not references:
        raise ValueError("ged requires nonempty sample and reference lists")

    def mean_d(xs, ys):
        return float(np.mean([[1.0 - iou(x, y) for y in ys] for x in xs]))

    ged_sq = 2.0 * mean_d(samples, references) - mean_d(samples, samples) - mean_d(references, references)
    return float(np.sqrt(max(ged_sq, 0.0)))


def agreement_ci(samples) -> float:
    """100 x mean pairwise Dice over all unordered sample pairs."""
    samples = [_as_bool(s) for s in samples]
    if len(samples) < 2:
        raise ValueError("agreement_ci requires at least 2 samples")
    scores = [
        dice(samples[i], samples[j])
        for i in range(len(samples))
        for j in range(i + 1, len(samples))
    ]
    return float(100.0 * np.mean(scores))


def report(fused, gt, run_masks) -> MetricReport:
    """Bundle the per-case metrics for one fused prediction."""
    return MetricReport(
        dice=dice(fused, gt),
        iou=iou(fused, gt),
        hd95=hd95(fused, gt),
        ged=ged(run_masks, [gt]),
        agreement=agreement_ci(run_masks) if len(run_masks) >= 2 else 100.0,
    )
