"""Segmentation quality metrics: glass IoU, mean IoU, boundary IoU.

All metrics are derived from integer pixel counts so dataset-level
aggregation is a plain sum of counts followed by the same ratios.  The
boundary variant restricts counting to a band of pixels near the mask
contours: a pixel is in the band of a mask when some pixel of the
opposite class lies within Chebyshev distance ``d`` inside the image.
Empty-union ratios report 1.0 (a perfectly predicted all-background
image is not an error).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_dilation

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "confusion",
    "iou_from_counts",
    "iou_glass",
    "miou",
    "boundary_band",
    "boundary_confusion",
    "biou",
    "evaluate_masks",
    "aggregate",
    "BOUNDARY_BAND_PIXELS",
]

BOUNDARY_BAND_PIXELS = 5

_CLASSES = (0, 1)  # background, glass


@dataclass
class ConfusionCounts:
    """Per-class true/false positive and false negative pixel counts."""

    tp: list[int] = field(default_factory=lambda: [0, 0])
    fp: list[int] = field(default_factory=lambda: [0, 0])
    fn: list[int] = field(default_factory=lambda: [0, 0])
    pixel_total: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            tp=[a + b for a, b in zip(self.tp, other.tp)],
            fp=[a + b for a, b in zip(self.fp, other.fp)],
            fn=[a + b for a, b in zip(self.fn, other.fn)],
            pixel_total=self.pixel_total + other.pixel_total,
        )

    def to_dict(self) -> dict:
        return {"tp": list(self.tp), "fp": list(self.fp), "fn": list(self.fn), "pixel_total": self.pixel_total}


def _check_binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: pred {pred.shape} vs gt {gt.shape}")
    for name, m in (("pred", pred), ("gt", gt)):
        vals = np.unique(m)
        if not np.isin(vals, _CLASSES).all():
            raise ValueError(f"{name} mask is not binary, found values {vals[:8]}")
    return pred.astype(bool), gt.astype(bool)


def confusion(pred, gt) -> ConfusionCounts:
    """Exact per-class pixel counting of a predicted vs ground-truth mask."""
    p, g = _check_binary_pair(pred, gt)
    counts = ConfusionCounts(pixel_total=int(p.size))
    for c, pc, gc in ((0, ~p, ~g), (1, p, g)):
        counts.tp[c] = int((pc & gc).sum())
        counts.fp[c] = int((pc & ~gc).sum())
        counts.fn[c] = int((~pc & gc).sum())
    return counts


def iou_from_counts(tp: int, fp: int, fn: int) -> float:
    """TP/(TP+FP+FN); an empty union counts as a perfect 1.0."""
    denom = tp + fp + fn
    return tp / denom if denom else 1.0


def iou_glass(counts: ConfusionCounts) -> float:
    return iou_from_counts(counts.tp[1], counts.fp[1], counts.fn[1])


def miou(counts: ConfusionCounts) -> float:
    return 0.5 * sum(iou_from_counts(counts.tp[c], counts.fp[c], counts.fn[c]) for c in _CLASSES)


def boundary_band(mask, d: int = BOUNDARY_BAND_PIXELS) -> np.ndarray:
    """Pixels with an opposite-class pixel within Chebyshev distance ``d``.

    Computed as the intersection of the Chebyshev dilations of the mask
    and of its complement; symmetric under mask complement by
    construction, and empty for a single-class mask.
    """
    if d < 1:
        raise ValueError(f"band width must be >= 1, got {d}")
    m = np.asarray(mask).astype(bool)
    if not m.any() or m.all():
        return np.zeros_like(m)
    square = np.ones((3, 3), dtype=bool)
    grown = binary_dilation(m, structure=square, iterations=d)
    shrunk_complement = binary_dilation(~m, structure=square, iterations=d)
    return grown & shrunk_complement


def boundary_confusion(pred, gt, d: int = BOUNDARY_BAND_PIXELS) -> ConfusionCounts:
    """Glass-class confusion restricted to the union of both masks' bands."""
    p, g = _check_binary_pair(pred, gt)
    region = boundary_band(p, d) | boundary_band(g, d)
    counts = ConfusionCounts(pixel_total=int(region.sum()))
    pc, gc = p & region, g & region
    counts.tp[1] = int((pc & gc).sum())
    counts.fp[1] = int((pc & ~gc).sum())
    counts.fn[1] = int((~pc & gc).sum())
    nc, ngc = ~p & region, ~g & region
    counts.tp[0] = int((nc & ngc).sum())
    counts.fp[0] = int((nc & ~ngc).sum())
    counts.fn[0] = int((~nc & ngc).sum())
    return counts


def biou(pred, gt, d: int = BOUNDARY_BAND_PIXELS) -> float:
    c = boundary_confusion(pred, gt, d)
    return iou_from_counts(c.tp[1], c.fp[1], c.fn[1])


@dataclass
class ImageMetrics:
    """Per-image record kept inside a report for subset workflows."""

    id: str
    iou: float
    miou: float
    biou: float
    counts: ConfusionCounts
    boundary_counts: ConfusionCounts

    def to_dict(self) -> dict:
        return {"id": self.id, "iou": self.iou, "miou": self.miou, "biou": self.biou}


@dataclass
class MetricsReport:
    """Dataset-level metrics plus the per-image breakdown they came from."""

    iou_glass: float
    miou: float
    biou: float
    counts: ConfusionCounts
    boundary_counts: ConfusionCounts
    image_count: int
    per_image: list[ImageMetrics] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iou": self.iou_glass,
            "miou": self.miou,
            "biou": self.biou,
            "image_count": self.image_count,
            "counts": self.counts.to_dict(),
            "boundary_counts": self.boundary_counts.to_dict(),
            "per_image": [im.to_dict() for im in self.per_image],
        }


def evaluate_masks(pred, gt, image_id: str = "", d: int = BOUNDARY_BAND_PIXELS) -> ImageMetrics:
    """All three metrics for one predicted/ground-truth mask pair."""
    counts = confusion(pred, gt)
    bcounts = boundary_confusion(pred, gt, d)
    return ImageMetrics(
        id=image_id,
        iou=iou_glass(counts),
        miou=miou(counts),
        biou=iou_from_counts(bcounts.tp[1], bcounts.fp[1], bcounts.fn[1]),
        counts=counts,
        boundary_counts=bcounts,
    )


def aggregate(records: list[ImageMetrics]) -> MetricsReport:
    """Sum counts across images, then apply the metric ratios to the sums."""
    if not records:
        raise ValueError("aggregate needs at least one image")
    counts = ConfusionCounts()
    bcounts = ConfusionCounts()
    for rec in records:
        counts = counts + rec.counts
        bcounts = bcounts + rec.boundary_counts
    return MetricsReport(
        iou_glass=iou_glass(counts),
        miou=miou(counts),
        biou=iou_from_counts(bcounts.tp[1], bcounts.fp[1], bcounts.fn[1]),
        counts=counts,
        boundary_counts=bcounts,
        image_count=len(records),
        per_image=list(records),
    )
