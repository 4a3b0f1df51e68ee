"""Evaluation measures for the nuclei branch and branch-consistency overlap.

Pixel measures (DSC, IoU, Acc) are confusion-cell ratios in percent.  F1 is
object-level detection F1: predicted and ground-truth instances are matched
one-to-one greedily by descending pairwise IoU, a pair counts as a true
positive at IoU >= 0.5.  ErCnt is the relative error between predicted and
true instance counts.  The consistency overlap compares the edge branch's
prediction with the Sobel contour of the nuclei prediction and reports the
pixel fractions of edge-only / contour-only / overlap over their union,
plus an RGB overlay (edge-only green, contour-only red, overlap yellow).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .labels import FOUR_CONNECTED, InstanceMask

_SOBEL_GX = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.int64)

METRIC_NAMES = ("dsc", "f1", "acc", "iou", "ercnt")


@dataclass
class MetricsReport:
    """Percent-scale metrics averaged over n_images."""

    dsc: float
    f1: float
    acc: float
    iou: float
    ercnt: float
    n_images: int

    def as_dict(self) -> dict:
        return {
            "dsc": self.dsc, "f1": self.f1, "acc": self.acc,
            "iou": self.iou, "ercnt": self.ercnt, "n_images": self.n_images,
        }


@dataclass
class ConsistencyOverlap:
    """Pixel fractions over the union of edge prediction and nuclei contour."""

    frac_edge_only: float
    frac_nuclei_contour_only: float
    frac_overlap: float
    degenerate: bool = False
    overlay: np.ndarray = field(default=None, repr=False)  # H x W x 3 uint8


def pixel_metrics(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float, float]:
    """(dsc, iou, acc) in percent for binary maps; empty-vs-empty scores 100."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    tn = pred.size - tp - fp - fn
    if tp + fp + fn == 0:
        return 100.0, 100.0, 100.0
    dsc = 100.0 * 2 * tp / (2 * tp + fp + fn)
    iou = 100.0 * tp / (tp + fp + fn)
    acc = 100.0 * (tp + tn) / pred.size
    return dsc, iou, acc


def _intersection_matrix(pred_ids: np.ndarray, gt_ids: np.ndarray) -> np.ndarray:
    n_pred = int(pred_ids.max())
    n_gt = int(gt_ids.max())
    inter = np.zeros((n_pred + 1, n_gt + 1), dtype=np.int64)
    np.add.at(inter, (pred_ids.ravel(), gt_ids.ravel()), 1)
    return inter


def object_f1(pred_instances: InstanceMask, gt_instances: InstanceMask,
              iou_threshold: float = 0.5) -> float:
    """Object-level detection F1 (percent) under greedy IoU matching."""
    pred_ids = pred_instances.ids
    gt_ids = gt_instances.ids
    if pred_ids.shape != gt_ids.shape:
        raise ValueError(f"shape mismatch {pred_ids.shape} vs {gt_ids.shape}")
    n_pred = int(pred_ids.max())
    n_gt = int(gt_ids.max())
    if n_pred == 0 and n_gt == 0:
        return 100.0
    if n_pred == 0 or n_gt == 0:
        return 0.0

    inter = _intersection_matrix(pred_ids, gt_ids)
    area_pred = np.bincount(pred_ids.ravel(), minlength=n_pred + 1)
    area_gt = np.bincount(gt_ids.ravel(), minlength=n_gt + 1)
    pairs = []
    for i in range(1, n_pred + 1):
        for j in range(1, n_gt + 1):
            if inter[i, j] == 0:
                continue
            union = area_pred[i] + area_gt[j] - inter[i, j]
            iou = inter[i, j] / union
            if iou >= iou_threshold:
                pairs.append((iou, i, j))
    # descending IoU; id order breaks exact ties deterministically
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    tp = 0
    for _, i, j in pairs:
        if i in matched_pred or j in matched_gt:
            continue
        matched_pred.add(i)
        matched_gt.add(j)
        tp += 1
    fp = n_pred - tp
    fn = n_gt - tp
    return 100.0 * 2 * tp / (2 * tp + fp + fn)


def binary_to_instances(pred: np.ndarray) -> InstanceMask:
    """4-connected components of a binary map as an instance mask."""
    lab, _ = ndimage.label(np.asarray(pred).astype(bool), structure=FOUR_CONNECTED)
    return InstanceMask(ids=lab.astype(np.int32))


def error_count(pred: np.ndarray, gt_instances: InstanceMask) -> float:
    """Relative nuclei-count error in percent: |N_pred - N_gt| / max(N_gt, 1)."""
    n_pred = binary_to_instances(pred).n_instances
    n_gt = gt_instances.n_instances
    return 100.0 * abs(n_pred - n_gt) / max(n_gt, 1)


def binary_sobel_contour(mask: np.ndarray) -> np.ndarray:
    """Pixels with nonzero Sobel magnitude on a binary map (replicate padding)."""
    m = np.asarray(mask).astype(np.int64)
    gx = ndimage.correlate(m, _SOBEL_GX, mode="nearest")
    gy = ndimage.correlate(m, _SOBEL_GX.T, mode="nearest")
    return (gx * gx + gy * gy) > 0


def consistency_overlap(nuclei_pred: np.ndarray,
                        edge_pred: np.ndarray) -> ConsistencyOverlap:
    """Fractions of edge-only / contour-only / overlap pixels plus RGB overlay."""
    nuclei_pred = np.asarray(nuclei_pred).astype(bool)
    edge_pred = np.asarray(edge_pred).astype(bool)
    if nuclei_pred.shape != edge_pred.shape:
        raise ValueError(
            f"shape mismatch {nuclei_pred.shape} vs {edge_pred.shape}")
    contour = binary_sobel_contour(nuclei_pred)
    overlap = contour & edge_pred
    edge_only = edge_pred & ~contour
    contour_only = contour & ~edge_pred

    overlay = np.zeros((*nuclei_pred.shape, 3), dtype=np.uint8)
    overlay[edge_only] = (0, 255, 0)
    overlay[contour_only] = (255, 0, 0)
    overlay[overlap] = (255, 255, 0)

    union = int(overlap.sum() + edge_only.sum() + contour_only.sum())
    if union == 0:
        return ConsistencyOverlap(0.0, 0.0, 1.0, degenerate=True, overlay=overlay)
    return ConsistencyOverlap(
        frac_edge_only=edge_only.sum() / union,
        frac_nuclei_contour_only=contour_only.sum() / union,
        frac_overlap=overlap.sum() / union,
        overlay=overlay,
    )


def aggregate_reports(per_image: list[dict]) -> MetricsReport:
    """Mean of per-image metric dicts (keys per METRIC_NAMES)."""
    if not per_image:
        return MetricsReport(0.0, 0.0, 0.0, 0.0, 0.0, 0)
    means = {
        k: float(np.mean([row[k] for row in per_image])) for k in METRIC_NAMES
    }
    return MetricsReport(n_images=len(per_image), **means)


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    """CSV with columns seed, split, dsc, f1, acc, iou, ercnt."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["seed", "split", *METRIC_NAMES])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in writer.fieldnames})


def write_metrics_text(path: str, report: MetricsReport) -> None:
    """Flat key=value dump of a report."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        for key, value in report.as_dict().items():
            fh.write(f"{key}={value}\n")
