"""Segmentation metrics and association-based emergence probes."""

from __future__ import annotations

import csv
from itertools import combinations
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .assoc import AssocPixSp, AssocSpGroup


class ConfusionMatrix:
    """Counts with rows = ground truth, columns = prediction."""

    def __init__(self, n_classes: int):
        self.n = n_classes
        self.counts = np.zeros((n_classes, n_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        if pred.size and (max(pred.max(), gt.max()) >= self.n or min(pred.min(), gt.min()) < 0):
            raise ValueError(f"label outside [0, {self.n})")
        idx = gt.astype(np.int64).ravel() * self.n + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=self.n * self.n).reshape(self.n, self.n)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.n)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_update(cm: ConfusionMatrix, pred_map, gt_map) -> ConfusionMatrix:
    return cm.update(pred_map, gt_map)


def miou_macc(cm: ConfusionMatrix) -> tuple:
    """``(per-class IoU, mIoU, per-class acc, mAcc)``.

    Classes absent from both ground truth and prediction get NaN and are left
    out of the means; accuracy additionally needs ground-truth presence.
    """
    c = cm.counts.astype(np.float64)
    if c.sum() == 0:
        raise ValueError("empty confusion matrix")
    tp = np.diag(c)
    gt = c.sum(axis=1)
    pr = c.sum(axis=0)
    union = gt + pr - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
        acc = np.where(gt > 0, tp / gt, np.nan)
    return iou, float(np.nanmean(iou)), acc, float(np.nanmean(acc))


def boundary_map(labels) -> np.ndarray:
    """Pixels whose right or lower neighbour carries a different label (both sides marked)."""
    lab = np.asarray(labels)
    b = np.zeros(lab.shape, dtype=bool)
    dv = lab[1:, :] != lab[:-1, :]
    dh = lab[:, 1:] != lab[:, :-1]
    b[1:, :] |= dv
    b[:-1, :] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return b


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius <= 0:
        return mask
    return ndimage.binary_dilation(mask, structure=np.ones((2 * radius + 1, 2 * radius + 1), bool))


def boundary_fscore(pred_map, gt_map, radius: int = 1) -> float:
    """F1 of boundary pixels, matched within a ``(2r+1)^2`` square neighbourhood."""
    pred_map, gt_map = np.asarray(pred_map), np.asarray(gt_map)
    if pred_map.shape != gt_map.shape:
        raise ValueError("maps must share a shape")
    bp, bg = boundary_map(pred_map), boundary_map(gt_map)
    n_p, n_g = int(bp.sum()), int(bg.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    precision = (bp & _dilate(bg, radius)).sum() / n_p
    recall = (bg & _dilate(bp, radius)).sum() / n_g
    if precision + recall == 0:
        return 0.0
    return float(2 * precision * recall / (precision + recall))


def argmax_assignment(a) -> np.ndarray:
    """Per-row index of the largest association weight (lowest index on ties).

    For :class:`AssocPixSp` the result is a superpixel id per pixel, shaped
    ``[B, ih, iw]``; for :class:`AssocSpGroup` a group id per superpixel ``[B, sn]``.
    Plain arrays are treated as dense ``[..., rows, cols]`` matrices.
    """
    if isinstance(a, AssocPixSp):
        w = np.where(a.cmap.cand_valid, a.weights.data, -np.inf)
        slot = w.argmax(axis=-1)
        ids = a.cmap.cand[np.arange(a.cmap.n_pixels)[None, :], slot]
        return ids.reshape(w.shape[0], a.cmap.ih, a.cmap.iw)
    if isinstance(a, AssocSpGroup):
        return a.weights.data.argmax(axis=-1)
    return np.asarray(a).argmax(axis=-1)


def pixel_group_assignment(a_pi: AssocPixSp, a_sg: AssocSpGroup) -> np.ndarray:
    """Group id per pixel from the composed pixel->group association."""
    cm = a_pi.cmap
    w = np.where(cm.cand_valid, a_pi.weights.data, 0.0)  # [B, n_pix, 9]
    sg = a_sg.weights.data  # [B, sn, gn]
    composed = np.einsum("bpc,bpcg->bpg", w, sg[:, cm.cand, :])
    return composed.argmax(axis=-1).reshape(w.shape[0], cm.ih, cm.iw)


def unit_masks(id_map: np.ndarray) -> list:
    """One binary mask per id present in ``id_map``, in increasing id order."""
    return [id_map == u for u in np.unique(id_map)]


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def oracle_topk_miou(masks: Sequence[np.ndarray], gt_map, cls: int, k: int) -> Optional[float]:
    """Greedy best union of up to ``k`` unit masks against ``gt_map == cls``.

    Each round adds the mask that maximises the running IoU, but only if that
    does not lower it. Returns None when the class is absent.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    target = np.asarray(gt_map) == cls
    if not target.any():
        return None
    union = np.zeros_like(target)
    best = 0.0
    used = set()
    for _ in range(k):
        cand = None
        for j, m in enumerate(masks):
            if j in used:
                continue
            score = _iou(union | m, target)
            if cand is None or score > cand[0]:
                cand = (score, j)
        if cand is None or (used and cand[0] < best):
            break
        best = cand[0]
        used.add(cand[1])
        union = union | masks[cand[1]]
    return best


def exhaustive_topk_iou(masks: Sequence[np.ndarray], gt_map, cls: int, k: int) -> Optional[float]:
    """Best IoU over every subset of at most ``k`` masks (reference for the greedy search)."""
    target = np.asarray(gt_map) == cls
    if not target.any():
        return None
    best = 0.0
    for r in range(1, k + 1):
        for combo in combinations(range(len(masks)), r):
            u = np.zeros_like(target)
            for j in combo:
                u = u | masks[j]
            best = max(best, _iou(u, target))
    return best


def write_metrics_csv(path, names: Sequence[str], columns: dict, mean_row: Optional[dict] = None) -> None:
    """Header, one row per class, then a ``mean`` row.

    ``columns`` maps column name -> per-class values; the mean row uses
    ``mean_row`` entries when given, else the NaN-aware mean of the column.
    """
    keys = list(columns)
    extra = [k for k in (mean_row or {}) if k not in columns]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + keys + extra)
        for i, name in enumerate(names):
            w.writerow([name] + [_fmt(columns[k][i]) for k in keys] + [""] * len(extra))
        mean_vals = []
        for k in keys + extra:
            if mean_row and k in mean_row:
                mean_vals.append(_fmt(mean_row[k]))
            else:
                vals = np.asarray(columns[k], dtype=float)
                mean_vals.append(_fmt(np.nanmean(vals) if np.isfinite(vals).any() else np.nan))
        w.writerow(["mean"] + mean_vals)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "nan"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"
