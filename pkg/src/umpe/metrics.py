"""Chamfer distance, Chamfer-threshold AP/mAP and raster IoU.

AP uses one-to-one greedy matching in score order (ties broken by instance
id) and all-points integration under the precision envelope. Classes without
ground truth get an undefined AP and are left out of every mean.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from umpe import constants as K

THRESHOLDS = (0.5, 1.0, 1.5)


class MetricError(ValueError):
    pass


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean-of-nearest Chamfer distance, averaged over both directions."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise MetricError("chamfer distance needs non-empty point sets")
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float((d.min(1).mean() + d.min(0).mean()) / 2)


@dataclass
class Instance:
    cls: int
    points: np.ndarray
    score: float = 1.0
    id: int = 0


def rank(preds: list[Instance]) -> list[Instance]:
    return sorted(preds, key=lambda p: (-p.score, p.id))


def match_greedy(preds: list[Instance], gts: list[Instance], tau: float) -> list[bool]:
    """TP flags for score-ranked predictions of a single class."""
    used = [False] * len(gts)
    flags = []
    for p in preds:
        best, best_d = -1, tau
        for j, g in enumerate(gts):
            if used[j] or g.cls != p.cls:
                continue
            d = chamfer_distance(p.points, g.points)
            if d < best_d:
                best, best_d = j, d
        if best >= 0:
            used[best] = True
        flags.append(best >= 0)
    return flags


def ap_from_flags(tp: list[bool], num_gt: int) -> float:
    """All-points AP: mean over GT of the enveloped precision where recall rises.

    Computed in exact rationals and rounded once, so any correct evaluation
    of the same PR curve gives the identical float.
    """
    if num_gt == 0:
        return float("nan")
    tp = [bool(t) for t in tp]
    if not any(tp):
        return 0.0
    prec, hits = [], 0
    for k, t in enumerate(tp, 1):
        hits += t
        prec.append(Fraction(hits, k))
    env, best = [Fraction(0)] * len(prec), Fraction(0)
    for i in range(len(prec) - 1, -1, -1):
        best = max(best, prec[i])
        env[i] = best
    return float(sum((e for e, t in zip(env, tp) if t), Fraction(0)) / num_gt)


def ap_at_threshold(preds: list[Instance], gts: list[Instance], tau: float, cls: int) -> float:
    p = rank([x for x in preds if x.cls == cls])
    g = [x for x in gts if x.cls == cls]
    if not g:
        return float("nan")
    return ap_from_flags(match_greedy(p, g, tau), len(g))


@dataclass
class APResult:
    per_threshold: dict = field(default_factory=dict)  # (cls, tau) -> AP
    per_class: dict = field(default_factory=dict)  # cls -> mean AP over tau
    mAP: float = float("nan")
    undefined: list = field(default_factory=list)


def evaluate_ap(frames: list[tuple[list[Instance], list[Instance]]], num_classes: int = K.NUM_MAP_CLASSES,
                thresholds=THRESHOLDS) -> APResult:
    """Dataset-level AP: ranking is pooled across frames, matching stays within a frame."""
    res = APResult()
    for c in range(num_classes):
        aps = []
        for tau in thresholds:
            scored, n_gt = [], 0
            for fi, (preds, gts) in enumerate(frames):
                p = rank([x for x in preds if x.cls == c])
                g = [x for x in gts if x.cls == c]
                n_gt += len(g)
                for inst, flag in zip(p, match_greedy(p, g, tau)):
                    scored.append((-inst.score, fi, inst.id, flag))
            scored.sort(key=lambda t: t[:3])
            ap = ap_from_flags([t[3] for t in scored], n_gt)
            res.per_threshold[(c, tau)] = ap
            aps.append(ap)
        if np.isnan(aps).all():
            res.undefined.append(c)
            continue
        res.per_class[c] = float(np.mean(aps))
    if res.per_class:
        res.mAP = float(np.mean(list(res.per_class.values())))
    return res


def iou(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> float:
    """|pred >= t AND gt| / |pred >= t OR gt|; both empty counts as 1."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred >= threshold
    g = gt >= 0.5
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, g).sum() / union)


class IoUAccumulator:
    """Dataset-level per-class IoU from summed intersections and unions."""

    def __init__(self, num_classes: int = K.NUM_MAP_CLASSES):
        self.inter = np.zeros(num_classes)
        self.union = np.zeros(num_classes)

    def update(self, probs: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> None:
        """probs, gt: (B, C, H, W)."""
        p = probs >= threshold
        g = gt >= 0.5
        self.inter += np.logical_and(p, g).sum((0, 2, 3))
        self.union += np.logical_or(p, g).sum((0, 2, 3))

    def per_class(self) -> np.ndarray:
        return np.where(self.union > 0, self.inter / np.maximum(self.union, 1), 1.0)

    def mean(self) -> float:
        return float(self.per_class().mean())
