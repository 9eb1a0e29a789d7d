"""OKS/IoU matching, 101-point interpolated AP, scale splits, and box metrics.

Detections are matched greedily in descending score order; each detection
takes the still-unmatched ground truth with the highest metric value when
that value clears the threshold. AP is the COCO-style 101-point interpolated
area under the precision-recall curve; keypoint AP averages the OKS
thresholds 0.50:0.05:0.95.

The evaluate_* functions take per-scene nested lists: dets[i] and gts[i]
are the detections and ground truths of scene i. Wrap single scenes in a
one-element list.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import (
    OksConstants,
    Pose,
    ScaleClass,
    bbox_from_pose,
    compute_oks,
    iou,
    pose_area,
    scale_class,
)
from .errors import DegeneratePose, InvalidDrop

logger = logging.getLogger("posekit.evaluation")

OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
BOX_IOU_THRESHOLD = 0.5


@dataclass(frozen=True)
class DetectionMatch:
    det_index: int
    score: float
    matched_gt: Optional[int]
    value: float
    is_tp: bool


@dataclass(frozen=True)
class MatchResult:
    """Greedy assignment of one scene's detections to its ground truths."""

    detections: tuple[DetectionMatch, ...]  # descending score order
    gt_matched: tuple[bool, ...]


def _metric_value(det: Pose, gt: Pose, metric: str,
                  consts: OksConstants | None) -> float:
    if metric == "oks":
        return compute_oks(det, gt, pose_area(gt), consts)
    if metric == "iou":
        try:
            return iou(bbox_from_pose(det), bbox_from_pose(gt))
        except DegeneratePose:
            return 0.0
    raise ValueError(f"unknown metric: {metric}")


def match_detections(dets: Sequence[Pose], gts: Sequence[Pose],
                     threshold: float, metric: str = "oks",
                     consts: OksConstants | None = None) -> MatchResult:
    """Greedy score-descending matching; ties prefer the lower original index."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    gt_matched = [False] * len(gts)
    records = []
    for i in order:
        best_gt, best_val = None, 0.0
        for j in range(len(gts)):
            if gt_matched[j]:
                continue
            val = _metric_value(dets[i], gts[j], metric, consts)
            if val > best_val:
                best_gt, best_val = j, val
        if best_gt is not None and best_val >= threshold:
            gt_matched[best_gt] = True
            records.append(DetectionMatch(i, dets[i].score, best_gt, best_val, True))
        else:
            records.append(DetectionMatch(i, dets[i].score, None, best_val, False))
    return MatchResult(tuple(records), tuple(gt_matched))


def _interpolated_ap(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """Mean over the 101 recall thresholds of the best precision at recall >= t."""
    if len(recalls) == 0:
        return 0.0
    # Best precision from each prefix onward (recalls are non-decreasing).
    best_from = np.maximum.accumulate(precisions[::-1])[::-1]
    thresholds = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recalls, thresholds, side="left")
    ap = sum(float(best_from[i]) for i in idx if i < len(recalls))
    return ap / 101.0


def _prefix_curve(flags: Sequence[bool], num_gt: int):
    tp = np.cumsum([1 if f else 0 for f in flags])
    ranks = np.arange(1, len(flags) + 1)
    recalls = tp / num_gt if num_gt > 0 else np.zeros(len(flags))
    precisions = tp / ranks
    return recalls, precisions


def average_precision(matches: MatchResult, num_gt: int):
    """(ap, pr_points) of one match result under 101-point interpolation."""
    flags = [d.is_tp for d in matches.detections]
    if num_gt == 0:
        if flags:
            logger.warning("average_precision: detections present but no ground truth")
        return 0.0, []
    recalls, precisions = _prefix_curve(flags, num_gt)
    pr_points = list(zip(recalls.tolist(), precisions.tolist()))
    return _interpolated_ap(recalls, precisions), pr_points


def _merge_flags(per_scene: Sequence[Sequence[tuple[float, int, bool]]]):
    """Globally sort (score, original det index, is_tp) across scenes."""
    merged = []
    for scene_idx, items in enumerate(per_scene):
        for score, det_idx, is_tp in items:
            merged.append((-score, scene_idx, det_idx, is_tp))
    merged.sort()
    return [m[3] for m in merged]


def _scene_matches(dets, gts, threshold, metric, consts):
    return [match_detections(d, g, threshold, metric, consts)
            for d, g in zip(dets, gts)]


def _ap_over_scenes(match_results: Sequence[MatchResult], num_gt: int):
    per_scene = [[(d.score, d.det_index, d.is_tp) for d in mr.detections]
                 for mr in match_results]
    flags = _merge_flags(per_scene)
    if num_gt == 0:
        return 0.0, []
    recalls, precisions = _prefix_curve(flags, num_gt)
    return _interpolated_ap(recalls, precisions), \
        list(zip(recalls.tolist(), precisions.tolist()))


def _gt_scale(gt: Pose) -> ScaleClass:
    return scale_class(pose_area(gt))


def _scale_filtered_ap(match_results, dets, gts, cls: ScaleClass):
    """AP over one scale class: its gts, their matches, and same-class stray FPs."""
    num_gt = sum(1 for scene in gts for g in scene if _gt_scale(g) is cls)
    per_scene = []
    for mr, det_scene, gt_scene in zip(match_results, dets, gts):
        items = []
        for d in mr.detections:
            if d.is_tp:
                if _gt_scale(gt_scene[d.matched_gt]) is cls:
                    items.append((d.score, d.det_index, True))
            elif scale_class(pose_area(det_scene[d.det_index])) is cls:
                items.append((d.score, d.det_index, False))
        per_scene.append(items)
    flags = _merge_flags(per_scene)
    if num_gt == 0:
        return 0.0, num_gt
    recalls, precisions = _prefix_curve(flags, num_gt)
    return _interpolated_ap(recalls, precisions), num_gt


@dataclass
class BoxScaleMetrics:
    bbp: float
    bbr: float
    num_gt: int


@dataclass
class EvalReport:
    """Metric surface of one evaluation run."""

    pr_points: list[tuple[float, float]]
    ap: float
    ap50: float
    ap75: float
    per_scale: dict[ScaleClass, float]
    bbp: float
    bbr: float
    per_scale_boxes: dict[ScaleClass, BoxScaleMetrics] = field(default_factory=dict)
    counts: dict[ScaleClass, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
            "per_scale": {c.value: v for c, v in self.per_scale.items()},
            "bbp": self.bbp, "bbr": self.bbr,
            "per_scale_boxes": {c.value: {"bbp": m.bbp, "bbr": m.bbr,
                                          "num_gt": m.num_gt}
                                for c, m in self.per_scale_boxes.items()},
            "counts": {c.value: n for c, n in self.counts.items()},
            "pr_points": [[r, p] for r, p in self.pr_points],
        }

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)

    def save_csv(self, path):
        """One row per PR point, for external plotting."""
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["recall", "precision"])
            for r, p in self.pr_points:
                writer.writerow([f"{r:.6f}", f"{p:.6f}"])


def evaluate_keypoints(dets: Sequence[Sequence[Pose]],
                       gts: Sequence[Sequence[Pose]],
                       consts: OksConstants | None = None) -> EvalReport:
    """Keypoint AP (OKS 0.50:0.05:0.95), AP50/AP75, per-scale AP, and box metrics."""
    if len(dets) != len(gts):
        raise ValueError("dets and gts must cover the same scenes")
    consts = consts or OksConstants.coco()
    num_gt = sum(len(g) for g in gts)

    aps, per_scale_accum = [], {c: [] for c in ScaleClass}
    ap50 = ap75 = 0.0
    pr_points: list[tuple[float, float]] = []
    for t in OKS_THRESHOLDS:
        match_results = _scene_matches(dets, gts, t, "oks", consts)
        ap_t, points = _ap_over_scenes(match_results, num_gt)
        aps.append(ap_t)
        if t == 0.5:
            ap50, pr_points = ap_t, points
        if t == 0.75:
            ap75 = ap_t
        for cls in ScaleClass:
            ap_c, _ = _scale_filtered_ap(match_results, dets, gts, cls)
            per_scale_accum[cls].append(ap_c)

    counts = {cls: sum(1 for scene in gts for g in scene if _gt_scale(g) is cls)
              for cls in ScaleClass}
    bbp, bbr, per_scale_boxes = evaluate_boxes(dets, gts)
    return EvalReport(
        pr_points=pr_points,
        ap=float(np.mean(aps)),
        ap50=ap50,
        ap75=ap75,
        per_scale={c: float(np.mean(v)) for c, v in per_scale_accum.items()},
        bbp=bbp,
        bbr=bbr,
        per_scale_boxes=per_scale_boxes,
        counts=counts,
    )


def evaluate_boxes(dets: Sequence[Sequence[Pose]],
                   gts: Sequence[Sequence[Pose]]):
    """Box precision/recall at IoU 0.5 over pose-derived boxes.

    Returns (bbp, bbr, per_scale) where bbp is the 101-point box AP, bbr the
    matched fraction of ground truths, and per_scale the same pair within
    each scale class. Degenerate poses are skipped with a warning.
    """
    clean_dets, clean_gts = [], []
    for det_scene, gt_scene in zip(dets, gts):
        kept_d, kept_g = [], []
        for p in det_scene:
            try:
                bbox_from_pose(p)
                kept_d.append(p)
            except DegeneratePose:
                logger.warning("evaluate_boxes: skipping degenerate detection")
        for p in gt_scene:
            try:
                bbox_from_pose(p)
                kept_g.append(p)
            except DegeneratePose:
                logger.warning("evaluate_boxes: skipping degenerate ground truth")
        clean_dets.append(kept_d)
        clean_gts.append(kept_g)

    num_gt = sum(len(g) for g in clean_gts)
    match_results = _scene_matches(clean_dets, clean_gts, BOX_IOU_THRESHOLD,
                                   "iou", None)
    bbp, _ = _ap_over_scenes(match_results, num_gt)
    matched = sum(sum(mr.gt_matched) for mr in match_results)
    bbr = matched / num_gt if num_gt > 0 else 0.0

    per_scale = {}
    for cls in ScaleClass:
        n_cls = sum(1 for scene in clean_gts for g in scene if _gt_scale(g) is cls)
        ap_c, _ = _scale_filtered_ap(match_results, clean_dets, clean_gts, cls)
        matched_c = sum(
            1 for mr, gt_scene in zip(match_results, clean_gts)
            for j, hit in enumerate(mr.gt_matched)
            if hit and _gt_scale(gt_scene[j]) is cls)
        per_scale[cls] = BoxScaleMetrics(
            bbp=ap_c, bbr=matched_c / n_cls if n_cls > 0 else 0.0, num_gt=n_cls)
    return bbp, bbr, per_scale


def _keypoint_ap(dets, gts, consts) -> float:
    num_gt = sum(len(g) for g in gts)
    aps = []
    for t in OKS_THRESHOLDS:
        match_results = _scene_matches(dets, gts, t, "oks", consts)
        ap_t, _ = _ap_over_scenes(match_results, num_gt)
        aps.append(ap_t)
    return float(np.mean(aps))


def simulate_missing_gt(dets: Sequence[Sequence[Pose]],
                        gts: Sequence[Sequence[Pose]],
                        drop, seed: int = 0,
                        consts: OksConstants | None = None):
    """Keypoint AP with complete vs. partially removed ground truths.

    `drop` is either a fraction in [0, 1) or an explicit list of global
    ground-truth indices (scene-major enumeration order). Fractional drops
    are nested: a larger fraction always removes a superset of a smaller one
    under the same seed.
    """
    consts = consts or OksConstants.coco()
    flat = [(s, j) for s, scene in enumerate(gts) for j in range(len(scene))]
    total = len(flat)
    if isinstance(drop, (int, float)) and not isinstance(drop, bool):
        if not 0.0 <= drop < 1.0:
            raise InvalidDrop(f"drop fraction must be in [0,1), got {drop}")
        perm = np.random.default_rng(seed).permutation(total)
        k = int(round(drop * total))
        dropped = {flat[i] for i in perm[:k].tolist()}
    else:
        indices = sorted(set(int(i) for i in drop))
        if any(i < 0 or i >= total for i in indices):
            raise IndexError("drop index out of range")
        dropped = {flat[i] for i in indices}
    if total > 0 and len(dropped) >= total:
        raise InvalidDrop("cannot drop every ground truth")

    reduced = [[g for j, g in enumerate(scene) if (s, j) not in dropped]
               for s, scene in enumerate(gts)]
    ap_complete = _keypoint_ap(dets, gts, consts)
    ap_incomplete = _keypoint_ap(dets, reduced, consts)
    return ap_complete, ap_incomplete
