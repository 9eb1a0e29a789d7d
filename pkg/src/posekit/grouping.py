"""Pose similarity and duplicate grouping: the learned replacement for NMS.

Similarity between two poses is the product of an appearance term (clamped
cosine of unit-norm embedding vectors) and a spatial term: the mean, over
mutually labeled keypoints, of (1 / (sigma * sqrt(2 pi))) *
exp(-||a_k - b_k||^2 / (2 sigma^2)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import Pose, compute_oks, pose_area
from .decoder import CandidateSet
from .errors import EmptyGroup, NoOverlap, NotNormalized

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class PoseFeature:
    """Unit-norm appearance embedding of one pose."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        norm = float(np.linalg.norm(v))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise NotNormalized(f"feature norm {norm} deviates from 1")
        object.__setattr__(self, "values", v)

    @staticmethod
    def normalized(values: np.ndarray) -> "PoseFeature":
        v = np.asarray(values, dtype=float)
        return PoseFeature(v / (np.linalg.norm(v) + 1e-12))


@dataclass(frozen=True)
class PoseGroup:
    """Indices into a candidate list that were judged the same person."""

    member_indices: tuple[int, ...]
    representative: int

    def __post_init__(self):
        if self.representative not in self.member_indices:
            raise ValueError("representative must be a group member")


def d_sp(a: Pose, b: Pose, sigma: float) -> float:
    """Gaussian spatial-configuration similarity over mutually labeled keypoints."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    both = a.labeled_mask() & b.labeled_mask()
    n_common = int(both.sum())
    if n_common == 0:
        raise NoOverlap("poses share no mutually labeled keypoint")
    d2 = np.sum((a.xy()[both] - b.xy()[both]) ** 2, axis=1)
    coef = 1.0 / (sigma * math.sqrt(2.0 * math.pi))
    return float(np.mean(coef * np.exp(-d2 / (2.0 * sigma * sigma))))


def d_app(fa: PoseFeature, fb: PoseFeature) -> float:
    """Cosine similarity of two embeddings, clamped at zero."""
    return float(max(0.0, np.dot(fa.values, fb.values)))


def d_pose(a: Pose, b: Pose, fa: PoseFeature, fb: PoseFeature, sigma: float) -> float:
    """Combined pose similarity: appearance times spatial."""
    return d_app(fa, fb) * d_sp(a, b, sigma)


def pair_sigma(a: Pose, b: Pose) -> float:
    """Scale-adaptive spatial sigma: 0.1 * sqrt(mean of the two box areas)."""
    return 0.1 * math.sqrt(0.5 * (pose_area(a) + pose_area(b)))


def _ordering(scores: Sequence[float]) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def group_poses(cands: CandidateSet, feats: Sequence[PoseFeature],
                sigma: float | None = None, tau: float = 0.01,
                confidences: Sequence[float] | None = None) -> list[PoseGroup]:
    """Greedy duplicate grouping by combined similarity.

    Candidates are visited in descending confidence (peak score when no
    confidences are given); each joins the first group whose representative
    it matches with d_pose >= tau, else it opens a new group. When sigma is
    None the scale-adaptive per-pair sigma is used.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if len(feats) != len(cands):
        raise ValueError("feats must align with candidates")
    scores = list(confidences) if confidences is not None else \
        [c.peak_score for c in cands]
    if len(scores) != len(cands):
        raise ValueError("confidences must align with candidates")

    groups: list[list[int]] = []
    for i in _ordering(scores):
        pose = cands[i].pose
        placed = False
        for group in groups:
            rep = group[0]
            s = sigma if sigma is not None else pair_sigma(pose, cands[rep].pose)
            try:
                sim = d_pose(pose, cands[rep].pose, feats[i], feats[rep], s)
            except NoOverlap:
                continue
            if sim >= tau:
                group.append(i)
                placed = True
                break
        if not placed:
            groups.append([i])
    return [PoseGroup(tuple(sorted(g)), representative=g[0]) for g in groups]


def select_best(group: PoseGroup, confidences: Sequence[float]) -> int:
    """Index of the highest-confidence member; ties go to the lower index."""
    if not group.member_indices:
        raise EmptyGroup("cannot select from an empty group")
    return max(sorted(group.member_indices), key=lambda i: (confidences[i], -i))


def oks_nms(cands: CandidateSet, threshold: float = 0.5,
            confidences: Sequence[float] | None = None) -> list[PoseGroup]:
    """Baseline duplicate removal: greedy OKS suppression at the given threshold.

    Returns the same group structure as group_poses so the two paths are
    interchangeable: each kept candidate is a representative and absorbs the
    candidates it suppressed.
    """
    scores = list(confidences) if confidences is not None else \
        [c.peak_score for c in cands]
    remaining = _ordering(scores)
    groups = []
    while remaining:
        keep = remaining[0]
        keep_pose = cands[keep].pose
        keep_area = pose_area(keep_pose)
        members, survivors = [keep], []
        for i in remaining[1:]:
            if compute_oks(cands[i].pose, keep_pose, keep_area) >= threshold:
                members.append(i)
            else:
                survivors.append(i)
        groups.append(PoseGroup(tuple(sorted(members)), representative=keep))
        remaining = survivors
    return groups
