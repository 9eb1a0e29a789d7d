"""Geometry primitives: COCO-convention poses, OKS, boxes, scale classes, anatomical centers.

All functions here are pure and operate on immutable inputs; they are safe to
call concurrently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    CenterUndefined,
    DegeneratePose,
    InvalidArea,
    NoLabeledKeypoints,
)

# COCO keypoint order (17 keypoints).
NOSE = 0
LEFT_EYE = 1
RIGHT_EYE = 2
LEFT_EAR = 3
RIGHT_EAR = 4
LEFT_SHOULDER = 5
RIGHT_SHOULDER = 6
LEFT_ELBOW = 7
RIGHT_ELBOW = 8
LEFT_WRIST = 9
RIGHT_WRIST = 10
LEFT_HIP = 11
RIGHT_HIP = 12
LEFT_KNEE = 13
RIGHT_KNEE = 14
LEFT_ANKLE = 15
RIGHT_ANKLE = 16

NUM_KEYPOINTS = 17

FACIAL_KEYPOINTS = (NOSE, LEFT_EYE, RIGHT_EYE, LEFT_EAR, RIGHT_EAR)
SHOULDER_KEYPOINTS = (LEFT_SHOULDER, RIGHT_SHOULDER)
HIP_KEYPOINTS = (LEFT_HIP, RIGHT_HIP)

# Per-keypoint falloff constants of the COCO keypoint evaluation protocol
# (twice the published per-keypoint sigmas, so that similarity is
# exp(-d^2 / (2 * area * k^2)) per keypoint).
COCO_SIGMAS = np.array(
    [.026, .025, .025, .035, .035, .079, .079, .072, .072,
     .062, .062, .107, .107, .087, .087, .089, .089]
)
COCO_FALLOFF = 2.0 * COCO_SIGMAS

DEFAULT_BOX_MARGIN = 0.1


@dataclass(frozen=True)
class Keypoint:
    """One 2-D keypoint in pixel coordinates.

    v follows the COCO convention: 0 = unlabeled, 1 = labeled but occluded,
    2 = labeled and visible.
    """

    x: float
    y: float
    v: int = 2

    def __post_init__(self):
        if self.v > 0 and not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("labeled keypoint must have finite coordinates")


@dataclass(frozen=True)
class Pose:
    """An ordered, fixed-length keypoint list with a confidence score."""

    keypoints: tuple[Keypoint, ...]
    score: float = 1.0
    id: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must be in [0,1], got {self.score}")
        object.__setattr__(self, "keypoints", tuple(self.keypoints))

    def __len__(self) -> int:
        return len(self.keypoints)

    def xy(self) -> np.ndarray:
        """Keypoint coordinates as an (N, 2) float array."""
        return np.array([(k.x, k.y) for k in self.keypoints], dtype=float)

    def vis(self) -> np.ndarray:
        """Visibility flags as an (N,) int array."""
        return np.array([k.v for k in self.keypoints], dtype=int)

    def labeled_mask(self) -> np.ndarray:
        return self.vis() > 0

    def with_score(self, score: float) -> "Pose":
        return Pose(self.keypoints, score=score, id=self.id)

    def with_id(self, id: Optional[int]) -> "Pose":
        return Pose(self.keypoints, score=self.score, id=id)

    @staticmethod
    def from_arrays(xy: np.ndarray, vis: np.ndarray | None = None,
                    score: float = 1.0, id: Optional[int] = None) -> "Pose":
        xy = np.asarray(xy, dtype=float)
        if vis is None:
            vis = np.full(len(xy), 2, dtype=int)
        kps = tuple(Keypoint(float(x), float(y), int(v))
                    for (x, y), v in zip(xy, vis))
        return Pose(kps, score=score, id=id)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box, top-left corner plus positive width/height."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"box sides must be positive, got w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h


class ScaleClass(Enum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


# Person box-area boundaries of the small/medium/large split, upper-inclusive.
SMALL_MAX_AREA = 64.0 ** 2
MEDIUM_MAX_AREA = 128.0 ** 2


@dataclass(frozen=True)
class OksConstants:
    """Per-keypoint falloff constants k_i for the OKS similarity."""

    falloff: tuple[float, ...]

    def __post_init__(self):
        if any(k <= 0 for k in self.falloff):
            raise ValueError("all falloff constants must be positive")
        object.__setattr__(self, "falloff", tuple(float(k) for k in self.falloff))

    def __len__(self) -> int:
        return len(self.falloff)

    def as_array(self) -> np.ndarray:
        return np.array(self.falloff, dtype=float)

    @staticmethod
    def coco() -> "OksConstants":
        """Built-in constants of the 17-keypoint COCO protocol."""
        return OksConstants(tuple(COCO_FALLOFF))

    @staticmethod
    def uniform(n: int, k: float = 0.1) -> "OksConstants":
        return OksConstants((k,) * n)

    @staticmethod
    def from_file(path) -> "OksConstants":
        """Load constants from a JSON file {"falloff": [k_0, ...]}."""
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
        return OksConstants(tuple(obj["falloff"]))


def compute_oks(pred: Pose, gt: Pose, gt_area: float,
                consts: OksConstants | None = None) -> float:
    """Object keypoint similarity between a predicted and a ground-truth pose.

    Averages exp(-d_i^2 / (2 * gt_area * k_i^2)) over the ground-truth
    keypoints with v > 0, where d_i is the Euclidean pixel distance between
    the i-th keypoints. Returns 1.0 iff all labeled keypoints coincide.
    """
    if gt_area <= 0:
        raise InvalidArea(f"gt_area must be positive, got {gt_area}")
    consts = consts if consts is not None else OksConstants.coco()
    labeled = gt.labeled_mask()
    if not labeled.any():
        raise NoLabeledKeypoints("ground-truth pose has no labeled keypoint")
    d2 = np.sum((pred.xy() - gt.xy()) ** 2, axis=1)
    k2 = consts.as_array() ** 2
    e = d2[labeled] / (2.0 * gt_area * k2[labeled])
    return float(np.mean(np.exp(-e)))


def bbox_from_pose(pose: Pose, margin: float = DEFAULT_BOX_MARGIN) -> BoundingBox:
    """Tight box over the labeled keypoints, expanded by `margin` per side.

    Raises DegeneratePose when fewer than two keypoints are labeled or the
    labeled keypoints have zero extent along either axis.
    """
    labeled = pose.labeled_mask()
    if labeled.sum() < 2:
        raise DegeneratePose("need at least two labeled keypoints")
    xy = pose.xy()[labeled]
    x0, y0 = xy.min(axis=0)
    x1, y1 = xy.max(axis=0)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise DegeneratePose("labeled keypoints have zero extent")
    return BoundingBox(x0 - margin * w, y0 - margin * h,
                       w * (1 + 2 * margin), h * (1 + 2 * margin))


def pose_area(pose: Pose, margin: float = DEFAULT_BOX_MARGIN) -> float:
    """Margin-expanded hull area of a pose; falls back to 1.0 px^2 when degenerate."""
    try:
        return bbox_from_pose(pose, margin).area
    except DegeneratePose:
        return 1.0


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection-over-union of two boxes; disjoint boxes give 0."""
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def scale_class(area: float) -> ScaleClass:
    """Classify a box area into small (0,64^2], medium (64^2,128^2], or large."""
    if area <= 0:
        raise InvalidArea(f"area must be positive, got {area}")
    if area <= SMALL_MAX_AREA:
        return ScaleClass.SMALL
    if area <= MEDIUM_MAX_AREA:
        return ScaleClass.MEDIUM
    return ScaleClass.LARGE


def _mean_of(pose: Pose, indices: Iterable[int]) -> np.ndarray | None:
    vis = pose.vis()
    xy = pose.xy()
    pts = [xy[i] for i in indices if i < len(vis) and vis[i] > 0]
    if not pts:
        return None
    return np.mean(pts, axis=0)


def head_center(pose: Pose) -> np.ndarray:
    """Mean of the labeled facial keypoints (nose, eyes, ears)."""
    c = _mean_of(pose, FACIAL_KEYPOINTS)
    if c is None:
        raise CenterUndefined("head center: no labeled facial keypoint")
    return c


def body_center(pose: Pose) -> np.ndarray:
    """Mean of the labeled shoulder and hip keypoints."""
    vis = pose.vis()
    if not any(vis[i] > 0 for i in SHOULDER_KEYPOINTS):
        raise CenterUndefined("body center: no labeled shoulder")
    if not any(vis[i] > 0 for i in HIP_KEYPOINTS):
        raise CenterUndefined("body center: no labeled hip")
    return _mean_of(pose, SHOULDER_KEYPOINTS + HIP_KEYPOINTS)


def anatomical_centers(pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """(head_center, body_center) of a pose; raises CenterUndefined naming the failure."""
    return head_center(pose), body_center(pose)


# --- pose list JSON ---------------------------------------------------------

def poses_to_json(poses: Sequence[Pose], num_keypoints: int = NUM_KEYPOINTS) -> dict:
    """Serialize a pose list to the interchange JSON object."""
    out = []
    for p in poses:
        rec = {
            "keypoints": [float(v) for k in p.keypoints for v in (k.x, k.y, k.v)],
            "score": float(p.score),
        }
        if p.id is not None:
            rec["id"] = p.id
        out.append(rec)
    return {"num_keypoints": num_keypoints, "poses": out}


def poses_from_json(obj: dict) -> list[Pose]:
    """Parse the interchange JSON object back into a pose list."""
    n = int(obj["num_keypoints"])
    poses = []
    for rec in obj["poses"]:
        flat = rec["keypoints"]
        if len(flat) != 3 * n:
            raise ValueError(f"expected {3 * n} keypoint values, got {len(flat)}")
        kps = tuple(Keypoint(float(flat[3 * i]), float(flat[3 * i + 1]),
                             int(flat[3 * i + 2])) for i in range(n))
        poses.append(Pose(kps, score=float(rec.get("score", 1.0)),
                          id=rec.get("id")))
    return poses


def save_poses(path, poses: Sequence[Pose], num_keypoints: int = NUM_KEYPOINTS):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(poses_to_json(poses, num_keypoints), fh)


def load_poses(path) -> list[Pose]:
    with open(path, "r", encoding="utf-8") as fh:
        return poses_from_json(json.load(fh))


def coco_results_to_poses(records: Sequence[dict],
                          num_keypoints: int = NUM_KEYPOINTS) -> dict[int, list[Pose]]:
    """Import COCO-format keypoint results, grouped by image_id.

    Each record is {"image_id": int, "keypoints": [x, y, v, ...], "score": float}.
    """
    by_image: dict[int, list[Pose]] = {}
    for rec in records:
        flat = rec["keypoints"]
        if len(flat) != 3 * num_keypoints:
            raise ValueError("keypoints length does not match num_keypoints")
        kps = tuple(Keypoint(float(flat[3 * i]), float(flat[3 * i + 1]),
                             int(flat[3 * i + 2])) for i in range(num_keypoints))
        score = float(min(max(rec.get("score", 1.0), 0.0), 1.0))
        by_image.setdefault(int(rec["image_id"]), []).append(Pose(kps, score=score))
    return by_image
