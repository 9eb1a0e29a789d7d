"""Ground-truth map rendering and its inverse primitives.

Scenes are encoded at several resolutions (coarse to fine) into keypoint
heatmaps, two anatomical-center heatmaps (index 0 = head, 1 = body),
per-center offset fields, and synthetic appearance feature maps. Rendering
uses a scale-dependent Gaussian kernel so larger persons get wider peaks.

Grid convention: cell (ix, iy) sits at image pixel ((ix + 0.5) * stride,
(iy + 0.5) * stride). Peaks and centers are snapped to the nearest cell
before rendering, and offsets are stored relative to the cell position, so a
noiseless encode/decode round trip is exact.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ptf
from .core import Pose, body_center, head_center, pose_area
from .errors import CenterUndefined, InvalidKernel, OutOfBounds

logger = logging.getLogger("posekit.codec")

HEAD_CENTER = 0
BODY_CENTER = 1
CENTER_NAMES = ("head", "body")


@dataclass
class Grid2D:
    """One grid channel: row-major float32 values plus a pixels-per-cell stride."""

    values: np.ndarray
    stride: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("Grid2D values must be 2-D (height, width)")
        if self.stride <= 0:
            raise ValueError("stride must be positive")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def cell_pos(self, ix: int, iy: int) -> tuple[float, float]:
        """Image-pixel position of a cell center."""
        return (ix + 0.5) * self.stride, (iy + 0.5) * self.stride

    def nearest_cell(self, x: float, y: float) -> tuple[int, int]:
        """Cell whose center is closest to pixel (x, y), clamped into the grid."""
        ix = int(np.clip(round(x / self.stride - 0.5), 0, self.width - 1))
        iy = int(np.clip(round(y / self.stride - 0.5), 0, self.height - 1))
        return ix, iy

    def in_bounds(self, x: float, y: float) -> bool:
        return 0 <= x < self.width * self.stride and 0 <= y < self.height * self.stride

    def bilinear(self, x: float, y: float) -> float:
        """Bilinear read at pixel (x, y) with border clamp."""
        gx = np.clip(x / self.stride - 0.5, 0.0, self.width - 1.0)
        gy = np.clip(y / self.stride - 0.5, 0.0, self.height - 1.0)
        ix0, iy0 = int(gx), int(gy)
        ix1, iy1 = min(ix0 + 1, self.width - 1), min(iy0 + 1, self.height - 1)
        fx, fy = gx - ix0, gy - iy0
        v = self.values
        top = (1 - fx) * v[iy0, ix0] + fx * v[iy0, ix1]
        bot = (1 - fx) * v[iy1, ix0] + fx * v[iy1, ix1]
        return float((1 - fy) * top + fy * bot)


@dataclass(frozen=True)
class Peak:
    """A detected local maximum, in image pixels."""

    x: float
    y: float
    score: float
    channel: int


@dataclass
class ResolutionMaps:
    """All channels of one resolution; every grid shares width/height/stride."""

    stride: float
    keypoint_heatmaps: tuple[Grid2D, ...]
    center_heatmaps: tuple[Grid2D, ...]
    offset_fields: tuple[tuple[Grid2D, ...], ...]  # [center][2k: dx, 2k+1: dy]
    feature_maps: tuple[Grid2D, ...]

    def __post_init__(self):
        grids = (list(self.keypoint_heatmaps) + list(self.center_heatmaps)
                 + [g for fs in self.offset_fields for g in fs]
                 + list(self.feature_maps))
        shapes = {(g.width, g.height, g.stride) for g in grids}
        if len(shapes) != 1:
            raise ValueError("all grids of one resolution must share dims and stride")

    @property
    def width(self) -> int:
        return self.center_heatmaps[0].width

    @property
    def height(self) -> int:
        return self.center_heatmaps[0].height


@dataclass
class SceneMaps:
    """Multi-resolution map stack for one scene, ordered coarse to fine."""

    resolutions: tuple[ResolutionMaps, ...]
    image_dims: tuple[int, int]
    num_keypoints: int
    feature_dim: int
    skipped: tuple[int, ...] = ()

    def __post_init__(self):
        strides = [r.stride for r in self.resolutions]
        if any(a <= b for a, b in zip(strides, strides[1:])):
            raise ValueError("resolutions must have strictly decreasing stride")

    def freeze(self) -> "SceneMaps":
        """Mark all channel arrays read-only; maps are shared across workers."""
        for res in self.resolutions:
            for grid in _all_grids(res):
                grid.values.flags.writeable = False
        return self

    @property
    def finest(self) -> ResolutionMaps:
        return self.resolutions[-1]


def _all_grids(res: ResolutionMaps):
    yield from res.keypoint_heatmaps
    yield from res.center_heatmaps
    for fs in res.offset_fields:
        yield from fs
    yield from res.feature_maps


@dataclass(frozen=True)
class EncodeConfig:
    """Map-rendering parameters.

    The per-person kernel is sigma_cells = base_sigma * sqrt(box area) /
    reference_extent, clamped to [sigma_min, sigma_max]; the pixel-space
    kernel at each resolution is sigma_cells * stride.
    """

    strides: tuple[float, ...] = (4.0, 2.0, 1.0)
    base_sigma: float = 2.0
    reference_extent: float = 96.0
    sigma_min: float = 0.75
    sigma_max: float = 8.0
    offset_radius: int = 2
    feature_dim: int = 8
    feature_seed: int = 0
    box_margin: float = 0.1

    def __post_init__(self):
        s = tuple(float(v) for v in self.strides)
        if any(a <= b for a, b in zip(s, s[1:])):
            raise ValueError("strides must be strictly decreasing (coarse to fine)")
        object.__setattr__(self, "strides", s)

    def sigma_cells(self, area: float) -> float:
        raw = self.base_sigma * math.sqrt(max(area, 0.0)) / self.reference_extent
        return float(np.clip(raw, self.sigma_min, self.sigma_max))


def render_gaussian_peak(grid: Grid2D, center: tuple[float, float],
                         sigma: float) -> Grid2D:
    """Max-composite a unit-height Gaussian (sigma in pixels) into the grid.

    Each cell takes max(existing, exp(-||cell_pos - center||^2 / (2 sigma^2))).
    Contributions below ~1.5e-8 (beyond 6 sigma) are left untouched.
    """
    if sigma <= 0:
        raise InvalidKernel(f"sigma must be positive, got {sigma}")
    cx, cy = center
    radius_cells = int(math.ceil(6.0 * sigma / grid.stride)) + 1
    icx, icy = grid.nearest_cell(cx, cy)
    x0, x1 = max(icx - radius_cells, 0), min(icx + radius_cells + 1, grid.width)
    y0, y1 = max(icy - radius_cells, 0), min(icy + radius_cells + 1, grid.height)
    if x0 >= x1 or y0 >= y1:
        return grid
    xs = (np.arange(x0, x1) + 0.5) * grid.stride - cx
    ys = (np.arange(y0, y1) + 0.5) * grid.stride - cy
    d2 = ys[:, None] ** 2 + xs[None, :] ** 2
    patch = np.exp(-d2 / (2.0 * sigma * sigma)).astype(np.float32)
    np.maximum(grid.values[y0:y1, x0:x1], patch, out=grid.values[y0:y1, x0:x1])
    return grid


def extract_peaks(grid: Grid2D, threshold: float = 0.1, window: int = 3) -> list[Peak]:
    """Cells that strictly dominate their window neighborhood, above threshold.

    Ties between equal-valued neighbors go to the smaller row-major index.
    Peaks are returned at cell-center pixel positions, sorted by descending
    score (stable on ties).
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0,1), got {threshold}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    v = grid.values
    h, w = v.shape
    keep = v >= threshold
    r = window // 2
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy == 0 and dx == 0:
                continue
            # shifted[y, x] = v[y + dy, x + dx], -inf outside the grid
            shifted = np.full_like(v, -np.inf)
            y0, y1 = max(0, -dy), min(h, h - dy)
            x0, x1 = max(0, -dx), min(w, w - dx)
            if y0 < y1 and x0 < x1:
                shifted[y0:y1, x0:x1] = v[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            # Later neighbors (positive row-major offset) lose ties.
            if dy * w + dx > 0:
                keep &= v >= shifted
            else:
                keep &= v > shifted
    ys, xs = np.nonzero(keep)
    peaks = []
    for y, x in zip(ys.tolist(), xs.tolist()):
        px, py = grid.cell_pos(x, y)
        peaks.append(Peak(px, py, float(v[y, x]), channel=0))
    peaks.sort(key=lambda p: -p.score)
    return peaks


def decode_candidate(maps: SceneMaps, resolution_index: int, peak: Peak) -> Pose:
    """Read a full pose at a center peak: keypoint k = peak + offset channel (2k, 2k+1)."""
    res = maps.resolutions[resolution_index]
    ref = res.center_heatmaps[0]
    if not ref.in_bounds(peak.x, peak.y):
        raise OutOfBounds(f"peak ({peak.x}, {peak.y}) outside grid")
    offsets = res.offset_fields[peak.channel]
    xy = np.empty((maps.num_keypoints, 2))
    for k in range(maps.num_keypoints):
        xy[k, 0] = peak.x + offsets[2 * k].bilinear(peak.x, peak.y)
        xy[k, 1] = peak.y + offsets[2 * k + 1].bilinear(peak.x, peak.y)
    return Pose.from_arrays(xy, score=float(np.clip(peak.score, 0.0, 1.0)))


def _person_centers(pose: Pose) -> list[tuple[int, np.ndarray]]:
    centers = []
    try:
        centers.append((HEAD_CENTER, head_center(pose)))
    except CenterUndefined:
        pass
    try:
        centers.append((BODY_CENTER, body_center(pose)))
    except CenterUndefined:
        pass
    return centers


def encode_scene(poses: Sequence[Pose], image_dims: tuple[int, int],
                 config: EncodeConfig | None = None,
                 num_keypoints: int | None = None) -> SceneMaps:
    """Render ground-truth poses into a multi-resolution SceneMaps stack.

    Persons with neither anatomical center derivable are skipped and reported
    via SceneMaps.skipped and a warning log entry.
    """
    config = config or EncodeConfig()
    width, height = int(image_dims[0]), int(image_dims[1])
    n = num_keypoints if num_keypoints is not None else (
        len(poses[0]) if poses else 17)
    c_dim = config.feature_dim

    person_info = []
    skipped = []
    for i, pose in enumerate(poses):
        centers = _person_centers(pose)
        if not centers:
            skipped.append(i)
            continue
        area = pose_area(pose, config.box_margin)
        signature = np.random.default_rng([config.feature_seed, i]).normal(size=c_dim)
        signature /= np.linalg.norm(signature) + 1e-12
        person_info.append((i, pose, centers, area, signature))
    if skipped:
        logger.warning("encode: skipped persons with no derivable center: %s", skipped)

    resolutions = []
    for stride in config.strides:
        gw, gh = math.ceil(width / stride), math.ceil(height / stride)
        kp_maps = [Grid2D(np.zeros((gh, gw), np.float32), stride) for _ in range(n)]
        center_maps = [Grid2D(np.zeros((gh, gw), np.float32), stride) for _ in range(2)]
        offset_maps = [[Grid2D(np.zeros((gh, gw), np.float32), stride)
                        for _ in range(2 * n)] for _ in range(2)]
        # Offset cells belong to whichever person's center Gaussian is strongest there.
        ownership = [np.zeros((gh, gw), np.float32) for _ in range(2)]
        feat_num = np.zeros((c_dim, gh, gw), np.float32)
        feat_den = np.zeros((gh, gw), np.float32)

        for _, pose, centers, area, signature in person_info:
            sigma_px = config.sigma_cells(area) * stride
            vis = pose.vis()
            xy = pose.xy()
            for k in range(min(n, len(pose))):
                if vis[k] > 0:
                    cell = kp_maps[k].nearest_cell(xy[k, 0], xy[k, 1])
                    render_gaussian_peak(kp_maps[k], kp_maps[k].cell_pos(*cell), sigma_px)
            for c_idx, c_point in centers:
                grid = center_maps[c_idx]
                icx, icy = grid.nearest_cell(c_point[0], c_point[1])
                snapped = grid.cell_pos(icx, icy)
                render_gaussian_peak(grid, snapped, sigma_px)
                _write_offsets(offset_maps[c_idx], ownership[c_idx], icx, icy,
                               snapped, sigma_px, xy, vis, config.offset_radius,
                               stride, n)
            _blend_features(feat_num, feat_den, centers, area, signature, stride,
                            gw, gh)

        feats = feat_num / (feat_den + 1e-6)[None, :, :]
        feat_maps = [Grid2D(feats[c], stride) for c in range(c_dim)]
        resolutions.append(ResolutionMaps(
            stride=stride,
            keypoint_heatmaps=tuple(kp_maps),
            center_heatmaps=tuple(center_maps),
            offset_fields=tuple(tuple(fs) for fs in offset_maps),
            feature_maps=tuple(feat_maps),
        ))

    maps = SceneMaps(tuple(resolutions), (width, height), n, c_dim,
                     skipped=tuple(skipped))
    return maps.freeze()


def _write_offsets(offset_maps, ownership, icx, icy, snapped_px, sigma_px,
                   xy, vis, radius, stride, n):
    grid0 = offset_maps[0]
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy > radius * radius:
                continue
            cx_i, cy_i = icx + dx, icy + dy
            if not (0 <= cx_i < grid0.width and 0 <= cy_i < grid0.height):
                continue
            pos = grid0.cell_pos(cx_i, cy_i)
            d2 = (pos[0] - snapped_px[0]) ** 2 + (pos[1] - snapped_px[1]) ** 2
            weight = math.exp(-d2 / (2.0 * sigma_px * sigma_px))
            if weight <= ownership[cy_i, cx_i]:
                continue
            ownership[cy_i, cx_i] = weight
            for k in range(n):
                if k < len(vis) and vis[k] > 0:
                    offset_maps[2 * k].values[cy_i, cx_i] = xy[k, 0] - pos[0]
                    offset_maps[2 * k + 1].values[cy_i, cx_i] = xy[k, 1] - pos[1]
                else:
                    offset_maps[2 * k].values[cy_i, cx_i] = 0.0
                    offset_maps[2 * k + 1].values[cy_i, cx_i] = 0.0


def _blend_features(feat_num, feat_den, centers, area, signature, stride, gw, gh):
    # Occupancy-weighted signature blend around the body (else head) center.
    anchor = dict(centers).get(BODY_CENTER, centers[0][1])
    sigma_px = max(0.5 * math.sqrt(area), 4.0)
    xs = (np.arange(gw) + 0.5) * stride - anchor[0]
    ys = (np.arange(gh) + 0.5) * stride - anchor[1]
    wx = np.exp(-xs ** 2 / (2 * sigma_px ** 2))
    wy = np.exp(-ys ** 2 / (2 * sigma_px ** 2))
    w = (wy[:, None] * wx[None, :]).astype(np.float32)
    feat_den += w
    feat_num += signature[:, None, None].astype(np.float32) * w[None, :, :]


# --- directory serialization -------------------------------------------------

_GROUPS = ("keypoint_heatmaps", "center_heatmaps", "offsets_head",
           "offsets_body", "feature_maps")


def save_scene_maps(maps: SceneMaps, directory):
    """Write a SceneMaps as a manifest.json plus one PTF file per channel group."""
    directory = ptf.ptf_dir(directory)
    manifest = {
        "image_dims": list(maps.image_dims),
        "num_keypoints": maps.num_keypoints,
        "feature_dim": maps.feature_dim,
        "skipped": list(maps.skipped),
        "resolutions": [],
    }
    for i, res in enumerate(maps.resolutions):
        files = {}
        stacks = {
            "keypoint_heatmaps": np.stack([g.values for g in res.keypoint_heatmaps]),
            "center_heatmaps": np.stack([g.values for g in res.center_heatmaps]),
            "offsets_head": np.stack([g.values for g in res.offset_fields[HEAD_CENTER]]),
            "offsets_body": np.stack([g.values for g in res.offset_fields[BODY_CENTER]]),
            "feature_maps": np.stack([g.values for g in res.feature_maps]),
        }
        for group in _GROUPS:
            name = f"res{i}_{group}.ptf"
            ptf.write_ptf(directory / name, stacks[group])
            files[group] = name
        manifest["resolutions"].append({
            "stride": res.stride, "width": res.width, "height": res.height,
            "files": files,
        })
    with open(directory / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def load_scene_maps(directory) -> SceneMaps:
    directory = Path(directory)
    with open(directory / "manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    resolutions = []
    for entry in manifest["resolutions"]:
        stride = float(entry["stride"])
        arrays = {g: ptf.read_ptf(directory / entry["files"][g]) for g in _GROUPS}
        as_grids = lambda stack: tuple(Grid2D(a, stride) for a in stack)
        resolutions.append(ResolutionMaps(
            stride=stride,
            keypoint_heatmaps=as_grids(arrays["keypoint_heatmaps"]),
            center_heatmaps=as_grids(arrays["center_heatmaps"]),
            offset_fields=(as_grids(arrays["offsets_head"]),
                           as_grids(arrays["offsets_body"])),
            feature_maps=as_grids(arrays["feature_maps"]),
        ))
    maps = SceneMaps(
        tuple(resolutions),
        tuple(manifest["image_dims"]),
        int(manifest["num_keypoints"]),
        int(manifest["feature_dim"]),
        skipped=tuple(manifest.get("skipped", [])),
    )
    return maps.freeze()
