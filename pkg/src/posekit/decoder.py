"""Full scene decode: pooled dual-center candidates across all resolutions."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

from .codec import CENTER_NAMES, SceneMaps, decode_candidate, extract_peaks
from .core import Pose, poses_to_json


@dataclass(frozen=True)
class DecodeConfig:
    """Peak extraction and center selection knobs."""

    peak_threshold: float = 0.1
    window: int = 3
    centers: str = "dual"  # dual | head | body

    def center_channels(self) -> tuple[int, ...]:
        if self.centers == "dual":
            return (0, 1)
        if self.centers in CENTER_NAMES:
            return (CENTER_NAMES.index(self.centers),)
        raise ValueError(f"unknown centers mode: {self.centers}")


@dataclass(frozen=True)
class Candidate:
    """One decoded pose with its provenance."""

    pose: Pose
    source: str  # "head" or "body"
    resolution_index: int
    peak_score: float


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[Candidate, ...]

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i: int) -> Candidate:
        return self.candidates[i]

    def poses(self) -> list[Pose]:
        return [c.pose for c in self.candidates]


def decode_scene(maps: SceneMaps, config: DecodeConfig | None = None) -> CandidateSet:
    """Extract peaks from every center channel at every resolution and decode each.

    Candidates from all resolutions are pooled; the result is sorted by
    descending peak score with a deterministic (resolution, channel, position)
    tie-break.
    """
    config = config or DecodeConfig()
    collected = []
    for res_idx, res in enumerate(maps.resolutions):
        for channel in config.center_channels():
            grid = res.center_heatmaps[channel]
            for peak in extract_peaks(grid, config.peak_threshold, config.window):
                peak = replace(peak, channel=channel)
                pose = decode_candidate(maps, res_idx, peak)
                sort_key = (-peak.score, res_idx, channel, peak.y, peak.x)
                collected.append((sort_key, Candidate(
                    pose=pose,
                    source=CENTER_NAMES[channel],
                    resolution_index=res_idx,
                    peak_score=peak.score,
                )))
    collected.sort(key=lambda item: item[0])
    return CandidateSet(tuple(c for _, c in collected))


def candidates_to_json(cands: CandidateSet | Sequence[Candidate],
                       num_keypoints: int) -> dict:
    """Pose-list JSON with per-pose source and resolution provenance."""
    candidates = list(cands)
    obj = poses_to_json([c.pose for c in candidates], num_keypoints)
    for rec, cand in zip(obj["poses"], candidates):
        rec["source"] = cand.source
        rec["resolution"] = cand.resolution_index
    return obj
