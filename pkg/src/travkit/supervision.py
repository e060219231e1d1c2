"""Per-image supervision from experienced scores.

Poses are projected into a patch-feature image's top-down window to form a
sparse footprint of scored cells; terrain masks grow from each footprint
cell by thresholded feature cosine similarity (overlapping growths merge);
the supervision mask assigns every segment the mean of the footprint scores
it contains.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .errors import InternalConsistencyError, InvalidInputError
from .scoring import ScoreSeries
from .synthworld import PatchFeatureImage, Pose


@dataclass
class Footprint:
    pixels: list[tuple[int, int, float]] = field(default_factory=list)
    source_times: list[float] = field(default_factory=list)


@dataclass
class TerrainMask:
    segments: np.ndarray  # (H_p, W_p) segment ids, 0 = unassigned


@dataclass
class SupervisionMask:
    values: np.ndarray  # (H_p, W_p) scores in [0, 1]
    valid: np.ndarray  # (H_p, W_p) bool


def project_footprints(poses: list[Pose], scores: ScoreSeries,
                       image: PatchFeatureImage,
                       time_tolerance: float = 0.5) -> Footprint:
    """Map poses inside the image window to scored patch cells.

    Each pose takes the score entry nearest in time (within the tolerance,
    otherwise the pose is skipped); poses outside the window are dropped.
    """
    h_p, w_p = image.terrain_gt.shape
    x0, y0 = image.origin_xy
    pm = image.patch_size_m
    ts = [e.t for e in scores.entries]
    fp = Footprint()
    for pose in poses:
        if not ts:
            break
        i = bisect.bisect_left(ts, pose.t)
        best = None
        for j in (i - 1, i):
            if 0 <= j < len(ts) and abs(ts[j] - pose.t) <= time_tolerance:
                if best is None or abs(ts[j] - pose.t) < abs(ts[best] - pose.t):
                    best = j
        if best is None:
            continue
        col = int(np.floor((pose.x - x0) / pm))
        row = int(np.floor((pose.y - y0) / pm))
        if 0 <= row < h_p and 0 <= col < w_p:
            fp.pixels.append((row, col, scores.entries[best].score))
            fp.source_times.append(pose.t)
    return fp


def segment_terrain(image: PatchFeatureImage, footprint: Footprint,
                    c: float = 0.95) -> TerrainMask:
    """Grow a segment around every footprint cell by cosine similarity > c.

    Growths from different footprint cells merge when they overlap; ids are
    relabeled contiguously from 1 in row-major first-appearance order.
    """
    if not 0.0 < c < 1.0:
        raise InvalidInputError("cosine threshold must lie in (0, 1)")
    feats = image.features
    norms = np.linalg.norm(feats, axis=2)
    norms = np.where(norms < 1e-12, 1.0, norms)
    unit = feats / norms[..., None]
    labels = np.zeros(image.terrain_gt.shape, dtype=np.int32)
    next_id = 1
    for row, col, _ in footprint.pixels:
        ref = unit[row, col]
        mask = (unit @ ref) > c
        mask[row, col] = True  # the seed cell always joins its own segment
        overlapping = np.unique(labels[mask])
        overlapping = overlapping[overlapping > 0]
        if overlapping.size == 0:
            labels[mask] = next_id
            next_id += 1
        else:
            target = int(overlapping.min())
            for other in overlapping:
                if other != target:
                    labels[labels == other] = target
            labels[mask] = target
    # contiguous relabel in scan order
    out = np.zeros_like(labels)
    mapping: dict[int, int] = {}
    for r in range(labels.shape[0]):
        for cix in range(labels.shape[1]):
            lab = labels[r, cix]
            if lab > 0:
                if lab not in mapping:
                    mapping[lab] = len(mapping) + 1
                out[r, cix] = mapping[lab]
    return TerrainMask(segments=out)


def build_supervision(footprint: Footprint, mask: TerrainMask) -> SupervisionMask:
    """Broadcast the per-segment mean of footprint scores over each segment."""
    segments = mask.segments
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for row, col, s in footprint.pixels:
        seg = int(segments[row, col])
        if seg == 0:
            raise InternalConsistencyError(
                f"footprint cell ({row}, {col}) lies outside every segment")
        sums[seg] = sums.get(seg, 0.0) + s
        counts[seg] = counts.get(seg, 0) + 1
    values = np.zeros(segments.shape, dtype=float)
    valid = np.zeros(segments.shape, dtype=bool)
    for seg, total in sums.items():
        cells = segments == seg
        values[cells] = total / counts[seg]
        valid[cells] = True
    return SupervisionMask(values=values, valid=valid)


def save_supervision(directory, name: str, mask: SupervisionMask) -> None:
    from . import io

    d = io.ensure_dir(directory)
    io.write_grid_csv(d / f"{name}_values.csv", mask.values)
    io.write_grid_csv(d / f"{name}_valid.csv", mask.valid.astype(np.int8))


def load_supervision(directory, name: str) -> SupervisionMask:
    from pathlib import Path

    from . import io

    d = Path(directory)
    values = io.read_grid_csv(d / f"{name}_values.csv")
    valid = io.read_grid_csv(d / f"{name}_valid.csv", dtype=np.int8).astype(bool)
    return SupervisionMask(values=values, valid=valid)
