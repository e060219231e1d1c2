"""Reference calibration and latent-to-score conversion.

A reference profile is the mean latent over a calibration stretch on a
designated smooth terrain. A score is the cosine similarity of a latent
mean against that profile, affinely rescaled from [-1, 1] to [0, 1], and
optionally robustified by a trailing sliding minimum.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVectorError, InvalidInputError
from .sensornet import LatentEmbedding

_NORM_FLOOR = 1e-12


@dataclass
class ReferenceProfile:
    mean_latent: np.ndarray
    n_samples: int
    terrain_id: int | None = None


@dataclass
class ScoreEntry:
    t: float
    score: float
    terrain_gt: int | None = None


@dataclass
class ScoreSeries:
    entries: list[ScoreEntry]

    def __post_init__(self):
        ts = [e.t for e in self.entries]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise InvalidInputError("score timestamps must be increasing")

    def scores(self) -> np.ndarray:
        return np.array([e.score for e in self.entries])

    def by_terrain(self) -> dict[int, np.ndarray]:
        groups: dict[int, list[float]] = {}
        for e in self.entries:
            if e.terrain_gt is not None:
                groups.setdefault(int(e.terrain_gt), []).append(e.score)
        return {k: np.asarray(v) for k, v in sorted(groups.items())}


def calibrate_reference(latents: list[LatentEmbedding],
                        terrain_id: int | None = None) -> ReferenceProfile:
    """Arithmetic mean of the calibration latent means."""
    if not latents:
        raise InvalidInputError("calibration needs at least one latent")
    mean = np.mean(np.stack([l.mean for l in latents]), axis=0)
    return ReferenceProfile(mean_latent=mean, n_samples=len(latents),
                            terrain_id=terrain_id)


def score(latent: LatentEmbedding, ref: ReferenceProfile) -> float:
    """Rescaled cosine similarity (cos+1)/2 against the reference mean."""
    a, b = ref.mean_latent, latent.mean
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < _NORM_FLOOR or nb < _NORM_FLOOR:
        raise DegenerateVectorError("near-zero latent norm in score computation")
    cos = float(a @ b) / (na * nb)
    return float(np.clip((cos + 1.0) / 2.0, 0.0, 1.0))


def score_series(latents: list[LatentEmbedding], ref: ReferenceProfile) -> ScoreSeries:
    return ScoreSeries([ScoreEntry(l.t, score(l, ref), l.terrain_gt) for l in latents])


def robustify(series: ScoreSeries, window: float) -> ScoreSeries:
    """Trailing sliding minimum over `window` seconds (entry included)."""
    if window <= 0:
        raise InvalidInputError("window must be positive")
    entries = series.entries
    out: list[ScoreEntry] = []
    from collections import deque

    dq: deque[int] = deque()  # indices with increasing scores
    for i, e in enumerate(entries):
        while dq and entries[dq[0]].t < e.t - window:
            dq.popleft()
        while dq and entries[dq[-1]].score >= e.score:
            dq.pop()
        dq.append(i)
        out.append(ScoreEntry(e.t, entries[dq[0]].score, e.terrain_gt))
    return ScoreSeries(out)


def save_scores(path, series: ScoreSeries) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "score", "terrain_gt"])
        for e in series.entries:
            writer.writerow([repr(e.t), repr(e.score),
                             "" if e.terrain_gt is None else e.terrain_gt])


def load_scores(path) -> ScoreSeries:
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            gt = row["terrain_gt"]
            entries.append(ScoreEntry(float(row["t"]), float(row["score"]),
                                      None if gt == "" else int(gt)))
    return ScoreSeries(entries)
