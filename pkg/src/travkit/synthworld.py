"""Deterministic synthetic terrain worlds and their sensor channels.

Generates Voronoi terrain maps, waypoint trajectories, multimodal sensor
ticks (sinusoid-plus-noise signatures with an effort offset on the torque
channels), top-down patch-feature images standing in for a frozen visual
backbone, and surface point clouds with ground-truth terrain labels.

Everything is a pure function of its inputs and a seed.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np

from . import io
from .errors import InvalidConfigError, InvalidInputError, OutOfBoundsError

# Channel signature columns: amplitude, frequency [Hz], phase, noise std.
SIG_AMP, SIG_FREQ, SIG_PHASE, SIG_NOISE = 0, 1, 2, 3

TERRAIN_NAMES = (
    "pavement",
    "packed_dirt",
    "short_grass",
    "gravel",
    "tall_grass",
    "sand",
    "mud",
    "rubble",
    "scree",
    "brush",
    "cobbles",
)


@dataclass(frozen=True)
class ChannelGroup:
    name: str
    n_channels: int
    rate_hz: float


DEFAULT_GROUPS = (
    ChannelGroup("imu", 3, 50.0),
    ChannelGroup("joint", 4, 25.0),
    ChannelGroup("feet", 2, 25.0),
    ChannelGroup("torque", 4, 25.0),
    ChannelGroup("cmd_vel", 2, 10.0),
    ChannelGroup("vel", 2, 10.0),
)


@dataclass(frozen=True)
class SensorLayout:
    """Fixed ordering of channel groups into the flat S-dim channel vector."""

    groups: tuple = DEFAULT_GROUPS

    def __post_init__(self):
        for g in self.groups:
            if g.rate_hz <= 0:
                raise InvalidConfigError(f"group {g.name!r} has non-positive rate")

    @property
    def n_channels(self) -> int:
        return sum(g.n_channels for g in self.groups)

    @property
    def master_rate(self) -> float:
        return max(g.rate_hz for g in self.groups)

    def group_slice(self, name: str) -> slice:
        off = 0
        for g in self.groups:
            if g.name == name:
                return slice(off, off + g.n_channels)
            off += g.n_channels
        raise KeyError(name)

    def channel_groups(self) -> list[str]:
        labels = []
        for g in self.groups:
            labels.extend([g.name] * g.n_channels)
        return labels

    def masked(self, dropped: set[str]) -> "SensorLayout":
        kept = tuple(g for g in self.groups if g.name not in dropped)
        if not kept:
            raise InvalidConfigError("sensor mask removes every channel group")
        return SensorLayout(groups=kept)


@dataclass
class TerrainSpec:
    id: int
    name: str
    effort: float  # normalized traversal effort in [0, 1]
    signature: np.ndarray  # (S, 4): amplitude, frequency, phase, noise std
    proto_seed: int

    def __post_init__(self):
        if not 0.0 <= self.effort <= 1.0:
            raise InvalidConfigError(f"terrain {self.name!r}: effort outside [0,1]")
        self.signature = np.asarray(self.signature, dtype=float)
        if np.any(self.signature[:, SIG_NOISE] < 0):
            raise InvalidConfigError(f"terrain {self.name!r}: negative noise std")


@dataclass
class WorldMap:
    cells: np.ndarray  # (rows, cols) terrain ids
    elevation: np.ndarray  # (rows, cols) heights in meters
    resolution: float  # meters per cell
    terrains: list[TerrainSpec]
    layout: SensorLayout = field(default_factory=SensorLayout)

    def __post_init__(self):
        if self.resolution <= 0:
            raise InvalidConfigError("resolution must be positive")
        ids = {t.id for t in self.terrains}
        if len(ids) != len(self.terrains):
            raise InvalidConfigError("duplicate terrain ids")
        present = set(np.unique(self.cells).tolist())
        if not present <= ids:
            raise InvalidConfigError("grid references unknown terrain ids")
        self._by_id = {t.id: t for t in self.terrains}

    @property
    def shape(self):
        return self.cells.shape

    @property
    def extent(self) -> tuple[float, float]:
        """(width_x, height_y) in meters."""
        rows, cols = self.cells.shape
        return cols * self.resolution, rows * self.resolution

    def terrain(self, terrain_id: int) -> TerrainSpec:
        return self._by_id[terrain_id]

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        w, h = self.extent
        if not (0.0 <= x < w and 0.0 <= y < h):
            raise OutOfBoundsError(f"position ({x:.3f}, {y:.3f}) outside the world")
        return int(y / self.resolution), int(x / self.resolution)

    def contains(self, x: float, y: float) -> bool:
        w, h = self.extent
        return 0.0 <= x < w and 0.0 <= y < h

    def terrain_at(self, x: float, y: float) -> int:
        r, c = self.cell_index(x, y)
        return int(self.cells[r, c])

    def elevation_at(self, x: float, y: float) -> float:
        r, c = self.cell_index(x, y)
        return float(self.elevation[r, c])


@dataclass
class Pose:
    t: float
    x: float
    y: float
    yaw: float


@dataclass
class SensorTick:
    t: float
    channels: np.ndarray  # flat S-dim vector in layout order


@dataclass
class GroupStream:
    """Native-rate tick stream for one channel group."""

    group: str
    rate_hz: float
    timestamps: np.ndarray  # (n,)
    values: np.ndarray  # (n, n_channels)


@dataclass
class PatchFeatureImage:
    features: np.ndarray  # (H_p, W_p, C_b), unit-norm rows
    terrain_gt: np.ndarray  # (H_p, W_p) terrain ids, -1 outside the world
    origin_xy: tuple[float, float]  # world coordinates of the window corner
    patch_size_m: float
    t: float  # capture time


@dataclass
class PointCloud:
    points: np.ndarray  # (n, 3) sensor-frame coordinates
    terrain_ids: np.ndarray  # (n,)


# ---------------------------------------------------------------------------
# terrain specs


def default_terrains(
    n_terrains: int,
    layout: SensorLayout | None = None,
    seed: int = 0,
    noise_std: float = 0.05,
    torque_amp: float = 0.2,
) -> list[TerrainSpec]:
    """Deterministic terrain palette with effort spread over [0.05, 0.9].

    Non-torque channels get per-terrain sinusoid parameters; torque channels
    share a fixed amplitude so mean torque magnitude stays monotone in
    effort. The effort offset itself is added at sampling time.
    """
    if n_terrains < 2:
        raise InvalidConfigError("need at least 2 terrains")
    if n_terrains > len(TERRAIN_NAMES):
        raise InvalidConfigError(
            f"n_terrains={n_terrains} exceeds the configured terrain palette"
        )
    layout = layout or SensorLayout()
    s = layout.n_channels
    torque = layout.group_slice("torque")
    efforts = np.linspace(0.05, 0.9, n_terrains)
    specs = []
    for i in range(n_terrains):
        rng = np.random.default_rng([seed, 977, i])
        sig = np.zeros((s, 4))
        sig[:, SIG_AMP] = rng.uniform(0.3, 1.2, size=s)
        sig[:, SIG_FREQ] = rng.uniform(0.5, 3.0, size=s)
        sig[:, SIG_PHASE] = rng.uniform(0.0, 2.0 * math.pi, size=s)
        sig[:, SIG_NOISE] = noise_std
        sig[torque, SIG_AMP] = torque_amp
        specs.append(
            TerrainSpec(
                id=i,
                name=TERRAIN_NAMES[i],
                effort=float(efforts[i]),
                signature=sig,
                proto_seed=int(rng.integers(1, 2**31 - 1)),
            )
        )
    return specs


# ---------------------------------------------------------------------------
# world generation


def gen_world(
    seed: int,
    n_terrains: int,
    size,
    resolution: float = 0.25,
    terrains: list[TerrainSpec] | None = None,
    elevation_amp: float = 0.0,
    layout: SensorLayout | None = None,
) -> WorldMap:
    """Random Voronoi partition of a grid into contiguous terrain regions."""
    rows, cols = (size, size) if isinstance(size, int) else (int(size[0]), int(size[1]))
    if rows < 8 or cols < 8:
        raise InvalidConfigError("world must be at least 8x8 cells")
    if n_terrains < 2:
        raise InvalidConfigError("need at least 2 terrains")
    layout = layout or SensorLayout()
    if terrains is None:
        terrains = default_terrains(n_terrains, layout=layout, seed=seed)
    if n_terrains > len(terrains):
        raise InvalidConfigError("n_terrains exceeds the provided terrain list")
    terrains = terrains[:n_terrains]

    rng = np.random.default_rng([seed, 101])
    flat = rng.choice(rows * cols, size=n_terrains, replace=False)
    seeds_rc = np.stack([flat // cols, flat % cols], axis=1).astype(float)
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    centers = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(float)
    d2 = ((centers[:, None, :] - seeds_rc[None, :, :]) ** 2).sum(axis=2)
    cells = np.argmin(d2, axis=1).reshape(rows, cols).astype(np.int32)
    cells = np.array([t.id for t in terrains], dtype=np.int32)[cells]

    elevation = np.zeros((rows, cols))
    if elevation_amp > 0.0:
        erng = np.random.default_rng([seed, 202])
        yy = (rr + 0.5) / rows
        xx = (cc + 0.5) / cols
        for _ in range(3):
            a, b = erng.uniform(0.5, 2.5, size=2)
            phase = erng.uniform(0.0, 2.0 * math.pi)
            elevation += np.cos(2.0 * math.pi * (a * xx + b * yy) + phase)
        elevation *= elevation_amp / 3.0

    return WorldMap(cells=cells, elevation=elevation, resolution=resolution,
                    terrains=list(terrains), layout=layout)


def _region_centroid_cell(world: WorldMap, terrain_id: int) -> tuple[int, int]:
    rc = np.argwhere(world.cells == terrain_id)
    if rc.size == 0:
        raise InvalidInputError(f"terrain {terrain_id} absent from the world")
    centroid = rc.mean(axis=0)
    best = rc[np.argmin(((rc - centroid) ** 2).sum(axis=1))]
    return int(best[0]), int(best[1])


def _cell_center(world: WorldMap, r: int, c: int) -> tuple[float, float]:
    return (c + 0.5) * world.resolution, (r + 0.5) * world.resolution


def _poses_along(points: list[tuple[float, float]], duration: float, rate: float,
                 speed: float):
    """Walk the polyline at `speed`, holding position at its end if reached."""
    n = int(round(duration * rate))
    pts = np.asarray(points)
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    keep = seg_len > 1e-12
    seg, seg_len = seg[keep], seg_len[keep]
    starts = pts[:-1][keep]
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = cum[-1]
    times = np.arange(n) / rate
    dist = np.minimum(times * speed, total)
    idx = np.clip(np.searchsorted(cum, dist, side="right") - 1, 0, len(seg_len) - 1)
    frac = (dist - cum[idx]) / seg_len[idx]
    xy = starts[idx] + seg[idx] * frac[:, None]
    yaw = np.arctan2(seg[idx, 1], seg[idx, 0])
    return [Pose(float(t), float(p[0]), float(p[1]), float(a))
            for t, p, a in zip(times, xy, yaw)]


def gen_trajectory(world: WorldMap, seed: int, duration: float, rate: float,
                   speed: float = 1.0) -> list[Pose]:
    """Waypoint tour visiting every terrain region, walked at ~`speed` m/s."""
    if duration <= 0 or rate <= 0:
        raise InvalidInputError("duration and rate must be positive")
    if world.cells.size == 0:
        raise InvalidInputError("empty world")
    rng = np.random.default_rng([seed, 303])
    reps = [_cell_center(world, *_region_centroid_cell(world, t.id))
            for t in world.terrains if np.any(world.cells == t.id)]
    points: list[tuple[float, float]] = []
    total_needed = speed * duration
    length = 0.0
    while length < total_needed or len(points) < 2:
        order = rng.permutation(len(reps))
        for i in order:
            if points:
                length += math.hypot(reps[i][0] - points[-1][0], reps[i][1] - points[-1][1])
            points.append(reps[i])
        if len(reps) == 1:
            points.append((points[-1][0] + world.resolution * 0.25, points[-1][1]))
            length += world.resolution * 0.25
    return _poses_along(points, duration, rate, speed)


def gen_region_trajectory(world: WorldMap, terrain_id: int, seed: int,
                          duration: float, rate: float, speed: float = 1.0) -> list[Pose]:
    """Random walk that stays (mostly) on one terrain region."""
    if duration <= 0 or rate <= 0:
        raise InvalidInputError("duration and rate must be positive")
    cells = np.argwhere(world.cells == terrain_id)
    if cells.size == 0:
        raise InvalidInputError(f"terrain {terrain_id} absent from the world")
    rng = np.random.default_rng([seed, 404, terrain_id])
    cur = _region_centroid_cell(world, terrain_id)
    points = [_cell_center(world, *cur)]
    length, total_needed = 0.0, speed * duration
    while length < total_needed or len(points) < 2:
        placed = False
        for _ in range(20):
            cand = cells[rng.integers(len(cells))]
            p0, p1 = points[-1], _cell_center(world, int(cand[0]), int(cand[1]))
            d = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
            if d < world.resolution * 0.5:
                continue
            steps = max(2, int(d / (world.resolution * 0.5)))
            on_terrain = all(
                world.terrain_at(p0[0] + (p1[0] - p0[0]) * k / steps,
                                 p0[1] + (p1[1] - p0[1]) * k / steps) == terrain_id
                for k in range(steps + 1)
            )
            if on_terrain:
                points.append(p1)
                length += d
                placed = True
                break
        if not placed:  # highly concave region: accept a crossing segment
            cand = cells[rng.integers(len(cells))]
            p1 = _cell_center(world, int(cand[0]), int(cand[1]))
            d = math.hypot(p1[0] - points[-1][0], p1[1] - points[-1][1])
            if d > 1e-9:
                points.append(p1)
                length += d
    return _poses_along(points, duration, rate, speed)


# ---------------------------------------------------------------------------
# sensors


def _signature_values(sig: np.ndarray, t) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return sig[:, SIG_AMP] * np.sin(
        2.0 * math.pi * sig[:, SIG_FREQ] * t[..., None] + sig[:, SIG_PHASE]
    )


def sample_sensor_tick(world: WorldMap, pose: Pose, seed: int) -> SensorTick:
    """All S channels at one pose: sinusoid + seeded noise, effort on torque."""
    spec = world.terrain(world.terrain_at(pose.x, pose.y))
    rng = np.random.default_rng(seed)
    values = _signature_values(spec.signature, pose.t)
    values = values + rng.standard_normal(values.shape) * spec.signature[:, SIG_NOISE]
    values[world.layout.group_slice("torque")] += spec.effort
    return SensorTick(t=pose.t, channels=values)


def _pose_xy_at(poses: list[Pose], ts: np.ndarray) -> np.ndarray:
    pt = np.array([p.t for p in poses])
    px = np.array([p.x for p in poses])
    py = np.array([p.y for p in poses])
    return np.stack([np.interp(ts, pt, px), np.interp(ts, pt, py)], axis=1)


def sample_group_streams(world: WorldMap, poses: list[Pose], seed: int) -> list[GroupStream]:
    """Native-rate streams for every channel group along a trajectory."""
    if not poses:
        raise InvalidInputError("empty trajectory")
    t0, t1 = poses[0].t, poses[-1].t
    streams = []
    for gi, group in enumerate(world.layout.groups):
        n = max(1, int(math.floor((t1 - t0) * group.rate_hz)) + 1)
        ts = t0 + np.arange(n) / group.rate_hz
        xy = _pose_xy_at(poses, ts)
        sl = world.layout.group_slice(group.name)
        rng = np.random.default_rng([seed, 505, gi])
        vals = np.empty((n, group.n_channels))
        terrain_ids = np.array([world.terrain_at(x, y) for x, y in xy])
        noise = rng.standard_normal((n, group.n_channels))
        for tid in np.unique(terrain_ids):
            spec = world.terrain(int(tid))
            rows = terrain_ids == tid
            base = _signature_values(spec.signature[sl], ts[rows])
            vals[rows] = base + noise[rows] * spec.signature[sl, SIG_NOISE]
            if group.name == "torque":
                vals[rows] += spec.effort
        streams.append(GroupStream(group.name, group.rate_hz, ts, vals))
    return streams


# ---------------------------------------------------------------------------
# visual backbone stand-in


@functools.lru_cache(maxsize=4096)
def _prototype(proto_seed: int, dim: int) -> np.ndarray:
    v = np.random.default_rng(proto_seed).standard_normal(dim)
    return v / np.linalg.norm(v)


VOID_PROTO_SEED = 18181


def render_patch_features(
    world: WorldMap,
    pose: Pose,
    seed: int,
    grid_hw: tuple[int, int] = (16, 16),
    feature_dim: int = 64,
    noise_std: float = 0.05,
    ahead_m: float = 1.0,
) -> PatchFeatureImage:
    """Top-down patch window ahead of the pose; one noisy prototype per patch.

    The window is axis aligned: its center sits `ahead_m` along the pose yaw,
    patches are world-resolution sized, and world position maps to patch
    index by a fixed affine rule. `noise_std` scales the norm of the
    perturbation (per-dim std is noise_std/sqrt(feature_dim)), so cosine
    geometry is independent of the feature dimension.
    """
    if not world.contains(pose.x, pose.y):
        raise OutOfBoundsError("pose outside the world")
    h_p, w_p = grid_hw
    pm = world.resolution
    cx = pose.x + ahead_m * math.cos(pose.yaw)
    cy = pose.y + ahead_m * math.sin(pose.yaw)
    x0 = cx - 0.5 * w_p * pm
    y0 = cy - 0.5 * h_p * pm
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((h_p, w_p, feature_dim)) * (
        noise_std / math.sqrt(feature_dim))

    gt = np.full((h_p, w_p), -1, dtype=np.int32)
    feats = np.empty((h_p, w_p, feature_dim))
    for r in range(h_p):
        for c in range(w_p):
            px = x0 + (c + 0.5) * pm
            py = y0 + (r + 0.5) * pm
            if world.contains(px, py):
                tid = world.terrain_at(px, py)
                gt[r, c] = tid
                proto = _prototype(world.terrain(tid).proto_seed, feature_dim)
            else:
                proto = _prototype(VOID_PROTO_SEED, feature_dim)
            feats[r, c] = proto
    feats = feats + noise
    feats /= np.linalg.norm(feats, axis=2, keepdims=True)
    return PatchFeatureImage(features=feats, terrain_gt=gt, origin_xy=(x0, y0),
                             patch_size_m=pm, t=pose.t)


# ---------------------------------------------------------------------------
# lidar


def sample_lidar(world: WorldMap, pose: Pose, n_points: int, seed: int,
                 max_range: float = 5.0, min_range: float = 0.3) -> PointCloud:
    """Surface points in an annulus around the pose, in the sensor frame.

    The sensor frame shares the world z axis; x/y are the pose-relative
    rigid transform. z equals the terrain elevation under each point.
    """
    if n_points <= 0:
        raise InvalidInputError("n_points must be positive")
    if not world.contains(pose.x, pose.y):
        raise OutOfBoundsError("pose outside the world")
    rng = np.random.default_rng(seed)
    pts_w = np.empty((0, 2))
    while pts_w.shape[0] < n_points:
        m = max(64, 2 * (n_points - pts_w.shape[0]))
        u = rng.uniform(min_range**2 / max_range**2, 1.0, size=m)
        r = np.sqrt(u) * max_range
        theta = rng.uniform(0.0, 2.0 * math.pi, size=m)
        cand = np.stack([pose.x + r * np.cos(theta), pose.y + r * np.sin(theta)], axis=1)
        w, h = world.extent
        ok = (cand[:, 0] >= 0) & (cand[:, 0] < w) & (cand[:, 1] >= 0) & (cand[:, 1] < h)
        pts_w = np.concatenate([pts_w, cand[ok]], axis=0)
    pts_w = pts_w[:n_points]
    rows = (pts_w[:, 1] / world.resolution).astype(int)
    cols = (pts_w[:, 0] / world.resolution).astype(int)
    z = world.elevation[rows, cols]
    tids = world.cells[rows, cols].astype(np.int64)
    dx = pts_w[:, 0] - pose.x
    dy = pts_w[:, 1] - pose.y
    cos_y, sin_y = math.cos(pose.yaw), math.sin(pose.yaw)
    xs = cos_y * dx + sin_y * dy
    ys = -sin_y * dx + cos_y * dy
    return PointCloud(points=np.stack([xs, ys, z], axis=1), terrain_ids=tids)


def sensor_to_world(points: np.ndarray, pose: Pose) -> np.ndarray:
    """Inverse of the sample_lidar frame convention."""
    pts = np.asarray(points, dtype=float)
    cos_y, sin_y = math.cos(pose.yaw), math.sin(pose.yaw)
    xw = cos_y * pts[:, 0] - sin_y * pts[:, 1] + pose.x
    yw = sin_y * pts[:, 0] + cos_y * pts[:, 1] + pose.y
    return np.stack([xw, yw, pts[:, 2]], axis=1)


# ---------------------------------------------------------------------------
# serialization


def save_world(world: WorldMap, directory) -> None:
    d = io.ensure_dir(directory)
    io.write_grid_csv(d / "world_cells.csv", world.cells)
    io.write_grid_csv(d / "world_elevation.csv", world.elevation)
    io.write_json(
        d / "world.json",
        {
            "resolution": world.resolution,
            "groups": [
                {"name": g.name, "n_channels": g.n_channels, "rate_hz": g.rate_hz}
                for g in world.layout.groups
            ],
            "terrains": [
                {
                    "id": t.id,
                    "name": t.name,
                    "effort": t.effort,
                    "proto_seed": t.proto_seed,
                    "signature": t.signature.tolist(),
                }
                for t in world.terrains
            ],
        },
    )


def load_world(directory) -> WorldMap:
    from pathlib import Path

    d = Path(directory)
    head = io.read_json(d / "world.json")
    layout = SensorLayout(
        groups=tuple(
            ChannelGroup(g["name"], int(g["n_channels"]), float(g["rate_hz"]))
            for g in head["groups"]
        )
    )
    terrains = [
        TerrainSpec(
            id=int(t["id"]),
            name=t["name"],
            effort=float(t["effort"]),
            signature=np.asarray(t["signature"]),
            proto_seed=int(t["proto_seed"]),
        )
        for t in head["terrains"]
    ]
    return WorldMap(
        cells=io.read_grid_csv(d / "world_cells.csv", dtype=np.int32),
        elevation=io.read_grid_csv(d / "world_elevation.csv"),
        resolution=float(head["resolution"]),
        terrains=terrains,
        layout=layout,
    )


def save_poses(path, poses: list[Pose]) -> None:
    io.write_jsonl(path, [{"t": p.t, "x": p.x, "y": p.y, "yaw": p.yaw} for p in poses])


def load_poses(path) -> list[Pose]:
    return [Pose(r["t"], r["x"], r["y"], r["yaw"]) for r in io.read_jsonl(path)]


def save_ticks(path, ticks: list[SensorTick]) -> None:
    io.write_jsonl(path, [{"t": tk.t, "channels": tk.channels.tolist()} for tk in ticks])


def load_ticks(path) -> list[SensorTick]:
    return [SensorTick(r["t"], np.asarray(r["channels"])) for r in io.read_jsonl(path)]
