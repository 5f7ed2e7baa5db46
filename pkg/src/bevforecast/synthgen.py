"""Synthetic urban scenarios rendered into five-channel BEV frames.

World frame: ``(x, y)`` meters, heading counter-clockwise from +x. The road
is a chain of straight and circular-arc pieces; vehicles follow lane
centers in Frenet coordinates at constant speed. Left-hand traffic is the
exact ``y -> -y`` reflection of the right-hand scenario for the same seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .gridcore import (
    CHANNELS,
    FrameStack,
    GridSpec,
    channel_index,
    rasterize_oriented_rects,
    rasterize_polygons,
    rasterize_polyline_band,
)

FAMILIES = ("straight", "curve", "left-turn", "right-turn", "lane-change")
VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 1.8


class InfeasibleConfig(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    family: str = "straight"
    lane_side: str = "right"
    duration_range_s: tuple[float, float] = (3.0, 6.0)
    frame_rate_hz: float = 10.0
    speed_range_mps: tuple[float, float] = (8.0, 12.0)
    ego_speed_range_mps: tuple[float, float] = (6.0, 9.0)
    gap_range_m: tuple[float, float] = (10.0, 20.0)
    lane_width_m: float = 3.5
    lanes_per_direction: int = 2
    turn_radius_range_m: tuple[float, float] = (12.0, 25.0)
    curve_radius_range_m: tuple[float, float] = (60.0, 120.0)
    n_others: int = 0
    buildings: bool = True
    grid: GridSpec = field(default_factory=GridSpec)
    channel_dropout: float = 0.0  # per-cell dropout emulating segmentation misses

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InfeasibleConfig(f"unknown road family {self.family!r}; expected one of {FAMILIES}")
        if self.lane_side not in ("right", "left"):
            raise InfeasibleConfig(f"lane_side must be 'right' or 'left', got {self.lane_side!r}")
        lo, hi = self.duration_range_s
        if not 0 < lo <= hi:
            raise InfeasibleConfig(f"bad duration range {self.duration_range_s}")
        for name in ("speed_range_mps", "ego_speed_range_mps", "gap_range_m"):
            a, b = getattr(self, name)
            if not 0 <= a <= b:
                raise InfeasibleConfig(f"bad {name} {getattr(self, name)}")
        if self.frame_rate_hz <= 0:
            raise InfeasibleConfig("frame_rate_hz must be positive")
        if not 0.0 <= self.channel_dropout < 1.0:
            raise InfeasibleConfig("channel_dropout must lie in [0, 1)")
        # target must stay on the grid: initial gap plus worst-case relative drift
        ahead = max(self.speed_range_mps[1] - self.ego_speed_range_mps[0], 0.0)
        behind = max(self.ego_speed_range_mps[1] - self.speed_range_mps[0], 0.0)
        reach = self.gap_range_m[1] + ahead * hi + VEHICLE_LENGTH
        if reach > self.grid.extent_m or self.gap_range_m[0] - behind * hi < VEHICLE_LENGTH / 2:
            raise InfeasibleConfig(
                f"speed x duration leaves the map: the target can drift to {reach:.1f} m "
                f"or behind the sensor within {hi:.1f} s on a {self.grid.extent_m:.1f} m grid"
            )


# -- road geometry ----------------------------------------------------------


@dataclass(frozen=True)
class RoadPiece:
    s0: float
    length: float
    curvature: float
    x0: float
    y0: float
    h0: float

    def pose(self, ds):
        k = self.curvature
        h = self.h0 + k * ds
        if k == 0.0:
            return self.x0 + ds * math.cos(self.h0), self.y0 + ds * math.sin(self.h0), h
        return (
            self.x0 + (math.sin(h) - math.sin(self.h0)) / k,
            self.y0 - (math.cos(h) - math.cos(self.h0)) / k,
            h,
        )


class Road:
    """Arc-length parameterized centerline built from (length, curvature) pieces."""

    def __init__(self, s_start, pieces_spec):
        self.pieces = []
        # the first piece is straight along +x, so s = 0 lands on the world origin
        x, y, h, s = s_start, 0.0, 0.0, s_start
        for length, k in pieces_spec:
            p = RoadPiece(s, length, k, x, y, h)
            self.pieces.append(p)
            x, y, h = p.pose(length)
            s += length
        self.s_end = s

    def pose(self, s):
        for p in self.pieces:
            if s <= p.s0 + p.length:
                return p.pose(s - p.s0)
        last = self.pieces[-1]
        x, y, h = last.pose(last.length)
        extra = s - self.s_end
        return x + extra * math.cos(h), y + extra * math.sin(h), h

    def curvature(self, s):
        for p in self.pieces:
            if s <= p.s0 + p.length:
                return p.curvature
        return 0.0

    def offset_point(self, s, d):
        x, y, h = self.pose(s)
        return x - d * math.sin(h), y + d * math.cos(h), h

    def polyline(self, d=0.0, step_rad=math.radians(3.0)):
        pts = []
        for p in self.pieces:
            if p.curvature == 0.0:
                n = 1
            else:
                n = max(1, int(math.ceil(abs(p.curvature) * p.length / step_rad)))
            for i in range(n + (1 if p is self.pieces[-1] else 0)):
                x, y, h = p.pose(p.length * i / n)
                pts.append((x - d * math.sin(h), y + d * math.cos(h)))
        return np.asarray(pts)


# -- scenario ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Scenario:
    seed: int
    config: ScenarioConfig
    road_centerline: np.ndarray  # (n, 2)
    road_width_m: float
    lanes: tuple  # lane-divider polylines, each (m, 2)
    obstacles: tuple  # world polygons, each (4, 2)
    times: np.ndarray  # (T,)
    ego_track: np.ndarray  # (T, 3) x, y, heading
    target_track: np.ndarray  # (T, 3)
    other_tracks: tuple  # each (T, 3)

    @property
    def frame_rate_hz(self) -> float:
        return self.config.frame_rate_hz

    @property
    def n_frames(self) -> int:
        return len(self.times)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return scenario_bytes(self) == scenario_bytes(other)


def scenario_bytes(s: Scenario) -> bytes:
    parts = [repr((s.seed, s.config, s.road_width_m)).encode()]
    for a in (s.road_centerline, s.times, s.ego_track, s.target_track, *s.lanes, *s.obstacles, *s.other_tracks):
        parts.append(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return b"|".join(parts)


def _road_pieces(cfg: ScenarioConfig, rng, turn_at_s):
    fam = cfg.family
    if fam in ("straight", "lane-change"):
        return [(1000.0, 0.0)]
    if fam == "curve":
        r = rng.uniform(*cfg.curve_radius_range_m)
        sign = 1.0 if rng.random() < 0.5 else -1.0
        return [(turn_at_s, 0.0), (math.pi / 2 * r, sign / r), (600.0, 0.0)]
    r = rng.uniform(*cfg.turn_radius_range_m)
    sign = 1.0 if fam == "left-turn" else -1.0
    return [(turn_at_s, 0.0), (math.pi / 2 * r, sign / r), (600.0, 0.0)]


def _follow(road: Road, s0, lateral, speed, times):
    """Integrate a constant-speed vehicle along ``lateral(t)`` lane offsets.

    Returns ``(T, 3)`` poses; heading is the velocity direction.
    """
    out = np.zeros((len(times), 3))
    s = s0
    sub = 40
    prev_t = times[0]
    for i, t in enumerate(times):
        if i:
            dt = (t - prev_t) / sub
            for j in range(sub):
                tm = prev_t + (j + 0.5) * dt
                d, dd = lateral(tm)
                k = road.curvature(s)
                along = math.sqrt(max(speed * speed - dd * dd, 1e-9))
                s += dt * along / (1.0 - k * d)
            prev_t = t
        d, dd = lateral(t)
        x, y, h = road.offset_point(s, d)
        along = math.sqrt(max(speed * speed - dd * dd, 1e-9))
        out[i] = (x, y, h + math.atan2(dd, along))
    return out


def _lane_change(d_from, d_to, t_start, t_len):
    def lateral(t):
        if t <= t_start:
            return d_from, 0.0
        if t >= t_start + t_len:
            return d_to, 0.0
        u = (t - t_start) / t_len
        d = d_from + (d_to - d_from) * (1 - math.cos(math.pi * u)) / 2
        dd = (d_to - d_from) * math.pi * math.sin(math.pi * u) / (2 * t_len)
        return d, dd

    return lateral


def _const(d):
    return lambda t: (d, 0.0)


def _buildings(road: Road, cfg: ScenarioConfig, rng, s_lo, s_hi, centerline):
    half = cfg.lanes_per_direction * cfg.lane_width_m
    polys = []
    for side in (-1.0, 1.0):
        s = s_lo + rng.uniform(0, 5)
        while s < s_hi:
            length = rng.uniform(6.0, 18.0)
            depth = rng.uniform(4.0, 9.0)
            setback = half + rng.uniform(2.0, 4.0)
            mid = s + length / 2
            x, y, h = road.pose(mid)
            k = road.curvature(mid)
            ok = abs(k) * (setback + depth) < 0.6
            if ok:
                c, sn = math.cos(h), math.sin(h)
                corners = []
                for a, b in ((-length / 2, setback), (length / 2, setback), (length / 2, setback + depth), (-length / 2, setback + depth)):
                    lat = side * b
                    corners.append((x + a * c - lat * sn, y + a * sn + lat * c))
                poly = np.asarray(corners)
                if _clear_of_road(poly, centerline, half + 1.0):
                    polys.append(poly)
            s += length + rng.uniform(1.0, 6.0)
    return tuple(polys)


def _clear_of_road(poly, centerline, clearance):
    pts = np.concatenate([poly, (poly + np.roll(poly, -1, axis=0)) / 2, poly.mean(axis=0, keepdims=True)])
    a, b = centerline[:-1], centerline[1:]
    d = b - a
    L2 = np.maximum((d * d).sum(axis=1), 1e-12)
    for p in pts:
        t = np.clip(((p - a) * d).sum(axis=1) / L2, 0, 1)
        dist = np.hypot(*(a + t[:, None] * d - p).T)
        if dist.min() < clearance:
            return False
    return True


def generate_scenario(config: ScenarioConfig, seed: int) -> Scenario:
    """Deterministic scenario for ``(config, seed)``."""
    if config.lane_side == "left":
        return mirror_scenario(generate_scenario(replace(config, lane_side="right"), seed))
    rng = np.random.default_rng(seed)
    fps = config.frame_rate_hz
    lo, hi = config.duration_range_s
    duration = lo if lo == hi else round(rng.uniform(lo, hi), 1)
    n_frames = max(int(round(duration * fps)), 1)
    times = np.arange(n_frames) / fps
    v_target = rng.uniform(*config.speed_range_mps)
    v_ego = rng.uniform(*config.ego_speed_range_mps)
    gap = rng.uniform(*config.gap_range_m)
    lanes = config.lanes_per_direction
    lw = config.lane_width_m
    lane_centers = [-(i + 0.5) * lw for i in range(lanes)]
    ego_lane = lane_centers[0]
    tgt_lane = lane_centers[int(rng.integers(lanes))]

    # place the turn so the target enters it early and has room to finish
    travel = v_target * duration
    turn_at = gap + 0.15 * travel
    pieces = _road_pieces(config, rng, turn_at)
    if config.family in ("left-turn", "right-turn"):
        # shrink the radius so the outer lane completes the quarter turn in time
        r = 1.0 / abs(pieces[1][1])
        r_max = max((0.7 * travel) / (math.pi / 2) - lanes * lw, lanes * lw + 3.0)
        r = min(r, r_max)
        sign = math.copysign(1.0, pieces[1][1])
        pieces[1] = (math.pi / 2 * r, sign / r)
    s_back = 60.0
    road = Road(-s_back, [(s_back + pieces[0][0], pieces[0][1])] + pieces[1:])

    if config.family == "lane-change":
        others_lanes = [c for c in lane_centers if c != tgt_lane] or [tgt_lane + lw]
        d_to = others_lanes[int(rng.integers(len(others_lanes)))]
        t_len = min(2.5, 0.6 * duration)
        t0 = rng.uniform(0.1, max(duration - t_len - 0.1, 0.1)) * 0.5
        target_lat = _lane_change(tgt_lane, d_to, t0, t_len)
    else:
        target_lat = _const(tgt_lane)

    ego = _follow(road, 0.0, _const(ego_lane), v_ego, times)
    target = _follow(road, gap, target_lat, v_target, times)

    others = []
    for _ in range(config.n_others):
        if rng.random() < 0.5:
            free = [c for c in lane_centers if c != tgt_lane] or lane_centers
            d = free[int(rng.integers(len(free)))]
            s0 = gap + rng.uniform(10.0, 30.0) * (1 if rng.random() < 0.5 else -1)
            trk = _follow(road, s0, _const(d), rng.uniform(*config.speed_range_mps), times)
        else:
            # oncoming traffic on the opposite lanes
            d = (int(rng.integers(lanes)) + 0.5) * lw
            s0 = rng.uniform(30.0, 80.0)
            v = rng.uniform(*config.speed_range_mps)
            trk = np.array([road.offset_point(s0 - v * t, d) for t in times])
            trk[:, 2] += math.pi
        others.append(trk)

    centerline = road.polyline()
    half = lanes * lw
    dividers = [road.polyline(d=k * lw) for k in range(-(lanes - 1), lanes)]
    s_hi = gap + travel + config.grid.extent_m + 20.0
    obstacles = _buildings(road, config, rng, -s_back + 5.0, s_hi, centerline) if config.buildings else ()
    return Scenario(
        seed=int(seed),
        config=config,
        road_centerline=centerline,
        road_width_m=2 * half,
        lanes=tuple(dividers),
        obstacles=obstacles,
        times=times,
        ego_track=ego,
        target_track=target,
        other_tracks=tuple(others),
    )


def mirror_scenario(s: Scenario) -> Scenario:
    """Reflect a scenario across the world x-axis, flipping traffic side."""

    def pts(a):
        a = np.array(a, dtype=np.float64)
        a[:, 1] = -a[:, 1]
        return a

    def track(a):
        a = np.array(a, dtype=np.float64)
        a[:, 1] = -a[:, 1]
        a[:, 2] = -a[:, 2]
        return a

    side = "left" if s.config.lane_side == "right" else "right"
    return Scenario(
        seed=s.seed,
        config=replace(s.config, lane_side=side),
        road_centerline=pts(s.road_centerline),
        road_width_m=s.road_width_m,
        lanes=tuple(pts(p) for p in s.lanes),
        obstacles=tuple(pts(p) for p in s.obstacles),
        times=s.times.copy(),
        ego_track=track(s.ego_track),
        target_track=track(s.target_track),
        other_tracks=tuple(track(t) for t in s.other_tracks),
    )


# -- frames -----------------------------------------------------------------


def world_to_ego(points, pose):
    """World ``(x, y)`` rows -> sensor-frame ``(X, Z)`` rows (X left, Z forward)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ex, ey, eh = pose
    dx, dy = p[:, 0] - ex, p[:, 1] - ey
    c, s = math.cos(eh), math.sin(eh)
    z = dx * c + dy * s
    x = -dx * s + dy * c
    return np.stack([x, z], axis=1)


def ego_to_world(points, pose):
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    ex, ey, eh = pose
    c, s = math.cos(eh), math.sin(eh)
    x, z = p[:, 0], p[:, 1]
    return np.stack([ex + z * c - x * s, ey + z * s + x * c], axis=1)


def _frame_index(s: Scenario, t: float) -> int:
    i = int(round(t * s.frame_rate_hz))
    if i < 0 or i >= s.n_frames or abs(s.times[i] - t) > 1e-6:
        raise ValueError(f"t={t} is not on the scenario's timestamp grid (0..{s.times[-1]:.2f} s at {s.frame_rate_hz} Hz)")
    return i


def _vehicle_rects(tracks, i, pose):
    rects = []
    for trk in tracks:
        xz = world_to_ego(trk[i, :2], pose)[0]
        # heading from +Z toward +X in the sensor frame
        rel = trk[i, 2] - pose[2]
        rects.append((xz[0], xz[1], rel, VEHICLE_LENGTH, VEHICLE_WIDTH))
    return rects


@dataclass(frozen=True, eq=False)
class StaticChannels:
    road: np.ndarray
    lane: np.ndarray
    obstacles: np.ndarray


def _static(s: Scenario, pose, spec: GridSpec) -> StaticChannels:
    res = spec.resolution_m
    road = rasterize_polyline_band(world_to_ego(s.road_centerline, pose), s.road_width_m / 2, spec)
    lane = np.zeros_like(road)
    for div in s.lanes:
        np.maximum(lane, rasterize_polyline_band(world_to_ego(div, pose), max(0.5 * res, 0.1), spec), out=lane)
    obstacles = rasterize_polygons([world_to_ego(p, pose) for p in s.obstacles], spec)
    return StaticChannels(road, lane, obstacles)


def render_frame(s: Scenario, t: float, spec: GridSpec | None = None) -> FrameStack:
    """All five channels in the ego frame at timestamp ``t``."""
    spec = spec or s.config.grid
    i = _frame_index(s, t)
    pose = tuple(float(v) for v in s.ego_track[i])
    st = _static(s, pose, spec)
    n = spec.size_cells
    chans = np.zeros((len(CHANNELS), n, n), dtype=np.float32)
    chans[channel_index("obstacles")] = st.obstacles
    chans[channel_index("road")] = st.road
    chans[channel_index("lane")] = st.lane
    chans[channel_index("target")] = rasterize_oriented_rects(_vehicle_rects([s.target_track], i, pose), spec)
    if s.other_tracks:
        chans[channel_index("others")] = rasterize_oriented_rects(_vehicle_rects(s.other_tracks, i, pose), spec)
    if s.config.channel_dropout > 0:
        rng = np.random.default_rng([s.seed, i])
        keep = rng.random(chans.shape) >= s.config.channel_dropout
        chans *= keep
    return FrameStack(float(s.times[i]), spec, chans, pose)


def future_static_channels(s: Scenario, t: float, spec: GridSpec | None = None) -> StaticChannels:
    """Road, lane and obstacle rasters for the ego pose at ``t`` (no vehicles)."""
    spec = spec or s.config.grid
    if t > s.times[-1] + 1e-9:
        raise ValueError(f"t={t} lies beyond the scenario horizon {s.times[-1]:.2f} s")
    i = _frame_index(s, t)
    return _static(s, tuple(float(v) for v in s.ego_track[i]), spec)


def subsample_indices(n: int, keep_ratio: float) -> np.ndarray:
    """Uniform-stride indices: ``floor(i / keep_ratio)`` for ``i < ceil(n * keep_ratio)``."""
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep_ratio must lie in (0, 1], got {keep_ratio}")
    r = Fraction(keep_ratio).limit_denominator(1000)
    count = -(-n * r.numerator // r.denominator)
    if count == 0:
        raise ValueError(f"keep_ratio {keep_ratio} leaves no frames out of {n}")
    return np.array([(i * r.denominator) // r.numerator for i in range(count)], dtype=np.int64)


def subsample_frames(frames, keep_ratio: float):
    """Keep a deterministic uniform-stride subset; timestamps are untouched."""
    idx = subsample_indices(len(frames), keep_ratio)
    return [frames[i] for i in idx]


# -- trajectories (what the forecaster and evaluators consume) ---------------


@dataclass(eq=False)
class Trajectory:
    """Rendered frames plus world-frame tracks for one vehicle of interest."""

    id: str
    frames: list
    times: np.ndarray
    ego: np.ndarray
    target: np.ndarray
    others: tuple = ()
    meta: dict = field(default_factory=dict)

    @property
    def spec(self) -> GridSpec:
        return self.frames[0].spec

    def __len__(self):
        return len(self.frames)

    def subsample(self, keep_ratio: float) -> "Trajectory":
        idx = subsample_indices(len(self.frames), keep_ratio)
        return Trajectory(
            self.id,
            [self.frames[i] for i in idx],
            self.times[idx],
            self.ego[idx],
            self.target[idx],
            tuple(o[idx] for o in self.others),
            dict(self.meta, keep_ratio=keep_ratio),
        )

    def target_in_ego(self, i: int) -> np.ndarray:
        return world_to_ego(self.target[i, :2], self.ego[i])[0]


def scenario_trajectory(s: Scenario, spec: GridSpec | None = None, name: str | None = None) -> Trajectory:
    frames = [render_frame(s, t, spec) for t in s.times]
    return Trajectory(
        name or f"s{s.seed:06d}-{s.config.family}-{s.config.lane_side}",
        frames,
        s.times.copy(),
        s.ego_track.copy(),
        s.target_track.copy(),
        tuple(o.copy() for o in s.other_tracks),
        {"seed": s.seed, "family": s.config.family, "lane_side": s.config.lane_side},
    )
