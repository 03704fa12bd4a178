"""Track geometry: centerline with per-point half-widths, derived walls,
arc-length bookkeeping, a curvature-limited racing line, start positions,
JSON persistence, and a procedural generator.

A track is a closed loop; the centerline is stored without a duplicated
closing point and all indexing is cyclic.  The start/finish line sits at
centerline point 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline
from shapely.geometry import LinearRing

from .config import G, TrackGenConfig

MIN_HALF_WIDTH_FACTOR = 1.1  # times vehicle width, so two cars fit side by side
VEHICLE_WIDTH = 0.31


class TrackError(ValueError):
    """Malformed track file or violated track invariant."""


@dataclass
class Track:
    name: str
    centerline: np.ndarray          # (n, 2)
    half_width: np.ndarray          # (n,)
    left_wall: np.ndarray = field(init=False)
    right_wall: np.ndarray = field(init=False)
    arc_length: np.ndarray = field(init=False)   # (n,), arc_length[0] == 0
    total_length: float = field(init=False)

    def __post_init__(self):
        self.centerline = np.asarray(self.centerline, dtype=np.float64)
        self.half_width = np.asarray(self.half_width, dtype=np.float64)
        seg = np.roll(self.centerline, -1, axis=0) - self.centerline
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.arc_length = np.concatenate([[0.0], np.cumsum(seg_len[:-1])])
        self.total_length = float(seg_len.sum())
        normals = loop_normals(self.centerline)
        self.left_wall = self.centerline + normals * self.half_width[:, None]
        self.right_wall = self.centerline - normals * self.half_width[:, None]

    def wall_segments(self) -> np.ndarray:
        """All wall segments as one (m, 4) array of (x1, y1, x2, y2)."""
        segs = []
        for wall in (self.left_wall, self.right_wall):
            nxt = np.roll(wall, -1, axis=0)
            segs.append(np.hstack([wall, nxt]))
        return np.vstack(segs)

    def position_at(self, s: float) -> np.ndarray:
        return _interp_loop(self.arc_length, self.centerline, s, self.total_length)

    def heading_at(self, s: float) -> float:
        ahead = self.position_at(s + 0.05)
        here = self.position_at(s)
        return float(np.arctan2(ahead[1] - here[1], ahead[0] - here[0]))


@dataclass
class RacingLine:
    points: np.ndarray            # (n, 2)
    velocity: np.ndarray          # (n,) m/s
    arc_length: np.ndarray        # (n,)
    total_length: float

    def velocity_at(self, s: float) -> float:
        s = s % self.total_length
        i = int(np.searchsorted(self.arc_length, s, side="right") - 1)
        j = (i + 1) % len(self.points)
        seg = (self.arc_length[j] - self.arc_length[i]) % self.total_length
        t = 0.0 if seg == 0 else ((s - self.arc_length[i]) / seg)
        return float((1 - t) * self.velocity[i] + t * self.velocity[j])

    def position_at(self, s: float) -> np.ndarray:
        return _interp_loop(self.arc_length, self.points, s, self.total_length)


def loop_normals(points: np.ndarray) -> np.ndarray:
    """Unit left normals of a closed polyline, from central-difference tangents."""
    tang = np.roll(points, -1, axis=0) - np.roll(points, 1, axis=0)
    tang /= np.hypot(tang[:, 0], tang[:, 1])[:, None]
    return np.stack([-tang[:, 1], tang[:, 0]], axis=1)


def loop_curvature(points: np.ndarray) -> np.ndarray:
    """Signed curvature per point via the circumscribed-circle formula."""
    prev = np.roll(points, 1, axis=0)
    nxt = np.roll(points, -1, axis=0)
    a = points - prev
    b = nxt - points
    c = nxt - prev
    cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    denom = (np.hypot(a[:, 0], a[:, 1]) * np.hypot(b[:, 0], b[:, 1])
             * np.hypot(c[:, 0], c[:, 1]))
    return 2.0 * cross / np.maximum(denom, 1e-12)


def _interp_loop(arc: np.ndarray, pts: np.ndarray, s: float, total: float) -> np.ndarray:
    s = s % total
    i = int(np.searchsorted(arc, s, side="right") - 1)
    j = (i + 1) % len(pts)
    seg_len = (arc[j] - arc[i]) % total
    if seg_len == 0:
        seg_len = total - arc[i]
    t = (s - arc[i]) / seg_len
    return (1 - t) * pts[i] + t * pts[j]


def validate_track(centerline: np.ndarray, half_width: np.ndarray) -> None:
    """Raise TrackError naming the first violated invariant."""
    if len(centerline) < 8:
        raise TrackError("centerline needs at least 8 points")
    if len(half_width) != len(centerline):
        raise TrackError("half_width length does not match centerline")
    if not np.all(np.isfinite(centerline)) or not np.all(np.isfinite(half_width)):
        raise TrackError("non-finite coordinates")
    min_hw = MIN_HALF_WIDTH_FACTOR * VEHICLE_WIDTH
    if np.any(half_width < min_hw):
        raise TrackError(
            f"half_width below {min_hw:.3f} m (two cars must fit side by side)")
    normals = loop_normals(centerline)
    for side, sign in (("left", 1.0), ("right", -1.0)):
        wall = centerline + sign * normals * half_width[:, None]
        if not LinearRing(wall).is_simple:
            raise TrackError(f"{side} wall polyline self-intersects")


def make_track(name: str, centerline, half_width) -> Track:
    centerline = np.asarray(centerline, dtype=np.float64)
    half_width = np.asarray(half_width, dtype=np.float64)
    # drop a duplicated closing point if present
    if len(centerline) > 1 and np.allclose(centerline[0], centerline[-1]):
        centerline = centerline[:-1]
        half_width = half_width[:-1]
    validate_track(centerline, half_width)
    return Track(name=name, centerline=centerline, half_width=half_width)


def load_track(path: str | Path) -> Track:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TrackError(f"cannot read track file {path}: {exc}") from exc
    for key in ("centerline", "half_width"):
        if key not in data:
            raise TrackError(f"track file missing '{key}'")
    return make_track(data.get("name", path.stem), data["centerline"],
                      data["half_width"])


def save_track(track: Track, path: str | Path) -> None:
    payload = {
        "name": track.name,
        "length": track.total_length,
        "centerline": track.centerline.tolist(),
        "half_width": track.half_width.tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def racing_line(track: Track, mu_f: float = 0.8, v_max: float = 8.0,
                accel_max: float = 9.51) -> RacingLine:
    """Centerline with a friction/curvature velocity profile.

    Point limits v = sqrt(mu*g/|kappa|) are smoothed by forward (acceleration)
    and backward (braking) passes so the profile is drivable.
    """
    kappa = np.abs(loop_curvature(track.centerline))
    with np.errstate(divide="ignore"):
        v = np.minimum(v_max, np.sqrt(mu_f * G / np.maximum(kappa, 1e-12)))
    seg = np.roll(track.centerline, -1, axis=0) - track.centerline
    ds = np.hypot(seg[:, 0], seg[:, 1])
    n = len(v)
    for _ in range(2):  # second sweep settles the wrap-around
        for i in range(n):  # forward: acceleration limit
            j = (i + 1) % n
            v[j] = min(v[j], np.sqrt(v[i] ** 2 + 2 * accel_max * ds[i]))
        for i in range(n - 1, -1, -1):  # backward: braking limit
            j = (i + 1) % n
            v[i] = min(v[i], np.sqrt(v[j] ** 2 + 2 * accel_max * ds[i]))
    return RacingLine(points=track.centerline.copy(), velocity=v,
                      arc_length=track.arc_length.copy(),
                      total_length=track.total_length)


def track_progress(track: Track, pos) -> float:
    """Arc length of the nearest centerline point (projected onto segments)."""
    pos = np.asarray(pos, dtype=np.float64)
    p = track.centerline
    q = np.roll(p, -1, axis=0)
    d = q - p
    seg_len2 = np.maximum(np.einsum("ij,ij->i", d, d), 1e-18)
    t = np.clip(np.einsum("ij,ij->i", pos - p, d) / seg_len2, 0.0, 1.0)
    proj = p + t[:, None] * d
    dist2 = np.einsum("ij,ij->i", pos - proj, pos - proj)
    i = int(np.argmin(dist2))
    limit = 4.0 * float(track.half_width.max())
    if dist2[i] > limit ** 2:
        raise TrackError(f"position {pos} is {np.sqrt(dist2[i]):.2f} m from the "
                         f"centerline (limit {limit:.2f})")
    return float((track.arc_length[i] + t[i] * np.sqrt(seg_len2[i]))
                 % track.total_length)


class ProgressTracker:
    """Accumulates signed arc-length progress, unwrapped across the start line."""

    def __init__(self, track: Track, pos):
        self.track = track
        self._last = track_progress(track, pos)
        self.progress = self._last

    def update(self, pos) -> float:
        s = track_progress(self.track, pos)
        total = self.track.total_length
        delta = (s - self._last + 0.5 * total) % total - 0.5 * total
        self.progress += delta
        self._last = s
        return self.progress


def start_positions(track: Track, n: int = 30) -> list[tuple[float, float, float, float]]:
    """n poses (x, y, yaw, s) equidistant along arc length."""
    out = []
    for k in range(n):
        s = k * track.total_length / n
        x, y = track.position_at(s)
        out.append((float(x), float(y), track.heading_at(s), float(s)))
    return out


def _periodic_resample(points: np.ndarray, spacing: float) -> np.ndarray:
    """Resample a closed polygon with a periodic cubic spline at ~spacing."""
    closed = np.vstack([points, points[:1]])
    seg = np.diff(closed, axis=0)
    t = np.concatenate([[0.0], np.cumsum(np.hypot(seg[:, 0], seg[:, 1]))])
    spline = CubicSpline(t, closed, axis=0, bc_type="periodic")
    n = max(int(round(t[-1] / spacing)), 32)
    return spline(np.linspace(0.0, t[-1], n, endpoint=False))


def _smooth_loop(values: np.ndarray, passes: int, window: int = 5) -> np.ndarray:
    kernel = np.ones(window) / window
    pad = window // 2
    for _ in range(passes):
        ext = np.concatenate([values[-pad:], values, values[:pad]])
        values = np.convolve(ext, kernel, mode="valid")
    return values


def generate_track(seed: int, params: TrackGenConfig | None = None) -> Track:
    """Deterministic procedural closed circuit for the given seed."""
    params = params or TrackGenConfig()
    for attempt in range(params.max_retries):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=(0x7261CE, seed, attempt))))
        try:
            return _generate_once(rng, seed, params)
        except TrackError:
            continue
    raise TrackError(f"track generation failed for seed {seed} "
                     f"after {params.max_retries} attempts")


def _generate_once(rng: np.random.Generator, seed: int,
                   params: TrackGenConfig) -> Track:
    n_c = params.n_curves
    base_r = params.length_scale / (2 * np.pi)
    ang = 2 * np.pi * np.arange(n_c) / n_c
    ang = ang + rng.uniform(-0.25, 0.25, n_c) * (2 * np.pi / n_c)
    rad = base_r * (1.0 + rng.uniform(-0.3, 0.3, n_c))
    ctrl = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)

    pts = _periodic_resample(ctrl, params.point_spacing)
    # relax curvature until the tightest corner clears the widest wall offset
    kappa_max = 0.8 / (params.width_max + 0.4)
    for _ in range(200):
        if np.abs(loop_curvature(pts)).max() <= kappa_max:
            break
        pts = np.stack([_smooth_loop(pts[:, 0], 1), _smooth_loop(pts[:, 1], 1)],
                       axis=1)
        pts = _periodic_resample(pts, params.point_spacing)
    else:
        raise TrackError("curvature relaxation did not converge")

    hw_ctrl = rng.uniform(params.width_min, params.width_max, n_c)
    idx = np.linspace(0, len(pts), n_c, endpoint=False).astype(int)
    hw = np.interp(np.arange(len(pts)), idx, hw_ctrl, period=len(pts))
    hw = _smooth_loop(hw, passes=3)
    hw = np.clip(hw, params.width_min, params.width_max)

    validate_track(pts, hw)
    return Track(name=f"gen-{seed}", centerline=pts, half_width=hw)
