"""2D-LiDAR simulation and scan preprocessing.

Beams are cast with exact ray/segment intersection against wall segments and
opponent rectangles (occlusion falls out of taking the nearest hit).  For
speed, segments are sorted by their distance to the sensor and each beam
stops scanning once no remaining segment can beat its current hit.

Preprocessing: median filter against sensor noise, greedy down-sampling to a
sparse point set, and closing the rear field-of-view gap with interpolated
artificial points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .config import LidarConfig


class ScanError(ValueError):
    """Degenerate scan input (e.g. too few points to close the gap)."""


@dataclass
class Scan:
    ranges: np.ndarray          # (n,) m
    angles: np.ndarray          # (n,) rad, strictly increasing, uniform
    max_range: float


@dataclass
class PointSet:
    """Obstacle points in the ego frame, ordered by originating beam angle."""

    xy: np.ndarray              # (n, 2)
    artificial: np.ndarray      # (n,) bool

    def __len__(self):
        return len(self.xy)

    @property
    def ranges(self) -> np.ndarray:
        return np.hypot(self.xy[:, 0], self.xy[:, 1])

    @property
    def bearings(self) -> np.ndarray:
        return np.arctan2(self.xy[:, 1], self.xy[:, 0])


def beam_angles(n_beams: int = 1080, fov_deg: float = 270.0) -> np.ndarray:
    """Beam angles spanning the FOV inclusively, antisymmetric about zero."""
    if n_beams == 1:
        return np.zeros(1)
    step = np.deg2rad(fov_deg) / (n_beams - 1)
    return (np.arange(n_beams) - (n_beams - 1) / 2.0) * step


@njit(cache=True)
def _cast(ox, oy, dirx, diry, segs, order, seg_dist, max_range):
    n_beams = dirx.shape[0]
    out = np.full(n_beams, max_range)
    for b in range(n_beams):
        dx, dy = dirx[b], diry[b]
        best = max_range
        for k in range(order.shape[0]):
            i = order[k]
            if seg_dist[i] >= best:
                break  # sorted: nothing closer remains
            x1, y1, x2, y2 = segs[i, 0], segs[i, 1], segs[i, 2], segs[i, 3]
            ex, ey = x2 - x1, y2 - y1
            denom = dx * ey - dy * ex
            if abs(denom) < 1e-14:
                continue
            rx, ry = x1 - ox, y1 - oy
            t = (rx * ey - ry * ex) / denom
            u = (rx * dy - ry * dx) / denom
            if t > 0.0 and 0.0 <= u <= 1.0 and t < best:
                best = t
        out[b] = best
    return out


def _segment_distances(segs: np.ndarray, ox: float, oy: float) -> np.ndarray:
    p = segs[:, 0:2]
    d = segs[:, 2:4] - p
    len2 = np.maximum(np.einsum("ij,ij->i", d, d), 1e-18)
    t = np.clip(((ox - p[:, 0]) * d[:, 0] + (oy - p[:, 1]) * d[:, 1]) / len2, 0, 1)
    proj = p + t[:, None] * d
    return np.hypot(proj[:, 0] - ox, proj[:, 1] - oy)


def scan(wall_segments: np.ndarray, opponent_boxes, ego_pose,
         noise_std: float, rng: np.random.Generator | None,
         cfg: LidarConfig | None = None) -> Scan:
    """Cast all beams from ego_pose = (x, y, yaw).

    opponent_boxes: iterable of (4, 2) rectangle corner arrays; their edges
    occlude walls behind them.
    """
    cfg = cfg or LidarConfig()
    ox, oy, yaw = ego_pose
    segs = [wall_segments] if len(wall_segments) else []
    for box in opponent_boxes:
        nxt = np.roll(box, -1, axis=0)
        segs.append(np.hstack([box, nxt]))
    segs = np.ascontiguousarray(np.vstack(segs)) if segs else np.zeros((0, 4))

    angles = beam_angles(cfg.n_beams, cfg.fov_deg)
    world = yaw + angles
    dirx = np.cos(world)
    diry = np.sin(world)
    if len(segs):
        seg_dist = _segment_distances(segs, ox, oy)
        order = np.argsort(seg_dist).astype(np.int64)
        ranges = _cast(ox, oy, dirx, diry, segs, order, seg_dist, cfg.max_range)
    else:
        ranges = np.full(cfg.n_beams, cfg.max_range)
    if noise_std > 0.0:
        if rng is None:
            raise ValueError("noise_std > 0 requires an rng")
        ranges = ranges + rng.normal(0.0, noise_std, cfg.n_beams)
    ranges = np.clip(ranges, cfg.range_min, cfg.max_range)
    return Scan(ranges=ranges, angles=angles, max_range=cfg.max_range)


def median_filter(s: Scan, window: int = 5) -> Scan:
    """Sliding median per beam; edges handled by clamping indices."""
    if window % 2 != 1 or window < 1:
        raise ValueError("window must be odd and positive")
    if window == 1:
        return Scan(s.ranges.copy(), s.angles, s.max_range)
    half = window // 2
    padded = np.concatenate([
        np.repeat(s.ranges[0], half), s.ranges, np.repeat(s.ranges[-1], half)])
    view = np.lib.stride_tricks.sliding_window_view(padded, window)
    return Scan(np.median(view, axis=1), s.angles, s.max_range)


def scan_to_points(s: Scan) -> PointSet:
    xy = np.stack([s.ranges * np.cos(s.angles), s.ranges * np.sin(s.angles)],
                  axis=1)
    return PointSet(xy=xy, artificial=np.zeros(len(xy), dtype=bool))


@njit(cache=True)
def _greedy_keep(xy, eps_f):
    n = xy.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    keep[0] = True
    lx, ly = xy[0, 0], xy[0, 1]
    for i in range(1, n):
        dx, dy = xy[i, 0] - lx, xy[i, 1] - ly
        if dx * dx + dy * dy > eps_f * eps_f:
            keep[i] = True
            lx, ly = xy[i, 0], xy[i, 1]
    return keep


def downsample(points: PointSet, eps_f: float) -> PointSet:
    """Keep a point iff it is more than eps_f from the last kept point."""
    if eps_f <= 0:
        raise ValueError("eps_f must be positive")
    if len(points) == 0:
        return points
    keep = _greedy_keep(np.ascontiguousarray(points.xy, dtype=np.float64), eps_f)
    return PointSet(xy=points.xy[keep], artificial=points.artificial[keep])


def downsample_symmetric(points: PointSet, eps_f: float) -> PointSet:
    """Down-sample sweeping outward from the center toward each side.

    Per-side spacing matches `downsample`; unlike the single left-to-right
    sweep, mirror-symmetric inputs give mirror-symmetric outputs, which keeps
    symmetric scenes unbiased.  With an even point count both central points
    seed their side and are kept.
    """
    n = len(points)
    if n < 3:
        return downsample(points, eps_f)
    mid_r = n // 2
    mid_l = mid_r - 1 if n % 2 == 0 else mid_r
    left = PointSet(points.xy[mid_l::-1], points.artificial[mid_l::-1])
    right = PointSet(points.xy[mid_r:], points.artificial[mid_r:])
    kept_l = downsample(left, eps_f)
    kept_r = downsample(right, eps_f)
    stop = None if n % 2 == 0 else 0  # odd: drop the duplicated center
    return PointSet(
        xy=np.vstack([kept_l.xy[:stop:-1], kept_r.xy]),
        artificial=np.concatenate(
            [kept_l.artificial[:stop:-1], kept_r.artificial]))


def close_gap(points: PointSet, d_f: float, eps_f: float = 0.1) -> PointSet:
    """Drop points behind the rear cut, then close the FOV gap.

    Points with ego-frame x below d_f (d_f is negative) are removed; the
    angular first and last survivors are connected by linearly interpolated
    points no more than eps_f apart, appended and flagged artificial.
    """
    mask = points.xy[:, 0] >= d_f
    if mask.sum() < 2:
        raise ScanError("fewer than 2 points remain after the rear cut")
    xy = points.xy[mask]
    art = points.artificial[mask]
    first, last = xy[0], xy[-1]
    gap = float(np.hypot(*(first - last)))
    n_seg = max(int(np.ceil(gap / eps_f)), 1)
    fill = np.linspace(last, first, n_seg + 1)[1:-1]
    return PointSet(
        xy=np.vstack([xy, fill]),
        artificial=np.concatenate([art, np.ones(len(fill), dtype=bool)]))
