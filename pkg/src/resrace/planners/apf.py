"""Potential-field base planner.

Pipeline per scan: median filter, project to points, down-sample, close the
rear gap, pick a goal ray at the deepest disparity, descend the potential
field for a short path, smooth it with a cubic spline, then track the
lookahead point with pure pursuit and a friction/goal-distance speed law.

The potential is attractive-linear about the goal plus, for each of six
points on the vehicle body, one linear repulsive term from its nearest
obstacle point (cutoff rho_0, accumulated at the path position).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.interpolate import CubicSpline

from ..config import ApfConfig, LidarConfig, VehicleConfig
from ..lidar import (PointSet, Scan, close_gap, downsample_symmetric,
                     median_filter, scan_to_points)
from ..vehicle import friction_speed_limit

log = logging.getLogger(__name__)

FALLBACK_SPEED = 0.5  # m/s, safe crawl when a pipeline stage degenerates


class PlannerError(ValueError):
    pass


@dataclass
class GoalPoint:
    range: float
    bearing: float

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.range * np.cos(self.bearing),
                         self.range * np.sin(self.bearing)])


def body_offsets(length: float, width: float) -> np.ndarray:
    """Six body points: bounding-box corners plus the side mid-points.

    Ordered in mirror pairs so repulsive y-components cancel exactly on
    symmetric scenes.
    """
    hl, hw = 0.5 * length, 0.5 * width
    return np.array([
        [hl, hw], [hl, -hw],
        [0.0, hw], [0.0, -hw],
        [-hl, hw], [-hl, -hw],
    ])


def _best_ray(ranges: np.ndarray, bearings: np.ndarray) -> GoalPoint:
    """Deepest ray; ties prefer the smaller |bearing|; an exact mirror tie
    resolves to the straight-ahead ray (prefer straight progress)."""
    best = ranges.max()
    at_best = np.flatnonzero(ranges == best)
    abs_b = np.abs(bearings[at_best])
    closest = at_best[abs_b == abs_b.min()]
    if len(closest) > 1 and bearings[closest[0]] == -bearings[closest[-1]]:
        return GoalPoint(range=float(best), bearing=0.0)
    return GoalPoint(range=float(best), bearing=float(bearings[closest[0]]))


def find_goal_point(ranges, bearings, eps_d: float) -> GoalPoint:
    """Goal ray from LiDAR disparities exceeding eps_d.

    Each adjacent pair with |d_{i+1} - d_i| > eps_d yields the candidate ray
    (max(d_i, d_{i+1}), mid-bearing); the deepest candidate wins.  Without
    any disparity, fall back to the deepest beam.
    """
    ranges = np.asarray(ranges, dtype=np.float64)
    bearings = np.asarray(bearings, dtype=np.float64)
    if len(ranges) == 0:
        raise PlannerError("empty scan")
    if len(ranges) == 1:
        return GoalPoint(float(ranges[0]), float(bearings[0]))
    jump = np.abs(np.diff(ranges))
    idx = np.flatnonzero(jump > eps_d)
    if len(idx) == 0:
        return _best_ray(ranges, bearings)
    cand_r = np.maximum(ranges[idx], ranges[idx + 1])
    cand_b = 0.5 * (bearings[idx] + bearings[idx + 1])
    return _best_ray(cand_r, cand_b)


@njit(cache=True)
def _gradient(px, py, offsets, obstacles, gx_goal, gy_goal,
              k_att, k_rep, rho_0, rho_min):
    # attractive: linear well, constant-magnitude gradient toward the goal
    dx, dy = px - gx_goal, py - gy_goal
    dist = np.sqrt(dx * dx + dy * dy)
    if dist > 1e-9:
        gx = 0.5 * k_att * dx / dist
        gy = 0.5 * k_att * dy / dist
    else:
        gx = 0.0
        gy = 0.0
    # one repulsive term per body point, from its nearest obstacle
    for j in range(offsets.shape[0]):
        bx, by = px + offsets[j, 0], py + offsets[j, 1]
        best = 1e30
        ox = oy = 0.0
        for i in range(obstacles.shape[0]):
            ddx, ddy = bx - obstacles[i, 0], by - obstacles[i, 1]
            d2 = ddx * ddx + ddy * ddy
            if d2 < best:
                best = d2
                ox, oy = ddx, ddy
        rho = np.sqrt(best)
        if rho > rho_0:
            continue
        mag = -0.5 * k_rep / max(rho, rho_min) ** 2
        if rho > 1e-30:
            gx += mag * ox / rho
            gy += mag * oy / rho
    return gx, gy


@njit(cache=True)
def _descend(start, offsets, obstacles, goal, k_att, k_rep, rho_0, rho_min,
             eps, n_p):
    path = np.empty((n_p + 1, 2))
    path[0] = start
    m = 1
    for _ in range(n_p):
        gx, gy = _gradient(path[m - 1, 0], path[m - 1, 1], offsets, obstacles,
                           goal[0], goal[1], k_att, k_rep, rho_0, rho_min)
        norm = np.sqrt(gx * gx + gy * gy)
        if norm < 1e-12:
            break
        path[m, 0] = path[m - 1, 0] - eps * gx / norm
        path[m, 1] = path[m - 1, 1] - eps * gy / norm
        m += 1
    return path[:m]


def apf_gradient(pos, offsets: np.ndarray, obstacles: np.ndarray,
                 goal: GoalPoint, cfg: ApfConfig) -> np.ndarray:
    """Gradient of the full potential at `pos` (ego frame)."""
    if len(obstacles) == 0:
        raise PlannerError("no obstacle points")
    g = _gradient(float(pos[0]), float(pos[1]),
                  np.ascontiguousarray(offsets, dtype=np.float64),
                  np.ascontiguousarray(obstacles, dtype=np.float64),
                  float(goal.xy[0]), float(goal.xy[1]),
                  cfg.k_att, cfg.k_rep, cfg.rho_0, cfg.rho_min)
    return np.array(g)


def potential(pos, offsets: np.ndarray, obstacles: np.ndarray,
              goal: GoalPoint, cfg: ApfConfig) -> float:
    """Scalar potential; the reference for finite-difference checks."""
    pos = np.asarray(pos, dtype=np.float64)
    u = 0.5 * cfg.k_att * float(np.hypot(*(pos - goal.xy)))
    for off in offsets:
        bp = pos + off
        rho = float(np.min(np.hypot(*(bp - obstacles).T)))
        rho = max(rho, cfg.rho_min)
        if rho <= cfg.rho_0:
            u += 0.5 * cfg.k_rep * (1.0 / rho - 1.0 / cfg.rho_0)
    return u


def plan_path(start, obstacles: np.ndarray, goal: GoalPoint, cfg: ApfConfig,
              offsets: np.ndarray) -> np.ndarray:
    """Normalized-gradient descent: n_p steps of length step_eps from start."""
    if len(obstacles) == 0:
        raise PlannerError("no obstacle points")
    return _descend(np.asarray(start, dtype=np.float64),
                    np.ascontiguousarray(offsets, dtype=np.float64),
                    np.ascontiguousarray(obstacles, dtype=np.float64),
                    goal.xy, cfg.k_att, cfg.k_rep, cfg.rho_0, cfg.rho_min,
                    cfg.step_eps, cfg.n_p)


def smooth_and_target(raw_path: np.ndarray, cfg: ApfConfig) -> np.ndarray:
    """Down-sample the raw path, spline it up to l_s, return the point at l_t.

    A path shorter than the target lookahead returns its last point.
    """
    if len(raw_path) < 2:
        raise PlannerError("path needs at least 2 points")
    pts = PointSet(raw_path, np.zeros(len(raw_path), dtype=bool))
    xy = _downsample_path(pts.xy, cfg.eps_f)
    chord = np.concatenate([[0.0], np.cumsum(np.hypot(*np.diff(xy, axis=0).T))])
    if chord[-1] <= cfg.lookahead_target:
        return raw_path[-1].copy()
    stop = int(np.searchsorted(chord, cfg.lookahead_spline, side="left"))
    xy = xy[:stop + 1]
    chord = chord[:stop + 1]
    if len(xy) < 3:
        t = cfg.lookahead_target / chord[-1]
        return (1 - t) * xy[0] + t * xy[-1]
    spline = CubicSpline(chord, xy, axis=0, bc_type="natural")
    return spline(cfg.lookahead_target)


def _downsample_path(xy: np.ndarray, eps_f: float) -> np.ndarray:
    # slack absorbs ulp noise: raw steps are exactly eps long, so a strict
    # comparison at the threshold would flip on rounding
    keep = [0]
    for i in range(1, len(xy)):
        if np.hypot(*(xy[i] - xy[keep[-1]])) > eps_f + 1e-12:
            keep.append(i)
    return xy[keep]


def pure_pursuit(tracking_point, wheelbase: float, steer_max: float) -> float:
    """Steer onto the circle through the tracking point (ego frame)."""
    x, y = float(tracking_point[0]), float(tracking_point[1])
    if x <= 0.0:
        return float(np.sign(y)) * steer_max
    curvature = 2.0 * y / (x * x + y * y)
    return float(np.clip(np.arctan(wheelbase * curvature), -steer_max, steer_max))


def target_velocity(steer: float, d_g: float, cfg: ApfConfig,
                    veh: VehicleConfig) -> float:
    """min of the friction speed limit and the goal-distance law."""
    v1 = friction_speed_limit(veh.mu_f, veh.wheelbase, steer, veh.v_max)
    v2 = float(np.clip(cfg.k_goal_speed * d_g, cfg.v_floor, veh.v_max))
    return min(v1, v2)


def normalize_action(v: float, steer: float, veh: VehicleConfig) -> np.ndarray:
    return np.array([
        np.clip(2.0 * v / veh.v_max - 1.0, -1.0, 1.0),
        np.clip(steer / veh.steer_max, -1.0, 1.0),
    ])


def denormalize_action(action, veh: VehicleConfig) -> tuple[float, float]:
    """Normalized [-1, 1]^2 action to (target_v, target_steer)."""
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    return (0.5 * (a[0] + 1.0) * veh.v_max, a[1] * veh.steer_max)


class ApfPlanner:
    """Full scan-to-action base policy (deterministic, mapless)."""

    name = "apf"

    def __init__(self, vehicle_cfg: VehicleConfig, lidar_cfg: LidarConfig,
                 run_cfg):
        self.veh = vehicle_cfg
        self.lidar = lidar_cfg
        self.cfg: ApfConfig = run_cfg.apf
        self.offsets = body_offsets(vehicle_cfg.length, vehicle_cfg.width)

    def act(self, scan: Scan, state=None) -> np.ndarray:
        action, _ = self.act_with_info(scan)
        return action

    def act_with_info(self, scan: Scan):
        cfg = self.cfg
        try:
            filtered = median_filter(scan, self.lidar.median_window)
            pts = scan_to_points(filtered)
            pts = downsample_symmetric(pts, cfg.eps_f)
            pts = close_gap(pts, cfg.d_f, cfg.eps_f)
            goal = find_goal_point(pts.ranges, pts.bearings, cfg.eps_d)
            path = plan_path((0.0, 0.0), pts.xy, goal, cfg, self.offsets)
            tp = smooth_and_target(path, cfg)
            steer = pure_pursuit(tp, self.veh.wheelbase, self.veh.steer_max)
            v = target_velocity(steer, goal.range, cfg, self.veh)
        except (PlannerError, ValueError) as exc:
            log.warning("apf pipeline degenerate (%s); using fallback action", exc)
            return normalize_action(FALLBACK_SPEED, 0.0, self.veh), {}
        info = {"goal": goal, "path": path, "tracking_point": tp,
                "points": pts}
        return normalize_action(v, steer, self.veh), info
