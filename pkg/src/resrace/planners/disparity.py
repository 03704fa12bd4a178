"""Disparity-extender baseline: inflate ranges next to depth discontinuities
by the vehicle half-width, steer into the deepest remaining gap, and plan
velocity from the friction limit and the gap depth."""

from __future__ import annotations

import numpy as np

from ..config import DisparityConfig, LidarConfig, VehicleConfig
from ..lidar import Scan, median_filter
from ..vehicle import friction_speed_limit
from .apf import _best_ray, normalize_action, pure_pursuit

LOOKAHEAD = 2.0  # m, tracking-point distance along the chosen ray


def extend_disparities(ranges: np.ndarray, angle_step: float,
                       half_width: float, threshold: float) -> np.ndarray:
    """Overwrite beams adjacent to each disparity with the nearer range.

    The far side of a jump is masked over ceil(half_width / (d * step)) beams
    at nearer range d, accounting for the vehicle body at the obstacle edge.
    """
    out = ranges.copy()
    jump = np.diff(ranges)
    for i in np.flatnonzero(np.abs(jump) > threshold):
        if jump[i] > 0:  # nearer on the left of the pair: mask rightward
            d = ranges[i]
            n = int(np.ceil(half_width / (max(d, 1e-6) * angle_step)))
            lo, hi = i + 1, min(i + 1 + n, len(ranges))
            out[lo:hi] = np.minimum(out[lo:hi], d)
        else:            # nearer on the right: mask leftward
            d = ranges[i + 1]
            n = int(np.ceil(half_width / (max(d, 1e-6) * angle_step)))
            lo, hi = max(i + 1 - n, 0), i + 1
            out[lo:hi] = np.minimum(out[lo:hi], d)
    return out


class DisparityPlanner:
    name = "disparity"

    def __init__(self, vehicle_cfg: VehicleConfig, lidar_cfg: LidarConfig,
                 run_cfg):
        self.veh = vehicle_cfg
        self.lidar = lidar_cfg
        self.cfg: DisparityConfig = run_cfg.disparity

    def act(self, scan: Scan, state=None) -> np.ndarray:
        cfg = self.cfg
        filtered = median_filter(scan, self.lidar.median_window)
        step = float(filtered.angles[1] - filtered.angles[0])
        half_width = 0.5 * self.veh.width * cfg.safety_margin
        extended = extend_disparities(filtered.ranges, step, half_width,
                                      cfg.threshold)
        # ignore the rear-most beams: the car should not chase gaps behind it
        ahead = np.abs(filtered.angles) <= np.deg2rad(100.0)
        ray = _best_ray(extended[ahead], filtered.angles[ahead])
        d = min(ray.range, LOOKAHEAD)
        tp = (d * np.cos(ray.bearing), d * np.sin(ray.bearing))
        steer = pure_pursuit(tp, self.veh.wheelbase, self.veh.steer_max)
        v1 = friction_speed_limit(self.veh.mu_f, self.veh.wheelbase, steer,
                                  self.veh.v_max)
        v2 = float(np.clip(cfg.k_gap_speed * ray.range, cfg.v_floor,
                           self.veh.v_max))
        return normalize_action(min(v1, v2), steer, self.veh)
