"""Reactive base planners operating on LiDAR scans only."""

from .apf import ApfPlanner
from .disparity import DisparityPlanner

PLANNERS = {
    "apf": ApfPlanner,
    "disparity": DisparityPlanner,
}


def make_planner(name: str, vehicle_cfg, lidar_cfg, run_cfg):
    try:
        cls = PLANNERS[name]
    except KeyError:
        raise ValueError(
            f"unknown planner '{name}'; available: {sorted(PLANNERS)}") from None
    return cls(vehicle_cfg, lidar_cfg, run_cfg)
