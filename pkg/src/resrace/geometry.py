"""Collision primitives: oriented rectangles vs. segments and each other."""

from __future__ import annotations

import numpy as np


def point_in_rect(points: np.ndarray, center, yaw: float, length: float,
                  width: float) -> np.ndarray:
    """Boolean mask of points inside an oriented rectangle."""
    c, s = np.cos(yaw), np.sin(yaw)
    d = np.atleast_2d(points) - np.asarray(center)
    local_x = d[:, 0] * c + d[:, 1] * s
    local_y = -d[:, 0] * s + d[:, 1] * c
    return (np.abs(local_x) <= 0.5 * length) & (np.abs(local_y) <= 0.5 * width)


def _cross(ox, oy, ax, ay, bx, by):
    return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox)


def segments_intersect_segment(segs: np.ndarray, p, q) -> np.ndarray:
    """Mask of rows in segs (n, 4) properly crossing segment p-q."""
    x1, y1, x2, y2 = segs[:, 0], segs[:, 1], segs[:, 2], segs[:, 3]
    px, py = p
    qx, qy = q
    d1 = _cross(px, py, qx, qy, x1, y1)
    d2 = _cross(px, py, qx, qy, x2, y2)
    d3 = _cross(x1, y1, x2, y2, px, py)
    d4 = _cross(x1, y1, x2, y2, qx, qy)
    return (d1 * d2 < 0) & (d3 * d4 < 0)


def rect_hits_segments(corners: np.ndarray, segs: np.ndarray, center, yaw,
                       length, width) -> bool:
    """True if the rectangle touches any segment.

    Covers edge crossings and segments contained in the rectangle; segments
    are pre-filtered by a bounding-circle test.
    """
    if len(segs) == 0:
        return False
    cx, cy = center
    reach = 0.5 * np.hypot(length, width) + 1e-9
    mid = 0.5 * (segs[:, 0:2] + segs[:, 2:4])
    half = 0.5 * np.hypot(segs[:, 2] - segs[:, 0], segs[:, 3] - segs[:, 1])
    near = np.hypot(mid[:, 0] - cx, mid[:, 1] - cy) <= reach + half
    if not near.any():
        return False
    segs = segs[near]
    if point_in_rect(segs[:, 0:2], center, yaw, length, width).any():
        return True
    if point_in_rect(segs[:, 2:4], center, yaw, length, width).any():
        return True
    for k in range(4):
        p, q = corners[k], corners[(k + 1) % 4]
        if segments_intersect_segment(segs, p, q).any():
            return True
    return False


def rects_overlap(corners_a: np.ndarray, corners_b: np.ndarray) -> bool:
    """Separating-axis test for two oriented rectangles (4, 2) each."""
    for rect in (corners_a, corners_b):
        for k in range(2):  # two unique edge normals per rectangle
            edge = rect[(k + 1) % 4] - rect[k]
            axis = np.array([-edge[1], edge[0]])
            pa = corners_a @ axis
            pb = corners_b @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
