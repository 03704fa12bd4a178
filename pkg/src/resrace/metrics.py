"""Evaluation metrics over sets of episode records.

- lap_time_s: median running-start lap time
- overtake_crash_pct: crashes per overtaking attempt, in percent
- env_crash_per_km: collisions outside attempts per driven kilometer
"""

from __future__ import annotations

from dataclasses import dataclass

from .envs import EpisodeRecord


@dataclass
class Metrics:
    lap_time_s: float | None        # None when no lap was completed
    overtake_crash_pct: float | None  # None when no attempt concluded
    env_crash_per_km: float
    n_success: int
    n_overtake_crash: int
    n_env_crash: int
    n_laps: int
    distance_km: float


def _median(values: list[float]) -> float | None:
    if not values:
        return None
    values = sorted(values)
    n = len(values)
    mid = n // 2
    return values[mid] if n % 2 else 0.5 * (values[mid - 1] + values[mid])


def compute_metrics(records: list[EpisodeRecord]) -> Metrics:
    if not records:
        raise ValueError("no episode records")
    laps = [t for r in records for t in r.lap_times]
    success = sum(r.count("overtake_success") for r in records)
    ot_crash = sum(r.count("overtake_crash") for r in records)
    env_crash = sum(r.count("env_crash") for r in records)
    km = sum(r.distance_m for r in records) / 1000.0
    attempts_closed = success + ot_crash
    return Metrics(
        lap_time_s=_median(laps),
        overtake_crash_pct=(100.0 * ot_crash / attempts_closed
                            if attempts_closed else None),
        env_crash_per_km=env_crash / km if km > 0 else 0.0,
        n_success=success,
        n_overtake_crash=ot_crash,
        n_env_crash=env_crash,
        n_laps=len(laps),
        distance_km=km,
    )


def aggregate_rows(per_track: dict[str, Metrics]) -> Metrics:
    """The "All" row: mean of per-track lap medians, pooled-count ratios."""
    lap_vals = [m.lap_time_s for m in per_track.values()
                if m.lap_time_s is not None]
    success = sum(m.n_success for m in per_track.values())
    ot_crash = sum(m.n_overtake_crash for m in per_track.values())
    env_crash = sum(m.n_env_crash for m in per_track.values())
    km = sum(m.distance_km for m in per_track.values())
    closed = success + ot_crash
    return Metrics(
        lap_time_s=sum(lap_vals) / len(lap_vals) if lap_vals else None,
        overtake_crash_pct=100.0 * ot_crash / closed if closed else None,
        env_crash_per_km=env_crash / km if km > 0 else 0.0,
        n_success=success,
        n_overtake_crash=ot_crash,
        n_env_crash=env_crash,
        n_laps=sum(m.n_laps for m in per_track.values()),
        distance_km=km,
    )
