"""Multi-agent racing environment.

One ego vehicle races nine non-reactive opponents that pure-pursuit a racing
line at a capped velocity profile.  Control at 50 Hz, physics at 100 Hz (two
sub-steps).  Episodes truncate after two laps of ego progress or end on an
ego collision.  Overtake attempts, successes, crashes, and lap times are
recorded for the evaluation metrics.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig, VehicleConfig
from .geometry import rect_hits_segments, rects_overlap
from .lidar import Scan, median_filter, scan as lidar_scan
from .planners.apf import denormalize_action, pure_pursuit
from .track import (ProgressTracker, RacingLine, Track, racing_line,
                    start_positions)
from .vehicle import (SLIP, STEER, V, X, Y, YAW, YAW_RATE, footprint_corners,
                      low_level_control_arrays, step_dynamics_arrays)

EGO = 0

# reward coefficients, fixed by the reward definition
R_PROGRESS = 0.1
R_ACTION = 0.005
R_PROXIMITY = 0.2
R_OVERTAKE = 0.5
R_CRASH = 5.0
PROXIMITY_BAND = 0.4  # m


@dataclass
class StepResult:
    scan: Scan                   # raw (noisy) scan, planner input
    lidar_obs: np.ndarray        # median-filtered ranges, network input
    proprio: np.ndarray          # (8,) raw proprioceptive frame
    reward: float
    reward_components: dict
    done: bool
    info: dict


@dataclass
class EpisodeRecord:
    track: str
    k_v: float
    start_idx: int
    lap_times: list[float] = field(default_factory=list)
    events: list[dict] = field(default_factory=list)
    distance_m: float = 0.0
    steps: int = 0
    reward_sum: float = 0.0
    trajectory: list[dict] = field(default_factory=list)

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e["kind"] == kind)


def opponent_control(S_row: np.ndarray, s_arc: float, line: RacingLine,
                     k_v: float, veh: VehicleConfig) -> tuple[float, float]:
    """Pure-pursuit steering plus capped profile speed for one opponent.

    Depends only on the opponent's own state and the racing line (opponents
    never react to the ego).
    """
    v = S_row[V] * np.cos(S_row[SLIP])
    lookahead = float(np.clip(0.4 * v, 0.6, 2.5))
    target = line.position_at(s_arc + lookahead)
    dx, dy = target[0] - S_row[X], target[1] - S_row[Y]
    c, s = np.cos(S_row[YAW]), np.sin(S_row[YAW])
    local = (c * dx + s * dy, -s * dx + c * dy)
    steer = pure_pursuit(local, veh.wheelbase, veh.steer_max)
    target_v = k_v * line.velocity_at(s_arc)
    return target_v, steer


class RacingEnv:
    """Single environment instance; owns its RNG stream and all car state."""

    def __init__(self, tracks: list[Track], cfg: RunConfig,
                 rng: np.random.Generator, record_trajectory: bool = False):
        self.tracks = tracks
        self.cfg = cfg
        self.veh = cfg.vehicle
        self.rng = rng
        self.record_trajectory = record_trajectory
        self.lines = [racing_line(t, cfg.vehicle.mu_f, cfg.vehicle.v_max,
                                  cfg.vehicle.accel_max) for t in tracks]
        self.starts = [start_positions(t, cfg.env.n_start_positions)
                       for t in tracks]
        self.walls = [t.wall_segments() for t in tracks]
        self.n_cars = 1 + cfg.env.n_opponents
        self.record: EpisodeRecord | None = None

    # -- episode setup -----------------------------------------------------

    def reset(self, track_idx: int | None = None, start_idx: int | None = None,
              k_v: float | None = None) -> StepResult:
        env_cfg = self.cfg.env
        if track_idx is None:
            track_idx = int(self.rng.integers(len(self.tracks)))
        if start_idx is None:
            start_idx = int(self.rng.integers(env_cfg.n_start_positions))
        if k_v is None:
            k_v = float(self.rng.choice(np.asarray(env_cfg.k_v_train)))
        self.track_idx = track_idx
        self.track = self.tracks[track_idx]
        self.line = self.lines[track_idx]
        self.wall_segs = self.walls[track_idx]
        self.k_v = k_v
        self.start_idx = start_idx

        total = self.track.total_length
        x, y, yaw, s_ego = self.starts[track_idx][start_idx]
        self.S = np.zeros((self.n_cars, 7))
        self.S[EGO] = [x, y, 0.0, min(self.line.velocity_at(s_ego), 6.0),
                       yaw, 0.0, 0.0]
        spacing = total / (self.cfg.env.n_opponents + 1)
        for i in range(1, self.n_cars):
            s = (s_ego + i * spacing) % total
            px, py = self.line.position_at(s)
            heading = self.track.heading_at(s)
            self.S[i] = [px, py, 0.0, k_v * self.line.velocity_at(s),
                         heading, 0.0, 0.0]

        self.trackers = [ProgressTracker(self.track, self.S[i, 0:2])
                         for i in range(self.n_cars)]
        self.progress0 = self.trackers[EGO].progress
        self.laps_crossed = int(self.trackers[EGO].progress // total)
        self.last_cross_time = None
        self.t = 0
        self.prev_action = np.zeros(2)
        self.attempt: dict | None = None
        self.done = False
        if env_cfg.max_episode_steps is not None:
            self.max_steps = env_cfg.max_episode_steps
        else:
            self.max_steps = int(2.5 * (2 * total) / 0.8 / env_cfg.dt_control)
        self.record = EpisodeRecord(track=self.track.name, k_v=k_v,
                                    start_idx=start_idx)
        return self._observe(reward=0.0, components={}, done=False, info={})

    # -- stepping ----------------------------------------------------------

    def step(self, action: np.ndarray) -> StepResult:
        if self.done:
            raise RuntimeError("step() after episode end; call reset()")
        env_cfg = self.cfg.env
        action = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        targets = np.zeros((self.n_cars, 2))
        targets[EGO] = denormalize_action(action, self.veh)
        for i in range(1, self.n_cars):
            s_i = self.trackers[i].progress % self.track.total_length
            targets[i] = opponent_control(self.S[i], s_i, self.line,
                                          self.k_v, self.veh)

        a_long_ego = 0.0
        for _ in range(2):
            accel, sv = low_level_control_arrays(
                self.S[:, V] * np.cos(self.S[:, SLIP]), self.S[:, STEER],
                targets[:, 0], targets[:, 1], self.veh)
            self.S = step_dynamics_arrays(self.S, accel, sv, self.veh,
                                          self.veh.dt_physics)
            a_long_ego = float(accel[EGO])

        self.t += 1
        prev_progress = self.trackers[EGO].progress
        for i in range(self.n_cars):
            self.trackers[i].update(self.S[i, 0:2])
        ego_progress = self.trackers[EGO].progress
        self.record.distance_m += max(ego_progress - prev_progress, 0.0)

        crash = self._ego_collides()
        events = self._overtake_bookkeeping(crash)
        overtake = any(e["kind"] == "overtake_success" for e in events)

        self._lap_bookkeeping(events)
        truncated = (ego_progress - self.progress0
                     >= env_cfg.max_laps * self.track.total_length)
        timed_out = self.t >= self.max_steps
        self.done = bool(crash or truncated or timed_out)
        if self.done and self.attempt is not None:
            # keep the attempt ledger balanced at truncation
            events.append(self._event("attempt_lapsed"))
            self.attempt = None

        self.record.events.extend(events)
        sc = self._scan()
        reward, components = compute_reward(
            v_long=float(self.S[EGO, V] * np.cos(self.S[EGO, SLIP])),
            dt=env_cfg.dt_control,
            action=action, prev_action=self.prev_action,
            d_lidar=float(sc.ranges.min()),
            overtake=overtake, crash=crash,
            proximity_linear=env_cfg.proximity_linear)
        self.prev_action = action
        self.record.steps += 1
        self.record.reward_sum += reward
        info = {"events": events, "crash": crash, "truncated": truncated,
                "timed_out": timed_out, "progress": ego_progress}
        result = self._observe(reward, components, self.done, info, sc,
                               a_long_ego, action)
        return result

    # -- internals ----------------------------------------------------------

    def _scan(self) -> Scan:
        boxes = [footprint_corners(self.S[i, X], self.S[i, Y], self.S[i, YAW],
                                   self.veh.length, self.veh.width)
                 for i in range(1, self.n_cars)]
        pose = (self.S[EGO, X], self.S[EGO, Y], self.S[EGO, YAW])
        return lidar_scan(self.wall_segs, boxes, pose,
                          self.cfg.lidar.noise_std, self.rng, self.cfg.lidar)

    def _observe(self, reward, components, done, info, sc: Scan | None = None,
                 a_long: float = 0.0, action: np.ndarray | None = None
                 ) -> StepResult:
        sc = sc or self._scan()
        filtered = median_filter(sc, self.cfg.lidar.median_window)
        v = self.S[EGO, V]
        slip = self.S[EGO, SLIP]
        prev = self.prev_action if action is None else action
        proprio = np.array([
            v * np.cos(slip), v * np.sin(slip), a_long,
            self.S[EGO, YAW_RATE], slip, self.S[EGO, STEER],
            prev[0], prev[1],
        ], dtype=np.float32)
        if self.record_trajectory:
            self.record.trajectory.append({
                "t": self.t,
                "poses": self.S[:, [X, Y, YAW]].tolist(),
                "action": (action if action is not None else np.zeros(2)).tolist(),
                "reward_components": {k: float(vv) for k, vv in components.items()},
                "events": info.get("events", []),
            })
        return StepResult(scan=sc, lidar_obs=filtered.ranges.astype(np.float32),
                          proprio=proprio, reward=reward,
                          reward_components=components, done=done, info=info)

    def _ego_collides(self) -> bool:
        ego_corners = footprint_corners(self.S[EGO, X], self.S[EGO, Y],
                                        self.S[EGO, YAW], self.veh.length,
                                        self.veh.width)
        if rect_hits_segments(ego_corners, self.wall_segs,
                              self.S[EGO, 0:2], self.S[EGO, YAW],
                              self.veh.length, self.veh.width):
            return True
        for i in range(1, self.n_cars):
            opp = footprint_corners(self.S[i, X], self.S[i, Y], self.S[i, YAW],
                                    self.veh.length, self.veh.width)
            if rects_overlap(ego_corners, opp):
                return True
        return False

    def _overtake_bookkeeping(self, crash: bool) -> list[dict]:
        """Attempt lifecycle: open when an opponent is within d_attempt ahead,
        close on pass (success), ego collision (overtake_crash), or gap
        re-opening (lapsed).  One attempt at a time."""
        env_cfg = self.cfg.env
        events = []
        ego_p = self.trackers[EGO].progress
        total = self.track.total_length
        gaps = {}
        for i in range(1, self.n_cars):
            gaps[i] = (self.trackers[i].progress - ego_p) % total

        if self.attempt is not None:
            i = self.attempt["opponent"]
            gap = gaps[i]
            pass_margin = self.veh.length + env_cfg.overtake_margin
            if crash:
                events.append(self._event("overtake_crash"))
                self.attempt = None
            elif total - gap >= pass_margin and gap > total / 2:
                # ego is now ahead by the margin (gap wrapped past L/2)
                events.append(self._event("overtake_success", opponent=i))
                self._respawn_opponent(i)
                self.attempt = None
            elif env_cfg.d_attempt < gap <= total / 2:
                # opponent pulled away again (a wrapped gap means a pass in
                # progress, not a lapse)
                events.append(self._event("attempt_lapsed"))
                self.attempt = None
        elif crash:
            events.append(self._event("env_crash"))

        if self.attempt is None and not crash:
            ahead = [(gap, i) for i, gap in gaps.items()
                     if 0.0 < gap <= env_cfg.d_attempt]
            if ahead:
                gap, i = min(ahead)
                self.attempt = {"opponent": i, "opened_t": self.t}
                events.append(self._event("attempt_opened", opponent=i))
        return events

    def _respawn_opponent(self, i: int) -> None:
        """Place a passed opponent back on the line ahead of the ego."""
        env_cfg = self.cfg.env
        total = self.track.total_length
        ego_s = self.trackers[EGO].progress % total
        s = (ego_s + env_cfg.respawn_ahead) % total
        for _ in range(20):
            clear = all(
                abs(((self.trackers[j].progress % total) - s + total / 2)
                    % total - total / 2) > 3.0
                for j in range(1, self.n_cars) if j != i)
            if clear:
                break
            s = (s + 2.0) % total
        px, py = self.line.position_at(s)
        self.S[i] = [px, py, 0.0, self.k_v * self.line.velocity_at(s),
                     self.track.heading_at(s), 0.0, 0.0]
        self.trackers[i] = ProgressTracker(self.track, (px, py))

    def _lap_bookkeeping(self, events: list[dict]) -> None:
        total = self.track.total_length
        crossed = int(self.trackers[EGO].progress // total)
        if crossed > self.laps_crossed:
            now = self.t * self.cfg.env.dt_control
            if self.last_cross_time is not None:
                self.record.lap_times.append(now - self.last_cross_time)
                events.append(self._event("lap_completed"))
            self.last_cross_time = now
            self.laps_crossed = crossed

    def _event(self, kind: str, **extra) -> dict:
        e = {"kind": kind, "t": self.t,
             "s": float(self.trackers[EGO].progress % self.track.total_length)}
        e.update(extra)
        return e

    # -- snapshot for exact resume ------------------------------------------

    def get_state(self) -> dict:
        return {
            "S": self.S.copy(),
            "track_idx": self.track_idx,
            "start_idx": self.start_idx,
            "k_v": self.k_v,
            "t": self.t,
            "prev_action": self.prev_action.copy(),
            "attempt": copy.deepcopy(self.attempt),
            "done": self.done,
            "trackers": [(tr._last, tr.progress) for tr in self.trackers],
            "progress0": self.progress0,
            "laps_crossed": self.laps_crossed,
            "last_cross_time": self.last_cross_time,
            "max_steps": self.max_steps,
            "rng": self.rng.bit_generator.state,
            "record": copy.deepcopy(self.record),
        }

    def set_state(self, state: dict) -> None:
        self.track_idx = state["track_idx"]
        self.track = self.tracks[self.track_idx]
        self.line = self.lines[self.track_idx]
        self.wall_segs = self.walls[self.track_idx]
        self.start_idx = state["start_idx"]
        self.k_v = state["k_v"]
        self.S = state["S"].copy()
        self.t = state["t"]
        self.prev_action = state["prev_action"].copy()
        self.attempt = copy.deepcopy(state["attempt"])
        self.done = state["done"]
        self.trackers = []
        for i, (last, progress) in enumerate(state["trackers"]):
            tr = ProgressTracker(self.track, self.S[i, 0:2])
            tr._last = last
            tr.progress = progress
            self.trackers.append(tr)
        self.progress0 = state["progress0"]
        self.laps_crossed = state["laps_crossed"]
        self.last_cross_time = state["last_cross_time"]
        self.max_steps = state["max_steps"]
        self.rng.bit_generator.state = state["rng"]
        self.record = copy.deepcopy(state["record"])


def compute_reward(v_long: float, dt: float, action, prev_action,
                   d_lidar: float, overtake: bool, crash: bool,
                   proximity_linear: bool = False) -> tuple[float, dict]:
    """Per-step reward: forward progress minus action-change and proximity
    penalties, plus overtake bonus and crash penalty.

    The proximity term is -0.2 * d_L inside the 0.4 m band as defined;
    `proximity_linear` switches to the closeness-proportional variant
    -0.2 * (0.4 - d_L) instead.
    """
    action = np.asarray(action, dtype=np.float64)
    prev_action = np.asarray(prev_action, dtype=np.float64)
    progress = R_PROGRESS * v_long * dt
    action_pen = -R_ACTION * float(np.abs(action - prev_action).sum())
    if d_lidar < PROXIMITY_BAND:
        prox = -R_PROXIMITY * ((PROXIMITY_BAND - d_lidar) if proximity_linear
                               else d_lidar)
    else:
        prox = 0.0
    bonus = R_OVERTAKE if overtake else 0.0
    crash_pen = -R_CRASH if crash else 0.0
    components = {"progress": progress, "action": action_pen,
                  "proximity": prox, "overtake": bonus, "crash": crash_pen}
    return float(sum(components.values())), components
