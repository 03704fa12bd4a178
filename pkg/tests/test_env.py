import dataclasses

import numpy as np
import pytest

from conftest import build_oval

from resrace.config import RunConfig
from resrace.envs import EpisodeRecord, RacingEnv, compute_reward, opponent_control
from resrace.lidar import LidarConfig
from resrace.metrics import aggregate_rows, compute_metrics
from resrace.planners.apf import ApfPlanner, normalize_action
from resrace.track import racing_line
from resrace.vehicle import SLIP, V, X, YAW


def make_env(n_opponents=9, seed=0, record=False, **env_overrides):
    cfg = RunConfig()
    cfg.env = dataclasses.replace(cfg.env, n_opponents=n_opponents,
                                  **env_overrides)
    rng = np.random.default_rng(seed)
    return RacingEnv([build_oval()], cfg, rng, record_trajectory=record), cfg


# --- reward -----------------------------------------------------------------

def test_reward_progress_only():
    r, comp = compute_reward(v_long=5.0, dt=0.02, action=[0, 0],
                             prev_action=[0, 0], d_lidar=2.0,
                             overtake=False, crash=False)
    assert r == pytest.approx(0.01, abs=1e-15)
    assert comp["progress"] == pytest.approx(0.01)


def test_reward_crash_component():
    _, comp = compute_reward(1.0, 0.02, [0, 0], [0, 0], 2.0, False, True)
    assert comp["crash"] == -5.0


def test_reward_proximity_band():
    _, comp = compute_reward(0.0, 0.02, [0, 0], [0, 0], 0.3, False, False)
    assert comp["proximity"] == pytest.approx(-0.06)
    _, comp = compute_reward(0.0, 0.02, [0, 0], [0, 0], 0.5, False, False)
    assert comp["proximity"] == 0.0


def test_reward_proximity_linear_variant():
    _, comp = compute_reward(0.0, 0.02, [0, 0], [0, 0], 0.3, False, False,
                             proximity_linear=True)
    assert comp["proximity"] == pytest.approx(-0.2 * 0.1)


def test_reward_action_change_penalty():
    _, comp = compute_reward(0.0, 0.02, [0.5, -0.5], [0.0, 0.0], 2.0,
                             False, False)
    assert comp["action"] == pytest.approx(-0.005 * 1.0)


def test_reward_overtake_bonus():
    _, comp = compute_reward(0.0, 0.02, [0, 0], [0, 0], 2.0, True, False)
    assert comp["overtake"] == 0.5


# --- opponents --------------------------------------------------------------

def test_opponent_target_speed_scaled_by_k_v():
    track = build_oval()
    line = racing_line(track)
    cfg = RunConfig()
    # pick an arc position on the straight where the profile is at 8.0
    s = track.arc_length[10]
    assert line.velocity_at(s) == pytest.approx(8.0)
    row = np.zeros(7)
    row[X] = track.centerline[10][0]
    row[1] = track.centerline[10][1]
    row[V] = 5.0
    target_v, _steer = opponent_control(row, s, line, 0.75, cfg.vehicle)
    assert target_v == pytest.approx(6.0)


def test_opponents_never_react_to_ego():
    # control is a function of own state and the line only (signature-level
    # guarantee); identical inputs give identical outputs
    track = build_oval()
    line = racing_line(track)
    cfg = RunConfig()
    row = np.array([3.0, 0.1, 0.0, 4.0, 0.05, 0.0, 0.0])
    a = opponent_control(row, 3.0, line, 0.75, cfg.vehicle)
    b = opponent_control(row.copy(), 3.0, line, 0.75, cfg.vehicle)
    assert a == b


# --- stepping ----------------------------------------------------------------

def test_step_advances_two_physics_substeps():
    env, cfg = make_env(n_opponents=0)
    env.reset(track_idx=0, start_idx=0, k_v=0.75)
    v0 = env.S[0, V]
    x0 = env.S[0, X]
    action = normalize_action(v0, 0.0, cfg.vehicle)
    out = env.step(action)
    assert env.S[0, X] - x0 == pytest.approx(v0 * 0.02, abs=1e-9)
    assert not out.done


def test_wall_overlap_ends_episode():
    env, cfg = make_env(n_opponents=0)
    env.reset(track_idx=0, start_idx=0, k_v=0.75)
    env.S[0, 1] = env.track.half_width[0]  # sit on the left wall
    out = env.step(np.zeros(2))
    assert out.done
    assert out.info["crash"]
    assert env.record.count("env_crash") == 1


def test_step_after_done_raises():
    env, _ = make_env(n_opponents=0)
    env.reset(track_idx=0, start_idx=0, k_v=0.75)
    env.S[0, 1] = env.track.half_width[0]
    env.step(np.zeros(2))
    with pytest.raises(RuntimeError):
        env.step(np.zeros(2))


def test_episode_deterministic_given_seed():
    rng = np.random.default_rng(3)
    actions = rng.uniform(-1, 1, (50, 2))
    traces = []
    for _ in range(2):
        env, _ = make_env(n_opponents=3, seed=11)
        env.reset(track_idx=0, start_idx=4, k_v=0.75)
        states = []
        for a in actions:
            out = env.step(a)
            states.append((env.S.copy(), out.reward, out.done))
            if out.done:
                break
        traces.append(states)
    for (sa, ra, da), (sb, rb, db) in zip(*traces):
        assert np.array_equal(sa, sb)
        assert ra == rb and da == db


def test_observation_shapes():
    env, cfg = make_env(n_opponents=2)
    out = env.reset(track_idx=0, start_idx=0, k_v=0.75)
    assert out.lidar_obs.shape == (cfg.lidar.n_beams,)
    assert out.proprio.shape == (8,)
    assert out.scan.ranges.shape == (cfg.lidar.n_beams,)
    assert np.all(np.isfinite(out.lidar_obs))


def test_opponent_occludes_in_observation():
    env, _ = make_env(n_opponents=9)
    out = env.reset(track_idx=0, start_idx=0, k_v=0.75)
    env_free, _ = make_env(n_opponents=0)
    out_free = env_free.reset(track_idx=0, start_idx=0, k_v=0.75)
    # same pose, same rng stream: opponent bodies can only shorten beams
    assert np.all(out.scan.ranges <= out_free.scan.ranges + 0.1)


# --- overtaking --------------------------------------------------------------

def drive_until(env, planner, cfg, predicate, max_steps=6000):
    out = env.reset(track_idx=0, start_idx=0, k_v=env.cfg.env.k_v_eval)
    events = []
    for _ in range(max_steps):
        action = planner.act(out.scan)
        out = env.step(action)
        events.extend(out.info["events"])
        if predicate(out, events) or out.done:
            return out, events
    return out, events


def test_clean_pass_records_success_and_respawns():
    env, cfg = make_env(n_opponents=1, seed=5, k_v_train=(0.3,))
    planner = ApfPlanner(cfg.vehicle, cfg.lidar, cfg)
    env.cfg.env = dataclasses.replace(env.cfg.env, k_v_eval=0.3)
    out, events = drive_until(
        env, planner, cfg,
        lambda o, ev: any(e["kind"] == "overtake_success" for e in ev))
    kinds = [e["kind"] for e in events]
    assert "attempt_opened" in kinds
    assert "overtake_success" in kinds
    assert env.record.count("overtake_success") >= 1
    # the passed opponent respawned ahead of the ego
    total = env.track.total_length
    gap = (env.trackers[1].progress - env.trackers[0].progress) % total
    assert 6.0 < gap < 16.0


def test_crash_during_attempt_is_overtake_crash():
    env, cfg = make_env(n_opponents=1, seed=5)
    env.reset(track_idx=0, start_idx=0, k_v=0.75)
    total = env.track.total_length
    # put the opponent just ahead to open an attempt, then force a collision
    s_ego = env.trackers[0].progress % total
    px, py = env.line.position_at((s_ego + 5.0) % total)
    env.S[1, 0:2] = (px, py)
    env.trackers[1].update((px, py))
    out = env.step(normalize_action(4.0, 0.0, cfg.vehicle))
    assert any(e["kind"] == "attempt_opened" for e in out.info["events"])
    env.S[1, 0:2] = env.S[0, 0:2]  # teleport opponent onto the ego
    out = env.step(np.zeros(2))
    assert out.done
    assert env.record.count("overtake_crash") == 1
    assert env.record.count("env_crash") == 0


def test_attempt_ledger_balances():
    env, cfg = make_env(n_opponents=3, seed=9, k_v_train=(0.5,))
    planner = ApfPlanner(cfg.vehicle, cfg.lidar, cfg)
    env.cfg.env = dataclasses.replace(env.cfg.env, k_v_eval=0.5)
    _out, events = drive_until(env, planner, cfg, lambda o, ev: False,
                               max_steps=4000)
    opened = sum(1 for e in events if e["kind"] == "attempt_opened")
    closed = sum(1 for e in events if e["kind"] in
                 ("overtake_success", "overtake_crash", "attempt_lapsed"))
    assert opened == closed


def test_lap_time_recorded_after_full_lap():
    env, cfg = make_env(n_opponents=0, seed=1)
    planner = ApfPlanner(cfg.vehicle, cfg.lidar, cfg)
    out, _ = drive_until(env, planner, cfg, lambda o, ev: False,
                         max_steps=8000)
    assert out.done
    assert out.info["truncated"]
    assert len(env.record.lap_times) >= 1
    lap = env.record.lap_times[0]
    assert 10.0 < lap < 30.0  # ~88 m lap at racing speed


def test_trajectory_recording():
    env, cfg = make_env(n_opponents=2, record=True)
    env.reset(track_idx=0, start_idx=0, k_v=0.75)
    env.step(np.zeros(2))
    env.step(np.zeros(2))
    assert len(env.record.trajectory) == 3  # reset frame plus two steps
    frame = env.record.trajectory[-1]
    assert len(frame["poses"]) == 3
    assert len(frame["action"]) == 2


def test_state_snapshot_roundtrip():
    env, cfg = make_env(n_opponents=3, seed=13)
    env.reset(track_idx=0, start_idx=2, k_v=0.75)
    rng = np.random.default_rng(0)
    actions = rng.uniform(-1, 1, (10, 2))
    for a in actions[:5]:
        env.step(a)
    snap = env.get_state()
    after_a = [env.step(a) for a in actions[5:]]
    env.set_state(snap)
    after_b = [env.step(a) for a in actions[5:]]
    for oa, ob in zip(after_a, after_b):
        assert np.array_equal(oa.scan.ranges, ob.scan.ranges)
        assert oa.reward == ob.reward
        assert np.array_equal(oa.proprio, ob.proprio)


# --- metrics -----------------------------------------------------------------

def rec(laps=(), succ=0, ot_crash=0, env_crash=0, dist=1000.0):
    r = EpisodeRecord(track="t", k_v=0.75, start_idx=0)
    r.lap_times = list(laps)
    r.distance_m = dist
    r.events = ([{"kind": "overtake_success"}] * succ
                + [{"kind": "overtake_crash"}] * ot_crash
                + [{"kind": "env_crash"}] * env_crash)
    return r


def test_metrics_median_lap_time():
    m = compute_metrics([rec(laps=(50.0,)), rec(laps=(52.0,)),
                         rec(laps=(60.0,))])
    assert m.lap_time_s == 52.0


def test_metrics_crash_rate():
    m = compute_metrics([rec(succ=300), rec(ot_crash=1)])
    assert m.overtake_crash_pct == pytest.approx(100.0 / 301.0)
    assert m.overtake_crash_pct == pytest.approx(0.33, abs=0.01)


def test_metrics_scripted_trace():
    m = compute_metrics([rec(succ=3, ot_crash=1)])
    assert m.overtake_crash_pct == pytest.approx(25.0)


def test_metrics_env_crash_rate():
    m = compute_metrics([rec(env_crash=2, dist=10_000.0)])
    assert m.env_crash_per_km == pytest.approx(0.2)


def test_metrics_absent_when_no_attempts():
    m = compute_metrics([rec(laps=(50.0,))])
    assert m.overtake_crash_pct is None


def test_metrics_aggregate_means_and_pools():
    per_track = {
        "a": compute_metrics([rec(laps=(50.0,), succ=10, dist=2000.0)]),
        "b": compute_metrics([rec(laps=(60.0,), ot_crash=10, dist=2000.0)]),
    }
    agg = aggregate_rows(per_track)
    assert agg.lap_time_s == pytest.approx(55.0)
    assert agg.overtake_crash_pct == pytest.approx(50.0)
    assert agg.distance_km == pytest.approx(4.0)
