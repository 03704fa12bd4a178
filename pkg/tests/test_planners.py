import numpy as np
import pytest

from conftest import drive_solo

from resrace.config import ApfConfig, LidarConfig, RunConfig, VehicleConfig
from resrace.lidar import Scan, beam_angles, scan as lidar_scan
from resrace.planners import make_planner
from resrace.planners.apf import (
    ApfPlanner,
    GoalPoint,
    PlannerError,
    apf_gradient,
    body_offsets,
    denormalize_action,
    find_goal_point,
    normalize_action,
    plan_path,
    potential,
    pure_pursuit,
    smooth_and_target,
    target_velocity,
)
from resrace.planners.disparity import extend_disparities

CFG = ApfConfig()
VEH = VehicleConfig()
OFFSETS = body_offsets(VEH.length, VEH.width)
RUN = RunConfig()


# --- goal selection ---------------------------------------------------------

def test_goal_from_single_disparity():
    goal = find_goal_point([2.0, 5.0], [0.0, 0.004], eps_d=1.0)
    assert goal.range == 5.0
    assert goal.bearing == pytest.approx(0.002)


def test_goal_picks_deepest_candidate():
    ranges = [2.0, 5.0, 5.0, 2.0, 7.0, 7.0]
    bearings = [-0.3, -0.28, -0.26, 0.1, 0.12, 0.14]
    goal = find_goal_point(ranges, bearings, eps_d=1.0)
    assert goal.range == 7.0
    assert goal.bearing == pytest.approx(0.11)


def test_goal_fallback_deepest_beam():
    bearings = np.linspace(-1.0, 1.0, 21)
    ranges = 4.0 + 0.3 * np.sin(bearings * 3)  # max jump < eps_d
    goal = find_goal_point(ranges, bearings, eps_d=1.0)
    k = np.argmax(ranges)
    assert goal.range == ranges[k]
    assert goal.bearing == bearings[k]


def test_goal_tie_breaks_to_smaller_bearing():
    goal = find_goal_point([7.0, 2.0, 2.0, 7.0], [-0.9, -0.88, 0.3, 0.32],
                           eps_d=1.0)
    assert goal.bearing == pytest.approx(0.31)


def test_goal_exact_mirror_tie_resolves_straight():
    goal = find_goal_point([7.0, 2.0, 2.0, 7.0], [-0.32, -0.3, 0.3, 0.32],
                           eps_d=1.0)
    assert goal.bearing == 0.0
    assert goal.range == 7.0


def test_goal_empty_scan_errors():
    with pytest.raises(PlannerError):
        find_goal_point([], [], 1.0)


# --- potential field --------------------------------------------------------

def test_gradient_attractive_only():
    obstacles = np.array([[100.0, 100.0]])  # beyond rho_0: no repulsion
    goal = GoalPoint(5.0, 0.3)
    g = apf_gradient((0.0, 0.0), OFFSETS, obstacles, goal, CFG)
    assert np.hypot(*g) == pytest.approx(CFG.k_att / 2, rel=1e-12)
    # gradient points away from the goal; descent moves toward it
    assert np.dot(g, goal.xy) < 0


def test_gradient_single_obstacle_magnitude():
    # one body point (vehicle shrunk to a point) at rho = 2 from the obstacle
    offsets = np.zeros((1, 2))
    obstacles = np.array([[2.0, 0.0]])
    goal = GoalPoint(100.0, np.pi / 2)  # far off to the side
    g = apf_gradient((0.0, 0.0), offsets, obstacles, goal, CFG)
    g_att = apf_gradient((0.0, 0.0), offsets, np.array([[90.0, 0.0]]), goal, CFG)
    rep = g - g_att
    assert np.hypot(*rep) == pytest.approx(0.5 * CFG.k_rep / 2.0 ** 2, rel=1e-9)
    # U grows toward the obstacle at +x, so descent (-grad) pushes away
    assert rep[0] > 0


def test_repulsion_vanishes_beyond_cutoff():
    offsets = np.zeros((1, 2))
    goal = GoalPoint(50.0, 0.0)
    just_in = apf_gradient((0, 0), offsets, np.array([[0.0, CFG.rho_0 - 1e-6]]),
                           goal, CFG)
    just_out = apf_gradient((0, 0), offsets, np.array([[0.0, CFG.rho_0 + 1e-6]]),
                            goal, CFG)
    att = apf_gradient((0, 0), offsets, np.array([[40.0, 0.0]]), goal, CFG)
    assert np.array_equal(just_out, att)
    assert not np.array_equal(just_in, att)


def _stable_scene(rng):
    """Random scene where no body point sits near a nearest-obstacle tie,
    the cutoff shell, or the goal (so U is differentiable at pos)."""
    while True:
        pos = rng.uniform(-1, 1, 2)
        obstacles = rng.uniform(-6, 6, (rng.integers(5, 30), 2))
        goal = GoalPoint(rng.uniform(2, 20), rng.uniform(-2, 2))
        if np.hypot(*(pos - goal.xy)) < 0.2:
            continue
        ok = True
        for off in OFFSETS:
            d = np.sort(np.hypot(*(pos + off - obstacles).T))
            if d[0] < 0.05 or abs(d[0] - CFG.rho_0) < 1e-3:
                ok = False
                break
            if len(d) > 1 and d[1] - d[0] < 1e-3:
                ok = False
                break
        if ok:
            return pos, obstacles, goal


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(12)
    h = 1e-6
    for _ in range(100):
        pos, obstacles, goal = _stable_scene(rng)
        g = apf_gradient(pos, OFFSETS, obstacles, goal, CFG)
        fd = np.array([
            (potential(pos + [h, 0], OFFSETS, obstacles, goal, CFG)
             - potential(pos - [h, 0], OFFSETS, obstacles, goal, CFG)) / (2 * h),
            (potential(pos + [0, h], OFFSETS, obstacles, goal, CFG)
             - potential(pos - [0, h], OFFSETS, obstacles, goal, CFG)) / (2 * h),
        ])
        assert np.linalg.norm(g - fd) / np.linalg.norm(g) < 1e-5


def test_gradient_requires_obstacles():
    with pytest.raises(PlannerError):
        apf_gradient((0, 0), OFFSETS, np.zeros((0, 2)), GoalPoint(1, 0), CFG)


# --- path planning ----------------------------------------------------------

def test_plan_path_step_length_exact():
    rng = np.random.default_rng(5)
    obstacles = rng.uniform(-4, 4, (40, 2))
    goal = GoalPoint(10.0, 0.2)
    path = plan_path((0, 0), obstacles, goal, CFG, OFFSETS)
    steps = np.hypot(*np.diff(path, axis=0).T)
    assert np.allclose(steps, CFG.step_eps, rtol=0, atol=1e-12)


def test_plan_path_point_count():
    obstacles = np.array([[50.0, 50.0]])
    path = plan_path((0, 0), obstacles, GoalPoint(10.0, 0.0), CFG, OFFSETS)
    assert len(path) == CFG.n_p + 1
    assert np.array_equal(path[0], [0.0, 0.0])


def test_plan_path_straight_without_obstacles():
    obstacles = np.array([[100.0, 100.0]])
    goal = GoalPoint(10.0, 0.5)
    path = plan_path((0, 0), obstacles, goal, CFG, OFFSETS)
    d = goal.xy / goal.range
    along = path @ d
    lateral = path @ np.array([-d[1], d[0]])
    assert np.allclose(lateral, 0.0, atol=1e-12)
    assert np.allclose(along, CFG.step_eps * np.arange(len(path)), atol=1e-12)


def test_plan_path_descends_potential_and_keeps_clearance():
    # corridor walls plus an opponent box ahead; small steps descend U
    rng = np.random.default_rng(8)
    ys = np.linspace(-4, 20, 120)
    walls = np.stack([np.full(120, -2.0), ys], 1), np.stack([np.full(120, 2.0), ys], 1)
    box = np.array([[x, y] for x in np.linspace(-0.3, 0.3, 7)
                    for y in (4.0, 4.6)] +
                   [[x, y] for x in (-0.3, 0.3)
                    for y in np.linspace(4.0, 4.6, 5)])
    obstacles = np.vstack([*walls, box + rng.normal(0, 0.005, box.shape)])
    goal = GoalPoint(15.0, np.deg2rad(80.0))
    cfg = ApfConfig(step_eps=0.01, n_p=150)
    path = plan_path((0, 0), obstacles, goal, cfg, OFFSETS)
    u = [potential(p, OFFSETS, obstacles, goal, cfg) for p in path]
    assert all(b <= a + 1e-9 for a, b in zip(u, u[1:]))
    clearance = min(np.hypot(*(p - obstacles).T).min() for p in path)
    assert clearance > 0


# --- smoothing and control --------------------------------------------------

def test_smooth_straight_path():
    path = np.stack([np.linspace(0, 2, 21), np.zeros(21)], 1)
    tp = smooth_and_target(path, CFG)
    assert np.allclose(tp, [CFG.lookahead_target, 0.0], atol=1e-9)


def test_smooth_reduces_zigzag():
    x = np.linspace(0, 2, 21)
    y = 0.05 * (-1.0) ** np.arange(21)
    tp = smooth_and_target(np.stack([x, y], 1), CFG)
    assert abs(tp[1]) < 0.05


def test_smooth_short_path_returns_last_point():
    path = np.stack([np.linspace(0, 0.5, 6), np.zeros(6)], 1)
    tp = smooth_and_target(path, CFG)
    assert np.array_equal(tp, path[-1])


def test_pure_pursuit_straight():
    assert pure_pursuit((1.0, 0.0), VEH.wheelbase, VEH.steer_max) == 0.0


def test_pure_pursuit_geometry():
    expect = np.arctan(VEH.wheelbase * 2 * 0.1 / 1.01)
    got = pure_pursuit((1.0, 0.1), VEH.wheelbase, VEH.steer_max)
    assert got == pytest.approx(expect, rel=1e-12)
    assert got == pytest.approx(0.0653, abs=1e-4)


def test_pure_pursuit_antisymmetric():
    a = pure_pursuit((1.0, 0.1), VEH.wheelbase, VEH.steer_max)
    b = pure_pursuit((1.0, -0.1), VEH.wheelbase, VEH.steer_max)
    assert a == -b


def test_pure_pursuit_saturates_behind():
    assert pure_pursuit((-0.5, 0.2), VEH.wheelbase, VEH.steer_max) == VEH.steer_max
    assert pure_pursuit((-0.5, -0.2), VEH.wheelbase, VEH.steer_max) == -VEH.steer_max


def test_target_velocity_caps():
    assert target_velocity(0.0, 20.0, CFG, VEH) == 8.0
    assert target_velocity(0.2, 100.0, CFG, VEH) == pytest.approx(3.574, abs=1e-3)
    assert target_velocity(0.0, 2.5, CFG, VEH) == pytest.approx(2.0)
    assert target_velocity(0.0, 0.1, CFG, VEH) == pytest.approx(CFG.v_floor)


def test_action_normalization_roundtrip():
    a = normalize_action(6.0, -0.2, VEH)
    v, s = denormalize_action(a, VEH)
    assert v == pytest.approx(6.0)
    assert s == pytest.approx(-0.2)
    assert np.array_equal(normalize_action(8.0, 0.41, VEH), [1.0, 1.0])


# --- full pipeline ----------------------------------------------------------

def corridor_scan(lidar_cfg=None, width=2.0, ahead=30.0):
    cfg = lidar_cfg or LidarConfig()
    walls = np.array([
        [-4.0, -width, ahead, -width],
        [-4.0, width, ahead, width],
        [ahead, -width, ahead, width],
        [-4.0, -width, -4.0, width],
    ])
    return lidar_scan(walls, [], (0.0, 0.0, 0.0), 0.0, None, cfg)


@pytest.fixture(scope="module")
def apf_planner():
    return ApfPlanner(VEH, LidarConfig(), RUN)


def test_apf_policy_straight_corridor(apf_planner):
    action, info = apf_planner.act_with_info(corridor_scan())
    v, steer = denormalize_action(action, VEH)
    assert abs(steer) < 0.02
    assert v == pytest.approx(VEH.v_max)


def test_apf_policy_symmetric_scene_steer_is_exactly_zero(apf_planner):
    action = apf_planner.act(corridor_scan())
    assert abs(denormalize_action(action, VEH)[1]) < 1e-6


def _drive_corridor_past_box(planner, box):
    """Simulate the approach to a static box; returns ego y when passing it."""
    from resrace.vehicle import (SLIP, STEER, V, X, Y, YAW,
                                 low_level_control_arrays,
                                 step_dynamics_arrays)
    width, ahead = 2.0, 40.0
    walls = np.array([
        [-4.0, -width, ahead, -width],
        [-4.0, width, ahead, width],
        [ahead, -width, ahead, width],
        [-4.0, -width, -4.0, width],
    ])
    S = np.array([[0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]])
    crossing_y = None
    for _ in range(600):
        s = lidar_scan(walls, [box], (S[0, X], S[0, Y], S[0, YAW]), 0.0,
                       None, LidarConfig())
        tv, ts = denormalize_action(planner.act(s), VEH)
        for _ in range(2):
            accel, sv = low_level_control_arrays(
                S[:, V] * np.cos(S[:, SLIP]), S[:, STEER],
                np.array([tv]), np.array([ts]), VEH)
            S = step_dynamics_arrays(S, accel, sv, VEH, VEH.dt_physics)
        from resrace.geometry import rects_overlap
        from resrace.vehicle import footprint_corners
        ego = footprint_corners(S[0, X], S[0, Y], S[0, YAW], VEH.length,
                                VEH.width)
        assert not rects_overlap(ego, box), "planner hit the box"
        if crossing_y is None and S[0, X] >= 4.0:
            crossing_y = S[0, Y]
        if S[0, X] > 7.0:
            break
    assert crossing_y is not None, "never reached the box"
    return crossing_y


def test_apf_policy_avoids_box(apf_planner):
    # box slightly left of the corridor center: ego must pass on the right
    box_left = np.array([[4.3, 0.8], [4.3, 0.1], [3.7, 0.1], [3.7, 0.8]])
    y_l = _drive_corridor_past_box(apf_planner, box_left)
    assert y_l < 0.0
    # mirrored scene: pass on the left
    y_r = _drive_corridor_past_box(apf_planner, box_left * np.array([1.0, -1.0]))
    assert y_r > 0.0
    assert y_l == pytest.approx(-y_r, abs=1e-9)


def test_apf_policy_mirror_symmetry(apf_planner):
    rng = np.random.default_rng(21)
    cfg = LidarConfig()
    for _ in range(10):
        ranges = rng.uniform(0.5, 25.0, cfg.n_beams)
        s = Scan(ranges, beam_angles(cfg.n_beams, cfg.fov_deg), cfg.max_range)
        mirrored = Scan(ranges[::-1].copy(), s.angles, cfg.max_range)
        v1, steer1 = denormalize_action(apf_planner.act(s), VEH)
        v2, steer2 = denormalize_action(apf_planner.act(mirrored), VEH)
        assert steer1 == pytest.approx(-steer2, abs=1e-6)
        assert v1 == pytest.approx(v2, abs=1e-9)


def test_apf_policy_deterministic(apf_planner):
    s = corridor_scan()
    assert np.array_equal(apf_planner.act(s), apf_planner.act(s))


def test_apf_policy_fallback_on_degenerate_scan(apf_planner):
    s = Scan(np.array([0.05]), np.zeros(1), 30.0)
    action = apf_planner.act(s)
    v, steer = denormalize_action(action, VEH)
    assert v == pytest.approx(0.5)
    assert steer == 0.0


def test_apf_solo_laps_oval(oval_track):
    planner = ApfPlanner(VEH, LidarConfig(), RUN)
    laps, contacts, _ = drive_solo(oval_track, planner, RUN, n_laps=10)
    assert contacts == 0
    assert laps == 10


def test_apf_solo_laps_scurve(scurve_track):
    planner = ApfPlanner(VEH, LidarConfig(), RUN)
    laps, contacts, _ = drive_solo(scurve_track, planner, RUN, n_laps=10)
    assert contacts == 0
    assert laps == 10


# --- disparity extender -----------------------------------------------------

def test_disparity_inflation_count():
    step = 0.01
    ranges = np.full(61, 10.0)
    ranges[:30] = 2.0  # one disparity between beams 29 and 30
    half_width = 0.3
    out = extend_disparities(ranges, step, half_width, threshold=1.0)
    n = int(np.ceil(half_width / (2.0 * step)))
    assert np.all(out[30:30 + n] == 2.0)
    assert np.all(out[30 + n:] == 10.0)
    assert np.all(out[:30] == 2.0)


def test_disparity_symmetric_corridor_straight():
    planner = make_planner("disparity", VEH, LidarConfig(), RUN)
    _, steer = denormalize_action(planner.act(corridor_scan()), VEH)
    assert abs(steer) < 1e-6


def test_disparity_solo_laps_oval(oval_track):
    planner = make_planner("disparity", VEH, LidarConfig(), RUN)
    laps, contacts, _ = drive_solo(oval_track, planner, RUN, n_laps=10)
    assert contacts == 0
    assert laps == 10


def test_make_planner_rejects_unknown():
    with pytest.raises(ValueError, match="unknown planner"):
        make_planner("nope", VEH, LidarConfig(), RUN)
