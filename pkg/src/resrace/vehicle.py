"""Single-track vehicle dynamics with tire slip and a low-level controller.

The dynamic model follows the standard single-track formulation with linear
tire forces; below `v_kinematic` it switches to a kinematic bicycle to avoid
the low-speed singularity.  Both branches advance position with the same
expression, so the position update is continuous across the switch.

States are plain arrays internally (column layout in `COLS`) so that any
number of vehicles can be stepped in one vectorized call; the dataclasses
are the value-type boundary for callers and tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import G, VehicleConfig

# internal ODE state columns
COLS = ("x", "y", "steer", "v", "yaw", "yaw_rate", "slip")
X, Y, STEER, V, YAW, YAW_RATE, SLIP = range(7)

_SLIP_GUARD = 1.0  # |slip| clamp [rad]; far outside any sane driving regime


class InvalidStateError(ValueError):
    """Raised when a vehicle state or control contains non-finite values."""


@dataclass
class VehicleState:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    v_long: float = 0.0
    v_lat: float = 0.0
    yaw_rate: float = 0.0
    slip: float = 0.0
    steer: float = 0.0
    a_long: float = 0.0  # last applied longitudinal acceleration


@dataclass
class Control:
    target_v: float = 0.0
    target_steer: float = 0.0


def state_to_array(s: VehicleState) -> np.ndarray:
    v = float(np.hypot(s.v_long, s.v_lat))
    slip = float(np.arctan2(s.v_lat, s.v_long)) if v > 0 else s.slip
    return np.array([s.x, s.y, s.steer, v, s.yaw, s.yaw_rate, slip], dtype=np.float64)


def array_to_state(a: np.ndarray, a_long: float = 0.0) -> VehicleState:
    v, slip = a[V], a[SLIP]
    return VehicleState(
        x=float(a[X]), y=float(a[Y]), yaw=float(a[YAW]),
        v_long=float(v * np.cos(slip)), v_lat=float(v * np.sin(slip)),
        yaw_rate=float(a[YAW_RATE]), slip=float(slip), steer=float(a[STEER]),
        a_long=float(a_long),
    )


def friction_speed_limit(mu_f: float, wheelbase: float, steer: float,
                         v_max: float = 8.0, g: float = G) -> float:
    """Max speed the tires hold for a given steering angle, capped at v_max."""
    if abs(steer) < 1e-4:
        return v_max
    return min(v_max, float(np.sqrt(mu_f * wheelbase * g / np.tan(abs(steer)))))


def low_level_control_arrays(v, steer, target_v, target_steer, cfg: VehicleConfig):
    """Proportional speed/steer tracking with saturation; vectorized."""
    target_v = np.maximum(target_v, 0.0)  # no reverse gear
    accel = np.clip(cfg.k_v_ctrl * (target_v - v), -cfg.accel_max, cfg.accel_max)
    sv = np.clip(cfg.k_steer_ctrl * (target_steer - steer),
                 -cfg.steer_rate_max, cfg.steer_rate_max)
    return accel, sv


def low_level_control(state: VehicleState, control: Control,
                      cfg: VehicleConfig) -> tuple[float, float]:
    accel, sv = low_level_control_arrays(
        np.float64(state.v_long), np.float64(state.steer),
        np.float64(control.target_v), np.float64(control.target_steer), cfg)
    return float(accel), float(sv)


def _constrained_inputs(S, accel, sv, cfg: VehicleConfig):
    """Zero out inputs that would push steer/speed past their bounds."""
    delta, v = S[:, STEER], S[:, V]
    sv = np.where((delta <= -cfg.steer_max) & (sv < 0), 0.0, sv)
    sv = np.where((delta >= cfg.steer_max) & (sv > 0), 0.0, sv)
    accel = np.where((v <= 0.0) & (accel < 0), 0.0, accel)
    accel = np.where((v >= cfg.v_max) & (accel > 0), 0.0, accel)
    return accel, sv


def _rhs(S: np.ndarray, accel, sv, cfg: VehicleConfig) -> np.ndarray:
    """Time derivative of the state array (N, 7)."""
    a, sv = _constrained_inputs(S, accel, sv, cfg)
    delta, v, psi, psid, beta = (S[:, STEER], S[:, V], S[:, YAW],
                                 S[:, YAW_RATE], S[:, SLIP])
    lf, lr, h, m, iz = cfg.lf, cfg.lr, cfg.h_cg, cfg.mass, cfg.inertia_z
    csf, csr, mu = cfg.c_sf, cfg.c_sr, cfg.mu_f
    lwb = lf + lr

    out = np.empty_like(S)
    out[:, X] = v * np.cos(psi + beta)
    out[:, Y] = v * np.sin(psi + beta)
    out[:, STEER] = sv
    out[:, V] = a

    kin = v < cfg.v_kinematic
    v_dyn = np.where(kin, cfg.v_kinematic, v)  # keep 1/v finite off-branch

    # kinematic bicycle: yaw follows geometry, slip frozen
    tan_d = np.tan(delta)
    psid_kin = v * np.cos(beta) * tan_d / lwb
    psidd_kin = np.cos(beta) * (a * tan_d + v * sv / np.cos(delta) ** 2) / lwb

    # dynamic single-track with linear tire forces
    ff = csf * (G * lr - a * h)   # front cornering stiffness times axle load
    fr = csr * (G * lf + a * h)   # rear cornering stiffness times axle load
    psidd_dyn = (-mu * m / (v_dyn * iz * lwb) * (lf ** 2 * ff + lr ** 2 * fr) * psid
                 + mu * m / (iz * lwb) * (lr * fr - lf * ff) * beta
                 + mu * m / (iz * lwb) * lf * ff * delta)
    betad_dyn = ((mu / (v_dyn ** 2 * lwb) * (fr * lr - ff * lf) - 1.0) * psid
                 - mu / (v_dyn * lwb) * (fr + ff) * beta
                 + mu / (v_dyn * lwb) * ff * delta)

    out[:, YAW] = np.where(kin, psid_kin, psid)
    out[:, YAW_RATE] = np.where(kin, psidd_kin, psidd_dyn)
    out[:, SLIP] = np.where(kin, 0.0, betad_dyn)
    return out


def step_dynamics_arrays(S: np.ndarray, accel, sv, cfg: VehicleConfig,
                         dt: float) -> np.ndarray:
    """One RK4 physics step for all rows of S; returns the new state array."""
    k1 = _rhs(S, accel, sv, cfg)
    k2 = _rhs(S + 0.5 * dt * k1, accel, sv, cfg)
    k3 = _rhs(S + 0.5 * dt * k2, accel, sv, cfg)
    k4 = _rhs(S + dt * k3, accel, sv, cfg)
    out = S + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    out[:, STEER] = np.clip(out[:, STEER], -cfg.steer_max, cfg.steer_max)
    out[:, V] = np.clip(out[:, V], 0.0, cfg.v_max)
    out[:, SLIP] = np.clip(out[:, SLIP], -_SLIP_GUARD, _SLIP_GUARD)
    # sync the frozen kinematic slip to the steering geometry once stopped
    rest = out[:, V] < 1e-12
    out[:, SLIP] = np.where(rest, 0.0, out[:, SLIP])
    return out


def step_dynamics(state: VehicleState, control: Control, cfg: VehicleConfig,
                  dt: float) -> VehicleState:
    """Advance one vehicle by dt. Raises InvalidStateError on non-finite input."""
    S = state_to_array(state)[None, :]
    ctrl = np.array([control.target_v, control.target_steer])
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(ctrl))):
        raise InvalidStateError("non-finite vehicle state or control")
    accel, sv = low_level_control_arrays(
        S[:, V] * np.cos(S[:, SLIP]), S[:, STEER],
        np.array([control.target_v]), np.array([control.target_steer]), cfg)
    out = step_dynamics_arrays(S, accel, sv, cfg, dt)
    applied, _ = _constrained_inputs(S, accel, sv, cfg)
    return array_to_state(out[0], a_long=float(applied[0]))


def footprint_corners(x, y, yaw, length: float, width: float) -> np.ndarray:
    """Rectangle corners (4, 2) of a vehicle footprint centered on (x, y)."""
    c, s = np.cos(yaw), np.sin(yaw)
    hl, hw = 0.5 * length, 0.5 * width
    local = np.array([[hl, hw], [hl, -hw], [-hl, -hw], [-hl, hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])
