"""Configuration dataclasses, TOML loading, and run manifests.

Every tunable lives here with its default; a TOML file with one section per
module overrides defaults, and CLI flags override the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

G = 9.81  # m/s^2


@dataclass
class VehicleConfig:
    """Single-track model parameters (F1TENTH-class defaults)."""

    lf: float = 0.15875        # CoG to front axle [m]
    lr: float = 0.17125        # CoG to rear axle [m]
    mass: float = 3.74         # [kg]
    inertia_z: float = 0.04712  # yaw inertia [kg m^2]
    c_sf: float = 4.718        # front cornering stiffness [1/rad]
    c_sr: float = 5.4562       # rear cornering stiffness [1/rad]
    h_cg: float = 0.074        # CoG height [m]
    mu_f: float = 0.8          # tire friction coefficient
    steer_max: float = 0.41    # [rad]
    steer_rate_max: float = 3.2  # [rad/s]
    accel_max: float = 9.51    # [m/s^2]
    v_max: float = 8.0         # [m/s]
    v_kinematic: float = 0.5   # below this speed the kinematic model is used [m/s]
    length: float = 0.58       # footprint [m]
    width: float = 0.31        # footprint [m]
    k_v_ctrl: float = 5.0      # speed-tracking gain [1/s]
    k_steer_ctrl: float = 10.0  # steer-tracking gain [1/s]
    dt_physics: float = 0.01   # physics step, 100 Hz [s]

    @property
    def wheelbase(self) -> float:
        return self.lf + self.lr


@dataclass
class LidarConfig:
    n_beams: int = 1080
    fov_deg: float = 270.0
    max_range: float = 30.0
    range_min: float = 0.05
    noise_std: float = 0.01
    median_window: int = 5


@dataclass
class ApfConfig:
    """Base-planner hyperparameters."""

    k_att: float = 1000.0      # attractive coefficient
    k_rep: float = 50.0        # repulsive coefficient
    rho_0: float = 8.0         # repulsive cutoff distance [m]
    step_eps: float = 0.1      # gradient step size [m]
    n_p: int = 20              # gradient-descent iterations
    lookahead_spline: float = 1.2  # l_s [m]
    lookahead_target: float = 1.0  # l_t [m]
    eps_d: float = 1.0         # gap (disparity) threshold [m]
    eps_f: float = 0.1         # down-sample filter distance [m]
    d_f: float = -4.0          # rear cut: drop points with ego-frame x < d_f [m]
    k_goal_speed: float = 0.8  # v2 gain on goal distance [1/s]
    v_floor: float = 1.0       # v2 lower clamp [m/s]
    rho_min: float = 1e-3      # repulsive singularity guard [m]


@dataclass
class DisparityConfig:
    threshold: float = 1.0     # range jump that counts as a disparity [m]
    safety_margin: float = 1.3  # half-width inflation factor
    k_gap_speed: float = 0.35  # speed gain on gap depth [1/s]
    v_floor: float = 1.0


@dataclass
class FusionConfig:
    alpha: tuple[float, float] = (0.5, 0.5)
    log_sigma_init: float = -0.7
    mode: str = "truncated"    # "truncated" or "clipped"


@dataclass
class NetworkConfig:
    """Residual-network architecture: 1D-conv encoder plus policy/value heads."""

    conv_blocks: tuple[tuple[int, int, int], ...] = (
        (64, 6, 4), (128, 3, 2), (256, 3, 2), (256, 3, 2), (256, 3, 2),
    )
    projection: int = 64
    head_hidden: int = 256
    n_frames: int = 6          # stacked past frames (plus the current one)
    frame_skip: int = 2        # frames skipped between stacked ones
    obs_clip: float = 10.0


@dataclass
class PpoConfig:
    total_steps: int = 2_000_000
    n_envs: int = 16
    traj_length: int = 2048    # rollout horizon per environment
    gamma: float = 0.99
    gae_lambda: float = 0.95
    lr: float = 1e-4
    clip: float = 0.1
    batch_size: int = 512
    epochs: int = 7
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 1.0
    rpo_alpha: float = 0.05
    checkpoint_every: int = 10  # updates between checkpoints


@dataclass
class EnvConfig:
    n_opponents: int = 9
    k_v_train: tuple[float, ...] = (0.8, 0.75, 0.7)
    k_v_eval: float = 0.75
    max_laps: int = 2
    d_attempt: float = 10.0    # attempt opens when an opponent is this close ahead [m]
    respawn_ahead: float = 8.0  # passed opponents respawn this far ahead [m]
    overtake_margin: float = 1.0  # success once Δs > vehicle length + margin [m]
    n_start_positions: int = 30
    dt_control: float = 0.02   # control step, 50 Hz [s]
    proximity_linear: bool = False  # use -0.2*(0.4 - d_L) instead of the verbatim -0.2*d_L term
    max_episode_steps: int | None = None  # overrides the lap-based truncation


@dataclass
class TrackGenConfig:
    n_curves: int = 10
    width_min: float = 1.0     # half-width [m]
    width_max: float = 1.6
    length_scale: float = 220.0  # approximate lap length [m]
    point_spacing: float = 0.5   # centerline resampling step [m]
    max_retries: int = 50


@dataclass
class RunConfig:
    """Everything a train/eval/bench run needs; serialized into the manifest."""

    seed: int = 0
    tracks: tuple[str, ...] = ()     # track file paths; empty -> procedural
    n_proc_tracks: int = 2           # procedural tracks when no files given
    out_dir: str = "runs"
    vehicle: VehicleConfig = field(default_factory=VehicleConfig)
    lidar: LidarConfig = field(default_factory=LidarConfig)
    apf: ApfConfig = field(default_factory=ApfConfig)
    disparity: DisparityConfig = field(default_factory=DisparityConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    trackgen: TrackGenConfig = field(default_factory=TrackGenConfig)

    def apply_paper_scale(self) -> None:
        """Switch to the full-scale training setting."""
        self.ppo.n_envs = 256
        self.ppo.total_steps = 30_000_000
        self.n_proc_tracks = 8


_SECTIONS = {
    "vehicle": VehicleConfig,
    "lidar": LidarConfig,
    "apf": ApfConfig,
    "disparity": DisparityConfig,
    "fusion": FusionConfig,
    "network": NetworkConfig,
    "ppo": PpoConfig,
    "env": EnvConfig,
    "trackgen": TrackGenConfig,
}


class ConfigError(ValueError):
    pass


def _coerce(value, template):
    if isinstance(template, tuple):
        return tuple(_coerce(v, template[0] if template else v) for v in value)
    if isinstance(template, bool):
        return bool(value)
    if isinstance(template, float) and isinstance(value, int):
        return float(value)
    return value


def _apply_section(obj, table: dict, section: str) -> None:
    valid = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in table.items():
        if key not in valid:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        setattr(obj, key, _coerce(value, getattr(obj, key)))


def load_config(path: str | Path | None = None) -> RunConfig:
    """Build a RunConfig from defaults, overridden by a TOML file if given."""
    cfg = RunConfig()
    if path is None:
        return cfg
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    for key, value in data.items():
        if key in _SECTIONS:
            _apply_section(getattr(cfg, key), value, key)
        elif key == "tracks":
            cfg.tracks = tuple(str(p) for p in value)
        elif key in ("seed", "out_dir", "n_proc_tracks"):
            setattr(cfg, key, value)
        else:
            raise ConfigError(f"unknown top-level key '{key}'")
    return cfg


def config_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
