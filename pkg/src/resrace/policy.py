"""Residual network and observation plumbing.

The LiDAR history (stacked frames as channels) runs through a 1D-conv
encoder and a linear projection; the embedding is concatenated with the
flattened proprioceptive history and fed to separate policy and value heads.
The residual mean is tanh-squashed; log-sigma is a free parameter vector.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import FusionConfig, NetworkConfig

PROPRIO_DIM = 8   # v_long, v_lat, a_long, yaw_rate, slip, steer, prev action (2)
ACTION_DIM = 2

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Observation:
    lidar: np.ndarray    # (n_frames + 1, n_beams) float32
    proprio: np.ndarray  # (n_frames + 1, PROPRIO_DIM) float32


def conv_output_lengths(cfg: NetworkConfig, n_beams: int = 1080) -> list[int]:
    """Signal lengths after each conv block (no padding, floor division)."""
    lengths = []
    length = n_beams
    for _filters, kernel, stride in cfg.conv_blocks:
        length = (length - kernel) // stride + 1
        lengths.append(length)
    return lengths


def _ortho(layer: nn.Module, gain: float) -> nn.Module:
    nn.init.orthogonal_(layer.weight, gain)
    nn.init.zeros_(layer.bias)
    return layer


class ResidualPolicyNet(nn.Module):
    """Policy/value network over stacked LiDAR and proprioceptive frames."""

    def __init__(self, cfg: NetworkConfig, fusion: FusionConfig | None = None,
                 n_beams: int = 1080):
        super().__init__()
        self.cfg = cfg
        self.n_beams = n_beams
        n_channels = cfg.n_frames + 1
        fusion = fusion or FusionConfig()

        blocks = []
        in_ch = n_channels
        for filters, kernel, stride in cfg.conv_blocks:
            blocks.append(_ortho(nn.Conv1d(in_ch, filters, kernel, stride),
                                 np.sqrt(2)))
            blocks.append(nn.ReLU())
            in_ch = filters
        self.encoder = nn.Sequential(*blocks)
        flat = cfg.conv_blocks[-1][0] * conv_output_lengths(cfg, n_beams)[-1]
        self.projection = _ortho(nn.Linear(flat, cfg.projection), np.sqrt(2))

        joint = cfg.projection + n_channels * PROPRIO_DIM
        self.policy_head = nn.Sequential(
            _ortho(nn.Linear(joint, cfg.head_hidden), np.sqrt(2)),
            nn.ReLU(),
            _ortho(nn.Linear(cfg.head_hidden, ACTION_DIM), 0.01),
        )
        self.value_head = nn.Sequential(
            _ortho(nn.Linear(joint, cfg.head_hidden), np.sqrt(2)),
            nn.ReLU(),
            _ortho(nn.Linear(cfg.head_hidden, 1), 1.0),
        )
        self.log_sigma = nn.Parameter(
            torch.full((ACTION_DIM,), fusion.log_sigma_init))

    def forward(self, lidar: torch.Tensor, proprio: torch.Tensor):
        """lidar (B, C, n_beams), proprio (B, C, 8) or (B, C*8).

        Returns (mu_r in (-1, 1), log_sigma, value).
        """
        b = lidar.shape[0]
        h = self.encoder(lidar)
        h = self.projection(h.flatten(1))
        joint = torch.cat([h, proprio.reshape(b, -1)], dim=1)
        mu_r = torch.tanh(self.policy_head(joint))
        value = self.value_head(joint).squeeze(-1)
        return mu_r, self.log_sigma, value


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def frame_indices(t: int, n_f: int, n_s: int, episode_start: int = 0) -> np.ndarray:
    """History indices {t - k(1+n_s)} for k = n_f..0, clamped at episode start."""
    offsets = (np.arange(n_f, -1, -1)) * (1 + n_s)
    return np.maximum(t - offsets, episode_start)


class FrameHistory:
    """Per-environment ring of raw observation frames with cold-start padding."""

    def __init__(self, n_f: int, n_s: int, n_beams: int):
        self.n_f, self.n_s = n_f, n_s
        self.span = n_f * (1 + n_s) + 1
        self.lidar = np.zeros((self.span, n_beams), dtype=np.float32)
        self.proprio = np.zeros((self.span, PROPRIO_DIM), dtype=np.float32)
        self._t = 0

    def reset(self, lidar: np.ndarray, proprio: np.ndarray) -> None:
        self.lidar[:] = lidar.astype(np.float32)
        self.proprio[:] = proprio.astype(np.float32)
        self._t = 0

    def push(self, lidar: np.ndarray, proprio: np.ndarray) -> None:
        self._t += 1
        slot = self._t % self.span
        self.lidar[slot] = lidar
        self.proprio[slot] = proprio

    def stacked(self) -> Observation:
        idx = frame_indices(self._t, self.n_f, self.n_s,
                            episode_start=max(self._t - self.span + 1, 0))
        slots = idx % self.span
        return Observation(lidar=self.lidar[slots].copy(),
                           proprio=self.proprio[slots].copy())


class RunningMeanStd:
    """Streaming mean/variance with parallel (batched) Welford merges."""

    def __init__(self, shape: tuple):
        self.mean = np.zeros(shape, dtype=np.float64)
        self.var = np.ones(shape, dtype=np.float64)
        self.count = 0.0

    def update(self, batch: np.ndarray) -> None:
        batch = batch.reshape(-1, *self.mean.shape)
        n = batch.shape[0]
        batch_mean = batch.mean(axis=0)
        batch_var = batch.var(axis=0)
        if self.count == 0:
            self.mean, self.var, self.count = batch_mean, batch_var, float(n)
            return
        total = self.count + n
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * n / total
        m2 = (self.var * self.count + batch_var * n
              + delta ** 2 * self.count * n / total)
        self.var = m2 / total
        self.count = total

    def normalize(self, x: np.ndarray, clip: float = 10.0) -> np.ndarray:
        out = (x - self.mean) / np.sqrt(self.var + 1e-8)
        return np.clip(out, -clip, clip)

    def state(self) -> dict:
        return {"mean": self.mean.copy(), "var": self.var.copy(),
                "count": self.count}

    def load_state(self, state: dict) -> None:
        self.mean = state["mean"].copy()
        self.var = state["var"].copy()
        self.count = state["count"]


class ObsNormalizer:
    """Running normalization for LiDAR (per beam) and proprio (per feature).

    LiDAR ranges are pre-scaled by 1/max_range to keep conv inputs O(1).
    Stats update on raw current frames only; `frozen` pins them for eval.
    """

    def __init__(self, n_beams: int, max_range: float, clip: float = 10.0):
        self.lidar_rms = RunningMeanStd((n_beams,))
        self.prop_rms = RunningMeanStd((PROPRIO_DIM,))
        self.max_range = max_range
        self.clip = clip
        self.frozen = False

    def scale_lidar(self, ranges: np.ndarray) -> np.ndarray:
        return (ranges / self.max_range).astype(np.float32)

    def update(self, lidar_scaled: np.ndarray, proprio: np.ndarray) -> None:
        if self.frozen:
            return
        self.lidar_rms.update(np.asarray(lidar_scaled, dtype=np.float64))
        self.prop_rms.update(np.asarray(proprio, dtype=np.float64))

    def normalize(self, obs: Observation) -> Observation:
        return Observation(
            lidar=self.lidar_rms.normalize(obs.lidar, self.clip).astype(
                np.float32),
            proprio=self.prop_rms.normalize(obs.proprio, self.clip).astype(
                np.float32),
        )

    def state(self) -> dict:
        return {"lidar": self.lidar_rms.state(), "prop": self.prop_rms.state(),
                "frozen": self.frozen}

    def load_state(self, state: dict) -> None:
        self.lidar_rms.load_state(state["lidar"])
        self.prop_rms.load_state(state["prop"])
        self.frozen = state["frozen"]


def save_checkpoint(path, model: ResidualPolicyNet, extra: dict | None = None
                    ) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "network_cfg": dataclasses.asdict(model.cfg),
        "n_beams": model.n_beams,
        "param_count": count_parameters(model),
        "state_dict": model.state_dict(),
    }
    payload.update(extra or {})
    torch.save(payload, path)


def load_checkpoint(path, cfg: NetworkConfig | None = None,
                    fusion: FusionConfig | None = None):
    """Rebuild the network from a checkpoint; validates the parameter count."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version "
                              f"{payload.get('version')}")
    saved_cfg = NetworkConfig(**{
        **payload["network_cfg"],
        "conv_blocks": tuple(tuple(b) for b in payload["network_cfg"]["conv_blocks"]),
    })
    if cfg is not None and dataclasses.asdict(cfg) != dataclasses.asdict(saved_cfg):
        raise CheckpointError("checkpoint network spec differs from config")
    model = ResidualPolicyNet(saved_cfg, fusion, n_beams=payload["n_beams"])
    have = count_parameters(model)
    want = payload["param_count"]
    if have != want:
        raise CheckpointError(
            f"parameter count mismatch: checkpoint has {want}, "
            f"rebuilt network has {have}")
    model.load_state_dict(payload["state_dict"])
    return model, payload
