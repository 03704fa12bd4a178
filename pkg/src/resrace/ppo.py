"""On-policy training: GAE, clipped-surrogate updates with a mean
perturbation for robustness, cosine learning-rate decay, and reward
normalization by running discounted-return variance.

The rollout buffer stores single observation frames and reconstructs the
stacked history per sample, so observation memory stays linear in rollout
length rather than in stack depth.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, config_dict, config_hash
from .envs import EpisodeRecord, RacingEnv
from .fusion import fuse
from .planners import make_planner
from .policy import (PROPRIO_DIM, ObsNormalizer, ResidualPolicyNet,
                     count_parameters, save_checkpoint)
from .rng import substream, substream_seed
from .track import Track, generate_track, load_track

log = logging.getLogger(__name__)


class PpoError(RuntimeError):
    pass


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                bootstrap_value: np.ndarray, gamma: float, lam: float):
    """Standard GAE over (T, N) arrays with episode-boundary masking.

    Returns (advantages, returns); returns = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not (rewards.shape == values.shape == dones.shape):
        raise ValueError("rewards, values, dones must share one shape")
    t_len = rewards.shape[0]
    bootstrap_value = np.asarray(bootstrap_value, dtype=np.float64)
    if bootstrap_value.shape != rewards.shape[1:]:
        raise ValueError("bootstrap_value shape mismatch")
    adv = np.zeros_like(rewards)
    lastgae = np.zeros_like(bootstrap_value)
    for t in range(t_len - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        v_next = bootstrap_value if t == t_len - 1 else values[t + 1]
        delta = rewards[t] + gamma * v_next * nonterminal - values[t]
        lastgae = delta + gamma * lam * nonterminal * lastgae
        adv[t] = lastgae
    return adv, adv + values


def clipped_surrogate_loss(logp_new: torch.Tensor, logp_old: torch.Tensor,
                           advantages: torch.Tensor, clip: float):
    """PPO clipped objective; returns (loss, approx_kl, clip_fraction)."""
    ratio = torch.exp(logp_new - logp_old)
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - clip, 1.0 + clip) * advantages
    loss = -torch.min(unclipped, clipped).mean()
    with torch.no_grad():
        approx_kl = ((ratio - 1.0) - torch.log(ratio)).mean()
        clip_frac = ((ratio - 1.0).abs() > clip).float().mean()
    return loss, approx_kl, clip_frac


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class ReturnNormalizer:
    """Scale rewards by the running std of per-env discounted returns."""

    def __init__(self, n_envs: int, gamma: float):
        self.gamma = gamma
        self.returns = np.zeros(n_envs)
        self.var = 1.0
        self.mean = 0.0
        self.count = 0.0

    def scale(self, rewards: np.ndarray, dones: np.ndarray) -> np.ndarray:
        self.returns = self.gamma * self.returns + rewards
        for r in self.returns:
            self.count += 1
            delta = r - self.mean
            self.mean += delta / self.count
            self.var += (delta * (r - self.mean) - self.var) / self.count
        scaled = rewards / np.sqrt(self.var + 1e-8)
        self.returns[dones.astype(bool)] = 0.0
        return scaled

    def state(self) -> dict:
        return {"returns": self.returns.copy(), "var": self.var,
                "mean": self.mean, "count": self.count}

    def load_state(self, s: dict) -> None:
        self.returns = s["returns"].copy()
        self.var, self.mean, self.count = s["var"], s["mean"], s["count"]


class RolloutBuffer:
    """Frames plus per-step rollout data; stacks rebuilt on demand.

    The frame arrays carry a prefix of span-1 rows from the previous rollout
    so history windows never run off the front; `age` rows track how long
    each env's current episode has run, for cold-start clamping.
    """

    def __init__(self, t_len: int, n_envs: int, n_beams: int, n_frames: int,
                 frame_skip: int):
        self.t_len = t_len
        self.n_envs = n_envs
        self.span = n_frames * (1 + frame_skip) + 1
        self.skip = 1 + frame_skip
        self.n_frames = n_frames
        pre = self.span - 1
        self.lidar = np.zeros((pre + t_len + 1, n_envs, n_beams), np.float32)
        self.proprio = np.zeros((pre + t_len + 1, n_envs, PROPRIO_DIM),
                                np.float32)
        self.age = np.zeros((t_len + 1, n_envs), np.int64)
        self.a_base = np.zeros((t_len, n_envs, 2), np.float32)
        self.actions = np.zeros((t_len, n_envs, 2), np.float32)
        self.logp = np.zeros((t_len, n_envs), np.float32)
        self.values = np.zeros((t_len, n_envs), np.float32)
        self.rewards = np.zeros((t_len, n_envs), np.float32)
        self.rewards_raw = np.zeros((t_len, n_envs), np.float32)
        self.dones = np.zeros((t_len, n_envs), np.float32)

    def begin(self, prefix_lidar, prefix_proprio) -> None:
        """Carry the trailing history of the previous rollout (or the reset
        frames at training start)."""
        self.lidar[:self.span - 1] = prefix_lidar
        self.proprio[:self.span - 1] = prefix_proprio

    def store_frame(self, t: int, lidar: np.ndarray, proprio: np.ndarray,
                    age: np.ndarray) -> None:
        self.lidar[self.span - 1 + t] = lidar
        self.proprio[self.span - 1 + t] = proprio
        self.age[t] = age

    def stack_indices(self, t: int) -> np.ndarray:
        """(n_envs, n_frames+1) frame-row indices for the step-t observation."""
        base = self.span - 1 + t
        offsets = np.arange(self.n_frames, -1, -1) * self.skip
        idx = base - offsets[None, :].repeat(self.n_envs, axis=0)
        start = base - np.minimum(self.age[t], self.span - 1)
        return np.maximum(idx, start[:, None])

    def stacks_at(self, t: int):
        idx = self.stack_indices(t)
        env_idx = np.arange(self.n_envs)[:, None]
        return self.lidar[idx, env_idx], self.proprio[idx, env_idx]

    def gather(self, flat_idx: np.ndarray):
        """Stacked observations for flattened sample indices (t * n_envs + i)."""
        t_idx = flat_idx // self.n_envs
        e_idx = flat_idx % self.n_envs
        base = self.span - 1 + t_idx
        offsets = np.arange(self.n_frames, -1, -1) * self.skip
        idx = base[:, None] - offsets[None, :]
        start = base - np.minimum(self.age[t_idx, e_idx], self.span - 1)
        idx = np.maximum(idx, start[:, None])
        return (self.lidar[idx, e_idx[:, None]],
                self.proprio[idx, e_idx[:, None]],
                t_idx, e_idx)

    def trailing_prefix(self):
        return (self.lidar[-(self.span - 1):].copy(),
                self.proprio[-(self.span - 1):].copy())


@dataclass
class TrainState:
    global_step: int = 0
    update_idx: int = 0
    episode_rewards: list = field(default_factory=list)
    episode_lengths: list = field(default_factory=list)


class PpoTrainer:
    """Owns envs, policy, planner, normalizers, and the train loop."""

    def __init__(self, cfg: RunConfig, tracks: list[Track] | None = None,
                 base_planner: str = "apf", out_dir: str | Path | None = None,
                 dtype: torch.dtype = torch.float32):
        self.cfg = cfg
        self.dtype = dtype
        torch.set_num_threads(max(torch.get_num_threads(), 1))
        self.tracks = tracks if tracks is not None else default_tracks(cfg)
        self.out_dir = Path(out_dir if out_dir is not None else cfg.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        p = cfg.ppo
        self.envs = [RacingEnv(self.tracks, cfg, substream(cfg.seed, f"env-{i}"))
                     for i in range(p.n_envs)]
        self.planners = [make_planner(base_planner, cfg.vehicle, cfg.lidar, cfg)
                         for _ in range(p.n_envs)]
        torch.manual_seed(substream_seed(cfg.seed, "policy-init"))
        self.net = ResidualPolicyNet(cfg.network, cfg.fusion).to(dtype)
        self.optimizer = torch.optim.Adam(self.net.parameters(), lr=p.lr)
        self.obs_norm = ObsNormalizer(cfg.lidar.n_beams, cfg.lidar.max_range,
                                      cfg.network.obs_clip)
        self.ret_norm = ReturnNormalizer(p.n_envs, p.gamma)
        self.sample_gen = torch.Generator().manual_seed(
            substream_seed(cfg.seed, "action-sample"))
        self.rpo_gen = torch.Generator().manual_seed(
            substream_seed(cfg.seed, "rpo-noise"))
        self.shuffle_rng = substream(cfg.seed, "minibatch-shuffle")
        self.alpha = torch.tensor(cfg.fusion.alpha, dtype=dtype)
        self.fusion_mode = cfg.fusion.mode
        self.state = TrainState()

        self._outs = [env.reset() for env in self.envs]
        self._age = np.zeros(p.n_envs, dtype=np.int64)
        frame0_l = np.stack([self.obs_norm.scale_lidar(o.lidar_obs)
                             for o in self._outs])
        frame0_p = np.stack([o.proprio for o in self._outs])
        self.obs_norm.update(frame0_l, frame0_p)
        span = cfg.network.n_frames * (1 + cfg.network.frame_skip) + 1
        self._prefix = (np.repeat(frame0_l[None], span - 1, axis=0),
                        np.repeat(frame0_p[None], span - 1, axis=0))

    # -- rollout -------------------------------------------------------------

    def _policy_forward(self, lidar: np.ndarray, proprio: np.ndarray):
        from .policy import Observation
        obs = Observation(lidar=lidar, proprio=proprio)
        normed = self.obs_norm.normalize(obs)
        lt = torch.as_tensor(normed.lidar, dtype=self.dtype)
        pt = torch.as_tensor(normed.proprio, dtype=self.dtype)
        return self.net(lt, pt)

    def collect_rollout(self) -> RolloutBuffer:
        cfg, p = self.cfg, self.cfg.ppo
        buf = RolloutBuffer(p.traj_length, p.n_envs, cfg.lidar.n_beams,
                            cfg.network.n_frames, cfg.network.frame_skip)
        buf.begin(*self._prefix)
        pending_l = np.zeros((cfg.network.n_frames * (1 + cfg.network.frame_skip),
                              p.n_envs, cfg.lidar.n_beams), np.float32)
        del pending_l  # frames land directly in the buffer

        for t in range(p.traj_length):
            frame_l = np.stack([self.obs_norm.scale_lidar(o.lidar_obs)
                                for o in self._outs])
            frame_p = np.stack([o.proprio for o in self._outs])
            buf.store_frame(t, frame_l, frame_p, self._age)

            lidar_stack, prop_stack = buf.stacks_at(t)
            with torch.no_grad():
                mu_r, log_sigma, value = self._policy_forward(
                    lidar_stack, prop_stack)
            a_base = np.stack([
                self.planners[i].act(self._outs[i].scan)
                for i in range(p.n_envs)]).astype(np.float32)
            ab_t = torch.as_tensor(a_base, dtype=self.dtype)
            dist = fuse(ab_t, mu_r, log_sigma.exp(), self.alpha,
                        mode=self.fusion_mode)
            actions = dist.sample(generator=self.sample_gen)
            logp = dist.log_prob(actions)

            rewards = np.zeros(p.n_envs, np.float32)
            dones = np.zeros(p.n_envs, np.float32)
            act_np = actions.numpy().astype(np.float64)
            for i, env in enumerate(self.envs):
                try:
                    out = env.step(act_np[i])
                except Exception:
                    log.exception("environment %d failed; resetting", i)
                    rec = env.record
                    self.state.episode_rewards.append(rec.reward_sum)
                    self.state.episode_lengths.append(rec.steps)
                    out = env.reset()
                    self._outs[i] = out
                    self._age[i] = 0
                    dones[i] = 1.0
                    continue
                rewards[i] = out.reward
                if out.done:
                    dones[i] = 1.0
                    rec = env.record
                    self.state.episode_rewards.append(rec.reward_sum)
                    self.state.episode_lengths.append(rec.steps)
                    out = env.reset()
                    self._age[i] = 0
                else:
                    self._age[i] += 1
                self._outs[i] = out

            buf.a_base[t] = a_base
            buf.actions[t] = actions.numpy()
            buf.logp[t] = logp.numpy()
            buf.values[t] = value.numpy()
            buf.rewards_raw[t] = rewards
            buf.rewards[t] = self.ret_norm.scale(rewards, dones)
            buf.dones[t] = dones
            self.state.global_step += p.n_envs

        frame_l = np.stack([self.obs_norm.scale_lidar(o.lidar_obs)
                            for o in self._outs])
        frame_p = np.stack([o.proprio for o in self._outs])
        buf.store_frame(p.traj_length, frame_l, frame_p, self._age)
        self._prefix = buf.trailing_prefix()
        return buf

    def bootstrap_value(self, buf: RolloutBuffer) -> np.ndarray:
        lidar_stack, prop_stack = buf.stacks_at(buf.t_len)
        with torch.no_grad():
            _, _, value = self._policy_forward(lidar_stack, prop_stack)
        return value.numpy()

    # -- update ----------------------------------------------------------------

    def update(self, buf: RolloutBuffer) -> dict:
        p = self.cfg.ppo
        adv, ret = compute_gae(buf.rewards, buf.values, buf.dones,
                               self.bootstrap_value(buf), p.gamma,
                               p.gae_lambda)
        flat_adv = torch.as_tensor(adv.reshape(-1), dtype=self.dtype)
        flat_ret = torch.as_tensor(ret.reshape(-1), dtype=self.dtype)
        flat_actions = torch.as_tensor(
            buf.actions.reshape(-1, 2), dtype=self.dtype)
        flat_ab = torch.as_tensor(buf.a_base.reshape(-1, 2), dtype=self.dtype)
        flat_logp = torch.as_tensor(buf.logp.reshape(-1), dtype=self.dtype)

        n = buf.t_len * buf.n_envs
        lr = cosine_lr(p.lr, self.state.global_step, p.total_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
                 "approx_kl": 0.0, "clip_frac": 0.0, "grad_norm": 0.0}
        ratio_dev = None
        batches = 0
        for _epoch in range(p.epochs):
            perm = self.shuffle_rng.permutation(n)
            for start in range(0, n, p.batch_size):
                mb = perm[start:start + p.batch_size]
                lidar_stack, prop_stack, _, _ = buf.gather(mb)
                mb_t = torch.as_tensor(mb)
                mu_r, log_sigma, value = self._policy_forward(
                    lidar_stack, prop_stack)
                a_b = flat_ab[mb_t]
                if ratio_dev is None:
                    with torch.no_grad():
                        d0 = fuse(a_b, mu_r, log_sigma.exp(), self.alpha,
                                  mode=self.fusion_mode)
                        r0 = torch.exp(d0.log_prob(flat_actions[mb_t])
                                       - flat_logp[mb_t])
                        ratio_dev = float((r0 - 1.0).abs().max())
                noise = (torch.rand(mu_r.shape, generator=self.rpo_gen,
                                    dtype=self.dtype) * 2.0 - 1.0) * p.rpo_alpha
                dist = fuse(a_b + noise, mu_r, log_sigma.exp(), self.alpha,
                            mode=self.fusion_mode)
                logp_new = dist.log_prob(flat_actions[mb_t])
                mb_adv = flat_adv[mb_t]
                mb_adv = (mb_adv - mb_adv.mean()) / (mb_adv.std() + 1e-8)
                pg_loss, approx_kl, clip_frac = clipped_surrogate_loss(
                    logp_new, flat_logp[mb_t], mb_adv, p.clip)
                v_loss = 0.5 * ((value - flat_ret[mb_t]) ** 2).mean()
                entropy = dist.entropy().mean()
                loss = (pg_loss + p.value_coef * v_loss
                        - p.entropy_coef * entropy)
                if not torch.isfinite(loss):
                    self._dump_diagnostics(buf, mb, loss)
                    raise PpoError("non-finite loss; diagnostics dumped")
                self.optimizer.zero_grad()
                loss.backward()
                grad_norm = torch.nn.utils.clip_grad_norm_(
                    self.net.parameters(), p.max_grad_norm)
                self.optimizer.step()

                stats["policy_loss"] += float(pg_loss)
                stats["value_loss"] += float(v_loss)
                stats["entropy"] += float(entropy)
                stats["approx_kl"] += float(approx_kl)
                stats["clip_frac"] += float(clip_frac)
                stats["grad_norm"] += float(min(grad_norm, p.max_grad_norm))
                batches += 1
        for k in stats:
            stats[k] /= batches
        stats["lr"] = lr
        stats["ratio_first_dev"] = ratio_dev
        stats["adv_mean_raw"] = float(adv.mean())
        self.state.update_idx += 1
        return stats

    def _dump_diagnostics(self, buf, mb, loss) -> None:
        path = self.out_dir / "diagnostic.pt"
        torch.save({"loss": loss, "minibatch": mb,
                    "state_dict": self.net.state_dict(),
                    "update": self.state.update_idx}, path)
        log.error("dumped update diagnostics to %s", path)

    # -- orchestration -----------------------------------------------------------

    def train(self, log_path: str | Path | None = None) -> Path:
        p = self.cfg.ppo
        log_file = Path(log_path) if log_path else self.out_dir / "training_log.csv"
        write_manifest(self.out_dir, self.cfg)
        t0 = time.time()
        with open(log_file, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([
                "update", "global_step", "mean_ep_reward", "mean_ep_length",
                "policy_loss", "value_loss", "entropy", "approx_kl",
                "clip_frac", "lr", "sps"])
            while self.state.global_step < p.total_steps:
                ep_mark = len(self.state.episode_rewards)
                buf = self.collect_rollout()
                stats = self.update(buf)
                self.obs_norm.update(
                    buf.lidar[buf.span - 1:].reshape(-1, buf.lidar.shape[-1]),
                    buf.proprio[buf.span - 1:].reshape(-1, PROPRIO_DIM))
                new_eps = self.state.episode_rewards[ep_mark:]
                new_lens = self.state.episode_lengths[ep_mark:]
                mean_r = float(np.mean(new_eps)) if new_eps else float("nan")
                mean_l = float(np.mean(new_lens)) if new_lens else float("nan")
                sps = self.state.global_step / (time.time() - t0)
                writer.writerow([
                    self.state.update_idx, self.state.global_step,
                    repr(mean_r), repr(mean_l),
                    repr(stats["policy_loss"]), repr(stats["value_loss"]),
                    repr(stats["entropy"]), repr(stats["approx_kl"]),
                    repr(stats["clip_frac"]), repr(stats["lr"]),
                    f"{sps:.1f}"])
                fh.flush()
                log.info("update %d step %d reward %.3f kl %.4f",
                         self.state.update_idx, self.state.global_step,
                         mean_r, stats["approx_kl"])
                if (p.checkpoint_every
                        and self.state.update_idx % p.checkpoint_every == 0):
                    self.save(self.out_dir
                              / f"checkpoint_{self.state.update_idx:05d}.pt")
        final = self.out_dir / "checkpoint_final.pt"
        self.save(final)
        return final

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | Path) -> None:
        extra = {
            "optimizer": self.optimizer.state_dict(),
            "obs_norm": self.obs_norm.state(),
            "ret_norm": self.ret_norm.state(),
            "env_states": [env.get_state() for env in self.envs],
            "outs_seed": None,
            "age": self._age.copy(),
            "prefix": self._prefix,
            "global_step": self.state.global_step,
            "update_idx": self.state.update_idx,
            "sample_gen": self.sample_gen.get_state(),
            "rpo_gen": self.rpo_gen.get_state(),
            "shuffle_rng": self.shuffle_rng.bit_generator.state,
            "config": config_dict(self.cfg),
            "config_hash": config_hash(self.cfg),
            "fusion_mode": self.fusion_mode,
        }
        save_checkpoint(path, self.net, extra)

    def load(self, path: str | Path) -> None:
        payload = torch.load(path, map_location="cpu", weights_only=False)
        self.net.load_state_dict(payload["state_dict"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.obs_norm.load_state(payload["obs_norm"])
        self.ret_norm.load_state(payload["ret_norm"])
        for env, st in zip(self.envs, payload["env_states"]):
            env.set_state(st)
        self._age = payload["age"].copy()
        self._prefix = payload["prefix"]
        self.state.global_step = payload["global_step"]
        self.state.update_idx = payload["update_idx"]
        self.sample_gen.set_state(payload["sample_gen"])
        self.rpo_gen.set_state(payload["rpo_gen"])
        self.shuffle_rng.bit_generator.state = payload["shuffle_rng"]
        # refresh live observations from the restored env states
        self._outs = [env._observe(0.0, {}, env.done, {})
                      for env in self.envs]


def default_tracks(cfg: RunConfig) -> list[Track]:
    if cfg.tracks:
        return [load_track(p) for p in cfg.tracks]
    return [generate_track(cfg.seed * 1000 + k, cfg.trackgen)
            for k in range(cfg.n_proc_tracks)]


def write_manifest(out_dir: Path, cfg: RunConfig, extra: dict | None = None
                   ) -> Path:
    from . import __version__
    manifest = {
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": config_hash(cfg),
        "config": config_dict(cfg),
    }
    manifest.update(extra or {})
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path
