"""Policy fusion in probability space.

The base action shifts the mean of a truncated Gaussian over the normalized
action box: mu = a_B + alpha * mu_R, sigma learned.  Sampling is exact
inverse-CDF (never clipping), so bounded actions carry no boundary bias and
the distribution's mode equals the clamped mean.  A clipped-sum variant (plain
Gaussian sample clipped to the box) is provided as the ablation comparator.
"""

from __future__ import annotations

import math

import torch

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
Z_FLOOR = 1e-12  # mass-in-box floor: keeps log finite when mu is far outside


def _phi(z: torch.Tensor) -> torch.Tensor:
    return torch.exp(-0.5 * z * z - LOG_SQRT_2PI)


class TruncatedNormal:
    """Independent per-dimension truncated Gaussians on [low, high].

    log_prob and entropy are differentiable in (mu, sigma); sampling is
    inverse-CDF under an explicit torch.Generator.
    """

    def __init__(self, mu: torch.Tensor, sigma: torch.Tensor,
                 low: float = -1.0, high: float = 1.0):
        if not torch.all(sigma > 0):
            raise ValueError("sigma must be positive")
        if not low < high:
            raise ValueError("low must be below high")
        self.mu, self.sigma = torch.broadcast_tensors(mu, sigma)
        self.low, self.high = low, high
        self._alpha = (low - self.mu) / self.sigma
        self._beta = (high - self.mu) / self.sigma
        self._cdf_alpha = torch.special.ndtr(self._alpha)
        self._z = torch.clamp(torch.special.ndtr(self._beta) - self._cdf_alpha,
                              min=Z_FLOOR)

    def sample(self, shape: tuple = (), generator: torch.Generator | None = None
               ) -> torch.Tensor:
        with torch.no_grad():
            u = torch.rand(torch.Size(shape) + self.mu.shape,
                           generator=generator, dtype=self.mu.dtype)
            p = torch.clamp(self._cdf_alpha + u * self._z, 1e-15, 1.0 - 1e-15)
            x = self.mu + self.sigma * torch.special.ndtri(p)
            return torch.clamp(x, self.low, self.high)

    def log_prob(self, value: torch.Tensor) -> torch.Tensor:
        """Sum of per-dimension log densities over the last axis."""
        if torch.any(value < self.low) or torch.any(value > self.high):
            raise ValueError("action outside the truncation interval")
        z = (value - self.mu) / self.sigma
        lp = -0.5 * z * z - LOG_SQRT_2PI - torch.log(self.sigma) \
            - torch.log(self._z)
        return lp.sum(dim=-1)

    def entropy(self) -> torch.Tensor:
        """Closed-form differential entropy, summed over the last axis."""
        a, b, z = self._alpha, self._beta, self._z
        h = (0.5 + 0.5 * math.log(2.0 * math.pi) + torch.log(self.sigma)
             + torch.log(z) + (a * _phi(a) - b * _phi(b)) / (2.0 * z))
        return h.sum(dim=-1)

    @property
    def mode(self) -> torch.Tensor:
        return torch.clamp(self.mu, self.low, self.high)

    @property
    def mean(self) -> torch.Tensor:
        return self.mu + self.sigma * (_phi(self._alpha) - _phi(self._beta)) / self._z

    @property
    def variance(self) -> torch.Tensor:
        a, b, z = self._alpha, self._beta, self._z
        frac = (a * _phi(a) - b * _phi(b)) / z
        tail = (_phi(a) - _phi(b)) / z
        return self.sigma ** 2 * (1.0 + frac - tail ** 2)


class ClippedNormal:
    """Ablation: plain Gaussian whose samples are clipped to the box.

    log_prob/entropy are those of the unclipped Gaussian, so probability mass
    piles up at the bounds and gradients ignore the clipping.
    """

    def __init__(self, mu: torch.Tensor, sigma: torch.Tensor,
                 low: float = -1.0, high: float = 1.0):
        if not torch.all(sigma > 0):
            raise ValueError("sigma must be positive")
        self.mu, self.sigma = torch.broadcast_tensors(mu, sigma)
        self.low, self.high = low, high

    def sample(self, shape: tuple = (), generator: torch.Generator | None = None
               ) -> torch.Tensor:
        with torch.no_grad():
            eps = torch.randn(torch.Size(shape) + self.mu.shape,
                              generator=generator, dtype=self.mu.dtype)
            return torch.clamp(self.mu + self.sigma * eps, self.low, self.high)

    def log_prob(self, value: torch.Tensor) -> torch.Tensor:
        z = (value - self.mu) / self.sigma
        lp = -0.5 * z * z - LOG_SQRT_2PI - torch.log(self.sigma)
        return lp.sum(dim=-1)

    def entropy(self) -> torch.Tensor:
        h = 0.5 + 0.5 * math.log(2.0 * math.pi) + torch.log(self.sigma)
        return h.sum(dim=-1)

    @property
    def mode(self) -> torch.Tensor:
        return torch.clamp(self.mu, self.low, self.high)


DISTRIBUTIONS = {"truncated": TruncatedNormal, "clipped": ClippedNormal}


def fuse(a_b: torch.Tensor, mu_r: torch.Tensor, sigma_r: torch.Tensor,
         alpha, mode: str = "truncated"):
    """Combine base action and residual output into the action distribution."""
    if torch.any(a_b < -1.0) or torch.any(a_b > 1.0):
        raise ValueError("base action outside [-1, 1]")
    alpha = torch.as_tensor(alpha, dtype=a_b.dtype)
    return DISTRIBUTIONS[mode](a_b + alpha * mu_r, sigma_r)


def clipped_sum_policy(a_b, mu_r, sigma_r, alpha,
                       generator: torch.Generator | None = None) -> torch.Tensor:
    """One clipped-sum action sample (the ablation comparator)."""
    return fuse(a_b, mu_r, sigma_r, alpha, mode="clipped").sample(
        generator=generator)
