"""Noise-level mathematics for the latent diffusion: sigma sampling, loss
weights, EDM preconditioning, the sampling ladder and the Heun step."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .ndnum import ContractError


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    sigma_data: float = 0.5
    sigma_max: float = 80.0
    sigma_min: float = 0.002
    rho: float = 7.0
    steps: int = 50
    ln_sigma_mean: float = -1.2
    ln_sigma_std: float = 1.2

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ContractError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.sigma_data <= 0 or self.ln_sigma_std <= 0:
            raise ContractError("sigma_data and ln_sigma_std must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass(frozen=True)
class PreconditionCoeffs:
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def _check_sigma(sigma: float):
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma}")


def sample_sigma(rng: np.random.Generator, config: ScheduleConfig = ScheduleConfig()) -> float:
    return float(np.exp(config.ln_sigma_mean + config.ln_sigma_std * rng.standard_normal()))


def loss_weight(sigma: float, config: ScheduleConfig = ScheduleConfig()) -> float:
    _check_sigma(sigma)
    sd = config.sigma_data
    return (sigma ** 2 + sd ** 2) / (sigma * sd) ** 2


def precondition(sigma: float, config: ScheduleConfig = ScheduleConfig()) -> PreconditionCoeffs:
    _check_sigma(sigma)
    sd2 = config.sigma_data ** 2
    s2 = sigma ** 2
    root = math.sqrt(s2 + sd2)
    return PreconditionCoeffs(
        c_skip=sd2 / (s2 + sd2),
        c_out=sigma * config.sigma_data / root,
        c_in=1.0 / root,
        c_noise=math.log(sigma) / 4.0,
    )


def sigma_ladder(config: ScheduleConfig = ScheduleConfig()) -> np.ndarray:
    """Karras rho-spaced noise levels from sigma_max down to sigma_min, then 0."""
    n = config.steps
    if n == 1:
        return np.array([config.sigma_max, 0.0])
    i = np.arange(n, dtype=np.float64)
    lo = config.sigma_min ** (1.0 / config.rho)
    hi = config.sigma_max ** (1.0 / config.rho)
    sig = (hi + i / (n - 1) * (lo - hi)) ** config.rho
    return np.concatenate([sig, [0.0]])


def add_noise(z: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise DomainError(f"sigma must be >= 0, got {sigma}")
    eps = rng.standard_normal(z.shape)
    return z + sigma * eps


def heun_step(denoise: Callable[[np.ndarray, float], np.ndarray], z: np.ndarray,
              sigma_cur: float, sigma_next: float) -> np.ndarray:
    """Deterministic Euler step with a trapezoidal correction (skipped at sigma=0)."""
    if not sigma_cur > sigma_next >= 0:
        raise ContractError(f"heun_step needs sigma_cur > sigma_next >= 0, got {sigma_cur}, {sigma_next}")
    d_cur = (z - denoise(z, sigma_cur)) / sigma_cur
    z_euler = z + (sigma_next - sigma_cur) * d_cur
    if sigma_next == 0:
        return z_euler
    d_next = (z_euler - denoise(z_euler, sigma_next)) / sigma_next
    return z + (sigma_next - sigma_cur) * 0.5 * (d_cur + d_next)


def run_ladder(denoise: Callable[[np.ndarray, float], np.ndarray], z_init: np.ndarray,
               config: ScheduleConfig = ScheduleConfig()) -> np.ndarray:
    """Integrate from ``z_init`` (already scaled to sigma_max) down the full ladder."""
    ladder = sigma_ladder(config)
    z = z_init
    for s_cur, s_next in zip(ladder[:-1], ladder[1:]):
        z = heun_step(denoise, z, float(s_cur), float(s_next))
    return z


def gaussian_posterior_denoiser(mu: float | np.ndarray, var: float | np.ndarray):
    """Exact E[x | x + sigma*eps] for x ~ N(mu, var): the ideal denoiser."""
    def denoise(z, sigma):
        return (var * z + sigma ** 2 * mu) / (var + sigma ** 2)
    return denoise
