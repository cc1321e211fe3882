"""Noise schedule, forward process, single reverse steps and the epsilon-matching loss.

Timesteps are 1-based (``1..T``); ``alpha_bar(0)`` is defined as 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .exceptions import ArgumentError

EpsFn = Callable[[torch.Tensor, int], torch.Tensor]


@dataclass(frozen=True)
class Schedule:
    betas: np.ndarray
    variance: str = "beta"
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    sigmas: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ArgumentError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0) & (betas < 1)):
            raise ArgumentError("every beta must lie in (0, 1)")
        if np.any(np.diff(betas) < 0):
            raise ArgumentError("betas must be non-decreasing")
        if self.variance not in ("beta", "beta_tilde"):
            raise ArgumentError(f"unknown variance choice {self.variance!r}")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        if self.variance == "beta":
            sigmas = np.sqrt(betas)
        else:
            prev = np.concatenate([[1.0], alpha_bars[:-1]])
            sigmas = np.sqrt((1.0 - prev) / (1.0 - alpha_bars) * betas)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)
        object.__setattr__(self, "sigmas", sigmas)

    @property
    def T(self) -> int:
        return int(self.betas.size)

    def _check(self, t: int, allow_zero: bool = False) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise ArgumentError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self._check(t) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._check(t) - 1])

    def alpha_bar(self, t: int) -> float:
        t = self._check(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._check(t) - 1])


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                         variance: str = "beta") -> Schedule:
    if int(T) != T or T < 1:
        raise ArgumentError("T must be a positive integer")
    if not 0 < beta_start <= beta_end < 1:
        raise ArgumentError("need 0 < beta_start <= beta_end < 1")
    return Schedule(np.linspace(beta_start, beta_end, int(T), dtype=np.float64), variance=variance)


class RngStream:
    """Seeded standard-normal / uniform source.

    ``spawn(k)`` derives an independent substream keyed by ``(seed, path, k)``.
    """

    def __init__(self, seed: int, stream_id: Sequence[int] = ()):
        self.seed = int(seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        self.counter = 0
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, stream_id: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + (int(stream_id),))

    def normal(self, shape) -> torch.Tensor:
        self.counter += 1
        return torch.from_numpy(self._gen.standard_normal(shape, dtype=np.float32))

    def uniform(self, low=0.0, high=1.0, size=None):
        self.counter += 1
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        self.counter += 1
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        self.counter += 1
        return self._gen.permutation(n)

    def seed_int(self) -> int:
        """A 63-bit integer for seeding other generators (torch, sklearn)."""
        self.counter += 1
        return int(self._gen.integers(0, 2**63 - 1))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id}, counter={self.counter})"


def _f32(x) -> float:
    """Round to float32, returned as a Python float (exact) for tensor arithmetic."""
    return float(np.float32(x))


def _coef(values, like: torch.Tensor) -> torch.Tensor:
    """Per-sample float32 coefficient broadcast against a [N, ...] tensor."""
    c = torch.as_tensor(np.asarray(values, dtype=np.float32))
    if c.dim() == 0:
        return c
    return c.view(-1, *([1] * (like.dim() - 1)))


def _timesteps(t, s: Schedule) -> np.ndarray:
    ts = np.asarray(t.cpu().numpy() if isinstance(t, torch.Tensor) else t, dtype=np.int64)
    if np.any(ts < 1) or np.any(ts > s.T):
        raise ArgumentError(f"timesteps must lie in [1, {s.T}]")
    return ts


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, s: Schedule) -> torch.Tensor:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``; ``t`` is an int or one per sample."""
    if x0.shape != eps.shape:
        raise ArgumentError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    ts = _timesteps(t, s)
    ab = s.alpha_bars[ts - 1]
    a = _coef(np.sqrt(ab), x0).to(x0.dtype)
    b = _coef(np.sqrt(1.0 - ab), x0).to(x0.dtype)
    return a * x0 + b * eps


def ddpm_step(xt: torch.Tensor, eps_pred: torch.Tensor, t: int, z: torch.Tensor | None,
              s: Schedule) -> torch.Tensor:
    t = s._check(t)
    if eps_pred.shape != xt.shape:
        raise ArgumentError("eps_pred shape must equal xt shape")
    if z is None:
        z = torch.zeros_like(xt)
    elif t == 1 and bool(torch.any(z != 0)):
        raise ArgumentError("z must be zero at t = 1")
    c1 = _f32(1.0 / np.sqrt(s.alpha(t)))
    c2 = _f32((1.0 - s.alpha(t)) / np.sqrt(1.0 - s.alpha_bar(t)))
    sig = _f32(s.sigma(t))
    return c1 * (xt - c2 * eps_pred) + sig * z


def ddim_step(xt: torch.Tensor, eps_pred: torch.Tensor, t: int, t_prev: int, s: Schedule) -> torch.Tensor:
    t = s._check(t)
    t_prev = s._check(t_prev, allow_zero=True)
    if t_prev >= t:
        raise ArgumentError("t_prev must be smaller than t")
    if eps_pred.shape != xt.shape:
        raise ArgumentError("eps_pred shape must equal xt shape")
    ab, ab_prev = s.alpha_bar(t), s.alpha_bar(t_prev)
    x0_hat = (xt - _f32(np.sqrt(1.0 - ab)) * eps_pred) / _f32(np.sqrt(ab))
    return _f32(np.sqrt(ab_prev)) * x0_hat + _f32(np.sqrt(1.0 - ab_prev)) * eps_pred


SAMPLERS = ("ddpm", "ddim50")


def sampling_grid(s: Schedule, sampler: str) -> list[tuple[int, int]]:
    """``(t, t_prev)`` pairs visited by a sampler, from ``T`` downwards."""
    if sampler == "ddpm":
        return [(t, t - 1) for t in range(s.T, 0, -1)]
    if sampler.startswith("ddim"):
        n = int(sampler[4:] or 50)
        n = min(n, s.T)
        ts = [s.T - int(round(i * s.T / n)) for i in range(n)]
        return list(zip(ts, ts[1:] + [0]))
    raise ArgumentError(f"unknown sampler {sampler!r}; expected one of {SAMPLERS}")


def reverse_chain(eps_fn: EpsFn, shape, rng: RngStream, s: Schedule, sampler: str = "ddim50",
                  x_T: torch.Tensor | None = None, callback=None) -> torch.Tensor:
    """Run the reverse process from ``x_T ~ N(0, I)`` with the given noise predictor.

    Draw order: ``x_T`` first, then (ddpm only) one ``z`` per step with ``t > 1``,
    drawn before the predictor is evaluated.
    """
    grid = sampling_grid(s, sampler)
    x = rng.normal(tuple(shape)) if x_T is None else x_T
    for t, t_prev in grid:
        if sampler == "ddpm":
            z = rng.normal(tuple(shape)) if t > 1 else None
            eps = eps_fn(x, t)
            x = ddpm_step(x, eps, t, z, s)
        else:
            eps = eps_fn(x, t)
            x = ddim_step(x, eps, t, t_prev, s)
        if callback is not None:
            callback(t, x)
    return x


def loss_dm(model: Callable, x0: torch.Tensor, c, t, eps: torch.Tensor, s: Schedule) -> torch.Tensor:
    """Mean squared error between ``eps`` and ``model(q_sample(x0, t, eps), t, c)``."""
    xt = q_sample(x0, t, eps, s)
    ts = torch.as_tensor(_timesteps(t, s))
    pred = model(xt, ts, c)
    if pred.shape != eps.shape:
        raise ArgumentError(f"prediction shape {tuple(pred.shape)} != eps shape {tuple(eps.shape)}")
    return (eps - pred).pow(2).mean()
