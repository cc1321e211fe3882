"""Closed-form noise predictors for Gaussian data, used to check samplers and fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .collab import InfluenceStack, combine_eps, normalize_influences
from .diffcore import RngStream, Schedule, reverse_chain
from .exceptions import ArgumentError


@dataclass(frozen=True)
class GaussianWorld:
    """Independent per-pixel Gaussians ``x0 ~ N(mean, var)``; arrays share one shape."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.broadcast_to(np.asarray(self.var, dtype=np.float64), mean.shape).copy()
        if not np.all(var > 0):
            raise ArgumentError("world variance must be positive everywhere")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @classmethod
    def scalar(cls, mean: float, std: float) -> "GaussianWorld":
        return cls(np.full((1, 1, 1), mean), np.full((1, 1, 1), std**2))

    @property
    def shape(self):
        return self.mean.shape

    def sample(self, n: int, rng: RngStream) -> torch.Tensor:
        z = rng.normal((n,) + self.shape).double()
        return (torch.from_numpy(self.mean) + torch.from_numpy(np.sqrt(self.var)) * z).float()


def analytic_eps(world: GaussianWorld, xt: torch.Tensor, t, s: Schedule) -> torch.Tensor:
    """``E[eps | x_t] = sqrt(1-abar) (x_t - sqrt(abar) mu) / (abar var + 1 - abar)``."""
    ts = np.asarray(t.cpu().numpy() if isinstance(t, torch.Tensor) else t, dtype=np.int64)
    if np.any(ts < 1) or np.any(ts > s.T):
        raise ArgumentError("timestep out of range")
    ab = torch.from_numpy(np.asarray(s.alpha_bars[ts - 1], dtype=np.float64))
    if ab.dim():
        ab = ab.view(-1, *([1] * (xt.dim() - 1)))
    mu = torch.from_numpy(world.mean)
    var = torch.from_numpy(world.var)
    x = xt.double()
    eps = torch.sqrt(1 - ab) * (x - torch.sqrt(ab) * mu) / (ab * var + 1 - ab)
    return eps.to(xt.dtype)


def fused_analytic_fn(worlds, s: Schedule, raw_maps: np.ndarray | None = None):
    """Noise predictor fusing one analytic collaborator per world.

    ``raw_maps`` (``[M, h, w]``) fixes the raw influence; ``None`` means equal weights.
    """
    M = len(worlds)

    def eps_fn(x, t):
        preds = [analytic_eps(w, x, t, s) for w in worlds]
        if raw_maps is None:
            raw = torch.zeros((M, x.shape[0]) + tuple(x.shape[-2:]), dtype=x.dtype)
        else:
            raw = torch.as_tensor(np.asarray(raw_maps, dtype=np.float32))[:, None].expand(
                M, x.shape[0], *x.shape[-2:])
        stack: InfluenceStack = normalize_influences(raw, t)
        return combine_eps(stack, preds)

    return eps_fn


def verify_sampler(world: GaussianWorld, s: Schedule, sampler: str, n_samples: int, rng: RngStream,
                   n_collaborators: int = 1, raw_maps: np.ndarray | None = None,
                   mean_tol: float = 0.05, var_tol: float = 0.03) -> dict:
    """Run the reverse chain with analytic noise predictions and compare sample moments.

    With ``n_collaborators > 1`` the same world is served by that many analytic
    collaborators fused with fixed influence maps.
    """
    if n_collaborators == 1 and raw_maps is None:
        def eps_fn(x, t):
            return analytic_eps(world, x, t, s)
    else:
        eps_fn = fused_analytic_fn([world] * n_collaborators, s, raw_maps)
    x = reverse_chain(eps_fn, (n_samples,) + world.shape, rng, s, sampler).double().numpy()
    mean = x.mean(axis=0)
    var = x.var(axis=0, ddof=1)
    mean_err = float(np.abs(mean - world.mean).max())
    var_err = float(np.abs(var - world.var).max())
    report = {
        "sampler": sampler,
        "n_samples": n_samples,
        "collaborators": n_collaborators,
        "target_mean": float(world.mean.mean()),
        "target_var": float(world.var.mean()),
        "sample_mean": float(mean.mean()),
        "sample_var": float(var.mean()),
        "mean_abs_err": mean_err,
        "var_abs_err": var_err,
        "mean_ok": mean_err < mean_tol,
        "var_ok": var_err < var_tol,
    }
    return report


def format_report(report: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in report.items())


def monte_carlo_conditional_eps(mean: float, std: float, t: int, s: Schedule, n: int = 10**6,
                                bins: int = 40, seed: int = 0):
    """Brute-force ``E[eps | x_t]`` for a scalar world by binning ``x_t``.

    Returns bin centers, empirical means and counts. Independent of
    :func:`analytic_eps`.
    """
    gen = np.random.default_rng(seed)
    x0 = mean + std * gen.standard_normal(n)
    eps = gen.standard_normal(n)
    ab = s.alpha_bars[t - 1]
    xt = np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps
    lo, hi = np.quantile(xt, [0.01, 0.99])
    edges = np.linspace(lo, hi, bins + 1)
    which = np.digitize(xt, edges) - 1
    keep = (which >= 0) & (which < bins)
    counts = np.bincount(which[keep], minlength=bins)
    sums = np.bincount(which[keep], weights=eps[keep], minlength=bins)
    xsum = np.bincount(which[keep], weights=xt[keep], minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return xsum / counts, sums / counts, counts
