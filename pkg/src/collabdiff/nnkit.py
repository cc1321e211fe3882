"""Differentiable building blocks: AdaLN, cross-attention, a small conditional UNet,
gradient helpers and an Adam wrapper.

Tensors are channels-first (``[N, C, H, W]``) inside this module.
"""
from __future__ import annotations

import copy
import hashlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ConfigurationError, ContractViolation, DivergenceError, StateError

ZERO_VARIANCE = 1e-12
GRID_POS_BASE = 4.0  # frequency spread of the token-grid position tables


def channel_layer_norm(h: torch.Tensor) -> torch.Tensor:
    """Normalize ``h`` over its channel axis (dim 1) at every position.

    Positions whose variance is below ``1e-12`` map to 0.
    """
    mu = h.mean(dim=1, keepdim=True)
    centered = h - mu
    var = centered.pow(2).mean(dim=1, keepdim=True)
    degenerate = var < ZERO_VARIANCE
    inv = torch.rsqrt(torch.where(degenerate, torch.ones_like(var), var))
    return torch.where(degenerate, torch.zeros_like(h), centered * inv)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb.to(torch.get_default_dtype())


def sinusoidal_grid(size: int, dim: int, base: float = 100.0, coords: torch.Tensor | None = None) -> torch.Tensor:
    """2-D sin/cos position table of shape ``[size*size, dim]`` (row-major).

    ``coords`` overrides the per-axis positions (default ``0..size-1``);
    frequencies are geometric from 1 down to about ``1/base``.
    """
    quarter = dim // 4
    freqs = torch.exp(-math.log(base) * torch.arange(quarter, dtype=torch.float64) / max(quarter, 1))
    axis = torch.arange(size, dtype=torch.float64) if coords is None else torch.as_tensor(coords, dtype=torch.float64)
    ys, xs = torch.meshgrid(axis, axis, indexing="ij")
    ay = ys.reshape(-1, 1) * freqs
    ax = xs.reshape(-1, 1) * freqs
    table = torch.cat([ay.sin(), ay.cos(), ax.sin(), ax.cos()], dim=1)
    if table.shape[1] < dim:
        table = torch.cat([table, torch.zeros(table.shape[0], dim - table.shape[1], dtype=torch.float64)], dim=1)
    return table.float()


class AdaLN(nn.Module):
    """``(1 + s(t)) * LayerNorm(h) + b(t)`` with ``s`` and ``b`` linear in the time embedding."""

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.channels = channels
        self.scale = nn.Linear(embed_dim, channels)
        self.shift = nn.Linear(embed_dim, channels)

    def forward(self, h: torch.Tensor, t_embed: torch.Tensor) -> torch.Tensor:
        if h.dim() < 2 or h.shape[1] != self.channels:
            raise ContractViolation(f"AdaLN expects {self.channels} channels, got shape {tuple(h.shape)}")
        s = self.scale(t_embed)
        b = self.shift(t_embed)
        if s.shape[-1] != h.shape[1]:
            raise ContractViolation("time-embedding projection does not match channel count")
        view = (s.shape[0], s.shape[1]) + (1,) * (h.dim() - 2)
        return (1 + s.view(view)) * channel_layer_norm(h) + b.view(view)


def adaln(h: torch.Tensor, t_embed: torch.Tensor, params: AdaLN) -> torch.Tensor:
    return params(h, t_embed)


class CrossAttention(nn.Module):
    """softmax(Q K^T / sqrt(d)) V with Q from spatial features and K, V from context tokens."""

    def __init__(self, channels: int, ctx_dim: int, attn_dim: int = 32):
        super().__init__()
        self.ctx_dim = ctx_dim
        self.attn_dim = attn_dim
        self.to_q = nn.Linear(channels, attn_dim, bias=False)
        self.to_k = nn.Linear(ctx_dim, attn_dim, bias=False)
        self.to_v = nn.Linear(ctx_dim, channels, bias=False)

    def forward(self, h: torch.Tensor, ctx: torch.Tensor, return_weights: bool = False,
                q_pos: torch.Tensor | None = None):
        if ctx.dim() != 3 or ctx.shape[1] == 0:
            raise ContractViolation("cross-attention needs a non-empty context sequence [N, L, d]")
        if ctx.shape[-1] != self.ctx_dim:
            raise ContractViolation(f"context token dim {ctx.shape[-1]} != {self.ctx_dim}")
        n, c, hh, ww = h.shape
        queries = h.flatten(2).transpose(1, 2)  # [N, HW, C]
        q = self.to_q(queries)
        if q_pos is not None:  # [HW, attn_dim] query position table
            q = q + q_pos
        k = self.to_k(ctx)
        v = self.to_v(ctx)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(self.attn_dim), dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(n, c, hh, ww)
        if return_weights:
            return out, weights
        return out


def cross_attention(h: torch.Tensor, ctx: torch.Tensor, params: CrossAttention) -> torch.Tensor:
    return params(h, ctx)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, embed_dim: int):
        super().__init__()
        self.norm1 = AdaLN(in_ch, embed_dim)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = AdaLN(out_ch, embed_dim)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x, emb)))
        h = self.conv2(F.silu(self.norm2(h, emb)))
        return self.skip(x) + h


class AttnBlock(nn.Module):
    """Residual cross-attention with a learned query position table (in attention space).

    The table is factorized into a row part and a column part, summed per pixel.
    With ``ctx_grid`` set, the context is assumed to be a ``ctx_grid x ctx_grid``
    token grid carrying :data:`GRID_POS_BASE` sinusoidal positions, and the block
    is initialized so each query starts out attending near its own grid cell.
    """

    def __init__(self, channels: int, ctx_dim: int, size: int, embed_dim: int, attn_dim: int,
                 ctx_grid: int | None = None):
        super().__init__()
        self.size = size
        self.norm = AdaLN(channels, embed_dim)
        self.attn = CrossAttention(channels, ctx_dim, attn_dim)
        self.pos_row = nn.Parameter(torch.zeros(size, attn_dim))
        self.pos_col = nn.Parameter(torch.zeros(size, attn_dim))
        if ctx_grid:
            self._align_to_grid(ctx_grid)

    @property
    def pos(self) -> torch.Tensor:
        return (self.pos_row[:, None] + self.pos_col[None]).reshape(self.size * self.size, -1)

    @torch.no_grad()
    def _align_to_grid(self, grid: int, query_gain: float = 6.0, key_gain: float = 2.0) -> None:
        d = min(self.attn.attn_dim, self.attn.ctx_dim)
        coords = (torch.arange(self.size, dtype=torch.float64) + 0.5) * grid / self.size - 0.5
        table = sinusoidal_grid(self.size, self.attn.ctx_dim, GRID_POS_BASE, coords)
        table = table.view(self.size, self.size, -1)[..., :d]
        half = 2 * (self.attn.ctx_dim // 4)  # row features first, then column features
        row, col = table[:, 0].clone(), table[0, :].clone()
        row[:, half:] = 0
        col[:, :half] = 0
        self.pos_row.zero_()
        self.pos_col.zero_()
        self.pos_row[:, :d] = query_gain * row
        self.pos_col[:, :d] = query_gain * col
        self.attn.to_k.weight[:d, :d] += key_gain * torch.eye(d)

    def forward(self, x, emb, ctx):
        return x + self.attn(self.norm(x, emb), ctx, q_pos=self.pos)


class UNet(nn.Module):
    """Three-level conditional UNet (resolutions R, R/2, R/4).

    Time enters through AdaLN in every block; the condition tokens enter through
    cross-attention at R/2 and R/4.
    """

    depth = 3

    def __init__(
        self,
        in_channels: int = 3,
        out_channels: int = 3,
        base_channels: int = 32,
        channel_mult: Sequence[int] = (1, 2, 2),
        ctx_dim: int = 32,
        resolution: int = 32,
        embed_dim: int | None = None,
        attn_dim: int = 32,
        zero_init_output: bool = True,
        ctx_grid: int | None = None,
    ):
        super().__init__()
        if len(channel_mult) != self.depth:
            raise ConfigurationError(f"channel_mult needs {self.depth} entries")
        if resolution <= 0 or resolution % 2 ** (self.depth - 1):
            raise ConfigurationError(
                f"resolution {resolution} is not divisible by {2 ** (self.depth - 1)}"
            )
        self.resolution = resolution
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.base_channels = base_channels
        c0, c1, c2 = (base_channels * m for m in channel_mult)
        embed_dim = embed_dim or 2 * base_channels
        self.embed_dim = embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(embed_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim)
        )
        r1, r2 = resolution // 2, resolution // 4
        self.stem = nn.Conv2d(in_channels, c0, 3, padding=1)
        self.enc0 = ResBlock(c0, c0, embed_dim)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1, c1, embed_dim)
        self.attn1 = AttnBlock(c1, ctx_dim, r1, embed_dim, attn_dim, ctx_grid)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, c2, embed_dim)
        self.attn_mid = AttnBlock(c2, ctx_dim, r2, embed_dim, attn_dim, ctx_grid)
        self.up2 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = ResBlock(2 * c1, c1, embed_dim)
        self.attn_dec1 = AttnBlock(c1, ctx_dim, r1, embed_dim, attn_dim, ctx_grid)
        self.up1 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = ResBlock(2 * c0, c0, embed_dim)
        self.out_norm = AdaLN(c0, embed_dim)
        self.out = nn.Conv2d(c0, out_channels, 3, padding=1)
        if zero_init_output:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, t: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.resolution or x.shape[-2] != self.resolution:
            raise ContractViolation(
                f"expected {self.resolution}x{self.resolution} input, got {tuple(x.shape[-2:])}"
            )
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        emb = self.time_mlp(timestep_embedding(t, self.embed_dim))
        h0 = self.enc0(self.stem(x), emb)
        h1 = self.attn1(self.enc1(self.down1(h0), emb), emb, ctx)
        h2 = self.attn_mid(self.mid(self.down2(h1), emb), emb, ctx)
        u1 = self.up2(F.interpolate(h2, scale_factor=2, mode="nearest"))
        u1 = self.attn_dec1(self.dec1(torch.cat([u1, h1], dim=1), emb), emb, ctx)
        u0 = self.up1(F.interpolate(u1, scale_factor=2, mode="nearest"))
        u0 = self.dec0(torch.cat([u0, h0], dim=1), emb)
        return self.out(F.silu(self.out_norm(u0, emb)))


def unet_forward(model: UNet, x: torch.Tensor, t, ctx: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    return model(x, t, ctx)


# parameters ---------------------------------------------------------------

def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def param_hash(module: nn.Module) -> str:
    """SHA-256 over every tensor in the state dict, in sorted-name order."""
    digest = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def seeded_init(factory: Callable[[], nn.Module], seed: int) -> nn.Module:
    """Build a module with parameters drawn from a private torch RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def backward(loss: torch.Tensor, params: Iterable[torch.nn.Parameter]) -> None:
    """Fill ``.grad`` of every parameter; parameters the loss does not reach get zeros."""
    params = [p for p in params if p.requires_grad]
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise StateError("backward called without a preceding forward pass that reaches parameters")
    if loss.numel() != 1:
        raise ContractViolation("loss must be a scalar")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        p.grad = torch.zeros_like(p) if g is None else g


class Adam:
    """Adam over named parameters that refuses to apply non-finite gradients."""

    def __init__(self, named_params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.named = [(n, p) for n, p in named_params if p.requires_grad]
        self.lr = lr
        self._opt = torch.optim.Adam([p for _, p in self.named], lr=lr, betas=betas, eps=eps)
        self.step_count = 0

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.grad = None

    def step(self) -> None:
        for name, p in self.named:
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            elif not torch.isfinite(p.grad).all():
                raise DivergenceError(f"non-finite gradient in parameter '{name}'")
        self._opt.step()
        self.step_count += 1
        for name, p in self.named:
            if not torch.isfinite(p).all():
                raise DivergenceError(f"parameter '{name}' became non-finite")


def opt_step(state: Adam) -> None:
    state.step()


# finite-difference oracle ------------------------------------------------

def finite_difference_check(
    loss_fn: Callable[[nn.Module], torch.Tensor],
    module: nn.Module,
    n_coords: int = 20,
    step: float = 1e-3,
    seed: int = 0,
    names: Sequence[str] | None = None,
) -> list[dict]:
    """Compare autograd gradients against central differences at random coordinates.

    The analytic gradient is taken on ``module`` as-is (float32). The central
    differences are evaluated on a float64 copy so rounding stays well below the
    truncation error of the stencil. ``loss_fn`` must be deterministic.
    Returns one record per coordinate with ``analytic``, ``numeric`` and ``rel_err``.
    """
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if names is not None:
        named = [(n, p) for n, p in named if n in set(names)]
    module.zero_grad(set_to_none=True)
    loss = loss_fn(module)
    backward(loss, [p for _, p in named])
    analytic = {n: p.grad.detach().clone() for n, p in named}

    twin = copy.deepcopy(module).double()
    twin_params = dict(twin.named_parameters())
    rng = np.random.default_rng(seed)
    sizes = np.array([p.numel() for _, p in named], dtype=np.float64)
    records = []
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        for _ in range(n_coords):
            k = rng.choice(len(named), p=sizes / sizes.sum())
            name = named[k][0]
            idx = int(rng.integers(named[k][1].numel()))
            flat = twin_params[name].data.view(-1)
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + step
                up = loss_fn(twin).item()
                flat[idx] = orig - step
                down = loss_fn(twin).item()
                flat[idx] = orig
            numeric = (up - down) / (2 * step)
            a = analytic[name].view(-1)[idx].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            records.append({"name": name, "index": idx, "analytic": a, "numeric": numeric, "rel_err": rel})
    finally:
        torch.set_default_dtype(prev)
    return records
