"""Dynamic diffusers and influence-weighted fusion of uni-modal noise predictors.

At every reverse step each collaborator ``m`` predicts noise ``eps_m`` and its
dynamic diffuser predicts a raw influence map ``I_m`` at image resolution. A
per-pixel softmax across collaborators turns the raw maps into weights that sum
to one, and the fused prediction is the weighted sum of the ``eps_m``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import nn

from . import nnkit
from .diffcore import RngStream, Schedule, q_sample, reverse_chain, sampling_grid
from .exceptions import ArgumentError, DivergenceError, InvariantViolation, UsageError
from .toyface import ToyFaceDataset
from .unimodal import (
    ConditionEmbedding,
    EpsModel,
    ModelConfig,
    _condition_inputs,
    _embed,
    conditions_for,
    ctx_grid_for,
    images_to_tensor,
    predict_eps,
    tensor_to_images,
)

log = logging.getLogger(__name__)

MODES = ("full", "no_spatial", "no_temporal", "uniform")
PARTITION_TOL = 1e-5


class DynamicDiffuser(nn.Module):
    """Small UNet mapping ``(x_t, t, c_m)`` to a single-channel raw influence map."""

    def __init__(self, modality: str, config: ModelConfig):
        super().__init__()
        self._modality = modality
        self.config = config
        self.unet = nnkit.UNet(3, 1, config.base_channels, config.channel_mult, config.token_dim,
                               config.resolution, attn_dim=config.attn_dim, ctx_grid=ctx_grid_for(modality))

    @property
    def modality(self) -> str:
        return self._modality

    def forward(self, xt: torch.Tensor, t, tokens: torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        if tokens.shape[0] == 1 and xt.shape[0] > 1:
            tokens = tokens.expand(xt.shape[0], -1, -1)
        return self.unet(xt, t, tokens)[:, 0]


def raw_influence(d: DynamicDiffuser, xt: torch.Tensor, t, c: ConditionEmbedding) -> torch.Tensor:
    """Raw influence ``[N, h, w]``."""
    if c.modality != d.modality:
        raise UsageError(f"{d.modality} diffuser cannot consume a {c.modality} embedding")
    return d(xt, t, c.tokens)


@dataclass
class InfluenceStack:
    """``normalized[m]`` is the per-pixel softmax of ``raw`` across collaborators ``m``."""

    normalized: torch.Tensor          # [M, N, h, w]
    raw: torch.Tensor | None = None   # [M, N, h, w]
    t: int | None = None

    @property
    def M(self) -> int:
        return self.normalized.shape[0]


def normalize_influences(raw: torch.Tensor | Sequence[torch.Tensor], t: int | None = None) -> InfluenceStack:
    if not isinstance(raw, torch.Tensor):
        raw = torch.stack(list(raw))
    if raw.shape[0] < 1:
        raise ArgumentError("need at least one influence map")
    return InfluenceStack(torch.softmax(raw, dim=0), raw, t)


def uniform_stack(M: int, like: torch.Tensor, t: int | None = None) -> InfluenceStack:
    """``1/M`` everywhere; ``like`` supplies ``[N, h, w]``."""
    return InfluenceStack(torch.full((M,) + tuple(like.shape), 1.0 / M, dtype=like.dtype), None, t)


def spatially_flat(stack: InfluenceStack) -> InfluenceStack:
    """Replace each weight map by its spatial mean, renormalized across collaborators."""
    mean = stack.normalized.mean(dim=(-2, -1), keepdim=True)
    mean = mean / mean.sum(dim=0, keepdim=True)
    return InfluenceStack(mean.expand_as(stack.normalized).contiguous(), stack.raw, stack.t)


def combine_eps(stack: InfluenceStack, eps_preds: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
    """``sum_m w_m * eps_m`` with weights broadcast over the channel axis.

    ``eps_preds`` is ``[M, N, C, h, w]`` or a list of ``[N, C, h, w]``.
    """
    if not isinstance(stack, InfluenceStack):
        raise UsageError("combine_eps needs a normalized InfluenceStack")
    w = stack.normalized
    if (w.sum(dim=0) - 1).abs().max() > PARTITION_TOL:
        raise UsageError("influence stack is not normalized (weights do not sum to 1)")
    if len(eps_preds) != stack.M:
        raise ArgumentError(f"{len(eps_preds)} predictions for {stack.M} influence maps")
    out = w[0].unsqueeze(1) * eps_preds[0]
    for m in range(1, stack.M):
        out = out + w[m].unsqueeze(1) * eps_preds[m]
    return out


@dataclass
class Collaborator:
    eps_model: EpsModel
    diffuser: DynamicDiffuser | None = None

    @property
    def modality(self) -> str:
        return self.eps_model.modality


@dataclass
class CollabEnsemble:
    collaborators: list
    schedule: Schedule

    def __post_init__(self):
        if not self.collaborators:
            raise ArgumentError("an ensemble needs at least one collaborator")
        mods = [c.modality for c in self.collaborators]
        if len(set(mods)) != len(mods):
            raise ArgumentError(f"collaborator modalities must be distinct, got {mods}")
        res = {c.eps_model.config.resolution for c in self.collaborators}
        if len(res) != 1:
            raise ArgumentError("collaborators must share one image resolution")
        for c in self.collaborators:
            if c.diffuser is not None and c.diffuser.modality != c.modality:
                raise ArgumentError("diffuser modality does not match its collaborator")

    @property
    def M(self) -> int:
        return len(self.collaborators)

    @property
    def modalities(self) -> list[str]:
        return [c.modality for c in self.collaborators]

    @property
    def resolution(self) -> int:
        return self.collaborators[0].eps_model.config.resolution

    def with_eps_models(self, models: Mapping[str, EpsModel]) -> "CollabEnsemble":
        """Copy of the ensemble with some collaborators' noise predictors replaced."""
        return CollabEnsemble(
            [Collaborator(models.get(c.modality, c.eps_model), c.diffuser) for c in self.collaborators],
            self.schedule,
        )

    def encode(self, conditions: Mapping) -> list[ConditionEmbedding]:
        """Embeddings in collaborator order; raw conditions go through each model's encoder."""
        if set(conditions) != set(self.modalities):
            raise UsageError(f"need exactly one condition per modality {self.modalities}, got {sorted(conditions)}")
        out = []
        with torch.no_grad():
            for c in self.collaborators:
                cond = conditions[c.modality]
                if isinstance(cond, ConditionEmbedding):
                    if cond.modality != c.modality:
                        raise UsageError(f"{cond.modality} embedding supplied for the {c.modality} slot")
                    out.append(cond)
                else:
                    out.append(c.eps_model.encode(cond))
        n = {len(e) for e in out}
        if len(n) != 1:
            raise ArgumentError("every modality must supply the same number of conditions")
        return out


def default_diffuser_config(eps_config: ModelConfig, base_channels: int = 8) -> ModelConfig:
    return ModelConfig(resolution=eps_config.resolution, base_channels=base_channels,
                       channel_mult=eps_config.channel_mult, token_dim=eps_config.token_dim,
                       attn_dim=eps_config.attn_dim)


def attach_diffusers(ensemble: CollabEnsemble, base_channels: int, seed: int) -> CollabEnsemble:
    """Give every collaborator a freshly initialized (zero-output) dynamic diffuser."""
    for i, c in enumerate(ensemble.collaborators):
        cfg = default_diffuser_config(c.eps_model.config, base_channels)
        c.diffuser = nnkit.seeded_init(lambda: DynamicDiffuser(c.modality, cfg), seed + i)
    return ensemble


# fused predictor ---------------------------------------------------------

class _FusedPredictor:
    """``eps_fn(x, t)`` for the reverse chain; records weights if ``trace`` is a list."""

    def __init__(self, ensemble: CollabEnsemble, embeddings, mode: str, trace=None,
                 fixed_stack: InfluenceStack | None = None):
        if mode not in MODES:
            raise ArgumentError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode in ("full", "no_spatial", "no_temporal") and any(
                c.diffuser is None for c in ensemble.collaborators):
            raise UsageError(f"mode {mode!r} needs a dynamic diffuser for every collaborator")
        self.ensemble = ensemble
        self.embeddings = embeddings
        self.mode = mode
        self.trace = trace
        self.frozen = fixed_stack

    def stack(self, x: torch.Tensor, t: int) -> InfluenceStack:
        collabs = self.ensemble.collaborators
        like = x[:, 0]
        if self.mode == "uniform":
            return uniform_stack(len(collabs), like, t)
        if self.frozen is not None:
            return self.frozen
        ts = torch.full((x.shape[0],), t, dtype=torch.long)
        raw = torch.stack([raw_influence(c.diffuser, x, ts, e) for c, e in zip(collabs, self.embeddings)])
        st = normalize_influences(raw, t)
        if self.mode == "no_spatial":
            st = spatially_flat(st)
        elif self.mode == "no_temporal":
            self.frozen = st
        return st

    @torch.no_grad()
    def __call__(self, x: torch.Tensor, t: int) -> torch.Tensor:
        ts = torch.full((x.shape[0],), t, dtype=torch.long)
        eps = [predict_eps(c.eps_model, x, ts, e) for c, e in zip(self.ensemble.collaborators, self.embeddings)]
        st = self.stack(x, t)
        if self.trace is not None:
            self.trace.append(st.normalized.clone())
        return combine_eps(st, eps)


def sample_unimodal(model: EpsModel, condition, rng: RngStream, schedule: Schedule,
                    sampler: str = "ddim50") -> np.ndarray:
    """Plain conditional sampling with one noise predictor; returns images in [0, 1]."""
    with torch.no_grad():
        emb = condition if isinstance(condition, ConditionEmbedding) else model.encode(condition)
        r = model.config.resolution

        def eps_fn(x, t):
            return predict_eps(model, x, torch.full((x.shape[0],), t, dtype=torch.long), emb)

        x0 = reverse_chain(eps_fn, (len(emb), 3, r, r), rng, schedule, sampler)
    return tensor_to_images(x0)


def _temporal_mean_stack(ensemble, embeddings, rng: RngStream, sampler: str) -> InfluenceStack:
    trace: list = []
    r = ensemble.resolution
    fused = _FusedPredictor(ensemble, embeddings, "full", trace)
    with torch.no_grad():
        reverse_chain(fused, (len(embeddings[0]), 3, r, r), rng, ensemble.schedule, sampler)
    return InfluenceStack(torch.stack(trace).mean(0))


def collaborative_sample(ensemble: CollabEnsemble, conditions: Mapping, rng: RngStream,
                         sampler: str = "ddim50", mode: str = "full",
                         temporal_reference: str = "first", return_trace: bool = False):
    """Fused sampling; returns images ``[N, H, W, 3]`` in [0, 1] (and the weight trace).

    ``no_temporal`` freezes the weights computed at the first (t = T) step, or
    with ``temporal_reference="mean"`` uses the time-averaged weights of a
    reference full-mode run drawn from ``rng.spawn(0)``.
    """
    embeddings = ensemble.encode(conditions)
    fixed = None
    if mode == "no_temporal" and temporal_reference == "mean":
        fixed = _temporal_mean_stack(ensemble, embeddings, rng.spawn(0), sampler)
    elif temporal_reference not in ("first", "mean"):
        raise ArgumentError(f"unknown temporal reference {temporal_reference!r}")
    trace = [] if return_trace else None
    fused = _FusedPredictor(ensemble, embeddings, mode, trace, fixed)
    r = ensemble.resolution
    with torch.no_grad():
        x0 = reverse_chain(fused, (len(embeddings[0]), 3, r, r), rng, ensemble.schedule, sampler)
    images = tensor_to_images(x0)
    if return_trace:
        return images, torch.stack(trace).numpy()  # [steps, M, N, h, w]
    return images


def influence_trace(ensemble: CollabEnsemble, conditions: Mapping, rng: RngStream,
                    sampler: str = "ddim50", mode: str = "full") -> dict:
    """Weights per step ``[N, M, steps, h, w]``, step timesteps, and decoded ``x_t`` per step."""
    embeddings = ensemble.encode(conditions)
    weights: list = []
    states: list = []
    fused = _FusedPredictor(ensemble, embeddings, mode, weights)
    r = ensemble.resolution
    with torch.no_grad():
        reverse_chain(fused, (len(embeddings[0]), 3, r, r), rng, ensemble.schedule, sampler,
                      callback=lambda t, x: states.append(tensor_to_images(x)))
    grid = sampling_grid(ensemble.schedule, sampler)
    return {
        "influence": torch.stack(weights).permute(2, 1, 0, 3, 4).numpy(),
        "timesteps": np.array([t for t, _ in grid]),
        "states": np.stack(states, axis=1),  # [N, steps, H, W, 3]
    }


def export_influence_trace(ensemble: CollabEnsemble, conditions: Mapping, rng: RngStream, out_dir,
                           sampler: str = "ddim50", metadata: Mapping | None = None) -> dict:
    """Trace a single condition set and write an archive plus PGM/PPM frames to ``out_dir``.

    ``metadata`` is merged into the archive's key=value block.
    """
    from pathlib import Path

    from .evalcli.imageio import write_pgm, write_ppm
    from .evalcli.ntar import write_archive

    tr = influence_trace(ensemble, conditions, rng, sampler)
    if tr["influence"].shape[0] != 1:
        raise ArgumentError("export_influence_trace takes exactly one condition set")
    influence = tr["influence"][0].astype(np.float32)  # [M, steps, h, w]
    states = tr["states"][0].astype(np.float32)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_archive(out / "trace.nta", {"influence": influence, "states": states},
                  {"kind": "influence-trace", "modalities": ",".join(ensemble.modalities),
                   "sampler": sampler, "timesteps": ",".join(map(str, tr["timesteps"])), **(metadata or {})})
    for m, name in enumerate(ensemble.modalities):
        for k, t in enumerate(tr["timesteps"]):
            write_pgm(out / f"influence_{name}_t{t:04d}.pgm", influence[m, k])
    for k, t in enumerate(tr["timesteps"]):
        write_ppm(out / f"xt_t{t:04d}.ppm", states[k])
    return {"influence": influence, "states": states, "timesteps": tr["timesteps"]}


# training ----------------------------------------------------------------

def freeze(model: nn.Module) -> None:
    for p in model.parameters():
        p.requires_grad_(False)


class FusionLoss:
    """Squared error of the fused prediction for fixed ``(x0, t, eps)`` and conditions.

    Collaborator predictions do not depend on the diffuser parameters, so they
    are computed once; the diffusers are passed in so the same loss can be
    re-evaluated on perturbed (or float64) copies.
    """

    def __init__(self, ensemble: CollabEnsemble, x0: torch.Tensor, tokens: Sequence[torch.Tensor],
                 t: np.ndarray, eps: torch.Tensor):
        self.t = torch.as_tensor(t, dtype=torch.long)
        self.eps = eps
        self.xt = q_sample(x0, t, eps, ensemble.schedule)
        self.tokens = list(tokens)
        with torch.no_grad():
            self.eps_preds = torch.stack([
                c.eps_model(self.xt, self.t, tok) for c, tok in zip(ensemble.collaborators, self.tokens)
            ])

    def __call__(self, diffusers: Sequence[DynamicDiffuser]) -> torch.Tensor:
        dtype = next(diffusers[0].parameters()).dtype
        xt = self.xt.to(dtype)
        raw = torch.stack([d(xt, self.t, tok.to(dtype)) for d, tok in zip(diffusers, self.tokens)])
        fused = combine_eps(normalize_influences(raw), self.eps_preds.to(dtype))
        return (self.eps.to(dtype) - fused).pow(2).mean()


@dataclass
class DiffuserTrainResult:
    losses: list = field(default_factory=list)
    theta_hashes: dict = field(default_factory=dict)


def train_dynamic_diffusers(ensemble: CollabEnsemble, dataset: ToyFaceDataset, steps: int, batch_size: int,
                            lr: float, rng: RngStream, log_every: int = 100) -> DiffuserTrainResult:
    """Fit only the dynamic-diffuser parameters on the fused epsilon loss.

    Collaborators are frozen; their parameter hashes are compared before and
    after and any change aborts with :class:`InvariantViolation`.
    """
    if any(c.diffuser is None for c in ensemble.collaborators):
        raise UsageError("attach diffusers before training them")
    train = dataset.subset("train") if (dataset.split == 1).any() else dataset
    before = {}
    for c in ensemble.collaborators:
        freeze(c.eps_model)
        c.eps_model.eval()
        before[c.modality] = nnkit.param_hash(c.eps_model)

    x_all = images_to_tensor(train.images)
    inputs = [_condition_inputs(c.eps_model, conditions_for(train, c.modality)) for c in ensemble.collaborators]
    diffusers = nn.ModuleList([c.diffuser for c in ensemble.collaborators])
    opt = nnkit.Adam(diffusers.named_parameters(), lr=lr)
    draws = rng.spawn(1)
    result = DiffuserTrainResult(theta_hashes=before)
    diffusers.train()
    for step in range(steps):
        idx = draws.integers(0, len(x_all), batch_size)
        t = draws.integers(1, ensemble.schedule.T + 1, batch_size)
        x0 = x_all[idx]
        eps = draws.normal(tuple(x0.shape))
        with torch.no_grad():
            tokens = [_embed(c.eps_model, inp[idx]) for c, inp in zip(ensemble.collaborators, inputs)]
        loss = FusionLoss(ensemble, x0, tokens, t, eps)(list(diffusers))
        if not torch.isfinite(loss):
            raise DivergenceError(f"fusion loss became {loss.item()} at step {step}")
        opt.zero_grad()
        nnkit.backward(loss, diffusers.parameters())
        opt.step()
        result.losses.append(loss.item())
        if log_every and step % log_every == 0:
            log.info("diffusers step %d loss %.4f", step, loss.item())
    diffusers.eval()
    for c in ensemble.collaborators:
        if nnkit.param_hash(c.eps_model) != before[c.modality]:
            raise InvariantViolation(f"collaborator {c.modality} changed during diffuser training")
    return result
