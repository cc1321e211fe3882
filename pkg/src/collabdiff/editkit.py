"""Multi-modal editing: per-modality embedding optimization, collaborator fine-tuning,
embedding interpolation, then fused sampling with the (untouched) dynamic diffusers.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

from . import nnkit
from .collab import CollabEnsemble, collaborative_sample
from .diffcore import RngStream, Schedule, q_sample
from .exceptions import ArgumentError, DivergenceError, InvariantViolation, UsageError
from .unimodal import ConditionEmbedding, EpsModel, images_to_tensor


@dataclass
class EditConfig:
    alpha: float = 0.7
    opt_steps: int = 400
    opt_lr: float = 1e-3
    finetune_steps: int = 500
    finetune_lr: float = 1e-5
    batch_size: int = 4
    sampler: str = "ddim50"


@dataclass
class EditSession:
    x_input: np.ndarray                                # [H, W, 3] in [0, 1]
    alpha: float
    c_target: dict = field(default_factory=dict)       # modality -> ConditionEmbedding
    c_opt: dict = field(default_factory=dict)
    c_int: dict = field(default_factory=dict)
    theta_opt: dict = field(default_factory=dict)      # modality -> EpsModel
    hashes: dict = field(default_factory=dict)

    def is_prepared(self, modalities) -> bool:
        return all(m in self.c_opt and m in self.c_int and m in self.theta_opt for m in modalities)


def _input_tensor(x_input: np.ndarray) -> torch.Tensor:
    x = np.asarray(x_input, dtype=np.float32)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ArgumentError("x_input must be an [H, W, 3] image")
    return images_to_tensor(x[None])


def _reconstruction_step_loss(model: EpsModel, x0: torch.Tensor, tokens: torch.Tensor, rng: RngStream,
                              batch: int, s: Schedule) -> torch.Tensor:
    t = rng.integers(1, s.T + 1, batch)
    eps = rng.normal((batch,) + tuple(x0.shape[1:]))
    xt = q_sample(x0.expand(batch, -1, -1, -1), t, eps, s)
    pred = model(xt, torch.as_tensor(t), tokens.expand(batch, -1, -1))
    return (eps - pred).pow(2).mean()


@torch.no_grad()
def reconstruction_loss(model: EpsModel, x_input: np.ndarray, c: ConditionEmbedding, s: Schedule,
                        rng: RngStream, n_draws: int = 10) -> float:
    """Epsilon loss of ``model`` on noisy versions of ``x_input`` for ``n_draws`` fixed ``(t, eps)``."""
    x0 = _input_tensor(x_input)
    return _reconstruction_step_loss(model, x0, c.tokens[:1], rng, n_draws, s).item()


def optimize_condition(model: EpsModel, x_input: np.ndarray, c_target: ConditionEmbedding, steps: int,
                       lr: float, rng: RngStream, s: Schedule, batch_size: int = 4) -> ConditionEmbedding:
    """Optimize the token matrix (initialized at the target) so ``model`` reconstructs ``x_input``."""
    if c_target.modality != model.modality:
        raise UsageError("condition modality does not match the model")
    before = nnkit.param_hash(model)
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    tokens = torch.nn.Parameter(c_target.tokens[:1].detach().clone())
    opt = nnkit.Adam([("tokens", tokens)], lr=lr)
    x0 = _input_tensor(x_input)
    try:
        for step in range(steps):
            loss = _reconstruction_step_loss(model, x0, tokens, rng, batch_size, s)
            if not torch.isfinite(loss):
                raise DivergenceError(f"embedding optimization diverged at step {step}")
            opt.zero_grad()
            nnkit.backward(loss, [tokens])
            opt.step()
    finally:
        for p, f in zip(model.parameters(), flags):
            p.requires_grad_(f)
    if nnkit.param_hash(model) != before:
        raise InvariantViolation("model parameters changed during embedding optimization")
    return ConditionEmbedding(tokens.detach().clone(), model.modality)


def finetune_model(model: EpsModel, x_input: np.ndarray, c_opt: ConditionEmbedding, steps: int, lr: float,
                   rng: RngStream, s: Schedule, batch_size: int = 4) -> EpsModel:
    """Fine-tune a copy of ``model`` on ``x_input`` with the embedding held fixed."""
    if c_opt.modality != model.modality:
        raise UsageError("condition modality does not match the model")
    tuned = copy.deepcopy(model)
    for p in tuned.parameters():
        p.requires_grad_(True)
    tokens = c_opt.tokens[:1].detach()
    x0 = _input_tensor(x_input)
    opt = nnkit.Adam(tuned.named_parameters(), lr=lr)
    for step in range(steps):
        loss = _reconstruction_step_loss(tuned, x0, tokens, rng, batch_size, s)
        if not torch.isfinite(loss):
            raise DivergenceError(f"fine-tuning diverged at step {step}")
        opt.zero_grad()
        nnkit.backward(loss, tuned.parameters())
        opt.step()
    tuned.eval()
    for p in tuned.parameters():
        p.requires_grad_(False)
    return tuned


def interpolate_condition(c_target: ConditionEmbedding, c_opt: ConditionEmbedding, alpha: float) -> ConditionEmbedding:
    """``alpha * c_target + (1 - alpha) * c_opt``, token-wise."""
    if c_target.tokens.shape != c_opt.tokens.shape:
        raise ArgumentError(f"token shapes differ: {tuple(c_target.tokens.shape)} vs {tuple(c_opt.tokens.shape)}")
    if c_target.modality != c_opt.modality:
        raise ArgumentError("cannot interpolate embeddings of different modalities")
    if not 0.0 <= alpha <= 1.0:
        raise ArgumentError("alpha must lie in [0, 1]")
    return ConditionEmbedding(alpha * c_target.tokens + (1.0 - alpha) * c_opt.tokens, c_target.modality)


def prepare_session(ensemble: CollabEnsemble, x_input: np.ndarray, targets: Mapping, config: EditConfig,
                    rng: RngStream) -> EditSession:
    """Run the uni-modal stage (optimize, fine-tune, interpolate) for every collaborator."""
    if set(targets) != set(ensemble.modalities):
        raise UsageError(f"need one target condition per modality {ensemble.modalities}")
    session = EditSession(np.asarray(x_input, dtype=np.float32), config.alpha)
    for i, c in enumerate(ensemble.collaborators):
        m = c.modality
        sub = rng.spawn(i)
        target = targets[m]
        with torch.no_grad():
            emb = target if isinstance(target, ConditionEmbedding) else c.eps_model.encode(target)
        emb = emb.select(slice(0, 1)).detach()
        session.c_target[m] = emb
        session.c_opt[m] = optimize_condition(c.eps_model, x_input, emb, config.opt_steps, config.opt_lr,
                                              sub.spawn(0), ensemble.schedule, config.batch_size)
        session.theta_opt[m] = finetune_model(c.eps_model, x_input, session.c_opt[m], config.finetune_steps,
                                              config.finetune_lr, sub.spawn(1), ensemble.schedule,
                                              config.batch_size)
        session.c_int[m] = interpolate_condition(emb, session.c_opt[m], config.alpha)
        session.hashes[f"theta_{m}"] = nnkit.param_hash(c.eps_model)
        session.hashes[f"theta_opt_{m}"] = nnkit.param_hash(session.theta_opt[m])
        if c.diffuser is not None:
            session.hashes[f"phi_{m}"] = nnkit.param_hash(c.diffuser)
    return session


def collaborative_edit(session: EditSession, ensemble: CollabEnsemble, rng: RngStream,
                       sampler: str = "ddim50", mode: str = "full") -> np.ndarray:
    """Fused sampling with fine-tuned collaborators and interpolated embeddings; ``[H, W, 3]``."""
    if not session.is_prepared(ensemble.modalities):
        raise UsageError("edit session is missing per-modality preparation")
    phi_before = {c.modality: nnkit.param_hash(c.diffuser) for c in ensemble.collaborators if c.diffuser}
    tuned = ensemble.with_eps_models(session.theta_opt)
    image = collaborative_sample(tuned, dict(session.c_int), rng, sampler, mode)[0]
    for c in ensemble.collaborators:
        if c.diffuser is not None and nnkit.param_hash(c.diffuser) != phi_before[c.modality]:
            raise InvariantViolation(f"dynamic diffuser {c.modality} changed during editing")
    return image


def session_manifest(session: EditSession, config: EditConfig, seed: int) -> str:
    lines = {
        "alpha": session.alpha,
        "opt_steps": config.opt_steps,
        "opt_lr": config.opt_lr,
        "finetune_steps": config.finetune_steps,
        "finetune_lr": config.finetune_lr,
        "sampler": config.sampler,
        "seed": seed,
        **session.hashes,
    }
    return "".join(f"{k}={lines[k]}\n" for k in sorted(lines))
