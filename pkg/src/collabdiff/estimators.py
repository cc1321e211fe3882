"""scikit-learn style wrappers around the collaborator, fusion and editing routines."""
from __future__ import annotations

from typing import Mapping

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import collab, editkit
from .diffcore import SAMPLERS, make_linear_schedule
from .exceptions import ArgumentError
from .toyface import ToyFaceDataset
from .unimodal import (
    MODALITIES,
    ModelConfig,
    TrainConfig,
    _condition_inputs,
    _embed,
    images_to_tensor,
    train_unimodal,
    validation_loss,
)
from .validation import check_condition, check_consistent_length, check_images, check_random_state


def _dataset(X, masks=None, attributes=None) -> ToyFaceDataset:
    n = len(X)
    masks = np.zeros(X.shape[:3], np.uint8) if masks is None else masks
    attributes = np.zeros((n, 2), np.float32) if attributes is None else attributes
    return ToyFaceDataset(X, masks, attributes, np.zeros(n, np.uint8))


class UnimodalDiffusion(BaseEstimator):
    """One conditional noise predictor; ``fit(X, y)`` with ``y`` the masks or attributes of ``X``."""

    def __init__(self, modality="mask", base_channels=32, steps=20000, batch_size=16, lr=1e-4, T=1000,
                 sampler="ddim50", random_state=None):
        self.modality = modality
        self.base_channels = base_channels
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.T = T
        self.sampler = sampler
        self.random_state = random_state

    def _check_params(self):
        if self.modality not in MODALITIES:
            raise ArgumentError(f"modality must be one of {MODALITIES}")
        if self.sampler not in SAMPLERS:
            raise ArgumentError(f"sampler must be one of {SAMPLERS}")

    def fit(self, X, y):
        self._check_params()
        X = check_images(X)
        y = check_condition(self.modality, y, X.shape[1])
        check_consistent_length(X, y)
        ds = _dataset(X, **{("masks" if self.modality == "mask" else "attributes"): y})
        self.schedule_ = make_linear_schedule(self.T)
        rng = check_random_state(self.random_state)
        self.model_, result = train_unimodal(
            self.modality, ds, ModelConfig(resolution=X.shape[1], base_channels=self.base_channels),
            TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr), rng, self.schedule_)
        self.loss_curve_ = np.asarray(result.losses)
        self.resolution_ = X.shape[1]
        return self

    def sample(self, y, random_state=None) -> np.ndarray:
        """Images ``[N, H, W, 3]`` for the conditions ``y``."""
        check_is_fitted(self, "model_")
        y = check_condition(self.modality, y, self.resolution_)
        rng = check_random_state(self.random_state if random_state is None else random_state)
        return collab.sample_unimodal(self.model_, y, rng, self.schedule_, self.sampler)

    predict = sample

    def score(self, X, y) -> float:
        """Negative epsilon loss on ``(X, y)`` with fixed noise draws (higher is better)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.resolution_)
        y = check_condition(self.modality, y, self.resolution_)
        check_consistent_length(X, y)
        with torch.no_grad():
            tokens = _embed(self.model_, _condition_inputs(self.model_, y))
        rng = check_random_state(self.random_state).spawn(99)
        return -validation_loss(self.model_, images_to_tensor(X), tokens, self.schedule_, rng)


def _as_model(c):
    if isinstance(c, UnimodalDiffusion):
        check_is_fitted(c, "model_")
        return c.model_
    return c


class CollaborativeDiffusion(BaseEstimator):
    """Learns dynamic diffusers on top of fitted collaborators and samples with fused predictions."""

    def __init__(self, collaborators=(), diffuser_channels=8, steps=10000, batch_size=16, lr=1e-4,
                 sampler="ddim50", mode="full", random_state=None):
        self.collaborators = collaborators
        self.diffuser_channels = diffuser_channels
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.sampler = sampler
        self.mode = mode
        self.random_state = random_state

    def fit(self, X, conditions: Mapping):
        if not self.collaborators:
            raise ArgumentError("at least one collaborator is required")
        try:
            models = [_as_model(c) for c in self.collaborators]
        except NotFittedError as exc:
            raise NotFittedError("fit every collaborator before the collaborative model") from exc
        X = check_images(X)
        conds = {m.modality: check_condition(m.modality, conditions[m.modality], X.shape[1]) for m in models}
        check_consistent_length(X, *conds.values())
        ds = _dataset(X, conds.get("mask"), conds.get("attribute"))
        T = models[0].metadata.get("T")
        schedule = make_linear_schedule(int(T)) if T else make_linear_schedule()
        self.ensemble_ = collab.CollabEnsemble([collab.Collaborator(m) for m in models], schedule)
        rng = check_random_state(self.random_state)
        collab.attach_diffusers(self.ensemble_, self.diffuser_channels, rng.spawn(0).seed_int())
        result = collab.train_dynamic_diffusers(self.ensemble_, ds, self.steps, self.batch_size, self.lr,
                                                rng.spawn(1))
        self.loss_curve_ = np.asarray(result.losses)
        self.theta_hashes_ = result.theta_hashes
        return self

    def _conditions(self, conditions):
        res = self.ensemble_.resolution
        return {m: check_condition(m, conditions[m], res) for m in self.ensemble_.modalities}

    def sample(self, conditions: Mapping, mode=None, sampler=None, random_state=None) -> np.ndarray:
        check_is_fitted(self, "ensemble_")
        rng = check_random_state(self.random_state if random_state is None else random_state)
        return collab.collaborative_sample(self.ensemble_, self._conditions(conditions), rng,
                                           sampler or self.sampler, mode or self.mode)

    predict = sample

    def influence_trace(self, conditions: Mapping, random_state=None) -> dict:
        check_is_fitted(self, "ensemble_")
        rng = check_random_state(self.random_state if random_state is None else random_state)
        return collab.influence_trace(self.ensemble_, self._conditions(conditions), rng, self.sampler)


class CollaborativeEditor(BaseEstimator):
    """Edits one image towards target conditions; ``fit`` runs the per-modality preparation."""

    def __init__(self, estimator=None, alpha=0.7, opt_steps=400, opt_lr=1e-3, finetune_steps=500,
                 finetune_lr=1e-5, batch_size=4, sampler="ddim50", random_state=None):
        self.estimator = estimator
        self.alpha = alpha
        self.opt_steps = opt_steps
        self.opt_lr = opt_lr
        self.finetune_steps = finetune_steps
        self.finetune_lr = finetune_lr
        self.batch_size = batch_size
        self.sampler = sampler
        self.random_state = random_state

    def fit(self, X, targets: Mapping):
        if self.estimator is None:
            raise ArgumentError("CollaborativeEditor needs a fitted CollaborativeDiffusion")
        check_is_fitted(self.estimator, "ensemble_")
        ens = self.estimator.ensemble_
        X = check_images(X, ens.resolution)
        if len(X) != 1:
            raise ArgumentError("the editor works on a single image")
        targets = {m: check_condition(m, targets[m], ens.resolution)[:1] for m in ens.modalities}
        cfg = editkit.EditConfig(self.alpha, self.opt_steps, self.opt_lr, self.finetune_steps, self.finetune_lr,
                                 self.batch_size, self.sampler)
        rng = check_random_state(self.random_state)
        self.session_ = editkit.prepare_session(ens, X[0], targets, cfg, rng.spawn(0))
        return self

    def transform(self, X=None, alpha=None, random_state=None) -> np.ndarray:
        """Edited image ``[H, W, 3]``; ``alpha`` overrides the interpolation scale."""
        check_is_fitted(self, "session_")
        session = self.session_
        if alpha is not None:
            c_int = {m: editkit.interpolate_condition(session.c_target[m], session.c_opt[m], alpha)
                     for m in session.c_target}
            session = editkit.EditSession(session.x_input, alpha, session.c_target, session.c_opt, c_int,
                                          session.theta_opt, session.hashes)
        rng = check_random_state(self.random_state if random_state is None else random_state).spawn(1)
        return editkit.collaborative_edit(session, self.estimator.ensemble_, rng, self.sampler)
