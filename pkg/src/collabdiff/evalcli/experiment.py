"""End-to-end experiment: data, collaborators, dynamic diffusers, evaluation rows, traces, edits.

Each phase reads and writes artifacts under one output directory, so the CLI
subcommands can run phases individually and ``run_experiment`` chains them.
"""
from __future__ import annotations

import logging
import os
import time
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .. import nnkit
from ..collab import (
    CollabEnsemble,
    Collaborator,
    FusionLoss,
    attach_diffusers,
    collaborative_sample,
    export_influence_trace,
    influence_trace,
    sample_unimodal,
    train_dynamic_diffusers,
)
from ..diffcore import RngStream, make_linear_schedule
from ..editkit import EditConfig, EditSession, collaborative_edit, interpolate_condition, prepare_session, session_manifest
from ..exceptions import ArgumentError, InvariantViolation
from ..toyface import ToyFaceDataset, generate_dataset, load_dataset, parse_mask, render_mask, sample_scene
from ..unimodal import (
    MODALITIES,
    ModelConfig,
    TrainConfig,
    _condition_inputs,
    _embed,
    conditions_for,
    images_to_tensor,
    train_unimodal,
    validation_loss,
)
from .checkpoints import load_model, save_model
from .config import ExperimentConfig, save_config
from .imageio import write_mask_pgm, write_ppm
from .metrics import MetricsReport, metric_attribute_consistency, metric_mask_accuracy
from .ntar import write_archive

log = logging.getLogger(__name__)

PHASES = ("data", "unimodal", "diffusers", "validation", "eval", "trace", "edit")

# stream ids under the run seed
_S_UNIMODAL = {"mask": 1, "attribute": 2}
_S_DIFFUSERS, _S_DIFF_INIT, _S_VAL, _S_EVAL, _S_TRACE, _S_EDIT = 3, 4, 5, 6, 7, 8


def configure_workers() -> int:
    """Cap intra-op threads at ``COLLAB_NUM_WORKERS`` (default: available cores)."""
    avail = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
    raw = os.environ.get("COLLAB_NUM_WORKERS")
    n = avail
    if raw:
        try:
            n = max(1, min(int(raw), avail))
        except ValueError as exc:
            raise ArgumentError(f"COLLAB_NUM_WORKERS must be an integer, got {raw!r}") from exc
    torch.set_num_threads(n)
    return n


@dataclass
class RunPaths:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def dataset(self):
        return self.root / "data" / "dataset.nta"

    def eps(self, modality):
        return self.root / "checkpoints" / f"eps_{modality}.nta"

    def diffuser(self, modality):
        return self.root / "checkpoints" / f"diffuser_{modality}.nta"

    @property
    def metrics(self):
        return self.root / "metrics.txt"

    @property
    def comparison(self):
        return self.root / "comparison.txt"

    @property
    def failure(self):
        return self.root / "FAILED.txt"


def _meta(config: ExperimentConfig, **kw) -> dict:
    return {"config_hash": config.hash(), "seed": str(config.seed), **{k: str(v) for k, v in kw.items()}}


def _write_lines(path: Path, values: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k}={values[k]}\n" for k in sorted(values)), encoding="utf-8")
    return path


def model_config(config: ExperimentConfig) -> ModelConfig:
    return ModelConfig(resolution=config.resolution, base_channels=config.eps_channels)


def schedule_for(config: ExperimentConfig):
    return make_linear_schedule(config.T, config.beta_start, config.beta_end, config.variance)


# phases -------------------------------------------------------------------

def phase_data(config: ExperimentConfig, paths: RunPaths) -> ToyFaceDataset:
    ds = generate_dataset(config.n_scenes, config.resolution, RngStream(config.data_seed))
    paths.dataset.parent.mkdir(parents=True, exist_ok=True)
    write_archive(paths.dataset, ds.to_tensors(),
                  _meta(config, kind="toyface-dataset", n=config.n_scenes, resolution=config.resolution,
                        data_seed=config.data_seed))
    return ds


def get_dataset(config: ExperimentConfig, paths: RunPaths) -> ToyFaceDataset:
    if paths.dataset.exists():
        return load_dataset(paths.dataset)
    return phase_data(config, paths)


def phase_unimodal(config: ExperimentConfig, paths: RunPaths, dataset: ToyFaceDataset,
                   modalities=MODALITIES) -> dict:
    root = RngStream(config.seed)
    s = schedule_for(config)
    models = {}
    for m in modalities:
        tc = TrainConfig(steps=config.unimodal_steps, batch_size=config.unimodal_batch, lr=config.unimodal_lr)
        t0 = time.time()
        model, result = train_unimodal(m, dataset, model_config(config), tc, root.spawn(_S_UNIMODAL[m]), s)
        log.info("trained %s collaborator in %.0fs", m, time.time() - t0)
        save_model(model, paths.eps(m), config.hash(), config.T)
        write_archive(paths.root / "curves" / f"unimodal_{m}.nta",
                      {"loss": np.asarray(result.losses, dtype=np.float32)},
                      _meta(config, kind="loss-curve", modality=m))
        models[m] = model
    return models


def load_collaborators(paths: RunPaths, modalities=MODALITIES) -> dict:
    return {m: load_model(paths.eps(m))[0] for m in modalities}


def phase_diffusers(config: ExperimentConfig, paths: RunPaths, dataset: ToyFaceDataset, models: dict):
    s = schedule_for(config)
    root = RngStream(config.seed)
    ens = CollabEnsemble([Collaborator(models[m]) for m in MODALITIES], s)
    attach_diffusers(ens, config.diffuser_channels, root.spawn(_S_DIFF_INIT).seed_int())
    ckpt_before = {m: nnkit.param_hash(models[m]) for m in MODALITIES}
    result = train_dynamic_diffusers(ens, dataset, config.diffuser_steps, config.diffuser_batch, config.diffuser_lr,
                                     root.spawn(_S_DIFFUSERS))
    ckpt_after = {m: nnkit.param_hash(load_model(paths.eps(m))[0]) for m in MODALITIES} \
        if all(paths.eps(m).exists() for m in MODALITIES) else dict(ckpt_before)
    for m in MODALITIES:
        if ckpt_after[m] != ckpt_before[m] or nnkit.param_hash(models[m]) != ckpt_before[m]:
            raise InvariantViolation(f"collaborator {m} differs from its checkpoint after diffuser training")
    for c in ens.collaborators:
        save_model(c.diffuser, paths.diffuser(c.modality), config.hash(), config.T,
                   {"steps": str(config.diffuser_steps)})
    write_archive(paths.root / "curves" / "diffusers.nta", {"loss": np.asarray(result.losses, dtype=np.float32)},
                  _meta(config, kind="loss-curve"))
    _write_lines(paths.root / "checkpoints" / "hashes.txt",
                 {**{f"theta_{m}_before": ckpt_before[m] for m in MODALITIES},
                  **{f"theta_{m}_after": ckpt_after[m] for m in MODALITIES},
                  "config_hash": config.hash()})
    return ens, {m: ckpt_before[m] == ckpt_after[m] for m in MODALITIES}


def load_ensemble(config: ExperimentConfig, paths: RunPaths) -> CollabEnsemble:
    models = load_collaborators(paths)
    collabs = []
    for m in MODALITIES:
        d = load_model(paths.diffuser(m))[0] if paths.diffuser(m).exists() else None
        collabs.append(Collaborator(models[m], d))
    return CollabEnsemble(collabs, schedule_for(config))


def phase_validation(config: ExperimentConfig, ens: CollabEnsemble, dataset: ToyFaceDataset) -> dict:
    """Validation epsilon losses of each collaborator, the fused predictor and plain averaging."""
    val = dataset.subset("val")
    x0 = images_to_tensor(val.images)
    root = RngStream(config.seed).spawn(_S_VAL)
    tokens = []
    with torch.no_grad():
        for c in ens.collaborators:
            tokens.append(_embed(c.eps_model, _condition_inputs(c.eps_model, conditions_for(val, c.modality))))
    out = {}
    for c, tok in zip(ens.collaborators, tokens):
        out[f"val_loss_{c.modality}"] = validation_loss(c.eps_model, x0, tok, ens.schedule, root.spawn(0))
    draws = root.spawn(0)
    fused = uniform = 0.0
    repeats = 4
    with torch.no_grad():
        for _ in range(repeats):
            t = draws.integers(1, ens.schedule.T + 1, len(x0))
            eps = draws.normal(tuple(x0.shape))
            loss = FusionLoss(ens, x0, tokens, t, eps)
            fused += loss([c.diffuser for c in ens.collaborators]).item()
            uniform += (eps - loss.eps_preds.mean(0)).pow(2).mean().item()
    out["val_loss_fused"] = fused / repeats
    out["val_loss_uniform"] = uniform / repeats
    best = min(out[f"val_loss_{m}"] for m in ens.modalities)
    out["val_fused_within_best_plus_0.02"] = out["val_loss_fused"] <= best + 0.02
    return out


def eval_conditions(config: ExperimentConfig, dataset: ToyFaceDataset):
    """Validation conditions, each repeated ``samples_per_condition`` times (grouped)."""
    val = dataset.subset("val")
    n = min(config.eval_conditions, len(val))
    reps = config.samples_per_condition
    idx = np.repeat(np.arange(n), reps)
    return val.masks[idx], val.attributes[idx], idx


def sample_row(config: ExperimentConfig, ens: CollabEnsemble, row: str, masks, attributes,
               sampler: str | None = None) -> np.ndarray:
    """One evaluation row; every row shares the same noise stream (common random numbers)."""
    rng = RngStream(config.seed).spawn(_S_EVAL)
    sampler = sampler or config.sampler
    models = {c.modality: c.eps_model for c in ens.collaborators}
    if row == "mask_only":
        return sample_unimodal(models["mask"], masks, rng, ens.schedule, sampler)
    if row == "attr_only":
        return sample_unimodal(models["attribute"], attributes, rng, ens.schedule, sampler)
    mode = "full" if row == "full" else row
    return collaborative_sample(ens, {"mask": masks, "attribute": attributes}, rng, sampler, mode,
                                config.temporal_reference)


def phase_eval(config: ExperimentConfig, paths: RunPaths, ens: CollabEnsemble, dataset: ToyFaceDataset,
               report: MetricsReport) -> MetricsReport:
    masks, attrs, groups = eval_conditions(config, dataset)
    rows = ["mask_only", "attr_only"] + [m for m in ("uniform", "full", "no_spatial", "no_temporal")
                                         if m in config.mode_list or m == "full"]
    sample_dir = paths.root / "samples"
    sample_dir.mkdir(parents=True, exist_ok=True)
    for row in rows:
        t0 = time.time()
        imgs = sample_row(config, ens, row, masks, attrs)
        report.add_row(row, imgs, masks, attrs, groups)
        write_archive(sample_dir / f"{row}.nta", {"images": imgs.astype(np.float32), "groups": groups.astype(np.uint8)
                                                  if groups.max() < 256 else groups.astype(np.float32)},
                      _meta(config, kind="samples", row=row, sampler=config.sampler))
        for k in range(min(4, len(imgs))):
            write_ppm(sample_dir / f"{row}_{k}.ppm", imgs[k])
        log.info("row %s done in %.0fs", row, time.time() - t0)
    report.meta.update({"eval_conditions": int(groups.max()) + 1, "samples_per_condition": config.samples_per_condition,
                        "sampler": config.sampler})
    full = report.combined("full")
    for row in ("no_spatial", "no_temporal", "uniform"):
        if row in report.rows:
            other = report.combined(row)
            # degenerate attribute scores leave the delta undefined; it is still reported
            report.extras[f"delta_combined_{row}_vs_full"] = None if other is None or full is None else other - full
    return report


def phase_trace(config: ExperimentConfig, paths: RunPaths, ens: CollabEnsemble, dataset: ToyFaceDataset) -> dict:
    """Export one influence trace and measure the mask-branch temporal trend."""
    val = dataset.subset("val")
    rng = RngStream(config.seed).spawn(_S_TRACE)
    export_influence_trace(ens, {"mask": val.masks[:1], "attribute": val.attributes[:1]}, rng.spawn(0),
                           paths.root / "trace", config.sampler, {"config_hash": config.hash()})
    out = {}
    n = config.trend_conditions
    if n:
        idx = np.arange(n) % len(val)
        tr = influence_trace(ens, {"mask": val.masks[idx], "attribute": val.attributes[idx]}, rng.spawn(1),
                             config.sampler)
        mi = ens.modalities.index("mask")
        w = tr["influence"][:, mi]  # [N, steps, h, w]
        first, last = w[:, 0].mean(axis=(1, 2)), w[:, -1].mean(axis=(1, 2))
        out = {
            "trend_mask_influence_first": float(first.mean()),
            "trend_mask_influence_last": float(last.mean()),
            "trend_fraction_first_gt_last": float((first > last).mean()),
            "trend_t_first": int(tr["timesteps"][0]),
            "trend_t_last": int(tr["timesteps"][-1]),
        }
    return out


def edit_targets(config: ExperimentConfig, dataset: ToyFaceDataset, k: int, rng: RngStream):
    """Input image plus a target that changes only the hair length and the attributes."""
    val_idx = np.flatnonzero(dataset.split == 1)
    i = int(val_idx[k % len(val_idx)])
    scene = sample_scene(RngStream(config.data_seed).spawn(i), config.resolution)
    new_len = 1.25 - scene.hair_len
    target = replace(scene, hair_len=new_len, age=float(rng.uniform(0, 1)), beard=float(rng.uniform(0, 1)))
    return dataset.images[i], dataset.masks[i], render_mask(target), target.attributes


@dataclass
class EditStats:
    l2_alpha0: list = field(default_factory=list)
    l2_fresh: list = field(default_factory=list)
    by_alpha: dict = field(default_factory=dict)


def phase_edit(config: ExperimentConfig, paths: RunPaths, ens: CollabEnsemble, dataset: ToyFaceDataset,
               alpha: float | None = None, sessions: int | None = None) -> dict:
    alpha = config.edit_alpha if alpha is None else alpha
    sessions = config.edit_sessions if sessions is None else sessions
    ec = EditConfig(alpha=0.0, opt_steps=config.edit_opt_steps, opt_lr=config.edit_opt_lr,
                    finetune_steps=config.edit_finetune_steps, finetune_lr=config.edit_finetune_lr,
                    batch_size=config.edit_batch, sampler=config.sampler)
    alphas = sorted({0.0, 0.5, 1.0, float(alpha)})
    phi_before = {c.modality: nnkit.param_hash(c.diffuser) for c in ens.collaborators}
    root = RngStream(config.seed).spawn(_S_EDIT)
    edit_dir = paths.root / "edit"
    edit_dir.mkdir(parents=True, exist_ok=True)
    l2_0, l2_fresh = [], []
    identities = True
    adopt = {a: {"attr": [], "mask_target": [], "mask_original": [], "contested": []} for a in alphas}
    for k in range(sessions):
        rng = root.spawn(k)
        x_in, mask_in, mask_tgt, attr_tgt = edit_targets(config, dataset, k, rng.spawn(0))
        targets = {"mask": mask_tgt[None], "attribute": attr_tgt[None]}
        session = prepare_session(ens, x_in, targets, ec, rng.spawn(1))
        fresh = collaborative_sample(ens, targets, rng.spawn(2), config.sampler)[0]
        for m in session.c_target:
            identities &= torch.equal(interpolate_condition(session.c_target[m], session.c_opt[m], 0.0).tokens,
                                      session.c_opt[m].tokens)
            identities &= torch.equal(interpolate_condition(session.c_target[m], session.c_opt[m], 1.0).tokens,
                                      session.c_target[m].tokens)
        for a in alphas:
            s_a = session if a == 0.0 else EditSession(
                session.x_input, a, session.c_target, session.c_opt,
                {m: interpolate_condition(session.c_target[m], session.c_opt[m], a) for m in session.c_target},
                session.theta_opt, session.hashes)
            img = collaborative_edit(s_a, ens, rng.spawn(3), config.sampler)
            if a == 0.0:
                l2_0.append(float(np.linalg.norm(img - x_in)))
            adopt[a]["attr"].append(metric_attribute_consistency(img, attr_tgt[None]).consistency)
            adopt[a]["mask_target"].append(metric_mask_accuracy(img, mask_tgt))
            adopt[a]["mask_original"].append(metric_mask_accuracy(img, mask_in))
            # pixels where target and input masks disagree carry the whole edit signal
            parsed, diff = parse_mask(img), mask_tgt != mask_in
            adopt[a]["contested"].append((int((parsed[diff] == mask_tgt[diff]).sum()),
                                          int((parsed[diff] == mask_in[diff]).sum()), int(diff.sum())))
            write_ppm(edit_dir / f"session{k:02d}_alpha{a:.2f}.ppm", img)
        l2_fresh.append(float(np.linalg.norm(fresh - x_in)))
        write_ppm(edit_dir / f"session{k:02d}_input.ppm", x_in)
        write_ppm(edit_dir / f"session{k:02d}_fresh.ppm", fresh)
        write_mask_pgm(edit_dir / f"session{k:02d}_target_mask.pgm", mask_tgt)
        (edit_dir / f"session{k:02d}_manifest.txt").write_text(
            session_manifest(session, replace(ec, alpha=alpha), config.seed) + f"config_hash={config.hash()}\n",
            encoding="utf-8")
    phi_after = {c.modality: nnkit.param_hash(c.diffuser) for c in ens.collaborators}
    out = {
        "edit_sessions": sessions,
        "edit_l2_alpha0_mean": float(np.mean(l2_0)) if l2_0 else None,
        "edit_l2_fresh_mean": float(np.mean(l2_fresh)) if l2_fresh else None,
        "edit_identity_preserved": bool(l2_0) and float(np.mean(l2_0)) < float(np.mean(l2_fresh)),
        "edit_diffusers_unchanged": phi_before == phi_after,
        "edit_interpolation_identities_exact": bool(identities),
    }
    for a in alphas:
        attr = [v for v in adopt[a]["attr"] if v is not None]
        out[f"edit_alpha{a:.2f}_attr_consistency"] = float(np.mean(attr)) if attr else None
        out[f"edit_alpha{a:.2f}_mask_acc_target"] = float(np.mean(adopt[a]["mask_target"])) if sessions else None
        out[f"edit_alpha{a:.2f}_mask_acc_original"] = float(np.mean(adopt[a]["mask_original"])) if sessions else None
        hit_t, hit_o, n = np.sum(adopt[a]["contested"], axis=0) if sessions else (0, 0, 0)
        out[f"edit_alpha{a:.2f}_contested_target"] = float(hit_t / n) if n else None
        out[f"edit_alpha{a:.2f}_contested_original"] = float(hit_o / n) if n else None
    margins = [out[f"edit_alpha{a:.2f}_mask_acc_target"] - out[f"edit_alpha{a:.2f}_mask_acc_original"]
               for a in alphas] if sessions else []
    out["edit_mask_adoption_monotone"] = bool(margins) and all(np.diff(margins) >= 0)
    if phi_before != phi_after:
        raise InvariantViolation("dynamic diffusers changed during editing")
    return out


# orchestration ------------------------------------------------------------

@dataclass
class ExperimentResult:
    out_dir: Path
    report: MetricsReport
    timings: dict


def run_experiment(config: ExperimentConfig, out_dir) -> ExperimentResult:
    """Run every phase and write the artifacts; on failure a manifest names the failed phase."""
    configure_workers()
    paths = RunPaths(out_dir)
    paths.root.mkdir(parents=True, exist_ok=True)
    for stale in (paths.failure, paths.root / "FAILED_traceback.txt"):
        stale.unlink(missing_ok=True)
    save_config(config, paths.root / "config.cfg")
    report = MetricsReport(meta={"config_hash": config.hash(), "seed": config.seed, "data_seed": config.data_seed,
                                 "resolution": config.resolution, "n_scenes": config.n_scenes})
    timings: dict = {}
    done: list = []
    phase = PHASES[0]
    try:
        t0 = time.time()
        dataset = phase_data(config, paths)
        timings[phase] = time.time() - t0
        done.append(phase)

        phase = "unimodal"
        t0 = time.time()
        models = phase_unimodal(config, paths, dataset)
        timings[phase] = time.time() - t0
        done.append(phase)

        phase = "diffusers"
        t0 = time.time()
        ens, unchanged = phase_diffusers(config, paths, dataset, models)
        report.extras.update({f"theta_{m}_unchanged": v for m, v in unchanged.items()})
        timings[phase] = time.time() - t0
        done.append(phase)

        for phase, fn in (("validation", lambda: phase_validation(config, ens, dataset)),
                          ("eval", lambda: phase_eval(config, paths, ens, dataset, report)),
                          ("trace", lambda: phase_trace(config, paths, ens, dataset)),
                          ("edit", lambda: phase_edit(config, paths, ens, dataset))):
            t0 = time.time()
            out = fn()
            if isinstance(out, dict):
                report.extras.update(out)
            timings[phase] = time.time() - t0
            done.append(phase)
    except Exception as exc:
        _write_lines(paths.failure, {
            "phase": phase,
            "error": type(exc).__name__,
            "message": str(exc).replace("\n", " "),
            "completed": ",".join(done),
            "config_hash": config.hash(),
        })
        (paths.root / "FAILED_traceback.txt").write_text(traceback.format_exc(), encoding="utf-8")
        raise
    paths.metrics.write_text(report.to_text(), encoding="utf-8")
    paths.comparison.write_text(f"config_hash={config.hash()}\n\n" + report.table(), encoding="utf-8")
    _write_lines(paths.root / "timings.txt", {k: f"{v:.1f}" for k, v in timings.items()})
    return ExperimentResult(paths.root, report, timings)
