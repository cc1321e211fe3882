"""Acceptance criteria 1-11; each test prints one PASS/FAIL line."""
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings

from collabdiff import nnkit
from collabdiff.collab import (
    CollabEnsemble,
    Collaborator,
    FusionLoss,
    attach_diffusers,
    collaborative_sample,
    normalize_influences,
    sample_unimodal,
)
from collabdiff.diffcore import RngStream, loss_dm, make_linear_schedule, reverse_chain
from collabdiff.evalcli.metrics import ROW_ORDER
from collabdiff.oracle import GaussianWorld, verify_sampler
from collabdiff.unimodal import EpsModel, predict_eps, tensor_to_images

from conftest import SMALL, conditions, make_ensemble
from test_evalcli import archives


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_criterion_01_partition_of_unity(verdict):
    t0 = time.time()
    g = torch.Generator().manual_seed(0)
    worst, exact_one = 0.0, True
    for k in range(1000):
        m = k % 3 + 1
        raw = torch.randn(m, 2, 8, 8, generator=g) * 10
        w = normalize_influences(raw).normalized
        worst = max(worst, (w.sum(0) - 1).abs().max().item())
        if m == 1:
            exact_one &= torch.equal(w, torch.ones_like(w))
    dt = time.time() - t0
    verdict(1, worst <= 1e-6 and exact_one and dt < 1.0,
            f"max |sum-1|={worst:.2e} M=1 exact={exact_one} time={dt:.2f}s")


def test_criterion_02_single_collaborator_reduction(verdict):
    t0 = time.time()
    ens = make_ensemble(("mask",), seed=3)
    masks = conditions(1)["mask"]
    same = []
    for sampler in ("ddpm", "ddim50"):
        for seed in range(5):
            a = collaborative_sample(ens, {"mask": masks}, RngStream(seed), sampler)
            b = sample_unimodal(ens.collaborators[0].eps_model, masks, RngStream(seed), ens.schedule, sampler)
            same.append(np.array_equal(a, b))
    dt = time.time() - t0
    verdict(2, all(same) and dt < 120, f"bit-identical {sum(same)}/10 time={dt:.1f}s")


def test_criterion_03_uniform_equals_averaging(verdict):
    t0 = time.time()
    ens = make_ensemble(seed=5)
    conds = conditions(2, seed=1)
    models = [c.eps_model for c in ens.collaborators]
    same = []
    for seed in range(5):
        embs = [m.encode(conds[m.modality]) for m in models]

        def eps_fn(x, t):
            ts = torch.full((x.shape[0],), t, dtype=torch.long)
            return (predict_eps(models[0], x, ts, embs[0]) + predict_eps(models[1], x, ts, embs[1])) / 2

        with torch.no_grad():
            ref = tensor_to_images(reverse_chain(eps_fn, (2, 3, 16, 16), RngStream(seed), ens.schedule, "ddim50"))
        got = collaborative_sample(ens, conds, RngStream(seed), "ddim50", "uniform")
        same.append(np.array_equal(got, ref))
    dt = time.time() - t0
    verdict(3, all(same) and dt < 120, f"bit-identical {sum(same)}/5 time={dt:.1f}s")


def test_criterion_04_gradient_integrity(verdict):
    t0 = time.time()
    s = make_linear_schedule()
    gen = torch.Generator().manual_seed(0)
    models = [nnkit.seeded_init(lambda m=m: EpsModel(m, SMALL), i) for i, m in enumerate(("mask", "attribute"))]
    for m in models:
        for p in m.unet.out.parameters():
            p.data.normal_(0, 0.1, generator=gen)
    x0 = torch.rand(2, 3, 16, 16, generator=gen) * 2 - 1
    eps = RngStream(1).normal((2, 3, 16, 16))
    t = np.array([25, 700])
    tokens = [torch.randn(2, 64, 32, generator=gen), torch.randn(2, 2, 32, generator=gen)]

    def dm(m):
        dt_ = next(m.parameters()).dtype
        return loss_dm(m, x0.to(dt_), tokens[0].to(dt_), t, eps.to(dt_), s)

    rec_dm = nnkit.finite_difference_check(dm, models[0], n_coords=20, step=1e-3, seed=1)
    ens = attach_diffusers(CollabEnsemble([Collaborator(m) for m in models], s), 4, seed=2)
    for c in ens.collaborators:
        for p in c.diffuser.unet.out.parameters():
            p.data.normal_(0, 0.1, generator=gen)
    fl = FusionLoss(ens, x0, tokens, t, eps)
    both = torch.nn.ModuleList([c.diffuser for c in ens.collaborators])
    rec_fl = nnkit.finite_difference_check(lambda mods: fl(list(mods)), both, n_coords=20, step=1e-3, seed=2)
    a = max(r["rel_err"] for r in rec_dm)
    b = max(r["rel_err"] for r in rec_fl)
    dt = time.time() - t0
    ok = len(rec_dm) >= 20 and len(rec_fl) >= 20 and a < 1e-3 and b < 1e-3 and dt < 300
    verdict(4, ok, f"loss_dm max rel={a:.1e} ({len(rec_dm)} coords) fusion max rel={b:.1e} "
                   f"({len(rec_fl)} coords) time={dt:.1f}s")


def test_criterion_05_sampler_oracle(verdict):
    t0 = time.time()
    s = make_linear_schedule()
    world = GaussianWorld.scalar(1.0, 0.5)
    ddpm = verify_sampler(world, s, "ddpm", 10_000, RngStream(0))
    ddim = verify_sampler(world, s, "ddim50", 10_000, RngStream(1))
    dt = time.time() - t0
    ok = (abs(ddpm["sample_mean"] - 1.0) < 0.05 and abs(ddpm["sample_var"] - 0.25) < 0.03
          and abs(ddim["sample_mean"] - 1.0) < 0.05 and dt < 300)
    verdict(5, ok, f"ddpm mean={ddpm['sample_mean']:.4f} var={ddpm['sample_var']:.4f} "
                   f"ddim50 mean={ddim['sample_mean']:.4f} time={dt:.1f}s")


def test_criterion_06_schedule_fidelity(verdict):
    t0 = time.time()
    s = make_linear_schedule()
    betas = [1e-4 + (0.02 - 1e-4) * i / 999 for i in range(1000)]
    worst, prod = 0.0, 1.0
    for i, b in enumerate(betas):
        prod *= 1.0 - b
        worst = max(worst, abs(float(s.alpha_bars[i]) - prod))
    monotone = bool(np.all(np.diff(s.alpha_bars) < 0))
    dt = time.time() - t0
    verdict(6, worst <= 1e-12 and monotone and dt < 1.0, f"max err={worst:.1e} strictly decreasing={monotone} "
                                                         f"time={dt:.2f}s")


def test_criterion_07_frozen_collaborators(fast_run, verdict):
    ex = fast_run.report.extras
    ok = ex.get("theta_mask_unchanged") is True and ex.get("theta_attribute_unchanged") is True
    lines = (fast_run.out_dir / "checkpoints" / "hashes.txt").read_text().splitlines()
    h = dict(line.split("=", 1) for line in lines)
    ok &= all(h[f"theta_{m}_before"] == h[f"theta_{m}_after"] for m in ("mask", "attribute"))
    verdict(7, ok, f"mask {h['theta_mask_after']} attribute {h['theta_attribute_after']}")


def test_criterion_08_end_to_end_direction(fast_run, verdict):
    rows = fast_run.report.rows
    full, uni, mo = rows["full"], rows["uniform"], rows["mask_only"]
    gap_mask = full["mask_accuracy"] - full["mask_accuracy_permuted"]
    gap_attr = None
    if full["attribute_consistency"] is not None and mo["attribute_consistency"] is not None:
        gap_attr = full["attribute_consistency"] - mo["attribute_consistency"]
    pair_f = (full["mask_accuracy"], full["attribute_consistency"])
    pair_u = (uni["mask_accuracy"], uni["attribute_consistency"])
    dominated = (pair_f[1] is None or (pair_u[1] is not None and all(u >= f for u, f in zip(pair_u, pair_f))
                                       and any(u > f for u, f in zip(pair_u, pair_f))))
    minutes = fast_run.wall_seconds / 60
    ok_a, ok_b = gap_mask >= 0.10, gap_attr is not None and gap_attr >= 0.05
    ok = ok_a and ok_b and not dominated and full["n_samples"] >= 200 and minutes < 60
    verdict(8, ok, f"(a) mask {full['mask_accuracy']:.3f} vs permuted {full['mask_accuracy_permuted']:.3f} "
                   f"gap={gap_mask:.3f} {'ok' if ok_a else 'low'}; (b) attr gap="
                   f"{'none' if gap_attr is None else f'{gap_attr:.3f}'} {'ok' if ok_b else 'low'}; "
                   f"(c) full {pair_f} uniform {pair_u} dominated={dominated}; n={full['n_samples']} "
                   f"time={minutes:.1f}min")


def test_criterion_09_ablation_rows(fast_run, verdict):
    rows = fast_run.report.rows
    present = [r for r in ROW_ORDER if r in rows]
    complete = all(rows[r]["mask_accuracy"] is not None and rows[r]["diversity"] is not None for r in present)
    deltas = {k: v for k, v in fast_run.report.extras.items() if k.startswith("delta_combined_")}
    ok = len(present) == 6 and complete and {"delta_combined_no_spatial_vs_full",
                                             "delta_combined_no_temporal_vs_full"} <= set(deltas)
    shown = " ".join(f"{k[15:]}={'none' if v is None else f'{v:+.4f}'}" for k, v in sorted(deltas.items()))
    verdict(9, ok, f"rows={len(present)} {shown}")


def test_criterion_10_editing(fast_run, verdict):
    ex = fast_run.report.extras
    minutes = fast_run.timings["edit"] / 60
    ok = (ex["edit_sessions"] >= 20 and ex["edit_interpolation_identities_exact"] is True
          and ex["edit_l2_alpha0_mean"] < ex["edit_l2_fresh_mean"] and ex["edit_diffusers_unchanged"] is True
          and minutes < 20)
    verdict(10, ok, f"sessions={ex['edit_sessions']} identities={ex['edit_interpolation_identities_exact']} "
                    f"L2 edit(a=0)={ex['edit_l2_alpha0_mean']:.3f} fresh={ex['edit_l2_fresh_mean']:.3f} "
                    f"diffusers unchanged={ex['edit_diffusers_unchanged']} time={minutes:.1f}min")


def test_criterion_11_format_round_trips(tmp_path, verdict):
    from PIL import Image

    from collabdiff.evalcli import ntar
    from collabdiff.evalcli.imageio import write_mask_pgm, write_pgm, write_ppm

    t0 = time.time()
    count = {"n": 0, "bad": 0}

    @settings(max_examples=200, deadline=None, database=None)
    @given(archives())
    def fuzz(case):
        tensors, meta = case
        back, back_meta = ntar.loads(ntar.dumps(tensors, meta))
        count["n"] += 1
        same = back_meta == meta and list(back) == list(tensors) and all(
            back[k].dtype == v.dtype and back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
            for k, v in tensors.items())
        count["bad"] += not same

    fuzz()
    g = np.random.default_rng(0)
    images_ok = True
    for k in range(10):
        img, amap = g.uniform(0, 1, (16, 16, 3)), g.uniform(0, 1, (16, 16))
        mask = g.integers(0, 8, (16, 16)).astype(np.uint8)
        images_ok &= np.array_equal(np.asarray(Image.open(write_ppm(tmp_path / f"{k}.ppm", img))),
                                    np.round(img * 255).astype(np.uint8))
        images_ok &= np.array_equal(np.asarray(Image.open(write_pgm(tmp_path / f"{k}.pgm", amap))),
                                    np.round(amap * 255).astype(np.uint8))
        images_ok &= np.array_equal(np.asarray(Image.open(write_mask_pgm(tmp_path / f"m{k}.pgm", mask))), mask)
    dt = time.time() - t0
    ok = count["n"] >= 200 and count["bad"] == 0 and images_ok and dt < 30
    verdict(11, ok, f"archives={count['n']} mismatches={count['bad']} pnm ok={images_ok} time={dt:.1f}s")
