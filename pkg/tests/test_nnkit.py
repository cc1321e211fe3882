import numpy as np
import pytest
import torch

from collabdiff import nnkit
from collabdiff.collab import DynamicDiffuser, FusionLoss, CollabEnsemble, Collaborator, attach_diffusers
from collabdiff.diffcore import RngStream, loss_dm, make_linear_schedule
from collabdiff.exceptions import ConfigurationError, ContractViolation, DivergenceError, StateError
from collabdiff.unimodal import EpsModel, ModelConfig


def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _uniform(shape, seed):
    return torch.rand(shape, generator=_gen(seed)) * 2 - 1


def _max_rel(records):
    return max(r["rel_err"] for r in records)


# AdaLN -------------------------------------------------------------------

def test_adaln_identity_modulation_is_layernorm():
    layer = nnkit.AdaLN(8, 16)
    for p in layer.parameters():
        torch.nn.init.zeros_(p)
    h = _uniform((2, 8, 4, 4), 7)
    out = nnkit.adaln(h, torch.randn(2, 16), layer)
    ref = torch.nn.functional.layer_norm(h.permute(0, 2, 3, 1), (8,), eps=0.0).permute(0, 3, 1, 2)
    torch.testing.assert_close(out, ref, atol=1e-5, rtol=0)


def test_adaln_normalized_statistics():
    h = _uniform((3, 6, 5, 5), 1) * 4 + 2
    normed = nnkit.channel_layer_norm(h)
    assert normed.mean(1).abs().max() < 1e-5
    assert (normed.var(1, unbiased=False) - 1).abs().max() < 1e-5


def test_adaln_constant_input_gives_shift():
    layer = nnkit.AdaLN(4, 8)
    h = torch.full((2, 4, 3, 3), 0.7)
    emb = torch.randn(2, 8)
    out = layer(h, emb)
    expected = layer.shift(emb)[:, :, None, None].expand_as(out)
    torch.testing.assert_close(out, expected)


def test_adaln_channel_mismatch():
    with pytest.raises(ContractViolation):
        nnkit.AdaLN(4, 8)(torch.zeros(1, 5, 2, 2), torch.zeros(1, 8))


def test_adaln_gradient_matches_finite_differences():
    torch.manual_seed(0)
    layer = nnkit.AdaLN(8, 16)
    h, emb, w = _uniform((2, 8, 4, 4), 7), _uniform((2, 16), 8), _uniform((2, 8, 4, 4), 9)

    def loss(m):
        dt = next(m.parameters()).dtype
        return (m(h.to(dt), emb.to(dt)) * w.to(dt)).sum()

    assert _max_rel(nnkit.finite_difference_check(loss, layer, n_coords=20, seed=7)) < 1e-3


# cross-attention -----------------------------------------------------------

def test_attention_single_token_weight_one():
    attn = nnkit.CrossAttention(4, 6, 8)
    h = torch.randn(2, 4, 3, 3)
    ctx = torch.randn(2, 1, 6)
    out, w = attn(h, ctx, return_weights=True)
    assert torch.equal(w, torch.ones_like(w))
    expected = attn.to_v(ctx)[:, 0, :, None, None].expand_as(out)
    torch.testing.assert_close(out, expected)


def test_attention_identical_tokens_split_evenly():
    attn = nnkit.CrossAttention(4, 6)
    tok = torch.randn(1, 1, 6)
    _, w = attn(torch.randn(1, 4, 2, 2), tok.repeat(1, 2, 1), return_weights=True)
    torch.testing.assert_close(w, torch.full_like(w, 0.5))


def test_attention_rows_sum_to_one():
    attn = nnkit.CrossAttention(8, 32)
    _, w = attn(torch.randn(3, 8, 4, 4) * 5, torch.randn(3, 64, 32) * 5, return_weights=True)
    assert (w.sum(-1) - 1).abs().max() < 1e-6


def test_attention_empty_context_rejected():
    with pytest.raises(ContractViolation):
        nnkit.cross_attention(torch.zeros(1, 4, 2, 2), torch.zeros(1, 0, 6), nnkit.CrossAttention(4, 6))


def test_attention_gradient_matches_finite_differences():
    torch.manual_seed(1)
    attn = nnkit.CrossAttention(8, 12, 16)
    h, ctx, w = _uniform((2, 8, 3, 3), 11), _uniform((2, 5, 12), 12), _uniform((2, 8, 3, 3), 13)

    def loss(m):
        dt = next(m.parameters()).dtype
        return (m(h.to(dt), ctx.to(dt)) * w.to(dt)).sum()

    assert _max_rel(nnkit.finite_difference_check(loss, attn, n_coords=20, seed=11)) < 1e-3


# UNet ----------------------------------------------------------------------

@pytest.mark.parametrize("res", [16, 32])
def test_unet_shapes_and_zero_output(res):
    net = nnkit.UNet(3, 3, base_channels=8, resolution=res)
    x = torch.randn(2, 3, res, res)
    out = nnkit.unet_forward(net, x, torch.tensor([1, 500]), torch.randn(2, 5, 32))
    assert out.shape == x.shape
    assert torch.equal(out, torch.zeros_like(out))
    one = nnkit.UNet(3, 1, base_channels=8, resolution=res)
    assert one(x, torch.tensor([3, 4]), torch.randn(2, 2, 32)).shape == (2, 1, res, res)


def test_unet_deterministic():
    net = nnkit.UNet(3, 3, base_channels=8, resolution=16, zero_init_output=False)
    x, ctx, t = torch.randn(2, 3, 16, 16), torch.randn(2, 64, 32), torch.tensor([10, 900])
    assert torch.equal(net(x, t, ctx), net(x, t, ctx))


def test_unet_bad_resolution_fails_at_construction():
    with pytest.raises(ConfigurationError):
        nnkit.UNet(resolution=18)


def test_default_parameter_ratio():
    eps = EpsModel("mask", ModelConfig(resolution=32))
    diff = DynamicDiffuser("mask", ModelConfig(resolution=32, base_channels=8))
    assert nnkit.count_params(diff) * 10 < nnkit.count_params(eps)


def test_seeded_init_reproducible():
    a = nnkit.seeded_init(lambda: nnkit.UNet(base_channels=8, resolution=16), 3)
    b = nnkit.seeded_init(lambda: nnkit.UNet(base_channels=8, resolution=16), 3)
    assert nnkit.param_hash(a) == nnkit.param_hash(b)


# backward / optimizer ------------------------------------------------------

def test_backward_sum_and_norm():
    p = torch.nn.Parameter(torch.randn(5))
    nnkit.backward(p.sum(), [p])
    assert torch.equal(p.grad, torch.ones(5))
    nnkit.backward(0.5 * p.pow(2).sum(), [p])
    torch.testing.assert_close(p.grad, p.detach())


def test_backward_unused_parameters_get_zero_grad():
    a, b = torch.nn.Parameter(torch.randn(3)), torch.nn.Parameter(torch.randn(2))
    nnkit.backward(a.sum(), [a, b])
    assert torch.equal(b.grad, torch.zeros(2))


def test_backward_without_forward():
    p = torch.nn.Parameter(torch.randn(2))
    with pytest.raises(StateError):
        nnkit.backward(torch.tensor(1.0), [p])


def test_adam_zero_gradient_leaves_params():
    p = torch.nn.Parameter(torch.randn(4))
    before = p.detach().clone()
    opt = nnkit.Adam([("p", p)], lr=0.1)
    p.grad = torch.zeros(4)
    nnkit.opt_step(opt)
    assert torch.equal(p.detach(), before)
    assert opt.step_count == 1


def test_adam_constant_gradient_update_approaches_lr():
    # closed form: after k steps m_hat = v_hat^(1/2) = g exactly, so each update is lr * g / (|g| + eps)
    p = torch.nn.Parameter(torch.zeros(3, dtype=torch.float64))
    lr, g = 1e-2, torch.tensor([0.5, -2.0, 3.0], dtype=torch.float64)
    opt = nnkit.Adam([("p", p)], lr=lr)
    for _ in range(50):
        prev = p.detach().clone()
        p.grad = g.clone()
        opt.step()
    step = (p.detach() - prev).abs()
    torch.testing.assert_close(step, torch.full_like(step, lr), rtol=1e-6, atol=0)


def test_adam_quadratic_bowl_converges():
    target = torch.tensor([0.3, -0.7, 1.1, 0.0])
    p = torch.nn.Parameter(torch.zeros(4))
    opt = nnkit.Adam([("p", p)], lr=1e-2)
    for _ in range(500):
        opt.zero_grad()
        nnkit.backward(0.5 * (p - target).pow(2).sum(), [p])
        opt.step()
    assert torch.linalg.norm(p.detach() - target) < 1e-3


def test_adam_nan_gradient_names_parameter():
    p = torch.nn.Parameter(torch.zeros(2))
    opt = nnkit.Adam([("layer.weight", p)])
    p.grad = torch.tensor([float("nan"), 0.0])
    with pytest.raises(DivergenceError, match="layer.weight"):
        opt.step()


# loss gradients against finite differences ---------------------------------

def test_loss_dm_gradient_matches_finite_differences():
    s = make_linear_schedule()
    model = nnkit.seeded_init(lambda: EpsModel("mask", ModelConfig(resolution=16, base_channels=8)), 0)
    for p in model.unet.out.parameters():  # make the zero-initialized head non-trivial
        torch.nn.init.normal_(p, std=0.1, generator=_gen(2))
    rng = RngStream(4)
    x0 = _uniform((2, 3, 16, 16), 5)
    tokens = torch.randn(2, 64, 32, generator=_gen(6))
    t = np.array([37, 640])
    eps = rng.normal((2, 3, 16, 16))

    def loss(m):
        dt = next(m.parameters()).dtype
        return loss_dm(m, x0.to(dt), tokens.to(dt), t, eps.to(dt), s)

    records = nnkit.finite_difference_check(loss, model, n_coords=20, seed=3)
    assert len(records) >= 20
    assert _max_rel(records) < 1e-3


def test_fusion_loss_gradient_matches_finite_differences():
    s = make_linear_schedule()
    cfg = ModelConfig(resolution=16, base_channels=8)
    models = [nnkit.seeded_init(lambda m=m: EpsModel(m, cfg), i) for i, m in enumerate(("mask", "attribute"))]
    for k, m in enumerate(models):
        for p in m.unet.out.parameters():
            torch.nn.init.normal_(p, std=0.1, generator=_gen(10 + k))
    ens = attach_diffusers(CollabEnsemble([Collaborator(m) for m in models], s), 4, seed=3)
    for k, c in enumerate(ens.collaborators):
        for p in c.diffuser.unet.out.parameters():
            torch.nn.init.normal_(p, std=0.1, generator=_gen(20 + k))
    x0 = _uniform((2, 3, 16, 16), 3)
    tokens = [torch.randn(2, 64, 32, generator=_gen(4)), torch.randn(2, 2, 32, generator=_gen(5))]
    fl = FusionLoss(ens, x0, tokens, np.array([120, 870]), RngStream(3).normal((2, 3, 16, 16)))
    both = torch.nn.ModuleList([c.diffuser for c in ens.collaborators])
    records = nnkit.finite_difference_check(lambda mods: fl(list(mods)), both, n_coords=20, seed=3)
    assert _max_rel(records) < 1e-3
    # gradient reaches the diffusers through the fused loss
    both.zero_grad()
    nnkit.backward(fl(list(both)), both.parameters())
    assert sum(p.grad.norm() for p in both.parameters()) > 0


@pytest.mark.parametrize("size", [16, 8])
def test_grid_aligned_attention_init(size):
    # queries start out looking at the 8x8 context cell that covers their pixel
    block = nnkit.seeded_init(lambda: nnkit.AttnBlock(16, 32, size, 32, 32, ctx_grid=8), 0)
    coords = (torch.arange(size, dtype=torch.float64) + 0.5) * 8 / size - 0.5
    full = 6.0 * nnkit.sinusoidal_grid(size, 32, nnkit.GRID_POS_BASE, coords)
    torch.testing.assert_close(block.pos, full, rtol=0, atol=1e-6)
    ctx = nnkit.sinusoidal_grid(8, 32, nnkit.GRID_POS_BASE)[None]
    h = torch.zeros(1, 16, size, size)
    _, w = block.attn(h, ctx, return_weights=True, q_pos=block.pos)
    w = w[0]
    torch.testing.assert_close(w.sum(-1), torch.ones(size * size))
    ij = torch.stack(torch.meshgrid(torch.arange(size), torch.arange(size), indexing="ij"), -1).reshape(-1, 2)
    own = (ij[:, 0] * 8 // size) * 8 + ij[:, 1] * 8 // size
    assert (w.argmax(-1) == own).float().mean() > 0.85
    unaligned = nnkit.seeded_init(lambda: nnkit.AttnBlock(16, 32, size, 32, 32), 0)
    assert torch.equal(unaligned.pos, torch.zeros(size * size, 32))
