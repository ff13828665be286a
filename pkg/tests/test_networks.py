import pytest
import torch

from cyclerdm.errors import NumericalError, ParameterError, ShapeError
from cyclerdm.networks import (
    Denoiser,
    DenoiserSpec,
    FeatureGainModule,
    FgmSpec,
    OracleDenoiser,
    eps_predict,
    fgm_apply,
    fgm_apply_all,
    oracle_eps,
)
from cyclerdm.schedule import make_linear_schedule, q_sample

SCHED = make_linear_schedule(200)


def small_denoiser(**kw):
    spec = DenoiserSpec(**{"base_width": 8, "depth": 2, "time_embed_dim": 16, **kw})
    torch.manual_seed(0)
    return Denoiser(spec, SCHED)


@pytest.mark.parametrize("patchify", [1, 2])
def test_output_shape(patchify, gen):
    net = small_denoiser(patchify=patchify)
    x = torch.randn(2, 3, 64, 64, generator=gen)
    c = torch.randn(2, 3, 64, 64, generator=gen)
    assert eps_predict(net, x, 10, c, 1).shape == x.shape


@pytest.mark.parametrize("size", [4, 6, 10, 34])
def test_any_even_size(size, gen):
    net = small_denoiser()
    x = torch.randn(1, 3, size, size, generator=gen)
    assert net(x, 5, x, 2).shape == x.shape


def test_determinism(gen):
    net = small_denoiser()
    x = torch.randn(2, 3, 16, 16, generator=gen)
    c = torch.randn(2, 3, 16, 16, generator=gen)
    t = torch.tensor([3, 150])
    assert torch.equal(net(x, t, c, 1), net(x, t, c, 1))


def test_stage_embedding_distinguishes_stages(gen):
    net = small_denoiser()
    torch.nn.init.normal_(net.stage_emb.weight)
    x = torch.randn(1, 3, 8, 8, generator=gen)
    assert not torch.equal(net(x, 5, x, 1), net(x, 5, x, 2))


def test_errors():
    net = small_denoiser()
    x = torch.zeros(1, 3, 8, 8)
    with pytest.raises(ShapeError):
        net(x, 0, torch.zeros(1, 4, 8, 8), 1)
    with pytest.raises(ShapeError):
        net(torch.zeros(1, 2, 8, 8), 0, x, 1)
    with pytest.raises(ParameterError):
        net(x, 0, x, 4)
    with pytest.raises(ParameterError):
        Denoiser(DenoiserSpec(), None)


def test_finite_at_init_on_wide_inputs(gen):
    net = small_denoiser()
    x = torch.rand(4, 3, 16, 16, generator=gen) * 6 - 3
    c = torch.rand(4, 3, 16, 16, generator=gen) * 6 - 3
    for t in (0, 100, 199):
        out = net(x, t, c, 3)
        assert torch.isfinite(out).all()
        assert torch.isfinite(out.mean()) and torch.isfinite(out.var())


def test_parameter_gradient_matches_central_differences(gen):
    net = small_denoiser().double()
    x = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    c = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    probe = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    for name in ("inp.weight", "down_blocks.0.conv1.weight", "out.weight", "time_mlp.0.weight"):
        p = dict(net.named_parameters())[name]
        net.zero_grad()
        (net(x, 40, c, 1) * probe).sum().backward()
        analytic = p.grad.reshape(-1)[:12].clone()
        numeric = torch.zeros_like(analytic)
        h = 1e-6
        with torch.no_grad():
            flat = p.view(-1)
            for i in range(12):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float((net(x, 40, c, 1) * probe).sum())
                flat[i] = orig - h
                fm = float((net(x, 40, c, 1) * probe).sum())
                flat[i] = orig
                numeric[i] = (fp - fm) / (2 * h)
        rel = float((analytic - numeric).norm() / analytic.norm().clamp_min(1e-30))
        assert rel < 1e-3, (name, rel)


def test_input_gradient_matches_central_differences(gen):
    from conftest import central_difference_check

    net = small_denoiser().double()
    c = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    probe = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    x = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    err, _, _ = central_difference_check(lambda v: (net(v, 120, c, 2) * probe).sum(), x)
    assert err < 1e-3


def test_oracle_eps_recovers_noise(gen):
    x0 = torch.rand(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    e = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    for t in (0, 99, 199):
        xt = q_sample(x0, t, e, SCHED)
        assert float((oracle_eps(x0, xt, t, SCHED) - e).abs().max()) < 1e-10
    assert torch.count_nonzero(oracle_eps(x0, SCHED.alpha_bar(50) ** 0.5 * x0, 50, SCHED).abs() > 1e-12) == 0


def test_oracle_eps_degenerate():
    s = make_linear_schedule(10, 0.999999, 0.999999)
    with pytest.raises(NumericalError):
        oracle_eps(torch.zeros(3), torch.zeros(3), 9, s)


def test_oracle_denoiser_uses_condition(gen):
    net = OracleDenoiser(SCHED)
    x0 = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64)
    e = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
    xt = q_sample(x0, 30, e, SCHED)
    torch.testing.assert_close(net(xt, 30, x0, 1), e)


def test_fgm_identity_at_init(gen):
    fgm = FeatureGainModule(FgmSpec())
    h = torch.randn(2, 3, 32, 32, generator=gen)
    out = fgm_apply(fgm, h)
    assert out.shape == h.shape
    assert torch.equal(out, h)


def test_fgm_structure():
    fgm = FeatureGainModule(FgmSpec())
    assert fgm.head.kernel_size == (5, 5) and fgm.head.in_channels == 3
    assert len(fgm.rdbs) == 4
    assert fgm.tail.in_channels == 64 and fgm.tail.out_channels == 3


def test_fgm_errors():
    fgm = FeatureGainModule(FgmSpec(rdb_channels=8, growth=4, dense_layers=2))
    with pytest.raises(ShapeError):
        fgm(torch.zeros(1, 9, 8, 8))
    with pytest.raises(ParameterError):
        FeatureGainModule(FgmSpec(rdb_count=3))


def test_fgm_shared_weights_batched(gen):
    torch.manual_seed(1)
    fgm = FeatureGainModule(FgmSpec(rdb_channels=8, growth=4, dense_layers=2))
    torch.nn.init.normal_(fgm.tail.weight, std=0.1)
    H = tuple(torch.randn(2, 3, 8, 8, generator=gen) for _ in range(3))
    out = fgm_apply_all(fgm, H)
    for a, h in zip(out, H):
        torch.testing.assert_close(a, fgm(h), rtol=1e-5, atol=1e-6)


def test_fgm_gradient_matches_central_differences(gen):
    from conftest import central_difference_check

    torch.manual_seed(2)
    fgm = FeatureGainModule(FgmSpec(rdb_channels=8, growth=4, dense_layers=2)).double()
    torch.nn.init.normal_(fgm.tail.weight, std=0.1)
    probe = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    x = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    err, _, _ = central_difference_check(lambda v: (fgm(v) * probe).sum(), x)
    assert err < 1e-3


def test_fgm_toy_training_reduces_error(gen):
    torch.manual_seed(3)
    fgm = FeatureGainModule(FgmSpec(rdb_channels=16, growth=8, dense_layers=2))
    y, x = torch.meshgrid(torch.linspace(0, 6, 16), torch.linspace(0, 6, 16), indexing="ij")

    def batch():
        phase = torch.rand(8, 3, 1, 1, generator=gen) * 6
        clean = 0.3 * torch.sin(x + y + phase)
        return clean + 0.2 * torch.randn(clean.shape, generator=gen), clean

    noisy_val, clean_val = batch()
    before = float(((fgm(noisy_val) - clean_val) ** 2).mean())
    opt = torch.optim.Adam(fgm.parameters(), lr=2e-3)
    for _ in range(150):
        noisy, clean = batch()
        loss = ((fgm(noisy) - clean) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        after = float(((fgm(noisy_val) - clean_val) ** 2).mean())
    assert after < before
