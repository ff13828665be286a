import math

import pytest
import torch

from conftest import central_difference_check
from cyclerdm.errors import ShapeError
from cyclerdm.metrics import evaluate, psnr, ssim


def test_psnr_formula():
    a = torch.zeros(3, 8, 8, dtype=torch.float64)
    b = torch.full_like(a, 0.1)
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_psnr_cap(gen):
    a = torch.rand(3, 8, 8, generator=gen)
    assert psnr(a, a) == 99.0


def test_psnr_loop_oracle(gen):
    a = torch.rand(3, 7, 5, generator=gen)
    b = torch.rand(3, 7, 5, generator=gen)
    acc = sum((u - v) ** 2 for u, v in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()))
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / (acc / a.numel())), rel=1e-9)


def test_shape_errors():
    with pytest.raises(ShapeError):
        psnr(torch.zeros(3, 4, 4), torch.zeros(3, 4, 5))
    with pytest.raises(ShapeError):
        ssim(torch.zeros(3, 10, 10), torch.zeros(3, 10, 10))


def test_ssim_identity(gen):
    a = torch.rand(2, 3, 32, 32, generator=gen, dtype=torch.float64)
    assert abs(float(ssim(a, a)) - 1) < 1e-6


def test_ssim_anti_correlated_binary():
    yy, xx = torch.meshgrid(torch.arange(32), torch.arange(32), indexing="ij")
    img = (((yy // 3) + (xx // 3)) % 2).double()[None]
    assert float(ssim(img, 1 - img)) <= 0


def test_ssim_gradient(gen):
    a = torch.rand(1, 3, 12, 12, generator=gen, dtype=torch.float64)
    b = torch.rand(1, 3, 12, 12, generator=gen, dtype=torch.float64)
    err, _, _ = central_difference_check(lambda v: 1 - ssim(v, b), a)
    assert err < 1e-3


def test_symmetry_and_range(gen):
    for _ in range(5):
        a = torch.rand(3, 16, 16, generator=gen, dtype=torch.float64)
        b = torch.rand(3, 16, 16, generator=gen, dtype=torch.float64)
        assert psnr(a, b) == psnr(b, a)
        s_ab, s_ba = float(ssim(a, b)), float(ssim(b, a))
        assert abs(s_ab - s_ba) < 1e-10 and -1 <= s_ab <= 1


def test_psnr_monotone_in_noise(gen):
    clean = torch.rand(3, 64, 64, generator=gen, dtype=torch.float64) * 0.6 + 0.2
    noise = torch.randn(clean.shape, generator=gen, dtype=torch.float64)
    values = [psnr(clean, clean + s / 255 * noise) for s in (5, 10, 25, 50)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_evaluate(gen):
    a = torch.rand(3, 16, 16, generator=gen)
    rep = evaluate(a, a)
    assert rep.psnr == 99.0 and rep.ssim == pytest.approx(1.0, abs=1e-6)
