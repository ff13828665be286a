import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference_check
from cyclerdm.errors import NumericalError, ParameterError, ShapeError
from cyclerdm.guidance import PromptPair, StubEncoder
from cyclerdm.losses import (
    LossWeights,
    clip_loss,
    clip_stage_term,
    content_loss,
    diff_loss,
    feature_distance,
    fre_loss,
    total_loss,
)
from cyclerdm.transforms import spectrum

ENC = StubEncoder()
PAIR = PromptPair("a clean noise-free photo", "a noisy grainy photo")
W = LossWeights()


def test_default_weights_exact():
    assert W.tau == (1.0, 1.0, 0.9)
    assert W.omega == (1.0, 1.0, 1.0, 1.0, 0.5)
    assert (W.vartheta1, W.vartheta2, W.gamma1, W.gamma2) == (0.5, 0.5, 0.2, 0.3)


def test_weight_validation():
    with pytest.raises(ParameterError):
        LossWeights(tau=(1, 1))
    with pytest.raises(ParameterError):
        LossWeights(gamma1=-0.1)


def unit_rms_pair(shape, gen):
    e = torch.randn(shape, generator=gen, dtype=torch.float64)
    d = torch.randn(shape, generator=gen, dtype=torch.float64)
    d = d / (d.square().mean().sqrt())
    return e, e + d


def test_diff_loss_constants(gen):
    pairs = [unit_rms_pair((2, 3, 8, 8), gen) for _ in range(3)]
    val = diff_loss([p[0] for p in pairs], [p[1] for p in pairs], W)
    assert float(val) == pytest.approx(2.9, abs=1e-12)
    e = [p[0] for p in pairs]
    assert float(diff_loss(e, e, W)) == 0.0


def test_diff_loss_loop_oracle(gen):
    et = [torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64) for _ in range(3)]
    ep = [torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64) for _ in range(3)]
    expected = 0.0
    for tau, a, b in zip(W.tau, et, ep):
        acc = 0.0
        for u, v in zip(a.reshape(-1).tolist(), b.reshape(-1).tolist()):
            acc += (u - v) ** 2
        expected += tau * math.sqrt(acc / a.numel())
    assert float(diff_loss(et, ep, W)) == pytest.approx(expected, rel=1e-12)


def test_diff_loss_disabled_stage_and_errors(gen):
    e = torch.randn(3, 4, 4, generator=gen, dtype=torch.float64)
    p = e + 1
    assert float(diff_loss([e, None, None], [p, None, None], W)) == pytest.approx(1.0)
    with pytest.raises(ShapeError):
        diff_loss([e], [torch.zeros(3, 4, 5, dtype=torch.float64)], W)
    with pytest.raises(ParameterError):
        diff_loss([None], [None], W)


def test_clip_term_symmetry():
    c = torch.tensor(0.3, dtype=torch.float64)
    assert 3 * float(clip_stage_term(c, c)) == 1.5


def test_clip_term_extreme():
    term = clip_stage_term(torch.tensor(1.0, dtype=torch.float64), torch.tensor(-1.0, dtype=torch.float64))
    assert float(term) == pytest.approx(math.exp(-1) / (math.exp(-1) + math.e), abs=1e-15)
    assert float(term) == pytest.approx(0.11920, abs=1e-5)
    assert 3 * float(term) == pytest.approx(0.35760, abs=1e-5)


def test_clip_monotonic_in_negative_similarity():
    cp = torch.tensor(0.2, dtype=torch.float64)
    values = [float(clip_stage_term(cp, torch.tensor(c, dtype=torch.float64))) for c in (0.9, 0.5, 0.0, -0.5, -0.9)]
    assert all(a > b for a, b in zip(values, values[1:]))


class FixedEncoder:
    """Encoder whose image embedding equals the text embedding of a chosen prompt."""

    def __init__(self, text):
        self.inner = StubEncoder()
        self.text = text

    def encode_text(self, prompt):
        return self.inner.encode_text(prompt)

    def encode_image(self, x):
        return self.inner.encode_text(self.text).expand(x.shape[0], -1)

    def image_layer_features(self, x):
        return self.inner.image_layer_features(x)


def test_clip_loss_equal_similarity_is_one_and_half(gen):
    # an embedding orthogonal to both prompt vectors has equal similarity to each
    class Orthogonal(FixedEncoder):
        def encode_image(self, x):
            a, b = self.encode_text(PAIR.positive), self.encode_text(PAIR.negative)
            v = torch.randn(64, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
            for u in (a, b - (b @ a) * a):
                u = u / u.norm()
                v = v - (v @ u) * u
            return (v / v.norm()).expand(x.shape[0], -1)

    xs = [torch.zeros(2, 3, 8, 8, dtype=torch.float64)] * 3
    assert float(clip_loss(xs, PAIR, Orthogonal(None))) == pytest.approx(1.5, abs=1e-12)


def test_clip_loss_terms_in_unit_interval(gen):
    xs = [torch.rand(2, 3, 16, 16, generator=gen) * 2 - 1 for _ in range(3)]
    value = float(clip_loss(xs, PAIR, ENC))
    assert 0 < value < 3
    near_pos = float(clip_loss(xs[:1], PAIR, FixedEncoder(PAIR.positive)))
    near_neg = float(clip_loss(xs[:1], PAIR, FixedEncoder(PAIR.negative)))
    assert 0 < near_pos < 0.5 < near_neg < 1


def test_content_loss_zero_when_equal(gen):
    gt = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64) * 2 - 1
    assert float(content_loss([gt, gt, gt], gt, gt, W, ENC)) == pytest.approx(0.0, abs=1e-12)


def test_content_loss_ssim_term(gen, monkeypatch):
    import cyclerdm.losses as L

    gt = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    monkeypatch.setattr(L, "ssim", lambda a, b: torch.tensor(0.9, dtype=torch.float64))
    assert float(content_loss([gt], gt, gt, W, ENC)) == pytest.approx(0.1, abs=1e-12)


def test_content_loss_omega_decomposition(gen):
    gt = torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64) * 2 - 1
    xs = [torch.rand(1, 3, 32, 32, generator=gen, dtype=torch.float64) * 2 - 1 for _ in range(3)]
    hq = xs[-1]
    # per-level oracle: unweighted level distances summed over stages
    levels = [0.0] * 5
    for x in xs:
        for lvl, (fa, fb) in enumerate(zip(ENC.image_layer_features(x), ENC.image_layer_features(gt))):
            levels[lvl] += float(((fa - fb) ** 2).mean().sqrt())
    base = float(content_loss(xs, hq, gt, W, ENC))
    omega2 = list(W.omega)
    omega2[4] *= 2
    doubled = float(content_loss(xs, hq, gt, LossWeights(omega=omega2), ENC))
    assert doubled - base == pytest.approx(W.omega[4] * levels[4], rel=1e-10)


def test_content_loss_shape_error():
    with pytest.raises(ShapeError):
        content_loss([torch.zeros(1, 3, 16, 16)], torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 16, 18), W, ENC)


def test_fre_loss_zero_and_shift(gen):
    hq = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    assert float(fre_loss(hq, hq, W)) == 0.0
    gt = torch.roll(hq, 1, dims=-1)
    s1, s2 = spectrum(hq), spectrum(gt)
    assert float((s1.amp - s2.amp).abs().mean()) < 1e-10
    assert float((s1.pha - s2.pha).abs().mean()) > 0
    assert float(fre_loss(hq, gt, W)) == pytest.approx(W.vartheta2 * float((s1.pha - s2.pha).abs().mean()), rel=1e-8)


def test_fre_loss_amplitude_scaling(gen):
    hq = torch.rand(1, 3, 8, 8, generator=gen, dtype=torch.float64) + 0.1
    zero = torch.zeros_like(hq)
    only_amp = LossWeights(vartheta2=0.0)
    assert float(fre_loss(2 * hq, zero, only_amp)) == pytest.approx(2 * float(fre_loss(hq, zero, only_amp)), rel=1e-12)
    with pytest.raises(ShapeError):
        fre_loss(hq, torch.zeros(1, 3, 8, 6), W)


def test_total_loss_constants():
    rep = total_loss(1.0, 1.0, 1.0, 1.0, W)
    assert rep.total == pytest.approx(2.5, abs=1e-15)
    assert total_loss(0.0, 0.0, 0.0, 0.0, W).total == 0.0
    with pytest.raises(NumericalError):
        total_loss(1.0, float("nan"), 1.0, 1.0, W)
    with pytest.raises(NumericalError):
        total_loss(torch.tensor(float("inf"), requires_grad=True), 1.0, 1.0, 1.0, W)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=4, max_size=4))
def test_total_loss_decomposition(parts):
    rep = total_loss(*parts, W)
    d, c, n, f = parts
    assert abs(rep.total - (d + W.gamma1 * c + n + W.gamma2 * f)) <= 1e-10 * max(1.0, rep.total)


def test_losses_nonnegative_finite(gen):
    for _ in range(5):
        a = torch.rand(1, 3, 16, 16, generator=gen) * 2 - 1
        b = torch.rand(1, 3, 16, 16, generator=gen) * 2 - 1
        for v in (diff_loss([a], [b], W), clip_loss([a], PAIR, ENC), content_loss([a], a, b, W, ENC), fre_loss(a, b, W)):
            assert math.isfinite(float(v)) and float(v) >= 0


# central-difference gradient checks, double precision, 4x4 inputs, stub encoder


def test_grad_diff_loss(gen):
    target = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    x = torch.randn(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    err, _, _ = central_difference_check(lambda v: diff_loss([target, target, target], [v, 0.5 * v, v * v], W), x)
    assert err < 1e-3


def test_grad_clip_loss(gen):
    x = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64) * 2 - 1
    err, _, _ = central_difference_check(lambda v: clip_loss([v, 0.5 * v, v.tanh()], PAIR, ENC), x)
    assert err < 1e-3


def test_grad_content_feature_term(gen):
    gt = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64) * 2 - 1
    x = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64) * 2 - 1
    err, _, _ = central_difference_check(lambda v: feature_distance(ENC, v, gt, W.omega), x)
    assert err < 1e-3


def test_grad_content_loss_full(gen):
    # the SSIM term needs at least an 11x11 window, so the full loss is probed at 12x12
    gt = torch.rand(1, 3, 12, 12, generator=gen, dtype=torch.float64) * 2 - 1
    x = torch.rand(1, 3, 12, 12, generator=gen, dtype=torch.float64) * 2 - 1
    err, _, _ = central_difference_check(lambda v: content_loss([v, 0.9 * v], v, gt, W, ENC), x)
    assert err < 1e-3


def test_grad_fre_loss(gen):
    gt = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    x = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    err, _, _ = central_difference_check(lambda v: fre_loss(v, gt, W), x, h=1e-7)
    assert err < 1e-3


def test_grad_total_is_weighted_sum_of_parts(gen):
    gt = torch.rand(1, 3, 12, 12, generator=gen, dtype=torch.float64) * 2 - 1
    e = torch.randn(1, 3, 12, 12, generator=gen, dtype=torch.float64)
    x = torch.rand(1, 3, 12, 12, generator=gen, dtype=torch.float64) * 2 - 1

    def parts(v):
        return (diff_loss([e], [v], W), clip_loss([v], PAIR, ENC), content_loss([v], v, gt, W, ENC), fre_loss(v, gt, W))

    err, g_total, _ = central_difference_check(lambda v: total_loss(*parts(v), W).total, x, h=1e-7)
    assert err < 1e-3
    xg = x.clone().requires_grad_(True)
    grads = [torch.autograd.grad(p, xg)[0] for p in parts(xg)]
    combo = grads[0] + W.gamma1 * grads[1] + grads[2] + W.gamma2 * grads[3]
    torch.testing.assert_close(g_total, combo, rtol=1e-9, atol=1e-12)
