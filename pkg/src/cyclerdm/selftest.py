"""Fast built-in invariant checks behind ``cyclerdm selftest``."""

from __future__ import annotations

import math
import tempfile
import traceback
from pathlib import Path

import numpy as np
import torch

from . import dataops, guidance, losses, metrics, networks, pipeline, schedule, transforms

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def _close(a, b, tol):
    assert float((torch.as_tensor(a) - torch.as_tensor(b)).abs().max()) <= tol, f"difference exceeds {tol}"


@check
def schedule_invariants():
    s = schedule.make_linear_schedule(200)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all(np.diff(s.snr()) < 0)
    assert s.alpha_bars[0] == s.alphas[0]
    assert np.all(s.posterior_sigmas >= 0)


@check
def forward_closed_form_matches_composed_steps():
    s = schedule.make_linear_schedule(200)
    k = 50
    mean = math.prod(math.sqrt(1 - b) for b in s.betas[: k + 1])
    var = 0.0
    for b in s.betas[: k + 1]:
        var = (1 - b) * var + b
    assert abs(mean - math.sqrt(s.alpha_bars[k])) < 1e-12
    assert abs(var - (1 - s.alpha_bars[k])) < 1e-12


@check
def predict_x0_inverts_q_sample():
    s = schedule.make_linear_schedule(200)
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    e = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    for t in (0, 100, 199):
        _close(schedule.predict_x0(schedule.q_sample(x0, t, e, s), e, t, s), x0, 1e-10)


@check
def oracle_ddim_trajectory_recovers_x0():
    s = schedule.make_linear_schedule(200)
    g = torch.Generator().manual_seed(1)
    x0 = torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    x = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    ts = schedule.sampling_timesteps(200, 10, 200)
    for i, t in enumerate(ts):
        eps = networks.oracle_eps(x0, x, t, s)
        x = schedule.ddim_step(x, eps, t, ts[i + 1] if i + 1 < len(ts) else None, 0.0, s)
    _close(x, x0, 1e-5)


@check
def wavelet_perfect_reconstruction_and_energy():
    g = torch.Generator().manual_seed(2)
    x = torch.randn(3, 64, 64, generator=g, dtype=torch.float64)
    d = transforms.dwt(x)
    _close(transforms.idwt(d.L, d.H), x, 1e-10)
    energy = float(d.L.square().sum() + sum(h.square().sum() for h in d.H))
    assert abs(energy - float(x.square().sum())) <= 1e-10 * energy


@check
def spectrum_conjugate_symmetry():
    g = torch.Generator().manual_seed(3)
    x = torch.randn(3, 16, 16, generator=g, dtype=torch.float64)
    amp = transforms.spectrum(x).amp
    flipped = torch.roll(torch.flip(amp, dims=(-2, -1)), shifts=(1, 1), dims=(-2, -1))
    _close(amp, flipped, 1e-10)


@check
def fgm_identity_at_init():
    torch.manual_seed(0)
    fgm = networks.FeatureGainModule(networks.FgmSpec(growth=8, dense_layers=1))
    x = torch.randn(2, 3, 8, 8)
    assert torch.equal(fgm(x), x)


@check
def denoiser_shape_and_determinism():
    torch.manual_seed(0)
    s = schedule.make_linear_schedule(200)
    net = networks.Denoiser(networks.DenoiserSpec(base_width=8, depth=2, time_embed_dim=16), s)
    x = torch.randn(1, 3, 16, 16)
    a, b = net(x, 10, x, 1), net(x, 10, x, 1)
    assert a.shape == x.shape and torch.equal(a, b)


@check
def stub_encoder_contract():
    enc = guidance.StubEncoder()
    e = enc.encode_text("a well-lit photo")
    assert torch.equal(e, enc.encode_text("a well-lit photo"))
    assert abs(float(e.norm()) - 1) < 1e-6
    z = enc.encode_image(torch.rand(2, 3, 32, 32) * 2 - 1)
    _close(z.norm(dim=1), torch.ones(2, dtype=z.dtype), 1e-6)
    sizes = [f.shape[-1] for f in enc.image_layer_features(torch.zeros(1, 3, 64, 64))]
    assert sizes == [64, 32, 16, 8, 4]


@check
def loss_constants():
    w = losses.LossWeights()
    ones = [torch.ones(4, 4, dtype=torch.float64) for _ in range(3)]
    zeros = [torch.zeros(4, 4, dtype=torch.float64) for _ in range(3)]
    assert abs(float(losses.diff_loss(ones, zeros, w)) - 2.9) < 1e-12
    assert abs(float(losses.total_loss(1.0, 1.0, 1.0, 1.0, w).total) - 2.5) < 1e-12
    c = torch.tensor(0.3, dtype=torch.float64)
    assert abs(3 * float(losses.clip_stage_term(c, c)) - 1.5) < 1e-12


@check
def metric_oracles():
    a = torch.zeros(3, 16, 16, dtype=torch.float64)
    assert abs(metrics.psnr(a, a + 0.1) - 20.0) < 1e-9
    assert metrics.psnr(a, a) == metrics.PSNR_CAP
    x = torch.rand(3, 16, 16, dtype=torch.float64)
    assert abs(float(metrics.ssim(x, x)) - 1) < 1e-6


@check
def degradation_determinism():
    gt = dataops.synthetic_image(32, 0)
    for task in dataops.TASK_PARAMS:
        spec = dataops.DegradationSpec(task, seed=5)
        a, b = dataops.degrade(gt, spec), dataops.degrade(gt, spec)
        assert torch.equal(a, b) and float(a.min()) >= 0 and float(a.max()) <= 1, task


@check
def oracle_restore_identity():
    cfg = pipeline.PipelineConfig()
    gt = dataops.to_model_range(torch.stack([dataops.synthetic_image(32, i) for i in range(2)]))
    out = pipeline.restore(gt, pipeline.oracle_state(cfg, gt), cfg)
    _close(out.HQ, gt, 1e-4)
    assert torch.equal(out.HQ, transforms.idwt(out.L_hat, out.H_hat))


@check
def checkpoint_round_trip():
    from .cli.checkpoint import load_checkpoint, save_checkpoint

    cfg = pipeline.PipelineConfig()
    state = pipeline.init_state(
        cfg, seed=3, denoiser=networks.DenoiserSpec(base_width=8, depth=1, time_embed_dim=16),
        fgm=networks.FgmSpec(growth=8, dense_layers=1),
    )
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "s.crdm"
        save_checkpoint(path, state)
        loaded = load_checkpoint(path)
    for (n1, p1), (n2, p2) in zip(state.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2), n1


@check
def config_round_trip():
    from .cli.config import RunConfig

    cfg = RunConfig(seed=9, patch_size=32)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


@check
def sampling_timesteps_contract():
    ts = schedule.sampling_timesteps(200, 10, 200)
    assert len(ts) == 10 and ts[0] == 199 and ts[-1] == 0
    assert all(a > b for a, b in zip(ts, ts[1:]))


@check
def fre_loss_shift_theorem():
    x = dataops.synthetic_image(16, 2).double()[None]
    y = torch.roll(x, 1, dims=-1)
    sx, sy = transforms.spectrum(x), transforms.spectrum(y)
    _close(sx.amp, sy.amp, 1e-9)
    assert float(losses.fre_loss(x, y)) > 0 and float(losses.fre_loss(x, x)) == 0


@check
def metric_symmetry():
    g = torch.Generator().manual_seed(1)
    a = torch.rand(3, 16, 16, generator=g, dtype=torch.float64)
    b = torch.rand(3, 16, 16, generator=g, dtype=torch.float64)
    assert metrics.psnr(a, b) == metrics.psnr(b, a)
    assert abs(float(metrics.ssim(a, b) - metrics.ssim(b, a))) < 1e-10


@check
def prompt_registry_complete():
    for task in guidance.TASKS:
        pair = guidance.prompts_for_task(task)
        assert pair.positive != pair.negative
    assert guidance.registry_from_dict(guidance.registry_to_dict(guidance.DEFAULT_PROMPTS)) == guidance.DEFAULT_PROMPTS


@check
def patch_alignment():
    gt = dataops.synthetic_image(32, 4)
    spec = dataops.DegradationSpec("dehaze", seed=2)
    lq = dataops.degrade(gt, spec)
    p_lq, p_gt = dataops.sample_patch(lq, gt, 16, 7)
    _close(dataops.degrade(p_gt, spec), p_lq, 1e-6)


@check
def manifest_round_trip():
    with tempfile.TemporaryDirectory() as tmp:
        gts = [dataops.synthetic_image(16, i) for i in range(2)]
        path = dataops.make_paired_dataset(tmp, gts, dataops.DegradationSpec("denoise", seed=1),
                                           guidance.prompts_for_task("denoise"))
        m = dataops.read_manifest(path)
        assert len(m) == 2 and all(r.task == "denoise" for r in m.records)


@check
def stage3_half_resolution_and_ablation():
    cfg = pipeline.PipelineConfig()
    state = pipeline.init_state(
        cfg, denoiser=networks.DenoiserSpec(base_width=8, depth=1, time_embed_dim=16, patchify=2),
        fgm=networks.FgmSpec(rdb_channels=8, growth=4, dense_layers=1),
    )
    lq = dataops.to_model_range(dataops.synthetic_image(16, 3))[None]
    out = pipeline.restore(lq, state, cfg)
    assert out.L_hat.shape[-2:] == (8, 8)
    one = pipeline.PipelineConfig.ablation(1)
    out1 = pipeline.restore(lq, state, one)
    assert torch.equal(out1.HQ, out1.x1_0)


@check
def zero_lr_step_is_null_update():
    cfg = pipeline.PipelineConfig()
    state = pipeline.init_state(
        cfg, learning_rate=0.0, denoiser=networks.DenoiserSpec(base_width=8, depth=1, time_embed_dim=16, patchify=2),
        fgm=networks.FgmSpec(rdb_channels=8, growth=4, dense_layers=1),
    )
    before = {k: p.detach().clone() for k, p in state.named_parameters()}
    gt = dataops.synthetic_image(16, 5)
    lq = dataops.degrade(gt, dataops.DegradationSpec("denoise", {"sigma": 25}, seed=1))
    batch = [(dataops.to_model_range(lq), dataops.to_model_range(gt), guidance.prompts_for_task("denoise"))]
    _, rep = pipeline.train_step(batch, state)
    parts = rep.as_floats()
    assert abs(parts["total"] - (parts["diff"] + 0.2 * parts["clip"] + parts["content"] + 0.3 * parts["fre"])) < 1e-8 * max(1, parts["total"])
    for k, p in state.named_parameters():
        assert torch.equal(before[k], p), k


def run_all(verbose: bool = False) -> tuple[int, int]:
    passed = failed = 0
    for fn in CHECKS:
        try:
            fn()
        except Exception:  # noqa: BLE001 - report every failure and continue
            failed += 1
            if verbose:
                print(f"FAIL {fn.__name__}")
                traceback.print_exc()
        else:
            passed += 1
            if verbose:
                print(f"ok   {fn.__name__}")
    return passed, failed
