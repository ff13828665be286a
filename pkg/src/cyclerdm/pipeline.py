"""Three-stage conditional diffusion restoration and its joint training step.

Stage 1 maps the degraded input to a rough estimate, Stage 2 refines that
estimate, and Stage 3 calibrates the wavelet low band of the Stage-2 result
while the feature gain module cleans the detail subbands. Stage boundaries
carry no gradients.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn

from .errors import NumericalError, ParameterError, ShapeError
from .guidance import Encoder, PromptPair, StubEncoder
from .losses import LossReport, LossWeights, clip_loss, content_loss, diff_loss, fre_loss, total_loss
from .networks import (
    Denoiser,
    DenoiserSpec,
    FeatureGainModule,
    FgmSpec,
    OracleDenoiser,
    fgm_apply_all,
)
from .schedule import NoiseSchedule, ddim_step, make_linear_schedule, q_sample, sampling_timesteps
from .transforms import dwt, idwt

log = logging.getLogger(__name__)

# Table-5 style stage configurations: (stage1, stage2, stage3).
ABLATION_CONFIGS = {
    1: (True, False, False),
    2: (True, True, False),
    3: (True, False, True),
    4: (True, True, True),
}

# Haar low band of an image in [-1, 1] lies in [-2, 2].
LOW_BAND_CLIP = 2.0


@dataclass(frozen=True)
class PipelineConfig:
    T: int = 200
    sample_steps: int = 10
    stage3_t_max: int = 50
    value_range: tuple[float, float] = (-1.0, 1.0)
    ablation_mask: tuple[bool, bool, bool] = (True, True, True)
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    eta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "ablation_mask", tuple(bool(m) for m in self.ablation_mask))
        object.__setattr__(self, "value_range", tuple(float(v) for v in self.value_range))
        if len(self.ablation_mask) != 3:
            raise ParameterError(f"ablation_mask needs 3 entries, got {len(self.ablation_mask)}")
        if not self.ablation_mask[0]:
            raise ParameterError("stage 1 cannot be disabled")
        if not (1 <= self.sample_steps <= self.stage3_t_max <= self.T):
            raise ParameterError(
                f"need 1 <= sample_steps <= stage3_t_max <= T, got "
                f"{self.sample_steps}, {self.stage3_t_max}, {self.T}"
            )

    @classmethod
    def ablation(cls, index: int, **kwargs) -> "PipelineConfig":
        if index not in ABLATION_CONFIGS:
            raise ParameterError(f"unknown ablation config #{index}; expected one of {sorted(ABLATION_CONFIGS)}")
        return cls(ablation_mask=ABLATION_CONFIGS[index], **kwargs)

    def schedule(self) -> NoiseSchedule:
        return make_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass
class StageOutputs:
    x1_0: torch.Tensor
    x2_0: torch.Tensor
    L_hat: torch.Tensor
    H_hat: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    HQ: torch.Tensor


@dataclass
class TrainState:
    schedule: NoiseSchedule
    net12: nn.Module
    net3: nn.Module
    fgm: FeatureGainModule
    optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def modules(self) -> dict[str, nn.Module]:
        return {"net12": self.net12, "net3": self.net3, "fgm": self.fgm}

    def named_parameters(self):
        for prefix, mod in self.modules().items():
            for name, p in mod.named_parameters():
                yield f"{prefix}.{name}", p

    def set_train(self, flag: bool):
        for mod in self.modules().values():
            mod.train(flag)


def init_state(
    cfg: PipelineConfig = PipelineConfig(),
    *,
    seed: int = 0,
    learning_rate: float = 1e-4,
    denoiser: DenoiserSpec | None = None,
    stage3: DenoiserSpec | None = None,
    fgm: FgmSpec | None = None,
) -> TrainState:
    """Fresh parameters (seeded) and an Adam optimizer over all of them."""
    denoiser = denoiser or DenoiserSpec()
    stage3 = stage3 or DenoiserSpec(
        in_channels=3, cond_channels=6, base_width=denoiser.base_width, depth=max(1, denoiser.depth - 1),
        time_embed_dim=denoiser.time_embed_dim, stage_embed=False, precondition=denoiser.precondition,
    )
    if stage3.cond_channels != 2 * stage3.in_channels:
        raise ShapeError("stage-3 condition holds two low bands: cond_channels must equal 2 * in_channels")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        schedule = cfg.schedule()
        state = TrainState(
            schedule=schedule,
            net12=Denoiser(denoiser, schedule),
            net3=Denoiser(stage3, schedule),
            fgm=FeatureGainModule(fgm or FgmSpec()),
            seed=seed,
        )
    state.optimizer = make_optimizer(state, learning_rate)
    return state


def make_optimizer(state: TrainState, learning_rate: float) -> torch.optim.Adam:
    params = [p for _, p in state.named_parameters()]
    return torch.optim.Adam(params, lr=learning_rate)


def oracle_state(
    cfg: PipelineConfig = PipelineConfig(),
    target: torch.Tensor | None = None,
    *,
    schedule: NoiseSchedule | None = None,
    fgm: FeatureGainModule | None = None,
) -> TrainState:
    """Inference state whose noise predictors know the clean answer.

    Without ``target`` each stage treats the first three condition channels as
    clean, so a clean input passes through unchanged. With ``target`` (model
    range, batch-shaped) every stage reconstructs it exactly.
    """
    s = schedule or cfg.schedule()
    low = dwt(target).L if target is not None else None
    return TrainState(
        schedule=s,
        net12=OracleDenoiser(s, 3, target),
        net3=OracleDenoiser(s, 3, low),
        fgm=fgm or FeatureGainModule(FgmSpec(growth=8, dense_layers=1)),
        meta={"kind": "oracle"},
    )


def mix_seed(*parts: int) -> int:
    h = hashlib.blake2b(",".join(str(int(p)) for p in parts).encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little") & 0x7FFF_FFFF_FFFF_FFFF


def element_noise(shape, seed: int, tag: int, dtype=torch.float32) -> torch.Tensor:
    """Standard normal noise whose element ``i`` depends only on ``(seed, tag, i)``."""
    out = torch.empty(shape, dtype=dtype)
    for i in range(shape[0]):
        g = torch.Generator().manual_seed(mix_seed(seed, tag, i))
        out[i] = torch.randn(shape[1:], generator=g, dtype=dtype)
    return out


def element_timesteps(n: int, high: int, seed: int, tag: int) -> torch.Tensor:
    return torch.tensor(
        [int(torch.randint(0, high, (), generator=torch.Generator().manual_seed(mix_seed(seed, tag, i))))
         for i in range(n)],
        dtype=torch.long,
    )


def _finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalError(f"non-finite values produced in {where}")
    return x


def sample_conditional(
    net: nn.Module,
    cond: torch.Tensor,
    stage: int,
    start: torch.Tensor,
    t_start: int,
    steps: int,
    s: NoiseSchedule,
    *,
    clip: float = 1.0,
    eta: float = 0.0,
    return_last_input: bool = False,
    visited: list | None = None,
):
    """Deterministic implicit sampling from ``x_{t_start}`` down to a clamped x0 estimate.

    With ``return_last_input`` the final update is skipped and
    ``(x_at_last_t, last_t)`` is returned so a caller can replay it with gradients.
    """
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    ts = sampling_timesteps(s.T, steps, t_start + 1)
    if visited is not None:
        visited.extend(ts)
    x = start
    last = len(ts) - 1
    for i, t in enumerate(ts):
        if return_last_input and i == last:
            return x, t
        t_prev = ts[i + 1] if i < last else None
        eps = net(x, t, cond, stage)
        x = ddim_step(x, eps, t, t_prev, eta, s, clip=clip)
    return x.clamp(-clip, clip)


def _stage_clip(cfg: PipelineConfig) -> float:
    return max(abs(cfg.value_range[0]), abs(cfg.value_range[1]))


def _run_stages(lq: torch.Tensor, state: TrainState, cfg: PipelineConfig, seed: int, grad_tail: bool):
    s = state.schedule
    use2, use3 = cfg.ablation_mask[1], cfg.ablation_mask[2]
    clip = _stage_clip(cfg)
    with torch.no_grad():
        x1 = sample_conditional(
            state.net12, lq, 1, element_noise(lq.shape, seed, 1, lq.dtype), s.T - 1, cfg.sample_steps, s,
            clip=clip, eta=cfg.eta,
        )
        _finite(x1, "stage 1")
        if use2:
            x2 = sample_conditional(
                state.net12, x1, 2, element_noise(lq.shape, seed, 2, lq.dtype), s.T - 1, cfg.sample_steps, s,
                clip=clip, eta=cfg.eta,
            )
            _finite(x2, "stage 2")
        else:
            x2 = x1
        dec = dwt(x2)
        if not use3:
            return x1, x2, dec.L, dec.H, x2
        low_lq = dwt(lq).L
        cond3 = torch.cat([dec.L, low_lq], dim=1)
        t3 = cfg.stage3_t_max - 1
        start = q_sample(dec.L, t3, element_noise(dec.L.shape, seed, 3, lq.dtype), s)
        low_clip = LOW_BAND_CLIP * clip
        x_last, t_last = sample_conditional(
            state.net3, cond3, 3, start, t3, cfg.sample_steps, s, clip=low_clip, eta=cfg.eta,
            return_last_input=True,
        )
    with torch.set_grad_enabled(grad_tail and torch.is_grad_enabled()):
        eps = state.net3(x_last, t_last, cond3, 3)
        L_hat = ddim_step(x_last, eps, t_last, None, 0.0, s, clip=low_clip).clamp(-low_clip, low_clip)
        _finite(L_hat, "stage 3 low band")
        H_hat = fgm_apply_all(state.fgm, dec.H)
        HQ = idwt(L_hat, H_hat)
        _finite(HQ, "stage 3 reconstruction")
    return x1, x2, L_hat, H_hat, HQ


def _check_input(lq: torch.Tensor) -> torch.Tensor:
    if lq.ndim == 3:
        lq = lq[None]
    if lq.ndim != 4:
        raise ShapeError(f"expected (N, C, H, W) or (C, H, W) input, got {tuple(lq.shape)}")
    h, w = lq.shape[-2:]
    if h % 2 or w % 2 or h < 16 or w < 16:
        raise ShapeError(f"input spatial dims must be even and >= 16, got {h}x{w}")
    return _finite(lq, "input")


def restore(
    LQ: torch.Tensor,
    state: TrainState,
    cfg: PipelineConfig = PipelineConfig(),
    pair: PromptPair | None = None,
    *,
    seed: int = 0,
) -> StageOutputs:
    """Run inference on a batch in the model range ``[-1, 1]``.

    ``pair`` is accepted for symmetry with training; prompts steer the model
    only through the training losses. When Stage 3 is disabled, ``HQ`` is the
    last enabled stage output and ``L_hat``/``H_hat`` are its wavelet bands.
    """
    lq = _check_input(LQ)
    state.set_train(False)
    with torch.no_grad():
        x1, x2, L_hat, H_hat, HQ = _run_stages(lq, state, cfg, seed, grad_tail=False)
    return StageOutputs(x1, x2, L_hat, tuple(H_hat), HQ)


def _stack_batch(batch):
    if not batch:
        raise ParameterError("batch must be non-empty")
    lqs, gts, pairs = zip(*batch)
    for lq, gt in zip(lqs, gts):
        if lq.shape != gt.shape:
            raise ShapeError(f"LQ shape {tuple(lq.shape)} does not match GT {tuple(gt.shape)}")
    return _check_input(torch.stack(lqs)), torch.stack(gts).to(lqs[0].dtype), list(pairs)


def compute_losses(
    batch,
    state: TrainState,
    w: LossWeights,
    cfg: PipelineConfig,
    encoder: Encoder,
) -> LossReport:
    """Differentiable loss report for one batch at ``state.step`` (no update)."""
    lq, gt, pairs = _stack_batch(batch)
    s = state.schedule
    step_seed = mix_seed(state.seed, state.step)
    use2, use3 = cfg.ablation_mask[1], cfg.ablation_mask[2]
    x1, x2, L_hat, H_hat, HQ = _run_stages(lq, state, cfg, step_seed, grad_tail=True)

    n = lq.shape[0]
    t1 = element_timesteps(n, s.T, step_seed, 11)
    e1 = element_noise(gt.shape, step_seed, 21, gt.dtype)
    eps_true, eps_pred = [e1, None, None], [state.net12(q_sample(gt, t1, e1, s), t1, lq, 1), None, None]
    if use2:
        t2 = element_timesteps(n, s.T, step_seed, 12)
        e2 = element_noise(gt.shape, step_seed, 22, gt.dtype)
        eps_true[1], eps_pred[1] = e2, state.net12(q_sample(gt, t2, e2, s), t2, x1, 2)
    if use3:
        low_gt = dwt(gt).L
        t3 = element_timesteps(n, cfg.stage3_t_max, step_seed, 13)
        e3 = element_noise(low_gt.shape, step_seed, 23, gt.dtype)
        cond3 = torch.cat([dwt(x2).L, dwt(lq).L], dim=1)
        eps_true[2], eps_pred[2] = e3, state.net3(q_sample(low_gt, t3, e3, s), t3, cond3, 3)
    l_diff = diff_loss(eps_true, eps_pred, w)

    images = [x1] + ([x2] if use2 else []) + ([HQ] if use3 else [])
    l_clip = 0.0
    groups: dict[PromptPair, list[int]] = {}
    for i, p in enumerate(pairs):
        groups.setdefault(p, []).append(i)
    for pair, idx in groups.items():
        sel = torch.tensor(idx)
        l_clip = l_clip + clip_loss([im[sel] for im in images], pair, encoder) * (len(idx) / n)
    l_content = content_loss(images, HQ, gt, w, encoder)
    l_fre = fre_loss(HQ, gt, w)
    return total_loss(l_diff, l_clip, l_content, l_fre, w)


def train_step(
    batch,
    state: TrainState,
    w: LossWeights = LossWeights(),
    cfg: PipelineConfig = PipelineConfig(),
    encoder: Encoder | None = None,
    *,
    grad_clip: float | None = 1.0,
) -> tuple[TrainState, LossReport]:
    """One Adam update of every trainable parameter on the total loss.

    Gradients are clipped to a global norm of ``grad_clip`` (``None`` disables).
    A non-finite loss raises :class:`NumericalError` before any parameter or
    optimizer state is touched.
    """
    if state.optimizer is None:
        raise ParameterError("state has no optimizer; build it with init_state or load a trainable checkpoint")
    encoder = encoder or StubEncoder()
    state.set_train(True)
    try:
        report = compute_losses(batch, state, w, cfg, encoder)
    except NumericalError as exc:
        raise NumericalError(f"step {state.step}: {exc}") from exc
    if not torch.isfinite(torch.as_tensor(report.total)).all():
        raise NumericalError(f"non-finite total loss at step {state.step}")
    state.optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_([p for _, p in state.named_parameters()], grad_clip)
    state.optimizer.step()
    state.step += 1
    return state, LossReport(**report.as_floats())


@dataclass
class TrainingData:
    """Images of a manifest held in memory, in the model range."""

    lq: list[torch.Tensor]
    gt: list[torch.Tensor]
    pairs: list[PromptPair]

    @classmethod
    def from_manifest(cls, manifest) -> "TrainingData":
        from .dataops import load_png, to_model_range

        lq, gt, pairs = [], [], []
        for rec in manifest.records:
            lq.append(to_model_range(load_png(manifest.resolve(rec.lq))))
            gt.append(to_model_range(load_png(manifest.resolve(rec.gt))))
            pairs.append(PromptPair(rec.prompt_pos, rec.prompt_neg))
        return cls(lq, gt, pairs)

    def __len__(self):
        return len(self.gt)


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def batch_for_step(data: TrainingData, step: int, seed: int, batch_size: int, patch_size: int):
    """The batch drawn at global ``step``; a pure function of its arguments."""
    from .dataops import sample_patch

    spe = steps_per_epoch(len(data), batch_size)
    epoch, pos = divmod(step, spe)
    perm = torch.randperm(len(data), generator=torch.Generator().manual_seed(mix_seed(seed, 7, epoch)))
    batch = []
    for j in perm[pos * batch_size:(pos + 1) * batch_size].tolist():
        lq, gt = sample_patch(data.lq[j], data.gt[j], patch_size, mix_seed(seed, 8, step, j))
        batch.append((lq, gt, data.pairs[j]))
    return batch


def fit(
    manifest,
    state: TrainState,
    cfg: PipelineConfig,
    epochs: int,
    *,
    weights: LossWeights = LossWeights(),
    batch_size: int = 4,
    patch_size: int = 128,
    encoder: Encoder | None = None,
    max_steps: int | None = None,
    checkpoint_every: int = 0,
    checkpoint_fn: Callable[[TrainState], None] | None = None,
    on_step: Callable[[int, LossReport], None] | None = None,
    grad_clip: float | None = 1.0,
) -> TrainState:
    """Epoch loop over shuffled patches, resumable from ``state.step``.

    ``manifest`` may be a :class:`~cyclerdm.dataops.Manifest` or preloaded
    :class:`TrainingData`. Batch order and noise depend only on
    ``(state.seed, step)``, so a resumed run replays an uninterrupted one.
    """
    data = manifest if isinstance(manifest, TrainingData) else TrainingData.from_manifest(manifest)
    if len(data) == 0:
        raise ParameterError("manifest is empty")
    encoder = encoder or StubEncoder()
    end = epochs * steps_per_epoch(len(data), batch_size)
    if max_steps is not None:
        end = min(end, max_steps)
    while state.step < end:
        batch = batch_for_step(data, state.step, state.seed, batch_size, patch_size)
        _, report = train_step(batch, state, weights, cfg, encoder, grad_clip=grad_clip)
        if on_step is not None:
            on_step(state.step, report)
        if checkpoint_fn is not None and checkpoint_every and state.step % checkpoint_every == 0:
            checkpoint_fn(state)
    if checkpoint_fn is not None:
        checkpoint_fn(state)
    return state


def restore_images(
    images: Sequence[torch.Tensor],
    state: TrainState,
    cfg: PipelineConfig,
    *,
    seed: int = 0,
    batch_size: int = 8,
) -> list[StageOutputs]:
    """Restore a list of same-shaped model-range images in chunks, one StageOutputs per chunk."""
    out = []
    for i in range(0, len(images), batch_size):
        out.append(restore(torch.stack(list(images[i:i + batch_size])), state, cfg, seed=mix_seed(seed, i)))
    return out
