"""Learnable components: conditional noise predictors and the feature gain module."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import NumericalError, ParameterError, ShapeError
from .schedule import MIN_ALPHA_BAR, NoiseSchedule

STAGES = (1, 2, 3)


@dataclass(frozen=True)
class DenoiserSpec:
    in_channels: int = 3
    cond_channels: int = 3
    base_width: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    stage_embed: bool = True
    patchify: int = 1
    precondition: bool = True
    sigma_data: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FgmSpec:
    head_kernel: int = 5
    rdb_count: int = 4
    rdb_channels: int = 64
    out_channels: int = 3
    growth: int = 32
    dense_layers: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(x))
        h = h + self.temb(emb)[:, :, None, None]
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Small encoder-decoder predicting noise from ``(x_t, t, cond, stage)``.

    The condition is concatenated with ``x_t`` at the input. A learned stage
    embedding is added to the time embedding when ``spec.stage_embed`` is set,
    which lets one network serve several stages. ``patchify > 1`` folds
    ``patchify x patchify`` pixel blocks into channels before the first conv
    (and unfolds at the end), trading resolution for speed.

    With ``spec.precondition`` (needs ``schedule``) the body predicts a
    well-scaled clean-signal correction and the noise is derived from it:
    with ``y = x_t / sqrt(ab)`` and ``sigma^2 = (1 - ab) / ab``,
    ``x0 = c_skip y + c_out F(c_in y, ...)`` and ``eps = (y - x0) / sigma``.
    """

    def __init__(self, spec: DenoiserSpec = DenoiserSpec(), schedule: NoiseSchedule | None = None):
        super().__init__()
        if spec.precondition:
            if schedule is None:
                raise ParameterError("a preconditioned denoiser needs the noise schedule")
            self.register_buffer(
                "alpha_bars", torch.tensor(schedule.alpha_bars, dtype=torch.float64), persistent=False
            )
        else:
            self.alpha_bars = None
        if spec.depth < 1:
            raise ParameterError(f"depth must be >= 1, got {spec.depth}")
        if spec.patchify < 1:
            raise ParameterError(f"patchify must be >= 1, got {spec.patchify}")
        self.spec = spec
        w, d, e = spec.base_width, spec.depth, spec.time_embed_dim
        widths = [w * min(2**i, 4) for i in range(d + 1)]
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.stage_emb = nn.Embedding(len(STAGES), e) if spec.stage_embed else None
        p2 = spec.patchify**2
        self.inp = nn.Conv2d((spec.in_channels + spec.cond_channels) * p2, w, 3, padding=1)
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i in range(d):
            self.down_blocks.append(ResBlock(widths[i], widths[i], e))
            self.downsamples.append(nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1))
        self.mid = ResBlock(widths[d], widths[d], e)
        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        for i in reversed(range(d)):
            self.upsamples.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            self.up_blocks.append(ResBlock(2 * widths[i], widths[i], e))
        self.out = nn.Conv2d(w, spec.in_channels * p2, 3, padding=1)

    def forward(self, x_t: torch.Tensor, t, cond: torch.Tensor, stage: int) -> torch.Tensor:
        spec = self.spec
        if stage not in STAGES:
            raise ParameterError(f"unknown stage {stage!r}; expected one of {STAGES}")
        if x_t.ndim != 4 or x_t.shape[1] != spec.in_channels:
            raise ShapeError(f"x_t must be (N, {spec.in_channels}, H, W), got {tuple(x_t.shape)}")
        if cond.ndim != 4 or cond.shape[1] != spec.cond_channels:
            raise ShapeError(f"cond must have {spec.cond_channels} channels, got {tuple(cond.shape)}")
        if cond.shape[0] != x_t.shape[0] or cond.shape[2:] != x_t.shape[2:]:
            raise ShapeError(f"cond shape {tuple(cond.shape)} incompatible with x_t {tuple(x_t.shape)}")
        n = x_t.shape[0]
        t = torch.as_tensor(t, device=x_t.device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(n)
        emb = timestep_embedding(t, spec.time_embed_dim).to(x_t.dtype)
        emb = self.time_mlp(emb)
        if self.stage_emb is not None:
            idx = torch.full((n,), stage - 1, dtype=torch.long, device=x_t.device)
            emb = emb + self.stage_emb(idx)

        if self.alpha_bars is not None:
            ab = self.alpha_bars[t.long()].reshape(-1, 1, 1, 1).to(x_t.dtype)
            sig2 = (1 - ab) / ab
            sd2 = spec.sigma_data**2
            y = x_t / ab.sqrt()
            c_in = 1 / (sig2 + sd2).sqrt()
            c_skip = sd2 / (sig2 + sd2)
            c_out = sig2.sqrt() * spec.sigma_data / (sig2 + sd2).sqrt()
            x0 = c_skip * y + c_out * self._body(c_in * y, emb, cond)
            return (y - x0) / sig2.sqrt()
        return self._body(x_t, emb, cond)

    def _body(self, x, emb, cond):
        spec = self.spec
        h = torch.cat([x, cond], dim=1)
        if spec.patchify > 1:
            if h.shape[-1] % spec.patchify or h.shape[-2] % spec.patchify:
                raise ShapeError(f"spatial dims {tuple(h.shape[-2:])} not divisible by patchify={spec.patchify}")
            h = F.pixel_unshuffle(h, spec.patchify)
        h = self.inp(h)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        for up, block in zip(self.upsamples, self.up_blocks):
            skip = skips.pop()
            h = up(F.interpolate(h, size=skip.shape[-2:], mode="nearest"))
            h = block(torch.cat([h, skip], dim=1), emb)
        out = self.out(F.silu(h))
        return F.pixel_shuffle(out, spec.patchify) if spec.patchify > 1 else out


def eps_predict(net: nn.Module, x_t: torch.Tensor, t, cond: torch.Tensor, stage: int) -> torch.Tensor:
    return net(x_t, t, cond, stage)


def oracle_eps(x0: torch.Tensor, x_t: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """The exact noise that maps ``x0`` to ``x_t`` under the forward marginal."""
    if x0.shape != x_t.shape:
        raise ShapeError(f"x0 shape {tuple(x0.shape)} does not match x_t {tuple(x_t.shape)}")
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        ab = torch.as_tensor(s.alpha_bars[t.long().cpu().numpy()], dtype=x_t.dtype)
        ab = ab.reshape(-1, *([1] * (x_t.ndim - 1)))
        if float(ab.min()) < MIN_ALPHA_BAR or float(ab.max()) >= 1:
            raise NumericalError("alpha_bar must lie strictly inside (0, 1)")
        return (x_t - ab.sqrt() * x0) / (1 - ab).sqrt()
    ab = s.alpha_bar(int(t))
    if not MIN_ALPHA_BAR <= ab < 1:
        raise NumericalError(f"alpha_bar[{int(t)}]={ab} must lie strictly inside (0, 1)")
    return (x_t - math.sqrt(ab) * x0) / math.sqrt(1 - ab)


class OracleDenoiser(nn.Module):
    """Noise predictor that knows the clean answer.

    With ``target`` set it always reconstructs that tensor; otherwise the first
    ``in_channels`` channels of the condition are taken as the clean answer.
    """

    def __init__(self, schedule: NoiseSchedule, in_channels: int = 3, target: torch.Tensor | None = None):
        super().__init__()
        self.schedule = schedule
        self.in_channels = in_channels
        self.target = target

    def forward(self, x_t, t, cond, stage):
        if stage not in STAGES:
            raise ParameterError(f"unknown stage {stage!r}; expected one of {STAGES}")
        x0 = self.target if self.target is not None else cond[:, : self.in_channels]
        return oracle_eps(x0.to(x_t.dtype), x_t, t, self.schedule)


class ResidualDenseBlock(nn.Module):
    def __init__(self, channels: int, growth: int, layers: int):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels + i * growth, growth, 3, padding=1) for i in range(layers)
        )
        self.fuse = nn.Conv2d(channels + layers * growth, channels, 1)

    def forward(self, x):
        feats = [x]
        for conv in self.convs:
            feats.append(F.relu(conv(torch.cat(feats, dim=1))))
        return x + self.fuse(torch.cat(feats, dim=1))


class FeatureGainModule(nn.Module):
    """Predicts a noise map for one RGB detail subband and subtracts it.

    5x5 head conv, residual dense blocks each followed by ReLU with a long
    residual from the head after each half of the chain, then conv+ReLU and a
    zero-initialised projection to the output channels.
    """

    def __init__(self, spec: FgmSpec = FgmSpec()):
        super().__init__()
        if spec.rdb_count < 2 or spec.rdb_count % 2:
            raise ParameterError(f"rdb_count must be an even number >= 2, got {spec.rdb_count}")
        self.spec = spec
        c = spec.rdb_channels
        self.head = nn.Conv2d(spec.out_channels, c, spec.head_kernel, padding=spec.head_kernel // 2)
        self.rdbs = nn.ModuleList(ResidualDenseBlock(c, spec.growth, spec.dense_layers) for _ in range(spec.rdb_count))
        self.refine = nn.Conv2d(c, c, 3, padding=1)
        self.tail = nn.Conv2d(c, spec.out_channels, 3, padding=1)
        nn.init.zeros_(self.tail.weight)
        nn.init.zeros_(self.tail.bias)

    def noise_map(self, x: torch.Tensor) -> torch.Tensor:
        shallow = self.head(x)
        h = shallow
        half = len(self.rdbs) // 2
        for i, rdb in enumerate(self.rdbs):
            h = F.relu(rdb(h))
            if i == half - 1 or i == len(self.rdbs) - 1:
                h = h + shallow
        return self.tail(F.relu(self.refine(h)))

    def forward(self, subband: torch.Tensor) -> torch.Tensor:
        if subband.ndim != 4 or subband.shape[1] != self.spec.out_channels:
            raise ShapeError(
                f"FGM expects (N, {self.spec.out_channels}, H, W) subbands, got {tuple(subband.shape)}"
            )
        return subband - self.noise_map(subband)


def fgm_apply(fgm: FeatureGainModule, subband: torch.Tensor) -> torch.Tensor:
    return fgm(subband)


def fgm_apply_all(fgm: FeatureGainModule, H) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Apply the shared-weight FGM to all three subbands in one batched pass."""
    n = H[0].shape[0]
    out = fgm(torch.cat(list(H), dim=0))
    return tuple(out[i * n:(i + 1) * n] for i in range(3))
