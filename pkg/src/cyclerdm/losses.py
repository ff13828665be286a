"""Training objectives: diffusion, prompt-contrastive, content, frequency and total.

Norm conventions: a ``||.||_2`` distance is the root-mean-square difference
(the L2 norm divided by sqrt of the element count) and a ``||.||_1`` distance
is the mean absolute difference, so every term is resolution independent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch

from .errors import NumericalError, ParameterError, ShapeError
from .guidance import Encoder, PromptPair
from .metrics import ssim
from .transforms import spectrum


@dataclass(frozen=True)
class LossWeights:
    tau: tuple[float, float, float] = (1.0, 1.0, 0.9)
    omega: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 0.5)
    vartheta1: float = 0.5
    vartheta2: float = 0.5
    gamma1: float = 0.2
    gamma2: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "tau", tuple(float(v) for v in self.tau))
        object.__setattr__(self, "omega", tuple(float(v) for v in self.omega))
        if len(self.tau) != 3:
            raise ParameterError(f"tau needs 3 stage weights, got {len(self.tau)}")
        if len(self.omega) != 5:
            raise ParameterError(f"omega needs 5 layer weights, got {len(self.omega)}")
        values = [*self.tau, *self.omega, self.vartheta1, self.vartheta2, self.gamma1, self.gamma2]
        if any(v < 0 or not math.isfinite(v) for v in values):
            raise ParameterError("loss weights must be finite and non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tau"], d["omega"] = list(self.tau), list(self.omega)
        return d


@dataclass
class LossReport:
    diff: torch.Tensor | float
    clip: torch.Tensor | float
    content: torch.Tensor | float
    fre: torch.Tensor | float
    total: torch.Tensor | float = field(default=0.0)

    def as_floats(self) -> dict[str, float]:
        return {k: _scalar(getattr(self, k)) for k in ("diff", "clip", "content", "fre", "total")}


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def rms_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return torch.linalg.vector_norm(a - b) / math.sqrt(a.numel())


def diff_loss(eps_true, eps_pred, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Stage-weighted noise regression; ``None`` entries mark disabled stages."""
    if len(eps_true) != len(eps_pred) or len(eps_true) > 3:
        raise ShapeError("need matching per-stage lists of at most 3 noise tensors")
    total = None
    for tau, e, p in zip(w.tau, eps_true, eps_pred):
        if e is None:
            continue
        term = tau * rms_distance(p, e)
        total = term if total is None else total + term
    if total is None:
        raise ParameterError("diff_loss received no enabled stages")
    return total


def clip_stage_term(cos_pos: torch.Tensor, cos_neg: torch.Tensor) -> torch.Tensor:
    """Softmax weight of the negative prompt, in (0, 1)."""
    return torch.exp(cos_neg) / (torch.exp(cos_pos) + torch.exp(cos_neg))


def clip_loss(stage_outputs, pair: PromptPair, encoder: Encoder) -> torch.Tensor:
    """Sum over stage outputs of the negative-prompt softmax weight (batch-averaged)."""
    t_pos = encoder.encode_text(pair.positive)
    t_neg = encoder.encode_text(pair.negative)
    total = None
    for x in stage_outputs:
        z = encoder.encode_image(x)
        if z.ndim == 1:
            z = z[None]
        term = clip_stage_term(z @ t_pos.to(z.dtype), z @ t_neg.to(z.dtype)).mean()
        total = term if total is None else total + term
    return total


def feature_distance(encoder: Encoder, a: torch.Tensor, b: torch.Tensor, omega) -> torch.Tensor:
    fa = encoder.image_layer_features(a)
    fb = encoder.image_layer_features(b)
    return sum(wl * rms_distance(x, y) for wl, x, y in zip(omega, fa, fb))


def content_loss(stage_outputs, HQ, GT, w: LossWeights, encoder: Encoder) -> torch.Tensor:
    """Layer-weighted feature distance per stage output plus ``1 - SSIM(HQ, GT)``.

    Images are in the model range ``[-1, 1]``; SSIM is taken after mapping to ``[0, 1]``.
    """
    if HQ.shape != GT.shape:
        raise ShapeError(f"HQ shape {tuple(HQ.shape)} does not match GT {tuple(GT.shape)}")
    feat = sum(feature_distance(encoder, x, GT, w.omega) for x in stage_outputs)
    return feat + (1.0 - ssim((HQ + 1) / 2, (GT + 1) / 2))


def fre_loss(HQ: torch.Tensor, GT: torch.Tensor, w: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted mean absolute amplitude and raw principal-value phase differences."""
    if HQ.shape != GT.shape:
        raise ShapeError(f"HQ shape {tuple(HQ.shape)} does not match GT {tuple(GT.shape)}")
    s_hq, s_gt = spectrum(HQ), spectrum(GT)
    amp = (s_hq.amp - s_gt.amp).abs().mean()
    pha = (s_hq.pha - s_gt.pha).abs().mean()
    return w.vartheta1 * amp + w.vartheta2 * pha


def total_loss(diff, clip, content, fre, w: LossWeights = LossWeights()) -> LossReport:
    for name, part in (("diff", diff), ("clip", clip), ("content", content), ("fre", fre)):
        value = _scalar(part)
        if not math.isfinite(value):
            raise NumericalError(f"loss part {name!r} is not finite: {value}")
    # accumulate in double so the report decomposes exactly
    d, c, n, f = (p.double() if isinstance(p, torch.Tensor) else p for p in (diff, clip, content, fre))
    total = d + w.gamma1 * c + n + w.gamma2 * f
    return LossReport(diff, clip, content, fre, total)
