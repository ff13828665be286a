"""Noise schedules, forward diffusion and deterministic implicit sampling steps.

All functions are pure. Timesteps are zero-based: index ``t`` refers to the
``t+1``-th forward step, so ``alpha_bars[0] == alphas[0]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericalError, OrderingError, ParameterError, ShapeError

MIN_ALPHA_BAR = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion constants, stored in float64."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_sigmas: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars, self.posterior_sigmas):
            if arr.shape != (self.T,):
                raise ShapeError(f"schedule arrays must have length T={self.T}, got {arr.shape}")
            arr.setflags(write=False)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64).copy()
        if betas.ndim != 1 or betas.size < 1:
            raise ParameterError("betas must be a non-empty 1-D sequence")
        if not np.all((betas > 0) & (betas < 1)):
            bad = betas[~((betas > 0) & (betas < 1))][0]
            raise ParameterError(f"every beta must lie in (0, 1), got {bad}")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        prev = np.concatenate([[1.0], alpha_bars[:-1]])
        posterior_sigmas = np.sqrt(betas * (1.0 - prev) / (1.0 - alpha_bars))
        return cls(len(betas), betas, alphas, alpha_bars, posterior_sigmas)

    def alpha_bar(self, t: int | None) -> float:
        """Cumulative signal fraction at ``t``; ``None`` means the clean end (1.0)."""
        if t is None:
            return 1.0
        return float(self.alpha_bars[_check_t(t, self)])

    def snr(self) -> np.ndarray:
        return np.sqrt(self.alpha_bars / (1.0 - self.alpha_bars))

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        s = cls.from_betas(d["betas"])
        if s.T != d["T"]:
            raise ShapeError(f"schedule length {s.T} does not match recorded T={d['T']}")
        return s


def make_linear_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Betas linearly interpolated from ``beta_start`` to ``beta_end`` inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ParameterError(f"T must be an integer >= 1, got {T!r}")
    if not 0 < beta_start < 1:
        raise ParameterError(f"beta_start must lie in (0, 1), got {beta_start}")
    if not 0 < beta_end < 1:
        raise ParameterError(f"beta_end must lie in (0, 1), got {beta_end}")
    if beta_start > beta_end:
        raise ParameterError(f"beta_start={beta_start} exceeds beta_end={beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def _check_t(t, s: NoiseSchedule) -> int:
    t = int(t)
    if not 0 <= t < s.T:
        raise IndexError(f"timestep {t} outside [0, {s.T})")
    return t


def _coef(values: np.ndarray, t, like: torch.Tensor) -> torch.Tensor | float:
    """Gather schedule values at scalar or per-sample ``t`` broadcastable to ``like``."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        idx = t.long().cpu().numpy()
        if idx.min() < 0 or idx.max() >= len(values):
            raise IndexError(f"timesteps outside [0, {len(values)})")
        c = torch.as_tensor(values[idx], dtype=like.dtype, device=like.device)
        return c.reshape(-1, *([1] * (like.ndim - 1)))
    if not 0 <= int(t) < len(values):
        raise IndexError(f"timestep {int(t)} outside [0, {len(values)})")
    return float(values[int(t)])


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(b.shape)} does not match {tuple(a.shape)}")


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward marginal: ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    _same_shape(x0, eps, "q_sample noise")
    ab = _coef(s.alpha_bars, t, x0)
    if isinstance(ab, float):
        return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


def q_step(x_prev: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """One forward Markov transition ``sqrt(1 - b_t) x_prev + sqrt(b_t) eps``."""
    _same_shape(x_prev, eps, "q_step noise")
    b = _coef(s.betas, t, x_prev)
    if isinstance(b, float):
        return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * eps
    return (1.0 - b).sqrt() * x_prev + b.sqrt() * eps


def predict_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Invert the forward marginal for ``x0`` given a noise estimate. No clamping."""
    _same_shape(x_t, eps_hat, "predict_x0 noise estimate")
    ab = _coef(s.alpha_bars, t, x_t)
    if isinstance(ab, float):
        if ab < MIN_ALPHA_BAR:
            raise NumericalError(f"alpha_bar[{int(t)}]={ab:.3g} too small to invert")
        return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    if float(ab.min()) < MIN_ALPHA_BAR:
        raise NumericalError("alpha_bar too small to invert")
    return (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int | None,
    eta: float = 0.0,
    s: NoiseSchedule | None = None,
    *,
    clip: float | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Implicit update from ``t`` to ``t_prev`` (``None`` jumps straight to x0).

    With ``clip`` set, the x0 estimate is clamped to ``[-clip, clip]`` and the
    noise direction re-derived from the clamped estimate.
    """
    if s is None:
        raise ParameterError("a NoiseSchedule is required")
    t = _check_t(t, s)
    if eta < 0:
        raise ParameterError(f"eta must be >= 0, got {eta}")
    if t_prev is not None:
        t_prev = _check_t(t_prev, s)
        if t_prev >= t:
            raise OrderingError(f"t_prev={t_prev} must be smaller than t={t}")
    x0 = predict_x0(x_t, eps_hat, t, s)
    if clip is not None:
        x0 = x0.clamp(-clip, clip)
        ab = s.alpha_bar(t)
        eps_hat = (x_t - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
    if t_prev is None:
        return x0
    ab_t = s.alpha_bar(t)
    ab_prev = s.alpha_bar(t_prev)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev))
    dir_coef = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = math.sqrt(ab_prev) * x0 + dir_coef * eps_hat
    if sigma > 0:
        noise = torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype, device=x_t.device)
        out = out + sigma * noise
    return out


def sampling_timesteps(T: int, steps: int, t_max: int | None = None) -> list[int]:
    """``steps`` uniformly spaced indices over ``[0, t_max)``, descending from ``t_max - 1``."""
    if t_max is None:
        t_max = T
    if not (1 <= steps <= t_max <= T):
        raise ParameterError(f"need 1 <= steps <= t_max <= T, got steps={steps}, t_max={t_max}, T={T}")
    if steps == 1:
        return [t_max - 1]
    return [int(round(v)) for v in np.linspace(t_max - 1, 0, steps)]
