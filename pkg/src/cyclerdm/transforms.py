"""Single-level orthonormal Haar wavelet transform and Fourier amplitude/phase.

Tensors are ``(..., C, H, W)``; every channel is transformed independently.
"""

from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import ShapeError


class WaveletDecomposition(NamedTuple):
    """Low band ``L`` and detail subbands ``H = (horizontal, vertical, diagonal)``."""

    L: torch.Tensor
    H: tuple[torch.Tensor, torch.Tensor, torch.Tensor]


class Spectrum(NamedTuple):
    amp: torch.Tensor
    pha: torch.Tensor


def dwt(x: torch.Tensor) -> WaveletDecomposition:
    """Haar analysis on 2x2 blocks ``[[a, b], [c, d]]``.

    ``L = (a+b+c+d)/2``, horizontal detail ``(a+b-c-d)/2`` (rows differ),
    vertical detail ``(a-b+c-d)/2`` (columns differ), diagonal ``(a-b-c+d)/2``.
    """
    if x.ndim < 2:
        raise ShapeError(f"dwt needs at least 2 dims, got shape {tuple(x.shape)}")
    h, w = x.shape[-2:]
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise ShapeError(f"dwt needs even spatial dims >= 2, got {h}x{w}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    low = (a + b + c + d) / 2
    lh = (a + b - c - d) / 2
    hl = (a - b + c - d) / 2
    hh = (a - b - c + d) / 2
    return WaveletDecomposition(low, (lh, hl, hh))


def idwt(L: torch.Tensor, H) -> torch.Tensor:
    """Exact inverse of :func:`dwt`."""
    if len(H) != 3:
        raise ShapeError(f"expected three detail subbands, got {len(H)}")
    lh, hl, hh = H
    for band in (lh, hl, hh):
        if band.shape != L.shape:
            raise ShapeError(f"subband shape {tuple(band.shape)} does not match low band {tuple(L.shape)}")
    a = (L + lh + hl + hh) / 2
    b = (L + lh - hl - hh) / 2
    c = (L - lh + hl - hh) / 2
    d = (L - lh - hl + hh) / 2
    top = torch.stack([a, b], dim=-1).flatten(-2)
    bottom = torch.stack([c, d], dim=-1).flatten(-2)
    return torch.stack([top, bottom], dim=-2).flatten(-3, -2)


def spectrum(x: torch.Tensor) -> Spectrum:
    """Unnormalized 2-D DFT over the last two dims, split into modulus and argument."""
    if x.ndim < 2:
        raise ShapeError(f"spectrum needs at least 2 dims, got shape {tuple(x.shape)}")
    if x.is_complex():
        raise ShapeError("spectrum expects a real tensor")
    f = torch.fft.fft2(x, norm="backward")
    return Spectrum(f.abs(), torch.angle(f))


def inverse_spectrum(sp: Spectrum) -> torch.Tensor:
    f = torch.polar(sp.amp, sp.pha)
    return torch.fft.ifft2(f, norm="backward").real
