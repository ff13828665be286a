"""Frozen image/text encoders behind one interface, and the per-task prompt registry.

The ``stub`` backend needs no downloaded weights and is fully deterministic:

* text: a unit vector drawn from a PRNG seeded by the SHA-256 of the prompt;
* image: average-pool to 8x8, flatten, fixed seeded random projection, normalise;
* feature pyramid: the image average-pooled at strides 1, 2, 4, 8, 16.

The ``clip-adapter`` backend wraps an OpenAI-CLIP style ResNet model.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalError, ParameterError

STUB_SEED = 20240917
PYRAMID_LEVELS = 5


@dataclass(frozen=True)
class PromptPair:
    positive: str
    negative: str

    def __post_init__(self):
        if not self.positive or not self.negative:
            raise ParameterError("prompts must be non-empty")
        if self.positive == self.negative:
            raise ParameterError(f"positive and negative prompts are identical: {self.positive!r}")


DEFAULT_PROMPTS: dict[str, PromptPair] = {
    "denoise": PromptPair("a clean noise-free photo", "a noisy grainy photo"),
    "deblur": PromptPair("a sharp in-focus photo", "a blurry out-of-focus photo"),
    "dehaze": PromptPair("a clear haze-free photo", "a hazy foggy photo"),
    "derain": PromptPair("a clear photo without rain", "a photo with rain streaks"),
    "lowlight": PromptPair("a well-lit photo", "a dark underexposed photo"),
    "inpaint": PromptPair("a complete intact photo", "a photo with missing regions"),
}

TASKS = tuple(DEFAULT_PROMPTS)


def prompts_for_task(task: str, registry: dict[str, PromptPair] | None = None) -> PromptPair:
    registry = DEFAULT_PROMPTS if registry is None else registry
    try:
        return registry[task]
    except KeyError:
        raise ParameterError(f"unknown task {task!r}; valid tasks: {', '.join(sorted(registry))}") from None


def registry_to_dict(registry: dict[str, PromptPair]) -> dict[str, list[str]]:
    return {task: [p.positive, p.negative] for task, p in registry.items()}


def registry_from_dict(d: dict) -> dict[str, PromptPair]:
    out = {}
    for task, pair in d.items():
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ParameterError(f"prompt entry for {task!r} must be [positive, negative]")
        out[task] = PromptPair(str(pair[0]), str(pair[1]))
    return out


class Encoder(Protocol):
    dim: int

    def encode_text(self, prompt: str) -> torch.Tensor: ...

    def encode_image(self, x: torch.Tensor) -> torch.Tensor: ...

    def image_layer_features(self, x: torch.Tensor) -> list[torch.Tensor]: ...


def _check_finite(x: torch.Tensor):
    if not torch.isfinite(x).all():
        raise NumericalError("encoder input contains non-finite values")


class StubEncoder:
    """Deterministic weight-free stand-in for a contrastive image/text encoder."""

    def __init__(self, dim: int = 64, channels: int = 3, pool: int = 8, seed: int = STUB_SEED):
        self.dim = dim
        self.pool = pool
        self.seed = seed
        rng = np.random.Generator(np.random.PCG64(seed))
        proj = rng.standard_normal((channels * pool * pool, dim)) / np.sqrt(channels * pool * pool)
        self._proj = torch.from_numpy(proj)
        self._text_cache: dict[str, torch.Tensor] = {}

    def encode_text(self, prompt: str) -> torch.Tensor:
        if not prompt:
            raise ParameterError("prompt must be non-empty")
        if prompt not in self._text_cache:
            digest = hashlib.sha256(prompt.encode("utf-8")).digest()
            key = int.from_bytes(digest[:8], "little") ^ self.seed
            v = np.random.Generator(np.random.PCG64(key)).standard_normal(self.dim)
            self._text_cache[prompt] = torch.from_numpy(v / np.linalg.norm(v))
        return self._text_cache[prompt].clone()

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        """Unit-norm embedding per image, ``(N, dim)`` for ``(N, C, H, W)`` input."""
        _check_finite(x)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        pooled = F.adaptive_avg_pool2d(x, self.pool).flatten(1)
        z = pooled @ self._proj.to(x.dtype)
        z = z / z.norm(dim=1, keepdim=True).clamp_min(1e-12)
        return z[0] if squeeze else z

    def image_layer_features(self, x: torch.Tensor) -> list[torch.Tensor]:
        _check_finite(x)
        h, w = x.shape[-2:]
        feats = []
        for level in range(PYRAMID_LEVELS):
            stride = 2**level
            size = (max(1, -(-h // stride)), max(1, -(-w // stride)))
            feats.append(x if level == 0 else F.adaptive_avg_pool2d(x, size))
        return feats


class ClipAdapterEncoder:
    """Bridge to a pretrained OpenAI-CLIP ResNet (e.g. ``RN101``) via the ``clip`` package.

    Images are expected in ``[-1, 1]``. The five feature levels are the stem
    output followed by ``layer1`` .. ``layer4`` of the visual tower.
    """

    _MEAN = (0.48145466, 0.4578275, 0.40821073)
    _STD = (0.26862954, 0.26130258, 0.27577711)

    def __init__(self, name: str = "RN101", device: str = "cpu"):
        try:
            import clip  # type: ignore
        except ImportError as exc:  # pragma: no cover - optional dependency
            raise ParameterError("encoder_backend 'clip-adapter' requires the 'clip' package") from exc
        self._clip = clip
        self.model, _ = clip.load(name, device=device)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.device = device
        self.dim = self.model.visual.output_dim
        self.resolution = self.model.visual.input_resolution

    def _prep(self, x):
        _check_finite(x)
        if x.ndim == 3:
            x = x[None]
        x = (x + 1) / 2
        x = F.interpolate(x, size=(self.resolution, self.resolution), mode="bicubic", align_corners=False)
        mean = torch.tensor(self._MEAN, dtype=x.dtype, device=x.device)[:, None, None]
        std = torch.tensor(self._STD, dtype=x.dtype, device=x.device)[:, None, None]
        return ((x - mean) / std).to(self.model.dtype)

    def encode_text(self, prompt: str) -> torch.Tensor:
        if not prompt:
            raise ParameterError("prompt must be non-empty")
        with torch.no_grad():
            z = self.model.encode_text(self._clip.tokenize([prompt]).to(self.device))[0].float()
        return z / z.norm()

    def encode_image(self, x):
        z = self.model.encode_image(self._prep(x)).float()
        return z / z.norm(dim=-1, keepdim=True)

    def image_layer_features(self, x):
        v = self.model.visual
        h = self._prep(x)
        h = v.relu1(v.bn1(v.conv1(h)))
        h = v.relu2(v.bn2(v.conv2(h)))
        h = v.avgpool(v.relu3(v.bn3(v.conv3(h))))
        feats = [h.float()]
        for layer in (v.layer1, v.layer2, v.layer3, v.layer4):
            h = layer(h)
            feats.append(h.float())
        return feats


def make_encoder(backend: str = "stub", **kwargs) -> Encoder:
    if backend == "stub":
        return StubEncoder(**kwargs)
    if backend == "clip-adapter":
        return ClipAdapterEncoder(**kwargs)
    raise ParameterError(f"unknown encoder backend {backend!r}; expected 'stub' or 'clip-adapter'")


def encode_text(encoder: Encoder, prompt: str) -> torch.Tensor:
    return encoder.encode_text(prompt)


def encode_image(encoder: Encoder, x: torch.Tensor) -> torch.Tensor:
    return encoder.encode_image(x)


def image_layer_features(encoder: Encoder, x: torch.Tensor) -> list[torch.Tensor]:
    return encoder.image_layer_features(x)
