"""Synthetic degradations, PNG I/O, paired-sample manifests and patch sampling.

Images are float tensors shaped ``(3, H, W)`` in ``[0, 1]`` at this boundary;
the model works in ``[-1, 1]`` (see :func:`to_model_range`).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ParameterError, ShapeError
from .guidance import TASKS

# Parameter defaults and valid (inclusive) ranges per task.
TASK_PARAMS: dict[str, dict[str, tuple[float, float, float]]] = {
    "denoise": {"sigma": (50.0, 0.0, 255.0)},
    "deblur": {"kernel": (9, 3, 31), "blur_sigma": (1.6, 0.1, 10.0)},
    "dehaze": {"t_min": (0.3, 0.05, 1.0), "t_max": (0.8, 0.05, 1.0), "a_min": (0.7, 0.0, 1.0), "a_max": (1.0, 0.0, 1.0)},
    "derain": {"streaks": (60, 1, 2000), "length": (9, 2, 64), "intensity": (0.6, 0.0, 1.0)},
    "lowlight": {"gamma_min": (2.2, 1.0, 5.0), "gamma_max": (3.0, 1.0, 5.0), "scale_min": (0.1, 0.01, 1.0), "scale_max": (0.4, 0.01, 1.0)},
    "inpaint": {"holes": (2, 1, 16), "max_frac": (0.35, 0.05, 0.9)},
}
MANIFEST_KEYS = ("lq", "gt", "task", "prompt_pos", "prompt_neg")


@dataclass(frozen=True)
class DegradationSpec:
    task: str
    parameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASK_PARAMS:
            raise ParameterError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")
        table = TASK_PARAMS[self.task]
        for key, value in self.parameters.items():
            if key not in table:
                raise ParameterError(f"task {self.task!r} has no parameter {key!r}; expected {sorted(table)}")
            _, lo, hi = table[key]
            if not lo <= value <= hi:
                raise ParameterError(f"{self.task}.{key}={value} outside [{lo}, {hi}]")

    def param(self, key: str):
        return self.parameters.get(key, TASK_PARAMS[self.task][key][0])


def _generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)


def _uniform(g, lo, hi) -> float:
    return float(lo + (hi - lo) * torch.rand((), generator=g, dtype=torch.float64))


def gaussian_kernel1d(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    k = torch.exp(-(x**2) / (2 * sigma**2))
    return k / k.sum()


def _blur(img: torch.Tensor, size: int, sigma: float) -> torch.Tensor:
    k = gaussian_kernel1d(size, sigma).to(img.dtype)
    c = img.shape[0]
    x = F.pad(img[None], (size // 2,) * 4, mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1).expand(c, 1, 1, size), groups=c)
    x = F.conv2d(x, k.view(1, 1, -1, 1).expand(c, 1, size, 1), groups=c)
    return x[0]


def _rain_layer(h: int, w: int, spec: DegradationSpec, g) -> torch.Tensor:
    layer = torch.zeros(h, w, dtype=torch.float64)
    angle = _uniform(g, -0.4, 0.4)
    length = int(spec.param("length"))
    dy, dx = math.cos(angle), math.sin(angle)
    for _ in range(int(spec.param("streaks"))):
        y0 = _uniform(g, 0, h)
        x0 = _uniform(g, 0, w)
        strength = _uniform(g, 0.5, 1.0)
        for k in range(length):
            y, x = int(y0 + k * dy), int(x0 + k * dx)
            if 0 <= y < h and 0 <= x < w:
                layer[y, x] = max(layer[y, x].item(), strength)
    layer = _blur(layer[None], 3, 0.7)[0]
    return layer * spec.param("intensity")


def _inpaint_mask(h: int, w: int, spec: DegradationSpec, g) -> torch.Tensor:
    mask = torch.ones(h, w, dtype=torch.float64)
    frac = spec.param("max_frac")
    for _ in range(int(spec.param("holes"))):
        if torch.rand((), generator=g) < 0.5:
            rh = max(1, int(_uniform(g, 0.1, frac) * h))
            rw = max(1, int(_uniform(g, 0.1, frac) * w))
            y = int(_uniform(g, 0, h - rh + 1))
            x = int(_uniform(g, 0, w - rw + 1))
            mask[y:y + rh, x:x + rw] = 0
        else:
            # stroke: a thick random walk
            y, x = _uniform(g, 0, h), _uniform(g, 0, w)
            radius = max(1, int(0.04 * min(h, w)))
            for _ in range(max(h, w)):
                yi, xi = int(y), int(x)
                mask[max(0, yi - radius):yi + radius + 1, max(0, xi - radius):xi + radius + 1] = 0
                theta = _uniform(g, 0, 2 * math.pi)
                y = min(max(y + 2 * math.sin(theta), 0), h - 1)
                x = min(max(x + 2 * math.cos(theta), 0), w - 1)
                if torch.rand((), generator=g) < 0.02:
                    break
    return mask


def degrade(gt: torch.Tensor, spec: DegradationSpec) -> torch.Tensor:
    """Apply the task's synthetic forward model to a ``(3, H, W)`` image in ``[0, 1]``."""
    if gt.ndim != 3:
        raise ShapeError(f"degrade expects a (C, H, W) image, got {tuple(gt.shape)}")
    if float(gt.min()) < 0 or float(gt.max()) > 1:
        raise ParameterError("degrade expects an image in [0, 1]")
    g = _generator(spec.seed)
    x = gt.double()
    _, h, w = x.shape
    if spec.task == "denoise":
        sigma = spec.param("sigma") / 255.0
        out = x + sigma * torch.randn(x.shape, generator=g, dtype=torch.float64)
    elif spec.task == "deblur":
        size = int(spec.param("kernel"))
        if size % 2 == 0:
            raise ParameterError(f"blur kernel size must be odd, got {size}")
        out = _blur(x, size, spec.param("blur_sigma"))
    elif spec.task == "dehaze":
        t = _uniform(g, spec.param("t_min"), spec.param("t_max"))
        a = _uniform(g, spec.param("a_min"), spec.param("a_max"))
        out = x * t + a * (1 - t)
    elif spec.task == "derain":
        out = x + _rain_layer(h, w, spec, g)[None]
    elif spec.task == "lowlight":
        gamma = _uniform(g, spec.param("gamma_min"), spec.param("gamma_max"))
        scale = _uniform(g, spec.param("scale_min"), spec.param("scale_max"))
        out = x.clamp(0, 1) ** gamma * scale
    else:  # inpaint
        out = x * _inpaint_mask(h, w, spec, g)[None]
    return out.clamp(0, 1).to(gt.dtype)


def synthetic_image(size: int, seed: int, channels: int = 3) -> torch.Tensor:
    """A smooth random scene: colour gradient, soft blobs and a few hard-edged rectangles."""
    g = _generator(seed)
    yy, xx = torch.meshgrid(
        torch.linspace(0, 1, size, dtype=torch.float64), torch.linspace(0, 1, size, dtype=torch.float64), indexing="ij"
    )
    base = torch.rand(channels, 1, 1, generator=g, dtype=torch.float64)
    gy = torch.rand(channels, 1, 1, generator=g, dtype=torch.float64) - 0.5
    gx = torch.rand(channels, 1, 1, generator=g, dtype=torch.float64) - 0.5
    img = base + gy * yy + gx * xx
    for _ in range(4):
        cy, cx = torch.rand(2, generator=g, dtype=torch.float64)
        r = 0.08 + 0.2 * float(torch.rand((), generator=g, dtype=torch.float64))
        colour = torch.rand(channels, 1, 1, generator=g, dtype=torch.float64) - 0.5
        img = img + colour * torch.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    for _ in range(2):
        y0, x0 = (torch.rand(2, generator=g) * size * 0.7).long().tolist()
        hh, ww = (4 + torch.rand(2, generator=g) * size * 0.3).long().tolist()
        colour = torch.rand(channels, 1, 1, generator=g, dtype=torch.float64)
        img[:, y0:y0 + hh, x0:x0 + ww] = 0.5 * img[:, y0:y0 + hh, x0:x0 + ww] + 0.5 * colour
    return img.clamp(0, 1).float()


def sample_patch(lq: torch.Tensor, gt: torch.Tensor, size: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Crop the same uniformly chosen ``size x size`` window from both images."""
    if size < 2 or size % 2:
        raise ParameterError(f"patch size must be even and >= 2, got {size}")
    if lq.shape != gt.shape:
        raise ShapeError(f"LQ shape {tuple(lq.shape)} does not match GT {tuple(gt.shape)}")
    h, w = gt.shape[-2:]
    if h < size or w < size:
        raise ShapeError(f"image {h}x{w} smaller than patch size {size}")
    g = _generator(seed)
    y = int(torch.randint(0, h - size + 1, (), generator=g))
    x = int(torch.randint(0, w - size + 1, (), generator=g))
    return lq[..., y:y + size, x:x + size], gt[..., y:y + size, x:x + size]


def to_model_range(x: torch.Tensor) -> torch.Tensor:
    return x * 2 - 1


def from_model_range(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1) / 2).clamp(0, 1)


def load_png(path) -> torch.Tensor:
    path = Path(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return torch.from_numpy(arr.copy()).permute(2, 0, 1).float() / 255.0


def save_png(x: torch.Tensor, path) -> None:
    """Write a ``(3, H, W)`` image in ``[0, 1]`` as 8-bit RGB, rounding to nearest."""
    arr = (x.detach().clamp(0, 1) * 255.0).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


@dataclass(frozen=True)
class ManifestRecord:
    lq: str
    gt: str
    task: str
    prompt_pos: str
    prompt_neg: str

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in MANIFEST_KEYS}, ensure_ascii=False)


@dataclass
class Manifest:
    records: list[ManifestRecord]
    root: Path

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def __len__(self):
        return len(self.records)


def write_manifest(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return path


def read_manifest(path, check_files: bool = True) -> Manifest:
    """Parse a JSONL manifest; relative paths resolve against the manifest's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    manifest = Manifest([], path.parent)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise OSError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or set(obj) != set(MANIFEST_KEYS):
                raise OSError(f"{path}:{lineno}: record keys must be exactly {list(MANIFEST_KEYS)}")
            if obj["task"] not in TASKS:
                raise OSError(f"{path}:{lineno}: unknown task {obj['task']!r}")
            rec = ManifestRecord(**{k: str(obj[k]) for k in MANIFEST_KEYS})
            if check_files:
                for key in ("lq", "gt"):
                    if not manifest.resolve(getattr(rec, key)).is_file():
                        raise OSError(f"{path}:{lineno}: missing {key} file {getattr(rec, key)}")
            manifest.records.append(rec)
    if not manifest.records:
        raise OSError(f"{path}: manifest is empty")
    return manifest


def make_paired_dataset(out_dir, gts, spec: DegradationSpec, prompts, names=None) -> Path:
    """Materialise ``gt/`` and ``lq/`` PNG folders plus ``manifest.jsonl`` under ``out_dir``."""
    out_dir = Path(out_dir)
    records = []
    for i, gt in enumerate(gts):
        name = names[i] if names else f"{i:05d}.png"
        item_spec = DegradationSpec(spec.task, dict(spec.parameters), seed=spec.seed * 1_000_003 + i)
        lq = degrade(gt, item_spec)
        save_png(gt, out_dir / "gt" / name)
        save_png(lq, out_dir / "lq" / name)
        records.append(ManifestRecord(f"lq/{name}", f"gt/{name}", spec.task, prompts.positive, prompts.negative))
    return write_manifest(records, out_dir / "manifest.jsonl")
