"""Run configuration: one flat JSON object whose keys are exactly the field names."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import ParameterError
from ..guidance import DEFAULT_PROMPTS, PromptPair, registry_from_dict, registry_to_dict
from ..losses import LossWeights
from ..networks import DenoiserSpec, FgmSpec
from ..pipeline import PipelineConfig

SEED_ENV = "CYCLERDM_SEED"


@dataclass
class RunConfig:
    # pipeline
    T: int = 200
    sample_steps: int = 10
    stage3_t_max: int = 50
    value_range: list = field(default_factory=lambda: [-1.0, 1.0])
    ablation_mask: list = field(default_factory=lambda: [True, True, True])
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    eta: float = 0.0
    # loss weights
    tau: list = field(default_factory=lambda: [1.0, 1.0, 0.9])
    omega: list = field(default_factory=lambda: [1.0, 1.0, 1.0, 1.0, 0.5])
    vartheta1: float = 0.5
    vartheta2: float = 0.5
    gamma1: float = 0.2
    gamma2: float = 0.3
    # training
    epochs: int = 1000
    batch_size: int = 4
    learning_rate: float = 1e-4
    patch_size: int = 128
    seed: int = 0
    max_steps: int | None = None
    checkpoint_every: int = 500
    # networks
    base_width: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    patchify: int = 2
    stage3_width: int = 32
    stage3_depth: int = 1
    fgm_growth: int = 32
    fgm_dense_layers: int = 3
    # io
    encoder_backend: str = "stub"
    train_manifest: str = "train.jsonl"
    val_manifest: str | None = None
    checkpoint: str = "cyclerdm.crdm"
    device: str = "cpu"
    prompts: dict = field(default_factory=lambda: registry_to_dict(DEFAULT_PROMPTS))

    def __post_init__(self):
        if self.encoder_backend not in ("stub", "clip-adapter"):
            raise ParameterError(f"encoder_backend must be 'stub' or 'clip-adapter', got {self.encoder_backend!r}")
        if self.device != "cpu" and not self.device.startswith("cuda"):
            raise ParameterError(f"device must be 'cpu' or 'cuda[:N]', got {self.device!r}")
        for name in ("epochs", "batch_size", "patch_size"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ParameterError(f"learning_rate must be >= 0, got {self.learning_rate}")
        # validate the derived objects eagerly so bad configs fail at load time
        self.pipeline()
        self.weights()
        self.registry()

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            T=self.T, sample_steps=self.sample_steps, stage3_t_max=self.stage3_t_max,
            value_range=tuple(self.value_range), ablation_mask=tuple(self.ablation_mask),
            beta_start=self.beta_start, beta_end=self.beta_end, eta=self.eta,
        )

    def weights(self) -> LossWeights:
        return LossWeights(tuple(self.tau), tuple(self.omega), self.vartheta1, self.vartheta2, self.gamma1, self.gamma2)

    def denoiser_spec(self) -> DenoiserSpec:
        return DenoiserSpec(3, 3, self.base_width, self.depth, self.time_embed_dim, True, self.patchify)

    def stage3_spec(self) -> DenoiserSpec:
        return DenoiserSpec(3, 6, self.stage3_width, self.stage3_depth, self.time_embed_dim, False, 1)

    def fgm_spec(self) -> FgmSpec:
        return FgmSpec(growth=self.fgm_growth, dense_layers=self.fgm_dense_layers)

    def registry(self) -> dict[str, PromptPair]:
        return registry_from_dict(self.prompts)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ParameterError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, env=None) -> "RunConfig":
        """Parse a JSON config file; ``CYCLERDM_SEED`` in ``env`` overrides ``seed``."""
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(d, dict):
            raise ParameterError(f"{path}: config must be a JSON object")
        cfg = cls.from_dict(d)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                cfg.seed = int(env[SEED_ENV])
            except ValueError:
                raise ParameterError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        return cfg

    def resolve(self, rel: str | None, base: Path) -> Path | None:
        if rel is None:
            return None
        p = Path(rel)
        return p if p.is_absolute() else base / p
