"""Flat run configuration shared by every command."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ValidationError
from .synth import SynthConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # token marks
    n_marks: int = 16
    mark_dim: int = 32
    mark_eps: float = 1e-6
    mark_init_std: float = 1.0
    fixed_marks: bool = False
    # backbone
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mlp_ratio: int = 4
    vocab_size: int = 64
    text_len: int = 16
    max_seq_len: int = 192
    init_std: float = 0.02
    # video
    n_frames: int = 4
    frame_size: int = 48
    patch_size: int = 8
    # synthetic data
    n_samples: int = 2000
    object_size: int = 12
    speed: int = 2
    min_objects: int = 1
    max_objects: int = 4
    # objective and optimiser
    alpha: float = 0.05
    lr: float = 2e-3
    warmup_steps: int = 100
    cosine_decay: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    steps: int = 14000
    checkpoint_every: int = 2000
    eval_batch_size: int = 64

    @property
    def token_grid(self) -> tuple[int, int]:
        g = self.frame_size // self.patch_size
        return g, g

    @property
    def n_visual_tokens(self) -> int:
        h, w = self.token_grid
        return self.n_frames * h * w

    def synth_config(self) -> SynthConfig:
        return SynthConfig(n_frames=self.n_frames, frame_size=self.frame_size, object_size=self.object_size,
                           speed=self.speed, min_objects=self.min_objects, max_objects=self.max_objects)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        values = {}
        for key, raw in doc.items():
            default = getattr(cls, key)
            if isinstance(default, bool):
                if not isinstance(raw, bool):
                    raise ValidationError(f"{key} must be a boolean")
                values[key] = raw
            elif isinstance(default, int):
                if isinstance(raw, bool) or not isinstance(raw, int):
                    raise ValidationError(f"{key} must be an integer")
                values[key] = raw
            else:
                if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                    raise ValidationError(f"{key} must be a number")
                values[key] = float(raw)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    def with_overrides(self, **kw) -> "RunConfig":
        cfg = replace(self, **kw)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        positive = ("n_marks", "mark_dim", "d_model", "n_layers", "n_heads", "mlp_ratio", "vocab_size",
                    "text_len", "max_seq_len", "n_frames", "frame_size", "patch_size", "object_size",
                    "min_objects", "max_objects", "batch_size", "checkpoint_every", "eval_batch_size")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ValidationError(f"{key} must be positive")
        for key in ("steps", "n_samples", "speed", "warmup_steps"):
            if getattr(self, key) < 0:
                raise ValidationError(f"{key} must be non-negative")
        if self.mark_eps <= 0 or self.lr <= 0 or self.adam_eps <= 0:
            raise ValidationError("mark_eps, lr and adam_eps must be positive")
        if self.alpha < 0:
            raise ValidationError("alpha must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("beta1 and beta2 must lie in [0, 1)")
        if self.frame_size % self.patch_size:
            raise ValidationError("frame_size must be a multiple of patch_size")
        if self.d_model % self.n_heads:
            raise ValidationError("d_model must be a multiple of n_heads")
        if not 1 <= self.min_objects <= self.max_objects <= 4:
            raise ValidationError("object counts must satisfy 1 <= min_objects <= max_objects <= 4")
        if self.max_objects > self.n_marks:
            raise ValidationError("n_marks must be at least max_objects")
        if self.n_visual_tokens + self.text_len > self.max_seq_len:
            raise ValidationError(
                f"max_seq_len {self.max_seq_len} < {self.n_visual_tokens} visual + {self.text_len} text tokens")
        from .vocab import TOKENS
        if self.vocab_size < len(TOKENS):
            raise ValidationError(f"vocab_size must be at least {len(TOKENS)}")


def load_config(path=None, **overrides) -> RunConfig:
    """Read a JSON config (missing keys take defaults) and apply non-None overrides."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ValidationError("config must be a JSON object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(doc)


def tiny_config(**kw) -> RunConfig:
    """Small enough for exhaustive finite-difference checks."""
    base = dict(n_marks=4, mark_dim=3, mark_init_std=0.5, d_model=8, n_layers=1, n_heads=2, mlp_ratio=2,
                vocab_size=36, text_len=16, max_seq_len=24, init_std=0.3, n_frames=2, frame_size=8,
                patch_size=4, object_size=3, speed=1, max_objects=2, batch_size=2)
    base.update(kw)
    return RunConfig.from_dict(base)


def paper_config(**kw) -> RunConfig:
    """Paper-scale mark and grid constants (100 marks of width 256, 336 px frames on a 24x24 grid)."""
    base = dict(n_marks=100, mark_dim=256, frame_size=336, patch_size=14, n_frames=4, d_model=64,
                max_seq_len=4 * 24 * 24 + 16, alpha=0.05, lr=5e-5, object_size=48, speed=24)
    base.update(kw)
    return RunConfig.from_dict(base)
