"""Configuration dataclasses and the desk/paper scale presets.

The desk preset is the full-scale geometry divided by 4 in every axis so
that the full pipeline runs on a workstation; the full-scale constants are
kept as the other preset for completeness.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Any

from .errors import SchemaError


@dataclass(frozen=True)
class FrameSpec:
    """Physical geometry of the preprocessing pipeline.

    All extents are millimetres on a 1 mm isotropic grid, so frame extents
    are also the framed array shape.  ``crop_mm`` is the center-crop applied
    at inference time before resizing to ``input_shape``.
    """

    frame_mm: tuple[int, int, int] = (104, 84, 64)
    crop_mm: tuple[int, int, int] = (96, 80, 64)
    input_shape: tuple[int, int, int] = (64, 40, 32)

    def __post_init__(self) -> None:
        if any(c > f for c, f in zip(self.crop_mm, self.frame_mm)):
            raise SchemaError(f"crop extents {self.crop_mm} exceed frame extents {self.frame_mm}")


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple[int, int, int] = (64, 40, 32)
    downsample: int = 8
    intermediate: int = 4
    hidden: int = 64
    layers: int = 4
    heads: int = 4
    max_text_len: int = 16
    vocab_size: int = 512
    seed: int = 0

    def __post_init__(self) -> None:
        d, u = self.downsample, self.intermediate
        if d < 1 or (d & (d - 1)) != 0:
            raise SchemaError(f"downsample factor {d} must be a positive power of two")
        if u < 1 or d % u != 0:
            raise SchemaError(f"intermediate factor {u} must divide downsample factor {d}")
        if any(n % d != 0 for n in self.input_shape):
            raise SchemaError(f"input shape {self.input_shape} not divisible by downsample {d}")
        if self.hidden % self.heads != 0:
            raise SchemaError(f"hidden width {self.hidden} not divisible by {self.heads} heads")

    @property
    def token_grid(self) -> tuple[int, int, int]:
        d = self.downsample
        n, m, s = self.input_shape
        return (n // d, m // d, s // d)

    @property
    def token_count(self) -> int:
        g = self.token_grid
        return g[0] * g[1] * g[2]

    @property
    def max_seq_len(self) -> int:
        return 2 + self.token_count + self.max_text_len


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 500
    batch_size: int = 8
    base_lr: float = 3e-4
    warmup_steps: int = 25
    weight_decay: float = 0.01
    val_interval: int = 100
    grad_clip: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise SchemaError("batch size must be >= 1")
        if self.warmup_steps < 0:
            raise SchemaError("warmup steps must be >= 0")
        # total_steps == 0 is a legal degenerate run (checkpoint == init)
        if self.total_steps > 0 and self.warmup_steps >= self.total_steps:
            raise SchemaError("warmup steps must be < total steps")


def desk_preset() -> dict[str, Any]:
    return {
        "frame": FrameSpec(),
        "model": ModelConfig(),
        "train": TrainConfig(),
    }


def paper_preset() -> dict[str, Any]:
    return {
        "frame": FrameSpec(
            frame_mm=(416, 336, 256),
            crop_mm=(384, 320, 256),
            input_shape=(256, 160, 128),
        ),
        "model": ModelConfig(
            input_shape=(256, 160, 128),
            downsample=32,
            intermediate=4,
            hidden=768,
            layers=4,
            heads=12,
        ),
        "train": TrainConfig(
            total_steps=25_000,
            batch_size=64,
            warmup_steps=25,
            val_interval=5_000,
        ),
    }


PRESETS = {"desk": desk_preset, "paper": paper_preset}


def preset(name: str) -> dict[str, Any]:
    try:
        return PRESETS[name]()
    except KeyError:
        raise SchemaError(f"unknown scale preset {name!r}; choose from {sorted(PRESETS)}") from None


def config_to_dict(cfg: Any) -> dict[str, Any]:
    return asdict(cfg)
