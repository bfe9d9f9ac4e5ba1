"""Configuration dataclasses for the detector, with JSON round-tripping.

Component modules re-export their own sections; this file is the one
place a whole configuration is assembled, serialized and hashed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


@dataclass
class EncoderConfig:
    """Frozen encoder backend selection and dimensions."""

    backend: str = "synthetic"
    feat_dim: int = 64
    n_tokens: int = 16
    embed_dim: int = 64
    image_shape: tuple[int, int, int] = (32, 32, 3)
    seed: int = 11


@dataclass
class RepositoryConfig:
    """Visual prompt repository: M prompt matrices of prompt_len tokens."""

    size: int = 20
    prompt_len: int = 4
    seed: int = 13


@dataclass
class DivLossConfig:
    """Diversity hinge margin and the literal-form escape hatch."""

    margin: float = 0.5
    as_written: bool = False


@dataclass
class PrefixConfig:
    """Soft prompt prefix: token count and learnable vs static mode."""

    length: int = 3
    mode: str = "learnable"
    seed: int = 17


@dataclass
class ApNetConfig:
    """Hidden width of the image-conditioned prefix bias network."""

    hidden: int = 32
    seed: int = 19


@dataclass
class HeadConfig:
    """Similarity kind, temperature and attention init scale for pair logits."""

    similarity: str = "cosine"
    tau: float = 0.01
    attn_gain: float = 10.0
    seed: int = 23


@dataclass
class LossWeights:
    lambda_tri_obj: float = 1.0
    lambda_sp: float = 1.0
    lambda_vis: float = 0.5


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 29
    schedule: str = "joint"
    grad_clip: float = 5.0
    weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class EvalConfig:
    """Calibration-bias sweep resolution."""

    bias_grid_points: int = 201


@dataclass
class DetectorConfig:
    """Everything needed to rebuild a detector and its training loop."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    repository: RepositoryConfig = field(default_factory=RepositoryConfig)
    prefix: PrefixConfig = field(default_factory=PrefixConfig)
    apnet: ApNetConfig = field(default_factory=ApNetConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    div_loss: DivLossConfig = field(default_factory=DivLossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    word_seed: int = 31

    def validate(self) -> None:
        if self.encoder.backend not in ("synthetic", "external"):
            raise ValueError(f"unknown encoder backend {self.encoder.backend!r}")
        grid = math.isqrt(self.encoder.n_tokens)
        if grid * grid != self.encoder.n_tokens:
            raise ValueError(f"encoder.n_tokens must be a perfect square, got {self.encoder.n_tokens}")
        h, w = self.encoder.image_shape[0], self.encoder.image_shape[1]
        if h % grid or w % grid:
            raise ValueError(
                f"encoder.image_shape {self.encoder.image_shape} does not tile into a {grid}x{grid} token grid"
            )
        if self.prefix.mode not in ("learnable", "static"):
            raise ValueError(f"prefix.mode must be learnable or static, got {self.prefix.mode!r}")
        if self.head.similarity not in ("cosine", "dot"):
            raise ValueError(f"head.similarity must be cosine or dot, got {self.head.similarity!r}")
        if self.head.tau <= 0:
            raise ValueError("head.tau must be positive")
        if self.head.attn_gain <= 0:
            raise ValueError("head.attn_gain must be positive")
        if self.eval.bias_grid_points < 2:
            raise ValueError("eval.bias_grid_points must be >= 2")
        if self.train.schedule not in ("joint", "two_stage"):
            raise ValueError(f"train.schedule must be joint or two_stage, got {self.train.schedule!r}")
        if self.train.epochs < 1:
            raise ValueError("train.epochs must be >= 1")
        w = self.train.weights
        for name in ("lambda_tri_obj", "lambda_sp", "lambda_vis"):
            if getattr(w, name) < 0:
                raise ValueError(f"{name} must be >= 0")


def _from_dict(cls: type, data: dict) -> Any:
    kwargs: dict[str, Any] = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name == "weights":
            value = _from_dict(LossWeights, value)
        elif f.name == "image_shape":
            value = tuple(int(v) for v in value)
        kwargs[f.name] = value
    return cls(**kwargs)


_SECTIONS = {
    "encoder": EncoderConfig,
    "repository": RepositoryConfig,
    "prefix": PrefixConfig,
    "apnet": ApNetConfig,
    "head": HeadConfig,
    "div_loss": DivLossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def config_from_dict(data: dict) -> DetectorConfig:
    """Build a DetectorConfig from nested plain dicts; missing keys keep defaults."""
    kwargs: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        if name in data:
            kwargs[name] = _from_dict(cls, data[name])
    if "word_seed" in data:
        kwargs["word_seed"] = int(data["word_seed"])
    config = DetectorConfig(**kwargs)
    config.validate()
    return config


def config_to_dict(config: DetectorConfig) -> dict:
    data = dataclasses.asdict(config)
    data["encoder"]["image_shape"] = list(config.encoder.image_shape)
    return data


def load_config(path: str | Path) -> DetectorConfig:
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_config(config: DetectorConfig, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(config), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def config_hash(config: DetectorConfig) -> str:
    """Stable content hash used to stamp checkpoints."""
    canonical = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
