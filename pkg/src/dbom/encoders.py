"""Frozen image and text encoders.

Both backends expose the same contract: images map to patch-token
features plus their mean as a global vector, token matrices map to a
single text feature. Backend weights are buffers, never parameters,
so no optimizer can touch them; gradients still flow through the text
encoder to whatever produced its input tokens.

The synthetic backend is a seeded linear projection on the image side
and position-weighted pooling plus a fixed linear map on the text
side: deterministic, differentiable and cheap enough for desk-scale
tests. Real pretrained backbones plug in through register_backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from dbom.config import EncoderConfig

_TEXT_MAX_LEN = 64


@dataclass
class VisualFeatures:
    """Patch-token features [..., n_tok, d] and their mean [..., d]."""

    global_feat: Tensor
    tokens: Tensor


def _as_tensor(image: np.ndarray | Tensor) -> Tensor:
    if isinstance(image, Tensor):
        return image.to(torch.float64)
    return torch.from_numpy(np.ascontiguousarray(image)).to(torch.float64)


class SyntheticImageEncoder(nn.Module):
    """Seeded linear projection from pixel patches to a token grid.

    The image is cut into a square grid of patches and each token is a
    private linear projection of its own patch, so token features stay
    local the way patch tokens of a real vision backbone do. The whole
    map is linear with no bias, so encode(a * x) = a * encode(x); the
    projection tensor is a buffer and stays frozen.
    """

    def __init__(self, image_shape: Sequence[int], feat_dim: int, n_tokens: int, seed: int):
        super().__init__()
        self.image_shape = tuple(int(s) for s in image_shape)
        self.feat_dim = feat_dim
        self.n_tokens = n_tokens
        grid = math.isqrt(n_tokens)
        if grid * grid != n_tokens:
            raise ValueError(f"n_tokens {n_tokens} is not a square grid size")
        h, w, c = self.image_shape
        if h % grid or w % grid:
            raise ValueError(
                f"image shape {self.image_shape} does not tile into a {grid}x{grid} patch grid"
            )
        self.grid = grid
        self.patch_h = h // grid
        self.patch_w = w // grid
        n_in = self.patch_h * self.patch_w * c
        gen = torch.Generator().manual_seed(seed)
        weight = torch.randn(n_tokens, feat_dim, n_in, generator=gen, dtype=torch.float64)
        # Zero row sums make each token invariant to a constant offset
        # on its patch, so features measure variation, not brightness.
        weight = weight - weight.mean(dim=-1, keepdim=True)
        self.register_buffer("weight", weight / math.sqrt(n_in))

    def forward(self, images: np.ndarray | Tensor) -> VisualFeatures:
        return self.encode(images)

    def _patches(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        h, w, c = self.image_shape
        g, ph, pw = self.grid, self.patch_h, self.patch_w
        x = x.reshape(b, g, ph, g, pw, c)
        x = x.permute(0, 1, 3, 2, 4, 5)
        return x.reshape(b, g * g, ph * pw * c)

    def encode(self, images: np.ndarray | Tensor) -> VisualFeatures:
        """Encode one [H, W, C] image or a batch [B, H, W, C]."""
        x = _as_tensor(images)
        batched = x.ndim == 4
        if not batched:
            x = x[None]
        if tuple(x.shape[1:]) != self.image_shape:
            raise ValueError(
                f"image shape {tuple(x.shape[1:])} does not match backend {self.image_shape}"
            )
        tokens = torch.einsum("bjp,jdp->bjd", self._patches(x), self.weight)
        if not batched:
            tokens = tokens[0]
        return VisualFeatures(global_feat=tokens.mean(-2), tokens=tokens)


class SyntheticTextEncoder(nn.Module):
    """Position-weighted token pooling followed by a fixed linear map.

    The positive per-position weights make the pooling order-sensitive;
    the whole map is differentiable with respect to the input tokens
    while its own weights stay frozen buffers.
    """

    def __init__(self, embed_dim: int, out_dim: int, seed: int, max_len: int = _TEXT_MAX_LEN):
        super().__init__()
        self.embed_dim = embed_dim
        self.out_dim = out_dim
        self.max_len = max_len
        gen = torch.Generator().manual_seed(seed)
        pos_weight = 0.5 + torch.rand(max_len, generator=gen, dtype=torch.float64)
        weight = torch.randn(out_dim, embed_dim, generator=gen, dtype=torch.float64)
        self.register_buffer("pos_weight", pos_weight)
        self.register_buffer("weight", weight / math.sqrt(embed_dim))

    def forward(self, tokens: Tensor) -> Tensor:
        return self.encode(tokens)

    def encode(self, tokens: Tensor) -> Tensor:
        """Encode [..., seq, embed_dim] token rows to [..., out_dim]."""
        if tokens.shape[-1] != self.embed_dim:
            raise ValueError(
                f"token width {tokens.shape[-1]} does not match backend embed_dim {self.embed_dim}"
            )
        seq = tokens.shape[-2]
        if seq > self.max_len:
            raise ValueError(f"sequence length {seq} exceeds backend maximum {self.max_len}")
        w = self.pos_weight[:seq]
        pooled = (tokens * w[:, None]).sum(-2) / w.sum()
        return pooled @ self.weight.T


class WordTable(nn.Module):
    """Learnable embedding rows addressed by primitive name."""

    def __init__(self, names: Sequence[str], embed_dim: int, seed: int):
        super().__init__()
        if len(set(names)) != len(names):
            raise ValueError("duplicate primitive names")
        self.names = tuple(names)
        self._index = {name: i for i, name in enumerate(self.names)}
        gen = torch.Generator().manual_seed(seed)
        init = 0.1 * torch.randn(len(self.names), embed_dim, generator=gen, dtype=torch.float64)
        self.table = nn.Parameter(init)

    def index_of(self, name: str) -> int:
        if name not in self._index:
            raise KeyError(f"unknown primitive {name!r}; registered: {self.names}")
        return self._index[name]

    def embed(self, name: str) -> Tensor:
        return self.table[self.index_of(name)]

    def rows(self, indices: Tensor) -> Tensor:
        return self.table[indices]


def embed_word(name: str, table: WordTable) -> Tensor:
    """The learnable embedding row registered for a primitive name."""
    return table.embed(name)


BackendFactory = Callable[[EncoderConfig], tuple[nn.Module, nn.Module]]

_BACKENDS: dict[str, BackendFactory] = {}


def register_backend(name: str, factory: BackendFactory) -> None:
    """Register an encoder backend; the factory returns (image, text) modules.

    Both modules must follow the synthetic backend's contract: an
    encode method over the shared feature types and all weights held
    as buffers.
    """
    _BACKENDS[name] = factory


def build_encoders(config: EncoderConfig) -> tuple[nn.Module, nn.Module]:
    if config.backend not in _BACKENDS:
        known = sorted(_BACKENDS)
        raise ValueError(
            f"encoder backend {config.backend!r} is not registered (known: {known}); "
            "external backbones must be registered via register_backend first"
        )
    return _BACKENDS[config.backend](config)


def _build_synthetic(config: EncoderConfig) -> tuple[nn.Module, nn.Module]:
    image = SyntheticImageEncoder(config.image_shape, config.feat_dim, config.n_tokens,
                                  seed=config.seed)
    text = SyntheticTextEncoder(config.embed_dim, config.feat_dim, seed=config.seed + 1)
    return image, text


register_backend("synthetic", _build_synthetic)
