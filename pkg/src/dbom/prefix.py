"""Soft prompt prefix and its image-conditioned bias network.

The prefix is a short run of learnable token embeddings shared by all
prompts. In learnable mode a two-layer relu network maps each image's
global feature to an additive bias on those tokens, so every image
gets its own shifted prefix; in static mode the prefix is a frozen
constant and the bias network is bypassed.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from dbom.encoders import WordTable


class ApNet(nn.Module):
    """Two-layer relu map from image features to a per-token prefix bias."""

    def __init__(self, feat_dim: int, hidden: int, prefix_len: int, embed_dim: int, seed: int):
        super().__init__()
        self.prefix_len = prefix_len
        self.embed_dim = embed_dim
        gen = torch.Generator().manual_seed(seed)

        def uniform(rows: int, cols: int, fan_in: int) -> Tensor:
            bound = 1.0 / math.sqrt(fan_in)
            return (torch.rand(rows, cols, generator=gen, dtype=torch.float64) * 2 - 1) * bound

        self.w1 = nn.Parameter(uniform(hidden, feat_dim, feat_dim))
        self.b1 = nn.Parameter(torch.zeros(hidden, dtype=torch.float64))
        self.w2 = nn.Parameter(uniform(prefix_len * embed_dim, hidden, hidden))
        self.b2 = nn.Parameter(torch.zeros(prefix_len * embed_dim, dtype=torch.float64))

    def forward(self, f_v: Tensor) -> Tensor:
        """Bias [.., prefix_len, embed_dim] for features [.., feat_dim]."""
        hidden = F.relu(f_v @ self.w1.T + self.b1)
        flat = hidden @ self.w2.T + self.b2
        return flat.reshape(*f_v.shape[:-1], self.prefix_len, self.embed_dim)


class SoftPrefix(nn.Module):
    """Learnable (or frozen, in static mode) prefix token embeddings."""

    def __init__(self, length: int, embed_dim: int, mode: str, seed: int):
        super().__init__()
        if length < 1:
            raise ValueError(f"prefix length must be >= 1, got {length}")
        if mode not in ("learnable", "static"):
            raise ValueError(f"prefix mode must be learnable or static, got {mode!r}")
        self.length = length
        self.embed_dim = embed_dim
        self.mode = mode
        gen = torch.Generator().manual_seed(seed)
        init = 0.1 * torch.randn(length, embed_dim, generator=gen, dtype=torch.float64)
        self.tokens = nn.Parameter(init, requires_grad=(mode == "learnable"))


def adapt_prefix(f_v: Tensor, prefix: SoftPrefix, apnet: ApNet) -> Tensor:
    """Per-image shifted prefix tokens; the identity in static mode.

    Accepts features [feat_dim] or [B, feat_dim] and returns tokens
    [prefix_len, embed_dim] or [B, prefix_len, embed_dim].
    """
    if prefix.mode == "static":
        if f_v.ndim == 1:
            return prefix.tokens
        return prefix.tokens.expand(f_v.shape[0], prefix.length, prefix.embed_dim)
    return prefix.tokens + apnet(f_v)


def assemble_prompt(shifted: Tensor, trigger: str, obj: str,
                    trigger_words: WordTable, object_words: WordTable) -> Tensor:
    """Full prompt rows [shifted prefix; trigger word; object word].

    shifted is [prefix_len, embed_dim] for one image; the result has
    prefix_len + 2 rows.
    """
    rows = [shifted, trigger_words.embed(trigger)[None, :], object_words.embed(obj)[None, :]]
    return torch.cat(rows, dim=0)
