"""Learnable visual prompt repository with top-2 retrieval.

M prompt matrices sit behind M key vectors. For each image the two
keys most cosine-similar to its global feature are selected, the
higher-scoring one taking the trigger role; the pooled prompts give
the retrieved feature. Separation and diversity losses shape the
keys so the two roles stay distinct.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass
class Retrieval:
    """Top-2 selection for one image or a batch.

    Scores keep their autograd graph so the separation and diversity
    losses differentiate through them; indices are discrete.
    """

    trig_index: Tensor
    obj_index: Tensor
    trig_score: Tensor
    obj_score: Tensor
    key_cos: Tensor
    f_ret: Tensor


class PromptRepository(nn.Module):
    """M learnable prompt matrices [prompt_len, dim] with key vectors [dim]."""

    def __init__(self, size: int, prompt_len: int, dim: int, seed: int):
        super().__init__()
        if size < 2:
            raise ValueError(f"repository needs at least 2 prompts, got {size}")
        self.size = size
        self.prompt_len = prompt_len
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        keys = torch.randn(size, dim, generator=gen, dtype=torch.float64)
        keys = keys / keys.norm(dim=-1, keepdim=True)
        self.keys = nn.Parameter(keys)
        self.prompts = nn.Parameter(
            0.1 * torch.randn(size, prompt_len, dim, generator=gen, dtype=torch.float64)
        )

    def retrieve(self, f_v: Tensor) -> Retrieval:
        """Top-2 keys by cosine similarity; ties go to the lower index.

        Accepts one feature vector [dim] or a batch [B, dim].
        """
        if f_v.shape[-1] != self.dim:
            raise ValueError(f"feature width {f_v.shape[-1]} does not match repository dim {self.dim}")
        norms = f_v.norm(dim=-1, keepdim=True)
        if bool((norms == 0).any()):
            raise ValueError("zero-norm feature has no cosine similarity")
        query = f_v / norms
        keys = self.keys / self.keys.norm(dim=-1, keepdim=True)
        cos = query @ keys.T
        # Stable sort keeps the lower index in front on exact ties.
        scores, order = torch.sort(cos, dim=-1, descending=True, stable=True)
        trig_index, obj_index = order[..., 0], order[..., 1]
        trig_score, obj_score = scores[..., 0], scores[..., 1]
        key_cos = (keys[trig_index] * keys[obj_index]).sum(-1)
        pooled = self.prompts.mean(dim=-2)
        f_ret = 0.5 * (pooled[trig_index] + pooled[obj_index])
        return Retrieval(trig_index, obj_index, trig_score, obj_score, key_cos, f_ret)

    def forward(self, f_v: Tensor) -> Retrieval:
        return self.retrieve(f_v)


def separation_loss(retrieval: Retrieval) -> Tensor:
    """Mean of -log[ e^s_trig / (e^s_trig + e^s_obj) ] over the batch."""
    return F.softplus(retrieval.obj_score - retrieval.trig_score).mean()


def diversity_loss(retrieval: Retrieval, margin: float = 0.5, as_written: bool = False) -> Tensor:
    """Hinge on the cosine between the two selected keys.

    The default penalizes similarity above the margin, which is what
    pushes keys apart; as_written flips to the literal max(0, m - cos)
    form for auditing.
    """
    if as_written:
        return F.relu(margin - retrieval.key_cos).mean()
    return F.relu(retrieval.key_cos - margin).mean()


def visual_loss(sep: Tensor, div: Tensor) -> Tensor:
    """Sum of the separation and diversity terms."""
    return sep + div
