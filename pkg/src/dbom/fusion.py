"""Pair scoring: similarity logits, decomposition, fusion, losses.

All pair logits share one similarity convention (cosine or raw dot,
scaled by a temperature). Trigger and object marginals come from
group-averaging pair logits; the fused feature is single-query cross
attention of a text feature over the image's patch tokens.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from dbom.pairs import PairSpace


def similarity(a: Tensor, b: Tensor, kind: str = "cosine", tau: float = 0.01) -> Tensor:
    """Temperature-scaled inner product over the last axis, broadcasting.

    cosine normalizes both sides first; dot uses raw features.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if kind == "cosine":
        a = a / a.norm(dim=-1, keepdim=True)
        b = b / b.norm(dim=-1, keepdim=True)
    elif kind != "dot":
        raise ValueError(f"similarity kind must be cosine or dot, got {kind!r}")
    return (a * b).sum(-1) / tau


def _group_means(logits: Tensor, groups: Tensor, n_groups: int, label: str) -> Tensor:
    counts = torch.bincount(groups, minlength=n_groups).to(logits.dtype)
    if bool((counts == 0).any()):
        missing = torch.nonzero(counts == 0).flatten().tolist()
        raise ValueError(f"{label} indices {missing} appear in no candidate pair")
    flat = logits.reshape(-1, logits.shape[-1])
    sums = torch.zeros(flat.shape[0], n_groups, dtype=logits.dtype)
    sums.index_add_(1, groups, flat)
    return (sums / counts).reshape(*logits.shape[:-1], n_groups)


def decomposed_probs(pair_logits: Tensor, candidates: Sequence[int],
                     space: PairSpace) -> tuple[Tensor, Tensor]:
    """Trigger and object marginals from grouped pair logits.

    The logit for a trigger is the mean of pair logits over candidate
    pairs containing it (likewise objects); each marginal is then a
    softmax. candidates are indices into space.pairs and must cover
    every trigger and object.
    """
    if pair_logits.shape[-1] != len(candidates):
        raise ValueError("logit columns do not match the candidate list")
    trig_of = torch.tensor([space.pairs[k][0] for k in candidates], dtype=torch.long)
    obj_of = torch.tensor([space.pairs[k][1] for k in candidates], dtype=torch.long)
    trig_logits = _group_means(pair_logits, trig_of, len(space.triggers), "trigger")
    obj_logits = _group_means(pair_logits, obj_of, len(space.objects), "object")
    return trig_logits.softmax(-1), obj_logits.softmax(-1)


def tri_obj_loss(p_trig: Tensor, p_obj: Tensor, trig_labels: Tensor,
                 obj_labels: Tensor) -> tuple[Tensor, Tensor]:
    """Mean negative log-probability of the true trigger and object."""
    def nll(probs: Tensor, labels: Tensor) -> Tensor:
        if probs.ndim == 1:
            return -probs[labels].log()
        picked = probs.gather(-1, labels[..., None]).squeeze(-1)
        return -picked.log().mean()

    return nll(p_trig, trig_labels), nll(p_obj, obj_labels)


class CrossAttention(nn.Module):
    """Single-query attention of a text feature over visual tokens.

    Learned bias-free projections produce Q from the text side and
    K, V from the patch tokens; weights are softmax(QK^T / sqrt(d)).
    The Q and K init is scaled by gain so the initial score spread is
    wide enough for the softmax to start selective rather than near
    uniform; gain 1 recovers plain fan-in init.
    """

    def __init__(self, text_dim: int, visual_dim: int, attn_dim: int, seed: int,
                 gain: float = 1.0):
        super().__init__()
        self.attn_dim = attn_dim
        self.query = nn.Linear(text_dim, attn_dim, bias=False, dtype=torch.float64)
        self.key = nn.Linear(visual_dim, attn_dim, bias=False, dtype=torch.float64)
        self.value = nn.Linear(visual_dim, attn_dim, bias=False, dtype=torch.float64)
        gen = torch.Generator().manual_seed(seed)
        for layer in (self.query, self.key, self.value):
            fan_in = layer.weight.shape[1]
            bound = 1.0 / math.sqrt(fan_in)
            if layer is not self.value:
                bound *= gain
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=gen)

    def forward(self, f_t: Tensor, visual_tokens: Tensor) -> tuple[Tensor, Tensor]:
        """Fuse f_t [.., text_dim] with tokens [.., n_tok, visual_dim].

        Leading axes broadcast: a [B, n_cand, text_dim] text batch
        attends over [B, n_tok, visual_dim] tokens. Returns the fused
        features and the attention weights over tokens.
        """
        if f_t.shape[-1] != self.query.weight.shape[1]:
            raise ValueError(
                f"text width {f_t.shape[-1]} does not match projection input {self.query.weight.shape[1]}"
            )
        if visual_tokens.shape[-1] != self.key.weight.shape[1]:
            raise ValueError(
                f"token width {visual_tokens.shape[-1]} does not match projection input {self.key.weight.shape[1]}"
            )
        single = f_t.ndim == 1
        if single:
            f_t = f_t[None]
        q = self.query(f_t)
        k = self.key(visual_tokens)
        v = self.value(visual_tokens)
        if q.ndim == k.ndim:
            # Queries carry an extra candidate axis over a shared token set.
            k = k[..., None, :, :]
            v = v[..., None, :, :]
        scores = (q[..., None, :] * k).sum(-1) / math.sqrt(self.attn_dim)
        weights = scores.softmax(-1)
        fused = (weights[..., None] * v).sum(-2)
        if single:
            fused, weights = fused[0], weights[0]
        return fused, weights


def pair_alignment(logits: Tensor, labels: Tensor | int) -> tuple[Tensor, Tensor]:
    """Softmax probabilities plus mean cross-entropy at the true pair."""
    logp = logits.log_softmax(-1)
    if logits.ndim == 1:
        loss = -logp[labels]
    else:
        labels = torch.as_tensor(labels, dtype=torch.long)
        loss = -logp.gather(-1, labels[..., None]).squeeze(-1).mean()
    return logp.exp(), loss


def sp_loss(image_feats: Tensor, fused: Tensor, labels: Tensor | int,
            kind: str = "cosine", tau: float = 0.01) -> tuple[Tensor, Tensor]:
    """Alignment of image features with the per-pair fused features.

    image_feats is [.., d], fused [.., n_cand, d]; labels index the
    candidate axis.
    """
    logits = similarity(image_feats[..., None, :], fused, kind=kind, tau=tau)
    return pair_alignment(logits, labels)


def ret_loss(retrieved: Tensor, text_feats: Tensor, labels: Tensor | int,
             kind: str = "cosine", tau: float = 0.01) -> tuple[Tensor, Tensor]:
    """Alignment of the retrieved prompt feature with per-pair text features."""
    logits = similarity(retrieved[..., None, :], text_feats, kind=kind, tau=tau)
    return pair_alignment(logits, labels)
