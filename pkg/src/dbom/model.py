"""The detector model: frozen encoders plus every trainable part.

One module owns the prompt repository, the soft prefix and its bias
network, the cross-attention projections and the trigger/object word
tables, wired over a pair space. Scoring a batch against a candidate
pair list yields everything the losses and the pair-space inference
need in one pass.
"""

from __future__ import annotations

import io
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from dbom.config import DetectorConfig, config_from_dict, config_hash, config_to_dict
from dbom.encoders import VisualFeatures, WordTable, build_encoders
from dbom.fusion import (
    CrossAttention,
    decomposed_probs,
    pair_alignment,
    similarity,
    tri_obj_loss,
)
from dbom.pairs import PairSpace, build_pair_space
from dbom.prefix import ApNet, SoftPrefix, adapt_prefix
from dbom.repository import (
    PromptRepository,
    Retrieval,
    diversity_loss,
    separation_loss,
    visual_loss,
)

_CHECKPOINT_FORMAT = "dbom-checkpoint"


@dataclass
class PairScores:
    """Everything computed for one batch against one candidate list."""

    candidates: tuple[int, ...]
    retrieval: Retrieval
    text_feats: Tensor    # [B, n_cand, d_t]
    pair_logits: Tensor   # [B, n_cand], image feature vs text feature
    fused: Tensor         # [B, n_cand, d]
    attn_weights: Tensor  # [B, n_cand, n_tok]
    sp_logits: Tensor     # [B, n_cand], image feature vs fused feature
    ret_logits: Tensor    # [B, n_cand], retrieved feature vs text feature


class DetectorModel(nn.Module):
    """Trigger/object detector over a fixed pair space."""

    def __init__(self, space: PairSpace, config: DetectorConfig):
        super().__init__()
        config.validate()
        self.space = space
        self.config = config
        enc = config.encoder
        self.image_encoder, self.text_encoder = build_encoders(enc)
        self.repository = PromptRepository(
            size=config.repository.size, prompt_len=config.repository.prompt_len,
            dim=enc.feat_dim, seed=config.repository.seed,
        )
        self.prefix = SoftPrefix(config.prefix.length, enc.embed_dim,
                                 mode=config.prefix.mode, seed=config.prefix.seed)
        self.apnet = ApNet(enc.feat_dim, config.apnet.hidden, config.prefix.length,
                           enc.embed_dim, seed=config.apnet.seed)
        self.attention = CrossAttention(text_dim=enc.feat_dim, visual_dim=enc.feat_dim,
                                        attn_dim=enc.feat_dim, seed=config.head.seed,
                                        gain=config.head.attn_gain)
        self.trigger_words = WordTable(space.triggers, enc.embed_dim, seed=config.word_seed)
        self.object_words = WordTable(space.objects, enc.embed_dim, seed=config.word_seed + 1)
        if config.prefix.mode == "static":
            # The bias network only exists to shift the prefix.
            for p in self.apnet.parameters():
                p.requires_grad_(False)

    def encode_images(self, images: np.ndarray | Tensor) -> VisualFeatures:
        with torch.no_grad():
            return self.image_encoder.encode(images)

    def pair_text_features(self, shifted: Tensor, candidates: Sequence[int]) -> Tensor:
        """Text features for every candidate pair under a shifted prefix.

        shifted is [p, d_e] (shared prefix) or [B, p, d_e] (per-image);
        the result is [n_cand, d_t] or [B, n_cand, d_t]. In learnable
        mode every image therefore gets its own rows; in static mode
        the shared prefix makes the rows image-independent.
        """
        cand_t = [self.space.pairs[k][0] for k in candidates]
        cand_o = [self.space.pairs[k][1] for k in candidates]
        trig_rows = self.trigger_words.table[torch.tensor(cand_t, dtype=torch.long)]
        obj_rows = self.object_words.table[torch.tensor(cand_o, dtype=torch.long)]
        n_cand = len(candidates)
        p, d_e = self.prefix.length, self.prefix.embed_dim
        if shifted.ndim == 2:
            seqs = torch.cat(
                [shifted[None].expand(n_cand, p, d_e), trig_rows[:, None, :], obj_rows[:, None, :]],
                dim=1,
            )
        else:
            b = shifted.shape[0]
            seqs = torch.cat(
                [
                    shifted[:, None].expand(b, n_cand, p, d_e),
                    trig_rows[None, :, None, :].expand(b, n_cand, 1, d_e),
                    obj_rows[None, :, None, :].expand(b, n_cand, 1, d_e),
                ],
                dim=2,
            )
        return self.text_encoder.encode(seqs)

    def score_pairs(self, feats: VisualFeatures, candidates: Sequence[int]) -> PairScores:
        """Score a feature batch against candidate pair indices."""
        if feats.global_feat.ndim != 2:
            raise ValueError("score_pairs expects batched features [B, d]")
        if not candidates:
            raise ValueError("candidate pair list is empty")
        kind, tau = self.config.head.similarity, self.config.head.tau
        f_v = feats.global_feat
        retrieval = self.repository.retrieve(f_v)
        shifted = adapt_prefix(f_v, self.prefix, self.apnet)
        text_feats = self.pair_text_features(shifted, candidates)
        pair_logits = similarity(f_v[:, None, :], text_feats, kind=kind, tau=tau)
        fused, attn_weights = self.attention(text_feats, feats.tokens)
        sp_logits = similarity(f_v[:, None, :], fused, kind=kind, tau=tau)
        ret_logits = similarity(retrieval.f_ret[:, None, :], text_feats, kind=kind, tau=tau)
        return PairScores(
            candidates=tuple(candidates), retrieval=retrieval, text_feats=text_feats,
            pair_logits=pair_logits, fused=fused, attn_weights=attn_weights,
            sp_logits=sp_logits, ret_logits=ret_logits,
        )

    def loss_components(self, scores: PairScores, positions: Tensor,
                        trig_labels: Tensor, obj_labels: Tensor) -> dict[str, Tensor]:
        """All loss terms for a scored batch.

        positions index the candidate axis (the true pair's slot);
        trig/obj labels index the pair space's primitive lists.
        """
        _, l_ret = pair_alignment(scores.ret_logits, positions)
        p_trig, p_obj = decomposed_probs(scores.pair_logits, scores.candidates, self.space)
        l_tri, l_obj = tri_obj_loss(p_trig, p_obj, trig_labels, obj_labels)
        _, l_sp = pair_alignment(scores.sp_logits, positions)
        l_sep = separation_loss(scores.retrieval)
        l_div = diversity_loss(scores.retrieval, margin=self.config.div_loss.margin,
                               as_written=self.config.div_loss.as_written)
        return {
            "ret": l_ret, "tri": l_tri, "obj": l_obj, "sp": l_sp,
            "sep": l_sep, "div": l_div, "vis": visual_loss(l_sep, l_div),
        }

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]


def save_repository_npz(repo: PromptRepository, path: str | Path) -> None:
    """Dump prompts and keys to npz with an explicit shape header."""
    np.savez(
        path,
        prompts=repo.prompts.detach().numpy(),
        keys=repo.keys.detach().numpy(),
        shape=np.array([repo.size, repo.prompt_len, repo.dim]),
    )


def load_repository_npz(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read back (prompts, keys), checking the shape header."""
    with np.load(path) as data:
        prompts, keys, shape = data["prompts"], data["keys"], data["shape"]
    if tuple(prompts.shape) != tuple(shape) or tuple(keys.shape) != (shape[0], shape[2]):
        raise ValueError("repository dump shape header does not match its arrays")
    return prompts, keys


def save_checkpoint(model: DetectorModel, path: str | Path) -> None:
    """Bundle config, pair space and state into one reloadable file."""
    payload = {
        "format": _CHECKPOINT_FORMAT,
        "version": 1,
        "config": config_to_dict(model.config),
        "config_hash": config_hash(model.config),
        "triggers": list(model.space.triggers),
        "objects": list(model.space.objects),
        "state": model.state_dict(),
    }
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(buffer.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> DetectorModel:
    payload = torch.load(path, weights_only=True)
    if payload.get("format") != _CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a detector checkpoint")
    config = config_from_dict(payload["config"])
    space = build_pair_space(payload["triggers"], payload["objects"])
    model = DetectorModel(space, config)
    model.load_state_dict(payload["state"])
    return model
