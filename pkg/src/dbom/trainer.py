"""Training loop, pair-space inference and binary poison scanning."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from dbom.config import DetectorConfig, LossWeights, TrainConfig  # noqa: F401 re-export
from dbom.encoders import VisualFeatures
from dbom.model import DetectorModel
from dbom.pairs import PairSpace, PairSplit, build_pair_space, validate_split
from dbom.poisoning import PoisonManifest, Split, TriggerKind, load_image

_ENCODE_CHUNK = 256


def total_loss(l_ret, l_tri, l_obj, l_sp, l_vis, weights: LossWeights):
    """Weighted composite of the five loss terms.

    The retrieval-alignment term is unweighted; trigger and object
    cross-entropies share one weight.
    """
    return (
        l_ret
        + weights.lambda_tri_obj * (l_tri + l_obj)
        + weights.lambda_sp * l_sp
        + weights.lambda_vis * l_vis
    )


@dataclass
class EncodedDataset:
    """Frozen-encoder features and labels for a record subset."""

    feats: VisualFeatures
    pair_indices: Tensor
    trig_labels: Tensor
    obj_labels: Tensor
    paths: list[str]

    def __len__(self) -> int:
        return len(self.paths)


def encode_manifest(model: DetectorModel, manifest: PoisonManifest,
                    splits: set[Split] | None = None) -> EncodedDataset:
    """Load and encode every record (optionally restricted by split)."""
    records = [r for r in manifest.records if splits is None or r.split in splits]
    if not records:
        raise ValueError("no records selected for encoding")
    images = np.stack([load_image(r.image_path) for r in records])
    chunks = []
    for start in range(0, len(records), _ENCODE_CHUNK):
        feats = model.encode_images(images[start:start + _ENCODE_CHUNK])
        chunks.append(feats)
    global_feat = torch.cat([c.global_feat for c in chunks])
    tokens = torch.cat([c.tokens for c in chunks])
    trig = torch.tensor([r.trigger_label for r in records], dtype=torch.long)
    obj = torch.tensor([r.object_label for r in records], dtype=torch.long)
    pair_idx = torch.tensor(
        [model.space.pair_index(r.trigger_label, r.object_label) for r in records],
        dtype=torch.long,
    )
    return EncodedDataset(
        feats=VisualFeatures(global_feat=global_feat, tokens=tokens),
        pair_indices=pair_idx, trig_labels=trig, obj_labels=obj,
        paths=[r.image_path for r in records],
    )


def _batch_total(comps: dict[str, Tensor], config: TrainConfig, epoch: int):
    w = config.weights
    if config.schedule == "two_stage":
        # First half shapes prompts and fusion, second half aligns
        # retrieval against the learned text features.
        phase1_epochs = math.ceil(config.epochs / 2)
        if epoch < phase1_epochs:
            return (
                w.lambda_tri_obj * (comps["tri"] + comps["obj"])
                + w.lambda_sp * comps["sp"]
                + w.lambda_vis * comps["vis"]
            )
        return comps["ret"] + w.lambda_vis * comps["vis"]
    return total_loss(comps["ret"], comps["tri"], comps["obj"], comps["sp"], comps["vis"], w)


def fit(
    manifest: PoisonManifest,
    split: PairSplit,
    config: DetectorConfig,
    *,
    space: PairSpace | None = None,
    progress: Callable[[dict], None] | None = None,
) -> tuple[DetectorModel, list[dict]]:
    """Train a detector on the manifest's TRAIN records over seen pairs.

    Deterministic per config seed at a fixed thread count. Returns the
    trained model and a per-epoch history of loss components and
    training pair accuracy. Training records whose pair is not in the
    seen split are rejected.
    """
    config.validate()
    if space is None:
        space = build_pair_space(manifest.trigger_names, manifest.object_names)
    validate_split(space, split)
    model = DetectorModel(space, config)
    data = encode_manifest(model, manifest, {Split.TRAIN})

    seen_set = split.seen_set
    bad = sorted({int(k) for k in data.pair_indices.tolist() if int(k) not in seen_set})
    if bad:
        names = [space.pair_names(k) for k in bad[:5]]
        raise ValueError(f"training records carry unseen pairs {names}; training must stay on seen pairs")

    candidates = list(split.seen)
    slot_of = {k: i for i, k in enumerate(candidates)}
    positions = torch.tensor([slot_of[int(k)] for k in data.pair_indices.tolist()], dtype=torch.long)

    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=config.train.lr)
    rng = np.random.default_rng(config.train.seed)
    n = len(data)
    batch_size = config.train.batch_size
    history: list[dict] = []

    for epoch in range(config.train.epochs):
        perm = rng.permutation(n)
        sums: dict[str, float] = defaultdict(float)
        correct = 0
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(perm[start:start + batch_size].copy())
            feats = VisualFeatures(data.feats.global_feat[idx], data.feats.tokens[idx])
            scores = model.score_pairs(feats, candidates)
            comps = model.loss_components(scores, positions[idx],
                                          data.trig_labels[idx], data.obj_labels[idx])
            batch_loss = _batch_total(comps, config.train, epoch)
            optimizer.zero_grad()
            batch_loss.backward()
            if config.train.grad_clip > 0:
                nn.utils.clip_grad_norm_(model.trainable_parameters(), config.train.grad_clip)
            optimizer.step()

            k = len(idx)
            sums["total"] += batch_loss.item() * k
            for name, value in comps.items():
                sums[name] += value.item() * k
            correct += int((scores.sp_logits.argmax(-1) == positions[idx]).sum().item())
        entry = {"epoch": epoch + 1, "train_acc": correct / n}
        entry.update({name: value / n for name, value in sums.items()})
        history.append(entry)
        if progress is not None:
            progress(entry)
    return model, history


def predict_features(model: DetectorModel, feats: VisualFeatures,
                     test_pairs: Sequence[int],
                     batch_size: int = _ENCODE_CHUNK) -> tuple[np.ndarray, np.ndarray]:
    """Argmax pair slots and the full score matrix for encoded features.

    Scores are the pre-softmax alignment logits over test_pairs, the
    quantity the calibration-bias sweep shifts.
    """
    if not test_pairs:
        raise ValueError("test_pairs is empty")
    candidates = list(test_pairs)
    all_logits = []
    with torch.no_grad():
        n = feats.global_feat.shape[0]
        for start in range(0, n, batch_size):
            chunk = VisualFeatures(feats.global_feat[start:start + batch_size],
                                   feats.tokens[start:start + batch_size])
            all_logits.append(model.score_pairs(chunk, candidates).sp_logits)
    logits = torch.cat(all_logits).numpy()
    return logits.argmax(-1), logits


def predict(model: DetectorModel, image: np.ndarray,
            test_pairs: Sequence[int]) -> tuple[tuple[str, str], np.ndarray]:
    """Best (trigger, object) names over test_pairs plus the score vector."""
    feats = model.encode_images(np.asarray(image)[None])
    slots, logits = predict_features(model, feats, test_pairs)
    pair = list(test_pairs)[int(slots[0])]
    return model.space.pair_names(pair), logits[0]


class Verdict(str, Enum):
    POISONED = "poisoned"
    CLEAN = "clean"


@dataclass
class ScanResult:
    """Per-image detection verdict with the predicted pair."""

    path: str
    verdict: Verdict
    trigger: str
    object: str
    score: float

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "verdict": self.verdict.value,
            "trigger": self.trigger,
            "object": self.object,
            "score": self.score,
        }


def _require_clean(space: PairSpace) -> str:
    clean = TriggerKind.CLEAN.value
    if clean not in space.triggers:
        raise ValueError("scanning needs the CLEAN trigger in the pair space")
    return clean


def scan(model: DetectorModel, image: np.ndarray,
         test_pairs: Sequence[int]) -> tuple[Verdict, tuple[str, str]]:
    """POISONED iff the predicted trigger is not CLEAN."""
    clean = _require_clean(model.space)
    (trigger, obj), _ = predict(model, image, test_pairs)
    verdict = Verdict.CLEAN if trigger == clean else Verdict.POISONED
    return verdict, (trigger, obj)


def scan_images(model: DetectorModel, paths: Sequence[str | Path],
                test_pairs: Sequence[int]) -> list[ScanResult]:
    """Scan image files in bulk; score is the winning softmax probability."""
    clean = _require_clean(model.space)
    if not paths:
        return []
    images = np.stack([load_image(p) for p in paths])
    feats = model.encode_images(images)
    slots, logits = predict_features(model, feats, test_pairs)
    probs = torch.from_numpy(logits).softmax(-1).numpy()
    results = []
    for i, path in enumerate(paths):
        pair = list(test_pairs)[int(slots[i])]
        trigger, obj = model.space.pair_names(pair)
        verdict = Verdict.CLEAN if trigger == clean else Verdict.POISONED
        results.append(ScanResult(path=str(path), verdict=verdict, trigger=trigger,
                                  object=obj, score=float(probs[i, slots[i]])))
    return results
