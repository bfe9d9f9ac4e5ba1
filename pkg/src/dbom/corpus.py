"""Synthetic image corpora with separable objects and real triggers.

Each object class is a fixed random template confined to a center
block on a shared textured frame; samples are the template plus small
Gaussian noise, and trigger patterns are stamped by the same routines
the poisoner uses on real data. Keeping object variation in the
center and trigger patterns mostly on the frame makes the trigger's
feature delta nearly object-independent, so trigger and object
identity factorize cleanly and unseen pairings stay recomposable.
The fixed frame texture doubles as the signature of the no-trigger
state: every trigger disturbs it, so clean detection rests on positive
evidence rather than on the absence of any pattern. The corpora
exercise the full pipeline end to end while staying small enough for
fast tests.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from dbom.pairs import PairSpace, PairSplit, build_pair_space, save_split, split_pairs
from dbom.poisoning import (
    PoisonManifest,
    SampleRecord,
    Split,
    TriggerKind,
    TriggerSpec,
    apply_trigger,
    save_image,
    save_manifest,
)

_TEMPLATE_LO = 0.25
_TEMPLATE_HI = 0.75


def object_names(n_objects: int) -> list[str]:
    return [f"obj{i:02d}" for i in range(n_objects)]


def _center_margins(image_shape: tuple[int, int, int]) -> tuple[int, int]:
    # Margins above a quarter keep the object block strictly inside
    # the four central cells of a 4x4 patch grid, so object evidence
    # never leaks into the frame cells that carry trigger patches, and
    # each central cell still keeps a band of frame texture so object
    # content does not swamp the per-cell signal.
    h, w, _ = image_shape
    mh, mw = (5 * h) // 16, (5 * w) // 16
    if h - 2 * mh < 2 or w - 2 * mw < 2:
        raise ValueError(f"image shape {image_shape} leaves no center block for objects")
    return mh, mw


def separable_trigger_set(image_shape: tuple[int, int, int] = (32, 32, 3)) -> list[TriggerSpec]:
    """Trigger parameters tuned for the frame-structured templates.

    Patch triggers sit fully on the constant frame and the global
    patterns are strong blends or wide perturbations, so every trigger
    moves the image by an object-independent delta that is large next
    to the between-object spread. The wide margins also separate the
    no-trigger state: a clean image is far from every trigger's delta,
    which is what scanning leans on.
    """
    h, w, _ = image_shape
    side = min(h, w)
    # With offset 1 a patch of side cell-1 fills its corner cell of a
    # 4x4 patch grid exactly and never reaches the object block.
    sq = max(1, min(max(3, (7 * side) // 32), h // 4 - 1, w // 4 - 1))
    return [
        TriggerSpec(kind=TriggerKind.CLEAN),
        TriggerSpec(kind=TriggerKind.BADNETS_SQ, patch_size=sq, corner="tl", patch_value=1.0),
        TriggerSpec(kind=TriggerKind.BADNETS_PX, corner="tr", patch_value=1.0),
        TriggerSpec(kind=TriggerKind.TROJAN_SQ, patch_size=sq, corner="br",
                    blend_alpha=0.9, pattern_seed=103),
        TriggerSpec(kind=TriggerKind.TROJAN_WM, blend_alpha=0.35, pattern_seed=104),
        TriggerSpec(kind=TriggerKind.L2_INV, l2_epsilon=0.25 * np.sqrt(h * w),
                    pattern_seed=105),
        TriggerSpec(kind=TriggerKind.L0_INV, l0_budget=max(8, (h * w) // 8),
                    pattern_seed=106),
    ]


def object_templates(n_objects: int, image_shape: tuple[int, int, int],
                     seed: int) -> np.ndarray:
    """Per-object random center blocks on a shared textured frame.

    The frame texture is one fixed pattern for the whole corpus, so an
    intact frame is itself a detectable signature: triggers overwrite
    or blend parts of it, and the no-trigger state is recognized by
    the undisturbed texture rather than by the absence of evidence.
    """
    if n_objects < 1:
        raise ValueError("need at least one object class")
    h, w, _ = image_shape
    mh, mw = _center_margins(image_shape)
    rng = np.random.default_rng(seed)
    canvas = rng.uniform(_TEMPLATE_LO, _TEMPLATE_HI, size=image_shape)
    templates = np.repeat(canvas[None], n_objects, axis=0)
    center_shape = (n_objects, h - 2 * mh, w - 2 * mw, image_shape[2])
    templates[:, mh:h - mh, mw:w - mw, :] = rng.uniform(_TEMPLATE_LO, _TEMPLATE_HI,
                                                        size=center_shape)
    return templates


def sample_image(template: np.ndarray, rng: np.random.Generator,
                 noise: float) -> np.ndarray:
    return np.clip(template + rng.normal(0.0, noise, size=template.shape), 0.0, 1.0)


def make_clean_corpus(
    out_dir: str | Path,
    *,
    n_objects: int = 10,
    n_train_per_object: int = 20,
    n_test_per_object: int = 10,
    image_shape: tuple[int, int, int] = (32, 32, 3),
    noise: float = 0.005,
    seed: int = 0,
    trigger_set: Sequence[TriggerSpec] | None = None,
) -> PoisonManifest:
    """All-CLEAN corpus ready for rate-based poisoning.

    The manifest carries the full trigger set so a poisoner can relabel
    records it stamps. Writes PNGs under out_dir/images and the
    manifest at out_dir/manifest.jsonl.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    trigger_set = list(trigger_set) if trigger_set is not None else separable_trigger_set(image_shape)
    clean_idx = next(i for i, s in enumerate(trigger_set) if s.kind == TriggerKind.CLEAN)
    templates = object_templates(n_objects, image_shape, seed)
    rng = np.random.default_rng(seed + 1)

    records: list[SampleRecord] = []
    for obj in range(n_objects):
        for split, count in ((Split.TRAIN, n_train_per_object), (Split.TEST, n_test_per_object)):
            for j in range(count):
                image = sample_image(templates[obj], rng, noise)
                path = image_dir / f"clean_{obj:02d}_{split.value}_{j:04d}.png"
                save_image(path, image)
                records.append(SampleRecord(
                    image_path=str(path), object_label=obj,
                    trigger_label=clean_idx, split=split,
                ))
    manifest = PoisonManifest(
        records=records, trigger_set=trigger_set,
        object_names=object_names(n_objects), poison_rate=0.0,
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def make_paired_corpus(
    out_dir: str | Path,
    *,
    n_objects: int = 10,
    n_train_per_pair: int = 6,
    n_test_per_pair: int = 2,
    seen_fraction: float = 0.6,
    image_shape: tuple[int, int, int] = (32, 32, 3),
    noise: float = 0.005,
    seed: int = 0,
    trigger_set: Sequence[TriggerSpec] | None = None,
) -> tuple[PoisonManifest, PairSpace, PairSplit]:
    """Pair-complete corpus: TRAIN covers seen pairs, TEST covers all.

    Every seen (trigger, object) pair gets n_train_per_pair training
    images and every pair in the space gets n_test_per_pair test
    images, so unseen pairs appear only at test time. Writes PNGs,
    manifest.jsonl and split.json under out_dir.
    """
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    trigger_set = list(trigger_set) if trigger_set is not None else separable_trigger_set(image_shape)
    space = build_pair_space([s.name for s in trigger_set], object_names(n_objects))
    split = split_pairs(space, seen_fraction, seed)
    templates = object_templates(n_objects, image_shape, seed)
    rng = np.random.default_rng(seed + 1)

    records: list[SampleRecord] = []

    def emit(pair_idx: int, split_kind: Split, count: int) -> None:
        t_idx, o_idx = space.pairs[pair_idx]
        spec = trigger_set[t_idx]
        for j in range(count):
            image = sample_image(templates[o_idx], rng, noise)
            image = apply_trigger(image, spec)
            path = image_dir / f"{split_kind.value}_{spec.name}_{o_idx:02d}_{j:04d}.png"
            save_image(path, image)
            records.append(SampleRecord(
                image_path=str(path), object_label=o_idx,
                trigger_label=t_idx, split=split_kind,
            ))

    for pair_idx in split.seen:
        emit(pair_idx, Split.TRAIN, n_train_per_pair)
    for pair_idx in split.test_pairs:
        emit(pair_idx, Split.TEST, n_test_per_pair)

    n_poison = sum(1 for r in records if trigger_set[r.trigger_label].kind != TriggerKind.CLEAN)
    manifest = PoisonManifest(
        records=records, trigger_set=trigger_set,
        object_names=object_names(n_objects),
        poison_rate=n_poison / len(records),
    )
    save_manifest(manifest, out_dir / "manifest.jsonl")
    save_split(split, space, out_dir / "split.json")
    return manifest, space, split
