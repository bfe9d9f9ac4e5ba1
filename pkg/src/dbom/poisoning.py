"""Backdoor trigger injection and poisoned-corpus manifests.

Covers seven trigger classes (the identity CLEAN plus six pixel-space
attacks), rate-controlled corpus poisoning, a full pairing-space
expansion mode, and the JSONL manifest format shared by the training
and scanning tools.
"""

from __future__ import annotations

import io
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage


class TriggerKind(str, Enum):
    """Supported trigger families. CLEAN is the null trigger."""

    CLEAN = "clean"
    BADNETS_SQ = "badnets_sq"
    BADNETS_PX = "badnets_px"
    TROJAN_SQ = "trojan_sq"
    TROJAN_WM = "trojan_wm"
    L2_INV = "l2_inv"
    L0_INV = "l0_inv"


# Sparse pixel pattern for BADNETS_PX: an X inside a 3x3 block.
_PX_OFFSETS = ((0, 0), (0, 2), (1, 1), (2, 0), (2, 2))
_PX_BLOCK = 3

_CORNERS = ("tl", "tr", "bl", "br")


@dataclass(frozen=True)
class TriggerSpec:
    """One trigger signature: a kind plus its geometry and seed.

    Fields are kind-specific; unused ones keep their defaults. When
    pattern_seed is set, every application of the spec draws the same
    pattern, so a spec describes one visual signature corpus-wide.
    """

    kind: TriggerKind
    patch_size: int = 4
    corner: str = "br"
    offset: int = 1
    patch_value: float = 1.0
    blend_alpha: float = 0.2
    l2_epsilon: float = 1.0
    l0_budget: int = 16
    pattern_seed: int | None = None

    @property
    def name(self) -> str:
        return self.kind.value

    def validate(self) -> None:
        if self.kind == TriggerKind.CLEAN:
            return
        if self.corner not in _CORNERS:
            raise ValueError(f"unknown corner {self.corner!r}, expected one of {_CORNERS}")
        if not 0.0 <= self.blend_alpha <= 1.0:
            raise ValueError(f"blend_alpha must lie in [0, 1], got {self.blend_alpha}")
        if self.l2_epsilon < 0:
            raise ValueError(f"l2_epsilon must be >= 0, got {self.l2_epsilon}")
        if self.patch_size < 1:
            raise ValueError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.l0_budget < 1:
            raise ValueError(f"l0_budget must be >= 1, got {self.l0_budget}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "patch_size": self.patch_size,
            "corner": self.corner,
            "offset": self.offset,
            "patch_value": self.patch_value,
            "blend_alpha": self.blend_alpha,
            "l2_epsilon": self.l2_epsilon,
            "l0_budget": self.l0_budget,
            "pattern_seed": self.pattern_seed,
        }

    @staticmethod
    def from_dict(data: dict) -> "TriggerSpec":
        kind = TriggerKind(data["kind"])
        known = {f for f in TriggerSpec.__dataclass_fields__ if f != "kind"}
        extra = {k: v for k, v in data.items() if k in known}
        return TriggerSpec(kind=kind, **extra)


def default_trigger_set(image_shape: Sequence[int] = (32, 32, 3)) -> list[TriggerSpec]:
    """The CLEAN trigger plus six attacks scaled to the image size.

    Geometry defaults are this toolkit's own (patch sizes, corners,
    blend strengths); every field is overridable per spec.
    """
    h, w = int(image_shape[0]), int(image_shape[1])
    side = max(3, min(h, w) // 8)
    n_pixels = h * w
    return [
        TriggerSpec(TriggerKind.CLEAN),
        TriggerSpec(TriggerKind.BADNETS_SQ, patch_size=side, corner="br", offset=1,
                    patch_value=1.0, pattern_seed=101),
        TriggerSpec(TriggerKind.BADNETS_PX, corner="tr", offset=1,
                    patch_value=1.0, pattern_seed=102),
        TriggerSpec(TriggerKind.TROJAN_SQ, patch_size=side + 2, corner="tl", offset=1,
                    blend_alpha=0.5, pattern_seed=103),
        TriggerSpec(TriggerKind.TROJAN_WM, blend_alpha=0.2, pattern_seed=104),
        TriggerSpec(TriggerKind.L2_INV, l2_epsilon=0.12 * math.sqrt(n_pixels),
                    pattern_seed=105),
        TriggerSpec(TriggerKind.L0_INV, l0_budget=max(8, n_pixels // 16),
                    pattern_seed=106),
    ]


def _check_image(image: np.ndarray) -> np.ndarray:
    if not isinstance(image, np.ndarray) or image.ndim != 3:
        raise ValueError("image must be an H x W x C array")
    return np.asarray(image, dtype=np.float64)


def _patch_origin(spec: TriggerSpec, h: int, w: int, size: int) -> tuple[int, int]:
    off = spec.offset
    anchors = {
        "tl": (off, off),
        "tr": (off, w - size - off),
        "bl": (h - size - off, off),
        "br": (h - size - off, w - size - off),
    }
    r0, c0 = anchors[spec.corner]
    if r0 < 0 or c0 < 0 or r0 + size > h or c0 + size > w:
        raise ValueError(
            f"{spec.name} patch of size {size} at corner {spec.corner!r} "
            f"with offset {off} exceeds a {h}x{w} image"
        )
    return r0, c0


def l2_perturbation(shape: Sequence[int], epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """A Gaussian perturbation rescaled to Euclidean norm exactly epsilon."""
    delta = rng.standard_normal(tuple(shape))
    norm = float(np.linalg.norm(delta))
    if norm == 0.0:
        raise ValueError("degenerate zero-norm perturbation draw")
    return delta * (epsilon / norm)


def apply_trigger(image: np.ndarray, spec: TriggerSpec, seed: int = 0) -> np.ndarray:
    """Return a triggered copy of an H x W x C float image in [0, 1].

    Pure in (image, spec, seed). Pattern randomness comes from
    spec.pattern_seed when set, falling back to the call seed, so a
    fixed spec stamps the same signature on every image. Output is
    clamped to [0, 1].
    """
    image = _check_image(image)
    spec.validate()
    h, w, c = image.shape
    out = image.copy()
    rng = np.random.default_rng(seed if spec.pattern_seed is None else spec.pattern_seed)

    if spec.kind == TriggerKind.CLEAN:
        return out
    if spec.kind == TriggerKind.BADNETS_SQ:
        s = spec.patch_size
        r0, c0 = _patch_origin(spec, h, w, s)
        out[r0:r0 + s, c0:c0 + s, :] = spec.patch_value
    elif spec.kind == TriggerKind.BADNETS_PX:
        r0, c0 = _patch_origin(spec, h, w, _PX_BLOCK)
        for dr, dc in _PX_OFFSETS:
            out[r0 + dr, c0 + dc, :] = spec.patch_value
    elif spec.kind == TriggerKind.TROJAN_SQ:
        s = spec.patch_size
        r0, c0 = _patch_origin(spec, h, w, s)
        pattern = rng.random((s, s, c))
        a = spec.blend_alpha
        region = out[r0:r0 + s, c0:c0 + s, :]
        out[r0:r0 + s, c0:c0 + s, :] = (1.0 - a) * region + a * pattern
    elif spec.kind == TriggerKind.TROJAN_WM:
        pattern = rng.random((h, w, c))
        a = spec.blend_alpha
        out = (1.0 - a) * out + a * pattern
    elif spec.kind == TriggerKind.L2_INV:
        out = out + l2_perturbation((h, w, c), spec.l2_epsilon, rng)
    elif spec.kind == TriggerKind.L0_INV:
        if spec.l0_budget > h * w:
            raise ValueError(f"l0_budget {spec.l0_budget} exceeds {h}x{w} pixel count")
        flat = rng.choice(h * w, size=spec.l0_budget, replace=False)
        values = rng.random((spec.l0_budget, c))
        out[flat // w, flat % w, :] = values
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(f"unhandled trigger kind {spec.kind}")

    return np.clip(out, 0.0, 1.0)


class Split(str, Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class SampleRecord:
    """One manifest row: an image with its pair labels and split."""

    image_path: str
    object_label: int
    trigger_label: int
    split: Split

    def to_dict(self) -> dict:
        return {
            "image_path": self.image_path,
            "object_label": self.object_label,
            "trigger_label": self.trigger_label,
            "split": self.split.value,
        }

    @staticmethod
    def from_dict(data: dict) -> "SampleRecord":
        return SampleRecord(
            image_path=data["image_path"],
            object_label=int(data["object_label"]),
            trigger_label=int(data["trigger_label"]),
            split=Split(data["split"]),
        )


@dataclass
class PoisonManifest:
    """A corpus listing plus the trigger set and object names it indexes.

    trigger_label indexes trigger_set (CLEAN included), object_label
    indexes object_names. poison_rate is the fraction of records whose
    trigger is not CLEAN.
    """

    records: list[SampleRecord] = field(default_factory=list)
    trigger_set: list[TriggerSpec] = field(default_factory=list)
    object_names: list[str] = field(default_factory=list)
    poison_rate: float = 0.0

    @property
    def trigger_names(self) -> list[str]:
        return [s.name for s in self.trigger_set]

    @property
    def clean_index(self) -> int:
        for i, s in enumerate(self.trigger_set):
            if s.kind == TriggerKind.CLEAN:
                return i
        raise ValueError("trigger_set does not contain CLEAN")


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    # Write-then-rename so readers never observe a partial file.
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write a float image in [0, 1] as a lossless 8-bit PNG.

    Pixels are quantized by round(255 * v). Single-channel arrays go
    out as grayscale, three-channel as RGB.
    """
    image = _check_image(image)
    quantized = np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)
    if quantized.shape[2] == 1:
        pil = PILImage.fromarray(quantized[:, :, 0], mode="L")
    elif quantized.shape[2] == 3:
        pil = PILImage.fromarray(quantized, mode="RGB")
    else:
        raise ValueError(f"unsupported channel count {quantized.shape[2]}")
    buffer = io.BytesIO()
    pil.save(buffer, format="PNG")
    _atomic_write_bytes(Path(path), buffer.getvalue())


def load_image(path: str | Path) -> np.ndarray:
    """Read an image file back to H x W x C float64 in [0, 1]."""
    with PILImage.open(path) as pil:
        array = np.asarray(pil, dtype=np.float64) / 255.0
    if array.ndim == 2:
        array = array[:, :, None]
    return array


def save_manifest(manifest: PoisonManifest, path: str | Path) -> None:
    """Write records as JSONL plus a .meta.json sidecar.

    The JSONL rows carry exactly the keys image_path, object_label,
    trigger_label, split; trigger specs, object names and the poison
    rate ride in the sidecar so a manifest round-trips on its own.
    """
    path = Path(path)
    lines = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in manifest.records)
    _atomic_write_bytes(path, lines.encode("utf-8"))
    meta = {
        "trigger_set": [s.to_dict() for s in manifest.trigger_set],
        "object_names": list(manifest.object_names),
        "poison_rate": manifest.poison_rate,
    }
    meta_path = path.with_suffix(".meta.json")
    _atomic_write_bytes(meta_path, (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def load_manifest(path: str | Path) -> PoisonManifest:
    """Read a JSONL manifest and its .meta.json sidecar."""
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(SampleRecord.from_dict(json.loads(line)))
    meta_path = path.with_suffix(".meta.json")
    trigger_set: list[TriggerSpec] = []
    object_names: list[str] = []
    poison_rate = 0.0
    if meta_path.exists():
        with open(meta_path, "r", encoding="utf-8") as handle:
            meta = json.load(handle)
        trigger_set = [TriggerSpec.from_dict(d) for d in meta.get("trigger_set", [])]
        object_names = list(meta.get("object_names", []))
        poison_rate = float(meta.get("poison_rate", 0.0))
    return PoisonManifest(records=records, trigger_set=trigger_set,
                          object_names=object_names, poison_rate=poison_rate)


def _non_clean(trigger_set: Sequence[TriggerSpec]) -> list[TriggerSpec]:
    specs = [s for s in trigger_set if s.kind != TriggerKind.CLEAN]
    if not specs:
        raise ValueError("trigger_set must contain at least one non-clean trigger")
    return specs


def _full_trigger_set(trigger_set: Sequence[TriggerSpec]) -> list[TriggerSpec]:
    # Normalized ordering: CLEAN first, then the attacks as given.
    return [TriggerSpec(TriggerKind.CLEAN)] + _non_clean(trigger_set)


def poison_dataset(
    manifest: PoisonManifest,
    trigger_set: Sequence[TriggerSpec],
    rate: float,
    assignment_seed: int,
    out_dir: str | Path,
) -> PoisonManifest:
    """Poison a seeded floor(rate * N) subset of a clean corpus.

    Victim records are drawn uniformly without replacement; triggers
    are dealt cyclically from a seeded shuffle of the non-clean
    specs, which keeps per-trigger counts within one of each other.
    Triggered images land under out_dir/images; untouched records
    keep their original paths and the CLEAN label. Re-running with
    the same seed reproduces the output bit for bit.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must lie in [0, 1], got {rate}")
    full_set = _full_trigger_set(trigger_set)
    attacks = full_set[1:]
    n = len(manifest.records)
    n_poison = int(math.floor(rate * n))
    rng = np.random.default_rng(assignment_seed)
    chosen = rng.choice(n, size=n_poison, replace=False) if n_poison else np.array([], dtype=int)
    deal = rng.permutation(len(attacks))

    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    records = [replace(r, trigger_label=0) for r in manifest.records]
    for slot, rec_idx in enumerate(chosen):
        spec = attacks[deal[slot % len(attacks)]]
        src = records[rec_idx]
        image = load_image(src.image_path)
        triggered = apply_trigger(image, spec, seed=assignment_seed)
        name = f"{rec_idx:06d}_{Path(src.image_path).stem}_{spec.name}.png"
        dst = image_dir / name
        save_image(dst, triggered)
        records[rec_idx] = replace(src, image_path=str(dst),
                                   trigger_label=full_set.index(spec))
    return PoisonManifest(records=records, trigger_set=full_set,
                          object_names=list(manifest.object_names), poison_rate=rate)


def expand_pairing_space(
    manifest: PoisonManifest,
    trigger_set: Sequence[TriggerSpec],
    out_dir: str | Path,
    seed: int = 0,
) -> PoisonManifest:
    """Materialize the full trigger x object corpus.

    Every clean record is retained and additionally copied once per
    non-clean trigger, so each object class appears under all |T|
    trigger labels: with 6 attacks plus CLEAN that is 7 * |O| distinct
    label pairs (301 at 43 objects, 70 at 10).
    """
    full_set = _full_trigger_set(trigger_set)
    attacks = full_set[1:]
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    records: list[SampleRecord] = []
    for rec_idx, src in enumerate(manifest.records):
        records.append(replace(src, trigger_label=0))
        image = load_image(src.image_path)
        for spec in attacks:
            triggered = apply_trigger(image, spec, seed=seed)
            name = f"{rec_idx:06d}_{Path(src.image_path).stem}_{spec.name}.png"
            dst = image_dir / name
            save_image(dst, triggered)
            records.append(replace(src, image_path=str(dst),
                                   trigger_label=full_set.index(spec)))
    rate = len(attacks) / (len(attacks) + 1)
    return PoisonManifest(records=records, trigger_set=full_set,
                          object_names=list(manifest.object_names), poison_rate=rate)
