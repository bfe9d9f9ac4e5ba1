"""Command line entry points.

Subcommands cover the full workflow: poison a corpus, train the
detector, evaluate it on a compositional split, scan images for
verdicts, and sweep a config axis with a comparison report.
"""

from __future__ import annotations

import argparse
import copy
import glob as globlib
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from dbom.config import DetectorConfig, config_from_dict, load_config
from dbom.metrics import bias_curve, czsl_metrics, trigger_confusion
from dbom.model import DetectorModel, load_checkpoint, save_checkpoint
from dbom.pairs import build_pair_space, load_split
from dbom.poisoning import (
    PoisonManifest,
    Split,
    TriggerSpec,
    load_manifest,
    poison_dataset,
    save_manifest,
)
from dbom.reporting import report
from dbom.trainer import encode_manifest, fit, predict_features, scan_images

SWEEP_PARAMS = ("lambda_vis", "prefix_mode")


def _load_triggers(path: str | None, manifest: PoisonManifest) -> list[TriggerSpec]:
    if path is None:
        if not manifest.trigger_set:
            raise ValueError("manifest carries no trigger set; pass --triggers")
        return list(manifest.trigger_set)
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError("trigger config must be a JSON list of trigger specs")
    return [TriggerSpec.from_dict(d) for d in data]


def _load_config(path: str | None) -> DetectorConfig:
    if path is None:
        config = DetectorConfig()
        config.validate()
        return config
    return load_config(path)


def _space_and_split(manifest: PoisonManifest, split_path: str):
    space = build_pair_space(manifest.trigger_names, manifest.object_names)
    return space, load_split(space, split_path)


def _history_path(ckpt: str) -> Path:
    return Path(str(ckpt) + ".history.json")


def _cmd_poison(args) -> int:
    manifest = load_manifest(args.manifest)
    triggers = _load_triggers(args.triggers, manifest)
    poisoned = poison_dataset(manifest, triggers, args.rate, args.seed, args.out)
    out_path = Path(args.out) / "manifest.jsonl"
    save_manifest(poisoned, out_path)
    n_poisoned = sum(1 for r in poisoned.records if r.trigger_label != poisoned.clean_index)
    print(f"poisoned {n_poisoned} of {len(poisoned.records)} records -> {out_path}")
    return 0


def _cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    space, split = _space_and_split(manifest, args.split)
    config = _load_config(args.config)

    def progress(entry: dict) -> None:
        print(f"epoch {entry['epoch'] + 1}/{config.train.epochs} "
              f"total {entry['total']:.4f} train_acc {entry['train_acc']:.3f}")

    model, history = fit(manifest, split, config, space=space, progress=progress)
    save_checkpoint(model, args.out)
    _history_path(args.out).write_text(
        json.dumps(history, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"checkpoint -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    space, split = _space_and_split(manifest, args.split)
    if (space.triggers, space.objects) != (model.space.triggers, model.space.objects):
        raise ValueError("manifest pair space does not match the checkpoint")
    test = encode_manifest(model, manifest, {Split.TEST})
    _, logits = predict_features(model, test.feats, split.test_pairs)
    labels = test.pair_indices.numpy()
    points = model.config.eval.bias_grid_points
    metrics = czsl_metrics(logits, split.test_pairs, labels, split, space,
                           bias_grid_points=points)

    curve = None
    if metrics.n_seen and metrics.n_unseen:
        curve = bias_curve(logits, split.test_pairs, labels, split, points=points)
    trig_of = np.array([t for t, _ in space.pairs])
    cand = np.asarray(split.test_pairs)
    pred_trig = trig_of[cand[np.argmax(logits, axis=1)]]
    confusion = trigger_confusion(trig_of[labels], pred_trig, len(space.triggers))

    history = []
    hist_path = _history_path(args.ckpt)
    if hist_path.exists():
        history = json.loads(hist_path.read_text(encoding="utf-8"))
    files = report(metrics, history, args.out, bias=curve, confusion=confusion,
                   trigger_names=list(space.triggers))
    summary = {k: (f"{v:.4f}" if isinstance(v, float) else v)
               for k, v in metrics.to_dict().items() if v is not None}
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    print(f"report -> {files['report']}")
    return 0


def _cmd_scan(args) -> int:
    model = load_checkpoint(args.ckpt)
    paths = sorted(globlib.glob(args.images, recursive=True))
    if not paths:
        raise ValueError(f"no images match {args.images!r}")
    test_pairs = list(range(model.space.n_pairs))
    results = scan_images(model, paths, test_pairs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as handle:
        for row in results:
            handle.write(json.dumps(row.to_dict(), sort_keys=True) + "\n")
    n_poisoned = sum(1 for r in results if r.verdict.value == "poisoned")
    print(f"scanned {len(results)} images, {n_poisoned} poisoned -> {out}")
    return 0


def _sweep_config(base: DetectorConfig, param: str, value) -> DetectorConfig:
    config = copy.deepcopy(base)
    if param == "lambda_vis":
        config.train.weights.lambda_vis = float(value)
    else:
        config.prefix.mode = str(value)
    config.validate()
    return config


def _cmd_sweep(args) -> int:
    if args.param not in SWEEP_PARAMS:
        raise ValueError(f"--param must be one of {', '.join(SWEEP_PARAMS)}")
    values: list = []
    for token in args.grid.split(","):
        token = token.strip()
        if not token:
            continue
        values.append(float(token) if args.param == "lambda_vis" else token)
    if not values:
        raise ValueError("--grid is empty")

    manifest = load_manifest(args.manifest)
    space, split = _space_and_split(manifest, args.split)
    base = _load_config(args.config)

    rows = []
    for value in values:
        config = _sweep_config(base, args.param, value)
        model, _ = fit(manifest, split, config, space=space)
        test = encode_manifest(model, manifest, {Split.TEST})
        _, logits = predict_features(model, test.feats, split.test_pairs)
        metrics = czsl_metrics(logits, split.test_pairs, test.pair_indices.numpy(),
                               split, space,
                               bias_grid_points=config.eval.bias_grid_points)
        rows.append((value, metrics))
        shown = {k: v for k, v in metrics.to_dict().items()
                 if k in ("seen_acc", "unseen_acc", "auc") and v is not None}
        print(f"{args.param}={value} " +
              " ".join(f"{k}={v:.4f}" for k, v in shown.items()))

    if args.param == "lambda_vis":
        files = report(None, [], args.out, lambda_sweep=dict(rows))
    else:
        table = [{"value": v, **m.to_dict()} for v, m in rows]
        extra: dict = {"prefix_mode": table}
        by_mode = dict(rows)
        if "learnable" in by_mode and "static" in by_mode:
            learn, static = by_mode["learnable"].to_dict(), by_mode["static"].to_dict()
            extra["prefix_mode_delta"] = {
                k: learn[k] - static[k]
                for k in ("seen_acc", "unseen_acc", "harmonic", "auc",
                          "attack_acc", "object_acc")
                if learn[k] is not None and static[k] is not None
            }
        files = report(None, [], args.out, extra=extra)
    print(f"report -> {files['report']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbom", description="Backdoor corpus poisoning and trigger/object detection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("poison", help="poison a fraction of a clean corpus")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--triggers", default=None,
                   help="JSON list of trigger specs; defaults to the manifest's set")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_poison)

    p = sub.add_parser("train", help="train the detector on the seen split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("scan", help="flag images as poisoned or clean")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True, help="glob for image files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_scan)

    p = sub.add_parser("sweep", help="train across a config grid and compare")
    p.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
