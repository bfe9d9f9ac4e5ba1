"""End-to-end command line workflow on a tiny corpus."""

import json
import math

import pytest

from dbom.cli import main
from dbom.corpus import make_clean_corpus, make_paired_corpus
from dbom.poisoning import load_manifest

_CONFIG = {
    "encoder": {"feat_dim": 16, "n_tokens": 4, "embed_dim": 8,
                "image_shape": [16, 16, 3]},
    "repository": {"size": 4, "prompt_len": 2},
    "prefix": {"length": 2},
    "apnet": {"hidden": 4},
    "train": {"epochs": 1, "batch_size": 16},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    make_clean_corpus(root / "clean", n_objects=3, n_train_per_object=4,
                      n_test_per_object=2, image_shape=(16, 16, 3), seed=0)
    make_paired_corpus(root / "paired", n_objects=3, n_train_per_pair=2,
                       n_test_per_pair=1, image_shape=(16, 16, 3), seed=0)
    config_path = root / "config.json"
    config_path.write_text(json.dumps(_CONFIG), encoding="utf-8")
    return root


@pytest.fixture(scope="module")
def ckpt(workdir):
    path = workdir / "model.pt"
    code = main(["train", "--manifest", str(workdir / "paired" / "manifest.jsonl"),
                 "--split", str(workdir / "paired" / "split.json"),
                 "--config", str(workdir / "config.json"), "--out", str(path)])
    assert code == 0
    return path


def test_poison_subcommand(workdir, capsys):
    out = workdir / "poisoned"
    code = main(["poison", "--manifest", str(workdir / "clean" / "manifest.jsonl"),
                 "--rate", "0.5", "--seed", "3", "--out", str(out)])
    assert code == 0
    manifest = load_manifest(out / "manifest.jsonl")
    n = len(manifest.records)
    flagged = sum(1 for r in manifest.records if r.trigger_label != manifest.clean_index)
    assert flagged == math.floor(0.5 * n)
    assert "poisoned" in capsys.readouterr().out


def test_poison_with_trigger_file(workdir):
    triggers = [
        {"kind": "clean"},
        {"kind": "badnets_sq", "patch_size": 3, "corner": "tl", "patch_value": 1.0},
    ]
    trig_path = workdir / "triggers.json"
    trig_path.write_text(json.dumps(triggers), encoding="utf-8")
    out = workdir / "poisoned_custom"
    code = main(["poison", "--manifest", str(workdir / "clean" / "manifest.jsonl"),
                 "--rate", "0.25", "--triggers", str(trig_path), "--out", str(out)])
    assert code == 0
    manifest = load_manifest(out / "manifest.jsonl")
    assert manifest.trigger_names == ["clean", "badnets_sq"]


def test_train_writes_checkpoint_and_history(ckpt):
    assert ckpt.exists()
    history = json.loads((ckpt.parent / (ckpt.name + ".history.json")).read_text())
    assert len(history) == 1 and "total" in history[0]


def test_eval_subcommand(workdir, ckpt, capsys):
    out = workdir / "evaldir"
    code = main(["eval", "--ckpt", str(ckpt),
                 "--manifest", str(workdir / "paired" / "manifest.jsonl"),
                 "--split", str(workdir / "paired" / "split.json"),
                 "--out", str(out)])
    assert code == 0
    payload = json.loads((out / "report.json").read_text())
    assert set(payload["czsl"]) >= {"seen_acc", "unseen_acc", "auc"}
    assert payload["trigger_confusion"]["names"][0] == "clean"
    assert (out / "loss_curve.png").exists()
    assert "seen_acc=" in capsys.readouterr().out


def test_scan_subcommand(workdir, ckpt):
    out = workdir / "scan.jsonl"
    pattern = str(workdir / "clean" / "images" / "*.png")
    code = main(["scan", "--ckpt", str(ckpt), "--images", pattern, "--out", str(out)])
    assert code == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 18  # 3 objects x (4 train + 2 test)
    for row in rows:
        assert set(row) == {"path", "verdict", "trigger", "object", "score"}
        assert row["verdict"] in ("poisoned", "clean")


def test_sweep_lambda_vis(workdir, capsys):
    out = workdir / "sweepdir"
    code = main(["sweep", "--param", "lambda_vis", "--grid", "0,0.5",
                 "--manifest", str(workdir / "paired" / "manifest.jsonl"),
                 "--split", str(workdir / "paired" / "split.json"),
                 "--config", str(workdir / "config.json"), "--out", str(out)])
    assert code == 0
    payload = json.loads((out / "report.json").read_text())
    assert [row["value"] for row in payload["lambda_sweep"]] == [0.0, 0.5]
    assert (out / "lambda_sweep.png").exists()
    assert "lambda_vis=0.5" in capsys.readouterr().out


def test_sweep_prefix_mode(workdir):
    out = workdir / "sweepmode"
    code = main(["sweep", "--param", "prefix_mode", "--grid", "learnable,static",
                 "--manifest", str(workdir / "paired" / "manifest.jsonl"),
                 "--split", str(workdir / "paired" / "split.json"),
                 "--config", str(workdir / "config.json"), "--out", str(out)])
    assert code == 0
    payload = json.loads((out / "report.json").read_text())
    assert {row["value"] for row in payload["prefix_mode"]} == {"learnable", "static"}
    assert "seen_acc" in payload["prefix_mode_delta"]


def test_cli_error_paths(workdir, ckpt, capsys):
    assert main(["scan", "--ckpt", str(ckpt),
                 "--images", str(workdir / "nothing" / "*.png"),
                 "--out", str(workdir / "x.jsonl")]) == 2
    assert main(["poison", "--manifest", str(workdir / "missing.jsonl"),
                 "--rate", "0.1", "--out", str(workdir / "y")]) == 2
    assert main(["sweep", "--param", "bogus", "--grid", "1",
                 "--manifest", str(workdir / "paired" / "manifest.jsonl"),
                 "--split", str(workdir / "paired" / "split.json"),
                 "--out", str(workdir / "z")]) == 2
    err = capsys.readouterr().err
    assert "error:" in err
