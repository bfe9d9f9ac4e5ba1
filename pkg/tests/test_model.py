"""Tests for the assembled detector model and its checkpoint format."""

import numpy as np
import pytest
import torch

from dbom.config import (
    ApNetConfig,
    DetectorConfig,
    EncoderConfig,
    HeadConfig,
    LossWeights,
    PrefixConfig,
    RepositoryConfig,
    TrainConfig,
)
from dbom.encoders import VisualFeatures
from dbom.model import (
    DetectorModel,
    load_checkpoint,
    load_repository_npz,
    save_checkpoint,
    save_repository_npz,
)
from dbom.pairs import build_pair_space
from dbom.trainer import total_loss


def tiny_config(**overrides) -> DetectorConfig:
    kwargs = dict(
        encoder=EncoderConfig(feat_dim=16, n_tokens=4, embed_dim=8, image_shape=(16, 16, 3)),
        repository=RepositoryConfig(size=4, prompt_len=2),
        prefix=PrefixConfig(length=2),
        apnet=ApNetConfig(hidden=4),
        train=TrainConfig(epochs=2, batch_size=16),
    )
    kwargs.update(overrides)
    return DetectorConfig(**kwargs)


def tiny_space():
    return build_pair_space(["clean", "badnets_sq", "trojan_wm"], ["obj_00", "obj_01"])


def random_feats(config: DetectorConfig, batch: int, seed: int = 0) -> VisualFeatures:
    gen = torch.Generator().manual_seed(seed)
    d, n_tok = config.encoder.feat_dim, config.encoder.n_tokens
    g = torch.randn(batch, d, generator=gen, dtype=torch.float64)
    t = torch.randn(batch, n_tok, d, generator=gen, dtype=torch.float64)
    return VisualFeatures(global_feat=g, tokens=t)


def test_score_pairs_shapes():
    config = tiny_config()
    model = DetectorModel(tiny_space(), config)
    feats = random_feats(config, 5)
    scores = model.score_pairs(feats, [0, 2, 3])
    assert scores.candidates == (0, 2, 3)
    assert scores.pair_logits.shape == (5, 3)
    assert scores.sp_logits.shape == (5, 3)
    assert scores.ret_logits.shape == (5, 3)
    assert scores.fused.shape == (5, 3, 16)
    assert scores.text_feats.shape[-2:] == (3, 16)
    assert scores.attn_weights.shape == (5, 3, 4)
    sums = scores.attn_weights.sum(-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-9)


def test_score_pairs_rejects_bad_input():
    config = tiny_config()
    model = DetectorModel(tiny_space(), config)
    feats = random_feats(config, 2)
    with pytest.raises(ValueError, match="batched"):
        model.score_pairs(VisualFeatures(feats.global_feat[0], feats.tokens[0]), [0])
    with pytest.raises(ValueError, match="empty"):
        model.score_pairs(feats, [])


def test_loss_components_structure():
    config = tiny_config()
    model = DetectorModel(tiny_space(), config)
    feats = random_feats(config, 4)
    scores = model.score_pairs(feats, list(range(6)))
    comps = model.loss_components(
        scores,
        torch.tensor([0, 1, 2, 3]),
        torch.tensor([0, 0, 1, 2]),
        torch.tensor([0, 1, 0, 1]),
    )
    assert set(comps) == {"ret", "tri", "obj", "sp", "sep", "div", "vis"}
    for name, value in comps.items():
        assert value.ndim == 0, name
        assert torch.isfinite(value), name
    for name in ("ret", "tri", "obj", "sp", "div"):
        assert comps[name].item() >= 0.0, name


def test_static_mode_disables_bias_network():
    learnable = DetectorModel(tiny_space(), tiny_config())
    static = DetectorModel(tiny_space(), tiny_config(prefix=PrefixConfig(length=2, mode="static")))
    assert all(not p.requires_grad for p in static.apnet.parameters())
    assert all(p.requires_grad for p in learnable.apnet.parameters())
    assert not static.prefix.tokens.requires_grad
    assert learnable.prefix.tokens.requires_grad
    # Static mode freezes both the prefix tokens and the bias network.
    n_frozen = sum(p.numel() for p in static.apnet.parameters()) + static.prefix.tokens.numel()
    n_learn = sum(p.numel() for p in learnable.trainable_parameters())
    n_static = sum(p.numel() for p in static.trainable_parameters())
    assert n_learn - n_static == n_frozen


def test_frozen_encoders_have_no_trainable_state():
    model = DetectorModel(tiny_space(), tiny_config())
    assert list(model.image_encoder.parameters()) == []
    assert list(model.text_encoder.parameters()) == []
    for name, param in model.named_parameters():
        assert not name.startswith(("image_encoder", "text_encoder")), name
        if param.requires_grad:
            assert param.dtype == torch.float64, name


def test_attention_gain_scales_query_and_key_only():
    base = DetectorModel(tiny_space(), tiny_config(head=HeadConfig(attn_gain=1.0)))
    wide = DetectorModel(tiny_space(), tiny_config(head=HeadConfig(attn_gain=4.0)))
    assert torch.allclose(wide.attention.query.weight, 4.0 * base.attention.query.weight)
    assert torch.allclose(wide.attention.key.weight, 4.0 * base.attention.key.weight)
    assert torch.equal(wide.attention.value.weight, base.attention.value.weight)


def test_checkpoint_round_trip(tmp_path):
    config = tiny_config()
    model = DetectorModel(tiny_space(), config)
    with torch.no_grad():
        model.repository.prompts.add_(0.25)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.space.triggers == model.space.triggers
    assert loaded.space.objects == model.space.objects
    assert loaded.config == config
    original = model.state_dict()
    restored = loaded.state_dict()
    assert set(original) == set(restored)
    for key in original:
        assert torch.equal(original[key], restored[key]), key
    feats = random_feats(config, 3, seed=7)
    a = model.score_pairs(feats, [0, 1, 2])
    b = loaded.score_pairs(feats, [0, 1, 2])
    assert torch.equal(a.sp_logits, b.sp_logits)


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "other.pt"
    torch.save({"format": "something-else"}, path)
    with pytest.raises(ValueError, match="not a detector checkpoint"):
        load_checkpoint(path)


def test_repository_npz_round_trip(tmp_path):
    model = DetectorModel(tiny_space(), tiny_config())
    path = tmp_path / "repo.npz"
    save_repository_npz(model.repository, path)
    prompts, keys = load_repository_npz(path)
    assert np.array_equal(prompts, model.repository.prompts.detach().numpy())
    assert np.array_equal(keys, model.repository.keys.detach().numpy())


def test_repository_npz_rejects_bad_header(tmp_path):
    model = DetectorModel(tiny_space(), tiny_config())
    path = tmp_path / "repo.npz"
    np.savez(
        path,
        prompts=model.repository.prompts.detach().numpy(),
        keys=model.repository.keys.detach().numpy(),
        shape=np.array([99, 2, 16]),
    )
    with pytest.raises(ValueError, match="shape header"):
        load_repository_npz(path)


def test_total_loss_weighted_sum():
    one = torch.tensor(1.0, dtype=torch.float64)
    default = total_loss(one, one, one, one, one, LossWeights())
    assert abs(default.item() - 4.5) < 1e-12
    equal = total_loss(one, one, one, one, one, LossWeights(1.0, 1.0, 1.0))
    assert abs(equal.item() - 5.0) < 1e-12
    bare = total_loss(one, one, one, one, one, LossWeights(0.0, 0.0, 0.0))
    assert abs(bare.item() - 1.0) < 1e-12
