"""Prompt repository retrieval and the separation/diversity losses."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from dbom.repository import (
    PromptRepository,
    Retrieval,
    diversity_loss,
    separation_loss,
    visual_loss,
)


def _repo(size: int = 5, prompt_len: int = 3, dim: int = 8, seed: int = 0) -> PromptRepository:
    return PromptRepository(size=size, prompt_len=prompt_len, dim=dim, seed=seed)


def test_orthonormal_keys_select_the_matching_key_and_break_ties_low() -> None:
    repo = _repo(size=3, dim=3)
    with torch.no_grad():
        repo.keys.copy_(torch.eye(3, dtype=torch.float64))
    f_v = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
    out = repo.retrieve(f_v)
    assert out.trig_index.item() == 1
    # Keys 0 and 2 tie at cosine 0; the lower index wins.
    assert out.obj_index.item() == 0
    assert out.trig_score.item() == pytest.approx(1.0, abs=1e-12)
    assert out.obj_score.item() == pytest.approx(0.0, abs=1e-12)


def test_exact_key_match_scores_one() -> None:
    repo = _repo(size=4, dim=6, seed=2)
    f_v = repo.keys[2].detach().clone()
    out = repo.retrieve(f_v)
    assert out.trig_index.item() == 2
    assert out.trig_score.item() == pytest.approx(1.0, abs=1e-12)


def test_retrieval_matches_exhaustive_oracle() -> None:
    rng = np.random.default_rng(7)
    for trial in range(100):
        m = int(rng.integers(2, 33))
        dim = int(rng.integers(3, 17))
        repo = _repo(size=m, prompt_len=2, dim=dim, seed=trial)
        f_v = torch.from_numpy(rng.standard_normal(dim))
        out = repo.retrieve(f_v)
        keys = repo.keys.detach().numpy()
        keys = keys / np.linalg.norm(keys, axis=1, keepdims=True)
        query = f_v.numpy() / np.linalg.norm(f_v.numpy())
        cos = keys @ query
        order = sorted(range(m), key=lambda i: (-cos[i], i))
        assert out.trig_index.item() == order[0]
        assert out.obj_index.item() == order[1]


def test_retrieved_feature_pools_token_means_then_pair_mean() -> None:
    repo = _repo(size=4, prompt_len=3, dim=5, seed=3)
    f_v = torch.randn(5, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    out = repo.retrieve(f_v)
    prompts = repo.prompts.detach()
    expected = 0.5 * (
        prompts[out.trig_index].mean(dim=0) + prompts[out.obj_index].mean(dim=0)
    )
    assert torch.allclose(out.f_ret.detach(), expected, rtol=0, atol=1e-12)


def test_batched_retrieval_matches_per_sample() -> None:
    repo = _repo(size=6, dim=8, seed=4)
    batch = torch.randn(5, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
    joint = repo.retrieve(batch)
    for i in range(5):
        single = repo.retrieve(batch[i])
        assert joint.trig_index[i].item() == single.trig_index.item()
        assert joint.obj_index[i].item() == single.obj_index.item()


def test_small_repository_rejected() -> None:
    with pytest.raises(ValueError, match="at least 2"):
        PromptRepository(size=1, prompt_len=2, dim=4, seed=0)


def test_zero_norm_query_rejected() -> None:
    repo = _repo()
    with pytest.raises(ValueError, match="zero-norm"):
        repo.retrieve(torch.zeros(8, dtype=torch.float64))


def _manual_retrieval(trig_score: float, obj_score: float, key_cos: float = 0.0) -> Retrieval:
    t = torch.tensor(trig_score, dtype=torch.float64)
    o = torch.tensor(obj_score, dtype=torch.float64)
    return Retrieval(
        trig_index=torch.tensor(0),
        obj_index=torch.tensor(1),
        trig_score=t,
        obj_score=o,
        key_cos=torch.tensor(key_cos, dtype=torch.float64),
        f_ret=torch.zeros(2, dtype=torch.float64),
    )


def test_separation_loss_symmetric_scores_give_ln_two() -> None:
    out = _manual_retrieval(0.3, 0.3)
    assert separation_loss(out).item() == pytest.approx(math.log(2.0), abs=1e-12)


def test_separation_loss_at_opposite_extremes() -> None:
    out = _manual_retrieval(1.0, -1.0)
    assert separation_loss(out).item() == pytest.approx(math.log(1.0 + math.exp(-2.0)), abs=1e-12)


def test_separation_loss_gradient_matches_finite_differences() -> None:
    repo = _repo(size=4, dim=6, seed=5)
    f_v = torch.randn(3, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
    loss = separation_loss(repo.retrieve(f_v))
    (analytic,) = torch.autograd.grad(loss, repo.keys)

    eps = 1e-6
    for row, col in [(0, 0), (1, 3), (3, 5)]:
        def value(shift: float) -> float:
            with torch.no_grad():
                repo.keys[row, col] += shift
            try:
                return separation_loss(repo.retrieve(f_v)).item()
            finally:
                with torch.no_grad():
                    repo.keys[row, col] -= shift

        fd = (value(eps) - value(-eps)) / (2 * eps)
        an = analytic[row, col].item()
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-8) < 1e-4


def test_separation_loss_invariant_to_feature_doubling() -> None:
    # Cosine kills positive rescaling; powers of two keep it bit-exact.
    repo = _repo(size=5, dim=8, seed=6)
    f_v = torch.randn(4, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
    base = separation_loss(repo.retrieve(f_v))
    scaled = separation_loss(repo.retrieve(4.0 * f_v))
    assert torch.equal(base, scaled)


def test_diversity_loss_hinge_values() -> None:
    below = _manual_retrieval(0.5, 0.0, key_cos=0.0)
    above = _manual_retrieval(0.5, 0.0, key_cos=0.9)
    assert diversity_loss(below, margin=0.5).item() == 0.0
    assert diversity_loss(above, margin=0.5).item() == pytest.approx(0.4, abs=1e-12)


def test_diversity_loss_literal_form_flips_the_hinge() -> None:
    above = _manual_retrieval(0.5, 0.0, key_cos=0.9)
    below = _manual_retrieval(0.5, 0.0, key_cos=0.2)
    assert diversity_loss(above, margin=0.5, as_written=True).item() == 0.0
    assert diversity_loss(below, margin=0.5, as_written=True).item() == pytest.approx(0.3, abs=1e-12)


def test_visual_loss_is_the_sum() -> None:
    sep = torch.tensor(math.log(1.0 + math.exp(-2.0)), dtype=torch.float64)
    div = torch.tensor(0.4, dtype=torch.float64)
    total = visual_loss(sep, div)
    assert total.item() == pytest.approx(0.5269, abs=5e-5)
    assert total.item() == pytest.approx(math.log(1.0 + math.exp(-2.0)) + 0.4, abs=1e-12)


def test_first_visual_step_widens_the_separation_margin() -> None:
    repo = _repo(size=6, dim=8, seed=8)
    f_v = torch.randn(10, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(5))

    def margin() -> float:
        with torch.no_grad():
            out = repo.retrieve(f_v)
            return (out.trig_score - out.obj_score).mean().item()

    before = margin()
    opt = torch.optim.SGD(repo.parameters(), lr=1e-3)
    out = repo.retrieve(f_v)
    loss = visual_loss(separation_loss(out), diversity_loss(out))
    loss.backward()
    opt.step()
    assert margin() >= before
