import math

import numpy as np
import pytest
import torch

from fave.bench import bench, forward_flops, sampler_flops
from fave.data import Example, make_batch
from fave.flowcore import PriorSpec, semantic_anchor_prior
from fave.inference import (
    SamplerSpec,
    euler_infer,
    evaluate,
    infer,
    one_step_infer,
    rank,
    target_ranks,
)
from fave.metrics import hit_rate, ild, ndcg


def _batch(model, n=6, seed=0):
    rng = np.random.default_rng(seed)
    exs = [Example(u, tuple(int(i) for i in rng.integers(0, model.n_items, int(rng.integers(1, 6)))),
                   int(rng.integers(model.n_items))) for u in range(n)]
    return make_batch(exs, model.n_items, model.max_len)


# samplers ---------------------------------------------------------------------


def test_sampler_spec_parse():
    assert SamplerSpec.parse("one_step") == SamplerSpec("one_step", 1)
    assert SamplerSpec.parse("euler:30") == SamplerSpec("euler", 30)
    assert str(SamplerSpec.parse("euler:7")) == "euler:7"
    assert SamplerSpec.parse("euler").steps == 30
    for bad in ("foo", "euler:0", "euler:-2"):
        with pytest.raises(ValueError):
            SamplerSpec.parse(bad)


def test_one_step_identity(tiny_model):
    tiny_model.eval()
    b = _batch(tiny_model)
    x0 = torch.randn(len(b), tiny_model.d, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    f = one_step_infer(tiny_model, b.sequences, x0)
    assert torch.equal(x0 + (f - x0), f) or float((x0 + (f - x0) - f).abs().max()) < 1e-14
    lam = torch.full((len(b), tiny_model.d), tiny_model.delta, dtype=torch.float64)
    f2, _ = tiny_model(b.sequences, x0, 0.0, 1.0, lam=lam)
    assert torch.equal(f, f2)


def test_euler_one_step_is_bitwise_one_step(tiny_model):
    b = _batch(tiny_model)
    x0 = torch.randn(len(b), tiny_model.d, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    tiny_model.train()  # inference must switch nothing on its own besides lambda
    tiny_model.eval()
    assert torch.equal(euler_infer(tiny_model, b.sequences, x0, 1),
                       one_step_infer(tiny_model, b.sequences, x0))
    with pytest.raises(ValueError):
        euler_infer(tiny_model, b.sequences, x0, 0)


class ConstantField(torch.nn.Module):
    """f(x, t, 1) = x0 + c for a frozen x0, i.e. constant velocity c."""

    def __init__(self, x0, c, d):
        super().__init__()
        self.x0, self.c, self.d, self.delta = x0, c, d, 1.0
        self.item_emb = torch.zeros(1, dtype=torch.float64)

    def forward(self, sequences, x, t, r, lam=None):
        return self.x0 + self.c, None


@pytest.mark.parametrize("steps", [1, 2, 3, 7, 30, 64])
def test_constant_velocity_integrates_exactly(steps):
    g = torch.Generator().manual_seed(steps)
    x0 = torch.randn(4, 5, generator=g, dtype=torch.float64)
    c = torch.randn(4, 5, generator=g, dtype=torch.float64)
    out = euler_infer(ConstantField(x0, c, 5), None, x0, steps)
    assert torch.equal(out, x0 + c)


def test_euler_trajectory(tiny_model):
    tiny_model.eval()
    b = _batch(tiny_model)
    x0 = torch.randn(len(b), tiny_model.d, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
    x, traj = euler_infer(tiny_model, b.sequences, x0, 5, return_trajectory=True)
    assert len(traj) == 6 and torch.equal(traj[0], x0) and torch.equal(traj[-1], x)
    assert torch.equal(infer(tiny_model, b.sequences, x0, SamplerSpec("euler", 5)), x)


def test_euler_matches_textbook_update(tiny_model):
    # x_{k+1} = x_k + dt * (f(x_k, t_k, 1) - x0), up to rounding
    tiny_model.eval()
    b = _batch(tiny_model)
    x0 = torch.randn(len(b), tiny_model.d, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
    lam = torch.full((len(b), tiny_model.d), tiny_model.delta, dtype=torch.float64)
    x, N = x0, 8
    with torch.no_grad():
        for k in range(N):
            f, _ = tiny_model(b.sequences, x, k / N, 1.0, lam=lam)
            x = x + (f - x0) / N
    out = euler_infer(tiny_model, b.sequences, x0, N)
    assert float((out - x).abs().max()) < 1e-12


def test_rho_one_single_item_prior_is_embedding(tiny_model):
    b = make_batch([Example(0, (4,), 2)], tiny_model.n_items, tiny_model.max_len)
    x0 = semantic_anchor_prior(b.sequences, b.masks, 1.0, tiny_model.item_table.detach())
    assert torch.equal(x0[0], tiny_model.item_table[4].detach())


# ranking ----------------------------------------------------------------------


def test_rank_orthonormal_and_exclusion():
    emb = torch.eye(5, dtype=torch.float64)
    x = emb[[3]]
    assert rank(x, emb, None, 1).tolist() == [[3]]
    ex = torch.zeros(1, 5, dtype=torch.bool)
    ex[0, 3] = True
    top = rank(x, emb, ex, 4)[0].tolist()
    assert 3 not in top and top == [0, 1, 2, 4]  # ties go to the lower index
    with pytest.raises(ValueError):
        rank(x, emb, ex, 5)


def test_rank_toy_catalogue_hand_scores():
    emb = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 2.0], [0.5, 0.5]], dtype=torch.float64)
    x = torch.tensor([[2.0, 1.0]], dtype=torch.float64)
    # scores: 2, 1, 3, 0, 1.5
    assert rank(x, emb, None, 5).tolist() == [[2, 0, 4, 1, 3]]
    ranks = target_ranks(x, emb, torch.tensor([4]), None)
    assert ranks.tolist() == [3.0]
    ex = torch.tensor([[False, False, True, False, False]])
    assert target_ranks(x, emb, torch.tensor([4]), ex).tolist() == [2.0]
    assert target_ranks(x, emb, torch.tensor([2]), ex).tolist() == [math.inf]


def test_rank_is_permutation_without_excluded():
    g = torch.Generator().manual_seed(0)
    emb = torch.randn(40, 6, generator=g, dtype=torch.float64)
    x = torch.randn(8, 6, generator=g, dtype=torch.float64)
    ex = torch.rand(8, 40, generator=g) < 0.3
    top = rank(x, emb, ex, 15)
    for row, e in zip(top, ex):
        assert len(set(row.tolist())) == 15
        assert not bool(e[torch.as_tensor(row)].any())
    # ranks of the listed items agree with their positions
    for pos in range(15):
        r = target_ranks(x, emb, torch.as_tensor(top[:, pos]), ex)
        assert r.tolist() == [pos + 1.0] * 8


# metrics ----------------------------------------------------------------------


def test_hit_rate_and_ndcg_examples():
    assert hit_rate([1, 1, 1], 10) == 100.0
    assert hit_rate([11, 50], 10) == 0.0
    assert hit_rate([2, 11, 5], 10) == pytest.approx(66.67, abs=0.005)
    assert hit_rate([2, 11, 5], 10) == 200.0 / 3
    assert ndcg([1], 10) == 100.0
    assert ndcg([3], 10) == 50.0
    assert ndcg([11], 10) == 0.0
    assert ndcg([math.inf], 10) == 0.0


def test_five_user_fixture():
    ranks = [1, 3, 7, 12, math.inf]
    assert hit_rate(ranks, 10) == 60.0
    assert hit_rate(ranks, 20) == 80.0
    expect10 = 100 * (1 + 0.5 + 1 / 3) / 5
    assert ndcg(ranks, 10) == pytest.approx(expect10, abs=1e-12)
    expect20 = 100 * (1 + 0.5 + 1 / 3 + 1 / math.log2(13)) / 5
    assert ndcg(ranks, 20) == pytest.approx(expect20, abs=1e-12)
    for k in (1, 5, 10, 20):
        assert ndcg(ranks, k) <= hit_rate(ranks, k)


def test_ild_examples():
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 0.0], [3.0, 0.0]])
    assert ild([[0, 1]], emb) == 1.0
    assert ild([[0, 2, 3]], emb) == 0.0
    assert ild([[0, 2, 1]], emb) == pytest.approx(2 / 3, abs=1e-15)
    assert ild([[0, 1], [0, 2]], emb) == 0.5
    with pytest.raises(ValueError):
        ild([[0]], emb)
    with pytest.raises(ValueError):
        ild([[0, 1]], np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_random_ranker_hit_rate():
    # scores independent of the target: H@10 over 200 items ~ 5%
    n_users, n_items = 4000, 200
    g = torch.Generator().manual_seed(7)
    emb = torch.randn(n_items, 8, generator=g, dtype=torch.float64)
    x = torch.randn(n_users, 8, generator=g, dtype=torch.float64)
    targets = torch.randint(0, n_items, (n_users,), generator=g)
    h = hit_rate(target_ranks(x, emb, targets, None), 10)
    sigma = 100 * math.sqrt(0.05 * 0.95 / n_users)
    assert abs(h - 5.0) <= 3 * sigma


# evaluate / bench ----------------------------------------------------------------


def test_evaluate_report(tiny_model):
    rng = np.random.default_rng(3)
    exs = [Example(u, tuple(int(i) for i in rng.integers(0, 11, 3)), int(rng.integers(11)))
           for u in range(9)]
    rep = evaluate(tiny_model, exs, PriorSpec("semantic_anchor", 0.75), seed=5, batch_size=4,
                   ks=(1, 5), ild_k=5)
    assert rep.users == list(range(9))
    assert 0 <= rep.metrics["N@5"] <= rep.metrics["H@5"] <= 100
    assert set(rep.metrics) == {"H@1", "N@1", "H@5", "N@5", "ILD@5"}
    assert 0 <= rep.metrics["ILD@5"] <= 2
    again = evaluate(tiny_model, exs, PriorSpec("semantic_anchor", 0.75), seed=5, batch_size=4,
                     ks=(1, 5), ild_k=5)
    assert again.to_json() == rep.to_json()
    assert "top_k" not in rep.to_json(per_user=False)
    assert tiny_model.training  # evaluate restores the mode it found


def test_flops_linear_in_steps(tiny_model):
    one = sampler_flops(tiny_model, SamplerSpec())
    assert one == forward_flops(tiny_model) > 0
    assert sampler_flops(tiny_model, SamplerSpec("euler", 1)) == one
    assert sampler_flops(tiny_model, SamplerSpec("euler", 30)) == 30 * one
    for n in (2, 5, 17):
        assert sampler_flops(tiny_model, SamplerSpec("euler", n)) == n * one


def test_forward_flops_hand_count():
    from fave.model import FaveModel
    m = FaveModel(n_items=5, d=8, heads=2, blocks=1, max_len=4, time_freqs=3)
    d, L = 8, 4
    enc = 4 * L * d * d + 2 * L * L * d + 2 * L * d * d
    fusion = 2 * d * d + 2 * L * d * d + 2 * L * d + 2 * d * d
    time_emb = 2 * (2 * 3 * d + d * d)
    assert forward_flops(m) == 2 * (enc + fusion + time_emb + d * d)


def test_bench_one_step_faster(tiny_model):
    exs = [Example(u, (1, 2, 3), 4) for u in range(5)]
    prior = PriorSpec("semantic_anchor", 0.75)
    one = bench(tiny_model, SamplerSpec(), exs, prior, warmup=2, samples=15)
    many = bench(tiny_model, SamplerSpec("euler", 30), exs, prior, warmup=2, samples=15)
    assert one.latency_ms < many.latency_ms
    assert many.gflops_per_sample == pytest.approx(30 * one.gflops_per_sample, rel=1e-15)
    assert set(one.as_dict()) == {"sampler", "gflops_per_sample", "latency_ms", "infer_time_s"}
