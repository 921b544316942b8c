import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from clad.errors import ConfigError, TrainingError
from clad.model import CLAD, collate, desk_config, tiny_config
from clad.optim import OptimConfig, make_optimizer
from clad.pretrain import PretrainConfig, infonce_loss, mask_features, n_masked, pretrain, pretrain_epoch, pretrain_loss

from oracles import directional_check


def brute_infonce(pred, targ, tau):
    total = 0.0
    for i in range(len(pred)):
        num = math.exp(F.cosine_similarity(pred[i], targ[i], dim=0).item() / tau)
        den = sum(math.exp(F.cosine_similarity(pred[i], targ[j], dim=0).item() / tau) for j in range(len(targ)))
        total -= math.log(num / den)
    return total / len(pred)


@pytest.mark.parametrize("valid,expected", [(10, 2), (1, 1), (100, 15), (512, 77), (7, 2), (20, 3)])
def test_n_masked(valid, expected):
    assert n_masked(valid, 0.15) == expected


def test_mask_features_counts_and_targets():
    S = torch.randn(3, 12, 4, requires_grad=True)
    valid = torch.tensor([10, 1, 12])
    e = torch.full((4,), 7.0)
    out, mask, targets = mask_features(S, valid, e, 0.15, torch.Generator().manual_seed(0))
    assert mask.sum(1).tolist() == [2, 1, 2]
    assert not mask[0, 10:].any() and not mask[1, 1:].any()
    assert (out[mask] == 7).all()
    assert torch.equal(out[~mask], S[~mask])
    assert torch.equal(targets, S.detach()[mask])
    assert not targets.requires_grad


def test_mask_features_is_seeded():
    S = torch.randn(2, 30, 4)
    valid = torch.tensor([30, 17])
    e = torch.zeros(4)
    _, m1, _ = mask_features(S, valid, e, 0.15, torch.Generator().manual_seed(5))
    _, m2, _ = mask_features(S, valid, e, 0.15, torch.Generator().manual_seed(5))
    assert torch.equal(m1, m2)


def test_infonce_collapse_is_log_n():
    for N in (2, 5, 64):
        c = torch.randn(1, 16, dtype=torch.float64)
        loss = infonce_loss(c.expand(N, 16), c.expand(N, 16), 0.1)
        assert abs(loss.item() - math.log(N)) <= 1e-6


def test_infonce_orthogonal_pair():
    s = torch.eye(2, dtype=torch.float64)
    loss = infonce_loss(s, s, 0.1)
    assert loss.item() == pytest.approx(-math.log(math.exp(10) / (math.exp(10) + 1)), abs=1e-12)
    assert loss.item() == pytest.approx(4.54e-5, rel=1e-3)


def test_infonce_matches_brute_force_and_is_permutation_invariant():
    g = torch.Generator().manual_seed(1)
    pred = torch.randn(9, 6, generator=g, dtype=torch.float64)
    targ = torch.randn(9, 6, generator=g, dtype=torch.float64)
    loss = infonce_loss(pred, targ, 0.1).item()
    assert loss == pytest.approx(brute_infonce(pred, targ, 0.1), abs=1e-9)
    perm = torch.randperm(9, generator=g)
    assert infonce_loss(pred[perm], targ[perm], 0.1).item() == pytest.approx(loss, abs=1e-12)


def test_infonce_needs_two():
    with pytest.raises(ValueError):
        infonce_loss(torch.randn(1, 4), torch.randn(1, 4))


def test_infonce_gradient():
    g = torch.Generator().manual_seed(2)
    pred = torch.randn(6, 5, generator=g, dtype=torch.float64, requires_grad=True)
    targ = torch.randn(6, 5, generator=g, dtype=torch.float64, requires_grad=True)
    assert directional_check(lambda ts: infonce_loss(ts[0], ts[1], 0.1), [pred, targ], n_dirs=6) <= 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.floats(0.05, 1.0))
def test_infonce_bounds(N, tau):
    g = torch.Generator().manual_seed(N)
    loss = infonce_loss(torch.randn(N, 8, generator=g), torch.randn(N, 8, generator=g), tau).item()
    # each term is at least 0 and at most log(N) + 2/tau (cosines lie in [-1, 1])
    assert 0 <= loss <= math.log(N) + 2 / tau + 1e-5


def _streams(n, seed=0, hi=129):
    rng = np.random.default_rng(seed)
    return [bytes(rng.integers(0, 256, int(rng.integers(40, hi)), dtype=np.uint8)) for _ in range(n)]


def test_loss_at_init_near_log_n():
    # needs some width: at d=16 random cosines spread too far for the bound
    model = CLAD(desk_config(seed=0))
    batch = collate(_streams(16, hi=3000), config=model.config, pad_to="longest")
    f = model.features(batch.token_ids, batch.lengths)
    N = sum(n_masked(int(v), 0.15) for v in f.valid_T)
    loss = pretrain_loss(model, batch, PretrainConfig(), torch.Generator().manual_seed(0)).item()
    assert 0.8 * math.log(N) <= loss <= 1.2 * math.log(N)


def test_targets_detached_and_mask_gets_gradient():
    model = CLAD(tiny_config(seed=1))
    batch = collate(_streams(8), config=model.config, pad_to="longest")
    loss = pretrain_loss(model, batch, PretrainConfig(), torch.Generator().manual_seed(0))
    loss.backward()
    assert model.mask_embed.grad is not None and model.mask_embed.grad.abs().sum() > 0
    assert model.pred_head.weight.grad.abs().sum() > 0
    # the classifier head is not on the pre-training path
    assert model.head.weight.grad is None


def test_single_position_batch_is_skipped():
    model = CLAD(tiny_config())
    batch = collate([b"abc"], config=model.config, pad_to="longest")
    assert pretrain_loss(model, batch, PretrainConfig()) is None


def test_pretrain_reduces_loss_and_is_deterministic():
    streams = _streams(64, 3)
    cfg = PretrainConfig(epochs=5, batch_size=16, optim=OptimConfig(lr=1e-3))

    def run():
        model = CLAD(tiny_config(seed=0))
        return model, pretrain(model, streams, cfg)

    m1, h1 = run()
    m2, h2 = run()
    assert [r["loss"] for r in h1] == [r["loss"] for r in h2]
    assert all(torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m2.state_dict().values()))
    losses = [r["loss"] for r in h1]
    assert np.mean(losses[-2:]) < np.mean(losses[:2])


def test_nonfinite_loss_aborts():
    model = CLAD(tiny_config())
    with torch.no_grad():
        model.pred_head.weight.fill_(float("nan"))
    cfg = PretrainConfig(epochs=1, batch_size=8)
    with pytest.raises(TrainingError):
        pretrain_epoch(model, _streams(8), cfg, make_optimizer(model, cfg.optim), 0)


def test_config_validation():
    with pytest.raises(ConfigError):
        PretrainConfig(mask_ratio=0)
    with pytest.raises(ConfigError):
        PretrainConfig(temperature=0)
    assert PretrainConfig(optim={"lr": 1e-3}).optim.lr == 1e-3
