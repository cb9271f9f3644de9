import math

import numpy as np
import pytest

from hepa.autodiff import Tensor
from hepa.datasets import SyntheticSpec, synthetic_dataset
from hepa.errors import ConfigurationError, ContractError
from hepa.network import HEPAModel
from hepa.pretrain import (PretrainConfig, anchor_pool, direction_variances, forward_pair, horizons_for, jepa_loss, l1_term,
                           make_batch, pretrain, random_directions, sample_horizon, sample_pairs, sigreg_loss, split_validation,
                           write_history)


@pytest.fixture(scope="module")
def tiny():
    return synthetic_dataset(SyntheticSpec(n_episodes=10, T=120, seed=0), context_len=32, patch=16, K=20)


def small_cfg(**kw):
    base = dict(max_epochs=2, max_steps_per_epoch=2, batch=8, val_samples=16, snapshot_epochs=(1,))
    base.update(kw)
    return PretrainConfig(**base)


def test_sample_horizon():
    rng = np.random.default_rng(0)
    assert np.all(sample_horizon(rng, 1, size=100) == 1)
    d = sample_horizon(rng, 150, size=100_000)
    assert d.min() >= 1 and d.max() <= 150
    # round(exp(U ln 150)) <= 13  <=>  U < ln 13.5 / ln 150
    exact = math.log(13.5) / math.log(150)
    assert abs(np.mean(d <= math.ceil(math.sqrt(150))) - exact) < 0.005
    with pytest.raises(ContractError):
        sample_horizon(rng, 0)


def test_sigreg_cases():
    rng = np.random.default_rng(0)
    normal = rng.normal(size=(1024, 256)).astype(np.float32)
    assert float(sigreg_loss(Tensor(normal), rng).data) < 0.05
    same = np.tile(normal[:1], (64, 1))
    assert float(sigreg_loss(Tensor(same), rng).data) >= 1.0
    big = float(sigreg_loss(Tensor(3 * normal), np.random.default_rng(1)).data)
    assert big >= 64 * 0.99
    with pytest.raises(ContractError):
        sigreg_loss(Tensor(normal[:1]), rng)


def test_jepa_loss_cases():
    rng = np.random.default_rng(0)
    h = Tensor(rng.normal(size=(8, 256)).astype(np.float32))
    total, l1, sig = jepa_loss(h, h, 0.1, np.random.default_rng(5))
    assert float(l1.data) == 0.0
    assert float(total.data) == pytest.approx(0.1 * float(sig.data), rel=1e-6)
    a = np.zeros((1, 256), np.float32)
    b = np.zeros((1, 256), np.float32)
    a[0, 0] = b[0, 1] = 1.0
    total, l1, sig = jepa_loss(Tensor(a), Tensor(b), 0.0)
    assert sig is None and float(total.data) == pytest.approx(2 / 256)
    g = Tensor(rng.normal(size=(8, 256)).astype(np.float32))
    total, l1, sig = jepa_loss(h, g, 0.1, np.random.default_rng(3))
    assert float(total.data) == pytest.approx(0.9 * float(l1.data) + 0.1 * float(sig.data), rel=1e-6)


def test_l2_row_norm_bounded_by_l1():
    rng = np.random.default_rng(0)
    u = rng.normal(size=(50, 256))
    assert np.all(np.linalg.norm(u, axis=1) <= np.abs(u).sum(axis=1))


def test_gradient_reaches_encoder_through_both_branches(tiny):
    model = HEPAModel(tiny.d_in, seed=0)
    model.eval()
    eps = tiny.split("train")
    rng = np.random.default_rng(0)
    pool = anchor_pool(tiny, eps)
    ep_idx, ts = sample_pairs(rng, tiny, pool, 6)
    dts = horizons_for(rng, tiny, eps, ep_idx, ts)
    batch = make_batch(tiny, eps, ep_idx, ts, dts)
    grads = []
    for detach in ("target", "online"):
        model.zero_grad()
        h_hat, h_star = forward_pair(model, tiny.K, batch, dts)
        if detach == "target":
            h_star = Tensor(h_star.data)
        else:
            h_hat = Tensor(h_hat.data)
        l1_term(h_hat, h_star).backward()
        grads.append(model.encoder.inp.weight.grad.copy())
    assert np.abs(grads[0]).sum() > 0 and np.abs(grads[1]).sum() > 0


def test_anchor_pairs_stay_inside_episode(tiny):
    eps = tiny.split("train")
    rng = np.random.default_rng(0)
    pool = anchor_pool(tiny, eps)
    ep_idx, ts = sample_pairs(rng, tiny, pool, 2000)
    dts = horizons_for(rng, tiny, eps, ep_idx, ts)
    T = np.array([eps[i].T for i in ep_idx])
    assert np.all(ts + dts <= T - 1) and np.all(ts >= tiny.first_anchor()) and np.all(dts >= 1)


def test_split_validation():
    assert split_validation(list(range(20)), 0.1) == (list(range(18)), [18, 19])
    assert split_validation([1], 0.1) == ([1], [])


def test_pretrain_deterministic_with_snapshots(tiny, tmp_path):
    r1 = pretrain(tiny, small_cfg())
    r2 = pretrain(tiny, small_cfg())
    assert r1.history == r2.history
    assert [s.label for s in r1.snapshots] == ["e1", "best"]
    assert all(s.epsilon >= 0 for s in r1.snapshots)
    for k, v in r1.best_state.items():
        assert np.array_equal(v, r2.best_state[k])
    write_history(tmp_path / "a.csv", r1.history)
    write_history(tmp_path / "b.csv", r2.history)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().startswith("epoch,train_loss,val_l1,val_sigreg,val_dir_var,val_dir_var_max\n")


def test_pretrain_needs_long_enough_episodes():
    short = synthetic_dataset(SyntheticSpec(n_episodes=4, T=20, seed=0), context_len=32, patch=16, K=5)
    with pytest.raises(ConfigurationError):
        pretrain(short, small_cfg())


def test_config_validation():
    with pytest.raises(ConfigurationError):
        PretrainConfig(alpha=1.5)
    with pytest.raises(ConfigurationError):
        PretrainConfig.from_dict({"nope": 1})
    assert PretrainConfig.from_dict(PretrainConfig().to_dict()) == PretrainConfig()


def test_direction_variances_against_explicit_projection():
    rng = np.random.default_rng(3)
    h = rng.standard_normal((50, 6)) * np.array([0.1, 1, 2, 3, 4, 5])
    dirs = random_directions(rng, 6, 4)
    got = direction_variances(h, dirs)
    for j in range(4):
        proj = [float(row @ dirs[:, j]) for row in h]
        assert abs(got[j] - np.var(proj, ddof=1)) < 1e-12
    assert np.allclose(np.linalg.norm(dirs, axis=0), 1.0)
