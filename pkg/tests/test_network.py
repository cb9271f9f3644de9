import numpy as np
import pytest

from hepa.autodiff import Tensor
from hepa.autodiff.check import module_gradcheck
from hepa.errors import ContractError
from hepa.network import HEPAModel, Predictor
from hepa.pretrain import jepa_loss, random_directions
from hepa.survival import cdf_from_logits, finetune_loss


def small_model(d_in=8, d=16, seed=0, dtype=np.float64):
    m = HEPAModel(d_in, seed=seed, d=d, heads=4, layers=2, dtype=dtype)
    m.eval()
    return m


def test_parameter_counts():
    m = HEPAModel(d_in=224, seed=0)
    c = m.parameter_counts()
    assert c["predictor"] == 197_632 == 257 * 256 + 256 + 2 * (256 * 256 + 256)
    assert c["head"] == 769 == 512 + 257
    assert c["predictor"] + c["head"] == 198_401


def test_causal_mask():
    m = small_model()
    rng = np.random.default_rng(0)
    tok = rng.normal(size=(1, 10, 8))
    out1, _ = m.encoder.token_outputs(tok, causal=True)
    tok2 = tok.copy()
    tok2[0, 6:] += rng.normal(size=(4, 8))
    out2, _ = m.encoder.token_outputs(tok2, causal=True)
    np.testing.assert_array_equal(out1.data[0, :6], out2.data[0, :6])
    assert not np.allclose(out1.data[0, 6:], out2.data[0, 6:])


def test_output_shape_and_padding():
    m = HEPAModel(d_in=8, seed=0)
    m.eval()
    tok = np.random.default_rng(0).normal(size=(2, 5, 8)).astype(np.float32)
    assert m.encoder.encode_causal(tok).shape == (2, 256)
    # left padding is invisible to real tokens
    mask = np.ones((1, 5), bool)
    padded = np.concatenate([np.zeros((1, 3, 8), np.float32), tok[:1]], axis=1)
    pmask = np.concatenate([np.zeros((1, 3), bool), mask], axis=1)
    a = m.encoder.encode_causal(tok[:1], mask).data
    b = m.encoder.encode_causal(padded, pmask).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_target_pooling():
    m = small_model()
    rng = np.random.default_rng(1)
    one = rng.normal(size=(1, 1, 8))
    out, mask = m.encoder.token_outputs(one, causal=False)
    w = m.encoder.pool_weights(out, mask).data
    assert w[0, 0] == 1.0
    np.testing.assert_allclose(m.encoder.encode_target(one).data, out.data[:, 0])
    many = rng.normal(size=(3, 6, 8))
    out, mask = m.encoder.token_outputs(many, causal=False)
    assert np.all(np.abs(m.encoder.pool_weights(out, mask).data.sum(axis=1) - 1) < 1e-6)
    perm = many[:, ::-1]
    assert not np.allclose(m.encoder.encode_target(many).data, m.encoder.encode_target(perm).data)
    with pytest.raises(ContractError):
        m.encoder.encode_target(many, np.zeros((3, 6), bool))


def test_weight_sharing():
    m = small_model()
    tok = np.random.default_rng(2).normal(size=(1, 4, 8))
    a, b = m.encoder.encode_causal(tok).data, m.encoder.encode_target(tok).data
    m.encoder.inp.weight.data += np.random.default_rng(9).normal(0, 0.1, m.encoder.inp.weight.shape)
    assert not np.allclose(a, m.encoder.encode_causal(tok).data)
    assert not np.allclose(b, m.encoder.encode_target(tok).data)


def test_predictor_horizon_conditioning():
    rng = np.random.default_rng(3)
    g = Predictor(rng)
    h = Tensor(rng.normal(size=(2, 256)).astype(np.float32))
    K = 200
    assert not np.allclose(g(h, np.array([1, 1]), K).data, g(h, np.array([K, K]), K).data)
    allh = g.all_horizons(h, K).data
    for dt in (1, 57, K):
        np.testing.assert_allclose(allh[:, dt - 1], g(h, np.array([dt, dt]), K).data, atol=1e-5)
    with pytest.raises(ContractError):
        g(h, np.array([0, 1]), K)
    with pytest.raises(ContractError):
        g(h, np.array([1, K + 1]), K)
    for p in g.parameters():
        p.data[...] = 0
    g.l3.bias.data[...] = 0.5
    np.testing.assert_array_equal(g(h, np.array([1, 9]), K).data, 0.5)


def test_dropout_off_is_deterministic():
    m = small_model()
    tok = np.random.default_rng(4).normal(size=(2, 4, 8))
    np.testing.assert_array_equal(m.encoder.encode_causal(tok).data, m.encoder.encode_causal(tok).data)


def test_frozen_encoder_gets_no_gradient():
    m = small_model()
    m.encoder.freeze()
    tok = np.random.default_rng(5).normal(size=(3, 4, 8))
    h = m.encoder.encode_causal(tok)
    z = m.head(m.predictor.all_horizons(h, 5))
    loss = finetune_loss(cdf_from_logits(z), np.ones((3, 5)), np.ones((3, 5), bool), 1.0)
    loss.backward()
    assert all(p.grad is None or not p.grad.any() for p in m.encoder.parameters())
    assert any(p.grad is not None and p.grad.any() for p in m.predictor.parameters())


def full_graph_loss(m, seed=0):
    rng = np.random.default_rng(seed)
    ctx = rng.normal(size=(4, 5, 8))
    tgt = rng.normal(size=(4, 2, 8))
    dts = np.array([1, 3, 5, 2])
    directions = random_directions(rng, 16, 4)
    y = (rng.random((4, 5)) < 0.4).astype(float)

    def loss():
        h = m.encoder.encode_causal(ctx)
        h_hat = m.predictor(h, dts, 5)
        h_star = m.encoder.encode_target(tgt)
        total, _, _ = jepa_loss(h_hat, h_star, 0.1, directions=directions)
        p = cdf_from_logits(m.head(m.predictor.all_horizons(h, 5)))
        return total + finetune_loss(p, y, np.ones((4, 5), bool), 1.5)
    return loss


def test_full_graph_gradcheck():
    m = small_model()
    err = module_gradcheck(full_graph_loss(m), m, h=1e-2, per_param=4)
    assert err < 1e-2
