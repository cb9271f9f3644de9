import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hepa.errors import ContractError
from hepa.featurizer import (denormalize, instance_normalize, patchify, patchify_batch,
                             positional_encoding, unpatchify)


def test_constant_channel_maps_to_zeros():
    out, (mean, std) = instance_normalize(np.array([[5.0, 5, 5, 5]]))
    np.testing.assert_array_equal(out, 0.0)
    assert mean[0] == 5.0 and std[0] == pytest.approx(1e-5)


def test_two_point_channel_population_std():
    out, _ = instance_normalize(np.array([[1.0, 3.0]]))
    np.testing.assert_allclose(out, [[-1.0, 1.0]])


def test_random_window_standardised_and_invertible():
    rng = np.random.default_rng(0)
    w = rng.normal(3.0, 2.0, size=(3, 512))
    out, stats = instance_normalize(w)
    mu, sd = out.mean(axis=1), out.std(axis=1)
    assert np.all(np.abs(mu) < 1e-5) and np.all(np.abs(sd - 1) < 1e-4)
    np.testing.assert_allclose(denormalize(out, stats), w, atol=1e-5)
    again, _ = instance_normalize(out)
    assert np.max(np.abs(again - out)) < 1e-4


def test_patchify_shapes():
    seq = patchify(np.zeros((14, 512)), 16)
    assert seq.tokens.shape == (32, 224)
    raw = np.arange(16.0)[None]
    np.testing.assert_array_equal(patchify(raw, 16).tokens[0], raw[0])


def test_patchify_left_pads_and_masks():
    w = np.arange(40.0).reshape(2, 20) + 1
    seq = patchify(w, 16)
    assert seq.n_tokens == 2
    assert not seq.step_mask[0, :12].any() and seq.step_mask[0, 12:].all()
    # channel-major layout: channel 0 steps then channel 1 steps
    np.testing.assert_array_equal(seq.tokens[0, :12], 0)
    np.testing.assert_array_equal(seq.tokens[0, 12:16], w[0, :4])
    np.testing.assert_array_equal(seq.tokens[0, 28:32], w[1, :4])
    np.testing.assert_array_equal(unpatchify(seq, 2), w)


def test_patchify_empty_rejected():
    with pytest.raises(ContractError):
        patchify(np.zeros((2, 0)), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 40), st.integers(1, 8))
def test_unpatchify_roundtrip(S, T, P):
    w = np.random.default_rng(S * 100 + T).normal(size=(S, T))
    np.testing.assert_array_equal(unpatchify(patchify(w, P), S), w)


def test_batch_matches_single():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 2, 20))
    tok, mask = patchify_batch(w, 8, 3)
    for i in range(3):
        np.testing.assert_array_equal(tok[i], patchify(w[i], 8).tokens)
    assert mask.all()


def test_positional_encoding():
    pe = positional_encoding(50, 16)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert np.all(np.abs(pe) <= 1.0)
    assert pe[1, 0] == pytest.approx(np.sin(1.0), abs=1e-7)
    with pytest.raises(ContractError):
        positional_encoding(4, 3)
