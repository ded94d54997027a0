import numpy as np
import pytest

from kvnmt import autodiff as ad
from kvnmt import rnn
from kvnmt.errors import DimensionError, EmptyInputError


def make_gru(input_dim, hidden_dim, seed=0, dtype=np.float64, init_range=0.3):
    rng = np.random.default_rng(seed)
    return rnn.GruParams.create(input_dim, hidden_dim, rng, dtype=dtype,
                                init_range=init_range)


def zero_gru(input_dim, hidden_dim):
    z = lambda *s: ad.DiffArray(np.zeros(s))
    return rnn.GruParams(
        w_z=z(input_dim, hidden_dim), u_z=z(hidden_dim, hidden_dim), b_z=z(hidden_dim),
        w_r=z(input_dim, hidden_dim), u_r=z(hidden_dim, hidden_dim), b_r=z(hidden_dim),
        w_h=z(input_dim, hidden_dim), u_h=z(hidden_dim, hidden_dim), b_h=z(hidden_dim),
        input_dim=input_dim, hidden_dim=hidden_dim,
    )


def test_gru_zero_params_zero_state_is_fixed_point():
    p = zero_gru(3, 4)
    x = ad.constant(np.ones((1, 3)))
    h = ad.constant(np.zeros((1, 4)))
    out = rnn.gru_cell(p, x, h)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_gru_carry_gate_limit():
    # large negative update-gate preactivation forces z ~ 0, so h' ~ h
    p = make_gru(3, 4, seed=1)
    p.b_z.data[:] = -20.0
    x = ad.constant(np.random.default_rng(2).normal(size=(1, 3)))
    h_val = np.random.default_rng(3).normal(size=(1, 4))
    out = rnn.gru_cell(p, x, ad.constant(h_val))
    np.testing.assert_allclose(out.data, h_val, atol=1e-3)


def test_gru_dim_mismatch():
    p = make_gru(3, 4)
    with pytest.raises(DimensionError):
        rnn.gru_cell(p, ad.constant(np.zeros((1, 5))), ad.constant(np.zeros((1, 4))))


def test_gru_cell_gradients():
    p = make_gru(3, 4, seed=4)
    rng = np.random.default_rng(5)
    params = dict(p.named("gru"))
    params["x"] = ad.DiffArray(rng.normal(size=(2, 3)), tracked=True)
    params["h"] = ad.DiffArray(rng.normal(size=(2, 4)), tracked=True)
    w = ad.constant(rng.normal(size=(2, 4)))

    def fn(ps):
        return ad.total_sum(ad.mul(rnn.gru_cell(p, ps["x"], ps["h"]), w))

    assert ad.grad_check(fn, params, eps=1e-5, n_samples=400) < 1e-4


def test_encode_length_one_base_case():
    emb = ad.constant(np.random.default_rng(6).normal(size=(5, 3)))
    p_fwd = make_gru(3, 4, seed=7)
    p_bwd = make_gru(3, 4, seed=8)
    ann = rnn.encode(p_fwd, p_bwd, emb, [2])
    assert ann.shape == (1, 8)
    x = ad.embed(emb, [2])
    h0 = ad.constant(np.zeros((1, 4)))
    np.testing.assert_allclose(ann.data[:, :4], rnn.gru_cell(p_fwd, x, h0).data)
    np.testing.assert_allclose(ann.data[:, 4:], rnn.gru_cell(p_bwd, x, h0).data)


def test_encode_row_count_matches_source_length():
    emb = ad.constant(np.random.default_rng(9).normal(size=(6, 3)))
    p_fwd, p_bwd = make_gru(3, 4, seed=10), make_gru(3, 4, seed=11)
    for ids in ([0], [1, 2], [3, 4, 5, 1, 2]):
        assert rnn.encode(p_fwd, p_bwd, emb, ids).shape == (len(ids), 8)


def test_encode_reversal_swaps_halves():
    # with shared direction params, encoding the reversed sentence reverses
    # the row order and swaps the forward/backward halves
    emb = ad.constant(np.random.default_rng(12).normal(size=(6, 3)))
    p = make_gru(3, 4, seed=13)
    ids = [1, 4, 2, 5]
    ann = rnn.encode(p, p, emb, ids).data
    ann_rev = rnn.encode(p, p, emb, ids[::-1]).data
    swapped = np.concatenate([ann[:, 4:], ann[:, :4]], axis=1)
    np.testing.assert_allclose(ann_rev, swapped[::-1], rtol=1e-12)


def test_encode_prefix_covariance_of_forward_scan():
    emb = ad.constant(np.random.default_rng(14).normal(size=(6, 3)))
    p_fwd, p_bwd = make_gru(3, 4, seed=15), make_gru(3, 4, seed=16)
    ids = [0, 3, 1, 5, 2]
    full = rnn.encode(p_fwd, p_bwd, emb, ids).data
    prefix = rnn.encode(p_fwd, p_bwd, emb, ids[:3]).data
    np.testing.assert_allclose(full[:3, :4], prefix[:, :4], rtol=1e-12)


def test_encode_empty_source_rejected():
    emb = ad.constant(np.zeros((4, 3)))
    with pytest.raises(EmptyInputError):
        rnn.encode(make_gru(3, 4), make_gru(3, 4), emb, [])


def test_encode_batch_matches_single_sentences():
    rng = np.random.default_rng(17)
    emb = ad.constant(rng.normal(size=(8, 3)))
    p_fwd, p_bwd = make_gru(3, 4, seed=18), make_gru(3, 4, seed=19)
    sents = [[1, 2, 3], [4, 5], [6]]
    n = 3
    src = np.zeros((3, n), dtype=np.int64)
    mask = np.zeros((3, n), dtype=bool)
    for b, s in enumerate(sents):
        src[b, : len(s)] = s
        mask[b, : len(s)] = True
    ann, first_bwd = rnn.encode_batch(p_fwd, p_bwd, emb, src, mask)
    for b, s in enumerate(sents):
        solo = rnn.encode(p_fwd, p_bwd, emb, s).data
        block = ann.data[b * n : b * n + len(s)]
        np.testing.assert_allclose(block, solo, atol=1e-12)
        np.testing.assert_allclose(first_bwd.data[b], solo[0, 4:], atol=1e-12)


def test_encoder_gradients():
    emb_val = np.random.default_rng(20).normal(size=(6, 3))
    p_fwd, p_bwd = make_gru(3, 2, seed=21), make_gru(3, 2, seed=22)
    params = {"emb": ad.DiffArray(emb_val, tracked=True)}
    params.update(p_fwd.named("fwd"))
    params.update(p_bwd.named("bwd"))
    ids = [0, 3, 1, 5, 2]
    w = ad.constant(np.random.default_rng(23).normal(size=(5, 4)))

    def fn(ps):
        return ad.total_sum(ad.mul(rnn.encode(p_fwd, p_bwd, ps["emb"], ids), w))

    assert ad.grad_check(fn, params, eps=1e-5, n_samples=300) < 1e-4


def test_init_decoder_state_zero_weight():
    ann = ad.constant(np.random.default_rng(24).normal(size=(3, 8)))
    out = rnn.init_decoder_state(ann, ad.constant(np.zeros((4, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_init_decoder_state_identity_projection():
    ann_val = np.random.default_rng(25).normal(size=(3, 4))
    out = rnn.init_decoder_state(ad.constant(ann_val), ad.constant(np.eye(2)))
    np.testing.assert_allclose(out.data, np.tanh(ann_val[:1, 2:]), rtol=1e-12)


def test_init_decoder_state_gradients():
    rng = np.random.default_rng(26)
    params = {
        "ann": ad.DiffArray(rng.normal(size=(3, 8)), tracked=True),
        "w": ad.DiffArray(rng.normal(size=(4, 4)), tracked=True),
    }
    v = ad.constant(rng.normal(size=(1, 4)))

    def fn(ps):
        return ad.total_sum(ad.mul(rnn.init_decoder_state(ps["ann"], ps["w"]), v))

    assert ad.grad_check(fn, params, eps=1e-5) < 1e-4
