import numpy as np
import pytest

from kvnmt import autodiff as ad
from kvnmt import model as md
from kvnmt.data import BOS_ID, EOS_ID
from kvnmt.errors import ConfigError, VocabularyError


def tiny_config(variant="kvmem", rounds=1, **kw):
    base = dict(src_vocab=7, trg_vocab=7, embed_dim=4, hidden_dim=3,
                rounds=rounds, variant=variant, max_decode_len=6)
    base.update(kw)
    return md.ModelConfig(**base)


def tiny_model(seed=0, variant="kvmem", rounds=1, dtype=np.float64, **kw):
    return md.Seq2Seq.create(tiny_config(variant=variant, rounds=rounds, **kw),
                             seed=seed, dtype=dtype)


def rand_pair(rng, cfg, src_len=4, trg_len=3):
    src = np.append(rng.integers(4, cfg.src_vocab, size=src_len - 1), EOS_ID)
    trg = np.append(rng.integers(4, cfg.trg_vocab, size=trg_len - 1), EOS_ID)
    return src, trg


# ---------------------------------------------------------------- config

def test_config_validations():
    with pytest.raises(ConfigError):
        tiny_config(rounds=0)
    with pytest.raises(ConfigError):
        tiny_config(variant="baseline", rounds=2)
    with pytest.raises(ConfigError):
        tiny_config(beam=0)
    with pytest.raises(ConfigError):
        tiny_config(dropout=1.0)
    with pytest.raises(ConfigError):
        tiny_config(penalty_weight=-0.5)
    with pytest.raises(ConfigError):
        md.ModelConfig.from_dict({"src_vocab": 7, "trg_vocab": 7, "nope": 1})


def test_config_round_trips_through_dict():
    cfg = tiny_config(rounds=2, dropout=0.25)
    assert md.ModelConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- predict

def test_predict_zero_weights_uniform():
    m = tiny_model(seed=1)
    for name in ("out.w", "out.b", "out.wv"):
        m.params[name].data[:] = 0.0
    state = ad.constant(np.random.default_rng(2).normal(size=(2, 3)))
    ctx = ad.constant(np.random.default_rng(3).normal(size=(2, 6)))
    emb = ad.constant(np.random.default_rng(4).normal(size=(2, 4)))
    dist = m.predict_distribution(state, ctx, emb)
    np.testing.assert_allclose(dist.data, np.full((2, 7), 1 / 7), rtol=1e-12)


def test_predict_sums_to_one():
    m = tiny_model(seed=5)
    rng = np.random.default_rng(6)
    dist = m.predict_distribution(
        ad.constant(rng.normal(size=(3, 3))),
        ad.constant(rng.normal(size=(3, 6))),
        ad.constant(rng.normal(size=(3, 4))),
    )
    np.testing.assert_allclose(dist.data.sum(axis=1), np.ones(3), atol=1e-6)
    assert np.all(dist.data >= 0)


def test_predict_gradients():
    m = tiny_model(seed=7)
    rng = np.random.default_rng(8)
    params = {k: m.params[k] for k in ("out.w", "out.b", "out.wv")}
    state = ad.constant(rng.normal(size=(1, 3)))
    ctx = ad.constant(rng.normal(size=(1, 6)))
    emb = ad.constant(rng.normal(size=(1, 4)))
    w = ad.constant(rng.normal(size=(1, 7)))

    def fn(ps):
        return ad.total_sum(ad.mul(m.predict_distribution(state, ctx, emb), w))

    assert ad.grad_check(fn, params, eps=1e-5, n_samples=200) < 1e-4


# ---------------------------------------------------------------- teacher forcing

def test_teacher_forced_counts_match_target_length():
    m = tiny_model(seed=9)
    rng = np.random.default_rng(10)
    src, trg = rand_pair(rng, m.cfg, src_len=5, trg_len=4)
    dists, attns, final = md.forward_teacher_forced(m, src, trg)
    assert len(dists) == len(trg) and len(attns) == len(trg)
    assert dists[0].shape == (1, 7)
    assert attns[0].shape == (1, len(src))
    assert final.shape == (1, 3)


def test_teacher_forced_rejects_out_of_vocab():
    m = tiny_model(seed=11)
    with pytest.raises(VocabularyError):
        md.forward_teacher_forced(m, [4, 99, EOS_ID], [4, EOS_ID])


def share_baseline_tensors(baseline: md.Seq2Seq, kv: md.Seq2Seq) -> None:
    for name in kv.params:
        if not md.is_kv_specific(name):
            kv.params[name].data[...] = baseline.params[name].data
    kv._bind_views()


def test_frozen_hook_matches_baseline_per_step():
    rng = np.random.default_rng(12)
    baseline = tiny_model(seed=13, variant="baseline")
    kv = tiny_model(seed=14, variant="kvmem", rounds=1)
    share_baseline_tensors(baseline, kv)
    for _ in range(5):
        src, trg = rand_pair(rng, kv.cfg, src_len=int(rng.integers(2, 6)),
                             trg_len=int(rng.integers(2, 5)))
        d_b, a_b, _ = md.forward_teacher_forced(baseline, src, trg)
        d_k, a_k, _ = md.forward_teacher_forced(kv, src, trg,
                                                force_identity_update=True)
        for t in range(len(trg)):
            np.testing.assert_allclose(a_k[t].data, a_b[t].data, atol=1e-6)
            np.testing.assert_allclose(d_k[t].data, d_b[t].data, atol=1e-6)


def test_teacher_forced_deterministic_bitwise():
    m = tiny_model(seed=15, dtype=np.float32)
    rng = np.random.default_rng(16)
    src, trg = rand_pair(rng, m.cfg)
    d1, _, _ = md.forward_teacher_forced(m, src, trg)
    d2, _, _ = md.forward_teacher_forced(m, src, trg)
    for a, b in zip(d1, d2):
        np.testing.assert_array_equal(a.data, b.data)


def test_teacher_forced_never_writes_value_memory():
    m = tiny_model(seed=17, rounds=2, variant="kvmem")
    rng = np.random.default_rng(18)
    src, trg = rand_pair(rng, m.cfg, src_len=5, trg_len=4)
    enc = m.encode(src.reshape(1, -1), np.ones((1, len(src)), bool))
    mem = m.init_memory(enc)
    before = mem.value.data.copy()
    state = m.initial_state(enc)
    inputs = [BOS_ID] + list(trg[:-1])
    for t in range(len(trg)):
        res, _ = m.decode_step(state, np.array([inputs[t]]), mem)
        state, mem = res.state, res.memory
    np.testing.assert_array_equal(mem.value.data, before)
    assert not mem.value.data.flags.writeable


def test_batch_of_identical_pairs_matches_single_pair_loss_surface():
    m = tiny_model(seed=19)
    rng = np.random.default_rng(20)
    src, trg = rand_pair(rng, m.cfg)
    srcs = np.tile(src, (3, 1))
    trgs = np.tile(trg, (3, 1))
    ones_s = np.ones(srcs.shape, bool)
    ones_t = np.ones(trgs.shape, bool)
    res_b = m.teacher_forced(srcs, ones_s, trgs, ones_t)
    res_1 = m.teacher_forced(src.reshape(1, -1), ones_s[:1], trg.reshape(1, -1),
                             ones_t[:1])
    for t in range(len(trg)):
        for b in range(3):
            np.testing.assert_allclose(res_b.dists[t].data[b],
                                       res_1.dists[t].data[0], atol=1e-6)


# ---------------------------------------------------------------- greedy

def test_greedy_max_len_one_truncates():
    m = tiny_model(seed=21)
    hyp = m.greedy_decode([4, 5, EOS_ID], max_len=1)
    assert len(hyp.tokens) == 1


def test_greedy_trace_length_matches_output():
    m = tiny_model(seed=22, rounds=2, variant="kvmem")
    hyp = m.greedy_decode([4, 5, 6, EOS_ID], max_len=5)
    assert len(hyp.trace.attn) == len(hyp.tokens)
    assert all(len(per_round) == 2 for per_round in hyp.trace.attn)
    for per_round in hyp.trace.attn:
        for vec in per_round:
            assert abs(vec.sum() - 1.0) < 1e-6


def test_greedy_logprob_sums_chosen_steps():
    m = tiny_model(seed=23)
    src = [4, 6, EOS_ID]
    hyp = m.greedy_decode(src, max_len=4)
    dists, _, _ = md.forward_teacher_forced(m, src, np.array(hyp.tokens))
    expected = sum(float(np.log(d.data[0, t])) for d, t in zip(dists, hyp.tokens))
    assert abs(hyp.logprob - expected) < 1e-9


def test_greedy_alone_matches_greedy_in_batch():
    m = tiny_model(seed=24, rounds=2, variant="kvmem")
    rng = np.random.default_rng(25)
    sents = [np.append(rng.integers(4, 7, size=k), EOS_ID) for k in (1, 3, 5)]
    n = max(len(s) for s in sents)
    src = np.zeros((3, n), dtype=np.int64)
    mask = np.zeros((3, n), dtype=bool)
    for b, s in enumerate(sents):
        src[b, : len(s)] = s
        mask[b, : len(s)] = True
    batched = m.greedy_decode_batch(src, mask, max_len=6)
    for b, s in enumerate(sents):
        assert m.greedy_decode(s, max_len=6).tokens == batched[b]


# ---------------------------------------------------------------- beam

def test_beam_width_one_equals_greedy():
    rng = np.random.default_rng(26)
    for seed in range(4):
        m = tiny_model(seed=30 + seed)
        src = np.append(rng.integers(4, 7, size=3), EOS_ID)
        greedy = m.greedy_decode(src, max_len=5)
        beam = m.beam_decode(src, beam=1, max_len=5)
        assert beam[0].tokens == greedy.tokens


def test_beam_ranking_contract():
    m = tiny_model(seed=35)
    hyps = m.beam_decode([4, 5, EOS_ID], beam=4, max_len=4)
    scores = [h.score for h in hyps]
    assert scores == sorted(scores, reverse=True)
    for h in hyps:
        assert h.tokens[-1] == EOS_ID or len(h.tokens) == 4


def enumerate_all_sequences(m, src_ids, max_len, length_norm):
    """Brute-force oracle: expand the full prefix tree."""
    results = []
    _, mem0, state0 = m._encode_single(src_ids)
    vocab = m.cfg.trg_vocab

    def expand(state, mem, tokens, lp, depth):
        y_prev = np.array([tokens[-1] if tokens else BOS_ID], dtype=np.int64)
        res, dist = m.decode_step(state, y_prev, mem)
        logs = np.log(np.maximum(dist.data[0], 1e-38))
        for tok in range(vocab):
            lp2 = lp + float(logs[tok])
            toks2 = tokens + [tok]
            if tok == EOS_ID or depth + 1 == max_len:
                results.append((toks2, lp2))
            else:
                expand(res.state, res.memory, toks2, lp2, depth + 1)

    expand(state0, mem0, [], 0.0, 0)
    scored = [
        (lp / len(toks) if length_norm else lp, toks, lp)
        for toks, lp in results
    ]
    scored.sort(key=lambda s: (-s[0], s[1]))
    return scored


@pytest.mark.parametrize("draw", range(6))
def test_beam_equals_exhaustive_enumeration_on_toy_model(draw):
    max_len = 4
    cfg = md.ModelConfig(src_vocab=5, trg_vocab=5, embed_dim=3, hidden_dim=2,
                         rounds=1, variant="kvmem", max_decode_len=max_len)
    m = md.Seq2Seq(cfg, md.init_params(cfg, seed=100 + draw, dtype=np.float64,
                                       init_range=0.6))
    src = np.array([4, 3, EOS_ID])
    best = enumerate_all_sequences(m, src, max_len, length_norm=True)[0]
    hyps = m.beam_decode(src, beam=5 * max_len, max_len=max_len, length_norm=True)
    assert hyps[0].tokens == best[1]
    assert abs(hyps[0].logprob - best[2]) < 1e-9


def test_beam_children_do_not_share_key_memory():
    m = tiny_model(seed=36, variant="kvmem")
    rng = np.random.default_rng(37)
    src, _ = rand_pair(rng, m.cfg)
    _, mem, state = m._encode_single(src)
    parent_key = mem.key.data.copy()
    res_a, _ = m.decode_step(state, np.array([4]), mem)
    res_b, _ = m.decode_step(state, np.array([5]), mem)
    np.testing.assert_array_equal(mem.key.data, parent_key)
    assert res_a.memory.key is not res_b.memory.key
    assert np.any(res_a.memory.key.data != res_b.memory.key.data)
    assert res_a.memory.value is res_b.memory.value


# ---------------------------------------------------------------- gradients

def test_full_model_gradients_through_teacher_forcing():
    # wide init keeps every coordinate's gradient well above the finite
    # difference noise floor; tiny couplings otherwise drown in cancellation
    cfg = md.ModelConfig(src_vocab=8, trg_vocab=8, embed_dim=8, hidden_dim=8,
                         rounds=2, variant="kvmem")
    m = md.Seq2Seq(cfg, md.init_params(cfg, seed=0, dtype=np.float64,
                                       init_range=1.0))
    rng = np.random.default_rng(39)
    src, trg = rand_pair(rng, m.cfg, src_len=4, trg_len=3)

    def fn(params):
        dists, attns, _ = md.forward_teacher_forced(m, src, trg)
        total = None
        for t, d in enumerate(dists):
            picked = ad.log(ad.clamp_min(ad.gather_cols(d, [trg[t]]), 1e-12))
            total = picked if total is None else ad.add(total, picked)
        nll = ad.scale(ad.total_sum(total), -1.0)
        pen = None
        for t, a in enumerate(attns):
            mass = ad.total_sum(ad.gather_cols(a, [len(src) - 1]))
            term = ad.scale(mass, 1.0 if t < len(trg) - 1 else -1.0)
            pen = term if pen is None else ad.add(pen, term)
        return ad.add(nll, pen)

    assert ad.grad_check(fn, m.params, eps=1e-5, n_samples=250, seed=0) < 1e-4
