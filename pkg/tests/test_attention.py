"""Attention: loop oracle, incremental/full equivalence, cache behavior."""

import math

import numpy as np
import pytest

from kvlatent import autodiff as ad
from kvlatent.autodiff import Tape, Tensor, grad_check
from kvlatent.attention import (
    AttentionWeights,
    HeadGeometry,
    KvCache,
    LayerKvCache,
    attend_full,
    attend_incremental,
    scale_factor,
)
from kvlatent.rope import RopeConfig, RotaryTable, build_rotary_table


def make_weights(geom, rng, dtype=np.float64):
    def m(r, c):
        return Tensor(rng.normal(size=(r, c)).astype(dtype) * 0.3)
    return AttentionWeights(
        w_q=m(geom.d_model, geom.n_heads * geom.d_qk),
        w_k=m(geom.d_model, geom.n_kv_heads * geom.d_qk),
        w_v=m(geom.d_model, geom.n_kv_heads * geom.d_vo),
        w_o=m(geom.n_heads * geom.d_vo, geom.d_model),
    )


def rotate_oracle(v, pos, table):
    """Half-split rotation written out longhand, independent of rotate_pairs."""
    d = v.size
    half = d // 2
    out = np.empty_like(v)
    for j in range(half):
        c, s = table.cos[pos, j], table.sin[pos, j]
        out[j] = v[j] * c - v[j + half] * s
        out[j + half] = v[j + half] * c + v[j] * s
    return out


def attention_oracle(H, w, geom, table):
    """Direct-summation causal attention: explicit loops, no shared code path."""
    seq = H.shape[0]
    out = np.zeros((seq, geom.d_model))
    for i in range(geom.n_heads):
        g = i * geom.n_kv_heads // geom.n_heads
        wq = w.w_q.data[:, i * geom.d_qk:(i + 1) * geom.d_qk]
        wk = w.w_k.data[:, g * geom.d_qk:(g + 1) * geom.d_qk]
        wv = w.w_v.data[:, g * geom.d_vo:(g + 1) * geom.d_vo]
        wo = w.w_o.data[i * geom.d_vo:(i + 1) * geom.d_vo, :]
        for t in range(seq):
            q = rotate_oracle(H[t] @ wq, t, table)
            scores = []
            for s in range(t + 1):
                k = rotate_oracle(H[s] @ wk, s, table)
                scores.append(float(q @ k) / math.sqrt(geom.d_qk))
            scores = np.array(scores)
            e = np.exp(scores - scores.max())
            probs = e / e.sum()
            ctx = np.zeros(geom.d_vo)
            for s in range(t + 1):
                ctx += probs[s] * (H[s] @ wv)
            out[t] += ctx @ wo
    return out


def test_full_attention_matches_loop_oracle():
    geom = HeadGeometry(d_model=16, n_heads=4, n_kv_heads=2, d_qk=6, d_vo=10)
    table = build_rotary_table(RopeConfig(dim=6), 32)
    rng = np.random.default_rng(0)
    w = make_weights(geom, rng)
    H = rng.normal(size=(7, 16))
    out = attend_full(Tensor(H), w, geom, table)
    expect = attention_oracle(H, w, geom, table)
    assert np.abs(out.data - expect).max() < 1e-5


def test_single_token_output():
    # softmax over one position is 1: output reduces to sum_i h Wv(g) Wo(i)
    geom = HeadGeometry(d_model=8, n_heads=2, n_kv_heads=1, d_qk=4, d_vo=6)
    table = build_rotary_table(RopeConfig(dim=4), 4)
    rng = np.random.default_rng(1)
    w = make_weights(geom, rng)
    h = rng.normal(size=(1, 8))
    out = attend_full(Tensor(h), w, geom, table)
    expect = np.zeros((1, 8))
    v = h @ w.w_v.data[:, 0:6]
    for i in range(2):
        expect += v @ w.w_o.data[i * 6:(i + 1) * 6, :]
    assert np.abs(out.data - expect).max() < 1e-12


def test_identity_weight_reduction_is_causal_average():
    # one head, identity projections, zero rotation: softmax-causal average of rows
    d = 4
    geom = HeadGeometry(d_model=d, n_heads=1, n_kv_heads=1, d_qk=d, d_vo=d)
    config = RopeConfig(dim=d)
    zero_table = RotaryTable(config=config, max_pos=8,
                             cos=np.ones((8, d // 2)), sin=np.zeros((8, d // 2)))
    eye = lambda: Tensor(np.eye(d))
    w = AttentionWeights(w_q=eye(), w_k=eye(), w_v=eye(), w_o=eye())
    rng = np.random.default_rng(2)
    H = rng.normal(size=(5, d))
    out = attend_full(Tensor(H), w, geom, zero_table)
    for t in range(5):
        scores = (H[t] @ H[: t + 1].T) / math.sqrt(d)
        e = np.exp(scores - scores.max())
        probs = e / e.sum()
        assert np.abs(out.data[t] - probs @ H[: t + 1]).max() < 1e-10


def test_gqa_equals_mha_when_counts_match():
    # n_kv == n_heads with block-copied K/V must equal independent-head attention
    geom = HeadGeometry(d_model=12, n_heads=4, n_kv_heads=4, d_qk=4, d_vo=4)
    table = build_rotary_table(RopeConfig(dim=4), 16)
    rng = np.random.default_rng(3)
    w = make_weights(geom, rng)
    H = rng.normal(size=(6, 12))
    out = attend_full(Tensor(H), w, geom, table)
    expect = attention_oracle(H, w, geom, table)
    assert np.abs(out.data - expect).max() < 1e-8


def test_scale_factor_uses_dqk():
    assert scale_factor(HeadGeometry(128, 4, 4, 64, 32)) == 0.125
    assert scale_factor(HeadGeometry(128, 4, 4, 16, 64)) == 0.25
    assert scale_factor(HeadGeometry(128, 8, 8, 128, 128)) == 1 / math.sqrt(128)


def test_causality_exact():
    geom = HeadGeometry(d_model=8, n_heads=2, n_kv_heads=2, d_qk=4, d_vo=4)
    table = build_rotary_table(RopeConfig(dim=4), 16)
    rng = np.random.default_rng(4)
    w = make_weights(geom, rng)
    H = rng.normal(size=(6, 8))
    base = attend_full(Tensor(H), w, geom, table).data
    H2 = H.copy()
    H2[4:] = 0.0  # clobber the future
    changed = attend_full(Tensor(H2), w, geom, table).data
    assert np.array_equal(base[:4], changed[:4])


# ---------------------------------------------------------------------------
# incremental path
# ---------------------------------------------------------------------------


def test_incremental_single_token_equals_full():
    geom = HeadGeometry(d_model=8, n_heads=2, n_kv_heads=1, d_qk=4, d_vo=6)
    table = build_rotary_table(RopeConfig(dim=4), 8)
    rng = np.random.default_rng(5)
    w = make_weights(geom, rng)
    h = rng.normal(size=8)
    cache = LayerKvCache(geom, dtype=np.float64)
    out = attend_incremental(h, cache, w, geom, table, 0)
    full = attend_full(Tensor(h[None, :]), w, geom, table)
    assert np.abs(out - full.data[0]).max() < 1e-12
    assert cache.len == 1


def test_incremental_sequence_matches_full_rows():
    geom = HeadGeometry(d_model=12, n_heads=4, n_kv_heads=2, d_qk=6, d_vo=10)
    table = build_rotary_table(RopeConfig(dim=6), 64)
    rng = np.random.default_rng(6)
    w = make_weights(geom, rng)
    H = rng.normal(size=(32, 12))
    cache = LayerKvCache(geom, dtype=np.float64, capacity=2)  # force regrowth
    rows = [attend_incremental(H[t], cache, w, geom, table, t) for t in range(32)]
    full = attend_full(Tensor(H), w, geom, table)
    assert np.abs(np.stack(rows) - full.data).max() < 1e-5
    assert cache.len == 32


def test_cache_stores_rotated_keys():
    geom = HeadGeometry(d_model=8, n_heads=2, n_kv_heads=2, d_qk=4, d_vo=4)
    table = build_rotary_table(RopeConfig(dim=4), 8)
    rng = np.random.default_rng(7)
    w = make_weights(geom, rng)
    cache = LayerKvCache(geom, dtype=np.float64)
    H = rng.normal(size=(3, 8))
    for t in range(3):
        attend_incremental(H[t], cache, w, geom, table, t)
    for g in range(2):
        for t in range(3):
            raw = H[t] @ w.w_k.data[:, g * 4:(g + 1) * 4]
            assert np.abs(cache.keys[g, t] - rotate_oracle(raw, t, table)).max() < 1e-12


def test_incremental_position_contract():
    geom = HeadGeometry(d_model=8, n_heads=2, n_kv_heads=2, d_qk=4, d_vo=4)
    table = build_rotary_table(RopeConfig(dim=4), 8)
    rng = np.random.default_rng(8)
    w = make_weights(geom, rng)
    cache = LayerKvCache(geom, dtype=np.float64)
    attend_incremental(rng.normal(size=8), cache, w, geom, table, 0)
    with pytest.raises(ValueError, match="cache"):
        attend_incremental(rng.normal(size=8), cache, w, geom, table, 5)


@pytest.mark.parametrize("seed", range(20))
def test_incremental_full_equivalence_random_geometries(seed):
    rng = np.random.default_rng(100 + seed)
    n_heads = int(rng.choice([1, 2, 4, 6]))
    n_kv = int(rng.choice([k for k in (1, 2, 3, n_heads) if n_heads % k == 0]))
    d_qk = int(rng.choice([2, 4, 6, 16, 64]))
    d_vo = int(rng.choice([2, 3, 8, 10, 64]))
    geom = HeadGeometry(d_model=int(rng.choice([8, 16, 24])), n_heads=n_heads,
                        n_kv_heads=n_kv, d_qk=d_qk, d_vo=d_vo)
    table = build_rotary_table(RopeConfig(dim=d_qk), 16)
    w = make_weights(geom, rng)
    seq = int(rng.integers(2, 12))
    H = rng.normal(size=(seq, geom.d_model))
    cache = LayerKvCache(geom, dtype=np.float64)
    rows = [attend_incremental(H[t], cache, w, geom, table, t) for t in range(seq)]
    full = attend_full(Tensor(H), w, geom, table)
    assert np.abs(np.stack(rows) - full.data).max() < 1e-5


def test_gqa_single_kv_head_shared():
    geom = HeadGeometry(d_model=8, n_heads=4, n_kv_heads=1, d_qk=4, d_vo=4)
    table = build_rotary_table(RopeConfig(dim=4), 8)
    rng = np.random.default_rng(9)
    w = make_weights(geom, rng)
    cache = KvCache(n_layers=1, geom=geom, dtype=np.float64)
    attend_incremental(rng.normal(size=8), cache.layers[0], w, geom, table, 0)
    assert cache.layers[0].keys.shape[0] == 1  # exactly one kv head stored
    for i in range(4):
        assert geom.kv_head_of(i) == 0


def test_vo_channel_permutation_invariance():
    # permuting V columns and O rows of one head identically is a no-op
    geom = HeadGeometry(d_model=12, n_heads=2, n_kv_heads=2, d_qk=4, d_vo=6)
    table = build_rotary_table(RopeConfig(dim=4), 16)
    rng = np.random.default_rng(10)
    w = make_weights(geom, rng)
    H = rng.normal(size=(5, 12))
    base = attend_full(Tensor(H), w, geom, table).data

    perm = rng.permutation(6)
    head = 1
    wv = w.w_v.data.copy()
    wo = w.w_o.data.copy()
    wv[:, head * 6:(head + 1) * 6] = wv[:, head * 6:(head + 1) * 6][:, perm]
    wo[head * 6:(head + 1) * 6, :] = wo[head * 6:(head + 1) * 6, :][perm, :]
    w2 = AttentionWeights(w_q=w.w_q, w_k=w.w_k, w_v=Tensor(wv), w_o=Tensor(wo))
    permuted = attend_full(Tensor(H), w2, geom, table).data
    assert np.abs(base - permuted).max() < 1e-6


def test_attention_gradient_vs_finite_differences():
    geom = HeadGeometry(d_model=6, n_heads=2, n_kv_heads=1, d_qk=4, d_vo=4)
    table = build_rotary_table(RopeConfig(dim=4), 8)
    rng = np.random.default_rng(11)
    w = make_weights(geom, rng)
    target = rng.normal(size=(4, 6))

    def loss_of_input(x, tape):
        out = attend_full(x, w, geom, table, tape)
        return ad.mean_all(ad.mul(ad.sub(out, target, tape),
                                  ad.sub(out, target, tape), tape), tape)

    x = Tensor(rng.normal(size=(4, 6)))
    assert grad_check(loss_of_input, x) < 1e-4

    def loss_of_wq(wq, tape):
        w_alt = AttentionWeights(w_q=wq, w_k=w.w_k, w_v=w.w_v, w_o=w.w_o)
        out = attend_full(Tensor(target), w_alt, geom, table, tape)
        return ad.mean_all(ad.mul(out, out, tape), tape)

    assert grad_check(loss_of_wq, Tensor(w.w_q.data.copy())) < 1e-4


def test_rope_dot_product_gradient():
    table = build_rotary_table(RopeConfig(dim=8), 16)
    rng = np.random.default_rng(12)
    k = rng.normal(size=(3, 8))
    krot = np.stack([rotate_oracle(k[i], i + 3, table) for i in range(3)])

    def rotated_dot(q, tape):
        qr = ad.rotate_pairs(q, table.cos[[1, 4, 9]], table.sin[[1, 4, 9]],
                             "half_split", tape)
        return ad.sum_all(ad.mul(qr, krot, tape), tape)

    assert grad_check(rotated_dot, Tensor(rng.normal(size=(3, 8)))) < 1e-4


def test_geometry_validation():
    with pytest.raises(ValueError):
        HeadGeometry(d_model=8, n_heads=3, n_kv_heads=2, d_qk=4, d_vo=4)
    with pytest.raises(ValueError):
        HeadGeometry(d_model=8, n_heads=2, n_kv_heads=1, d_qk=5, d_vo=4)
    with pytest.raises(ValueError):
        HeadGeometry(d_model=8, n_heads=2, n_kv_heads=1, d_qk=4, d_vo=1)
    # decoupling: n_heads * d_qk != d_model is legal
    HeadGeometry(d_model=8, n_heads=2, n_kv_heads=1, d_qk=16, d_vo=32)
