from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from csmoe import numerics as nx
from csmoe.numerics import Tensor, grad_check
from csmoe.transformer import (BlockConfig, causal_mask, decoder_block, encoder_block, ffn,
                               init_decoder_block, init_encoder_block, init_subsample, layer_norm,
                               mhsa, padding_mask, sinusoid_table, subsample)

CFG = BlockConfig(d_model=8, n_heads=2, d_ff=16, dropout=0.0)


def arr(t):
    return t.data if isinstance(t, Tensor) else t


# -- dense numpy oracles -------------------------------------------------------------------
def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_lin(x, p):
    return x @ arr(p["w"]) + arr(p["b"])


def np_mhsa(q, k, v, p, heads, mask=None):
    d = q.shape[-1]
    dh = d // heads
    qp, kp, vp = np_lin(q, p["q"]), np_lin(k, p["k"]), np_lin(v, p["v"])
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = qp[:, sl] @ kp[:, sl].T / math.sqrt(dh)
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        w = np.exp(s - s.max(-1, keepdims=True))
        w /= w.sum(-1, keepdims=True)
        outs.append(w @ vp[:, sl])
    return np_lin(np.concatenate(outs, axis=-1), p["o"])


def np_ffn(x, p):
    return np.maximum(x @ arr(p["w1"]) + arr(p["b1"]), 0) @ arr(p["w2"]) + arr(p["b2"])


def np_encoder(x, p, heads, mask=None):
    hx = np_ln(x, arr(p["ln1"]["g"]), arr(p["ln1"]["b"]))
    a = x + np_mhsa(hx, hx, hx, p["attn"], heads, mask)
    return np_ln(a + np_ffn(a, p["ffn"]), arr(p["ln2"]["g"]), arr(p["ln2"]["b"]))


def np_decoder(y, mem, p, heads):
    hy = np_ln(y, arr(p["ln1"]["g"]), arr(p["ln1"]["b"]))
    a = y + np_mhsa(hy, hy, hy, p["self_attn"], heads, np.tril(np.ones((len(y), len(y)), bool)))
    ha = np_ln(a, arr(p["ln2"]["g"]), arr(p["ln2"]["b"]))
    c = a + np_mhsa(ha, mem, mem, p["cross_attn"], heads)
    return np_ln(c + np_ffn(c, p["ffn"]), arr(p["ln3"]["g"]), arr(p["ln3"]["b"]))


def randomise(tree, rng):
    """Replace every parameter with standard normal draws (non-trivial norms and biases)."""
    for k, v in tree.items():
        if isinstance(v, dict):
            randomise(v, rng)
        else:
            v.data = rng.standard_normal(v.shape) * 0.5
    return tree


def zero(p):
    p["w"].data = np.zeros_like(p["w"].data)
    p["b"].data = np.zeros_like(p["b"].data)


# -- layer norm ---------------------------------------------------------------------------------
def test_layer_norm_constant_row_is_zero():
    out = layer_norm(Tensor(np.full((1, 4), 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))


def test_layer_norm_unit_row():
    out = layer_norm(Tensor(np.array([[1.0, -1.0]])), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_moments():
    x = np.random.default_rng(0).standard_normal((3, 4)) * 5 + 2
    out = layer_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    assert np.abs(out.mean(-1)).max() < 1e-10
    var = out.var(-1)
    assert ((var >= 1 - 1e-3) & (var <= 1)).all()


# -- attention ------------------------------------------------------------------------------------
def test_single_key_attention_ignores_query_and_key_weights():
    rng = np.random.default_rng(1)
    p = randomise(init_encoder_block(rng, CFG), rng)["attn"]
    x = rng.standard_normal((1, 8))
    out = mhsa(Tensor(x), Tensor(x), Tensor(x), p, CFG).data
    np.testing.assert_allclose(out, np_lin(np_lin(x, p["v"]), p["o"]), atol=1e-12)


def test_identical_keys_give_mean_of_values():
    rng = np.random.default_rng(2)
    p = randomise(init_encoder_block(rng, CFG), rng)["attn"]
    p["k"]["w"].data = np.zeros((8, 8))
    x = rng.standard_normal((5, 8))
    out = mhsa(Tensor(x), Tensor(x), Tensor(x), p, CFG).data
    expect = np_lin(np_lin(x, p["v"]).mean(0, keepdims=True), p["o"])
    np.testing.assert_allclose(out, np.repeat(expect, 5, axis=0), atol=1e-12)


def test_mhsa_matches_dense_oracle():
    rng = np.random.default_rng(3)
    p = randomise(init_encoder_block(rng, CFG), rng)["attn"]
    q, kv = rng.standard_normal((2, 8)), rng.standard_normal((3, 8))
    out = mhsa(Tensor(q), Tensor(kv), Tensor(kv), p, CFG).data
    np.testing.assert_allclose(out, np_mhsa(q, kv, kv, p, 2), atol=1e-10)


def test_fully_masked_query_is_an_error():
    rng = np.random.default_rng(4)
    p = init_encoder_block(rng, CFG)["attn"]
    x = Tensor(rng.standard_normal((2, 8)))
    mask = np.array([[True, False], [False, False]])
    with pytest.raises(ValueError, match="fully masked query"):
        mhsa(x, x, x, p, CFG, mask)


# -- feed-forward --------------------------------------------------------------------------------
def test_ffn_zero_weights():
    z = [Tensor(np.zeros(s)) for s in ((4, 6), (6,), (6, 4), (4,))]
    out = ffn(Tensor(np.ones((2, 4))), *z)
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_ffn_identity_on_positive_input():
    one, zero_ = Tensor(np.ones((1, 1))), Tensor(np.zeros(1))
    x = np.array([[0.5], [2.0]])
    np.testing.assert_array_equal(ffn(Tensor(x), one, zero_, one, zero_).data, x)


def test_ffn_matches_dense_oracle():
    rng = np.random.default_rng(5)
    p = {k: Tensor(rng.standard_normal(s)) for k, s in
         (("w1", (3, 5)), ("b1", (5,)), ("w2", (5, 3)), ("b2", (3,)))}
    x = rng.standard_normal((2, 3))
    np.testing.assert_allclose(ffn(Tensor(x), p["w1"], p["b1"], p["w2"], p["b2"]).data,
                               np_ffn(x, p), atol=1e-10)


# -- blocks --------------------------------------------------------------------------------------
def test_encoder_block_residual_only_path():
    rng = np.random.default_rng(6)
    p = randomise(init_encoder_block(rng, CFG), rng)
    zero(p["attn"]["o"])
    p["ffn"]["w2"].data[:] = 0.0
    p["ffn"]["b2"].data[:] = 0.0
    x = rng.standard_normal((4, 8))
    out = encoder_block(Tensor(x), p, CFG).data
    np.testing.assert_allclose(out, np_ln(x, p["ln2"]["g"].data, p["ln2"]["b"].data), atol=1e-12)


@given(st.integers(1, 9))
def test_encoder_block_preserves_shape(t):
    rng = np.random.default_rng(t)
    p = init_encoder_block(rng, CFG)
    assert encoder_block(Tensor(rng.standard_normal((t, 8))), p, CFG).shape == (t, 8)


def test_encoder_block_matches_composition_oracle():
    rng = np.random.default_rng(7)
    p = randomise(init_encoder_block(rng, CFG), rng)
    x = rng.standard_normal((5, 8))
    np.testing.assert_allclose(encoder_block(Tensor(x), p, CFG).data, np_encoder(x, p, 2), atol=1e-10)


def test_decoder_block_single_position():
    rng = np.random.default_rng(8)
    p = randomise(init_decoder_block(rng, CFG), rng)
    y, mem = rng.standard_normal((1, 8)), rng.standard_normal((3, 8))
    np.testing.assert_allclose(decoder_block(Tensor(y), Tensor(mem), p, CFG).data,
                               np_decoder(y, mem, p, 2), atol=1e-10)


def test_decoder_block_residual_only_path():
    rng = np.random.default_rng(9)
    p = randomise(init_decoder_block(rng, CFG), rng)
    zero(p["self_attn"]["o"])
    zero(p["cross_attn"]["o"])
    p["ffn"]["w2"].data[:] = 0.0
    p["ffn"]["b2"].data[:] = 0.0
    y = rng.standard_normal((3, 8))
    out = decoder_block(Tensor(y), Tensor(rng.standard_normal((4, 8))), p, CFG).data
    np.testing.assert_allclose(out, np_ln(y, p["ln3"]["g"].data, p["ln3"]["b"].data), atol=1e-12)


def test_decoder_block_matches_composition_oracle():
    rng = np.random.default_rng(10)
    p = randomise(init_decoder_block(rng, CFG), rng)
    y, mem = rng.standard_normal((4, 8)), rng.standard_normal((6, 8))
    np.testing.assert_allclose(decoder_block(Tensor(y), Tensor(mem), p, CFG).data,
                               np_decoder(y, mem, p, 2), atol=1e-10)


@given(st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_decoder_is_causal(i, seed):
    rng = np.random.default_rng(seed)
    p = randomise(init_decoder_block(np.random.default_rng(0), CFG), rng)
    y, mem = rng.standard_normal((5, 8)), rng.standard_normal((3, 8))
    y2 = y.copy()
    y2[i + 1:] += rng.standard_normal(y2[i + 1:].shape)
    a = decoder_block(Tensor(y), Tensor(mem), p, CFG).data
    b = decoder_block(Tensor(y2), Tensor(mem), p, CFG).data
    np.testing.assert_array_equal(a[:i + 1], b[:i + 1])


def test_padding_frames_do_not_leak():
    rng = np.random.default_rng(11)
    p = randomise(init_encoder_block(rng, CFG), rng)
    x = rng.standard_normal((2, 6, 8))
    mask = padding_mask([6, 4], 6)
    x2 = x.copy()
    x2[1, 4:] = rng.standard_normal((2, 8)) * 10
    a = encoder_block(Tensor(x), p, CFG, mask).data
    b = encoder_block(Tensor(x2), p, CFG, mask).data
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1, :4], b[1, :4])


def test_causal_mask_is_lower_triangular():
    m = causal_mask(4)
    assert (m == np.tril(np.ones((4, 4), bool))).all()


def test_blocks_pass_grad_check():
    rng = np.random.default_rng(12)
    cfg = BlockConfig(d_model=4, n_heads=2, d_ff=6, dropout=0.0)
    enc = randomise(init_encoder_block(rng, cfg), rng)
    dec = randomise(init_decoder_block(rng, cfg), rng)
    # extended precision: the key-bias gradient is exactly zero and float64
    # differences would be dominated by rounding noise
    ld = np.longdouble
    for t in list(_flat(enc).values()) + list(_flat(dec).values()):
        t.data = t.data.astype(ld)
    x, y = Tensor(rng.standard_normal((3, 4)).astype(ld)), Tensor(rng.standard_normal((2, 4)).astype(ld))
    w = Tensor(rng.standard_normal((2, 4)).astype(ld))

    def loss():
        return nx.tsum(decoder_block(y, encoder_block(x, enc, cfg), dec, cfg) * w)

    params = {**{f"enc.{k}": v for k, v in _flat(enc).items()}, **{f"dec.{k}": v for k, v in _flat(dec).items()}}
    rep = grad_check(loss, params, epsilon=1e-5)
    assert rep.passed, rep.worst


def _flat(tree, prefix=""):
    out = {}
    for k, v in tree.items():
        if isinstance(v, dict):
            out.update(_flat(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


# -- subsampling ---------------------------------------------------------------------------------
@pytest.mark.parametrize("t,expect", [(4, 1), (5, 2), (8, 2), (9, 3), (60, 15)])
def test_subsample_length_law(t, expect):
    p = init_subsample(np.random.default_rng(0), 3, 8)
    h, lens = subsample(Tensor(np.ones((t, 3))), p)
    assert h.shape == (expect, 8) and lens.tolist() == [expect]


def test_subsample_rejects_short_input():
    p = init_subsample(np.random.default_rng(0), 3, 8)
    with pytest.raises(ValueError, match="utterance too short"):
        subsample(Tensor(np.ones((3, 3))), p)


def test_positional_rows_equal_sinusoid_formula():
    p = init_subsample(np.random.default_rng(0), 3, 8)
    for lin in p.values():
        zero(lin)
    h, _ = subsample(Tensor(np.ones((20, 3))), p)
    oracle = np.array([[math.sin(t / 10000 ** (i / 8)) if i % 2 == 0 else math.cos(t / 10000 ** ((i - 1) / 8))
                        for i in range(8)] for t in range(5)])
    np.testing.assert_allclose(h.data, oracle, atol=1e-12)
    np.testing.assert_allclose(sinusoid_table(5, 8), oracle, atol=1e-12)


def test_batched_subsample_matches_unbatched():
    rng = np.random.default_rng(13)
    p = init_subsample(rng, 3, 8)
    a, b = rng.standard_normal((9, 3)), rng.standard_normal((13, 3))
    batch = np.zeros((2, 13, 3))
    batch[0, :9], batch[1] = a, b
    hb, lens = subsample(Tensor(batch), p, [9, 13])
    ha, _ = subsample(Tensor(a), p)
    np.testing.assert_allclose(hb.data[0, :lens[0]], ha.data, atol=1e-12)


def test_block_config_validation():
    with pytest.raises(ValueError):
        BlockConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        BlockConfig(dropout=1.0)
