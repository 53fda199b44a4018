import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from deltaseg import ops
from deltaseg.attention import AttentionGate, CoordAttModule, DDAModule, DeltaOperator, SEModule, delta_apply
from deltaseg.tensor import Tensor, default_dtype


def _w(conv):
    return conv.weight.data[:, :, 0, 0].astype(np.float64), conv.bias.data.astype(np.float64)


def test_se_matches_formula():
    rng = np.random.default_rng(0)
    se = SEModule(16, rng=rng)
    assert se.hidden == 8  # max(16 // 8, 8)
    x = rng.standard_normal((2, 16, 5, 4))
    w1, b1 = _w(se.fc1)
    w2, b2 = _w(se.fc2)
    z = x.mean(axis=(2, 3))
    s = expit(np.maximum(z @ w1.T + b1, 0) @ w2.T + b2)
    out = se(Tensor(x.astype(np.float32))).data
    np.testing.assert_allclose(out, x * s[:, :, None, None], rtol=1e-4, atol=1e-5)


def test_coord_att_matches_formula():
    rng = np.random.default_rng(1)
    ca = CoordAttModule(8, rng=rng)
    ca.eval()
    ca.bn.running_mean = rng.standard_normal(8).astype(np.float32) * 0.1
    ca.bn.running_var = rng.uniform(0.5, 2, 8).astype(np.float32)
    x = rng.standard_normal((2, 8, 6, 5))
    wc, bc = _w(ca.compress)
    wh, bh = _w(ca.expand_h)
    ww, bw = _w(ca.expand_w)
    g, b = ca.bn.weight.data, ca.bn.bias.data
    rm, rv = ca.bn.running_mean, ca.bn.running_var

    def squeeze(z):  # z: (N, L, C)
        y = z @ wc.T + bc
        y = (y - rm) / np.sqrt(rv + 1e-5) * g + b
        return np.clip(y, 0, 6)

    zh = x.mean(axis=3).transpose(0, 2, 1)  # N,H,C
    zw = x.mean(axis=2).transpose(0, 2, 1)  # N,W,C
    ah = expit(squeeze(zh) @ wh.T + bh).transpose(0, 2, 1)[:, :, :, None]
    aw = expit(squeeze(zw) @ ww.T + bw).transpose(0, 2, 1)[:, :, None, :]
    out = ca(Tensor(x.astype(np.float32))).data
    np.testing.assert_allclose(out, x * ah * aw, rtol=1e-4, atol=1e-5)
    a_h, a_w = ca.gates(Tensor(x.astype(np.float32)))
    assert a_h.shape == (2, 8, 6, 1) and a_w.shape == (2, 8, 1, 5)


def _unit(rng, n, c):
    k = rng.standard_normal((n, c, 1, 1))
    return k / np.linalg.norm(k, axis=1, keepdims=True)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 2.0))
def test_delta_never_increases_norm(seed, beta):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((2, 6, 3, 3))
    k = _unit(rng, 2, 6)
    out = delta_apply(Tensor(f), Tensor(k), Tensor(np.full((2, 1, 1, 1), beta))).data
    assert (np.linalg.norm(out, axis=1) <= np.linalg.norm(f, axis=1) * (1 + 1e-12) + 1e-12).all()


def test_delta_special_strengths():
    rng = np.random.default_rng(2)
    f = rng.standard_normal((3, 5, 4, 4))
    k = _unit(rng, 3, 5)

    def run(beta):
        return delta_apply(Tensor(f), Tensor(k), Tensor(np.full((3, 1, 1, 1), beta))).data

    np.testing.assert_array_equal(run(0.0), f)
    assert np.abs((run(1.0) * k).sum(axis=1)).max() < 1e-12
    np.testing.assert_allclose(np.linalg.norm(run(2.0), axis=1), np.linalg.norm(f, axis=1), rtol=1e-12)


def test_delta_operator_strength_range_and_unit_direction():
    rng = np.random.default_rng(3)
    op = DeltaOperator(16, rng=rng)
    x = Tensor(rng.standard_normal((4, 16, 3, 3)).astype(np.float32))
    k, beta = op.direction_and_strength(x)
    np.testing.assert_allclose(np.linalg.norm(k.data, axis=1), 1.0, rtol=1e-5)
    assert ((beta.data >= 0) & (beta.data <= 2)).all()
    assert op(x).shape == x.shape
    with pytest.raises(ValueError):
        op(Tensor(np.zeros((1, 8, 3, 3), dtype=np.float32)))


def test_attention_gate_formula_same_resolution():
    rng = np.random.default_rng(4)
    gate = AttentionGate(4, 6, rng=rng)
    with default_dtype(np.float64):
        gate.astype(np.float64)
        fused = Tensor(rng.standard_normal((1, 4, 5, 5)))
        g = Tensor(rng.standard_normal((1, 6, 5, 5)))
        out, alpha = gate(fused, g)
        pre = ops.conv2d(g, gate.dec_proj.weight, gate.dec_proj.bias, gate.dec_proj.spec).data \
            + ops.conv2d(fused, gate.enc_proj.weight, gate.enc_proj.bias, gate.enc_proj.spec).data
        act = np.where(pre > 0, pre, 0.25 * pre)
        a = expit(np.einsum("oc,nchw->nohw", gate.psi.weight.data[:, :, 0, 0], act) + gate.psi.bias.data[:, None, None])
    np.testing.assert_allclose(alpha.data, a, atol=1e-12)
    np.testing.assert_allclose(out.data, fused.data * a, atol=1e-12)
    assert ((alpha.data > 0) & (alpha.data < 1)).all()


def test_attention_gate_scale2_replicates_map():
    rng = np.random.default_rng(5)
    gate = AttentionGate(4, 4, rng=rng, scale=2)
    fused = Tensor(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
    g = Tensor(rng.standard_normal((1, 4, 4, 4)).astype(np.float32))
    out, alpha = gate(fused, g)
    assert alpha.shape == (1, 1, 4, 4)
    up = np.kron(alpha.data[0, 0], np.ones((2, 2)))
    np.testing.assert_allclose(out.data[0], fused.data[0] * up, rtol=1e-6)


def test_attention_gate_rejects_bad_ratio():
    rng = np.random.default_rng(6)
    gate = AttentionGate(4, 4, rng=rng)
    with pytest.raises(ValueError, match="ratio"):
        gate(Tensor(np.zeros((1, 4, 8, 8), np.float32)), Tensor(np.zeros((1, 4, 3, 3), np.float32)))
    with pytest.raises(ValueError, match="ratio"):
        gate(Tensor(np.zeros((1, 4, 8, 8), np.float32)), Tensor(np.zeros((1, 4, 4, 4), np.float32)))
    with pytest.raises(ValueError):
        AttentionGate(4, 4, rng=rng, scale=3)


def test_dda_fusion_and_errors():
    rng = np.random.default_rng(7)
    dda = DDAModule(8, 8, rng=rng, adj_channels=4)
    enc = Tensor(rng.standard_normal((2, 8, 4, 4)).astype(np.float32))
    dec = Tensor(rng.standard_normal((2, 8, 4, 4)).astype(np.float32))
    adj_hi = Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32))
    adj_same = Tensor(rng.standard_normal((2, 4, 4, 4)).astype(np.float32))
    out, parts = dda(enc, adj_hi, dec, return_parts=True)
    assert out.shape == enc.shape
    assert set(parts) == {"fused", "delta", "gate", "alpha"}
    assert dda(enc, adj_same, dec).shape == enc.shape
    with pytest.raises(ValueError, match="adjacent"):
        dda(enc, Tensor(np.zeros((2, 4, 6, 6), np.float32)), dec)
    with pytest.raises(ValueError, match="gating"):
        dda(enc, adj_hi, None)
