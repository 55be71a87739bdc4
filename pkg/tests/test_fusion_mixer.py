import math

import numpy as np
import pytest

from higo import arraycore as ac
from higo.arraycore import Array
from higo.fusion import climate_attention, encode_drivers, fuse, gated_fuse, init_fusion
from higo.mixer import cross_attention, encode_ba, init_mixer, mix
from higo.params import ModelParams

import gradcheck

D = 4


def gelu_ref(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def softmax_ref(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@pytest.fixture
def fp():
    p = ModelParams(np.random.default_rng(0))
    init_fusion(p, C_x=3, C_z=2, D=D, modes=2)
    return p


@pytest.fixture
def mp():
    p = ModelParams(np.random.default_rng(1))
    init_mixer(p, D)
    return p


# ---------------------------------------------------------------- fusion

def test_encode_constant_map(fp):
    for n in ("W1", "W2", "b1"):
        fp[f"fusion.enc.{n}"].data[:] = 0.0
    fp["fusion.enc.b2"].data[:] = [1.0, -2.0, 0.5, 3.0]
    out = encode_drivers(np.random.default_rng(0).normal(size=(5, 7, 3)), fp).data
    assert out.shape == (5, 7, D)
    np.testing.assert_array_equal(out, np.broadcast_to([1.0, -2.0, 0.5, 3.0], (5, 7, D)))


def test_encode_one_cell_matches_hand_mlp(fp):
    x = np.array([0.3, -0.7, 1.1])
    W1, b1, W2, b2 = (fp[f"fusion.enc.{n}"].data for n in ("W1", "b1", "W2", "b2"))
    expect = gelu_ref(x @ W1 + b1) @ W2 + b2
    np.testing.assert_allclose(encode_drivers(x[None, None], fp).data[0, 0], expect, atol=1e-14)


def test_encode_channel_mismatch(fp):
    with pytest.raises(ValueError):
        encode_drivers(np.zeros((2, 2, 5)), fp)


def test_attention_zero_input_zero_bias(fp):
    a = climate_attention(np.zeros(2), fp)
    assert len(a) == 3
    for v in a:
        np.testing.assert_array_equal(v.data, 0.0)


def test_attention_parameter_isolation(fp):
    z = np.array([0.4, -1.3])
    before = [v.data.copy() for v in climate_attention(z, fp)]
    fp["fusion.att1.W1"].data += 0.5
    after = [v.data for v in climate_attention(z, fp)]
    assert not np.allclose(before[0], after[0])
    np.testing.assert_array_equal(before[1], after[1])
    np.testing.assert_array_equal(before[2], after[2])


def test_attention_toy_hand_case():
    p = ModelParams(np.random.default_rng(0))
    init_fusion(p, C_x=1, C_z=2, D=2, modes=1)
    p["fusion.att2.W1"].data[:] = [[1.0], [2.0]]
    p["fusion.att2.b1"].data[:] = [0.5]
    p["fusion.att2.W2"].data[:] = [[2.0, -1.0]]
    p["fusion.att2.b2"].data[:] = [0.1, 0.2]
    z = np.array([0.25, -0.5])
    h = gelu_ref(0.25 * 1.0 + -0.5 * 2.0 + 0.5)      # = gelu(-0.25)
    expect = np.array([2.0 * h + 0.1, -1.0 * h + 0.2])
    np.testing.assert_allclose(climate_attention(z, p)[1].data, expect, atol=1e-15)


def test_attention_is_unbounded_unless_squashed(fp):
    fp["fusion.att3.b2"].data[:] = 7.0
    raw = climate_attention(np.zeros(2), fp)[2].data
    assert np.all(raw == 7.0)
    sq = climate_attention(np.zeros(2), fp, squash=True)[2].data
    assert np.all((sq > 0) & (sq < 1))


def test_gated_fuse_residual_identity(fp):
    Z = Array(np.random.default_rng(2).normal(size=(4, 4, D)))
    zero = [Array(np.zeros(D))] * 3
    np.testing.assert_array_equal(gated_fuse(Z, zero, fp).data, Z.data)


def test_gated_fuse_channel_locality(fp):
    Z = Array(np.random.default_rng(3).normal(size=(4, 4, D)))
    onehot = np.zeros(D)
    onehot[2] = 1.0
    out = gated_fuse(Z, [Array(onehot), Array(np.zeros(D)), Array(np.zeros(D))], fp).data
    keep = [c for c in range(D) if c != 2]
    np.testing.assert_array_equal(out[..., keep], Z.data[..., keep])
    assert not np.allclose(out[..., 2], Z.data[..., 2])


def test_gated_fuse_doubling():
    p = ModelParams(np.random.default_rng(0))
    init_fusion(p, C_x=1, C_z=1, D=3, modes=1)
    p["fusion.k1.w"].data[:] = np.eye(3)
    p["fusion.k1.b"].data[:] = 0.0
    p["fusion.k2.w"].data[:] = 0.0
    p["fusion.k3.w"].data[:] = 0.0
    Z = Array(np.array([[[0.3, -1.0, 2.0]]]))
    out = gated_fuse(Z, [Array(np.ones(3)), Array(np.ones(3)), Array(np.ones(3))], p).data
    np.testing.assert_array_equal(out, 2 * Z.data)


def test_fusion_pipeline_gradients(fp):
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, size=(2, 4, 4, 3))
    z = rng.uniform(-1, 1, size=(2, 2))
    C = rng.uniform(-1, 1, size=(2, 4, 4, D))
    errs = gradcheck.check_params(lambda: ac.sum(fuse(X, z, fp) * Array(C)), fp, per_param=4)
    assert max(errs.values()) <= 1e-4, errs


# ---------------------------------------------------------------- mixer

def test_encode_ba_examples(mp):
    mp["mixer.ba.b"].data[:] = 0.0
    np.testing.assert_array_equal(encode_ba(np.zeros((3, 3), int), mp, K=4).data, 0.0)
    mp["mixer.ba.b"].data[:] = 0.25
    top = encode_ba(np.full((1, 1), 3), mp, K=4).data[0, 0]
    np.testing.assert_allclose(top, mp["mixer.ba.w"].data[0] + 0.25, atol=1e-15)
    a, b = encode_ba(np.array([[1, 2]]), mp, K=4).data[0]
    assert not np.allclose(a, b)
    with pytest.raises(ValueError):
        encode_ba(np.array([[4]]), mp, K=4)


def test_cross_attention_single_token(mp):
    rng = np.random.default_rng(5)
    Hf, B = Array(rng.normal(size=(1, 1, D))), Array(rng.normal(size=(1, 1, D)))
    out = cross_attention(Hf, B, mp).data
    np.testing.assert_allclose(out[0, 0], B.data[0, 0] @ mp["mixer.WV"].data, atol=1e-14)


def test_cross_attention_uniform_when_wq_zero(mp):
    rng = np.random.default_rng(6)
    mp["mixer.WQ"].data[:] = 0.0
    Hf, B = Array(rng.normal(size=(3, 2, D))), Array(rng.normal(size=(3, 2, D)))
    out = cross_attention(Hf, B, mp).data.reshape(6, D)
    mean_v = (B.data.reshape(6, D) @ mp["mixer.WV"].data).mean(axis=0)
    np.testing.assert_allclose(out, np.broadcast_to(mean_v, (6, D)), atol=1e-14)


def test_cross_attention_two_token_hand_case():
    p = ModelParams(np.random.default_rng(0))
    init_mixer(p, 2)
    p["mixer.WQ"].data[:] = np.eye(2)
    p["mixer.WK"].data[:] = np.eye(2)
    p["mixer.WV"].data[:] = np.eye(2)
    Hf = np.array([[[1.0, 0.0], [0.0, 1.0]]])       # 1x2 grid, two tokens
    B = np.array([[[2.0, 0.0], [0.0, 1.0]]])
    # logits q.k / sqrt(2): token0 -> [2, 0]/sqrt2, token1 -> [0, 1]/sqrt2
    s = math.sqrt(2)
    w0 = np.array([math.exp(2 / s), 1.0]) / (math.exp(2 / s) + 1.0)
    w1 = np.array([1.0, math.exp(1 / s)]) / (1.0 + math.exp(1 / s))
    expect = np.stack([w0 @ B[0], w1 @ B[0]])
    out, weights = cross_attention(Array(Hf), Array(B), p, return_weights=True)
    np.testing.assert_allclose(out.data[0], expect, atol=1e-15)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-12)


def test_mix_residual_exposure(mp):
    for n in ("W1", "b1", "W2", "b2"):
        mp[f"mixer.ffn.{n}"].data[:] = 0.0
    rng = np.random.default_rng(7)
    Hf, B = Array(rng.normal(size=(2, 3, D))), Array(rng.normal(size=(2, 3, D)))
    np.testing.assert_array_equal(mix(Hf, B, mp).data, B.data)
    np.testing.assert_array_equal(mix(Hf, B, mp, residual="drivers").data, Hf.data)


def test_mix_one_cell_hand_trace(mp):
    rng = np.random.default_rng(8)
    h, b = rng.normal(size=D), rng.normal(size=D)
    A = b @ mp["mixer.WV"].data
    W1, b1, W2, b2 = (mp[f"mixer.ffn.{n}"].data for n in ("W1", "b1", "W2", "b2"))
    f = gelu_ref(A @ W1 + b1) @ W2 + b2
    ln = (f - f.mean()) / np.sqrt(f.var() + 1e-5) * mp["mixer.ln.g"].data + mp["mixer.ln.b"].data
    out = mix(Array(h[None, None]), Array(b[None, None]), mp).data[0, 0]
    np.testing.assert_allclose(out, ln + b, atol=1e-13)


def test_attention_permutation_equivariance(mp):
    rng = np.random.default_rng(9)
    Hf, B = rng.normal(size=(6, D)), rng.normal(size=(6, D))
    perm = rng.permutation(6)
    out = cross_attention(Array(Hf.reshape(2, 3, D)), Array(B.reshape(2, 3, D)), mp).data.reshape(6, D)
    outp = cross_attention(Array(Hf[perm].reshape(2, 3, D)), Array(B[perm].reshape(2, 3, D)),
                           mp).data.reshape(6, D)
    np.testing.assert_allclose(outp, out[perm], atol=1e-13)


def test_mixer_pipeline_gradients(mp):
    rng = np.random.default_rng(10)
    Hf = rng.uniform(-1, 1, size=(2, 3, 3, D))
    ba = rng.integers(0, 4, size=(2, 3, 3))
    C = rng.uniform(-1, 1, size=(2, 3, 3, D))
    loss = lambda: ac.sum(mix(Array(Hf), encode_ba(ba, mp, 4), mp) * Array(C))  # noqa: E731
    errs = gradcheck.check_params(loss, mp, per_param=4)
    assert max(errs.values()) <= 1e-4, errs
