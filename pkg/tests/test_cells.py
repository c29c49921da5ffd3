import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mhred import tensor as T
from mhred.cells import AttentionParams, GruParams, bigru_encode, gru_step, luong_attend, run_sequence
from mhred.gradcheck import check_gradients
from mhred.tensor import ContractError, DimensionError, Tensor


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_gru(x, h, W, U, b):
    """Step-by-step scalar-arithmetic reference GRU (lists of floats)."""
    hid = len(h)

    def affine(gate, vec_in, vec_h):
        return [
            sum(vec_in[i] * W[gate][i][j] for i in range(len(vec_in)))
            + sum(vec_h[i] * U[gate][i][j] for i in range(hid))
            + b[gate][j]
            for j in range(hid)
        ]

    z = [_sig(v) for v in affine("z", x, h)]
    r = [_sig(v) for v in affine("r", x, h)]
    rh = [r[i] * h[i] for i in range(hid)]
    ht = [math.tanh(v) for v in affine("h", x, rh)]
    return [(1 - z[j]) * h[j] + z[j] * ht[j] for j in range(hid)]


def params_from(W, U, b):
    return GruParams(
        *(Tensor(np.array(W[g])) for g in "zrh"),
        *(Tensor(np.array(U[g])) for g in "zrh"),
        *(Tensor(np.array(b[g])) for g in "zrh"),
    )


def test_gru_zero_weights():
    p = GruParams.zeros(3, 2)
    h = gru_step(Tensor(np.array([[0.3, -1.0, 2.0]])), Tensor(np.zeros((1, 2))), p)
    assert np.array_equal(h.data, np.zeros((1, 2)))


def test_gru_update_gate_saturation():
    p = GruParams.zeros(2, 2)
    p.b_z.data[:] = 1e6
    x = Tensor(np.array([[0.01, -0.02]]))
    h0 = Tensor(np.zeros((1, 2)))
    assert np.array_equal(gru_step(x, h0, p).data, np.zeros((1, 2)))
    p.W_h.data[:] = np.eye(2)
    np.testing.assert_allclose(gru_step(x, h0, p).data, np.tanh(x.data), rtol=0, atol=1e-15)


def test_gru_matches_scalar_oracle():
    W = {"z": [[0.5, -0.3], [0.2, 0.1]], "r": [[-0.4, 0.6], [0.3, -0.2]], "h": [[0.7, 0.1], [-0.5, 0.4]]}
    U = {"z": [[0.1, 0.2], [-0.3, 0.4]], "r": [[0.5, -0.1], [0.2, 0.3]], "h": [[-0.6, 0.2], [0.1, 0.8]]}
    b = {"z": [0.05, -0.1], "r": [0.2, 0.0], "h": [-0.15, 0.25]}
    x, h = [1.0, 0.0], [0.5, -0.5]
    expected = scalar_gru(x, h, W, U, b)
    got = gru_step(Tensor([x]), Tensor([h]), params_from(W, U, b)).data[0]
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_gru_dimension_errors():
    p = GruParams.zeros(3, 2)
    with pytest.raises(DimensionError):
        gru_step(Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 2))), p)
    with pytest.raises(DimensionError):
        gru_step(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 3))), p)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_gru_output_bounded(seed):
    rng = np.random.default_rng(seed)
    p = GruParams.init(3, 4, rng, scale=2.0)
    h_prev = rng.normal(scale=2.0, size=(2, 4))
    h = gru_step(Tensor(rng.normal(size=(2, 3))), Tensor(h_prev), p).data
    assert np.all(h >= np.minimum(h_prev, -1.0) - 1e-12)
    assert np.all(h <= np.maximum(h_prev, 1.0) + 1e-12)


def test_run_sequence_single_step_and_full_mask():
    rng = np.random.default_rng(0)
    p = GruParams.init(3, 2, rng, scale=0.5)
    xs = Tensor(rng.normal(size=(2, 1, 3)))
    h0 = Tensor(rng.normal(size=(2, 2)))
    states, final = run_sequence(xs, h0, np.ones((2, 1)), p)
    step = gru_step(T.select(xs, 0, axis=1), h0, p)
    assert np.array_equal(final.data, step.data) and np.array_equal(states.data[:, 0], step.data)
    _, masked = run_sequence(Tensor(rng.normal(size=(2, 4, 3))), h0, np.zeros((2, 4)), p)
    assert np.array_equal(masked.data, h0.data)


def test_run_sequence_padding_invariance():
    rng = np.random.default_rng(1)
    p = GruParams.init(3, 4, rng, scale=0.5)
    seqs = rng.normal(size=(2, 3, 3))
    mask = np.array([[1, 1, 1], [1, 0, 0]], dtype=float)
    h0 = Tensor(np.zeros((2, 4)))
    _, final = run_sequence(Tensor(seqs), h0, mask, p)
    _, short = run_sequence(Tensor(seqs[1:2, :1]), Tensor(np.zeros((1, 4))), np.ones((1, 1)), p)
    np.testing.assert_allclose(final.data[1], short.data[0], rtol=0, atol=1e-14)
    # extra masked tail positions in the same batch change nothing, bitwise
    longer = np.concatenate([seqs, rng.normal(size=(2, 2, 3))], axis=1)
    _, final_long = run_sequence(Tensor(longer), h0, np.concatenate([mask, np.zeros((2, 2))], axis=1), p)
    assert np.array_equal(final_long.data, final.data)


def test_bigru_symmetry_and_single_token():
    rng = np.random.default_rng(2)
    p = GruParams.init(3, 4, rng, scale=0.5)
    proj = Tensor(rng.normal(size=(8, 4)))
    a, b = rng.normal(size=3), rng.normal(size=3)
    xs = Tensor(np.stack([a, b, a])[None])
    mask = np.ones((1, 3))
    _, fwd = run_sequence(xs, Tensor(np.zeros((1, 4))), mask, p)
    _, bwd = run_sequence(xs, Tensor(np.zeros((1, 4))), mask, p, reverse=True)
    assert np.array_equal(fwd.data, bwd.data)
    one = Tensor(a[None, None])
    states, final = bigru_encode(one, np.ones((1, 1)), p, p, proj)
    s = gru_step(Tensor(a[None]), Tensor(np.zeros((1, 4))), p).data
    expected = np.concatenate([s, s], axis=1) @ proj.data
    np.testing.assert_allclose(states.data[:, 0], expected, atol=1e-15)
    np.testing.assert_allclose(final.data, expected, atol=1e-15)


def test_bigru_gradient():
    rng = np.random.default_rng(3)
    pf, pb = GruParams.init(3, 4, rng, scale=0.5), GruParams.init(3, 4, rng, scale=0.5)
    proj = Tensor(rng.uniform(-0.5, 0.5, size=(8, 4)), requires_grad=True)
    xs = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    w = Tensor(rng.normal(size=(2, 3, 4)))
    v = Tensor(rng.normal(size=(2, 4)))

    def f():
        states, final = bigru_encode(xs, mask, pf, pb, proj)
        return T.sum(T.mul(states, w)) + T.sum(T.mul(final, v))

    named = {"xs": xs, "proj": proj, **pf.named("f"), **pb.named("b")}
    assert max(check_gradients(f, named).values()) <= 1e-4


def _attn(hid, rng):
    return AttentionParams(Tensor(rng.normal(size=(hid, hid))), Tensor(rng.normal(size=(2 * hid, hid))))


def test_attention_single_key():
    rng = np.random.default_rng(4)
    ap = _attn(3, rng)
    keys = Tensor(rng.normal(size=(1, 1, 3)))
    q = Tensor(rng.normal(size=(1, 3)))
    attn_h, weights = luong_attend(q, keys, np.ones((1, 1)), ap)
    assert weights.data.tolist() == [[1.0]]
    expected = np.tanh(np.concatenate([keys.data[:, 0], q.data], axis=1) @ ap.W_c.data)
    np.testing.assert_allclose(attn_h.data, expected, atol=1e-15)


def test_attention_zero_score_is_uniform_over_unmasked():
    rng = np.random.default_rng(5)
    ap = _attn(3, rng)
    ap.W_a.data[:] = 0.0
    mask = np.array([[1, 1, 0, 1]], dtype=float)
    _, w = luong_attend(Tensor(rng.normal(size=(1, 3))), Tensor(rng.normal(size=(1, 4, 3))), mask, ap)
    np.testing.assert_allclose(w.data, [[1 / 3, 1 / 3, 0.0, 1 / 3]], atol=1e-15)
    assert w.data[0, 2] == 0.0


def test_attention_closed_form_weights():
    # score_s = q W_a k_s with q = [1, 0], W_a = I: keys chosen so score_2 - score_1 = ln 3
    ap = AttentionParams(Tensor(np.eye(2)), Tensor(np.zeros((4, 2))))
    keys = Tensor(np.array([[[0.2, 5.0], [0.2 + math.log(3), -1.0]]]))
    _, w = luong_attend(Tensor([[1.0, 0.0]]), keys, np.ones((1, 2)), ap)
    np.testing.assert_allclose(w.data, [[0.25, 0.75]], atol=1e-12)


def test_attention_all_masked_is_contract_error():
    rng = np.random.default_rng(6)
    with pytest.raises(ContractError):
        luong_attend(Tensor(np.zeros((1, 3))), Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2)), _attn(3, rng))


def test_attention_gradient():
    rng = np.random.default_rng(7)
    ap = AttentionParams(Tensor(rng.normal(size=(3, 3)), requires_grad=True), Tensor(rng.normal(size=(6, 3)), requires_grad=True))
    q = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    keys = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True)
    mask = np.array([[1, 1, 1, 0], [1, 0, 1, 1]], dtype=float)
    w = Tensor(rng.normal(size=(2, 3)))
    f = lambda: T.sum(T.mul(luong_attend(q, keys, mask, ap)[0], w))  # noqa: E731
    assert max(check_gradients(f, {"q": q, "keys": keys, **ap.named("a")}).values()) <= 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_attention_weights_are_distribution(seed):
    rng = np.random.default_rng(seed)
    mask = rng.random((3, 5)) < 0.6
    mask[np.arange(3), rng.integers(0, 5, 3)] = True
    _, w = luong_attend(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(3, 5, 4))), mask, _attn(4, rng))
    assert np.all(w.data >= 0) and np.all(w.data[~mask] == 0.0)
    assert np.all(np.abs(w.data.sum(axis=1) - 1) <= 1e-12)
