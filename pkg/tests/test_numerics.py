"""Oracle tests for the tape-based autodiff core.

Every primitive is checked against an independent implementation (naive loops
or frozen high-precision literals) before its gradient is trusted, and every
differentiable primitive passes a central-finite-difference check below 1e-6.
"""

import numpy as np
import pytest

from hgctr.errors import ContractError, ShapeError
from hgctr.numerics import (
    MASK_LOGIT,
    SIGMOID_CEIL,
    SIGMOID_FLOOR,
    Tape,
    grad_check,
    softmax_rows_value,
    stable_sigmoid,
)

RNG = np.random.default_rng(20240814)
GRAD_TOL = 1e-6


def loop_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


# --------------------------------------------------------------- value oracles


def test_matmul_matches_triple_loop_oracle():
    a = RNG.standard_normal((5, 7))
    b = RNG.standard_normal((7, 4))
    tape = Tape()
    out = tape.matmul(tape.const(a), tape.const(b))
    assert np.allclose(out.value, loop_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_associativity():
    a = RNG.standard_normal((6, 5))
    b = RNG.standard_normal((5, 8))
    c = RNG.standard_normal((8, 3))
    tape = Tape()
    ta, tb, tc = tape.const(a), tape.const(b), tape.const(c)
    left = tape.matmul(tape.matmul(ta, tb), tc).value
    right = tape.matmul(ta, tape.matmul(tb, tc)).value
    assert np.abs(left - right).max() < 1e-10


def test_sigmoid_matches_high_precision_literals():
    # frozen from a 60-digit computation of 1/(1+e^-x)
    cases = {0.5: 0.6224593312018546,
             -3.25: 0.03732688734412946,
             17.0: 0.9999999586006245}
    xs = np.array([list(cases)])
    got = stable_sigmoid(xs)
    for v, expect in zip(got.ravel(), cases.values()):
        assert v == pytest.approx(expect, abs=1e-15)


def test_sigmoid_extremes_stay_inside_open_interval():
    x = np.array([[-1e6, -800.0, 0.0, 800.0, 1e6]])
    s = stable_sigmoid(x)
    assert np.isfinite(s).all()
    assert (s >= SIGMOID_FLOOR).all() and (s <= SIGMOID_CEIL).all()
    assert s[0, -1] < 1.0 and s[0, 0] > 0.0


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = RNG.standard_normal((9, 13)) * 8
    y = softmax_rows_value(x)
    assert np.abs(y.sum(axis=1) - 1.0).max() < 1e-12
    shifted = softmax_rows_value(x + 123.456)
    assert np.abs(y - shifted).max() < 1e-12
    big = softmax_rows_value(np.array([[1e4, 1e4 + 2.0]]))
    assert np.isfinite(big).all()


def test_logsumexp_matches_frozen_literal_and_is_stable():
    tape = Tape()
    out = tape.logsumexp_rows(tape.const(np.array([[1.0, 2.0, 3.0]])))
    assert out.value[0, 0] == pytest.approx(3.40760596444438, abs=1e-14)
    huge = tape.logsumexp_rows(tape.const(np.array([[1e4, 1e4 + 1]]))).value
    assert np.isfinite(huge).all()


def test_bce_with_logits_matches_frozen_literal():
    tape = Tape()
    loss = tape.bce_with_logits(
        tape.param(np.array([[1.5], [-0.75]])),
        tape.const(np.array([[1.0], [0.0]])))
    assert loss.value[0, 0] == pytest.approx(0.29414214204882616, abs=1e-15)


def test_bce_with_logits_finite_at_extreme_logits():
    tape = Tape()
    loss = tape.bce_with_logits(
        tape.param(np.array([[1e4], [-1e4]])),
        tape.const(np.array([[0.0], [1.0]])))
    assert np.isfinite(loss.value).all()
    tape.backward(loss)


def test_outer_matches_nested_loop():
    u = RNG.standard_normal(4)
    v = RNG.standard_normal(6)
    tape = Tape()
    out = tape.outer(tape.const(u), tape.const(v.reshape(-1, 1)))
    expect = np.array([[a * b for b in v] for a in u])
    assert np.array_equal(out.value, expect)


def test_row_outer_matches_per_row_loop():
    a = RNG.standard_normal((5, 3))
    b = RNG.standard_normal((5, 4))
    tape = Tape()
    out = tape.row_outer(tape.const(a), tape.const(b)).value
    for i in range(5):
        assert np.array_equal(out[i], np.outer(a[i], b[i]).ravel())


def test_rows_and_scatter_rows_are_inverse_gathers():
    x = RNG.standard_normal((7, 3))
    idx = np.array([2, 2, 5, 0])
    tape = Tape()
    g = tape.rows(tape.const(x), idx)
    assert np.array_equal(g.value, x[idx])
    s = tape.scatter_rows(tape.const(x[idx]), idx, 7)
    expect = np.zeros((7, 3))
    np.add.at(expect, idx, x[idx])
    assert np.array_equal(s.value, expect)


def test_layer_norm_matches_naive_per_row():
    x = RNG.standard_normal((6, 5)) * 3 + 1
    gain = RNG.standard_normal((1, 5))
    bias = RNG.standard_normal((1, 5))
    tape = Tape()
    out = tape.layer_norm(tape.const(x), tape.const(gain), tape.const(bias)).value
    for i in range(6):
        mu = x[i].mean()
        sd = np.sqrt(((x[i] - mu) ** 2).mean() + 1e-6)
        assert np.abs(out[i] - ((x[i] - mu) / sd * gain[0] + bias[0])).max() < 1e-12


def test_attention_masked_keys_get_huge_negative_logit():
    d, l = 4, 3
    q = RNG.standard_normal((l, d))
    mask = np.array([True, True, False])
    tape = Tape()
    out = tape.attention(tape.const(q), tape.const(q), tape.const(q),
                         num_heads=1, block=l, key_mask=mask)
    # masked key contributes softmax(MASK_LOGIT + finite) ~ 0 weight
    scores = (q @ q.T) / np.sqrt(d) + np.where(mask, 0.0, MASK_LOGIT)
    expect = softmax_rows_value(scores) @ q
    assert np.abs(out.value - expect).max() < 1e-12
    w_masked = softmax_rows_value(scores)[:, ~mask]
    assert (w_masked < 1e-30).all()


def test_attention_rejects_fully_masked_block():
    q = RNG.standard_normal((2, 4))
    tape = Tape()
    with pytest.raises(ContractError):
        tape.attention(tape.const(q), tape.const(q), tape.const(q),
                       num_heads=1, block=2, key_mask=np.array([False, False]))


def test_propagate_applies_operator_both_ways():
    class SymOp:
        def __init__(self, m):
            self.m, self.dim = m, m.shape[0]

        def apply(self, x):
            return self.m @ x

    s = RNG.standard_normal((5, 5))
    op = SymOp(s + s.T)
    x = RNG.standard_normal((5, 2))
    tape = Tape()
    xt = tape.param(x)
    out = tape.propagate(op, xt)
    assert np.array_equal(out.value, op.m @ x)
    loss = tape.sum_all(tape.mul(out, out))
    tape.backward(loss)
    assert np.abs(xt.grad - op.m.T @ (2 * out.value)).max() < 1e-12


# ------------------------------------------------------------------ gradients


def check(build, params, tol=GRAD_TOL, eps=1e-5):
    err = grad_check(build, params, eps=eps)
    assert err < tol, f"max relative gradient error {err}"


def test_grad_matmul_chain():
    check(lambda t, p: t.sum_all(t.matmul(p["a"], p["b"])),
          {"a": RNG.standard_normal((4, 6)), "b": RNG.standard_normal((6, 3))})


def test_grad_elementwise_family():
    a = RNG.standard_normal((4, 5))
    b = RNG.standard_normal((4, 5))
    row = RNG.standard_normal((1, 5))
    col = RNG.standard_normal((4, 1))
    check(lambda t, p: t.sum_all(t.mul(t.add(p["a"], p["row"]),
                                       t.sub(p["b"], p["col"]))),
          {"a": a, "b": b, "row": row, "col": col})
    check(lambda t, p: t.sum_all(t.scale(t.mul(p["a"], p["a"]), -2.5)), {"a": a})


def test_grad_relu_away_from_kink():
    a = RNG.standard_normal((5, 5))
    a = np.where(np.abs(a) < 0.1, a + 0.3, a)
    check(lambda t, p: t.sum_all(t.relu(p["a"])), {"a": a})


def test_grad_sigmoid_log_softmax():
    a = RNG.standard_normal((3, 4))
    check(lambda t, p: t.sum_all(t.sigmoid(p["a"])), {"a": a})
    check(lambda t, p: t.sum_all(t.log(t.sigmoid(p["a"]))), {"a": a})
    w = RNG.standard_normal((3, 4))
    check(lambda t, p: t.sum_all(t.mul(t.softmax_rows(p["a"]), t.const(w))),
          {"a": a})


def test_grad_reductions_and_structure():
    a = RNG.standard_normal((4, 3))
    w = RNG.standard_normal((4, 1))
    check(lambda t, p: t.mean_all(t.mul(t.row_sum(p["a"]), t.const(w))), {"a": a})
    idx = np.array([1, 3, 1, 0])
    check(lambda t, p: t.sum_all(t.mul(t.rows(p["a"], idx), t.rows(p["a"], idx))),
          {"a": a})
    check(lambda t, p: t.sum_all(t.mul(t.scatter_rows(p["a"], idx, 6),
                                       t.scatter_rows(p["a"], idx, 6))),
          {"a": a})
    check(lambda t, p: t.sum_all(t.transpose(t.mul(p["a"], p["a"]))), {"a": a})
    b = RNG.standard_normal((4, 2))
    check(lambda t, p: t.sum_all(t.mul(t.concat_cols([p["a"], p["b"]]),
                                       t.concat_cols([p["a"], p["b"]]))),
          {"a": a, "b": b})


def test_grad_outer_products():
    check(lambda t, p: t.sum_all(t.mul(t.outer(p["u"], p["v"]),
                                       t.outer(p["u"], p["v"]))),
          {"u": RNG.standard_normal((1, 4)), "v": RNG.standard_normal((1, 3))})
    check(lambda t, p: t.sum_all(t.mul(t.row_outer(p["a"], p["b"]),
                                       t.row_outer(p["a"], p["b"]))),
          {"a": RNG.standard_normal((3, 4)), "b": RNG.standard_normal((3, 2))})


def test_grad_logsumexp_and_losses():
    a = RNG.standard_normal((4, 5))
    check(lambda t, p: t.sum_all(t.logsumexp_rows(p["a"])), {"a": a})
    z = RNG.standard_normal((6, 1))
    y = (RNG.random((6, 1)) < 0.5).astype(float)
    check(lambda t, p: t.bce_with_logits(p["z"], t.const(y)), {"z": z})
    check(lambda t, p: t.l2_penalty([p["a"], p["z"]], 0.37), {"a": a, "z": z})


def test_grad_layer_norm():
    check(lambda t, p: t.sum_all(t.mul(
        t.layer_norm(p["x"], p["g"], p["b"]),
        t.layer_norm(p["x"], p["g"], p["b"]))),
        {"x": RNG.standard_normal((4, 6)),
         "g": RNG.standard_normal((1, 6)) + 1.5,
         "b": RNG.standard_normal((1, 6))}, tol=1e-5)


def test_grad_attention_fused():
    l, h, dh = 4, 2, 3
    mask = np.array([True, True, True, False, True, True, False, True])
    params = {k: RNG.standard_normal((2 * l, h * dh)) * 0.7
              for k in ("q", "k", "v")}
    check(lambda t, p: t.sum_all(t.attention(p["q"], p["k"], p["v"],
                                             num_heads=h, block=l,
                                             key_mask=mask)),
          params, tol=1e-5)


def test_grad_propagate():
    m = RNG.standard_normal((5, 5))
    sym = m + m.T

    class SymOp:
        dim = 5

        @staticmethod
        def apply(x):
            return sym @ x

    check(lambda t, p: t.sum_all(t.mul(t.propagate(SymOp, p["x"]),
                                       t.propagate(SymOp, p["x"]))),
          {"x": RNG.standard_normal((5, 3))})


# --------------------------------------------------------------- housekeeping


def test_backward_is_bit_deterministic():
    a = RNG.standard_normal((8, 8))
    b = RNG.standard_normal((8, 8))

    def run():
        tape = Tape()
        ta, tb = tape.param(a), tape.param(b)
        loss = tape.sum_all(tape.sigmoid(tape.matmul(tape.relu(ta), tb)))
        tape.backward(loss)
        return ta.grad.copy(), tb.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])


def test_values_stay_finite_through_deep_chain():
    x = RNG.standard_normal((6, 6)) * 5
    tape = Tape()
    t = tape.param(x)
    for _ in range(20):
        t = tape.softmax_rows(tape.matmul(t, tape.const(np.eye(6) * 3)))
    assert np.isfinite(t.value).all()


def test_shape_errors():
    tape = Tape()
    a = tape.const(np.ones((2, 3)))
    b = tape.const(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        tape.matmul(a, b)
    with pytest.raises(ShapeError):
        tape.add(a, tape.const(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        tape.rows(a, np.array([0, 5]))
    with pytest.raises(ShapeError):
        tape.backward(a)
    with pytest.raises(ShapeError):
        tape.outer(a, a)


def test_contract_errors():
    tape = Tape()
    with pytest.raises(ContractError):
        tape.param(np.array([[np.nan]]))
    with pytest.raises(ContractError):
        tape.log(tape.const(np.array([[0.0]])))
    loss = tape.sum_all(tape.param(np.ones((2, 2))))
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)
    with pytest.raises(ContractError):
        grad_check(lambda t, p: t.relu(p["a"]), {"a": np.ones((2, 2))})


def test_elementwise_dispatcher_covers_all_kinds():
    tape = Tape()
    a = tape.param(np.array([[0.5, -1.0]]))
    b = tape.const(np.array([[2.0, 3.0]]))
    assert np.array_equal(tape.elementwise("relu", a).value, [[0.5, 0.0]])
    assert np.array_equal(tape.elementwise("add", a, b).value, [[2.5, 2.0]])
    assert np.array_equal(tape.elementwise("mul", a, b).value, [[1.0, -3.0]])
    assert np.array_equal(tape.elementwise("sub", a, b).value, [[-1.5, -4.0]])
    assert np.array_equal(tape.elementwise("scale", a, factor=2.0).value,
                          [[1.0, -2.0]])
    assert tape.elementwise("sigmoid", a).value[0, 0] == pytest.approx(
        0.6224593312018546, abs=1e-15)
    with pytest.raises(ContractError):
        tape.elementwise("pow", a)


def test_grad_accumulates_over_reused_tensor():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    tape = Tape()
    ta = tape.param(a)
    loss = tape.sum_all(tape.add(tape.mul(ta, ta), ta))  # d/da = 2a + 1
    tape.backward(loss)
    assert np.array_equal(ta.grad, 2 * a + 1)
