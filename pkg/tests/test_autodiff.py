import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ditbs import autodiff as ad
from ditbs.autodiff import Tape, Tensor, backward, grad_check, precision
from ditbs.model import Block, DiTConfig


def _grads(loss_fn, *params):
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    return [p.grad for p in params]


# ---------------------------------------------------------------------------
# forward examples


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 3.0]])
    out = ad.matmul(Tensor(np.eye(2)), Tensor(a))
    assert np.array_equal(out.data, a.astype(np.float32))


def test_softmax_examples():
    assert np.allclose(ad.softmax_masked(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    out = ad.softmax_masked(Tensor([1.0, 0.0]), np.array([False, True]))
    assert np.array_equal(out.data, np.array([1.0, 0.0], np.float32))
    # e / (e + 1)
    out = ad.softmax_masked(Tensor([1.0, 0.0]))
    assert np.allclose(out.data, [0.73106, 0.26894], atol=1e-5)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(ValueError, match="entirely masked"):
        ad.softmax_masked(Tensor([1.0, 2.0]), np.array([True, True]))


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as e:
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    msg = str(e.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 2)" in msg
    with pytest.raises(ad.ShapeError, match="mse"):
        ad.mse(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(2)))


def test_embed_lookup_rejects_bad_ids():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        ad.embed_lookup(table, [0, 4])
    with pytest.raises(TypeError):
        ad.embed_lookup(table, [0.5])


def test_default_is_32_bit_and_toggle():
    assert Tensor([1.0]).data.dtype == np.float32
    with precision(64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert Tensor([1.0]).data.dtype == np.float32
    with pytest.raises(ValueError):
        with precision(16):
            pass


# ---------------------------------------------------------------------------
# backward examples


def test_sum_of_squares_grad():
    x = Tensor([1.0, -2.0], requires_grad=True)
    (g,) = _grads(lambda: ad.sum_all(ad.mul(x, x)), x)
    assert np.array_equal(g, [2.0, -4.0])


def test_mse_at_zero_weight():
    # d/dW mean((W x - y)^2) at W = 0 is -2 y x^T / N
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal(3), rng.standard_normal(4)
    with precision(64):
        W = Tensor(np.zeros((4, 3)), requires_grad=True)
        (g,) = _grads(lambda: ad.mse(ad.reshape(ad.matmul(W, Tensor(x[:, None])), (4,)), Tensor(y)), W)
    assert np.allclose(g, -2 * np.outer(y, x) / 4, rtol=1e-12)


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ad.TapeError, match="scalar"):
        backward(tape, y)
    with Tape() as tape:
        loss = ad.sum_all(ad.mul(x, x))
    backward(tape, loss)
    with pytest.raises(ad.TapeError, match="consumed"):
        backward(tape, loss)


def test_frozen_leaves_untouched():
    w = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([3.0, 4.0])
    _grads(lambda: ad.sum_all(ad.mul(w, c)), w)
    assert c.grad is None and np.array_equal(w.grad, [3.0, 4.0])


def test_no_tape_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    y = ad.mul(x, x)
    assert y.is_leaf and not y.requires_grad


def test_backward_visits_each_node_once():
    # x used twice; its gradient is the sum over both paths, not more
    x = Tensor([3.0], requires_grad=True)
    (g,) = _grads(lambda: ad.sum_all(ad.add(ad.mul(x, x), ad.scale(x, 5.0))), x)
    assert np.allclose(g, [2 * 3.0 + 5.0])


# ---------------------------------------------------------------------------
# gradient checks


def test_grad_check_linear_mse():
    rng = np.random.default_rng(1)
    x, y = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))

    def build():
        W = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        b = Tensor(rng.standard_normal(2), requires_grad=True)
        return {"W": W, "b": b}, lambda: ad.mse(ad.add(ad.matmul(Tensor(x), W), b), Tensor(y))

    rep = grad_check(build, tolerance=1e-6)
    assert rep.passed, rep.errors


def test_grad_check_zero_params():
    rep = grad_check(lambda: ({}, lambda: ad.sum_all(Tensor([1.0]))))
    assert rep.errors == {} and rep.passed


def test_grad_check_reports_failures():
    # a deliberately wrong backward must show up in the report
    def build():
        w = Tensor([0.7, -0.3], requires_grad=True)

        def loss():
            y = ad._emit("bad", w.data ** 2, (w,), lambda g: (g * w.data,))  # missing factor 2
            return ad.sum_all(y)

        return {"w": w}, loss

    rep = grad_check(build)
    assert not rep.passed and "w" in rep.failures


def _op_builders(rng):
    """(name, builder) pairs; every builder exercises one op inside a weighted sum."""

    def wrap(params, f):
        out_shape = f().shape
        r = Tensor(rng.standard_normal(out_shape))
        return params, lambda: ad.sum_all(ad.mul(f(), r))

    def p(*shape, positive=False):
        v = rng.standard_normal(shape)
        return Tensor(np.abs(v) + 0.5 if positive else v, requires_grad=True)

    def b_add():
        a, b = p(2, 3, 4), p(4)
        return wrap({"a": a, "b": b}, lambda: ad.add(a, b))

    def b_sub():
        a, b = p(3, 4), p(3, 4)
        return wrap({"a": a, "b": b}, lambda: ad.sub(a, b))

    def b_mul():
        a, b = p(2, 3), p(3)
        return wrap({"a": a, "b": b}, lambda: ad.mul(a, b))

    def b_scale():
        a = p(3, 2)
        return wrap({"a": a}, lambda: ad.scale(a, -1.7))

    def b_matmul():
        a, b = p(2, 3, 4), p(4, 5)
        return wrap({"a": a, "b": b}, lambda: ad.matmul(a, b))

    def b_batched_matmul():
        a, b = p(2, 2, 3, 4), p(2, 2, 4, 3)
        return wrap({"a": a, "b": b}, lambda: ad.matmul(a, b))

    def b_layer_norm():
        x, g, b = p(3, 6), p(6), p(6)
        return wrap({"x": x, "g": g, "b": b}, lambda: ad.layer_norm(x, g, b))

    def b_gelu():
        x = p(4, 3)
        return wrap({"x": x}, lambda: ad.gelu(x))

    def b_softmax():
        x = p(2, 3, 5)
        mask = np.zeros((3, 5), bool)
        mask[1:, :2] = True
        return wrap({"x": x}, lambda: ad.softmax_masked(x, mask))

    def b_embed():
        table = p(6, 3)
        ids = np.array([[0, 2, 2], [5, 1, 0]])
        return wrap({"table": table}, lambda: ad.embed_lookup(table, ids))

    def b_reshape_transpose():
        x = p(2, 3, 4)
        return wrap({"x": x}, lambda: ad.transpose(ad.reshape(x, (6, 4)), (1, 0)))

    def b_expand():
        x = p(2, 1, 3)
        return wrap({"x": x}, lambda: ad.expand(x, (2, 4, 3)))

    def b_concat_slice():
        a, b = p(2, 3), p(2, 2)
        return wrap({"a": a, "b": b}, lambda: ad.slice_axis(ad.concat([a, b], 1), 1, 1, 4))

    def b_mse():
        a, b = p(3, 4), p(3, 4)
        return {"a": a, "b": b}, lambda: ad.mse(a, b)

    return [(f.__name__[2:], f) for f in (b_add, b_sub, b_mul, b_scale, b_matmul, b_batched_matmul,
                                          b_layer_norm, b_gelu, b_softmax, b_embed,
                                          b_reshape_transpose, b_expand, b_concat_slice, b_mse)]


OP_NAMES = [name for name, _ in _op_builders(np.random.default_rng(0))]


@pytest.mark.parametrize("op", OP_NAMES)
def test_every_op_matches_finite_differences(op):
    worst = 0.0
    for seed in range(20):
        with precision(64):
            rng = np.random.default_rng([seed, 99])
            builder = dict(_op_builders(rng))[op]
            rep = grad_check(builder, tolerance=1e-4)
        assert rep.passed, (op, seed, rep.failures)
        worst = max(worst, rep.max_error)
    assert worst < 1e-4


def test_grad_check_block_composition():
    cfg = DiTConfig(depth=3, hidden=8, heads=2, patch=2, img_size=4, n_text=2)

    def build():
        rng = np.random.default_rng(5)
        blk = Block(cfg, rng)
        x = Tensor(rng.standard_normal((1, 6, 8)))
        r = Tensor(rng.standard_normal((1, 6, 8)))
        params = dict(blk.params())
        for q in params.values():
            q.requires_grad = True
        return params, lambda: ad.sum_all(ad.mul(blk(x), r))

    with precision(64):
        rep = grad_check(build)
    assert rep.passed, rep.failures


@given(st.floats(-5, 5).filter(lambda a: abs(a) > 1e-3), st.integers(0, 2**16))
def test_backward_is_linear_in_loss(a, seed):
    rng = np.random.default_rng(seed)
    with precision(64):
        W = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        x = Tensor(rng.standard_normal((2, 3)))
        f = lambda: ad.sum_all(ad.gelu(ad.matmul(x, W)))  # noqa: E731
        (g1,) = _grads(f, W)
        (ga,) = _grads(lambda: ad.scale(f(), a), W)
    assert np.allclose(ga, a * g1, rtol=1e-12, atol=1e-14)


def test_forward_bit_identical_across_runs():
    def run():
        rng = np.random.default_rng(7)
        cfg = DiTConfig(depth=3, hidden=16, heads=4, patch=2, img_size=8, n_text=3)
        blk = Block(cfg, rng)
        x = Tensor(rng.standard_normal((2, 19, 16)))
        return blk(x).data

    assert run().tobytes() == run().tobytes()


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
def test_finite_inputs_give_finite_outputs(n, k, m):
    rng = np.random.default_rng(n * 100 + k * 10 + m)
    x = Tensor(rng.standard_normal((n, k)) * 30)
    out = ad.gelu(ad.layer_norm(ad.matmul(x, Tensor(rng.standard_normal((k, m)))),
                                Tensor(np.ones(m)), Tensor(np.zeros(m))))
    assert np.all(np.isfinite(out.data))
    assert np.all(np.isfinite(ad.softmax_masked(x).data))


def test_flop_counter_matmul():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones((4, 5)))
    with ad.count_flops() as c:
        with Tape() as tape:
            y = ad.sum_all(ad.matmul(a, b))
        backward(tape, y)
    fwd = 2 * 3 * 4 * 5
    # forward plus one backward product (only a needs a gradient)
    assert c.total == fwd + fwd
    assert math.isclose(a.grad.sum(), 3 * 4 * 5)
