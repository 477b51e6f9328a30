import os
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctaimpute import diffcore as dc
from helpers import numeric_grad, rel_err, tape_grads


def test_matmul_selects_column():
    out = dc.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(out.value, [1.0, 3.0])


def test_mul_by_ones_is_identity():
    a = np.random.default_rng(0).normal(size=(3, 4))
    np.testing.assert_array_equal(dc.mul(a, np.ones_like(a)).value, a)


def test_tanh_of_zero():
    np.testing.assert_array_equal(dc.tanh(np.zeros((2, 3))).value, np.zeros((2, 3)))


@pytest.mark.parametrize("op, a, b", [
    (dc.matmul, np.zeros((2, 3)), np.zeros((2, 3))),
    (dc.add, np.zeros((2, 3)), np.zeros((3, 2))),
    (dc.mul, np.zeros(4), np.zeros(5)),
])
def test_shape_mismatch_names_op(op, a, b):
    with pytest.raises(dc.ShapeError) as err:
        op(a, b)
    assert op.__name__ in str(err.value)
    assert "(2, 3)" in str(err.value) or "(4,)" in str(err.value)


def test_grad_of_weighted_sum_is_input():
    x = np.array([1.0, -2.0, 3.5])
    w = dc.parameter(np.zeros(3), "w")
    grads = tape_grads(lambda: dc.sum_(dc.mul(w, x)), {"w": w})
    np.testing.assert_array_equal(grads["w"], x)


def test_grad_of_tanh_at_zero_is_one():
    w = dc.parameter(np.zeros((2, 2)), "w")
    grads = tape_grads(lambda: dc.sum_(dc.tanh(w)), {"w": w})
    np.testing.assert_array_equal(grads["w"], np.ones((2, 2)))


def test_backward_rejects_non_scalar():
    w = dc.parameter(np.ones(3), "w")
    with dc.Tape() as tape:
        y = dc.tanh(w)
        with pytest.raises(ValueError):
            dc.backward(y, tape, {"w": w})


def test_backward_clears_tape():
    w = dc.parameter(np.ones(3), "w")
    with dc.Tape() as tape:
        loss = dc.sum_(dc.square(w))
        assert len(tape) > 0
        dc.backward(loss, tape, {"w": w})
        assert len(tape) == 0


def test_untouched_parameter_gets_zero_gradient():
    w = dc.parameter(np.ones(3), "w")
    v = dc.parameter(np.ones(2), "v")
    grads = tape_grads(lambda: dc.sum_(w), {"w": w, "v": v})
    np.testing.assert_array_equal(grads["v"], np.zeros(2))


def _mlp_params(rng):
    shapes = [(4, 6), (6,), (6, 5), (5,), (5, 2), (2,)]
    return OrderedDict((f"p{i}", dc.parameter(rng.normal(size=s) * 0.7, f"p{i}"))
                       for i, s in enumerate(shapes))


def _mlp_loss(params, x, y):
    p = list(params.values())
    h = dc.silu(dc.add(dc.matmul(x, p[0]), p[1]))
    h = dc.tanh(dc.add(dc.matmul(h, p[2]), p[3]))
    out = dc.add(dc.matmul(h, p[4]), p[5])
    return dc.mean(dc.square(dc.sub(out, y)))


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    params = _mlp_params(rng)
    x = rng.normal(size=(7, 4))
    y = rng.normal(size=(7, 2))
    grads = tape_grads(lambda: _mlp_loss(params, x, y), params)
    for name, p in params.items():
        fd = numeric_grad(lambda: float(_mlp_loss(params, x, y).value), p.value)
        assert rel_err(grads[name], fd) < 1e-4, name


UNARY = {
    "tanh": dc.tanh, "sigmoid": dc.sigmoid, "silu": dc.silu, "elu": dc.elu,
    "exp": dc.exp, "square": dc.square, "abs": dc.abs_,
    "sqrt": lambda a: dc.sqrt(dc.add(dc.square(a), 0.5)),
    "sum_axis": lambda a: dc.sum_(a, axis=1),
    "mean": lambda a: dc.mean(a, axis=0, keepdims=True),
    "scale": lambda a: dc.scale(a, -2.5),
    "reshape": lambda a: dc.reshape(a, (-1,)),
    "slice": lambda a: a[1:, ::2],
    "concat": lambda a: dc.concat([a, dc.square(a)], axis=1),
    "stack": lambda a: dc.stack([a, dc.tanh(a)], axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_primitive_gradients(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(3, 4))
    x = np.where(np.abs(x) < 1e-3, 0.5, x)  # keep |x| and elu away from kinks
    p = dc.parameter(x, "x")
    probe = rng.normal(size=UNARY[name](p).value.shape)

    def loss():
        return dc.sum_(dc.mul(UNARY[name](p), probe))

    grads = tape_grads(loss, {"x": p})
    fd = numeric_grad(lambda: float(loss().value), p.value)
    assert rel_err(grads["x"], fd) < 1e-4


@pytest.mark.parametrize("op", [dc.add, dc.sub, dc.mul, dc.matmul])
def test_binary_gradients_with_broadcast(op):
    rng = np.random.default_rng(11)
    if op is dc.matmul:
        a0, b0 = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    else:
        a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4,))
    a, b = dc.parameter(a0, "a"), dc.parameter(b0, "b")
    probe = rng.normal(size=op(a0, b0).value.shape)

    def loss():
        return dc.sum_(dc.mul(op(a, b), probe))

    grads = tape_grads(loss, {"a": a, "b": b})
    for name, p in (("a", a), ("b", b)):
        fd = numeric_grad(lambda: float(loss().value), p.value)
        assert rel_err(grads[name], fd) < 1e-4


def test_adjoint_linearity():
    rng = np.random.default_rng(5)
    w = dc.parameter(rng.normal(size=(3, 3)), "w")
    x = rng.normal(size=(3,))
    f = lambda: dc.sum_(dc.tanh(dc.matmul(w, x)))  # noqa: E731
    g = lambda: dc.sum_(dc.exp(dc.scale(w, 0.3)))  # noqa: E731
    both = tape_grads(lambda: dc.add(f(), g()), {"w": w})["w"]
    separate = tape_grads(f, {"w": w})["w"] + tape_grads(g, {"w": w})["w"]
    np.testing.assert_allclose(both, separate, rtol=1e-13, atol=1e-15)


def test_replay_is_bit_identical():
    def run():
        params = _mlp_params(np.random.default_rng(9))
        rng = np.random.default_rng(10)
        x, y = rng.normal(size=(5, 4)), rng.normal(size=(5, 2))
        return tape_grads(lambda: _mlp_loss(params, x, y), params)

    a, b = run(), run()
    for k in a:
        assert np.array_equal(a[k], b[k])


def test_sqrt_gradient_at_zero_is_finite():
    w = dc.parameter(np.zeros(2), "w")
    grads = tape_grads(lambda: dc.sqrt(dc.sum_(dc.square(w))), {"w": w})
    assert np.all(np.isfinite(grads["w"]))


# -- optimizer -------------------------------------------------------------

def test_adam_zero_grad_keeps_params():
    p = {"w": dc.parameter(np.array([1.0, -2.0]), "w")}
    dc.adam_step(p, {"w": np.zeros(2)}, dc.OptimizerState())
    np.testing.assert_array_equal(p["w"].value, [1.0, -2.0])


def test_adam_first_step_moves_by_lr_times_sign():
    # After bias correction m_hat = g and v_hat = g^2, so the step is lr*g/(|g|+eps).
    g = np.array([0.3, -4.0, 1e-2])
    p = {"w": dc.parameter(np.zeros(3), "w")}
    state = dc.OptimizerState(lr=0.01)
    dc.adam_step(p, {"w": g}, state)
    expected = -0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["w"].value, expected, rtol=1e-12)
    np.testing.assert_allclose(p["w"].value, -0.01 * np.sign(g), rtol=1e-5)


def test_adam_second_moment_bounded_by_g_squared():
    g = np.array([2.0, -0.5])
    p = {"w": dc.parameter(np.zeros(2), "w")}
    state = dc.OptimizerState()
    dc.adam_step(p, {"w": g}, state)
    dc.adam_step(p, {"w": g}, state)
    v = state.v["w"]
    # v_2 = (1 - b2) * g^2 * (1 + b2)
    np.testing.assert_allclose(v, 0.001 * g**2 * 1.999, rtol=1e-12)
    assert np.all(v > 0) and np.all(v <= g**2)
    assert state.step == 2


def test_adam_nan_gradient_names_parameter():
    p = {"layer.w": dc.parameter(np.zeros(2), "layer.w")}
    with pytest.raises(FloatingPointError, match="layer.w"):
        dc.adam_step(p, {"layer.w": np.array([np.nan, 1.0])}, dc.OptimizerState())


# -- initialisation and checkpoints ----------------------------------------

def test_init_params_deterministic():
    a = dc.init_params((4, 5), 3, 42)
    b = dc.init_params((4, 5), 3, 42)
    np.testing.assert_array_equal(a, b)


def test_init_params_range_fan_in_one():
    x = dc.init_params((1000,), 1, 0)
    assert x.min() >= -1.0 and x.max() <= 1.0


def test_init_params_mean_near_zero():
    x = dc.init_params((10_000,), 4, 1)
    assert abs(x.mean()) < 0.02
    assert np.all(np.abs(x) <= 0.5)


def test_init_params_rejects_zero_fan_in():
    with pytest.raises(ValueError):
        dc.init_params((2,), 0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = OrderedDict([("a.w", rng.normal(size=(3, 2))), ("a.b", rng.normal(size=(2,))),
                          ("s", np.array(np.pi))])
    path = os.path.join(tmp_path, "ckpt.json")
    dc.save_checkpoint(path, params, {"seed": 3})
    loaded, config = dc.load_checkpoint(path)
    assert list(loaded) == list(params)
    for k in params:
        assert loaded[k].shape == params[k].shape
        assert np.array_equal(loaded[k], params[k])
    assert config == {"seed": 3}


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        dc.load_checkpoint(path)
