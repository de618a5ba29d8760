import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from conattsd import autodiff as ad
from conattsd.autodiff import Tensor, finite_difference_check, relative_error
from conattsd.errors import ContractError, NumericError, ShapeError

finite = st.floats(-30, 30, allow_nan=False, width=64)


def arrays(shape):
    return hnp.arrays(np.float64, shape, elements=finite)


# ------------------------------------------------------------- tensor basics
def test_tensor_copies_and_seals_input():
    src = np.array([1.0, 2.0])
    t = Tensor(src)
    src[0] = 99.0
    assert t.data[0] == 1.0
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_verification_mode_rejects_non_finite():
    Tensor([np.inf])  # allowed outside verification
    with ad.verification(), pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    with ad.verification(), np.errstate(divide="ignore"), pytest.raises(NumericError):
        ad.log(Tensor([0.0]))


def test_precision_switch():
    with ad.precision(32):
        assert Tensor([1.0]).dtype == np.float32
        assert (Tensor([1.0]) * 2.0).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


# ------------------------------------------------------------------ matmul
def test_matmul_identity_and_annihilation():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(a, Tensor(np.eye(2))).data, a.data)
    z = ad.matmul(Tensor([[1.0, 0.0], [0.0, 0.0]]), Tensor([[0.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(z.data, np.zeros((2, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = {"a": Tensor(rng.standard_normal((3, 3))), "b": Tensor(rng.standard_normal((3, 3)))}
    err = finite_difference_check(lambda p: ad.sum(ad.matmul(p["a"], p["b"])), params, 1e-5)
    assert err < 1e-6


# ----------------------------------------------------------------- softmax
def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, 1.0])).data, [0.26894, 0.73106], atol=5e-6)
    big = ad.softmax(Tensor([1000.0, 1000.5])).data
    assert np.isfinite(big).all() and abs(big.sum() - 1) < 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays((3, 5)), st.integers(0, 1))
def test_softmax_positive_and_normalized(x, axis):
    s = ad.softmax(Tensor(x), axis=axis).data
    assert (s > 0).all()
    np.testing.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-6)


@settings(max_examples=200, deadline=None)
@given(arrays((4,)), st.floats(-50, 50))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(ad.softmax(Tensor(x + c)).data, ad.softmax(Tensor(x)).data, atol=1e-9, rtol=0)


def test_log_softmax_stable_for_large_logits():
    out = ad.log_softmax(Tensor([[20.0, -20.0], [1e4, 0.0]])).data
    assert np.isfinite(out).all()
    assert abs(out[0, 0]) < 1e-8


# ------------------------------------------------------------- elementwise
def test_elementwise_examples():
    assert ad.elementwise(Tensor([0.0]), "sigmoid").item() == 0.5
    np.testing.assert_array_equal(ad.elementwise(Tensor([1.0, 0.0]), "one_minus").data, [0.0, 1.0])
    np.testing.assert_array_equal(ad.elementwise(Tensor([-1.0, 2.0]), "relu").data, [0.0, 2.0])
    np.testing.assert_array_equal(ad.elementwise(Tensor([-1.0, 2.0]), "scale", 3).data, [-3.0, 6.0])
    with pytest.raises(ContractError):
        ad.elementwise(Tensor([1.0]), "cube")


def test_tanh_derivative_at_point_three():
    x = Tensor([0.3], requires_grad=True)
    g = ad.grad(ad.sum(ad.tanh(x)), {"x": x})["x"][0]
    fd = (math.tanh(0.3 + 1e-5) - math.tanh(0.3 - 1e-5)) / 2e-5
    assert relative_error(np.array([g]), np.array([fd])) < 1e-6
    assert abs(g - (1 - math.tanh(0.3) ** 2)) < 1e-12


def test_sigmoid_extreme_inputs_finite():
    with ad.verification():
        out = ad.sigmoid(Tensor([-800.0, 800.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


# ------------------------------------------------------ shape manipulation
def test_concat_examples():
    np.testing.assert_array_equal(ad.concat([Tensor([1.0, 2.0]), Tensor([3.0])], axis=0).data, [1, 2, 3])
    beta = ad.concat([Tensor(np.ones(150))] * 5, axis=-1)
    assert beta.shape == (750,)
    with pytest.raises(ShapeError):
        ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1)


@settings(max_examples=50, deadline=None)
@given(arrays((4, 6)), st.integers(1, 5))
def test_slice_concat_round_trip(x, cut):
    t = Tensor(x)
    back = ad.concat([ad.slice_(t, 1, 0, cut), ad.slice_(t, 1, cut, 6)], axis=1)
    np.testing.assert_array_equal(back.data, x)


def test_concat_routes_gradient_slices():
    a, b = Tensor([1.0, 2.0], requires_grad=True), Tensor([3.0], requires_grad=True)
    w = Tensor([10.0, 20.0, 30.0])
    g = ad.grad(ad.sum(ad.concat([a, b]) * w), {"a": a, "b": b})
    np.testing.assert_array_equal(g["a"], [10, 20])
    np.testing.assert_array_equal(g["b"], [30])


def test_broadcast_gradient_sums_back():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    g = ad.grad(ad.sum(a * b), {"a": a, "b": b})
    np.testing.assert_array_equal(g["b"], [3, 3, 3, 3])
    np.testing.assert_array_equal(g["a"], np.tile(np.arange(4.0), (3, 1)))


# ---------------------------------------------------------------- backward
def test_square_gradient():
    x = Tensor(3.0, requires_grad=True)
    assert ad.grad(x * x, {"x": x})["x"] == 6.0


def test_constant_function_gives_zero_gradient():
    x = Tensor(np.random.default_rng(1).standard_normal(5), requires_grad=True)
    g = ad.grad(ad.sum(ad.softmax(x)), {"x": x})["x"]
    assert np.abs(g).max() < 1e-15


def test_untouched_leaf_gets_zero_gradient():
    x, y = Tensor([1.0], requires_grad=True), Tensor([2.0, 3.0], requires_grad=True)
    g = ad.grad(ad.sum(x * 2.0), {"x": x, "y": y})
    np.testing.assert_array_equal(g["y"], [0.0, 0.0])


def test_non_scalar_loss_and_empty_tape_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ad.backward(x * 2.0)
    with pytest.raises(ContractError):
        ad.backward(Tensor(1.0, requires_grad=True))


def test_tape_is_topological_and_replay_is_bit_identical():
    rng = np.random.default_rng(2)
    w = Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    x = Tensor(rng.standard_normal((3, 4)))
    h = ad.tanh(ad.matmul(x, w))
    loss = ad.sum(ad.softmax(ad.matmul(h, w), axis=-1) * h)
    tape = ad.Tape(loss)
    position = {id(n): k for k, n in enumerate(tape.nodes)}
    assert len(position) == len(tape.nodes)  # each node recorded once
    for node in tape.nodes:
        assert all(position[id(p)] < position[id(node)] for p in node._parents if p.requires_grad)
    first, second = tape.backward(), tape.backward()
    assert first[id(w)].tobytes() == second[id(w)].tobytes()


def test_shared_parent_gradients_accumulate():
    x = Tensor([2.0], requires_grad=True)
    y = x * x + x * 3.0 + ad.exp(x)
    assert abs(ad.grad(ad.sum(y), {"x": x})["x"][0] - (4 + 3 + math.exp(2))) < 1e-12


# ------------------------------------------------------- finite differences
def test_finite_difference_check_examples():
    x = {"x": Tensor(2.0)}
    assert finite_difference_check(lambda p: p["x"] * p["x"], x, 1e-5) < 1e-8
    assert finite_difference_check(lambda p: ad.sum(p["x"] * 0.0) + 4.0, x, 1e-5) == 0.0
    with pytest.raises(ContractError):
        finite_difference_check(lambda p: p["x"], x, 0.0)
    with pytest.raises(NumericError), np.errstate(divide="ignore"):
        finite_difference_check(lambda p: ad.log(p["x"] - 2.0), x, 1e-5)


def test_relative_error_formula():
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)
    assert relative_error(np.array([0.0]), np.array([1e-9])) == pytest.approx(0.1)
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def _readout(rng, y):
    return ad.sum(y * Tensor(rng.uniform(0.5, 1.5, y.shape)))


PRIMITIVES = {
    "add": ((3, 4), (4,), lambda a, b: a + b),
    "sub": ((3, 4), (3, 1), lambda a, b: a - b),
    "mul": ((3, 4), (4,), lambda a, b: a * b),
    "div": ((3, 4), (4,), lambda a, b: a / (b * b + 1.0)),
    "matmul": ((2, 3, 4), (4, 2), ad.matmul),
    "exp": ((5,), None, ad.exp),
    "log": ((5,), None, lambda a: ad.log(a * a + 0.5)),
    "sqrt": ((5,), None, lambda a: ad.sqrt(a * a + 0.5)),
    "tanh": ((5,), None, ad.tanh),
    "sigmoid": ((5,), None, ad.sigmoid),
    "relu": ((5,), None, ad.relu),
    "scale": ((5,), None, lambda a: ad.scale(a, -1.7)),
    "one_minus": ((5,), None, ad.one_minus),
    "softmax": ((3, 4), None, lambda a: ad.softmax(a, axis=-1)),
    "log_softmax": ((3, 4), None, lambda a: ad.log_softmax(a, axis=0)),
    "sum": ((3, 4), None, lambda a: ad.sum(a, axis=0, keepdims=True)),
    "mean": ((3, 4), None, lambda a: ad.mean(a, axis=1)),
    "reshape": ((3, 4), None, lambda a: ad.reshape(a, (2, 6))),
    "transpose": ((2, 3, 4), None, lambda a: ad.transpose(a, (1, 2, 0))),
    "swapaxes": ((2, 3, 4), None, lambda a: ad.swapaxes(a, 0, 2)),
    "getitem": ((4, 5), None, lambda a: ad.getitem(a, (slice(1, 3), [0, 2, 2]))),
    "concat": ((2, 3), (1, 3), lambda a, b: ad.concat([a, b, a], axis=0)),
    "stack": ((2, 3), (2, 3), lambda a, b: ad.stack([a, b], axis=1)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_over_100_seeds(name):
    shape_a, shape_b, fn = PRIMITIVES[name]
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = {"a": Tensor(rng.standard_normal(shape_a))}
        if shape_b is not None:
            params["b"] = Tensor(rng.standard_normal(shape_b))
        if name == "relu":  # keep inputs away from the kink so central differences are valid
            a = params["a"].data
            params["a"] = Tensor(np.where(np.abs(a) < 0.1, a + 0.2 * np.sign(a + 1e-12), a))
        f = (lambda p: _readout(np.random.default_rng(seed + 1000), fn(p["a"], p["b"]))) if shape_b else \
            (lambda p: _readout(np.random.default_rng(seed + 1000), fn(p["a"])))
        worst = max(worst, finite_difference_check(f, params, 1e-5))
    assert worst < 1e-6, f"{name}: worst relative error {worst:.3e}"
