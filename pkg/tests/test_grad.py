import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mqtrack import grad as G
from mqtrack.grad import (
    GradientCheckFailure,
    ShapeError,
    Tape,
    finite_difference_check,
    forward_primitive,
    load_checkpoint,
    save_checkpoint,
)

TOL = 1e-6
rng = np.random.default_rng(0)
W = rng.normal(size=(3, 4))


def weighted(t):
    # a random linear read-out keeps every coordinate of the output relevant
    return G.sum_(t * G.constant(np.random.default_rng(t.data.size).normal(size=t.shape)))


UNARY = {
    "relu": G.relu,
    "sigmoid": G.sigmoid,
    "exp": G.exp,
    "sin": G.sin,
    "cos": G.cos,
    "abs": G.abs_,
    "softmax": G.softmax,
    "l2_normalize": G.l2_normalize,
    "log": lambda x: G.log(G.exp(x) + 1.0),
    "transpose": G.transpose,
    "reshape": lambda x: G.reshape(x, (4, 3)),
    "slice": lambda x: x[1:, ::2],
    "sum_axis": lambda x: G.sum_(x, axis=0),
    "mean": lambda x: G.mean(x, axis=1),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    x0 = rng.normal(size=(3, 4)) + 0.05  # keeps relu/abs away from their kinks
    err = finite_difference_check(lambda x: weighted(UNARY[name](x)), x0)
    assert err < TOL


BINARY = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (G.exp(b) + 0.5),
    "maximum": G.maximum,
    "minimum": G.minimum,
    "concat0": lambda a, b: G.concat([a, b], axis=0),
    "stack": lambda a, b: G.stack([a, b], axis=1),
    "matmul": lambda a, b: G.matmul(a, G.transpose(b)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("side", [0, 1])
def test_binary_gradients(name, side):
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    fn = BINARY[name]
    if side == 0:
        err = finite_difference_check(lambda a: weighted(fn(a, G.constant(b0))), a0)
    else:
        err = finite_difference_check(lambda b: weighted(fn(G.constant(a0), b)), b0)
    assert err < TOL


def test_broadcast_gradient_sums_leading_dims():
    bias = np.arange(4.0)
    err = finite_difference_check(lambda b: weighted(G.constant(W) + b), bias)
    assert err < TOL
    tape = Tape()
    b = tape.leaf(bias)
    grads = tape.backward(G.sum_(G.constant(W) + b))
    np.testing.assert_array_equal(grads[b.node_id], np.full(4, 3.0))


def test_batched_matmul_gradient():
    a0 = rng.normal(size=(2, 3, 4))
    b0 = rng.normal(size=(2, 4, 5))
    assert finite_difference_check(lambda a: weighted(G.matmul(a, G.constant(b0))), a0) < TOL
    assert finite_difference_check(lambda b: weighted(G.matmul(G.constant(a0), b)), b0) < TOL


def test_layer_norm_gradients():
    x0, g0, b0 = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4)
    assert finite_difference_check(lambda x: weighted(G.layer_norm(x, G.constant(g0), G.constant(b0))), x0) < TOL
    assert finite_difference_check(lambda g: weighted(G.layer_norm(G.constant(x0), g, G.constant(b0))), g0) < TOL
    assert finite_difference_check(lambda b: weighted(G.layer_norm(G.constant(x0), G.constant(g0), b)), b0) < TOL


def test_softmax_matches_reference_and_is_stable():
    x = np.array([[1000.0, 1001.0, 999.0]])
    out = G.softmax(G.constant(x)).data
    ref = np.exp(x - x.max()) / np.exp(x - x.max()).sum()
    np.testing.assert_allclose(out, ref)
    assert out.sum() == pytest.approx(1.0)


def test_l2_normalize_zero_vector_is_finite():
    out = G.l2_normalize(G.constant(np.zeros((1, 3))))
    assert np.all(out.data == 0)


def test_reused_node_accumulates_gradient():
    tape = Tape()
    x = tape.leaf(np.array([3.0]))
    y = x * x + x
    grads = tape.backward(G.sum_(y))
    assert grads[x.node_id][0] == pytest.approx(7.0)


def test_constants_are_not_recorded():
    tape = Tape()
    x = tape.leaf(np.ones(2))
    c = G.constant(np.ones(2)) * 2.0
    assert c.node_id is None
    assert (x + c).recorded


def test_shape_errors():
    with pytest.raises(ShapeError):
        G.add(G.constant(np.ones((2, 3))), G.constant(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        G.matmul(G.constant(np.ones((2, 3))), G.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        G.relu(G.constant(np.zeros((0, 2))))
    with pytest.raises(ShapeError):
        G.reshape(G.constant(np.ones(6)), (4, 2))
    with pytest.raises(ShapeError):
        G.layer_norm(G.constant(np.ones((2, 3))), G.constant(np.ones(2)), G.constant(np.ones(3)))


def test_backward_requires_scalar_on_same_tape():
    tape, other = Tape(), Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ShapeError):
        tape.backward(x * 2.0)
    with pytest.raises(ValueError):
        other.backward(G.sum_(x))
    with pytest.raises(ValueError):
        G.add(x, other.leaf(np.ones(3)))


def test_forward_primitive_dispatch():
    out = forward_primitive("matmul", G.constant(np.eye(2)), G.constant(np.ones((2, 2))))
    np.testing.assert_array_equal(out.data, np.ones((2, 2)))
    with pytest.raises(ValueError):
        forward_primitive("conv2d", G.constant(np.ones(2)))


def test_gradient_check_flags_wrong_gradient():
    def bad(x):
        # value is sum(x^2) but the recorded graph only sees sum(x)
        return G.sum_(x) + G.constant(float((x.data ** 2).sum() - x.data.sum()))

    assert finite_difference_check(bad, np.array([1.0, 2.0])) > 0.5


def test_gradient_check_rejects_non_finite():
    # the value is finite but the probe x - eps leaves the domain of log
    with np.errstate(invalid="ignore"), pytest.raises(GradientCheckFailure) as info:
        finite_difference_check(lambda x: G.sum_(G.log(x)), np.array([1.0, 1e-6]))
    assert info.value.index == 1


def test_gradient_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_difference_check(G.sum_, np.ones(2), eps=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 10**6))
def test_chain_gradient_property(n, m, seed):
    r = np.random.default_rng(seed)
    w = r.normal(size=(m, 3))
    x0 = r.normal(size=(n, m))

    def f(x):
        h = G.sigmoid(G.matmul(x, G.constant(w)))
        return G.sum_(G.softmax(h) * G.exp(h))

    assert finite_difference_check(f, x0) < TOL


def test_checkpoint_round_trip(tmp_path):
    params = {"a.w": rng.normal(size=(3, 2)), "b": np.array(2.5), "c": np.arange(5.0)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    got = load_checkpoint(path)
    assert list(got) == list(params)
    for k in params:
        np.testing.assert_array_equal(got[k], params[k])
        assert got[k].shape == params[k].shape


def test_checkpoint_layout_is_documented(tmp_path):
    path = tmp_path / "one.ckpt"
    save_checkpoint({"x": np.array([1.0, 2.0])}, path)
    blob = path.read_bytes()
    assert blob[:8] == b"MQTCKPT1"
    assert struct.unpack_from("<I", blob, 8) == (1,)
    assert blob[-16:] == np.array([1.0, 2.0], dtype="<f8").tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT")
    with pytest.raises(ValueError):
        load_checkpoint(path)
    save_checkpoint({"x": np.ones(2)}, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ValueError):
        load_checkpoint(path)
