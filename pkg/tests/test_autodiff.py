import json
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnguide import autodiff as ad
from attnguide.autodiff.gradcheck import numerical_grad, relative_error
from attnguide.errors import ContractError, ParameterError, ShapeError


def T(x, grad=True, dtype=np.float64):
    return ad.Tensor(np.asarray(x, dtype=dtype), requires_grad=grad)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    out = ad.matmul(T(np.eye(2), False), T(m, False))
    np.testing.assert_array_equal(out.data, m)


def test_matmul_hand_arithmetic():
    out = ad.matmul(T([[1, 2], [3, 4]], False), T([[5], [6]], False))
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(T(np.zeros((2, 3))), T(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    a = T(a0)
    ad.backward(ad.sum(ad.matmul(a, T(b0, False))))
    fd = numerical_grad(lambda x: (x @ b0).sum(), a0)
    assert relative_error(a.grad, fd) < 1e-6


# ---------------------------------------------------------------- softmax

def test_softmax_symmetric_row():
    out = ad.softmax_rows(T([[0.0, 0.0, 0.0]], False), 1.0)
    np.testing.assert_allclose(out.data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    out = ad.softmax_rows(T([[1000.0, 0.0]], False), 1.0)
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-12)


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_bad_temperature(tau):
    with pytest.raises(ParameterError):
        ad.softmax_rows(T([[1.0, 2.0]]), tau)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax_rows(T(x, False), 1.0)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)


# ---------------------------------------------------------------- reduce_max

def test_reduce_max_tie_goes_to_first_index():
    x = T([0.1, 0.9, 0.9])
    out = ad.reduce_max(x)
    assert out.item() == pytest.approx(0.9)
    ad.backward(out)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_reduce_max_constant():
    assert ad.reduce_max(T(np.full((2, 3), 4.5), False)).item() == 4.5


def test_reduce_max_empty():
    with pytest.raises(ParameterError):
        ad.reduce_max(T(np.zeros((0,))))


# ---------------------------------------------------------------- backward contract

def test_backward_sum_gives_ones():
    x = T(np.random.default_rng(1).normal(size=(2, 3, 4)))
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = T([1.0, 2.0, 3.0])
    ad.backward(ad.sum(x * x))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_accumulates_over_reuse():
    x = T([1.0, -2.0])
    y = x * 3.0 + x
    ad.backward(ad.sum(y))
    np.testing.assert_array_equal(x.grad, [4.0, 4.0])


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        ad.backward(T([1.0, 2.0]) * 2.0)


def test_backward_rejects_detached():
    with pytest.raises(ContractError):
        ad.backward(ad.sum(T([1.0, 2.0], grad=False)))


def test_non_grad_inputs_never_on_tape():
    x, c = T([1.0, 2.0]), T([3.0, 4.0], grad=False)
    tape = ad.backward(ad.sum(x * c))
    assert all(leaf.requires_grad for leaf in tape.leaves)
    assert c.grad is None


def test_tape_is_topological_and_visits_once():
    x = T([1.0, 2.0])
    h = x * x
    loss = ad.sum(h + h)
    tape = ad.backward(loss)
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    assert len(position) == len(tape.nodes)
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.node is not None:
                assert position[id(inp.node)] < position[id(node)]


def test_tape_replay_is_bit_deterministic():
    rng = np.random.default_rng(2)
    x = T(rng.normal(size=(4, 6)))
    w = T(rng.normal(size=(6, 3)), False)
    loss = ad.sum(ad.gelu(ad.softmax_rows(ad.matmul(x, w), 0.7)) * 2.0)
    tape = ad.backward(loss)
    g1 = x.grad.copy()
    x.zero_grad()
    tape.replay(loss, np.ones(()))
    assert x.grad.tobytes() == g1.tobytes()


def test_no_grad_records_nothing():
    x = T([1.0, 2.0])
    with ad.no_grad():
        y = x * 2.0
    assert y.node is None and not y.requires_grad


def test_scalar_broadcast_only():
    x = T(np.ones((2, 2)))
    assert (x + T(3.0)).shape == (2, 2)
    with pytest.raises(ShapeError):
        x + T(np.ones(2))


# ---------------------------------------------------------------- finite-difference sweep

def _fd_case(name, rng):
    """Return (fn on Tensor -> scalar Tensor, same fn on numpy -> float)."""
    kernel = np.array([[0.05, 0.1, 0.05], [0.1, 0.4, 0.1], [0.05, 0.1, 0.05]])
    other = rng.normal(size=(3, 4))
    gamma, beta = rng.normal(size=4), rng.normal(size=4)
    wts = rng.normal(size=(3, 4))

    def np_ln(x):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * gamma + beta

    def np_gelu(x):
        return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))

    def np_softmax(x, tau):
        e = np.exp((x - x.max(-1, keepdims=True)) / tau)
        return e / e.sum(-1, keepdims=True)

    def np_conv(x):
        out = np.zeros_like(x)
        for a in range(3):
            for b in range(3):
                out += kernel[a, b] * np.roll(x, (1 - a, 1 - b), axis=(0, 1))
        return out

    def wsum(y):
        return (y * wts).sum()

    table = {
        "add": (lambda t: ad.sum((t + T(other, False)) * T(wts, False)), lambda x: wsum(x + other)),
        "sub": (lambda t: ad.sum((T(other, False) - t) * T(wts, False)), lambda x: wsum(other - x)),
        "mul": (lambda t: ad.sum(t * t * T(wts, False)), lambda x: wsum(x * x)),
        "div": (lambda t: ad.sum(T(other, False) / (t * t + 1.0) * T(wts, False)), lambda x: wsum(other / (x * x + 1))),
        "scale": (lambda t: ad.sum(ad.scale(t, -2.5) * T(wts, False)), lambda x: wsum(-2.5 * x)),
        "reshape": (lambda t: ad.sum(ad.reshape(t, (4, 3)) * T(wts.reshape(4, 3), False)), lambda x: wsum(x)),
        "transpose": (lambda t: ad.sum(ad.transpose(t) * T(wts.T, False)), lambda x: wsum(x)),
        "sum_axis": (lambda t: ad.sum(ad.sum(t, axis=1) * T(wts[:, 0], False)), lambda x: (x.sum(1) * wts[:, 0]).sum()),
        "mean": (lambda t: ad.mean(t * t), lambda x: (x * x).mean()),
        "gelu": (lambda t: ad.sum(ad.gelu(t) * T(wts, False)), lambda x: wsum(np_gelu(x))),
        "layer_norm": (lambda t: ad.sum(ad.layer_norm(t, T(gamma, False), T(beta, False)) * T(wts, False)),
                       lambda x: wsum(np_ln(x))),
        "softmax": (lambda t: ad.sum(ad.softmax_rows(t, 0.8) * T(wts, False)), lambda x: wsum(np_softmax(x, 0.8))),
        "reduce_max": (lambda t: ad.reduce_max(t * T(wts, False)), lambda x: (x * wts).max()),
        "matmul": (lambda t: ad.sum(ad.matmul(t, T(other.T, False))),
                   lambda x: (x @ other.T).sum()),
        "conv2d_fixed": (lambda t: ad.sum(ad.conv2d_fixed(t, kernel) * T(wts, False)), lambda x: wsum(np_conv(x))),
        "getitem": (lambda t: ad.sum(t[1:, 2] * t[1:, 2]), lambda x: (x[1:, 2] ** 2).sum()),
        "stack": (lambda t: ad.sum(ad.stack([t, t * t]) * T(np.stack([wts, wts]), False)),
                  lambda x: wsum(x) + wsum(x * x)),
        "expand": (lambda t: ad.sum(ad.expand(t, 0, 2) * T(np.stack([wts, -wts * 3]), False)),
                   lambda x: wsum(x) - 3 * wsum(x)),
    }
    return table[name]


OPS = ["add", "sub", "mul", "div", "scale", "reshape", "transpose", "sum_axis", "mean", "gelu", "layer_norm",
       "softmax", "reduce_max", "matmul", "conv2d_fixed", "getitem", "stack", "expand"]


@pytest.mark.parametrize("name", OPS)
def test_gradient_matches_finite_differences_64bit(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn, np_fn = _fd_case(name, rng)
    for _ in range(5):
        x0 = rng.normal(size=(3, 4))
        x = T(x0)
        ad.backward(fn(x))
        fd = numerical_grad(np_fn, x0, h=1e-5)
        assert relative_error(x.grad, fd) < 1e-6, name


@pytest.mark.parametrize("name", OPS)
def test_gradient_matches_finite_differences_32bit(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()) + 1)
    fn, np_fn = _fd_case(name, rng)
    for _ in range(5):
        x0 = rng.normal(size=(3, 4))
        x = ad.Tensor(x0.astype(np.float32), requires_grad=True)
        ad.backward(fn(x))
        assert x.grad.dtype == np.float32
        fd = numerical_grad(np_fn, x0, h=1e-5)
        assert relative_error(x.grad, fd) < 1e-3, name


def test_linear_and_embedding_gradients():
    rng = np.random.default_rng(3)
    x0, w0, b0 = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    tbl0 = rng.normal(size=(6, 4))
    ids = np.array([[0, 5, 5], [2, 0, 1]])
    wts = rng.normal(size=(2, 3, 5))

    def f(x, w, b, tbl):
        return ((((x + tbl[ids]) @ w) + b) * wts).sum()

    x, w, b, tbl = T(x0), T(w0), T(b0), T(tbl0)
    ad.backward(ad.sum(ad.linear(x + ad.embedding(tbl, ids), w, b) * T(wts, False)))
    assert relative_error(x.grad, numerical_grad(lambda v: f(v, w0, b0, tbl0), x0)) < 1e-6
    assert relative_error(w.grad, numerical_grad(lambda v: f(x0, v, b0, tbl0), w0)) < 1e-6
    assert relative_error(b.grad, numerical_grad(lambda v: f(x0, w0, v, tbl0), b0)) < 1e-6
    assert relative_error(tbl.grad, numerical_grad(lambda v: f(x0, w0, b0, v), tbl0)) < 1e-6


def test_layer_norm_parameter_gradients():
    rng = np.random.default_rng(4)
    x0, g0, b0 = rng.normal(size=(3, 6)), rng.normal(size=6), rng.normal(size=6)
    wts = rng.normal(size=(3, 6))

    def f(x, g, b):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (((x - mu) / np.sqrt(var + 1e-5) * g + b) * wts).sum()

    g, b = T(g0), T(b0)
    ad.backward(ad.sum(ad.layer_norm(T(x0, False), g, b) * T(wts, False)))
    assert relative_error(g.grad, numerical_grad(lambda v: f(x0, v, b0), g0)) < 1e-6
    assert relative_error(b.grad, numerical_grad(lambda v: f(x0, g0, v), b0)) < 1e-6


def test_batched_matmul_both_gradients():
    rng = np.random.default_rng(5)
    a0, b0 = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
    a, b = T(a0), T(b0)
    ad.backward(ad.sum(ad.matmul(a, b) * ad.matmul(a, b)))
    assert relative_error(a.grad, numerical_grad(lambda v: ((v @ b0) ** 2).sum(), a0)) < 1e-6
    assert relative_error(b.grad, numerical_grad(lambda v: ((a0 @ v) ** 2).sum(), b0)) < 1e-6


# ---------------------------------------------------------------- conv invariants

@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)), st.integers(0, 3))
def test_wrap_conv_preserves_total_with_unit_kernel(x, seed):
    k = np.random.default_rng(seed).random((3, 3))
    k /= k.sum()
    out = ad.conv2d_fixed(T(x, False), k)
    assert out.data.sum() == pytest.approx(x.sum(), rel=1e-6, abs=1e-12)


def test_conv_rejects_even_kernel():
    with pytest.raises(ParameterError):
        ad.conv2d_fixed(T(np.zeros((4, 4))), np.ones((2, 2)) / 4)


# ---------------------------------------------------------------- serialization

@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_tensor_round_trip(tmp_path, dtype):
    x = ad.Tensor(np.random.default_rng(6).normal(size=(2, 3, 5)).astype(dtype))
    ad.save_tensor(tmp_path / "x", x)
    meta = json.loads((tmp_path / "x.json").read_text())
    assert meta == {"shape": [2, 3, 5], "dtype": np.dtype(dtype).name}
    assert (tmp_path / "x.bin").stat().st_size == x.size * np.dtype(dtype).itemsize
    y = ad.load_tensor(tmp_path / "x")
    assert y.dtype == dtype and y.data.tobytes() == x.data.tobytes()


def test_scalar_results_keep_64_bit_precision():
    x = ad.Tensor(np.ones((3, 3)))
    out = 1.0 - ad.reduce_max(x)
    assert out.dtype == np.float64
    assert ad.sum(x).dtype == np.float64
