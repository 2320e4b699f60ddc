import zlib

import numpy as np
import pytest
from scipy.special import erf

from deit import tensor as T
from deit.errors import ContractError, EmptyTapeError, ParameterError, ShapeError
from helpers import TOLERANCE, gradcheck, rel_error

CASES = 50
DTYPES = [np.float32, np.float64]


def _shape(rng, ndim, lo=1, hi=4):
    return tuple(int(s) for s in rng.integers(lo, hi + 1, size=ndim))


def _matmul(rng):
    kind = rng.integers(3)
    m, k, n, b = _shape(rng, 4)
    if kind == 0:
        a, c = (m, k), (k, n)
    elif kind == 1:
        a, c = (b, m, k), (b, k, n)
    else:
        a, c = (b, m, k), (k, n)
    return T.matmul, [rng.standard_normal(a), rng.standard_normal(c)]


def _broadcast_pair(rng):
    b, m, n = _shape(rng, 3)
    other = [(n,), (m, 1), (1, n), (b, m, n), (b, 1, n)][rng.integers(5)]
    return [rng.standard_normal((b, m, n)), rng.standard_normal(other)]


def _transpose(rng):
    perm = tuple(rng.permutation(3))
    return (lambda x: T.transpose(x, perm)), [rng.standard_normal(_shape(rng, 3))]


def _swapaxes(rng):
    i, j = rng.choice(3, 2, replace=False)
    return (lambda x: T.swapaxes(x, int(i), int(j))), [rng.standard_normal(_shape(rng, 3))]


def _reshape(rng):
    a, b, c = _shape(rng, 3)
    target = [(a * b, c), (a, b * c), (-1,), (c, b, a)][rng.integers(4)]
    return (lambda x: T.reshape(x, target)), [rng.standard_normal((a, b, c))]


def _concat(rng):
    axis = int(rng.integers(2))
    k = int(rng.integers(2, 4))
    base = list(_shape(rng, 2))
    arrays = []
    for _ in range(k):
        s = list(base)
        s[axis] = int(rng.integers(1, 4))
        arrays.append(rng.standard_normal(s))
    return (lambda *xs: T.concat(list(xs), axis=axis)), arrays


def _getitem(rng):
    x = rng.standard_normal(_shape(rng, 3, 2, 4))
    options = [
        (slice(None), 0),
        (Ellipsis, slice(1, None)),
        (0,),
        (rng.integers(0, x.shape[0], size=5),),  # repeated indices accumulate
        (slice(None), rng.integers(0, x.shape[1], size=3)),
    ]
    idx = options[rng.integers(len(options))]
    return (lambda t: T.getitem(t, idx)), [x]


def _rows(rng):
    shape = _shape(rng, int(rng.integers(2, 4)), 1, 5)
    return 3.0 * rng.standard_normal(shape)


def _layer_norm(rng):
    r, d = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    return T.layer_norm, [rng.standard_normal((r, d)), 1 + 0.3 * rng.standard_normal(d),
                          0.3 * rng.standard_normal(d)]


def _away_from_zero(rng):
    x = rng.standard_normal(_shape(rng, 2, 1, 5))
    return np.where(np.abs(x) < 0.05, 0.1, x)


def _reduce(op):
    def make(rng):
        nd = int(rng.integers(1, 4))
        axis = None if rng.random() < 0.3 else int(rng.integers(nd))
        keep = bool(rng.integers(2))
        return (lambda x: op(x, axis=axis, keepdims=keep)), [rng.standard_normal(_shape(rng, nd))]
    return make


def _im2col(rng):
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    hw = int(rng.integers(max(k, 2), 6))
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 3)), hw, hw))
    return (lambda t: T.im2col(t, k, stride, pad)), [x]


PRIMITIVES = {
    "matmul": _matmul,
    "add": lambda r: (T.add, _broadcast_pair(r)),
    "sub": lambda r: (T.sub, _broadcast_pair(r)),
    "mul": lambda r: (T.mul, _broadcast_pair(r)),
    "scale": lambda r: ((lambda x, c=float(r.uniform(-3, 3)): T.scale(x, c)),
                        [r.standard_normal(_shape(r, 2))]),
    "transpose": _transpose,
    "swapaxes": _swapaxes,
    "reshape": _reshape,
    "concat": _concat,
    "getitem": _getitem,
    "softmax": lambda r: (T.softmax, [_rows(r)]),
    "log_softmax": lambda r: (T.log_softmax, [_rows(r)]),
    "layer_norm": _layer_norm,
    "gelu": lambda r: (T.gelu, [2 * r.standard_normal(_shape(r, 2))]),
    "relu": lambda r: (T.relu, [_away_from_zero(r)]),
    "exp": lambda r: (T.exp, [r.uniform(-2, 2, _shape(r, 2))]),
    "log": lambda r: (T.log, [r.uniform(0.3, 3, _shape(r, 2))]),
    "sum": _reduce(T.sum_),
    "mean": _reduce(T.mean),
    "im2col": _im2col,
}
KERNEL_BACKED = {"softmax", "log_softmax", "layer_norm", "gelu", "im2col"}


@pytest.mark.parametrize("dtype", DTYPES, ids=["f32", "f64"])
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name, dtype, backend):
    if backend == "numba" and name not in KERNEL_BACKED:
        pytest.skip("backend only affects row kernels")
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(CASES):
        fn, arrays = PRIMITIVES[name](rng)
        worst = max(worst, gradcheck(fn, arrays, dtype, rng))
    assert worst <= TOLERANCE[dtype], f"{name}: max rel error {worst:.2e}"


@pytest.mark.parametrize("dtype", DTYPES, ids=["f32", "f64"])
def test_random_three_layer_graph(dtype):
    rng = np.random.default_rng(7)

    def net(x, w1, w2, g, b):
        h = T.gelu(T.matmul(x, w1))
        h = T.layer_norm(h, g, b)
        return T.log_softmax(T.matmul(h, w2))

    worst = 0.0
    for _ in range(10):
        arrays = [rng.standard_normal((3, 4)), rng.standard_normal((4, 5)),
                  rng.standard_normal((5, 3)), 1 + 0.1 * rng.standard_normal(5),
                  0.1 * rng.standard_normal(5)]
        worst = max(worst, gradcheck(net, arrays, dtype, rng))
    assert worst <= TOLERANCE[dtype]


# -- forward values ---------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(T.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-7)


def test_softmax_row_sums_large_inputs(backend, rng):
    with T.precision(np.float64):
        x = T.Tensor(rng.uniform(-50, 50, (200, 17)))
        s = T.softmax(x).data.sum(-1)
    assert np.all(np.abs(s - 1) <= 1e-6)


def test_softmax_row_sums_float32(backend, rng):
    s = T.softmax(T.Tensor(rng.uniform(-50, 50, (200, 17)))).data.astype(np.float64).sum(-1)
    assert np.all(np.abs(s - 1) <= 1e-6)


def test_gelu_values(backend):
    with T.precision(np.float64):
        y = T.gelu(T.Tensor([0.0, 10.0, 1.0, -1.0])).data
    assert y[0] == 0.0
    assert abs(y[1] - 10.0) <= 1e-6
    phi1 = 0.5 * (1 + erf(1 / np.sqrt(2)))
    assert abs(y[2] - phi1) <= 1e-12
    assert abs(y[2] - 0.8413447460685429) <= 1e-12
    assert abs(y[3] + (1 - phi1)) <= 1e-12


def test_layer_norm_constant_row_and_moments(backend, rng):
    d = 6
    w, b = T.Tensor(np.ones(d)), T.Tensor(np.zeros(d))
    y = T.layer_norm(T.Tensor([[2.0] * d]), w, b)
    np.testing.assert_allclose(y.data, 0.0, atol=1e-7)
    with T.precision(np.float64):
        x = T.Tensor(5 * rng.standard_normal((30, d)) + 3)
        y = T.layer_norm(x, T.Tensor(np.ones(d)), T.Tensor(np.zeros(d))).data
    assert np.abs(y.mean(-1)).max() <= 1e-5
    assert np.abs(y.var(-1) - 1).max() <= 1e-5


def test_backends_agree(rng):
    from deit import _kernels
    if _kernels.NUMBA_KERNELS is None:
        pytest.skip("numba not installed")
    x = rng.standard_normal((7, 9))
    for name in ("softmax_fwd", "log_softmax_fwd"):
        np.testing.assert_allclose(_kernels.NUMBA_KERNELS[name](x),
                                   _kernels.NUMPY_KERNELS[name](x), atol=1e-12)
    ya, ca = _kernels.NUMBA_KERNELS["gelu_fwd"](x)
    yb, cb = _kernels.NUMPY_KERNELS["gelu_fwd"](x)
    np.testing.assert_allclose(ya, yb, atol=1e-12)
    w, b = rng.standard_normal(9), rng.standard_normal(9)
    for u, v in zip(_kernels.NUMBA_KERNELS["layernorm_fwd"](x, w, b, 1e-6),
                    _kernels.NUMPY_KERNELS["layernorm_fwd"](x, w, b, 1e-6)):
        np.testing.assert_allclose(u, v, atol=1e-12)
    img = rng.standard_normal((2, 3, 6, 6))
    np.testing.assert_array_equal(_kernels.NUMBA_KERNELS["im2col"](img, 3, 2, 1),
                                  _kernels.NUMPY_KERNELS["im2col"](img, 3, 2, 1))


# -- backward contract ------------------------------------------------------

def test_square_gradient():
    x = T.Tensor(3.0, requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_cross_entropy_softmax_closed_form(rng):
    z = rng.standard_normal(6)
    y = np.eye(6)[2]
    t = T.Tensor(z, requires_grad=True)
    loss = T.scale(T.sum_(T.mul(T.log_softmax(t), T.Tensor(y))), -1.0)
    loss.backward()
    p = np.exp(z - z.max())
    p /= p.sum()
    np.testing.assert_allclose(t.grad, p - y, atol=1e-5)


def test_non_scalar_loss_is_contract_error():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_detached_loss_is_empty_tape_error():
    x = T.Tensor(np.ones(3))
    with pytest.raises(EmptyTapeError):
        T.sum_(x).backward()
    y = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(EmptyTapeError):
        T.sum_(y).detach().backward()


def test_accumulation_is_linear_in_uses(rng):
    with T.precision(np.float64):
        x0 = rng.standard_normal((3, 4))
        w = rng.standard_normal((4, 2))

        def single():
            x = T.Tensor(x0, requires_grad=True)
            T.sum_(T.gelu(T.matmul(x, T.Tensor(w)))).backward()
            return x.grad

        g1 = single()
        x = T.Tensor(x0, requires_grad=True)
        terms = [T.sum_(T.gelu(T.matmul(x, T.Tensor(w)))) for _ in range(3)]
        T.add(T.add(terms[0], terms[1]), terms[2]).backward()
        np.testing.assert_array_equal(x.grad, g1 + g1 + g1)


def test_tape_is_topological_and_unique():
    a = T.Tensor(np.ones(2), requires_grad=True)
    b = a * 2.0
    c = T.add(b, a)
    loss = T.sum_(T.mul(c, b))
    order = T.tape(loss)
    pos = {id(n): i for i, n in enumerate(order)}
    assert len(pos) == len(order)
    for n in order:
        for p in n._prev:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]


def test_no_grad_records_nothing():
    a = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        b = a * 2.0
    assert not b.requires_grad and b._prev == ()


def test_reshape_transpose_roundtrip_bit_exact(rng):
    x = rng.standard_normal((2, 3, 4)).astype(np.float32)
    t = T.Tensor(x)
    back = T.reshape(T.reshape(t, (6, 4)), (2, 3, 4))
    np.testing.assert_array_equal(back.data, x)
    perm = (2, 0, 1)
    inv = tuple(np.argsort(perm))
    np.testing.assert_array_equal(T.transpose(T.transpose(t, perm), inv).data, x)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(4)))


def test_default_dtype_is_float32_and_precision_restores():
    assert T.get_default_dtype() == np.float32
    with T.precision(np.float64):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32


# -- truncated normal ---------------------------------------------------------

def test_truncated_normal_bound():
    x = T.init_truncated_normal([4], 0.02, 2.0, np.random.default_rng(0))
    assert x.shape == (4,) and np.all(np.abs(x.data) <= 0.04)


def test_truncated_normal_statistics():
    n, std = 100_000, 0.02
    x = T.truncated_normal((n,), std, 2.0, np.random.default_rng(1)).astype(np.float64)
    assert np.all(np.abs(x) <= 2 * std)
    # variance of N(0,1) truncated to [-2, 2]
    z = 2.0
    mass = erf(z / np.sqrt(2))
    pdf = np.exp(-z * z / 2) / np.sqrt(2 * np.pi)
    var = 1 - 2 * z * pdf / mass
    assert abs(x.mean()) <= 4 * std * np.sqrt(var) / np.sqrt(n)
    outside = np.mean(np.abs(x) > std)
    expected = (mass - erf(1 / np.sqrt(2))) / mass
    assert abs(outside - expected) <= 0.01


@pytest.mark.parametrize("std,cutoff", [(0.0, 2.0), (-1.0, 2.0), (0.02, 0.0)])
def test_truncated_normal_rejects_bad_parameters(std, cutoff):
    with pytest.raises(ParameterError):
        T.truncated_normal((3,), std, cutoff, np.random.default_rng(0))


def test_rel_error_helper():
    assert rel_error(np.array([1.0]), np.array([1.0])) == 0.0
