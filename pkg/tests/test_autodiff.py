import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ceat.autodiff as ad
from ceat.autodiff import _pykernels
from ceat.autodiff import ops
from ceat.autodiff.tensor import Tape, Tensor, backward


@pytest.fixture
def f64():
    with ad.precision("float64"):
        yield


def _rand(rng, *shape, req=True):
    return Tensor(rng.normal(size=shape), requires_grad=req)


def test_matmul_identity():
    x = Tensor([[1, 2], [3, 4]])
    out = ad.matmul(x, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_softmax_symmetric():
    np.testing.assert_array_equal(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_layernorm_constant_row_is_zero():
    x = Tensor(np.full((3, 8), 2.5))
    out = ops.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_array_equal(out.data, np.zeros((3, 8)))


def test_sum_gradient_is_ones(f64):
    x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    grads = backward(tape, loss)
    np.testing.assert_array_equal(grads[x], np.ones((3, 4)))


def test_square_gradient(f64):
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    assert backward(tape, loss)[x] == pytest.approx(6.0)


def test_backward_rejects_non_scalar_and_foreign_loss(f64):
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ad.ShapeError):
        backward(tape, y)
    with Tape() as other:
        z = (x * 3.0).sum()
    with pytest.raises(ValueError):
        backward(tape, z)
    assert len(other) == 2


def test_shape_mismatch_raises():
    with pytest.raises(ad.ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))


def test_non_finite_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.log(Tensor([0.0, 1.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor([1000.0]))


def test_no_recording_without_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    assert not y.requires_grad and y._node is None


def test_quadratic_gradcheck_tight(f64):
    rng = np.random.default_rng(0)
    x = _rand(rng, 5)
    a = Tensor(rng.normal(size=(5, 5)))
    err = ad.finite_diff_check(lambda: (x * ad.matmul(a, x.reshape(5, 1)).reshape(5)).sum(), [x])
    assert err < 1e-9


def test_gradcheck_detects_nondeterminism(f64):
    x = Tensor(np.ones(2), requires_grad=True)
    calls = iter(range(1000))
    with pytest.raises(ad.NonDeterministicError):
        ad.finite_diff_check(lambda: (x * float(next(calls))).sum(), [x])


def _primitive_cases(rng, shape):
    """(name, closure, params) for each primitive with a backward rule."""
    a = _rand(rng, *shape)
    b = _rand(rng, *shape)
    w = _rand(rng, shape[-1], 3)
    pos = Tensor(rng.uniform(0.5, 2.0, size=shape), requires_grad=True)
    g = _rand(rng, shape[-1])
    beta = _rand(rng, shape[-1])
    # bounded away from zero so no gradient entry is lost in cancellation noise
    coef = Tensor(rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.5, 1.5, size=shape))
    bias_b = _rand(rng, shape[-1])
    targets = (rng.uniform(size=shape) > 0.5).astype(float)
    mask = rng.uniform(size=shape) > 0.3
    mask[..., 0] = True
    lead = shape[0]
    cases = [
        ("add", lambda: ((a + bias_b) * coef).sum(), [a, bias_b]),
        ("sub", lambda: ((a - b) * coef).sum(), [a, b]),
        ("mul", lambda: (a * b).sum(), [a, b]),
        ("scale", lambda: (ad.scale(a, 1.7) * coef).sum(), [a]),
        ("matmul", lambda: (ad.matmul(a, w) * ad.matmul(a, w)).sum(), [a, w]),
        ("concat", lambda: (ad.concat([a, b], axis=-1) * ad.concat([coef, coef], axis=-1)).sum(), [a, b]),
        ("getitem", lambda: (a[..., : max(1, shape[-1] // 2)] * 2.0 + a[..., :1]).sum(), [a]),
        ("gather", lambda: (a[np.array([0, lead - 1, 0])] * 1.5).sum(), [a]),
        ("mean", lambda: (a.mean(axis=-1) * a.mean(axis=-1)).sum(), [a]),
        ("transpose", lambda: (a.swapaxes(0, -1) * coef.swapaxes(0, -1)).sum(), [a]),
        ("l1", lambda: ops.l1_distance(a, b), [a, b]),
        ("exp", lambda: (ad.exp(a * 0.3) * coef).sum(), [a]),
        ("log", lambda: (ad.log(pos) * coef).sum(), [pos]),
        ("softmax", lambda: (ops.softmax(a, axis=-1) * coef).sum(), [a]),
        ("softmax_axis0", lambda: (ops.softmax(a, axis=0) * coef).sum(), [a]),
        ("log_softmax", lambda: (ops.log_softmax(a) * coef).sum(), [a]),
        ("masked_log_softmax", lambda: (ops.masked_log_softmax(a, mask) * coef).sum(), [a]),
        ("gelu", lambda: (ops.gelu(a) * coef).sum(), [a]),
        ("layer_norm", lambda: (ops.layer_norm(a, g, beta) * coef).sum(), [a, g, beta]),
        ("l2_normalize", lambda: (ops.l2_normalize(a) * coef).sum(), [a]),
        ("bce", lambda: ops.bce_with_logits(a, targets), [a]),
    ]
    return cases


@settings(max_examples=6, deadline=None)
@given(
    shape=st.lists(st.integers(3, 8), min_size=1, max_size=3).map(lambda s: tuple([4] + s)[-3:]),
    seed=st.integers(0, 2**16),
)
def test_every_primitive_passes_gradcheck(shape, seed):
    if len(shape) < 2:
        shape = (2,) + shape
    rng = np.random.default_rng(seed)
    with ad.precision("float64"):
        for name, f, params in _primitive_cases(rng, shape):
            err = ad.finite_diff_check(f, params)
            assert err < 1e-4, (name, shape, err)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(1)
    y = ops.softmax(Tensor(rng.normal(size=(7, 5, 9)) * 4), axis=-1)
    np.testing.assert_allclose(y.data.sum(-1), 1.0, atol=1e-6)


def test_masked_log_softmax_ignores_masked_entries(f64):
    x = Tensor([[1.0, 2.0, 50.0]])
    mask = np.array([[True, True, False]])
    out = ops.masked_log_softmax(x, mask).data
    ref = np.log(np.exp([1.0, 2.0]) / np.exp([1.0, 2.0]).sum())
    np.testing.assert_allclose(out[0, :2], ref, atol=1e-12)
    assert out[0, 2] == 0.0


def test_forward_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(6, 16)))
        w = Tensor(rng.normal(size=(16, 16)))
        h = ops.gelu(ops.layer_norm(ad.matmul(x, w), Tensor(np.ones(16)), Tensor(np.zeros(16))))
        return ops.softmax(h).data

    assert np.array_equal(run(), run())


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_compiled_and_python_kernels_agree(dtype):
    from ceat.autodiff import kernels

    if kernels.BACKEND != "cython":
        pytest.skip("compiled kernels not built")
    from ceat.autodiff import _ckernels

    rng = np.random.default_rng(3)
    x = rng.normal(size=(11, 24)).astype(dtype)
    gy = rng.normal(size=(11, 24)).astype(dtype)
    gam = rng.normal(size=24).astype(dtype)
    bet = rng.normal(size=24).astype(dtype)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    for c, p in zip(_ckernels.layernorm_forward(x, gam, bet, 1e-5), _pykernels.layernorm_forward(x, gam, bet, 1e-5)):
        np.testing.assert_allclose(c, p, rtol=tol, atol=tol)
    _, xhat, rstd = _pykernels.layernorm_forward(x, gam, bet, 1e-5)
    for c, p in zip(
        _ckernels.layernorm_backward(gy, np.ascontiguousarray(xhat), np.ascontiguousarray(rstd), gam),
        _pykernels.layernorm_backward(gy, xhat, rstd, gam),
    ):
        np.testing.assert_allclose(c, p, rtol=tol * 10, atol=tol * 10)
    y = _ckernels.softmax_forward(x)
    np.testing.assert_allclose(y, _pykernels.softmax_forward(x), rtol=tol, atol=tol)
    np.testing.assert_allclose(
        _ckernels.softmax_backward(y, gy), _pykernels.softmax_backward(y, gy), rtol=tol, atol=tol
    )
    flat, gflat = x.reshape(-1), gy.reshape(-1)
    np.testing.assert_allclose(_ckernels.gelu_forward(flat), _pykernels.gelu_forward(flat), rtol=tol, atol=tol)
    np.testing.assert_allclose(
        _ckernels.gelu_backward(flat, gflat), _pykernels.gelu_backward(flat, gflat), rtol=tol, atol=tol
    )


def test_float32_default_and_float64_context():
    assert Tensor([1.0]).dtype == np.float32
    with ad.precision("float64"):
        assert Tensor([1.0]).dtype == np.float64
    assert ad.precision_name() == "float32"
