import threading

import numpy as np
import pytest

from vlab import _kernels
from vlab import tensor as T
from vlab.gradcheck import OP_TOL, op_checks
from vlab.tensor import ContractError, Parameter, ShapeError, Tensor, precision


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    old = _kernels.backend
    _kernels.use_backend(request.param)
    yield request.param
    _kernels.use_backend(old)


def test_every_op_matches_finite_differences(backend):
    results = op_checks(seed=3)
    bad = [(r.name, r.error) for r in results if r.error >= OP_TOL]
    assert not bad
    assert len(results) >= 20


def test_matmul_4x5_5x3_gradient():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        a = Parameter(rng.standard_normal((4, 5)))
        b = Parameter(rng.standard_normal((5, 3)))
        w = rng.standard_normal((4, 3))
        T.backward(T.sum_(T.mul(T.matmul(a, b), w)))
        # d/da sum(w * ab) = w b^T, d/db = a^T w
        np.testing.assert_allclose(a.grad, w @ b.data.T, rtol=1e-12)
        np.testing.assert_allclose(b.grad, a.data.T @ w, rtol=1e-12)


def test_softmax_rows_sum_to_one_and_are_shift_invariant():
    x = np.random.default_rng(1).standard_normal((3, 7)) * 30
    y = T.softmax(Tensor(x)).data
    np.testing.assert_allclose(y.sum(-1), 1.0, rtol=1e-6)
    np.testing.assert_allclose(T.softmax(Tensor(x + 100.0)).data, y, atol=1e-6)


def test_causal_softmax_masks_future():
    y = T.softmax(Tensor(np.zeros((4, 4))), causal=True).data
    assert np.all(np.triu(y, 1) == 0)
    np.testing.assert_allclose(y[3], 0.25, rtol=1e-6)


def test_layer_norm_normalises():
    x = np.random.default_rng(2).standard_normal((5, 8)) * 3 + 1
    y = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-5)
    np.testing.assert_allclose(y.std(-1), 1, atol=1e-3)


def test_cross_entropy_uniform_logits_is_log_v():
    logits = Tensor(np.zeros((2, 3, 11)))
    loss = T.cross_entropy(logits, np.zeros((2, 3), dtype=int), np.ones((2, 3)))
    assert loss.item() == pytest.approx(np.log(11), rel=1e-6)


def test_cross_entropy_all_masked_is_contract_error():
    with pytest.raises(ContractError):
        T.cross_entropy(Tensor(np.zeros((1, 2, 3))), np.zeros((1, 2), dtype=int), np.zeros((1, 2)))


def test_incompatible_broadcast_raises_shape_error():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_gradients_accumulate_on_shared_leaf():
    with precision(np.float64):
        a = Parameter(np.array([1.0, 2.0]))
        T.backward(T.sum_(T.add(T.mul(a, a), a)))
        np.testing.assert_allclose(a.grad, 2 * a.data + 1)


def test_no_grad_records_no_graph():
    a = Parameter(np.ones(3))
    with T.no_grad():
        y = T.sum_(T.mul(a, a))
    assert not y.requires_grad
    with pytest.raises(ContractError):
        T.backward(y)


def test_frozen_parameter_gets_no_gradient():
    rng = np.random.default_rng(3)
    a = Parameter(rng.standard_normal((2, 3)))
    b = Parameter(rng.standard_normal((3, 2)))
    b.requires_grad = False
    T.backward(T.sum_(T.matmul(a, b)))
    assert a.grad is not None and b.grad is None


def test_precision_is_thread_local():
    seen = {}

    def worker():
        seen["other"] = T.default_dtype()

    with precision(np.float64):
        assert T.default_dtype() == np.float64
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen["other"] == np.float32
    assert T.default_dtype() == np.float32


def test_numba_and_numpy_kernels_agree():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((6, 9)).astype(np.float32)
    dy = rng.standard_normal((6, 9)).astype(np.float32)
    g, b = rng.standard_normal(9).astype(np.float32), rng.standard_normal(9).astype(np.float32)
    pairs = [
        ("softmax_fwd", (x,)), ("softmax_fwd", (x, 3)), ("gelu_fwd", (x,)),
        ("layernorm_fwd", (x, g, b, 1e-5)),
    ]
    for name, argv in pairs:
        ref = getattr(_kernels, "np_" + name)(*[np.copy(a) if isinstance(a, np.ndarray) else a for a in argv])
        out = getattr(_kernels, "nb_" + name)(*[np.copy(a) if isinstance(a, np.ndarray) else a for a in argv])
        for r, o in zip(ref if isinstance(ref, tuple) else (ref,), out if isinstance(out, tuple) else (out,)):
            np.testing.assert_allclose(o, r, rtol=1e-5, atol=1e-6, err_msg=name)
    y = _kernels.np_softmax_fwd(x)
    np.testing.assert_allclose(_kernels.nb_softmax_bwd(y, dy), _kernels.np_softmax_bwd(y, dy), rtol=1e-5,
                               atol=1e-6)
    tgt = rng.integers(0, 9, size=6)
    mask = np.array([1, 1, 0, 1, 0, 1], dtype=np.float32)
    a = _kernels.np_xent_fwd(x, tgt, mask)
    n = _kernels.nb_xent_fwd(x, tgt, mask)
    for r, o in zip(a, n):
        np.testing.assert_allclose(o, r, rtol=1e-5)


def test_float32_training_default():
    assert Tensor([1, 2]).dtype == np.float32
    with precision(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    # float arrays keep their own precision
    assert Tensor(np.ones(2)).dtype == np.float64
