import numpy as np
import pytest

from jseg import ops
from jseg import tensor as T
from jseg.errors import ContractError, NumericError, ShapeError
from jseg.gradcheck import run_op_checks
from jseg.tensor import Tape, Tensor, elementwise


def test_elementwise_basics():
    assert np.array_equal(elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])
    assert np.array_equal(elementwise("relu", Tensor([-1, 0, 2])).data, [0, 0, 2])
    assert np.allclose(elementwise("mul", Tensor([2, 3]), 0.5).data, [1, 1.5])
    assert np.allclose(elementwise("abs", Tensor([-2, 3])).data, [2, 3])
    assert np.allclose(elementwise("max", Tensor([1, 5]), Tensor([4, 2])).data, [4, 5])


def test_elementwise_broadcasting_trailing():
    a = Tensor(np.ones((2, 3, 4)))
    b = Tensor(np.arange(4.0))
    out = elementwise("add", a, b)
    assert out.shape == (2, 3, 4)
    assert np.allclose(out.data[1, 2], [1, 2, 3, 4])


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        elementwise("add", Tensor(np.ones((3,))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_div_by_exact_zero():
    with pytest.raises(NumericError):
        elementwise("div", Tensor([1.0]), Tensor([0.0]))


def test_matmul_identity_and_small():
    b = np.arange(6.0).reshape(2, 3)
    out = T.matmul(Tensor(np.eye(2)), Tensor(b))
    assert np.array_equal(out.data, b)
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert np.array_equal(out.data, [[11.0]])


def test_matmul_against_naive_loops():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 4))
    b = rng.standard_normal((4, 3))
    want = np.zeros((5, 3))
    for i in range(5):
        for j in range(3):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    assert np.allclose(T.matmul(Tensor(a), Tensor(b)).data, want, atol=1e-12)


def test_conv2d_identity_and_zero_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((5, 5, 3))
    ident = np.zeros((1, 1, 3, 3))
    ident[0, 0] = np.eye(3)
    assert np.array_equal(ops.conv2d(Tensor(x), Tensor(ident)).data, x)
    zero = np.zeros((3, 3, 3, 2))
    assert np.all(ops.conv2d(Tensor(x), Tensor(zero)).data == 0.0)


def test_conv2d_dirac_kernel_is_identity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((6, 4, 2))
    dirac = np.zeros((3, 3, 2, 2))
    dirac[1, 1] = np.eye(2)
    assert np.allclose(ops.conv2d(Tensor(x), Tensor(dirac)).data, x, atol=1e-15)


def _conv_reference(x, kernel):
    k = kernel.shape[0]
    pad = k // 2
    h, w, c_in = x.shape
    c_out = kernel.shape[3]
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    out = np.zeros((h, w, c_out))
    for i in range(h):
        for j in range(w):
            for ki in range(k):
                for kj in range(k):
                    for ci in range(c_in):
                        for co in range(c_out):
                            out[i, j, co] += xp[i + ki, j + kj, ci] * kernel[ki, kj, ci, co]
    return out


def test_conv2d_against_sliding_window_oracle():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 6, 3))
    k = rng.standard_normal((3, 3, 3, 2))
    got = ops.conv2d(Tensor(x), Tensor(k)).data
    assert np.allclose(got, _conv_reference(x, k), atol=1e-12)


def test_conv2d_linearity():
    rng = np.random.default_rng(4)
    x1 = rng.standard_normal((4, 4, 2))
    x2 = rng.standard_normal((4, 4, 2))
    k = rng.standard_normal((3, 3, 2, 3))
    lhs = ops.conv2d(Tensor(x1 + 2.0 * x2), Tensor(k)).data
    rhs = ops.conv2d(Tensor(x1), Tensor(k)).data + 2.0 * ops.conv2d(Tensor(x2), Tensor(k)).data
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((4, 4, 3))), Tensor(np.ones((3, 3, 2, 1))))


def test_conv2d_stride2_shape():
    out = ops.conv2d(Tensor(np.ones((8, 6, 2))), Tensor(np.ones((3, 3, 2, 4))), stride=2)
    assert out.shape == (4, 3, 4)


def test_softmax_symmetry_and_stability():
    out = ops.softmax(Tensor([0.0, 0.0])).data
    assert np.allclose(out, [0.5, 0.5])
    out = ops.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] > 1.0 - 1e-9 and out[1] < 1e-9


def test_softmax_against_extended_precision_oracle():
    import mpmath

    mpmath.mp.dps = 50
    x = [1.0, 2.0, 3.0]
    exps = [mpmath.e ** xi for xi in x]
    total = sum(exps)
    want = np.array([float(e / total) for e in exps])
    assert np.allclose(ops.softmax(Tensor(x)).data, want, atol=1e-15)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((20, 7)) * 5.0
    y = ops.softmax(Tensor(x), axis=-1).data
    assert np.all(y >= 0.0)
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-9)


def test_l2_normalize():
    out = ops.l2_normalize(Tensor([3.0, 4.0]), axis=0).data
    assert np.allclose(out, [0.6, 0.8])
    assert np.array_equal(ops.l2_normalize(Tensor([0.0, 0.0]), axis=0).data, [0.0, 0.0])
    rng = np.random.default_rng(6)
    x = rng.standard_normal((5, 8))
    a = ops.l2_normalize(Tensor(x), axis=1).data
    b = ops.l2_normalize(Tensor(7.0 * x), axis=1).data
    assert np.allclose(a, b, atol=1e-12)


def test_instance_norm_statistics():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((16, 4)) * 3.0 + 1.0
    y = ops.instance_norm(Tensor(x)).data
    assert np.all(np.abs(y.mean(axis=0)) < 1e-10)
    assert np.allclose(y.var(axis=0), 1.0, atol=1e-3)


def test_instance_norm_degenerate_cases():
    y = ops.instance_norm(Tensor(np.full((5, 2), 3.0))).data
    assert np.array_equal(y, np.zeros((5, 2)))
    y = ops.instance_norm(Tensor([[1.0], [3.0]])).data
    assert np.allclose(y, [[-1.0], [1.0]], atol=1e-5)
    # single token: variance degenerates, output defined as zeros
    y = ops.instance_norm(Tensor([[4.0, -2.0]])).data
    assert np.array_equal(y, np.zeros((1, 2)))


def test_backward_polynomial():
    x = Tensor([1.0, 2.0], tracked=True)
    with Tape() as tape:
        loss = (x * x).sum()
        tape.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_constant_root():
    x = Tensor([1.0, 2.0], tracked=True)
    with Tape() as tape:
        loss = (x * 0.0).sum()
        tape.backward(loss)
    assert np.array_equal(x.grad, [0.0, 0.0])


def test_backward_rejects_non_scalar_root():
    x = Tensor([1.0, 2.0], tracked=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(ContractError):
            tape.backward(y)


def test_backward_without_tape_raises():
    x = Tensor([1.0], tracked=True)
    with pytest.raises(ContractError):
        T.backward(x)


def test_backward_deterministic_bitwise():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.standard_normal((6, 6, 3)), tracked=True)
        k = Tensor(rng.standard_normal((3, 3, 3, 4)), tracked=True)
        with Tape() as tape:
            y = ops.conv2d(x, k)
            z = ops.softmax(y.reshape(36, 4), axis=-1)
            loss = (z * z).sum()
            tape.backward(loss)
        return x.grad.copy(), k.grad.copy()

    gx1, gk1 = run()
    gx2, gk2 = run()
    assert np.array_equal(gx1, gx2)
    assert np.array_equal(gk1, gk2)


def test_fanout_accumulates():
    x = Tensor([3.0], tracked=True)
    with Tape() as tape:
        y = x * 2.0
        loss = (y + y * x).sum()  # 2x + 2x^2 -> d/dx = 2 + 4x = 14
        tape.backward(loss)
    assert np.allclose(x.grad, [14.0])


def test_gradcheck_ops_quick():
    results = run_op_checks(seeds=[0, 1], tol=1e-4)
    bad = [r for r in results if not r.ok]
    assert not bad, f"finite-difference mismatches: {[(r.name, r.max_err) for r in bad]}"


def test_untracked_inputs_get_no_grad():
    x = Tensor([1.0, 2.0])
    p = Tensor([3.0, 4.0], tracked=True)
    with Tape() as tape:
        loss = (x * p).sum()
        tape.backward(loss)
    assert x.grad is None
    assert np.allclose(p.grad, [1.0, 2.0])
