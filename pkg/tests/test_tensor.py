import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_grads, dtensor, numeric_grad, rel_error
from vipgan import tensor as T
from vipgan.tensor import ContractError, ShapeError, Tensor


# ---------------------------------------------------------------- randn_init

def test_randn_init_is_deterministic():
    a = T.randn_init([4], 7)
    b = T.randn_init([4], 7)
    assert np.array_equal(a.data, b.data)


def test_randn_init_statistics():
    x = T.randn_init([10000], 99, precision="double").data
    assert -0.002 < x.mean() < 0.002
    assert 0.018 < x.std() < 0.022


@pytest.mark.parametrize("shape", [[0], [3, 0], []])
def test_randn_init_rejects_empty_extent(shape):
    with pytest.raises(ShapeError):
        T.randn_init(shape, 1)


def test_randn_init_accepts_full_u64_seed():
    a = T.randn_init([3], 2**64 - 1)
    assert a.data.shape == (3,)


# ---------------------------------------------------------------- matmul

def test_matmul_identity(rng):
    X = Tensor(rng.normal(size=(3, 5)))
    assert np.array_equal(T.matmul(Tensor(np.eye(3)), X).data, X.data)


def test_matmul_hand_example():
    out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradients(rng):
    A, B = dtensor(rng, 3, 4), dtensor(rng, 4, 2)
    assert check_grads(lambda: T.sum(T.matmul(A, B)), [A, B]) < 1e-4


# ---------------------------------------------------------------- conv / deconv

def test_conv_paper_geometry():
    x = Tensor(np.zeros((3, 64, 64), np.float32))
    K = Tensor(np.zeros((64, 3, 5, 5), np.float32))
    assert T.conv2d(x, K, stride=2, padding=2).shape == (64, 32, 32)


def test_conv_identity_kernel(rng):
    x = Tensor(rng.normal(size=(1, 6, 7)))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), stride=1, padding=0)
    assert np.array_equal(out.data, x.data)


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 5, 5))), padding=0)


def test_conv_gradients(rng):
    x = dtensor(rng, 1, 5, 5)
    K = dtensor(rng, 2, 1, 3, 3)
    b = dtensor(rng, 2)
    assert check_grads(lambda: T.sum(T.tanh(T.conv2d(x, K, b, stride=2, padding=1))), [x, K, b]) < 1e-4


def test_conv_gradients_batched_multichannel(rng):
    x = dtensor(rng, 2, 2, 6, 6)
    K = dtensor(rng, 3, 2, 5, 5)
    assert check_grads(lambda: T.sum(T.sigmoid(T.conv2d(x, K, stride=2, padding=2))), [x, K]) < 1e-4


def test_deconv_doubles():
    x = Tensor(np.zeros((256, 4, 4), np.float32))
    K = Tensor(np.zeros((256, 128, 3, 3), np.float32))
    assert T.deconv2d(x, K, stride=2, padding=1, output_padding=1).shape == (128, 8, 8)


def test_deconv_identity_kernel(rng):
    x = Tensor(rng.normal(size=(1, 4, 4)))
    out = T.deconv2d(x, Tensor(np.ones((1, 1, 1, 1))), stride=1, padding=0)
    assert np.array_equal(out.data, x.data)


def test_deconv_rejects_output_padding():
    with pytest.raises(ValueError):
        T.deconv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=2, padding=1, output_padding=2)


def test_deconv_gradients(rng):
    x = dtensor(rng, 2, 3, 3)
    K = dtensor(rng, 2, 3, 3, 3)
    b = dtensor(rng, 3)
    f = lambda: T.sum(T.tanh(T.deconv2d(x, K, b, stride=2, padding=1, output_padding=1)))  # noqa: E731
    assert check_grads(f, [x, K, b]) < 1e-4


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 2, 1), (5, 2, 2), (3, 1, 1), (5, 1, 0)])
def test_deconv_is_adjoint_of_conv(rng, k, stride, pad):
    x = rng.normal(size=(2, 3, 9, 9))
    K = Tensor(rng.normal(size=(4, 3, k, k)))
    y_shape = T.conv2d(Tensor(x), K, stride=stride, padding=pad).shape
    y = rng.normal(size=y_shape)
    op = (9 + 2 * pad - k) % stride
    lhs = (T.conv2d(Tensor(x), K, stride=stride, padding=pad).data * y).sum()
    back = T.deconv2d(Tensor(y), K, stride=stride, padding=pad, output_padding=op).data
    assert back.shape == x.shape
    rhs = (x * back).sum()
    assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), 1.0)


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("pad", [0, 1, 2])
def test_output_shape_formulas(k, stride, pad):
    size = 8
    x = Tensor(np.zeros((1, size, size)))
    c = T.conv2d(x, Tensor(np.zeros((1, 1, k, k))), stride=stride, padding=pad)
    assert c.shape[1] == (size + 2 * pad - k) // stride + 1
    op = stride - 1
    d = T.deconv2d(x, Tensor(np.zeros((1, 1, k, k))), stride=stride, padding=pad, output_padding=op)
    assert d.shape[1] == (size - 1) * stride - 2 * pad + k + op


# ---------------------------------------------------------------- pointwise

def test_leaky_relu_definition():
    assert T.pointwise("leaky_relu", Tensor([-1.0, 0.0, 2.0]), slope=0.2).data.tolist() == [-0.2, 0.0, 2.0]


def test_sigmoid_zero():
    assert T.pointwise("sigmoid", Tensor([0.0])).data[0] == 0.5


def test_tanh_derivative():
    x = Tensor([0.3], requires_grad=True, precision="double")
    T.backward(T.sum(T.tanh(x)))
    num = numeric_grad(lambda: float(np.tanh(x.data).sum()), x.data)
    assert rel_error(x.grad, num) < 1e-6


def test_pointwise_shape_mismatch():
    with pytest.raises(ShapeError):
        T.pointwise("add", Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ShapeError):
        T.pointwise("mul", Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_scalar_broadcast_allowed():
    out = T.pointwise("mul", Tensor(np.ones(3)), Tensor(2.0))
    assert out.data.tolist() == [2.0, 2.0, 2.0]


def test_log_is_clamped():
    x = Tensor([0.0, 1e-9, 0.5], requires_grad=True, precision="double")
    y = T.log(x)
    assert y.data[0] == pytest.approx(np.log(1e-7))
    T.backward(T.sum(y))
    assert x.grad[0] == 0.0 and x.grad[2] == pytest.approx(2.0)


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "leaky_relu", "log"])
def test_unary_gradients(rng, kind):
    x = dtensor(rng, 3, 4)
    if kind == "log":
        x.data = np.abs(x.data) + 0.5
    if kind == "leaky_relu":
        x.data[np.abs(x.data) < 1e-3] = 0.1  # keep away from the kink
    assert check_grads(lambda: T.sum(T.pointwise(kind, x)), [x]) < 1e-4


def test_exp_and_clip_gradients(rng):
    x = dtensor(rng, 3, 4)
    x.data[np.abs(np.abs(x.data) - 0.5) < 1e-3] = 0.1
    assert check_grads(lambda: T.sum(T.exp(T.clip(x, -0.5, 0.5))), [x]) < 1e-4


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_binary_gradients(rng, kind):
    a, b = dtensor(rng, 2, 3), dtensor(rng, 2, 3)
    assert check_grads(lambda: T.sum(T.tanh(T.pointwise(kind, a, b))), [a, b]) < 1e-4


def test_shape_op_gradients(rng):
    a = dtensor(rng, 2, 3, 4)
    b = dtensor(rng, 2, 3, 4)
    idx = np.array([1, 0, 1])

    def f():
        s = T.stack([a, b], axis=1)
        c = T.concat([T.reshape(s, (4, 3, 4)), a], axis=0)
        r = T.take_rows(T.reshape(c, (6, 12)), idx)
        return T.sum(T.tanh(T.getitem(r, (slice(None), slice(2, 9)))))

    assert check_grads(f, [a, b]) < 1e-4


def test_broadcast_and_bias_gradients(rng):
    v = dtensor(rng, 2, 3)
    bias = dtensor(rng, 3)
    f = lambda: T.sum(T.tanh(T.add_bias(T.broadcast_spatial(v, 2, 2), bias, axis=1)))  # noqa: E731
    assert check_grads(f, [v, bias]) < 1e-4


# ---------------------------------------------------------------- l2_loss

def test_l2_zero_and_hand_value():
    a = Tensor([1.0, 2.0])
    assert T.l2_loss(a, a).item() == 0.0
    assert T.l2_loss(a, Tensor([0.0, 0.0])).item() == 5.0


def test_l2_gradient(rng):
    a, b = dtensor(rng, 5), dtensor(rng, 5)
    T.backward(T.l2_loss(a, b))
    assert np.allclose(a.grad, 2 * (a.data - b.data))
    assert check_grads(lambda: T.l2_loss(a, b), [a]) < 1e-6


def test_l2_shape_error():
    with pytest.raises(ShapeError):
        T.l2_loss(Tensor(np.ones(3)), Tensor(np.ones(2)))


# ---------------------------------------------------------------- backward / tape

def test_backward_linear_case():
    x = Tensor(np.ones(3), requires_grad=True)
    T.backward(T.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]


def test_backward_matrix_vector_fd(rng):
    W = dtensor(rng, 3, 4)
    x = Tensor(rng.normal(size=(4, 1)), precision="double")
    y = Tensor(rng.normal(size=(3, 1)), precision="double")
    assert check_grads(lambda: T.l2_loss(T.matmul(W, x), y), [W]) < 1e-4


def test_backward_accumulates(rng):
    x = dtensor(rng, 4)
    T.backward(T.sum(T.mul(x, x)))
    first = x.grad.copy()
    T.backward(T.sum(T.mul(x, x)))
    assert np.array_equal(x.grad, 2 * first)


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        T.backward(Tensor(np.ones(3), requires_grad=True) * Tensor(np.ones(3)))


def test_unused_leaf_gets_zero_grad(rng):
    a, b = dtensor(rng, 3), dtensor(rng, 3)
    unused = T.mul(b, b)  # recorded but not on the loss path
    loss = T.sum(T.add(a, T.mul(b, Tensor(np.zeros(3), precision="double"))))
    T.backward(loss)
    assert np.all(b.grad == 0)
    assert unused.grad is None or np.all(unused.grad == 0)


def test_tape_is_topological(rng):
    a = dtensor(rng, 2)
    loss = T.sum(T.tanh(T.mul(a, a)))
    tape = T.Tape.trace(loss)
    assert tape.ops[-1] == "sum"
    seen = set()
    for rec in tape.records:
        for inp in rec.inputs:
            if inp._ctx is not None:
                assert id(inp) in seen
        seen.add(id(rec.output))


def test_no_grad_records_nothing(rng):
    a = dtensor(rng, 2)
    with T.no_grad():
        y = T.tanh(a)
    assert y._ctx is None and not y.requires_grad


# ---------------------------------------------------------------- optimisers

def test_sgd_definition():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([0.5])
    T.sgd_step([p], 0.1)
    assert p.data[0] == pytest.approx(0.95)
    assert p.grad is None


def test_sgd_zero_lr():
    p = Tensor([1.0, -2.0], requires_grad=True)
    p.grad = np.array([3.0, 4.0])
    T.sgd_step([p], 0.0)
    assert p.data.tolist() == [1.0, -2.0]


def test_sgd_missing_grad():
    with pytest.raises(ContractError):
        T.sgd_step([Tensor([1.0], requires_grad=True)], 0.1)


def test_sgd_descends_parabola():
    x = Tensor([1.0], requires_grad=True, precision="double")
    prev = abs(x.data[0])
    for _ in range(20):
        T.backward(T.sum(T.mul(x, x)))
        T.sgd_step([x], 0.1)
        assert abs(x.data[0]) < prev
        prev = abs(x.data[0])


def test_adam_descends_and_clears():
    x = Tensor([1.0, -3.0], requires_grad=True, precision="double")
    st = T.AdamState()
    start = float((x.data ** 2).sum())
    for _ in range(50):
        T.backward(T.sum(T.mul(x, x)))
        T.adam_step([("x", x)], 0.05, st)
        assert x.grad is None
    assert float((x.data ** 2).sum()) < start and st.t == 50


# ---------------------------------------------------------------- properties

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_property_matmul_chain_gradients(m, k, n, seed):
    rng = np.random.default_rng(seed)
    A, B = dtensor(rng, m, k), dtensor(rng, k, n)
    assert check_grads(lambda: T.sum(T.sigmoid(T.matmul(A, B))), [A, B]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([1, 3, 5]), st.sampled_from([1, 2]), st.integers(0, 2), st.integers(0, 2**32 - 1))
def test_property_conv_gradients(k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = dtensor(rng, 1, 2, 6, 6)
    K = dtensor(rng, 2, 2, k, k)
    assert check_grads(lambda: T.sum(T.tanh(T.conv2d(x, K, stride=stride, padding=pad))), [x, K]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**63 - 1), st.sampled_from(["single", "double"]))
def test_property_seeded_ops_are_bit_identical(seed, precision):
    def run():
        a = T.randn_init([3, 4], seed, precision=precision)
        b = T.randn_init([4, 2], seed + 1, precision=precision)
        return T.tanh(T.matmul(a, b)).data

    assert np.array_equal(run(), run())
