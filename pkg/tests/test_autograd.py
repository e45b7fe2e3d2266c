import numpy as np
import pytest

from gradcheck import check
from lobmm import autograd as ag
from lobmm.errors import ShapeError

rng = np.random.default_rng(0)
R = {}


def proj(out):
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    key = out.shape
    if key not in R:
        R[key] = np.random.default_rng(len(R) + 1).normal(size=key)
    return ag.tsum(out * ag.Tensor(R[key].astype(out.dtype)))


def r(*shape):
    return rng.normal(size=shape)


def away_from_zero(*shape):
    x = r(*shape)
    return np.where(np.abs(x) < 0.1, 0.5, x)


def _dropout(x):
    return proj(ag.dropout(x, 0.3, np.random.default_rng(5), training=True))


MASK = rng.random((3, 4)) < 0.4
IDS = np.array([[0, 3, 3], [4, 1, 0]])
TARGETS = np.array([1, 0, 4, 2])
RAND = r(3, 4)
COS, SIN = np.cos(r(3, 2)), np.sin(r(3, 2))

CASES = {
    "add_broadcast": (lambda a, b: proj(a + b), [r(3, 4), r(4)]),
    "sub": (lambda a, b: proj(a - b), [r(3, 4), r(3, 1)]),
    "mul": (lambda a, b: proj(a * b), [r(3, 4), r(1, 4)]),
    "div": (lambda a, b: proj(a / b), [r(3, 4), 2 + np.abs(r(3, 4))]),
    "exp": (lambda a: proj(ag.exp(a)), [r(3, 4)]),
    "log": (lambda a: proj(ag.log(a)), [0.5 + np.abs(r(3, 4))]),
    "tanh": (lambda a: proj(ag.tanh(a)), [r(3, 4)]),
    "sigmoid": (lambda a: proj(ag.sigmoid(a)), [r(3, 4)]),
    "relu": (lambda a: proj(ag.relu(a)), [away_from_zero(3, 4)]),
    "gelu": (lambda a: proj(ag.gelu(a)), [r(3, 4)]),
    "mask_fill": (lambda a: proj(ag.mask_fill(a, MASK, 7.0)), [r(3, 4)]),
    "dropout": (_dropout, [r(3, 4)]),
    "sum_axis": (lambda a: proj(ag.tsum(a, axis=1, keepdims=True)), [r(3, 4)]),
    "mean": (lambda a: proj(ag.mean(a, axis=0)), [r(3, 4)]),
    "reshape": (lambda a: proj(ag.reshape(a, (2, 6))), [r(3, 4)]),
    "transpose": (lambda a: proj(ag.transpose(a, (2, 0, 1))), [r(2, 3, 4)]),
    "swap_last": (lambda a: proj(ag.swap_last(a)), [r(2, 3, 4)]),
    "getitem": (lambda a: proj(a[np.array([0, 2, 2]), 1:]), [r(3, 4)]),
    "concat": (lambda a, b: proj(ag.concat([a, b], axis=-1)), [r(3, 4), r(3, 2)]),
    "gather": (lambda w: proj(ag.gather(w, IDS)), [r(5, 3)]),
    "matmul_batched": (lambda a, b: proj(a @ b), [r(2, 3, 4), r(4, 5)]),
    "matmul_vec_batch": (lambda a, b: proj(ag.matmul(a, b)), [r(2, 3, 4), r(2, 4, 2)]),
    "softmax": (lambda a: proj(ag.softmax(a, axis=-1)), [r(3, 4)]),
    "softmax_axis0": (lambda a: proj(ag.softmax(a, axis=0)), [r(3, 4)]),
    "log_softmax": (lambda a: proj(ag.log_softmax(a)), [r(3, 4)]),
    "layernorm": (lambda a, g, b: proj(ag.layernorm(a, g, b)), [r(3, 6), 1 + 0.1 * r(6), r(6)]),
    "rotate_pairs": (lambda a: proj(ag.rotate_pairs(a, COS, SIN)), [r(3, 4)]),
    "cross_entropy": (lambda a: ag.cross_entropy(a, TARGETS), [r(4, 5)]),
    "mse": (lambda a: ag.mse(a, RAND), [r(3, 4)]),
    "composite": (lambda a, w: ag.mean(ag.tanh(ag.gelu(a @ w)) * ag.sigmoid(a @ w)), [r(3, 4), r(4, 4)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradcheck_float64(name):
    f, arrays = CASES[name]
    assert check(f, *arrays) <= 1e-5


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradcheck_float32(name):
    f, arrays = CASES[name]
    assert check(f, *arrays, dtype=np.float32) <= 1e-3


def test_two_layer_mlp(float64):
    x, w1, b1, w2, b2 = r(8, 5), r(5, 16), r(16), r(16, 3), r(3)
    labels = rng.integers(0, 3, 8)

    def f(x, w1, b1, w2, b2):
        return ag.cross_entropy(ag.gelu(x @ w1 + b1) @ w2 + b2, labels)

    assert check(f, x, w1, b1, w2, b2) <= 1e-5


def test_square_derivative():
    x = ag.Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == 6.0


def test_softmax_ce_is_softmax_minus_onehot(float64):
    logits = ag.Tensor(r(4, 5), requires_grad=True)
    ag.cross_entropy(logits, TARGETS).backward()
    expected = ag.softmax(ag.Tensor(logits.data)).data
    expected[np.arange(4), TARGETS] -= 1
    np.testing.assert_allclose(logits.grad, expected / 4, atol=1e-15)


def test_backward_twice_raises():
    x = ag.Tensor(r(3), requires_grad=True)
    loss = ag.tsum(x * x)
    loss.backward()
    with pytest.raises(ag.GraphError):
        loss.backward()


def test_nonscalar_backward_raises():
    with pytest.raises(ag.GraphError):
        (ag.Tensor(r(3), requires_grad=True) * 2).backward()


def test_constant_loss_zero_grads():
    x = ag.Tensor(r(3, 4), requires_grad=True)
    (ag.tsum(x * 0.0) + 3.0).backward()
    np.testing.assert_array_equal(x.grad, 0)


def test_grad_accumulates_across_uses():
    x = ag.Tensor(np.array([2.0]), requires_grad=True)
    ag.tsum(x * x + x).backward()
    assert x.grad[0] == 5.0


def test_no_grad_builds_no_graph():
    x = ag.Tensor(r(3), requires_grad=True)
    with ag.no_grad():
        y = x * 2
    assert not y.requires_grad


def test_forward_values():
    np.testing.assert_allclose(ag.softmax(ag.Tensor(np.zeros((1, 4)))).data, 0.25)
    a = r(3, 3)
    np.testing.assert_array_equal((ag.Tensor(np.eye(3)) @ ag.Tensor(a)).data, a)
    assert ag.gelu(ag.Tensor(np.zeros(1))).data[0] == 0
    s = ag.softmax(ag.Tensor(r(50, 7) * 10)).data
    np.testing.assert_allclose(s.sum(-1), 1, atol=1e-6)
    ln = ag.layernorm(ag.Tensor(r(20, 16) * 5 + 3), ag.Tensor(np.ones(16)), ag.Tensor(np.zeros(16))).data
    np.testing.assert_allclose(ln.mean(-1), 0, atol=1e-5)
    np.testing.assert_allclose(ln.var(-1), 1, atol=1e-4)


def test_layernorm_variance_float64(float64):
    ln = ag.layernorm(ag.Tensor(r(20, 16) * 5 + 3), ag.Tensor(np.ones(16)), ag.Tensor(np.zeros(16)), eps=1e-12).data
    np.testing.assert_allclose(ln.var(-1), 1, atol=1e-5)


def test_default_dtype_switch(float64):
    assert ag.Tensor([1, 2]).dtype == np.float64


@pytest.mark.parametrize(
    "op",
    [
        lambda: ag.Tensor(r(3, 4)) @ ag.Tensor(r(3, 4)),
        lambda: ag.Tensor(r(3, 4)) + ag.Tensor(r(3)),
        lambda: ag.cross_entropy(ag.Tensor(r(3, 4)), np.array([1, 2])),
        lambda: ag.mse(ag.Tensor(r(3)), np.zeros(4)),
        lambda: ag.rotate_pairs(ag.Tensor(r(2, 3)), np.ones((2, 1)), np.zeros((2, 1))),
    ],
)
def test_shape_errors_name_shapes(op):
    with pytest.raises(ShapeError, match="3"):
        op()
