import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ramat import numerics as nx
from ramat.numerics import ContractError, DimensionError, NumericError, Tensor

from oracles import central_differences, relative_error, softmax64, triple_loop_matmul


def test_matmul_identity_and_zero():
    m = np.arange(9, dtype=np.float32).reshape(3, 3)
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)
    z = nx.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[0], [0]]))
    np.testing.assert_array_equal(z.data, [[0], [0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 5)).astype(np.float32)
    b = rng.normal(size=(5, 2)).astype(np.float32)
    expected = triple_loop_matmul(a.tolist(), b.tolist())
    np.testing.assert_allclose(nx.matmul(Tensor(a), Tensor(b)).data, expected, rtol=1e-6, atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax_lastdim(Tensor([0.0, 0, 0])).data, [1 / 3] * 3, atol=1e-7)
    np.testing.assert_allclose(nx.softmax_lastdim(Tensor([1000.0, 0])).data, [1, 0], atol=1e-6)
    np.testing.assert_allclose(nx.softmax_lastdim(Tensor([1.0, 2, 3])).data,
                               softmax64([1.0, 2.0, 3.0]), atol=1e-6)


def test_softmax_empty_last_dim():
    with pytest.raises(DimensionError):
        nx.softmax_lastdim(Tensor(np.zeros((2, 0))))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 12)),
              elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_rows_sum_to_one(x):
    y = nx.softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(nx.layer_norm(Tensor([5.0, 5, 5, 5]), one, zero).data, 0)
    b = Tensor([1.0, -2, 3, 0.5])
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    out = nx.layer_norm(x, Tensor(np.zeros(4)), b).data
    np.testing.assert_array_equal(out, np.broadcast_to(b.data, (3, 4)))


def test_layer_norm_statistics():
    with nx.precision(np.float64):
        x = Tensor(np.random.default_rng(3).normal(2.0, 5.0, size=(6, 32)))
        y = nx.layer_norm(x, Tensor(np.ones(32)), Tensor(np.zeros(32)), eps=1e-12).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-5)


def test_layer_norm_degenerate():
    with pytest.raises(DimensionError):
        nx.layer_norm(Tensor(np.zeros((3, 1))), Tensor([1.0]), Tensor([0.0]))


def test_elementwise_examples():
    assert nx.elementwise("tanh", Tensor(0.0)).item() == 0.0
    assert nx.elementwise("gelu", Tensor(0.0)).item() == 0.0
    x = Tensor([1.5, -2.0, 3.25])
    np.testing.assert_array_equal(nx.add(x, nx.neg(x)).data, 0)
    with pytest.raises(DimensionError):
        nx.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        nx.elementwise("relu", x)


def test_gelu_is_exact_erf_form():
    from scipy.stats import norm

    x = np.linspace(-4, 4, 41)
    with nx.precision(np.float64):
        y = nx.gelu(Tensor(x)).data
    np.testing.assert_allclose(y, x * norm.cdf(x), rtol=1e-12, atol=1e-15)


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.mul(x, x))
    nx.backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2, 4, 6])


def test_disconnected_parameter_has_zero_grad():
    x = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor([3.0, 4.0], requires_grad=True)
    with nx.Tape() as tape:
        nx.mul(p, p)  # recorded but not on the loss path
        loss = nx.sum_all(nx.tanh(x))
    nx.backward(loss, tape)
    np.testing.assert_array_equal(p.grad, 0)
    assert np.all(x.grad != 0)


def test_backward_rejects_non_scalar_and_second_replay():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with nx.Tape() as tape:
        y = nx.tanh(x)
    with pytest.raises(ContractError):
        nx.backward(y, tape)
    with nx.Tape() as tape:
        loss = nx.sum_all(nx.tanh(x))
    nx.backward(loss, tape)
    with pytest.raises(ContractError):
        nx.backward(loss, tape)


def test_tensor_validation_rejects_nonfinite():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan]).validate()
    assert Tensor([1.0, 2.0], requires_grad=True).validate().grad.shape == (2,)


def test_determinism_bit_identical():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(8, 16)), rng.normal(size=(16, 4))
    g, be = rng.normal(size=4), rng.normal(size=4)

    def run():
        h = nx.gelu(nx.matmul(Tensor(a), Tensor(b)))
        return nx.layer_norm(nx.softmax_lastdim(h), Tensor(g), Tensor(be)).data.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# per-kernel gradient checks against 64-bit central differences

def _kernel_cases():
    rng = np.random.default_rng(11)
    n = lambda *s: rng.normal(size=s)  # noqa: E731
    mask = np.array([[True, False, True], [False, False, True]])
    return {
        "matmul": (lambda t: nx.matmul(t["a"], t["b"]), {"a": n(3, 4), "b": n(4, 2)}),
        "bmm": (lambda t: nx.bmm(t["a"], t["b"]), {"a": n(2, 3, 4), "b": n(2, 4, 5)}),
        "linear": (lambda t: nx.linear(t["x"], t["w"], t["b"]),
                   {"x": n(2, 3, 4), "w": n(4, 5), "b": n(5)}),
        "add": (lambda t: nx.add(t["a"], t["b"]), {"a": n(3, 4), "b": n(3, 4)}),
        "mul": (lambda t: nx.mul(t["a"], t["b"]), {"a": n(3, 4), "b": n(3, 4)}),
        "scale": (lambda t: nx.scale(t["a"], -1.7), {"a": n(3, 4)}),
        "tanh": (lambda t: nx.tanh(t["a"]), {"a": n(3, 4)}),
        "gelu": (lambda t: nx.gelu(t["a"]), {"a": n(3, 4)}),
        "softmax": (lambda t: nx.softmax_lastdim(t["a"]), {"a": n(3, 5)}),
        "layer_norm": (lambda t: nx.layer_norm(t["x"], t["g"], t["b"]),
                       {"x": n(3, 6), "g": n(6), "b": n(6)}),
        "reshape": (lambda t: nx.reshape(t["a"], (4, 3)), {"a": n(3, 4)}),
        "transpose": (lambda t: nx.transpose(t["a"], (2, 0, 1)), {"a": n(2, 3, 4)}),
        "mean": (lambda t: nx.mean(t["a"], axis=1), {"a": n(2, 3, 4)}),
        "select_rows": (lambda t: nx.select_rows(t["a"], mask), {"a": n(2, 3, 4)}),
        "fill_masked": (lambda t: nx.fill_masked(t["a"], mask, t["tok"]),
                        {"a": n(2, 3, 4), "tok": n(4)}),
        "mse": (lambda t: nx.mse(t["a"], t["b"]), {"a": n(3, 4), "b": n(3, 4)}),
        "cross_entropy": (lambda t: nx.cross_entropy(t["a"], np.array([0, 2, 1])), {"a": n(3, 4)}),
    }


@pytest.mark.parametrize("kernel", sorted(_kernel_cases()))
def test_kernel_gradient_matches_finite_differences(kernel):
    fn, inputs = _kernel_cases()[kernel]
    probe_rng = np.random.default_rng(99)
    with nx.precision(np.float64):
        out_shape = fn({k: Tensor(v) for k, v in inputs.items()}).shape
        probe = Tensor(probe_rng.normal(size=out_shape))

        def loss_of(arrs, grad=False):
            ts = {k: Tensor(v, requires_grad=grad) for k, v in arrs.items()}
            with nx.Tape() as tape:
                out = fn(ts)
                loss = nx.sum_all(nx.mul(out, probe)) if out.shape else out
            return ts, loss, tape

        ts, loss, tape = loss_of(inputs, grad=True)
        nx.backward(loss, tape)
        fd = central_differences(lambda a: loss_of(a)[1].item(), inputs)
    for name in inputs:
        err = relative_error(ts[name].grad, fd[name])
        assert err.max() < 1e-4, (kernel, name, err.max())
