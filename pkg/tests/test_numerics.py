import numpy as np
import pytest

from simcurl import numerics as nx
from simcurl.numerics import AdamState, BackwardError, DimensionError, OptimizerError, Tensor, adam_step

from conftest import finite_difference, rel_err


def leaf(a):
    return Tensor(np.array(a, dtype=float), requires_grad=True)


def test_matmul_values():
    out = nx.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    assert out.data.tolist() == [[19, 22], [43, 50]]
    a = np.random.default_rng(0).normal(size=(3, 3))
    assert np.array_equal(nx.matmul(Tensor(a), Tensor(np.eye(3))).data, a)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    g = nx.gradients(nx.sum(nx.matmul(a, b)), {"a": a})["a"]
    fd = finite_difference(lambda: float(np.sum(a.data @ b.data)), a.data)
    assert rel_err(g, fd) < 1e-6


def test_softmax_rows():
    assert np.allclose(nx.softmax_rows(Tensor(np.zeros((1, 4)))).data, 0.25)
    out = nx.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0)
    x = np.random.default_rng(2).normal(size=(5, 7)) * 10
    assert np.all(np.abs(nx.softmax_rows(Tensor(x)).data.sum(axis=1) - 1) < 1e-12)


def test_softmax_jvp_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = leaf(rng.normal(size=(3, 5)))
    v = rng.normal(size=(3, 5))
    g = nx.gradients(nx.sum(nx.mul(nx.softmax_rows(x), v)), {"x": x})["x"]
    f = lambda: float(np.sum(nx.softmax_rows(Tensor(x.data)).data * v))  # noqa: E731
    assert rel_err(g, finite_difference(f, x.data)) < 1e-5


def test_elementwise_definitions():
    assert nx.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]
    x = np.random.default_rng(4).normal(size=(6, 9)) * 3 + 1
    y = nx.layer_norm(Tensor(x)).data
    assert np.all(np.abs(y.mean(axis=1)) < 1e-9)
    assert np.all(np.abs(y.var(axis=1) - 1) < 1e-9)
    assert nx.concat_last_dim(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 5)))).shape == (2, 8)


def test_relu_subgradient_at_zero_is_zero():
    x = leaf([0.0, 1.0])
    assert nx.gradients(nx.sum(nx.relu(x)), {"x": x})["x"].tolist() == [0.0, 1.0]


def test_shape_errors():
    with pytest.raises(DimensionError):
        nx.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(DimensionError):
        nx.concat_last_dim(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


def test_backward_simple_and_contract():
    theta = leaf([1.0, 2.0])
    unused = leaf([5.0])
    loss = nx.sum(nx.mul(theta, theta))
    grads = nx.gradients(loss, {"theta": theta, "unused": unused})
    assert grads["theta"].tolist() == [2.0, 4.0]
    assert grads["unused"].tolist() == [0.0]
    with pytest.raises(BackwardError):
        nx.backward(loss)
    with pytest.raises(BackwardError):
        nx.backward(nx.mul(theta, theta))


def test_gradients_accumulate_over_shared_use():
    x = leaf([3.0])
    y = nx.add(nx.mul(x, x), nx.scale(x, 2.0))
    assert nx.gradients(nx.sum(y), {"x": x})["x"].tolist() == [8.0]


def test_tape_is_deterministic():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(6, 3))
    run = lambda: nx.layer_norm(nx.relu(nx.matmul(Tensor(a), Tensor(b)))).data.tobytes()  # noqa: E731
    assert run() == run()


def test_adam_single_step_closed_form():
    p = {"w": Tensor(np.zeros(1))}
    state = adam_step(p, AdamState(lr=1e-3), {"w": np.ones(1)})
    assert state.t == 1
    assert p["w"].data[0] == pytest.approx(-1e-3, rel=1e-6)


def test_adam_zero_gradient():
    p = {"w": Tensor(np.array([0.5, -2.0]))}
    state = adam_step(p, AdamState(), {"w": np.zeros(2)})
    assert p["w"].data.tolist() == [0.5, -2.0]
    assert state.t == 1


def test_adam_two_steps_match_recurrence():
    g, lr, b1, b2, eps = 0.7, 1e-2, 0.9, 0.999, 1e-8
    theta, m, v = 0.3, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    p = {"w": Tensor(np.array([0.3]))}
    state = AdamState(lr=lr)
    for _ in range(2):
        adam_step(p, state, {"w": np.array([g])})
    assert abs(p["w"].data[0] - theta) < 1e-12


def test_adam_rejects_non_finite_gradient():
    p = {"enc.w": Tensor(np.zeros(2))}
    with pytest.raises(OptimizerError, match="enc.w"):
        adam_step(p, AdamState(), {"enc.w": np.array([1.0, np.nan])})
