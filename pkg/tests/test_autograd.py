"""Every differentiable op against central finite differences in float64."""
import numpy as np
import pytest

from eaglet import autograd as ag
from eaglet.training import gradcheck

TOL = 1e-5
rng = np.random.default_rng(7)


def r(*shape):
    return rng.standard_normal(shape)


def loss_of(out: ag.Var, probe: np.ndarray) -> ag.Var:
    # random linear functional so every output entry contributes a distinct weight
    return ag.sum_all(ag.mul(out, ag.Var(probe)))


CASES = {
    "add": ({"a": r(3, 4), "b": r(4)}, lambda v: ag.add(v["a"], v["b"])),
    "sub": ({"a": r(3, 4), "b": r(3, 4)}, lambda v: ag.sub(v["a"], v["b"])),
    "mul": ({"a": r(2, 3), "b": r(2, 3)}, lambda v: ag.mul(v["a"], v["b"])),
    "scale": ({"a": r(5)}, lambda v: ag.scale(v["a"], -1.7)),
    "matmul": ({"a": r(2, 3, 4), "b": r(2, 4, 5)}, lambda v: ag.matmul(v["a"], v["b"])),
    "linear": ({"x": r(2, 3, 4), "w": r(5, 4), "b": r(5)}, lambda v: ag.linear(v["x"], v["w"], v["b"])),
    "mean": ({"a": r(3, 4)}, lambda v: ag.mean(v["a"], axis=0)),
    "reshape": ({"a": r(2, 6)}, lambda v: ag.reshape(v["a"], (3, 4))),
    "transpose": ({"a": r(2, 3, 4)}, lambda v: ag.transpose(v["a"], (2, 0, 1))),
    "concat": ({"a": r(2, 3), "b": r(2, 2)}, lambda v: ag.concat([v["a"], v["b"]], axis=1)),
    "getitem": ({"a": r(4, 5)}, lambda v: ag.getitem(v["a"], np.s_[1:3, ::2])),
    "broadcast_to": ({"a": r(1, 3)}, lambda v: ag.broadcast_to(v["a"], (4, 3))),
    "embedding": ({"t": r(6, 3)}, lambda v: ag.embedding(v["t"], np.array([[0, 2, 2], [5, 0, 1]]))),
    "pad_time": ({"a": r(2, 3, 2)}, lambda v: ag.pad_time(v["a"], 1, 2)),
    "pool_time": ({"a": r(2, 7, 3)}, lambda v: ag.pool_time(v["a"], 3)),
    "silu": ({"a": r(3, 4)}, lambda v: ag.silu(v["a"])),
    "gelu": ({"a": r(3, 4)}, lambda v: ag.gelu(v["a"])),
    "softmax": ({"a": r(2, 5)}, lambda v: ag.softmax(v["a"])),
    "softmax_masked": ({"a": r(3, 3)}, lambda v: ag.softmax(v["a"], np.triu(np.ones((3, 3), bool), 1))),
    "rmsnorm": ({"a": r(2, 3, 6), "g": r(6)}, lambda v: ag.rmsnorm(v["a"], v["g"], 1e-5)),
    "rope": ({"a": r(2, 5, 8)}, lambda v: ag.rope(v["a"], np.arange(3, 8))),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradient(name):
    inputs, fn = CASES[name]
    probe = np.random.default_rng(1).standard_normal(fn({k: ag.Var(a) for k, a in inputs.items()}).shape)
    err = gradcheck(lambda v: loss_of(fn(v), probe), inputs)
    assert err <= TOL, f"{name}: relative error {err:.2e}"


def test_cross_entropy_gradient():
    targets = np.array([[1, 0, 3], [2, 2, 0]])
    weights = np.array([[1.0, 0.0, 1.0], [1.0, 1.0, 0.5]])
    err = gradcheck(lambda v: ag.cross_entropy(v["x"], targets, weights), {"x": r(2, 3, 4)})
    assert err <= TOL


def test_sum_of_squares_gradient_is_2x():
    x = ag.Var(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    ag.sum_all(ag.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])


def test_non_scalar_backward_rejected():
    x = ag.Var(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ag.scale(x, 2.0).backward()


def test_shared_subexpression_accumulates():
    x = ag.Var(np.array([3.0]), requires_grad=True)
    y = ag.mul(x, x)
    ag.sum_all(ag.add(y, y)).backward()
    assert x.grad[0] == pytest.approx(12.0)


def test_frozen_inputs_get_no_gradient():
    w = ag.Var(np.ones((2, 2)), requires_grad=True)
    frozen = ag.Var(np.ones((2, 2)))
    ag.sum_all(ag.matmul(w, frozen)).backward()
    assert w.grad is not None and frozen.grad is None


def test_no_grad_builds_no_graph():
    x = ag.Var(np.ones(2), requires_grad=True)
    with ag.no_grad():
        y = ag.mul(x, x)
    assert not y.requires_grad and y._parents == ()
