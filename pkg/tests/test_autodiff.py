import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from graspreenact import autodiff as ad
from graspreenact.autodiff import Adam, NonFiniteError, Tape, TapeError, Tensor, backward, finite_diff_check

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_docstring_example():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    g = backward((x * x).sum())
    np.testing.assert_array_equal(g[x.id], [2.0, 4.0, 6.0])


def test_tensors_are_immutable():
    x = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        x.data[0] = 5.0


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        ad.div(Tensor([1.0]), Tensor([0.0]))


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(TapeError):
        backward(x * 2.0)


def test_unused_leaf_absent_from_gradients():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    g = backward((x * 3.0).sum())
    assert x.id in g and y.id not in g


def test_shared_subexpression_accumulates():
    x = Tensor(2.0, requires_grad=True)
    y = x * x
    g = backward(y + y)  # d/dx 2x^2 = 4x
    assert g[x.id] == pytest.approx(8.0)


def test_tape_order_parents_first():
    x = Tensor(np.ones(3), requires_grad=True)
    out = ad.tsum(ad.tanh(x) * x)
    tape = Tape.record(out)
    pos = {n.id: i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for p in node.parents:
            assert pos[p.id] < pos[node.id]
    assert [l.id for l in tape.leaves()] == [x.id]


def test_cycle_detected():
    a = Tensor(1.0, requires_grad=True)
    b = a * 2.0
    c = b * 3.0
    b.parents = (c,)  # corrupt the graph on purpose
    with pytest.raises(TapeError):
        Tape.record(c)


def test_min_max_first_index_wins():
    x = Tensor([1.0, 0.5, 0.5, 2.0], requires_grad=True)
    np.testing.assert_array_equal(backward(ad.tmin(x))[x.id], [0, 1, 0, 0])
    y = Tensor([3.0, 1.0, 3.0], requires_grad=True)
    np.testing.assert_array_equal(backward(ad.tmax(y))[y.id], [1, 0, 0])


def test_norm_subgradient_at_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    np.testing.assert_array_equal(backward(ad.norm(x))[x.id], np.zeros(3))


def test_gather_repeated_indices_accumulate():
    x = Tensor(np.arange(4.0), requires_grad=True)
    g = backward(ad.tsum(ad.take(x, [1, 1, 3])))
    np.testing.assert_array_equal(g[x.id], [0, 2, 0, 1])
    g = backward(ad.tsum(x[np.array([0, 0, 0])]))
    np.testing.assert_array_equal(g[x.id], [3, 0, 0, 0])


def test_sparse_matmul_matches_dense(rng):
    A = sp.random(6, 5, density=0.5, random_state=1, format="csr")
    x = rng.normal(size=(5, 2))
    np.testing.assert_allclose(ad.sparse_matmul(A, Tensor(x)).data, A.toarray() @ x)
    err = finite_diff_check(lambda t: ad.tsum(ad.square(ad.sparse_matmul(A, t))), x)
    assert err < 1e-6


OPS = {
    "add": lambda t: ad.tsum(t + t * 0.5),
    "sub_bcast": lambda t: ad.tsum(ad.square(t - ad.mean(t, axis=0))),
    "mul_div": lambda t: ad.tsum(t * t / (ad.square(t) + 1.0)),
    "tanh": lambda t: ad.tsum(ad.tanh(t)),
    "sin_cos": lambda t: ad.tsum(ad.sin(t) * ad.cos(t)),
    "sqrt": lambda t: ad.tsum(ad.sqrt(ad.square(t) + 1.0)),
    "abs": lambda t: ad.tsum(ad.tabs(t + 10.0)),
    "relu": lambda t: ad.tsum(ad.relu(t + 10.0)),
    "norm": lambda t: ad.tsum(ad.norm(t, axis=-1)),
    "matmul": lambda t: ad.tsum(ad.square(t @ ad.swapaxes(t, 0, 1))),
    "matvec": lambda t: ad.tsum(t @ np.arange(3.0)),
    "concat_stack": lambda t: ad.tsum(ad.square(ad.concat([t, ad.stack([t[0], t[1]])], axis=0))),
    "reshape": lambda t: ad.tsum(ad.reshape(t, (-1,)) * np.arange(t.size)),
    "mean_axis": lambda t: ad.tsum(ad.square(ad.mean(t, axis=1))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, rng):
    for _ in range(5):
        x = rng.normal(size=(4, 3))
        assert finite_diff_check(OPS[name], x) < 1e-6, name


def test_batched_matmul_gradient(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(4, 2))
    assert finite_diff_check(lambda t: ad.tsum(ad.square(t @ b)), a) < 1e-6
    assert finite_diff_check(lambda t: ad.tsum(ad.square(Tensor(a) @ t)), b) < 1e-6


def test_finite_diff_check_detects_wrong_gradient():
    def bad(t):
        # value t^2 but gradient of t^3: build via a custom node
        return Tensor._result(np.sum(t.data ** 2), (t,), lambda g: (3 * t.data ** 2 * g,), "bad")
    assert finite_diff_check(bad, np.array([1.0, 2.0])) > 0.1


def test_finite_diff_check_names_non_finite_coordinate():
    f = lambda t: ad.tsum(ad.sqrt(t + 5e-6))  # finite at x, not at x - step
    with pytest.raises(NonFiniteError, match="coordinate 1"):
        finite_diff_check(f, np.array([1.0, 0.0]))


def test_adam_first_step_is_lr_times_sign():
    opt = Adam(lr=0.1)
    new = opt.step({"w": np.array([1.0, -2.0])}, {"w": np.array([3.0, -0.5])})
    np.testing.assert_allclose(new["w"], [0.9, -1.9], rtol=1e-6)


def test_adam_minimises_quadratic():
    opt = Adam(lr=0.1)
    w = {"w": np.array([3.0, -4.0])}
    for _ in range(500):
        w = opt.step(w, {"w": 2 * w["w"]})
    assert np.abs(w["w"]).max() < 1e-2


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_add_mul_match_numpy(a, b):
    np.testing.assert_array_equal((Tensor(a) + Tensor(b)).data, a + b)
    np.testing.assert_array_equal((Tensor(a) * b).data, a * b)
    np.testing.assert_array_equal((a - Tensor(b)).data, a - b)


@given(arrays(np.float64, (5,), elements=finite))
def test_sum_gradient_is_ones(a):
    x = Tensor(a, requires_grad=True)
    np.testing.assert_array_equal(backward(x.sum())[x.id], np.ones(5))


@given(arrays(np.float64, (2, 3), elements=finite), st.floats(-2, 2))
def test_gradient_linear_in_output_scale(a, k):
    x = Tensor(a, requires_grad=True)
    g1 = backward(ad.tsum(ad.tanh(x)))[x.id]
    x2 = Tensor(a, requires_grad=True)
    g2 = backward(k * ad.tsum(ad.tanh(x2)))[x2.id]
    np.testing.assert_allclose(g2, k * g1, atol=1e-12)


def test_non_finite_gradient_names_op():
    x = Tensor(np.array([0.0, 1.0]), requires_grad=True)
    with pytest.raises(NonFiniteError, match="sqrt"):
        backward(ad.tsum(ad.sqrt(x)))
