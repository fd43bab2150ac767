import numpy as np
import pytest

from coopnet import autograd as ag
from coopnet.errors import ContractError, ShapeError


def test_zeros_and_constant():
    z = ag.zeros([2, 2])
    assert z.shape == (2, 2)
    assert np.array_equal(z.data, np.zeros((2, 2), dtype=np.float32))
    c = ag.full([3], 1.5)
    assert np.array_equal(c.data, np.array([1.5, 1.5, 1.5], dtype=np.float32))


def test_bad_extents_rejected():
    with pytest.raises(ShapeError):
        ag.zeros([0, 2])
    with pytest.raises(ShapeError):
        ag.zeros([-1])
    with pytest.raises(ShapeError):
        ag.zeros([])


def test_uniform_same_seed_identical_buffers():
    a = ag.uniform([4], 0.0, 1.0, ag.RngState(42))
    b = ag.uniform([4], 0.0, 1.0, ag.RngState(42))
    assert a.data.tobytes() == b.data.tobytes()
    c = ag.uniform([4], 0.0, 1.0, ag.RngState(43))
    assert a.data.tobytes() != c.data.tobytes()


def test_uniform_bounds_and_gaussian_sigma_validated():
    rng = ag.RngState(0)
    with pytest.raises(ShapeError):
        ag.uniform([2], 1.0, 1.0, rng)
    with pytest.raises(ShapeError):
        ag.gaussian([2], 0.0, 0.0, rng)


def test_gaussian_deterministic_across_instances():
    a = ag.gaussian([8], 0.0, 1.0, ag.RngState(7), dtype="f64")
    b = ag.gaussian([8], 0.0, 1.0, ag.RngState(7), dtype="f64")
    assert a.data.tobytes() == b.data.tobytes()


def test_rng_child_streams_are_stable_and_distinct():
    root = ag.RngState(123)
    c1 = root.child("epoch/0")
    c2 = ag.RngState(123).child("epoch/0")
    c3 = root.child("epoch/1")
    assert c1.seed == c2.seed
    assert c1.seed != c3.seed


def test_scalars_are_rank1_length1():
    t = ag.tensor(3.0)
    assert t.shape == (1,)
    assert t.item() == 3.0


# -- matmul -------------------------------------------------------------------


def _matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def test_matmul_identity():
    eye = ag.tensor(np.eye(2))
    x = ag.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ag.matmul(eye, x).data, x.data)


def test_matmul_hand_case():
    a = ag.tensor([[1.0, 2.0]])
    b = ag.tensor([[3.0], [4.0]])
    assert ag.matmul(a, b).data.tolist() == [[11.0]]


def test_matmul_against_triple_loop(rel):
    rng = np.random.default_rng(0)
    a = ag.tensor(rng.normal(size=(5, 7)), dtype="f64")
    b = ag.tensor(rng.normal(size=(7, 3)), dtype="f64")
    got = ag.matmul(a, b).data
    want = _matmul_oracle(a.data, b.data)
    assert np.abs(got - want).max() < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ag.matmul(ag.zeros([2, 3]), ag.zeros([4, 2]))


# -- backward -----------------------------------------------------------------


def test_backward_product_rule():
    x = ag.tensor([[2.0]])
    w = ag.tensor([[3.0]], requires_grad=True)
    loss = ag.sum_all(ag.matmul(x, w))
    grads = loss.backward()
    assert grads[w].tolist() == [[2.0]]
    assert w.grad.tolist() == [[2.0]]


def test_backward_sum_of_squares():
    x = ag.tensor([1.0, -2.0], requires_grad=True)
    loss = ag.sum_all(ag.mul(x, x))
    loss.backward()
    assert x.grad.tolist() == [2.0, -4.0]


def test_backward_requires_scalar():
    x = ag.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        ag.mul(x, x).backward()


def test_backward_twice_errors():
    x = ag.tensor([1.0], requires_grad=True)
    loss = ag.sum_all(ag.mul(x, x))
    loss.backward()
    with pytest.raises(ContractError):
        loss.backward()


def test_backward_accumulates_across_graphs():
    # Two separate graphs over the same leaf add their gradients; the trainer
    # is responsible for zeroing between steps.
    x = ag.tensor([1.0, 2.0], requires_grad=True)
    ag.sum_all(ag.mul(x, x)).backward()
    first = x.grad.copy()
    ag.sum_all(ag.mul(x, x)).backward()
    assert np.array_equal(x.grad, 2 * first)


def test_backward_unreachable_leaf_gets_no_entry():
    x = ag.tensor([1.0], requires_grad=True)
    unused = ag.tensor([5.0], requires_grad=True)
    grads = ag.sum_all(x).backward()
    assert unused not in grads
    assert unused.grad is None


def test_backward_composite_matches_finite_differences(rel):
    rng = np.random.default_rng(3)
    w = ag.tensor(rng.normal(size=(4, 3)), dtype="f64", requires_grad=True)

    def f(v: ag.Tensor) -> ag.Tensor:
        h = ag.matmul(v, w)
        return ag.sum_all(ag.mul(h, h))

    x = ag.tensor(rng.normal(size=(2, 4)), dtype="f64", requires_grad=True)
    f(x).backward()
    fd = ag.finite_difference_grad(f, x, eps=1e-5)
    assert rel(x.grad, fd) < 1e-4


def test_graph_construction_leaves_inputs_unmodified():
    x = ag.tensor([[1.0, -2.0], [0.5, 3.0]], requires_grad=True)
    before = x.data.copy()
    loss = ag.sum_all(ag.mul(ag.add(x, x), x))
    loss.backward()
    assert np.array_equal(x.data, before)


# -- finite differences ---------------------------------------------------------


def test_fd_sum_of_squares():
    got = ag.finite_difference_grad(
        lambda t: ag.sum_all(ag.mul(t, t)), ag.tensor([3.0], dtype="f64"))
    assert abs(got[0] - 6.0) < 1e-6


def test_fd_constant_function_is_zero():
    got = ag.finite_difference_grad(
        lambda t: ag.tensor(1.0, dtype="f64"), ag.tensor([1.0, 2.0], dtype="f64"))
    assert np.array_equal(got, np.zeros(2))


def test_fd_leaky_relu_negative_side():
    from coopnet.layers import leaky_relu
    got = ag.finite_difference_grad(
        lambda t: ag.sum_all(leaky_relu(t, 0.1)), ag.tensor([-1.0], dtype="f64"))
    assert abs(got[0] - 0.1) < 1e-6


def test_fd_eps_validated():
    with pytest.raises(ContractError):
        ag.finite_difference_grad(lambda t: ag.sum_all(t),
                                  ag.tensor([1.0], dtype="f64"), eps=0.0)
