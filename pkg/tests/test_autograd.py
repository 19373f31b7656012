import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dress import autograd as ag
from dress.errors import DimensionError, NumericError

TOL = 1e-6


def naive_matmul(a, b):
    m, n = a.shape
    k = b.shape[1]
    out = np.zeros((m, k))
    for i in range(m):
        for j in range(k):
            for t in range(n):
                out[i, j] += a[i, t] * b[t, j]
    return out


def test_matmul_triple_loop(rng):
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(ag.matmul(a, b).data, naive_matmul(a, b), rtol=1e-13)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        ag.matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(DimensionError):
        ag.matmul(np.ones((2, 2, 3)), np.ones((3, 3, 1)))


def _probe(rng, shape):
    return rng.standard_normal(shape)


@pytest.mark.parametrize("batched", [False, True])
def test_grad_matmul(rng, batched):
    a = rng.standard_normal((2, 3, 4) if batched else (3, 4))
    b = rng.standard_normal((2, 4, 5) if batched else (4, 5))
    w = _probe(rng, a.shape[:-1] + (5,))
    assert ag.grad_check(lambda t: ag.sum_(ag.mul(ag.matmul(t, b), w)), ag.Tensor(a)) < TOL
    assert ag.grad_check(lambda t: ag.sum_(ag.mul(ag.matmul(a, t), w)), ag.Tensor(b)) < TOL


def test_grad_add_broadcast(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal(4)
    w = _probe(rng, (3, 4))
    assert ag.grad_check(lambda t: ag.sum_(ag.mul(ag.add(a, t), w)), ag.Tensor(b)) < TOL


def test_grad_elementwise(rng):
    x = rng.standard_normal((4, 6))
    w = _probe(rng, x.shape)
    assert ag.grad_check(lambda t: ag.sum_(ag.mul(ag.gelu(t), w)), ag.Tensor(x)) < TOL
    assert ag.grad_check(lambda t: ag.sum_(ag.mul(ag.abs_(t), w)), ag.Tensor(x)) < TOL
    assert ag.grad_check(lambda t: ag.sum_(ag.scale(ag.mul(t, t), 0.3)), ag.Tensor(x)) < TOL


def test_grad_reshape_transpose(rng):
    x = rng.standard_normal((2, 3, 4))
    w = _probe(rng, (4, 2, 3))
    f = lambda t: ag.sum_(ag.mul(ag.transpose(ag.reshape(t, (2, 3, 4)), (2, 0, 1)), w))  # noqa: E731
    assert ag.grad_check(f, ag.Tensor(x)) < TOL


def test_grad_embedding(rng):
    table = rng.standard_normal((6, 3))
    ids = np.array([[0, 2, 2], [5, 0, 1]])
    w = _probe(rng, (2, 3, 3))
    assert ag.grad_check(lambda t: ag.sum_(ag.mul(ag.embedding(t, ids), w)), ag.Tensor(table)) < TOL
    with pytest.raises(IndexError):
        ag.embedding(table, np.array([6]))


def test_grad_rmsnorm(rng):
    x, a, b = rng.standard_normal((3, 5, 7)), rng.standard_normal(7), rng.standard_normal(7)
    w = _probe(rng, x.shape)
    for which in range(3):
        args = [x, a, b]

        def f(t, which=which):
            args2 = list(args)
            args2[which] = t
            return ag.sum_(ag.mul(ag.rmsnorm(*args2, 1e-6), w))

        assert ag.grad_check(f, ag.Tensor(args[which])) < TOL


def test_grad_causal_softmax(rng):
    s = rng.standard_normal((2, 5, 5))
    w = _probe(rng, s.shape)
    assert ag.grad_check(lambda t: ag.sum_(ag.mul(ag.causal_softmax(t, 0.6), w)), ag.Tensor(s)) < TOL


def test_grad_cross_entropy_with_ignored(rng):
    logits = rng.standard_normal((2, 4, 6))
    tgt = rng.integers(0, 6, (2, 4))
    tgt[:, -1] = -1
    assert ag.grad_check(lambda t: ag.cross_entropy(t, tgt), ag.Tensor(logits)) < TOL
    # ignored rows receive no gradient
    t = ag.Tensor(logits, requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.cross_entropy(t, tgt))
    assert np.all(t.grad[:, -1] == 0)


def test_cross_entropy_errors():
    with pytest.raises(IndexError):
        ag.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))
    with pytest.raises(DimensionError):
        ag.cross_entropy(np.zeros((2, 3)), np.array([-1, -1]))


@pytest.mark.parametrize("axis", ["rows", "columns", "elements"])
@pytest.mark.parametrize("ord_", ["l1", "l2"])
@pytest.mark.parametrize("reduce", ["sum", "norm"])
def test_grad_group_norm(rng, axis, ord_, reduce):
    m = rng.standard_normal(7) if axis == "elements" else rng.standard_normal((6, 5))
    idx = [1, 3, 4]
    assert ag.grad_check(lambda t: ag.group_norm(t, idx, axis, ord_, reduce), ag.Tensor(m)) < TOL


def test_group_norm_values(rng):
    m = rng.standard_normal((6, 5))
    idx = [0, 4]
    cols = np.array([np.sqrt(sum(m[i, j] ** 2 for i in idx)) for j in range(5)])
    assert ag.group_norm(m, idx, "rows", "l2").item() == pytest.approx(cols.sum(), rel=1e-14)
    assert ag.group_norm(m, idx, "rows", "l2", "norm").item() == pytest.approx(np.linalg.norm(cols), rel=1e-14)
    assert ag.group_norm(m, idx, "columns", "l1").item() == pytest.approx(np.abs(m[:, idx]).sum(), rel=1e-14)
    assert ag.group_norm(m, [], "rows", "l2").item() == 0.0


def test_group_norm_zero_column_has_zero_subgradient():
    m = np.zeros((4, 3))
    t = ag.Tensor(m, requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.group_norm(t, [0, 1], "rows", "l2"))
    assert np.all(t.grad == 0)


def test_no_tape_records_nothing(rng):
    t = ag.Tensor(rng.standard_normal(3), requires_grad=True)
    out = ag.sum_(ag.mul(t, t))
    assert out.node is None and not out.requires_grad


def test_gradient_accumulates_over_reuse(rng):
    x = rng.standard_normal(4)
    t = ag.Tensor(x, requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.sum_(ag.add(ag.mul(t, t), t)))
    np.testing.assert_allclose(t.grad, 2 * x + 1, rtol=1e-15)


def test_non_finite_rejected():
    with pytest.raises(NumericError):
        ag.Tensor([1.0, np.nan])


def test_grad_check_eps_bounds(rng):
    with pytest.raises(ValueError):
        ag.grad_check(lambda t: ag.sum_(t), ag.Tensor(np.ones(2)), eps=0.1)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_matmul_vjp_identity(m, n, k, seed):
    # <g, A B> equals <A^T g, B> and <g B^T, A>
    r = np.random.default_rng(seed)
    a, b, g = r.standard_normal((m, n)), r.standard_normal((n, k)), r.standard_normal((m, k))
    ta, tb = ag.Tensor(a, requires_grad=True), ag.Tensor(b, requires_grad=True)
    with ag.Tape() as tape:
        tape.backward(ag.sum_(ag.mul(ag.matmul(ta, tb), g)))
    np.testing.assert_allclose(ta.grad, g @ b.T, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(tb.grad, a.T @ g, rtol=1e-12, atol=1e-12)
