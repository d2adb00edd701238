"""Tensor engine: values, gradients, serialization."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from damix import numerics as nx
from damix.errors import NumericError, SerializationError, ShapeError
from damix.numerics import GradTape, Tensor

# Frozen oracle values.
# sigmoid(1) = 1 / (1 + e^-1), evaluated with the scalar math library.
SIGMOID_ONE = 0.7310585786300049
# [[1,2],[3,4]] @ [[5,6],[7,8]]: four dot products expanded by hand.
MATMUL_2X2 = [[19.0, 22.0], [43.0, 50.0]]


def rng(seed=0):
    return np.random.default_rng(seed)


def grad_of(f, *leaves):
    with GradTape() as tape:
        y = f()
    g = tape.gradients(y)
    return [g[leaf].data for leaf in leaves]


# ---------------------------------------------------------------------------
# Tensor basics


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0
    with pytest.raises(AttributeError):
        t.requires_grad = True


def test_tensor_copies_its_source():
    src = np.ones(3)
    t = Tensor(src)
    src[0] = 99.0
    assert t.data[0] == 1.0


def test_item_requires_single_element():
    assert Tensor(4.25).item() == 4.25
    with pytest.raises(ShapeError):
        Tensor([1.0, 2.0]).item()


def test_detach_severs_gradient_flow():
    x = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        y = nx.sum(nx.mul(x.detach(), x.detach()))
    assert tape.gradients(y).get(x) is None


# ---------------------------------------------------------------------------
# Forward values


def test_matmul_hand_expanded_product():
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, MATMUL_2X2)


def test_matmul_identity_and_annihilator():
    m = Tensor(rng(1).normal(size=(2, 2)))
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), m).data, m.data)
    np.testing.assert_array_equal(nx.matmul(Tensor(np.zeros((2, 2))), m).data, np.zeros((2, 2)))


def test_matmul_names_both_shapes_on_mismatch():
    with pytest.raises(ShapeError, match=r"2, 3.*2, 2"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_matmul_rejects_non_2d():
    with pytest.raises(ShapeError):
        nx.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


def test_sigmoid_values():
    assert nx.sigmoid(Tensor(0.0)).item() == 0.5
    assert nx.sigmoid(Tensor(1.0)).item() == pytest.approx(SIGMOID_ONE, abs=1e-12)
    # Large magnitudes must not overflow.
    big = nx.sigmoid(Tensor([-1000.0, 1000.0]))
    np.testing.assert_allclose(big.data, [0.0, 1.0], atol=1e-12)


def test_leaky_relu_values():
    out = nx.leaky_relu(Tensor([-1.0, 0.0, 2.0]), slope=0.01)
    np.testing.assert_array_equal(out.data, [-0.01, 0.0, 2.0])


def test_div_by_exact_zero_is_an_error():
    with pytest.raises(NumericError):
        nx.div(Tensor([1.0]), Tensor([0.0]))
    assert nx.div(Tensor([1.0]), Tensor([1e-300])).data[0] == pytest.approx(1e300, rel=1e-12)


def test_log_and_sqrt_domains():
    with pytest.raises(NumericError):
        nx.log(Tensor([0.0]))
    with pytest.raises(NumericError):
        nx.sqrt(Tensor([-1e-9]))


def test_reduction_values():
    assert nx.mean(Tensor([1.0, 3.0])).item() == 2.0
    assert nx.var(Tensor([1.0, 3.0])).item() == 1.0  # biased: ((1-2)^2+(3-2)^2)/2
    np.testing.assert_array_equal(
        nx.mean(Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=0).data, [2.0, 3.0]
    )
    assert nx.sum(Tensor([[1.0, 2.0]]), axis=1, keepdims=True).shape == (1, 1)


def test_empty_reduction_is_an_error():
    with pytest.raises(NumericError):
        nx.mean(Tensor(np.zeros((0, 3))), axis=0)
    with pytest.raises(NumericError):
        nx.sum(Tensor(np.zeros((0,))))


def test_take_gathers_rows_and_checks_bounds():
    x = Tensor([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    np.testing.assert_array_equal(nx.take(x, [2, 0]).data, [[4.0, 5.0], [0.0, 1.0]])
    np.testing.assert_array_equal(nx.take(x, [1], axis=1).data, [[1.0], [3.0], [5.0]])
    with pytest.raises(ShapeError):
        nx.take(x, [3])


def test_concat_values_and_bad_axis_shapes():
    a, b = Tensor([[1.0]]), Tensor([[2.0]])
    np.testing.assert_array_equal(nx.concat([a, b], axis=0).data, [[1.0], [2.0]])
    with pytest.raises(ShapeError):
        nx.concat([Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3)))], axis=0)


# ---------------------------------------------------------------------------
# Tape semantics


def test_tape_is_single_use():
    tape = GradTape()
    with tape:
        pass
    with pytest.raises(RuntimeError):
        tape.__enter__()


def test_gradient_seed_must_be_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = nx.mul(x, x)
    with pytest.raises(ShapeError):
        tape.gradients(y)


def test_gradients_map_lookup():
    x = Tensor([1.0], requires_grad=True)
    other = Tensor([1.0], requires_grad=True)
    with GradTape() as tape:
        y = nx.sum(x)
    grads = tape.gradients(y)
    np.testing.assert_array_equal(grads[x].data, [1.0])
    assert grads.get(other) is None
    with pytest.raises(KeyError):
        grads[other]


def test_stop_recording_suppresses_entries():
    x = Tensor([2.0], requires_grad=True)
    with GradTape() as tape:
        with nx.stop_recording():
            hidden = nx.mul(x, x)
        y = nx.sum(nx.add(hidden, x))
    g = tape.gradients(y)
    np.testing.assert_array_equal(g[x].data, [1.0])


def test_reused_operand_accumulates():
    x = Tensor([3.0], requires_grad=True)
    (g,) = grad_of(lambda: nx.sum(nx.mul(x, x)), x)
    np.testing.assert_array_equal(g, [6.0])


def test_gradient_matches_leaf_shape():
    x = Tensor(rng(2).normal(size=(3, 1, 4)), requires_grad=True)
    (g,) = grad_of(lambda: nx.sum(nx.mul(x, Tensor(np.ones((3, 5, 4))))), x)
    assert g.shape == (3, 1, 4)


# ---------------------------------------------------------------------------
# Gradient correctness (finite differences)


def fd_ok(f, x, tol=1e-4):
    report = nx.check_gradients(f, x, tol=tol)
    assert report.passed, str(report)


def test_unary_op_gradients():
    r = rng(3)
    x = Tensor(r.uniform(-2.0, 2.0, size=(3, 4)))
    fd_ok(lambda t: nx.sum(nx.sigmoid(t)), x)
    fd_ok(lambda t: nx.sum(nx.leaky_relu(t, slope=0.07)), Tensor(r.uniform(0.1, 2.0, size=(3, 4))))
    fd_ok(lambda t: nx.sum(nx.exp(t)), x)
    fd_ok(lambda t: nx.sum(nx.neg(t)), x)
    pos = Tensor(r.uniform(0.5, 2.0, size=(3, 4)))
    fd_ok(lambda t: nx.sum(nx.log(t)), pos)
    fd_ok(lambda t: nx.sum(nx.sqrt(t)), pos)


def test_binary_op_gradients_with_broadcasting():
    r = rng(4)
    a = Tensor(r.uniform(-2.0, 2.0, size=(4, 3)))
    b = Tensor(r.uniform(0.5, 2.0, size=(1, 3)))
    w = Tensor(r.uniform(-1.0, 1.0, size=(4, 3)))
    for op in (nx.add, nx.sub, nx.mul, nx.div):
        fd_ok(lambda t, op=op: nx.sum(nx.mul(op(t, b), w)), a)
        fd_ok(lambda t, op=op: nx.sum(nx.mul(op(a, t), w)), b)


def test_matmul_gradients():
    r = rng(5)
    a = Tensor(r.uniform(-2.0, 2.0, size=(3, 4)))
    b = Tensor(r.uniform(-2.0, 2.0, size=(4, 2)))
    w = Tensor(r.uniform(-1.0, 1.0, size=(3, 2)))
    fd_ok(lambda t: nx.sum(nx.mul(nx.matmul(t, b), w)), a)
    fd_ok(lambda t: nx.sum(nx.mul(nx.matmul(a, t), w)), b)


@pytest.mark.parametrize("axis,keepdims", [(None, False), (0, False), (1, True), ((0, 2), False)])
def test_reduction_gradients(axis, keepdims):
    r = rng(6)
    x = Tensor(r.uniform(-2.0, 2.0, size=(3, 2, 4)))

    def weighted(reduce):
        def f(t):
            red = reduce(t, axis=axis, keepdims=keepdims)
            w = Tensor(rng(7).uniform(-1.0, 1.0, size=red.shape))
            return nx.sum(nx.mul(red, w))

        return f

    fd_ok(weighted(nx.sum), x)
    fd_ok(weighted(nx.mean), x)
    fd_ok(weighted(nx.var), x)


def test_shape_op_gradients():
    r = rng(8)
    x = Tensor(r.uniform(-2.0, 2.0, size=(2, 3, 4)))
    w = Tensor(r.uniform(-1.0, 1.0, size=(4, 3, 2)))
    flat_w = Tensor(r.normal(size=(6, 4)))
    fd_ok(lambda t: nx.sum(nx.mul(nx.transpose(t, (2, 1, 0)), w)), x)
    fd_ok(lambda t: nx.sum(nx.mul(nx.reshape(t, (6, 4)), flat_w)), x)
    fd_ok(lambda t: nx.sum(nx.take(t, [1, 1, 0], axis=0)), x)


def test_take_gradient_accumulates_repeats():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    (g,) = grad_of(lambda: nx.sum(nx.take(x, [0, 0, 2])), x)
    np.testing.assert_array_equal(g, [2.0, 0.0, 1.0])


def test_concat_gradient_splits():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0, 4.0], [5.0, 6.0]], requires_grad=True)
    ga, gb = grad_of(
        lambda: nx.sum(nx.mul(nx.concat([a, b], axis=0), Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))),
        a,
        b,
    )
    np.testing.assert_array_equal(ga, [[1.0, 2.0]])
    np.testing.assert_array_equal(gb, [[3.0, 4.0], [5.0, 6.0]])


# ---------------------------------------------------------------------------
# Library-level properties


def test_matmul_associativity():
    r = rng(9)
    for _ in range(20):
        a = r.uniform(-2.0, 2.0, size=(3, 4))
        b = r.uniform(-2.0, 2.0, size=(4, 5))
        c = r.uniform(-2.0, 2.0, size=(5, 2))
        left = nx.matmul(nx.matmul(Tensor(a), Tensor(b)), Tensor(c)).data
        right = nx.matmul(Tensor(a), nx.matmul(Tensor(b), Tensor(c))).data
        denom = max(1.0, np.abs(left).max(), np.abs(right).max())
        assert np.abs(left - right).max() / denom <= 1e-10


def test_broadcast_gradient_equals_summed_materialized_gradient():
    r = rng(10)
    a = Tensor(r.normal(size=(5, 3)))
    row = Tensor(r.normal(size=(1, 3)), requires_grad=True)
    full = Tensor(np.broadcast_to(row.data, (5, 3)), requires_grad=True)
    (g_row,) = grad_of(lambda: nx.sum(nx.mul(a, row)), row)
    (g_full,) = grad_of(lambda: nx.sum(nx.mul(a, full)), full)
    np.testing.assert_allclose(g_row, g_full.sum(axis=0, keepdims=True), rtol=0, atol=0)


@settings(max_examples=30, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=4),
    c=st.integers(min_value=1, max_value=4),
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_mul_gradient_identity_under_broadcast(n, c, seed):
    r = rng(seed)
    a = Tensor(r.uniform(-2.0, 2.0, size=(n, c)), requires_grad=True)
    b = Tensor(r.uniform(-2.0, 2.0, size=(1, c)), requires_grad=True)
    ga, gb = grad_of(lambda: nx.sum(nx.mul(a, b)), a, b)
    np.testing.assert_allclose(ga, np.broadcast_to(b.data, (n, c)))
    np.testing.assert_allclose(gb, a.data.sum(axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# Gradient checker


def test_gradcheck_linear_function():
    report = nx.check_gradients(lambda t: nx.sum(t), Tensor(np.zeros((2, 3))))
    assert report.passed and report.max_rel_error == 0.0
    report = nx.check_gradients(lambda t: nx.sum(t), Tensor(rng(11).normal(size=(2, 3))))
    assert report.max_rel_error <= 1e-10


def test_gradcheck_quadratic():
    report = nx.check_gradients(lambda t: nx.sum(nx.mul(t, t)), Tensor([1.0, 2.0]), tol=1e-8)
    assert report.passed, str(report)
    np.testing.assert_array_equal(report.analytic.data, [2.0, 4.0])


def test_gradcheck_reports_failure():
    # Wrong-by-construction gradient: detach breaks one path of x*x.
    def f(t):
        return nx.sum(nx.mul(t, t.detach()))

    report = nx.check_gradients(f, Tensor([1.0, 2.0]))
    assert not report.passed
    assert report.max_rel_error > 1e-2


# ---------------------------------------------------------------------------
# Serialization


@pytest.mark.parametrize("shape", [(), (3,), (2, 3), (2, 1, 4)])
def test_binary_roundtrip_is_bitwise(tmp_path, shape):
    t = Tensor(rng(12).normal(size=shape))
    path = tmp_path / "t.dmx"
    nx.save_tensor(path, t)
    back = nx.load_tensor(path)
    assert back.shape == t.shape
    assert back.data.tobytes() == t.data.tobytes()


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.dmx"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(SerializationError):
        nx.load_tensor(path)


def test_load_rejects_truncated_payload(tmp_path):
    t = Tensor([1.0, 2.0, 3.0])
    path = tmp_path / "t.dmx"
    nx.save_tensor(path, t)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(SerializationError):
        nx.load_tensor(path)


def test_csv_loader(tmp_path):
    path = tmp_path / "fixture.csv"
    path.write_text("1.0,2.0\n3.5,-4.5\n")
    np.testing.assert_array_equal(nx.load_csv(path).data, [[1.0, 2.0], [3.5, -4.5]])
    single = tmp_path / "row.csv"
    single.write_text("7.0,8.0\n")
    assert nx.load_csv(single).shape == (1, 2)
