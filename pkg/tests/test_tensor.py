"""Tensor engine: forward semantics against scalar oracles, vjps against
central finite differences, and purity/broadcast properties."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roikit import tensor as T
from roikit.precision import precision
from roikit.tensor import ShapeError
from roikit.verify import finite_difference_grad, gradcheck


def test_matmul_identity():
    out = T.matmul(T.tensor([[1.0, 0.0], [0.0, 1.0]]), T.tensor([[2.0, 3.0], [4.0, 5.0]]))
    np.testing.assert_array_equal(out.data, [[2.0, 3.0], [4.0, 5.0]])


def test_matmul_hand_checked():
    out = T.matmul(T.tensor([[1.0, 2.0]]), T.tensor([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((2, 2))))


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    a0 = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    probe = rng.standard_normal((3, 2))
    ok, margin = gradcheck(
        lambda x: T.tsum(T.mul(T.matmul(x, T.tensor(b)), T.tensor(probe))), a0)
    assert ok, f"margin {margin}"


def test_softmax_symmetry():
    out = T.softmax(T.tensor([0.0, 0.0]), axis=-1)
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_softmax_masked_entry_is_exact_zero():
    out = T.softmax(T.tensor([100.0, -3.0]), axis=-1,
                    mask=np.array([True, False]))
    np.testing.assert_array_equal(out.data, [1.0, 0.0])


def test_softmax_against_direct_exp_sum():
    with precision("f64"):
        x = np.array([1.0, 2.0, 3.0])
        got = T.softmax(T.tensor(x), axis=-1).data
    e = np.exp(x)
    want = e / e.sum()
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


def test_softmax_fully_masked_slice_raises():
    with pytest.raises(ValueError, match="fully-masked"):
        T.softmax(T.tensor([[1.0, 2.0]]), axis=-1, mask=np.zeros((1, 2), dtype=bool))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_partition_of_unity(vals):
    with precision("f64"):
        out = T.softmax(T.tensor(np.array(vals)), axis=-1)
    assert abs(out.data.sum() - 1.0) <= 1e-9
    assert (out.data >= 0).all()


def test_conv1x1_identity_weight():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 4))
    out = T.conv1x1(T.tensor(x), T.tensor(np.eye(3)))
    np.testing.assert_allclose(out.data, x.astype(out.data.dtype), rtol=0, atol=0)


def test_conv1x1_zero_weight_gives_bias():
    x = np.random.default_rng(2).standard_normal((1, 3, 2, 2))
    out = T.conv1x1(T.tensor(x), T.tensor(np.zeros((1, 3))), T.tensor([0.75]))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 0.75, dtype=out.data.dtype))


def test_conv1x1_matches_scalar_loop():
    with precision("f64"):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((1, 3, 2, 2))
        w = rng.standard_normal((1, 3))
        got = T.conv1x1(T.tensor(x), T.tensor(w)).data
        want = np.zeros((1, 1, 2, 2))
        for i in range(2):
            for j in range(2):
                acc = 0.0
                for c in range(3):
                    acc += w[0, c] * x[0, c, i, j]
                want[0, 0, i, j] = acc
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_add_zeros_is_identity():
    x = np.random.default_rng(4).standard_normal((3, 3))
    out = T.add(T.tensor(x), T.tensor(np.zeros((3, 3))))
    np.testing.assert_array_equal(out.data, x.astype(out.data.dtype))


def test_layer_norm_constant_slice_is_zero():
    out = T.layer_norm(T.tensor(np.full((2, 5), 3.7)), axis=-1)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_silu_grad_matches_finite_differences():
    x0 = np.random.default_rng(5).standard_normal((2, 5))
    ok, margin = gradcheck(lambda x: T.tsum(T.silu(x)), x0)
    assert ok, f"margin {margin}"


def test_silu_extreme_inputs_do_not_overflow():
    out = T.silu(T.tensor(np.array([-1e4, 0.0, 1e4])))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data, [0.0, 0.0, 1e4], rtol=1e-6, atol=1e-12)


def test_broadcast_incompatibility_raises():
    with pytest.raises(ShapeError):
        T.add(T.tensor(np.zeros((2, 3))), T.tensor(np.zeros((4,))))


def test_backward_accumulates_through_shared_node():
    # y = x*x used twice: d/dx (x*x + x*x) = 4x.
    with precision("f64"):
        x = T.tensor(np.array([1.5, -2.0]), requires_grad=True)
        sq = T.mul(x, x)
        T.tsum(T.add(sq, sq)).backward()
    np.testing.assert_allclose(x.grad, 4 * x.data, rtol=0, atol=0)


def test_backward_without_scalar_seed_raises():
    x = T.tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.add(x, x).backward()


def test_broadcast_add_gradient_sums():
    with precision("f64"):
        bias = T.tensor(np.array([1.0, 2.0]), requires_grad=True)
        x = T.tensor(np.zeros((3, 2)))
        T.tsum(T.add(x, bias)).backward()
    np.testing.assert_array_equal(bias.grad, [3.0, 3.0])


@pytest.mark.parametrize("op,shape", [
    ("tsum_axis", (3, 4)),
    ("tmean", (2, 5)),
    ("layer_norm", (2, 6)),
    ("softmax", (3, 5)),
    ("tanh", (2, 4)),
])
def test_op_gradients(op, shape):
    rng = np.random.default_rng(hash(op) % (2 ** 32))
    probe = rng.standard_normal(shape)
    builders = {
        "tsum_axis": lambda x: T.tsum(T.mul(T.tsum(x, axis=0, keepdims=True),
                                            T.tensor(probe[:1]))),
        "tmean": lambda x: T.tmean(T.mul(x, T.tensor(probe))),
        "layer_norm": lambda x: T.tsum(T.mul(T.layer_norm(x, axis=-1), T.tensor(probe))),
        "softmax": lambda x: T.tsum(T.mul(T.softmax(x, axis=-1), T.tensor(probe))),
        "tanh": lambda x: T.tsum(T.mul(T.tanh(x), T.tensor(probe))),
    }
    ok, margin = gradcheck(builders[op], rng.standard_normal(shape))
    assert ok, f"{op} margin {margin}"


def test_conv2d_matches_scalar_loop():
    with precision("f64"):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        got = T.conv2d(T.tensor(x), T.tensor(w)).data
        want = np.zeros((1, 3, 5, 5))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(5):
                for j in range(5):
                    acc = 0.0
                    for c in range(2):
                        for di in range(3):
                            for dj in range(3):
                                acc += w[o, c, di, dj] * xp[0, c, i + di, j + dj]
                    want[0, o, i, j] = acc
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_stride2_grad():
    rng = np.random.default_rng(8)
    w = rng.standard_normal((2, 2, 3, 3))
    probe = rng.standard_normal((1, 2, 3, 3))
    ok, margin = gradcheck(
        lambda x: T.tsum(T.mul(T.conv2d(x, T.tensor(w), stride=2), T.tensor(probe))),
        rng.standard_normal((1, 2, 6, 6)))
    assert ok, f"margin {margin}"


def test_upsample2_and_grad():
    with precision("f64"):
        x = T.tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]), requires_grad=True)
        up = T.upsample2(x)
        np.testing.assert_array_equal(
            up.data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
        T.tsum(up).backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[4.0, 4.0], [4.0, 4.0]])


def test_concat_narrow_round_trip():
    with precision("f64"):
        a = T.tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        b = T.tensor(np.arange(4.0).reshape(2, 2), requires_grad=True)
        cat = T.concat([a, b], axis=1)
        back = T.narrow(cat, 1, 0, 3)
        np.testing.assert_array_equal(back.data, a.data)
        T.tsum(T.narrow(cat, 1, 3, 2)).backward()
    np.testing.assert_array_equal(a.grad, np.zeros((2, 3)))
    np.testing.assert_array_equal(b.grad, np.ones((2, 2)))


def test_gather_rows_grad_accumulates_repeats():
    with precision("f64"):
        table = T.tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
        out = T.gather_rows(table, np.array([1, 1, 3]))
        T.tsum(out).backward()
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_ops_are_pure():
    x = T.tensor(np.random.default_rng(9).standard_normal((3, 3)))
    first = T.softmax(x, axis=-1).data.copy()
    second = T.softmax(x, axis=-1).data
    np.testing.assert_array_equal(first, second)


def test_scalars_are_shape_one():
    assert T.tensor(2.5).shape == (1,)
    assert T.tsum(T.tensor(np.ones((2, 2)))).shape == (1,)


def test_finite_difference_helper_on_quadratic():
    # d/dx sum(x^2) = 2x, exact for central differences on a quadratic.
    x = np.array([1.0, -2.0, 0.5])
    g = finite_difference_grad(lambda a: float((a ** 2).sum()), x.copy())
    np.testing.assert_allclose(g, 2 * x, rtol=1e-9, atol=1e-9)
