import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randmask.exceptions import InvalidInputError
from randmask.linalg import RngStream
from randmask.masking import (
    Mask,
    SparseUpdate,
    apply_update,
    gen_random_mask,
    gen_structured_mask,
    scatter_grad,
)

shapes = st.tuples(st.integers(1, 12), st.integers(1, 12))


@pytest.mark.parametrize("mode", ["bernoulli", "exact-count"])
def test_random_mask_extremes(mode):
    assert gen_random_mask((5, 7), 1.0, mode, RngStream(0)).count == 35
    assert gen_random_mask((5, 7), 0.0, mode, RngStream(0)).count == 0


def test_exact_count():
    mask = gen_random_mask((10, 10), 0.25, "exact-count", RngStream(3))
    assert mask.count == 25
    assert mask.coords.shape == (25, 2)
    assert gen_random_mask((64, 64), 0.01, "exact-count", RngStream(3)).count == 41


def test_bad_density_and_mode():
    with pytest.raises(InvalidInputError):
        gen_random_mask((3,), 1.5)
    with pytest.raises(InvalidInputError):
        gen_random_mask((3,), 0.5, "columns")
    with pytest.raises(InvalidInputError):
        gen_structured_mask((3, 3, 3), 0.5)


def test_bernoulli_density():
    rng = RngStream(5)
    fractions = np.array([gen_random_mask((100, 100), 0.1, "bernoulli", rng.split(k)).count / 10_000
                          for k in range(1000)])
    se = np.sqrt(0.1 * 0.9 / 10_000 / 1000)
    assert abs(fractions.mean() - 0.1) <= 3 * se


def test_structured_counts():
    mask = gen_structured_mask((4, 8), 0.25, RngStream(1))
    assert mask.count == 8
    assert len(np.unique(mask.coords[:, 1])) == 2
    assert gen_structured_mask((4, 8), 1.0).count == 32
    assert gen_structured_mask((4, 8), 0.0).count == 0


@settings(max_examples=50, deadline=None)
@given(shape=shapes, p=st.floats(0, 1), seed=st.integers(0, 2**32 - 1))
def test_structured_column_atomicity(shape, p, seed):
    mask = gen_structured_mask(shape, p, RngStream(seed))
    dense = mask.dense()
    cols = dense.any(axis=0)
    assert np.all(dense[:, cols] == 1.0)


def test_apply_update_examples():
    frozen = np.array([[1.0, 2.0], [3.0, 4.0]])
    empty = SparseUpdate(Mask.from_coords((2, 2), np.zeros((0, 2))))
    np.testing.assert_array_equal(apply_update(frozen, empty), frozen)
    v = np.array([1.0, -2.0, 3.0, 4.5])
    np.testing.assert_array_equal(apply_update(np.zeros((2, 2)), SparseUpdate(Mask.full((2, 2)), v)),
                                  v.reshape(2, 2))
    upd = SparseUpdate(Mask.from_coords((2, 2), [(0, 1)]), [5.0])
    np.testing.assert_array_equal(apply_update(frozen, upd), [[1.0, 7.0], [3.0, 4.0]])
    np.testing.assert_array_equal(frozen, [[1.0, 2.0], [3.0, 4.0]])


def test_scatter_grad_examples():
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(scatter_grad(g, Mask.full((2, 2))), g.ravel())
    assert scatter_grad(g, Mask.from_coords((2, 2), np.zeros((0, 2)))).size == 0
    np.testing.assert_array_equal(scatter_grad(g, Mask.from_coords((2, 2), [(1, 0)])), [3.0])


@settings(max_examples=50, deadline=None)
@given(shape=shapes, p=st.floats(0, 1), seed=st.integers(0, 2**32 - 1),
       a=st.floats(-10, 10), b=st.floats(-10, 10))
def test_update_roundtrip_and_linearity(shape, p, seed, a, b):
    rng = RngStream(seed)
    mask = gen_random_mask(shape, p, "bernoulli", rng)
    v1, v2 = rng.split(1).normal(mask.count), rng.split(2).normal(mask.count)
    upd = SparseUpdate(mask, v1)
    np.testing.assert_array_equal(scatter_grad(upd.dense(), mask), v1)
    W = rng.split(3).normal(shape)
    lhs = apply_update(W, SparseUpdate(mask, a * v1 + b * v2))
    rhs = a * apply_update(np.zeros(shape), SparseUpdate(mask, v1)) \
        + b * apply_update(np.zeros(shape), SparseUpdate(mask, v2)) + W
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_mask_json_roundtrip_and_determinism():
    mask = gen_random_mask((6, 9), 0.3, "exact-count", RngStream(9, 2))
    again = Mask.from_json(mask.to_json())
    assert again == mask
    assert (again.seed, again.stream_id) == (9, 2)
    assert gen_random_mask((6, 9), 0.3, "exact-count", RngStream(9, 2)) == mask
    assert not mask.flat.flags.writeable


def test_sparse_update_rejects_wrong_length():
    with pytest.raises(InvalidInputError):
        SparseUpdate(Mask.full((2,)), [1.0])
    with pytest.raises(InvalidInputError):
        Mask((3,), 0.5, "exact-count", [2, 1])
