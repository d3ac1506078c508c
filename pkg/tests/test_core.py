import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from efsgd.core import PartitionError, equal_partition, make_partition, norms, sign


def test_single_block():
    p = make_partition([4])
    assert p.ranges() == [range(0, 4)]
    assert p.dim == 4


def test_two_blocks_prefix_sums():
    p = make_partition([2, 3])
    assert p.ranges() == [range(0, 2), range(2, 5)]
    assert p.offsets == (0, 2, 5)
    assert p.dim == 5


@pytest.mark.parametrize("sizes", [[], [0], [3, 0, 2], [-1]])
def test_invalid_partitions(sizes):
    with pytest.raises(PartitionError):
        make_partition(sizes)


@given(st.lists(st.integers(1, 50), min_size=1, max_size=20))
def test_partition_round_trip(sizes):
    p = make_partition(sizes)
    assert list(p.sizes) == sizes
    covered = [i for r in p.ranges() for i in r]
    assert covered == list(range(sum(sizes)))


def test_equal_partition():
    assert equal_partition(10, 3).sizes == (4, 3, 3)
    with pytest.raises(PartitionError):
        equal_partition(3, 4)


@pytest.mark.parametrize("v, expected", [((0, 0), (0, 0)), ((3, -1), (4, 10)), ((1, 1, 1, 1), (4, 4))])
def test_norms_examples(v, expected):
    assert norms(np.array(v, dtype=float)) == expected


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=200)
@given(arrays(np.float64, st.integers(1, 40), elements=finite), finite)
def test_norms_permutation_and_scaling(v, c):
    l1, l2 = norms(v)
    perm = np.random.default_rng(0).permutation(len(v))
    assert norms(v[perm]) == pytest.approx((l1, l2), rel=1e-12, abs=1e-300)
    cl1, cl2 = norms(c * v)
    assert cl1 == pytest.approx(abs(c) * l1, rel=1e-12, abs=1e-300)
    assert cl2 == pytest.approx(c * c * l2, rel=1e-12, abs=1e-300)


def test_sign_zero_is_positive():
    assert sign(np.array([0.0, -0.0, -2.0, 3.0])).tolist() == [1.0, 1.0, -1.0, 1.0]
