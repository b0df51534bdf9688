import pytest

from gradcheck import BLOCKS


@pytest.mark.parametrize("block", sorted(BLOCKS))
def test_autodiff_matches_finite_differences(block):
    assert BLOCKS[block]() < 1e-4
