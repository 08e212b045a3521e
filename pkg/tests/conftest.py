import numpy as np
import pytest

from bikecast.graph import Region, RegionSet


def make_square(region_id: str, lat0: float, lon0: float, size: float = 1.0) -> Region:
    """Axis-aligned square region with corner at (lat0, lon0)."""
    poly = (
        (lat0, lon0),
        (lat0, lon0 + size),
        (lat0 + size, lon0 + size),
        (lat0 + size, lon0),
    )
    centroid = (lat0 + size / 2.0, lon0 + size / 2.0)
    return Region(id=region_id, centroid=centroid, polygon=poly)


@pytest.fixture
def three_squares() -> RegionSet:
    # three disjoint unit squares along the equator
    return RegionSet([
        make_square("r0", 0.0, 0.0),
        make_square("r1", 0.0, 2.0),
        make_square("r2", 0.0, 4.0),
    ])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
