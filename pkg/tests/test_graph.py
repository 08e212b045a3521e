"""Geometry, adjacency construction, and propagation-matrix normalization."""
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bikecast.errors import ValidationError
from bikecast.graph import (
    EARTH_RADIUS_KM,
    Region,
    RegionSet,
    TrafficGraph,
    build_adjacency,
    gcn_normalize,
    haversine_km,
    load_graph,
    load_regions,
    save_graph,
)

lat_st = st.floats(-90.0, 90.0, allow_nan=False)
lon_st = st.floats(-180.0, 180.0, allow_nan=False)


def oracle_haversine(a, b):
    """Independent haversine implementation (law-of-haversines form, asin)."""
    lat1, lon1 = math.radians(a[0]), math.radians(a[1])
    lat2, lon2 = math.radians(b[0]), math.radians(b[1])
    h = (
        math.sin((lat2 - lat1) / 2) ** 2
        + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    )
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


# ---------------------------------------------------------------------------
# haversine

def test_haversine_identity():
    assert haversine_km((39.95, -75.16), (39.95, -75.16)) == 0.0


def test_haversine_antipodal_on_equator():
    d = haversine_km((0.0, 0.0), (0.0, 180.0))
    assert d == pytest.approx(math.pi * EARTH_RADIUS_KM, abs=1e-6)


def test_haversine_philly_to_nyc_matches_oracle():
    a, b = (39.9526, -75.1652), (40.7128, -74.0060)
    assert haversine_km(a, b) == pytest.approx(oracle_haversine(a, b), abs=0.1)
    # sanity: the real-world distance is about 130 km
    assert 120 < haversine_km(a, b) < 140


def test_haversine_range_validation():
    with pytest.raises(ValidationError, match="latitude"):
        haversine_km((91.0, 0.0), (0.0, 0.0))
    with pytest.raises(ValidationError, match="longitude"):
        haversine_km((0.0, 0.0), (0.0, 181.0))
    with pytest.raises(ValidationError, match="non-finite"):
        haversine_km((float("nan"), 0.0), (0.0, 0.0))


@settings(max_examples=100, deadline=None)
@given(lat1=lat_st, lon1=lon_st, lat2=lat_st, lon2=lon_st)
def test_haversine_symmetry_and_oracle(lat1, lon1, lat2, lon2):
    a, b = (lat1, lon1), (lat2, lon2)
    assert haversine_km(a, b) == haversine_km(b, a)
    assert haversine_km(a, b) == pytest.approx(oracle_haversine(a, b), abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(
    pts=st.lists(st.tuples(lat_st, lon_st), min_size=3, max_size=3),
)
def test_haversine_triangle_inequality(pts):
    a, b, c = pts
    assert haversine_km(a, c) <= haversine_km(a, b) + haversine_km(b, c) + 1e-9


# ---------------------------------------------------------------------------
# regions

def test_region_validates_id_and_centroid():
    with pytest.raises(ValidationError):
        Region(id="", centroid=(0.0, 0.0))
    with pytest.raises(ValidationError):
        Region(id="x", centroid=(95.0, 0.0))


def test_region_set_rejects_duplicate_ids():
    r = Region(id="a", centroid=(0.0, 0.0))
    with pytest.raises(ValidationError, match="duplicate"):
        RegionSet([r, Region(id="a", centroid=(1.0, 1.0))])


def test_region_set_lookup_and_subset(three_squares):
    assert three_squares.index_of("r1") == 1
    with pytest.raises(ValidationError, match="unknown"):
        three_squares.index_of("nope")
    sub = three_squares.subset(["r2", "r0"])
    assert sub.ids == ["r2", "r0"]


def _feature(rid, ring):
    return {
        "type": "Feature",
        "properties": {"id": rid},
        "geometry": {"type": "Polygon", "coordinates": [ring]},
    }


def _collection(*features):
    return json.dumps({"type": "FeatureCollection", "features": list(features)})


def test_load_regions_unit_square_centroid():
    # GeoJSON is [lon, lat]; closed ring (5 vertices, last == first)
    ring = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]]
    rs = load_regions(_collection(_feature("sq", ring)))
    assert len(rs) == 1
    assert rs[0].centroid == (0.5, 0.5)
    assert len(rs[0].polygon) == 4  # closing vertex dropped


def test_load_regions_preserves_file_order():
    ring = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]
    rs = load_regions(_collection(_feature("b", ring), _feature("a", ring), _feature("c", ring)))
    assert rs.ids == ["b", "a", "c"]


def test_load_regions_duplicate_id_errors():
    ring = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]
    with pytest.raises(ValidationError, match="'dup'"):
        load_regions(_collection(_feature("dup", ring), _feature("dup", ring)))


def test_load_regions_errors_name_feature_index():
    ring = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]
    bad = {"type": "Feature", "properties": {}, "geometry": {"type": "Point", "coordinates": [0, 0]}}
    with pytest.raises(ValidationError, match="feature 1"):
        load_regions(_collection(_feature("ok", ring), bad))


def test_load_regions_rejects_non_collection():
    with pytest.raises(ValidationError, match="FeatureCollection"):
        load_regions(json.dumps({"type": "Feature"}))
    with pytest.raises(ValidationError, match="JSON"):
        load_regions(b"{oops")


def test_load_regions_accepts_top_level_feature_id():
    ring = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]
    feat = _feature("ignored", ring)
    del feat["properties"]["id"]
    feat["id"] = "top"
    rs = load_regions(_collection(feat))
    assert rs.ids == ["top"]


# ---------------------------------------------------------------------------
# adjacency

def test_build_adjacency_single_region():
    rs = RegionSet([Region(id="a", centroid=(0.0, 0.0))])
    g = build_adjacency(rs)
    np.testing.assert_array_equal(g.adjacency, np.zeros((1, 1)))


def test_build_adjacency_cutoff_disconnects():
    # ~111 km apart at the equator per degree of latitude
    rs = RegionSet([
        Region(id="a", centroid=(0.0, 0.0)),
        Region(id="b", centroid=(0.1, 0.0)),  # ~11 km
    ])
    g = build_adjacency(rs, cutoff_km=5.0)
    np.testing.assert_array_equal(g.adjacency, np.zeros((2, 2)))


def test_build_adjacency_gaussian_matches_formula(rng):
    regions = RegionSet([
        Region(id=f"r{i}", centroid=(float(lat), float(lon)))
        for i, (lat, lon) in enumerate(rng.uniform(-0.2, 0.2, size=(3, 2)))
    ])
    sigma = 10.0
    g = build_adjacency(regions, cutoff_km=160.0, weight_mode="gaussian", sigma_km=sigma)
    for i in range(3):
        for j in range(3):
            if i == j:
                assert g.adjacency[i, j] == 0.0
            else:
                d = haversine_km(regions[i].centroid, regions[j].centroid)
                expect = math.exp(-d * d / sigma**2) if d <= 160.0 else 0.0
                assert g.adjacency[i, j] == pytest.approx(expect, rel=1e-12)


def test_build_adjacency_inverse_and_raw_modes():
    rs = RegionSet([
        Region(id="a", centroid=(0.0, 0.0)),
        Region(id="b", centroid=(0.5, 0.0)),
    ])
    d = haversine_km((0.0, 0.0), (0.5, 0.0))
    inv = build_adjacency(rs, weight_mode="inverse_distance")
    assert inv.adjacency[0, 1] == pytest.approx(1.0 / d)
    raw = build_adjacency(rs, weight_mode="raw_distance")
    assert raw.adjacency[0, 1] == pytest.approx(d)


def test_build_adjacency_bitwise_symmetric(rng):
    regions = RegionSet([
        Region(id=f"r{i}", centroid=(float(lat), float(lon)))
        for i, (lat, lon) in enumerate(rng.uniform(-1, 1, size=(8, 2)))
    ])
    g = build_adjacency(regions)
    assert np.array_equal(g.adjacency, g.adjacency.T)  # exact, not approx
    assert np.all(np.diag(g.adjacency) == 0.0)


def test_build_adjacency_validation():
    rs = RegionSet([Region(id="a", centroid=(0.0, 0.0))])
    with pytest.raises(ValidationError):
        build_adjacency(RegionSet([]))
    with pytest.raises(ValidationError):
        build_adjacency(rs, cutoff_km=0.0)
    with pytest.raises(ValidationError):
        build_adjacency(rs, weight_mode="nope")
    with pytest.raises(ValidationError):
        build_adjacency(rs, weight_mode="gaussian", sigma_km=-1.0)


def test_graph_subset_by_id():
    adj = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 3.0], [2.0, 3.0, 0.0]])
    g = TrafficGraph(adjacency=adj, region_ids=["a", "b", "c"], cutoff_km=1.0, weight_mode="raw_distance")
    sub = g.subset(["c", "a"])
    np.testing.assert_array_equal(sub.adjacency, [[0.0, 2.0], [2.0, 0.0]])
    assert sub.region_ids == ["c", "a"]
    with pytest.raises(ValidationError, match="missing"):
        g.subset(["a", "zz"])


def test_graph_save_load_round_trip(tmp_path, rng):
    regions = RegionSet([
        Region(id=f"r{i}", centroid=(float(lat), float(lon)))
        for i, (lat, lon) in enumerate(rng.uniform(-1, 1, size=(4, 2)))
    ])
    g = build_adjacency(regions, cutoff_km=100.0, sigma_km=7.0)
    path = str(tmp_path / "g.bkc")
    save_graph(path, g)
    back = load_graph(path)
    np.testing.assert_array_equal(back.adjacency, g.adjacency)
    assert back.region_ids == g.region_ids
    assert back.cutoff_km == 100.0
    assert back.weight_mode == "gaussian"
    assert back.sigma_km == 7.0


# ---------------------------------------------------------------------------
# normalization

def oracle_normalize(adj):
    a_hat = np.asarray(adj, dtype=np.float64) + np.eye(len(adj))
    d = np.diag(a_hat.sum(axis=1))
    d_inv_sqrt = np.linalg.inv(np.sqrt(d))
    return d_inv_sqrt @ a_hat @ d_inv_sqrt


def test_gcn_normalize_single_node():
    np.testing.assert_array_equal(gcn_normalize(np.zeros((1, 1))), [[1.0]])


def test_gcn_normalize_two_node_hand_case():
    out = gcn_normalize(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_allclose(out, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)


def test_gcn_normalize_matches_bruteforce(rng):
    for _ in range(25):
        n = int(rng.integers(1, 11))
        a = rng.uniform(0, 1, size=(n, n))
        a = np.triu(a, 1)
        a = a + a.T
        np.testing.assert_allclose(gcn_normalize(a), oracle_normalize(a), atol=1e-12)


def test_gcn_normalize_permutation_equivariant(rng):
    a = rng.uniform(0, 1, size=(6, 6))
    a = np.triu(a, 1)
    a = a + a.T
    perm = rng.permutation(6)
    p = np.eye(6)[perm]
    lhs = gcn_normalize(p @ a @ p.T)
    rhs = p @ gcn_normalize(a) @ p.T
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_degree_normalized_rows_sum_to_one(rng):
    # D^-1 (A + I) is a stochastic matrix; checks the degree computation
    a = rng.uniform(0, 2, size=(7, 7))
    a = np.triu(a, 1)
    a = a + a.T
    a_hat = a + np.eye(7)
    rows = a_hat / a_hat.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(rows.sum(axis=1), np.ones(7), atol=1e-12)


def test_gcn_normalize_validation():
    with pytest.raises(Exception):
        gcn_normalize(np.zeros((2, 3)))
    with pytest.raises(ValidationError, match="symmetric"):
        gcn_normalize(np.array([[0.0, 1.0], [0.5, 0.0]]))
    with pytest.raises(ValidationError, match="non-negative"):
        gcn_normalize(np.array([[0.0, -1.0], [-1.0, 0.0]]))
    with pytest.raises(ValidationError, match="non-finite"):
        gcn_normalize(np.array([[0.0, np.inf], [np.inf, 0.0]]))


def test_gcn_normalize_accepts_traffic_graph(three_squares):
    g = build_adjacency(three_squares, cutoff_km=1000.0)
    out = gcn_normalize(g)
    np.testing.assert_allclose(out, oracle_normalize(g.adjacency), atol=1e-12)
