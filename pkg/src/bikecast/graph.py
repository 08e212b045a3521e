"""Regions, great-circle distances, and the traffic-network graph.

Regions are identified by string ids and carry a (lat, lon) centroid, plus
the polygon they came from when loaded from GeoJSON. The graph is a dense
symmetric adjacency over region centroids: pairs farther apart than a cutoff
get weight zero, pairs within it get a weight that depends on the configured
mode (a Gaussian kernel of the distance by default).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ShapeError, ValidationError

EARTH_RADIUS_KM = 6371.0

WEIGHT_MODES = ("gaussian", "inverse_distance", "raw_distance")


def _check_lat_lon(lat: float, lon: float, where: str) -> None:
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise ValidationError(f"{where}: non-finite coordinate ({lat}, {lon})")
    if not -90.0 <= lat <= 90.0:
        raise ValidationError(f"{where}: latitude {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise ValidationError(f"{where}: longitude {lon} outside [-180, 180]")


def haversine_km(a: tuple[float, float], b: tuple[float, float]) -> float:
    """Great-circle distance in km between two (lat, lon) points in degrees."""
    _check_lat_lon(a[0], a[1], "haversine_km point a")
    _check_lat_lon(b[0], b[1], "haversine_km point b")
    lat1, lon1, lat2, lon2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    h = math.sin(dlat / 2.0) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))


@dataclass(frozen=True)
class Region:
    """One service region: id, centroid (lat, lon), optional boundary polygon.

    The polygon is the exterior ring as (lat, lon) vertices without the
    closing duplicate.
    """

    id: str
    centroid: tuple[float, float]
    polygon: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if not self.id:
            raise ValidationError("region id must be a non-empty string")
        _check_lat_lon(self.centroid[0], self.centroid[1], f"region {self.id!r} centroid")


class RegionSet:
    """Ordered collection of regions with unique ids."""

    def __init__(self, regions: Iterable[Region]):
        self.regions: list[Region] = list(regions)
        self._index: dict[str, int] = {}
        for i, r in enumerate(self.regions):
            if r.id in self._index:
                raise ValidationError(f"duplicate region id {r.id!r}")
            self._index[r.id] = i

    def __len__(self) -> int:
        return len(self.regions)

    def __iter__(self) -> Iterator[Region]:
        return iter(self.regions)

    def __getitem__(self, i: int) -> Region:
        return self.regions[i]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.regions]

    def index_of(self, region_id: str) -> int:
        try:
            return self._index[region_id]
        except KeyError:
            raise ValidationError(f"unknown region id {region_id!r}") from None

    def subset(self, ids: Sequence[str]) -> "RegionSet":
        return RegionSet(self.regions[self.index_of(i)] for i in ids)


def load_regions(text: str | bytes) -> RegionSet:
    """Parse a GeoJSON FeatureCollection of Polygon features into regions.

    GeoJSON stores coordinates as [lon, lat]; we convert to (lat, lon). The
    centroid is the arithmetic mean of the exterior-ring vertices, with the
    closing duplicate vertex dropped first so it is not double-counted.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"regions file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise ValidationError("regions file must be a GeoJSON FeatureCollection")
    features = doc.get("features")
    if not isinstance(features, list) or not features:
        raise ValidationError("regions file has no features")
    regions = []
    for idx, feat in enumerate(features):
        where = f"feature {idx}"
        if not isinstance(feat, dict):
            raise ValidationError(f"{where}: not an object")
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ValidationError(f"{where}: geometry type must be Polygon, got {geom.get('type')!r}")
        rings = geom.get("coordinates")
        if not isinstance(rings, list) or not rings or not isinstance(rings[0], list):
            raise ValidationError(f"{where}: malformed Polygon coordinates")
        props = feat.get("properties") or {}
        rid = props.get("id", feat.get("id"))
        if rid is None:
            raise ValidationError(f"{where}: missing region id in properties")
        rid = str(rid)
        ring = rings[0]
        if len(ring) < 4:
            raise ValidationError(f"{where}: exterior ring needs at least 4 vertices, got {len(ring)}")
        verts = [(float(pt[1]), float(pt[0])) for pt in ring]  # [lon, lat] -> (lat, lon)
        if verts[0] == verts[-1]:
            verts = verts[:-1]
        if len(verts) < 3:
            raise ValidationError(f"{where}: degenerate polygon")
        for lat, lon in verts:
            _check_lat_lon(lat, lon, where)
        centroid = (
            sum(v[0] for v in verts) / len(verts),
            sum(v[1] for v in verts) / len(verts),
        )
        regions.append(Region(id=rid, centroid=centroid, polygon=tuple(verts)))
    return RegionSet(regions)


@dataclass
class TrafficGraph:
    """Dense symmetric adjacency over regions, plus how it was built."""

    adjacency: np.ndarray
    region_ids: list[str]
    cutoff_km: float
    weight_mode: str
    sigma_km: float | None = None

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        n = len(self.region_ids)
        if self.adjacency.shape != (n, n):
            raise ShapeError(
                f"adjacency shape {self.adjacency.shape} does not match {n} region ids"
            )

    @property
    def n(self) -> int:
        return len(self.region_ids)

    def subset(self, ids: Sequence[str]) -> "TrafficGraph":
        """Restrict to the given region ids (matched by id, order taken from ``ids``)."""
        index = {rid: i for i, rid in enumerate(self.region_ids)}
        missing = [rid for rid in ids if rid not in index]
        if missing:
            raise ValidationError(f"graph is missing region ids: {missing[:5]}")
        sel = np.array([index[rid] for rid in ids], dtype=np.intp)
        return TrafficGraph(
            adjacency=self.adjacency[np.ix_(sel, sel)].copy(),
            region_ids=list(ids),
            cutoff_km=self.cutoff_km,
            weight_mode=self.weight_mode,
            sigma_km=self.sigma_km,
        )


def build_adjacency(
    regions: RegionSet,
    cutoff_km: float = 160.0,
    weight_mode: str = "gaussian",
    sigma_km: float = 10.0,
) -> TrafficGraph:
    """Build the centroid-distance adjacency matrix.

    Pairs farther than ``cutoff_km`` apart get weight 0. Within the cutoff the
    weight is mode-dependent: ``gaussian`` uses exp(-d^2 / sigma_km^2),
    ``inverse_distance`` uses 1/max(d, 1e-3), and ``raw_distance`` stores the
    distance itself (the convention used alongside a hard cutoff in earlier
    bike-demand work; it makes far-but-connected pairs *heavier*, so the
    Gaussian kernel is the default). The diagonal is zero; self-loops are
    added later by the propagation-matrix normalization.
    """
    if len(regions) == 0:
        raise ValidationError("cannot build a graph from zero regions")
    if cutoff_km <= 0:
        raise ValidationError(f"cutoff_km must be positive, got {cutoff_km}")
    if weight_mode not in WEIGHT_MODES:
        raise ValidationError(f"weight_mode must be one of {WEIGHT_MODES}, got {weight_mode!r}")
    if weight_mode == "gaussian" and sigma_km <= 0:
        raise ValidationError(f"sigma_km must be positive, got {sigma_km}")
    n = len(regions)
    adj = np.zeros((n, n), dtype=np.float64)
    for i in range(n):
        for j in range(i + 1, n):
            d = haversine_km(regions[i].centroid, regions[j].centroid)
            if d > cutoff_km:
                continue
            if weight_mode == "gaussian":
                w = math.exp(-(d * d) / (sigma_km * sigma_km))
            elif weight_mode == "inverse_distance":
                w = 1.0 / max(d, 1e-3)
            else:
                w = d
            adj[i, j] = w
            adj[j, i] = w
    return TrafficGraph(
        adjacency=adj,
        region_ids=regions.ids,
        cutoff_km=float(cutoff_km),
        weight_mode=weight_mode,
        sigma_km=float(sigma_km) if weight_mode == "gaussian" else None,
    )


def save_graph(path: str, graph: TrafficGraph) -> None:
    from .container import write_container

    meta = {
        "region_ids": graph.region_ids,
        "cutoff_km": graph.cutoff_km,
        "weight_mode": graph.weight_mode,
        "sigma_km": graph.sigma_km,
    }
    write_container(path, "graph", [("adjacency", graph.adjacency)], meta)


def load_graph(path: str) -> TrafficGraph:
    from .container import expect_kind, read_container

    kind, arrays, meta = read_container(path)
    expect_kind(path, "graph", kind)
    if "adjacency" not in arrays:
        raise ValidationError(f"{path}: graph container has no adjacency array")
    return TrafficGraph(
        adjacency=arrays["adjacency"],
        region_ids=[str(r) for r in meta.get("region_ids", [])],
        cutoff_km=float(meta.get("cutoff_km", 0.0)),
        weight_mode=str(meta.get("weight_mode", "gaussian")),
        sigma_km=None if meta.get("sigma_km") is None else float(meta["sigma_km"]),
    )


def gcn_normalize(graph: "TrafficGraph | np.ndarray") -> np.ndarray:
    """Symmetric renormalized propagation matrix D^-1/2 (A + I) D^-1/2.

    Self-loops are added before computing the degree, so every row degree is
    at least 1 and the result is well defined for isolated nodes.
    """
    adj = graph.adjacency if isinstance(graph, TrafficGraph) else np.asarray(graph, dtype=np.float64)
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ShapeError(f"adjacency must be square, got shape {adj.shape}")
    if not np.isfinite(adj).all():
        raise ValidationError("adjacency contains non-finite weights")
    if (adj < 0).any():
        raise ValidationError("adjacency weights must be non-negative")
    if not np.array_equal(adj, adj.T):
        raise ValidationError("adjacency must be symmetric")
    a_hat = adj + np.eye(adj.shape[0], dtype=np.float64)
    deg = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]
