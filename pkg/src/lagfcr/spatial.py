"""Areal-unit distances and the intrinsic CAR precision built from them."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from shapely.geometry import MultiPolygon, Polygon

from lagfcr.errors import DimensionError, GeometryError, InputError

DEFAULT_POINTS_PER_DIAGONAL = 200
DEFAULT_JITTER_REL = 1e-6


@dataclass(frozen=True)
class Region:
    """One areal unit: a list of polygons, each ``[exterior, *holes]``."""

    id: str
    polygons: tuple

    def __post_init__(self):
        polys = []
        for poly in self.polygons:
            rings = [np.asarray(r, dtype=float) for r in poly]
            for ring in rings:
                if ring.ndim != 2 or ring.shape[1] != 2:
                    raise GeometryError(f"region {self.id}: ring must be (k, 2)")
                if not np.all(np.isfinite(ring)):
                    raise GeometryError(f"region {self.id}: non-finite coordinate")
                if len(_open_ring(ring)) < 3:
                    raise GeometryError(f"region {self.id}: ring with < 3 vertices")
            polys.append(tuple(rings))
        object.__setattr__(self, "polygons", tuple(polys))
        if self.geometry.area <= 0:
            raise GeometryError(f"region {self.id}: zero area")

    @classmethod
    def from_ring(cls, id, ring, holes=()):
        return cls(id, ((np.asarray(ring, dtype=float), *holes),))

    @property
    def geometry(self):
        shapes = [Polygon(p[0], list(p[1:])) for p in self.polygons]
        return shapes[0] if len(shapes) == 1 else MultiPolygon(shapes)

    @property
    def bounds(self):
        return self.geometry.bounds

    @property
    def diagonal(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return float(np.hypot(x1 - x0, y1 - y0))


def _open_ring(ring):
    if len(ring) > 1 and np.allclose(ring[0], ring[-1]):
        return ring[:-1]
    return ring


@dataclass(frozen=True)
class SpatialGraph:
    D: np.ndarray
    Q: np.ndarray
    jitter: float
    connected: bool = True
    distances: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.D.shape[0]

    @property
    def precision(self) -> np.ndarray:
        """Q + jitter * I, the matrix used as a Gaussian precision."""
        return self.Q + self.jitter * np.eye(self.n)


def sample_region(region: Region, spacing: float) -> np.ndarray:
    """Boundary points at fixed arc-length spacing plus interior lattice points.

    Vertices are always included. The lattice is anchored at the lower-left
    corner of the bounding box, offset by half a spacing.
    """
    if not spacing > 0:
        raise GeometryError("sampling spacing must be positive")
    pts = []
    for poly in region.polygons:
        for ring in poly:
            ring = _open_ring(ring)
            closed = np.vstack([ring, ring[:1]])
            for a, b in zip(closed[:-1], closed[1:]):
                seg = np.hypot(*(b - a))
                k = max(int(np.ceil(seg / spacing)), 1)
                frac = np.arange(k)[:, None] / k
                pts.append(a + frac * (b - a))
    x0, y0, x1, y1 = region.bounds
    xs = np.arange(x0 + 0.5 * spacing, x1, spacing)
    ys = np.arange(y0 + 0.5 * spacing, y1, spacing)
    if xs.size and ys.size:
        gx, gy = np.meshgrid(xs, ys)
        gx, gy = gx.ravel(), gy.ravel()
        inside = shapely.contains_xy(region.geometry, gx, gy)
        pts.append(np.column_stack([gx[inside], gy[inside]]))
    return np.vstack(pts)


def _spacing(region: Region, resolution: float | None) -> float:
    if resolution is None:
        return region.diagonal / DEFAULT_POINTS_PER_DIAGONAL
    if not resolution > 0:
        raise GeometryError("resolution must be positive")
    return 1.0 / resolution


def _directed(src_pts, tree, quantile, workers=1):
    d, _ = tree.query(src_pts, k=1, workers=workers)
    if quantile >= 1.0:
        return float(d.max())
    return float(np.quantile(d, quantile))


def extended_hausdorff(
    a: Region, b: Region, quantile: float = 0.5, resolution: float | None = None
) -> float:
    """Quantile-extended Hausdorff distance between two regions.

    ``resolution`` is in sample points per unit length; by default each region
    is sampled at 1/200 of its own bounding-box diagonal. ``quantile=1``
    gives the classical Hausdorff distance, ``0.5`` the median variant.
    """
    if not 0 < quantile <= 1:
        raise ValueError("quantile must lie in (0, 1]")
    pa = sample_region(a, _spacing(a, resolution))
    pb = sample_region(b, _spacing(b, resolution))
    return max(
        _directed(pa, cKDTree(pb), quantile), _directed(pb, cKDTree(pa), quantile)
    )


def pairwise_hausdorff(regions, quantile=0.5, resolution=None, workers=1):
    """Symmetric matrix of extended Hausdorff distances; each region is sampled
    and indexed once."""
    pts = [sample_region(r, _spacing(r, resolution)) for r in regions]
    trees = [cKDTree(p) for p in pts]
    n = len(regions)
    dist = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = max(
                _directed(pts[i], trees[j], quantile, workers),
                _directed(pts[j], trees[i], quantile, workers),
            )
    return dist


def knn_adjacency(dist: np.ndarray, k: int) -> np.ndarray:
    """Binary kNN adjacency, max-symmetrised; ties go to the lower index."""
    n = dist.shape[0]
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < n, got k={k}, n={n}")
    D = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(n):
        others = idx[idx != i]
        order = np.lexsort((others, dist[i, others]))
        D[i, others[order[:k]]] = 1.0
    return np.maximum(D, D.T)


def graph_from_adjacency(D, jitter_rel=DEFAULT_JITTER_REL, distances=None):
    D = np.asarray(D, dtype=float)
    Q = np.diag(D.sum(axis=1)) - D
    n_comp, _ = connected_components(D > 0, directed=False)
    connected = n_comp == 1
    if not connected:
        warnings.warn(f"spatial graph has {n_comp} connected components", stacklevel=2)
    jitter = jitter_rel * float(np.mean(np.diag(Q)))
    return SpatialGraph(D, Q, jitter, connected, distances)


def knn_weights(
    regions,
    k: int = 10,
    quantile: float = 0.5,
    resolution: float | None = None,
    jitter_rel: float = DEFAULT_JITTER_REL,
    workers: int = 1,
) -> SpatialGraph:
    n = len(regions)
    if n <= k or k < 1:
        raise ValueError(f"knn_weights needs n > k >= 1 (n={n}, k={k})")
    dist = pairwise_hausdorff(regions, quantile, resolution, workers)
    return graph_from_adjacency(knn_adjacency(dist, k), jitter_rel, dist)


def car_quadform(graph: SpatialGraph, v) -> float:
    """v' (Q + jitter I) v."""
    v = np.asarray(v, dtype=float)
    if v.shape != (graph.n,):
        raise DimensionError(f"vector of shape {v.shape} for a graph of {graph.n} sites")
    Dv = graph.D @ v
    deg = graph.D.sum(axis=1)
    return float(v @ (deg * v) - v @ Dv + graph.jitter * (v @ v))


# GeoJSON -----------------------------------------------------------------


def _polygons_from_geometry(geom, where):
    kind = geom.get("type")
    coords = geom.get("coordinates")
    if kind == "Polygon":
        return (tuple(np.asarray(r, dtype=float)[:, :2] for r in coords),)
    if kind == "MultiPolygon":
        return tuple(
            tuple(np.asarray(r, dtype=float)[:, :2] for r in poly) for poly in coords
        )
    raise InputError(f"unsupported geometry type {kind!r}", path=where)


def read_geojson(path, id_property="site_id", allow_geographic=False):
    """Regions from a FeatureCollection, in feature order."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError("geometry file not found", path=path) from None
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc}", path=path) from None
    if doc.get("type") != "FeatureCollection":
        raise InputError("expected a GeoJSON FeatureCollection", path=path)
    regions = []
    for k, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties") or {}
        if id_property not in props:
            raise InputError(f"feature {k} lacks property {id_property!r}", path=path)
        try:
            regions.append(
                Region(str(props[id_property]), _polygons_from_geometry(feat["geometry"], path))
            )
        except GeometryError as exc:
            raise InputError(str(exc), path=path) from None
    if not regions:
        raise InputError("no features", path=path)
    ids = [r.id for r in regions]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate site ids in geometry", path=path)
    if not allow_geographic and looks_geographic(regions):
        raise InputError(
            "coordinates look like longitude/latitude degrees; project them to a "
            "planar CRS in meters or pass --allow-geographic",
            path=path,
        )
    return regions


def looks_geographic(regions) -> bool:
    b = np.array([r.bounds for r in regions])
    x0, y0 = b[:, 0].min(), b[:, 1].min()
    x1, y1 = b[:, 2].max(), b[:, 3].max()
    in_range = x0 >= -180 and x1 <= 180 and y0 >= -90 and y1 <= 90
    return bool(in_range and (x1 - x0) < 10 and (y1 - y0) < 10)


def write_geojson(path, regions, id_property="site_id"):
    feats = []
    for r in regions:
        coords = [[[list(map(float, p)) for p in ring] for ring in poly] for poly in r.polygons]
        geom = (
            {"type": "Polygon", "coordinates": coords[0]}
            if len(coords) == 1
            else {"type": "MultiPolygon", "coordinates": coords}
        )
        feats.append({"type": "Feature", "properties": {id_property: r.id}, "geometry": geom})
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": feats}, indent=1))


def lattice_regions(ids, cell=1000.0):
    """Unit-square lattice (side ``cell`` meters), row-major, for synthetic data."""
    n = len(ids)
    ncol = int(np.ceil(np.sqrt(n)))
    out = []
    for k, sid in enumerate(ids):
        r, c = divmod(k, ncol)
        x0, y0 = c * cell, r * cell
        ring = np.array([[x0, y0], [x0 + cell, y0], [x0 + cell, y0 + cell], [x0, y0 + cell], [x0, y0]])
        out.append(Region.from_ring(sid, ring))
    return out


def write_matrix_csv(path, mat, ids):
    lines = ["site_id," + ",".join(ids)]
    for sid, row in zip(ids, mat):
        lines.append(sid + "," + ",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
