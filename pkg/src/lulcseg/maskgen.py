"""Vector-label and NDVI rasterization into per-class binary masks.

All rasterizers share one geometric convention: a pixel is tested by its
centre, located at fractional pixel coordinates (row + 0.5, col + 0.5).
World geometries are projected into pixel space first, so distances and
containment are evaluated in pixel units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import geo
from .errors import (
    EmptyShape,
    GeometryTypeError,
    MissingBand,
    ShapeMismatch,
    TransformMismatch,
    UnclosedRing,
)
from .geo import BUILDINGS, OTHER, ROADS, TREES, WATER, AffineGeoTransform

VECTOR_CLASS_TAGS = ("Buildings", "Roads", "Water")

DEFAULT_PRIORITY = (BUILDINGS, WATER, ROADS, TREES)


@dataclass(frozen=True)
class VectorFeature:
    """One vector label: a LineString, Polygon or MultiPolygon with a class tag."""

    geometry_type: str
    coordinates: tuple
    class_tag: str

    def __post_init__(self):
        if self.geometry_type not in ("LineString", "Polygon", "MultiPolygon"):
            raise GeometryTypeError(f"unsupported geometry type {self.geometry_type!r}")
        if self.class_tag not in VECTOR_CLASS_TAGS:
            raise ValueError(f"class_tag must be one of {VECTOR_CLASS_TAGS}")
        if self.geometry_type in ("Polygon", "MultiPolygon"):
            for ring in self.rings():
                if len(ring) < 4 or tuple(ring[0]) != tuple(ring[-1]):
                    raise UnclosedRing(f"ring of {self.class_tag} feature is not closed")

    def rings(self):
        """Yield every ring (exterior and holes) as a list of (x, y) points."""
        if self.geometry_type == "Polygon":
            polygons = [self.coordinates]
        elif self.geometry_type == "MultiPolygon":
            polygons = self.coordinates
        else:
            return
        for polygon in polygons:
            for ring in polygon:
                yield ring

    @classmethod
    def from_geojson(cls, geometry: dict, class_tag: str) -> "VectorFeature":
        return cls(geometry["type"], geometry["coordinates"], class_tag)

    def to_geojson(self) -> dict:
        def listify(node):
            if isinstance(node, (list, tuple)) and node and isinstance(node[0], (list, tuple)):
                return [listify(child) for child in node]
            return list(node)

        return {"type": self.geometry_type, "coordinates": listify(self.coordinates)}


def features_from_geojson(path, class_tag: str) -> list[VectorFeature]:
    """Load one class's GeoJSON file into VectorFeatures."""
    return [VectorFeature.from_geojson(g, class_tag) for g in geo.read_geojson(path)]


@dataclass(frozen=True)
class BinaryMask:
    """Single-class 0/1 raster."""

    values: np.ndarray
    transform: AffineGeoTransform

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.uint8)
        if values.ndim != 2:
            raise ShapeMismatch(f"mask must be 2-D, got shape {values.shape}")
        if values.size and values.max() > 1:
            raise ValueError("mask values must be 0 or 1")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _check_shape(shape) -> tuple[int, int]:
    rows, cols = int(shape[0]), int(shape[1])
    if rows <= 0 or cols <= 0:
        raise EmptyShape(f"raster shape {shape} has no pixels")
    return rows, cols


def _to_pixel_path(points, t: AffineGeoTransform) -> np.ndarray:
    """Project a sequence of world (x, y) points to fractional pixel (row, col)."""
    pts = np.asarray(points, dtype=np.float64)
    rows, cols = geo.world_to_pixel(t, pts[:, 0], pts[:, 1])
    return np.stack([rows, cols], axis=1)


def rasterize_lines(features, t: AffineGeoTransform, shape,
                    buffer_px: int = 3) -> BinaryMask:
    """Burn buffered polylines: a pixel is set when its centre lies within
    ``buffer_px`` pixel units (Euclidean, inclusive) of any projected segment.
    """
    rows, cols = _check_shape(shape)
    if buffer_px < 0:
        raise ValueError("buffer_px must be >= 0")
    for f in features:
        if f.geometry_type != "LineString":
            raise GeometryTypeError(
                f"rasterize_lines needs LineString geometries, got {f.geometry_type}"
            )
    out = np.zeros((rows, cols), dtype=np.uint8)
    for f in features:
        path = _to_pixel_path(f.coordinates, t)
        if len(path) == 1:
            segments = [(path[0], path[0])]
        else:
            segments = list(zip(path[:-1], path[1:]))
        for a, b in segments:
            _mark_segment(out, a, b, float(buffer_px))
    return BinaryMask(out, t)


def _mark_segment(out: np.ndarray, a: np.ndarray, b: np.ndarray, buffer_px: float) -> None:
    """Set pixels whose centres fall within buffer_px of segment a-b (pixel coords)."""
    rows, cols = out.shape
    lo_r = max(0, math.floor(min(a[0], b[0]) - buffer_px - 0.5))
    hi_r = min(rows, math.ceil(max(a[0], b[0]) + buffer_px + 0.5))
    lo_c = max(0, math.floor(min(a[1], b[1]) - buffer_px - 0.5))
    hi_c = min(cols, math.ceil(max(a[1], b[1]) + buffer_px + 0.5))
    if lo_r >= hi_r or lo_c >= hi_c:
        return
    rr, cc = np.meshgrid(
        np.arange(lo_r, hi_r, dtype=np.float64) + 0.5,
        np.arange(lo_c, hi_c, dtype=np.float64) + 0.5,
        indexing="ij",
    )
    d = b - a
    seg_len2 = d @ d
    if seg_len2 == 0.0:
        dist2 = (rr - a[0]) ** 2 + (cc - a[1]) ** 2
    else:
        s = ((rr - a[0]) * d[0] + (cc - a[1]) * d[1]) / seg_len2
        s = np.clip(s, 0.0, 1.0)
        dist2 = (rr - (a[0] + s * d[0])) ** 2 + (cc - (a[1] + s * d[1])) ** 2
    hit = dist2 <= buffer_px * buffer_px
    out[lo_r:hi_r, lo_c:hi_c][hit] = 1


def rasterize_polygons(features, t: AffineGeoTransform, shape) -> BinaryMask:
    """Fill polygons: a pixel is set when its centre is inside under the
    even-odd rule, so holes are excluded. Overlapping features union.
    """
    rows, cols = _check_shape(shape)
    for f in features:
        if f.geometry_type not in ("Polygon", "MultiPolygon"):
            raise GeometryTypeError(
                f"rasterize_polygons needs Polygon geometries, got {f.geometry_type}"
            )
    out = np.zeros((rows, cols), dtype=np.uint8)
    for f in features:
        out |= rasterize_rings(list(f.rings()), t, shape).values
    return BinaryMask(out, t)


def rasterize_rings(rings, t: AffineGeoTransform, shape) -> BinaryMask:
    """Even-odd fill of one ring set given as world-coordinate point lists."""
    rows, cols = _check_shape(shape)
    pixel_rings = [_to_pixel_path(ring, t) for ring in rings]
    return BinaryMask(_fill_even_odd(pixel_rings, rows, cols), t)


def _fill_even_odd(rings, rows: int, cols: int) -> np.ndarray:
    """Even-odd scanline fill over pixel centres for a set of pixel-space rings.

    For each edge, crossings of the +col ray from every centre in the edge's
    half-open row span are tallied with a per-row difference array; odd totals
    are inside.
    """
    diff = np.zeros((rows, cols + 1), dtype=np.int64)
    for ring in rings:
        r = ring[:, 0]
        c = ring[:, 1]
        r0, r1 = r[:-1], r[1:]
        c0, c1 = c[:-1], c[1:]
        for e in range(len(r0)):
            if r0[e] == r1[e]:
                continue
            lo, hi = (r0[e], r1[e]) if r0[e] < r1[e] else (r1[e], r0[e])
            # integer rows whose centre row + 0.5 lies in [lo, hi)
            first = math.ceil(lo - 0.5)
            last = math.ceil(hi - 0.5)  # exclusive
            first = max(first, 0)
            last = min(last, rows)
            if first >= last:
                continue
            yc = np.arange(first, last, dtype=np.float64) + 0.5
            cross = c0[e] + (yc - r0[e]) * (c1[e] - c0[e]) / (r1[e] - r0[e])
            # columns whose centre col + 0.5 is strictly left of the crossing
            k = np.ceil(cross - 0.5).astype(np.int64)
            k = np.clip(k, 0, cols)
            idx = np.arange(first, last)
            np.add.at(diff, (idx, np.zeros_like(k)), 1)
            np.add.at(diff, (idx, k), -1)
    counts = np.cumsum(diff[:, :cols], axis=1)
    return (counts % 2).astype(np.uint8)


def ndvi_mask(raster: geo.GeoRaster, threshold: float = -0.1) -> BinaryMask:
    """Vegetation mask from the normalized difference of the NIR and R bands.

    Output is 1 where (NIR - R) / (NIR + R) is strictly above ``threshold``;
    nodata pixels and pixels with NIR + R = 0 stay 0.
    """
    if raster.band_count < 2:
        raise MissingBand("NDVI needs NIR and R bands (band order NIR, R, G, B)")
    if not -1.0 <= threshold <= 1.0:
        raise ValueError("NDVI threshold must lie in [-1, 1]")
    nir = raster.bands[0].astype(np.float64)
    red = raster.bands[1].astype(np.float64)
    denom = nir + red
    valid = (denom != 0) & ~raster.nodata_mask
    ndvi = np.zeros_like(denom)
    np.divide(nir - red, denom, out=ndvi, where=valid)
    values = ((ndvi > threshold) & valid).astype(np.uint8)
    return BinaryMask(values, raster.transform)


def merge_masks(buildings: BinaryMask, roads: BinaryMask, trees: BinaryMask,
                water: BinaryMask, priority=DEFAULT_PRIORITY) -> geo.LabelMask:
    """Combine per-class binary masks into one class raster.

    Where masks overlap, the earliest class in ``priority`` wins; pixels
    covered by no mask become Other.
    """
    masks = {BUILDINGS: buildings, ROADS: roads, TREES: trees, WATER: water}
    shapes = {m.shape for m in masks.values()}
    if len(shapes) != 1:
        raise ShapeMismatch(f"mask shapes differ: {sorted(shapes)}")
    transforms = {m.transform for m in masks.values()}
    if len(transforms) != 1:
        raise TransformMismatch("masks carry different geotransforms")
    if sorted(priority) != sorted(masks):
        raise ValueError(f"priority must be a permutation of {sorted(masks)}")
    classes = np.full(buildings.shape, OTHER, dtype=np.int64)
    for code in reversed(priority):
        classes[masks[code].values == 1] = code
    return geo.LabelMask(classes, buildings.transform)
