import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lulcseg import geo, maskgen
from lulcseg.errors import (
    EmptyShape,
    GeometryTypeError,
    MissingBand,
    ShapeMismatch,
    TransformMismatch,
    UnclosedRing,
)
from lulcseg.geo import BUILDINGS, OTHER, ROADS, TREES, WATER, AffineGeoTransform, GeoRaster
from lulcseg.maskgen import BinaryMask, VectorFeature

from oracles import line_mask_oracle, polygon_mask_oracle

# With this transform, world (x, y) == pixel (col, -row): a point at world
# (c + 0.5, -(r + 0.5)) sits exactly on the centre of pixel (r, c).
IDENT = AffineGeoTransform(0, 0, 1, -1)


def line(points, tag="Roads"):
    return VectorFeature("LineString", tuple(tuple(p) for p in points), tag)


def polygon(rings, tag="Buildings"):
    return VectorFeature("Polygon", tuple(tuple(tuple(p) for p in ring) for ring in rings), tag)


def pixel_pts_to_world(points_px):
    """(row, col) pixel points -> world points under IDENT."""
    return [(c, -r) for r, c in points_px]


# ---------------------------------------------------------------------------
# rasterize_lines
# ---------------------------------------------------------------------------

def test_lines_empty_features_all_zero():
    mask = maskgen.rasterize_lines([], IDENT, (32, 32))
    assert mask.values.sum() == 0


def test_lines_horizontal_segment_matches_distance_scan():
    # segment through the centres of pixels (50, 10) .. (50, 20)
    seg_px = [(50.5, 10.5), (50.5, 20.5)]
    f = line(pixel_pts_to_world(seg_px))
    mask = maskgen.rasterize_lines([f], IDENT, (100, 100), buffer_px=3)
    expected = line_mask_oracle([(np.array(seg_px[0]), np.array(seg_px[1]))],
                                (100, 100), 3.0)
    assert np.array_equal(mask.values, expected)
    rows, cols = np.nonzero(mask.values)
    assert rows.min() == 47 and rows.max() == 53


def test_lines_zero_length_disk_29_pixels():
    point_px = (40.5, 40.5)
    f = line(pixel_pts_to_world([point_px, point_px]))
    mask = maskgen.rasterize_lines([f], IDENT, (80, 80), buffer_px=3)
    assert mask.values.sum() == 29
    expected = line_mask_oracle([(np.array(point_px), np.array(point_px))], (80, 80), 3.0)
    assert np.array_equal(mask.values, expected)


def test_lines_diagonal_matches_distance_scan():
    seg_px = [(5.2, 3.9), (27.7, 30.1)]
    f = line(pixel_pts_to_world(seg_px))
    mask = maskgen.rasterize_lines([f], IDENT, (40, 40), buffer_px=2)
    expected = line_mask_oracle([(np.array(seg_px[0]), np.array(seg_px[1]))], (40, 40), 2.0)
    assert np.array_equal(mask.values, expected)


def test_lines_rejects_polygons():
    f = polygon([[(0, 0), (1, 0), (1, 1), (0, 0)]])
    with pytest.raises(GeometryTypeError):
        maskgen.rasterize_lines([f], IDENT, (8, 8))


def test_lines_empty_shape():
    with pytest.raises(EmptyShape):
        maskgen.rasterize_lines([], IDENT, (0, 10))


def test_lines_buffer_monotonic_and_zero_buffer_near_trace():
    seg_px = [(10.5, 2.5), (14.1, 28.6)]
    f = line(pixel_pts_to_world(seg_px))
    previous = None
    for buffer_px in (0, 1, 2, 4):
        mask = maskgen.rasterize_lines([f], IDENT, (32, 32), buffer_px=buffer_px).values
        if previous is not None:
            assert np.all(mask >= previous)  # growing buffer never clears a pixel
        previous = mask
    # buffer 0 marks only centres within 0.5 px of the path
    near = line_mask_oracle([(np.array(seg_px[0]), np.array(seg_px[1]))], (32, 32), 0.5)
    zero_mask = maskgen.rasterize_lines([f], IDENT, (32, 32), buffer_px=0).values
    assert np.all(zero_mask <= near)


# ---------------------------------------------------------------------------
# rasterize_polygons
# ---------------------------------------------------------------------------

def test_polygons_empty_features_all_zero():
    assert maskgen.rasterize_polygons([], IDENT, (16, 16)).values.sum() == 0


def test_polygons_rectangle_pixel_count():
    # covers centres of rows 2..5 and cols 3..8 -> 4 x 6 pixels
    ring_px = [(1.7, 2.6), (1.7, 8.9), (5.8, 8.9), (5.8, 2.6), (1.7, 2.6)]
    f = polygon([pixel_pts_to_world(ring_px)])
    mask = maskgen.rasterize_polygons([f], IDENT, (12, 12))
    assert mask.values.sum() == 24
    expected = polygon_mask_oracle([ring_px], (12, 12))
    assert np.array_equal(mask.values, expected)


def test_polygons_square_with_hole():
    outer = [(0.5, 0.5), (0.5, 10.5), (10.5, 10.5), (10.5, 0.5), (0.5, 0.5)]
    hole = [(3.5, 3.5), (3.5, 7.5), (7.5, 7.5), (7.5, 3.5), (3.5, 3.5)]
    f = polygon([pixel_pts_to_world(outer), pixel_pts_to_world(hole)])
    mask = maskgen.rasterize_polygons([f], IDENT, (12, 12))
    expected = polygon_mask_oracle([outer, hole], (12, 12))
    assert np.array_equal(mask.values, expected)
    # ring minus hole in pixel counts: 10x10 outer minus 4x4 hole
    assert mask.values.sum() == 100 - 16


def test_polygons_random_blob_matches_oracle():
    rng = np.random.default_rng(3)
    angles = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    radius = rng.uniform(4, 9, size=12)
    ring_px = [(12 + r * np.sin(a), 14 + r * np.cos(a)) for r, a in zip(radius, angles)]
    ring_px.append(ring_px[0])
    f = polygon([pixel_pts_to_world(ring_px)])
    mask = maskgen.rasterize_polygons([f], IDENT, (26, 28))
    assert np.array_equal(mask.values, polygon_mask_oracle([ring_px], (26, 28)))


def test_polygons_reject_linestring_and_open_ring():
    with pytest.raises(GeometryTypeError):
        maskgen.rasterize_polygons([line([(0, 0), (1, 1)])], IDENT, (4, 4))
    with pytest.raises(UnclosedRing):
        polygon([[(0, 0), (4, 0), (4, 4), (0, 4)]])


def test_multipolygon_fills_all_parts():
    mp = VectorFeature(
        "MultiPolygon",
        (
            (tuple(pixel_pts_to_world([(0.6, 0.6), (0.6, 3.6), (3.6, 3.6), (3.6, 0.6), (0.6, 0.6)])),),
            (tuple(pixel_pts_to_world([(6.6, 6.6), (6.6, 9.6), (9.6, 9.6), (9.6, 6.6), (6.6, 6.6)])),),
        ),
        "Buildings",
    )
    mask = maskgen.rasterize_polygons([mp], IDENT, (12, 12))
    assert mask.values[1:4, 1:4].all() and mask.values[7:10, 7:10].all()
    assert mask.values.sum() == 18


# ---------------------------------------------------------------------------
# ndvi_mask
# ---------------------------------------------------------------------------

def _raster(nir, red, nodata=None):
    nir = np.asarray(nir, dtype=np.float32)
    bands = np.stack([nir, np.asarray(red, dtype=np.float32),
                      np.zeros_like(nir), np.zeros_like(nir)])
    return GeoRaster(bands, IDENT, nodata_mask=nodata)


def test_ndvi_symmetric_bands_pass():
    mask = maskgen.ndvi_mask(_raster([[0.5]], [[0.5]]))
    assert mask.values[0, 0] == 1  # NDVI one 0 > -0.1


def test_ndvi_extreme_negative_rejected():
    assert maskgen.ndvi_mask(_raster([[0.0]], [[1.0]])).values[0, 0] == 0


def test_ndvi_exact_threshold_excluded():
    # (0.45 - 0.55) / (0.45 + 0.55) = -0.1 exactly: strictly-above rule keeps it 0
    assert maskgen.ndvi_mask(_raster([[0.45]], [[0.55]])).values[0, 0] == 0


def test_ndvi_zero_denominator_and_nodata():
    r = _raster([[0.0, 0.6]], [[0.0, 0.2]], nodata=np.array([[False, True]]))
    values = maskgen.ndvi_mask(r).values
    assert values[0, 0] == 0 and values[0, 1] == 0


def test_ndvi_missing_band():
    raster = GeoRaster(np.ones((1, 2, 2), dtype=np.float32), IDENT)
    with pytest.raises(MissingBand):
        maskgen.ndvi_mask(raster)
    with pytest.raises(ValueError):
        maskgen.ndvi_mask(_raster([[1.0]], [[1.0]]), threshold=2.0)


@settings(max_examples=30, deadline=None)
@given(scale=st.floats(min_value=0.01, max_value=100.0,
                       allow_nan=False, allow_infinity=False))
def test_ndvi_scale_invariant(scale):
    rng = np.random.default_rng(7)
    nir = rng.uniform(0.05, 1.0, size=(8, 8)).astype(np.float32)
    red = rng.uniform(0.05, 1.0, size=(8, 8)).astype(np.float32)
    base = maskgen.ndvi_mask(_raster(nir, red)).values
    scaled = maskgen.ndvi_mask(_raster(nir * scale, red * scale)).values
    assert np.array_equal(base, scaled)


# ---------------------------------------------------------------------------
# merge_masks
# ---------------------------------------------------------------------------

def _binary(array):
    return BinaryMask(np.asarray(array, dtype=np.uint8), IDENT)


def test_merge_all_zero_gives_other():
    z = _binary(np.zeros((3, 3)))
    merged = maskgen.merge_masks(z, z, z, z)
    assert np.all(merged.classes == OTHER)


def test_merge_priority_buildings_over_trees():
    b = _binary([[1]])
    t = _binary([[1]])
    z = _binary([[0]])
    merged = maskgen.merge_masks(b, z, t, z)
    assert merged.classes[0, 0] == BUILDINGS


def test_merge_single_class_water():
    z = _binary([[0]])
    merged = maskgen.merge_masks(z, z, z, _binary([[1]]))
    assert merged.classes[0, 0] == WATER


def test_merge_full_priority_chain():
    ones = _binary([[1]])
    z = _binary([[0]])
    assert maskgen.merge_masks(z, ones, ones, ones).classes[0, 0] == WATER
    assert maskgen.merge_masks(z, ones, ones, z).classes[0, 0] == ROADS
    assert maskgen.merge_masks(z, z, ones, z).classes[0, 0] == TREES


def test_merge_custom_priority():
    ones = _binary([[1]])
    z = _binary([[0]])
    merged = maskgen.merge_masks(ones, z, ones, z,
                                 priority=(TREES, BUILDINGS, WATER, ROADS))
    assert merged.classes[0, 0] == TREES


def test_merge_histogram_sums_to_pixels():
    rng = np.random.default_rng(9)
    masks = [_binary(rng.integers(0, 2, size=(17, 13))) for _ in range(4)]
    merged = maskgen.merge_masks(*masks)
    hist = np.bincount(merged.classes.ravel(), minlength=5)
    assert hist.sum() == 17 * 13


def test_merge_shape_and_transform_mismatch():
    a = _binary(np.zeros((2, 2)))
    b = _binary(np.zeros((3, 3)))
    with pytest.raises(ShapeMismatch):
        maskgen.merge_masks(a, b, a, a)
    other_t = BinaryMask(np.zeros((2, 2), dtype=np.uint8), AffineGeoTransform(5, 5, 1, -1))
    with pytest.raises(TransformMismatch):
        maskgen.merge_masks(a, other_t, a, a)


def test_feature_tag_validation():
    with pytest.raises(ValueError):
        VectorFeature("LineString", ((0, 0), (1, 1)), "Trees")
    with pytest.raises(GeometryTypeError):
        VectorFeature("Point", ((0, 0),), "Water")
