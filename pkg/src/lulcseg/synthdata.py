"""Deterministic synthetic NRGB scenes with dense ground truth and
controllably-sparsified vector labels.

Objects are placed in pixel space and exported as world-coordinate vector
features, so the generated data flows through the same rasterization and
chipping paths as real imagery. Band values are class-consistent: vegetation
pixels get NIR > R so the NDVI mask recovers them, every other class sits
strictly below the NDVI threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SceneTooSmall
from .geo import (
    BUILDINGS,
    OTHER,
    ROADS,
    TREES,
    WATER,
    AffineGeoTransform,
    GeoRaster,
    pixel_to_world,
)
from .maskgen import (
    DEFAULT_PRIORITY,
    BinaryMask,
    VectorFeature,
    merge_masks,
    rasterize_lines,
    rasterize_polygons,
    rasterize_rings,
)

MIN_SCENE_SIZE = 256

# Band palette per class, order (NIR, R, G, B). NDVI sits above -0.1 only for
# Trees: +0.33 vs -0.2 (Buildings), -0.22 (Roads), -0.5 (Water), -0.25 (Other).
_PALETTE = {
    BUILDINGS: (0.40, 0.60, 0.55, 0.50),
    ROADS: (0.35, 0.55, 0.50, 0.55),
    TREES: (0.60, 0.30, 0.50, 0.30),
    WATER: (0.05, 0.15, 0.25, 0.35),
    OTHER: (0.30, 0.50, 0.45, 0.40),
}

_DEFAULT_TRANSFORM = AffineGeoTransform(
    origin_x=500_000.0, origin_y=1_400_000.0, pixel_width=2.0, pixel_height=-2.0
)


@dataclass(frozen=True)
class SceneSpec:
    """Recipe for one synthetic scene."""

    seed: int
    size: tuple[int, int] = (512, 512)
    n_buildings: int = 12
    n_roads: int = 4
    n_water: int = 2
    sparsity: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.sparsity <= 1.0:
            raise ValueError("sparsity must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.size[0] < MIN_SCENE_SIZE or self.size[1] < MIN_SCENE_SIZE:
            raise SceneTooSmall(
                f"scene must be at least {MIN_SCENE_SIZE}px per side, got {self.size}"
            )


def _to_world(t: AffineGeoTransform, points_px) -> tuple:
    pts = []
    for r, c in points_px:
        x, y = pixel_to_world(t, r, c)
        pts.append((float(x), float(y)))
    return tuple(pts)


def _rect(rng, rows, cols):
    h = rng.uniform(10.0, 30.0)
    w = rng.uniform(10.0, 30.0)
    r0 = rng.uniform(2.0, rows - h - 2.0)
    c0 = rng.uniform(2.0, cols - w - 2.0)
    return [(r0, c0), (r0, c0 + w), (r0 + h, c0 + w), (r0 + h, c0), (r0, c0)]


def _blob(rng, rows, cols, radius_lo, radius_hi):
    radius = rng.uniform(radius_lo, radius_hi)
    cr = rng.uniform(radius + 2.0, rows - radius - 2.0)
    cc = rng.uniform(radius + 2.0, cols - radius - 2.0)
    n = 16
    wobble = rng.uniform(0.75, 1.25, size=n)
    ring = [
        (cr + radius * wobble[i] * math.sin(2.0 * math.pi * i / n),
         cc + radius * wobble[i] * math.cos(2.0 * math.pi * i / n))
        for i in range(n)
    ]
    ring.append(ring[0])
    return ring


def _polyline(rng, rows, cols):
    n = int(rng.integers(3, 6))
    cs = np.sort(rng.uniform(0.0, cols, size=n))
    cs[0], cs[-1] = 0.0, float(cols)
    rs = rng.uniform(0.0, rows, size=n)
    return list(zip(rs.tolist(), cs.tolist()))


def generate_scene(spec: SceneSpec,
                   transform: AffineGeoTransform = _DEFAULT_TRANSFORM,
                   crs_id: str = "EPSG:32643"):
    """Build one scene.

    Returns (raster, dense_mask, sparse_vectors) where sparse_vectors maps
    class tag -> VectorFeature list with a seeded-random fraction ``sparsity``
    of whole objects withheld per class. The retained count is exactly
    floor((1 - sparsity) * n) and, for a fixed seed, the retained set at
    higher sparsity is a subset of the set at any lower sparsity.
    """
    rows, cols = spec.size
    shape = (rows, cols)
    rng = np.random.default_rng(spec.seed)

    buildings = [
        VectorFeature("Polygon", (_to_world(transform, _rect(rng, rows, cols)),), "Buildings")
        for _ in range(spec.n_buildings)
    ]
    roads = [
        VectorFeature("LineString", _to_world(transform, _polyline(rng, rows, cols)), "Roads")
        for _ in range(spec.n_roads)
    ]
    water = [
        VectorFeature("Polygon", (_to_world(transform, _blob(rng, rows, cols, 20.0, 45.0)),),
                      "Water")
        for _ in range(spec.n_water)
    ]
    n_veg = max(2, (rows * cols) // (MIN_SCENE_SIZE * MIN_SCENE_SIZE))
    veg_rings = [_to_world(transform, _blob(rng, rows, cols, 25.0, 60.0))
                 for _ in range(n_veg)]

    object_masks = (
        [rasterize_polygons([f], transform, shape).values for f in buildings]
        + [rasterize_lines([f], transform, shape, buffer_px=3).values for f in roads]
        + [rasterize_polygons([f], transform, shape).values for f in water]
        + [rasterize_rings([ring], transform, shape).values for ring in veg_rings]
    )
    nb, nr, nw = spec.n_buildings, spec.n_roads, spec.n_water

    def union(masks):
        out = np.zeros(shape, dtype=np.uint8)
        for m in masks:
            out |= m
        return BinaryMask(out, transform)

    b_mask = union(object_masks[:nb])
    r_mask = union(object_masks[nb:nb + nr])
    w_mask = union(object_masks[nb + nr:nb + nr + nw])
    t_mask = union(object_masks[nb + nr + nw:])
    dense = merge_masks(b_mask, r_mask, t_mask, w_mask, priority=DEFAULT_PRIORITY)
    bands = _render_bands(dense.classes, rng, spec.noise_sigma, object_masks)
    raster = GeoRaster(bands=bands, transform=transform, crs_id=crs_id)

    sparse = {
        "Buildings": _retain(buildings, spec.sparsity, rng),
        "Roads": _retain(roads, spec.sparsity, rng),
        "Water": _retain(water, spec.sparsity, rng),
    }
    return raster, dense, sparse


def _render_bands(classes: np.ndarray, rng, noise_sigma: float, object_masks) -> np.ndarray:
    palette = np.zeros((5, 4), dtype=np.float32)
    for code, values in _PALETTE.items():
        palette[code] = values
    bands = palette[classes].transpose(2, 0, 1).copy()
    # Per-object brightness jitter; all bands share the factor so the NDVI
    # ratio is untouched (the index is scale-free).
    factors = rng.uniform(0.9, 1.1, size=len(object_masks)).astype(np.float32)
    for factor, mask in zip(factors, object_masks):
        bands[:, mask == 1] *= factor
    if noise_sigma > 0:
        bands = bands + rng.normal(0.0, noise_sigma, size=bands.shape).astype(np.float32)
        bands = np.clip(bands, 0.01, None)
    return bands.astype(np.float32)


def _retain(features: list, sparsity: float, rng) -> list:
    """Keep floor((1 - sparsity) * n) features, chosen by a seeded shuffle.

    The shuffle is drawn regardless of sparsity so the retained set at higher
    sparsity is a prefix-subset of the one at lower sparsity.
    """
    order = rng.permutation(len(features))
    keep = int(math.floor((1.0 - sparsity) * len(features)))
    return [features[i] for i in sorted(order[:keep])]
