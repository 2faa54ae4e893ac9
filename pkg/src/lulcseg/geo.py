"""Georeferenced raster/vector data model and coordinate transforms.

Pixel space uses (row, col); world space uses (x, y). The affine transform
maps the *corner* of pixel (0, 0) to (origin_x, origin_y), so the centre of
pixel (r, c) sits at fractional pixel coordinates (r + 0.5, c + 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import tifffile

from .errors import InvalidClassValue, ShapeMismatch, SingularTransform

# Class palette. "Other" is the implicit background class.
BUILDINGS, ROADS, TREES, WATER, OTHER = range(5)
NUM_CLASSES = 5
CLASS_NAMES = ("Buildings", "Roads", "Trees", "Water", "Other")

# GeoTIFF/TIFF tag codes used by the reader/writer.
_TAG_MODEL_PIXEL_SCALE = 33550
_TAG_MODEL_TIEPOINT = 33922
_TAG_MODEL_TRANSFORMATION = 34264
_TAG_GEO_KEY_DIRECTORY = 34735
_TAG_GEO_ASCII_PARAMS = 34737
_TAG_GDAL_NODATA = 42113


@dataclass(frozen=True)
class AffineGeoTransform:
    """Six-parameter affine mapping between pixel (row, col) and world (x, y).

    ``pixel_height`` is typically negative for north-up rasters.  The shear
    terms default to zero; ``col_rotation`` contributes row-dependence to x
    and ``row_rotation`` contributes col-dependence to y::

        x = origin_x + col * pixel_width + row * col_rotation
        y = origin_y + row * pixel_height + col * row_rotation
    """

    origin_x: float
    origin_y: float
    pixel_width: float
    pixel_height: float
    row_rotation: float = 0.0
    col_rotation: float = 0.0

    def __post_init__(self):
        if self.pixel_width == 0 or self.pixel_height == 0:
            raise ValueError("pixel_width and pixel_height must be nonzero")

    @property
    def determinant(self) -> float:
        """Determinant of the 2x2 linear part."""
        return self.pixel_width * self.pixel_height - self.row_rotation * self.col_rotation

    def to_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (
            self.origin_x,
            self.origin_y,
            self.pixel_width,
            self.pixel_height,
            self.row_rotation,
            self.col_rotation,
        )


def pixel_to_world(t: AffineGeoTransform, row, col):
    """Map fractional pixel coordinates to world coordinates.

    Accepts scalars or numpy arrays; integer (row, col) arguments address the
    corner of that pixel.
    """
    x = t.origin_x + np.multiply(col, t.pixel_width) + np.multiply(row, t.col_rotation)
    y = t.origin_y + np.multiply(row, t.pixel_height) + np.multiply(col, t.row_rotation)
    return x, y


def world_to_pixel(t: AffineGeoTransform, x, y):
    """Map world coordinates to fractional pixel (row, col).

    Exact inverse of :func:`pixel_to_world`.  Raises
    :class:`SingularTransform` when the linear part is not invertible.
    """
    det = t.determinant
    if det == 0.0:
        raise SingularTransform(f"transform {t} has zero determinant")
    dx = np.subtract(x, t.origin_x)
    dy = np.subtract(y, t.origin_y)
    # Invert [[pixel_width, col_rotation], [row_rotation, pixel_height]] @ (col, row).
    col = (t.pixel_height * dx - t.col_rotation * dy) / det
    row = (t.pixel_width * dy - t.row_rotation * dx) / det
    return row, col


@dataclass(frozen=True)
class GeoRaster:
    """Multi-band georeferenced pixel array.

    Imagery uses band order (NIR, R, G, B).  ``nodata_mask`` is True where a
    pixel carries no valid data; NaN band values are folded into the mask at
    construction.
    """

    bands: np.ndarray
    transform: AffineGeoTransform
    nodata_mask: np.ndarray = None
    crs_id: str = ""

    def __post_init__(self):
        bands = np.asarray(self.bands)
        if bands.ndim != 3:
            raise ShapeMismatch(f"bands must be [band, row, col], got shape {bands.shape}")
        mask = self.nodata_mask
        if mask is None:
            mask = np.zeros(bands.shape[1:], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != bands.shape[1:]:
            raise ShapeMismatch(
                f"nodata_mask shape {mask.shape} != raster extent {bands.shape[1:]}"
            )
        if np.issubdtype(bands.dtype, np.floating):
            mask = mask | np.isnan(bands).any(axis=0)
        object.__setattr__(self, "bands", bands)
        object.__setattr__(self, "nodata_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        """(rows, cols) extent."""
        return self.bands.shape[1:]

    @property
    def band_count(self) -> int:
        return self.bands.shape[0]


@dataclass(frozen=True)
class LabelMask:
    """Single-band class raster over the five-class palette."""

    classes: np.ndarray
    transform: AffineGeoTransform

    def __post_init__(self):
        classes = np.asarray(self.classes)
        if classes.ndim != 2:
            raise ShapeMismatch(f"classes must be [row, col], got shape {classes.shape}")
        if not np.issubdtype(classes.dtype, np.integer):
            raise InvalidClassValue(f"class raster must be integer, got {classes.dtype}")
        if classes.size and (classes.min() < 0 or classes.max() >= NUM_CLASSES):
            raise InvalidClassValue(
                f"class values must lie in [0, {NUM_CLASSES - 1}], "
                f"got range [{classes.min()}, {classes.max()}]"
            )
        object.__setattr__(self, "classes", classes)

    @property
    def shape(self) -> tuple[int, int]:
        return self.classes.shape


# ---------------------------------------------------------------------------
# GeoTIFF I/O
# ---------------------------------------------------------------------------

def _geotiff_tags(transform: AffineGeoTransform, crs_id: str, nodata: str | None):
    """Build tifffile extratags encoding georeferencing for a write."""
    mt = [
        transform.pixel_width, transform.col_rotation, 0.0, transform.origin_x,
        transform.row_rotation, transform.pixel_height, 0.0, transform.origin_y,
        0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    ]
    tags = [(_TAG_MODEL_TRANSFORMATION, "d", 16, mt, True)]
    if crs_id:
        ascii_params = crs_id + "|"
        keys = [1, 1, 0, 1, 1026, _TAG_GEO_ASCII_PARAMS, len(ascii_params), 0]
        tags.append((_TAG_GEO_KEY_DIRECTORY, "H", len(keys), keys, True))
        tags.append((_TAG_GEO_ASCII_PARAMS, "s", len(ascii_params), ascii_params, True))
    if nodata is not None:
        tags.append((_TAG_GDAL_NODATA, "s", len(nodata) + 1, nodata, True))
    return tags


def write_geotiff(path, array: np.ndarray, transform: AffineGeoTransform,
                  crs_id: str = "", nodata: str | None = None) -> None:
    """Write a 2-D or [band, row, col] 3-D array as a GeoTIFF."""
    array = np.asarray(array)
    kwargs = {"photometric": "minisblack"}
    if array.ndim == 3:
        kwargs["planarconfig"] = "separate"
    tifffile.imwrite(
        str(path), array, extratags=_geotiff_tags(transform, crs_id, nodata), **kwargs
    )


def _transform_from_tags(page) -> AffineGeoTransform:
    mt = page.tags.get(_TAG_MODEL_TRANSFORMATION)
    if mt is not None:
        v = mt.value
        return AffineGeoTransform(
            origin_x=float(v[3]), origin_y=float(v[7]),
            pixel_width=float(v[0]), pixel_height=float(v[5]),
            row_rotation=float(v[4]), col_rotation=float(v[1]),
        )
    scale = page.tags.get(_TAG_MODEL_PIXEL_SCALE)
    tie = page.tags.get(_TAG_MODEL_TIEPOINT)
    if scale is not None and tie is not None:
        sx, sy = float(scale.value[0]), float(scale.value[1])
        i, j, _, x, y = (float(f) for f in tie.value[:5])
        # Tiepoint maps raster point (col=i, row=j) to world (x, y).
        return AffineGeoTransform(
            origin_x=x - i * sx, origin_y=y + j * sy,
            pixel_width=sx, pixel_height=-sy,
        )
    raise ValueError("file carries no georeferencing tags")


def _crs_from_tags(page) -> str:
    directory = page.tags.get(_TAG_GEO_KEY_DIRECTORY)
    if directory is None:
        return ""
    keys = directory.value
    ascii_tag = page.tags.get(_TAG_GEO_ASCII_PARAMS)
    ascii_params = ascii_tag.value if ascii_tag is not None else ""
    for k in range(4, len(keys) - 3, 4):
        key_id, location, count, offset = keys[k:k + 4]
        if key_id in (3072, 2048) and location == 0:  # projected / geographic EPSG
            return f"EPSG:{offset}"
        if key_id == 1026 and location == _TAG_GEO_ASCII_PARAMS:  # citation
            return ascii_params[offset:offset + count].rstrip("|")
    return ""


def read_geotiff(path):
    """Read a GeoTIFF; returns (array, transform, crs_id, nodata_mask).

    ``nodata_mask`` is derived from the GDAL nodata tag plus any NaN values.
    """
    with tifffile.TiffFile(str(path)) as tf:
        array = tf.asarray()
        page = tf.pages[0]
        transform = _transform_from_tags(page)
        crs_id = _crs_from_tags(page)
        nodata_tag = page.tags.get(_TAG_GDAL_NODATA)
    spatial = array if array.ndim == 2 else array[0]
    mask = np.zeros(spatial.shape, dtype=bool)
    if np.issubdtype(array.dtype, np.floating):
        mask |= np.isnan(array).any(axis=0) if array.ndim == 3 else np.isnan(array)
        if nodata_tag is not None:
            value = str(nodata_tag.value).strip().strip("\x00")
            if value and value.lower() != "nan":
                fill = float(value)
                hits = array == fill
                mask |= hits.any(axis=0) if array.ndim == 3 else hits
    elif nodata_tag is not None:
        value = str(nodata_tag.value).strip().strip("\x00")
        if value:
            fill = int(float(value))
            hits = array == fill
            mask |= hits.any(axis=0) if array.ndim == 3 else hits
    return array, transform, crs_id, mask


def save_georaster(path, raster: GeoRaster) -> None:
    """Persist a GeoRaster; nodata pixels are written as NaN in every band."""
    bands = raster.bands.astype(np.float32, copy=True)
    bands[:, raster.nodata_mask] = np.nan
    write_geotiff(path, bands, raster.transform, raster.crs_id, nodata="nan")


def load_georaster(path) -> GeoRaster:
    array, transform, crs_id, mask = read_geotiff(path)
    if array.ndim == 2:
        array = array[None]
    return GeoRaster(
        bands=array.astype(np.float32), transform=transform,
        nodata_mask=mask, crs_id=crs_id,
    )


def save_labelmask(path, mask: LabelMask, crs_id: str = "") -> None:
    write_geotiff(path, mask.classes.astype(np.uint8), mask.transform, crs_id)


def load_labelmask(path) -> LabelMask:
    array, transform, _, _ = read_geotiff(path)
    if array.ndim == 3:
        array = array[0]
    return LabelMask(classes=array.astype(np.int64), transform=transform)


# ---------------------------------------------------------------------------
# GeoJSON (RFC 7946)
# ---------------------------------------------------------------------------

_GEOMETRY_TYPES = ("LineString", "Polygon", "MultiPolygon")


def read_geojson(path) -> list[dict]:
    """Read GeoJSON and return its geometry objects.

    Accepts a FeatureCollection, a single Feature, or a bare geometry.
    Only LineString, Polygon and MultiPolygon geometries are returned.
    """
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") == "FeatureCollection":
        geometries = [f.get("geometry") for f in doc.get("features", [])]
    elif doc.get("type") == "Feature":
        geometries = [doc.get("geometry")]
    else:
        geometries = [doc]
    out = []
    for geom in geometries:
        if geom is None:
            continue
        if geom.get("type") not in _GEOMETRY_TYPES:
            raise ValueError(f"unsupported geometry type {geom.get('type')!r}")
        out.append({"type": geom["type"], "coordinates": geom["coordinates"]})
    return out


def write_geojson(path, geometries: list[dict]) -> None:
    """Write geometries as a GeoJSON FeatureCollection."""
    doc = {
        "type": "FeatureCollection",
        "features": [
            {"type": "Feature", "properties": {}, "geometry": g} for g in geometries
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
