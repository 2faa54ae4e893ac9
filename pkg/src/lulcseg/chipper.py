"""Cutting rasters and label masks into aligned fixed-size training chips.

Grids are edge-flush: when the raster extent is not a multiple of the stride,
a final row/column of chips is pinned to the raster edge so every pixel is
covered, at the cost of overlap. Downstream mosaic merging resolves overlaps
by per-pixel max.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    EmptyDataset,
    InvalidClassValue,
    RasterSmallerThanChip,
    ShapeMismatch,
)
from .geo import NUM_CLASSES, OTHER, AffineGeoTransform, GeoRaster, LabelMask

DEFAULT_CHIP_SIZE = 256
# Training keeps a chip only when under half of it is nodata and at least this
# fraction of pixels carries a non-Other class.
MAX_NAN_FRACTION = 0.5
DEFAULT_MIN_CLASS_DENSITY = 0.05


@dataclass(frozen=True)
class ChipIndex:
    """Grid placement of one chip inside its parent raster."""

    row_off: int
    col_off: int
    chip_size: int = DEFAULT_CHIP_SIZE

    def __post_init__(self):
        if self.row_off < 0 or self.col_off < 0:
            raise ValueError("chip offsets must be >= 0")
        if self.chip_size < 1:
            raise ValueError("chip_size must be >= 1")


@dataclass(frozen=True)
class ChipRecord:
    """One image chip with its aligned label chip."""

    image: np.ndarray
    label: np.ndarray
    index: ChipIndex
    nan_fraction: float

    def __post_init__(self):
        cs = self.index.chip_size
        if self.image.ndim != 3 or self.image.shape[0] != 4 or self.image.shape[1:] != (cs, cs):
            raise ShapeMismatch(
                f"image chip must be [4, {cs}, {cs}], got {self.image.shape}"
            )
        if self.label.shape != (cs, cs):
            raise ShapeMismatch(f"label chip must be [{cs}, {cs}], got {self.label.shape}")


@dataclass
class ChipDataset:
    """Ordered chip collection produced by :func:`build_dataset`."""

    records: list[ChipRecord]
    mode: str
    source_transform: AffineGeoTransform
    crs_id: str = ""
    source_shape: tuple[int, int] | None = None
    stride: int = DEFAULT_CHIP_SIZE

    def __post_init__(self):
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")
        if self.mode == "train":
            bad = [r.index for r in self.records if r.nan_fraction >= MAX_NAN_FRACTION]
            if bad:
                raise ValueError(f"train records violate the nodata bound: {bad}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def chip_size(self) -> int:
        return self.records[0].index.chip_size if self.records else DEFAULT_CHIP_SIZE


def chip_grid(raster_shape, chip_size: int = DEFAULT_CHIP_SIZE,
              stride: int = DEFAULT_CHIP_SIZE) -> list[ChipIndex]:
    """Row-major grid of chip placements covering the full raster.

    Offsets advance by ``stride``; an extra edge-flush row/column is appended
    when the extent is not a stride multiple.
    """
    rows, cols = int(raster_shape[0]), int(raster_shape[1])
    if chip_size < 1:
        raise ValueError("chip_size must be >= 1")
    if not 1 <= stride <= chip_size:
        raise ValueError("stride must satisfy 1 <= stride <= chip_size")
    if rows < chip_size or cols < chip_size:
        raise RasterSmallerThanChip(
            f"raster {rows}x{cols} is smaller than one {chip_size}px chip"
        )

    def offsets(extent: int) -> list[int]:
        offs = list(range(0, extent - chip_size + 1, stride))
        if offs[-1] + chip_size < extent:
            offs.append(extent - chip_size)
        return offs

    return [
        ChipIndex(r, c, chip_size)
        for r in offsets(rows)
        for c in offsets(cols)
    ]


def nan_fraction(image_chip: np.ndarray, nodata_mask_chip: np.ndarray) -> float:
    """Fraction of spatial pixels flagged as nodata."""
    spatial = image_chip.shape[-2:]
    if nodata_mask_chip.shape != spatial:
        raise ShapeMismatch(
            f"nodata mask {nodata_mask_chip.shape} != chip extent {spatial}"
        )
    return float(np.count_nonzero(nodata_mask_chip)) / nodata_mask_chip.size


def class_density(label_chip: np.ndarray) -> float:
    """Fraction of pixels labelled with a class other than Other."""
    label_chip = np.asarray(label_chip)
    if label_chip.size and (label_chip.min() < 0 or label_chip.max() >= NUM_CLASSES):
        raise InvalidClassValue(
            f"label values must lie in [0, {NUM_CLASSES - 1}]"
        )
    return float(np.count_nonzero(label_chip != OTHER)) / label_chip.size


def build_dataset(raster: GeoRaster, mask: LabelMask, mode: str,
                  chip_size: int = DEFAULT_CHIP_SIZE,
                  stride: int = DEFAULT_CHIP_SIZE,
                  min_class_density: float = DEFAULT_MIN_CLASS_DENSITY) -> ChipDataset:
    """Chip an aligned raster/mask pair.

    Train mode keeps a chip only when its nodata fraction is strictly below
    0.5 and its class density reaches ``min_class_density``; eval mode keeps
    every chip. Nodata image pixels are zero-filled after the keep decision.
    """
    if raster.transform != mask.transform or raster.shape != mask.shape:
        raise AlignmentError(
            f"raster ({raster.shape}, {raster.transform}) and mask "
            f"({mask.shape}, {mask.transform}) are not aligned"
        )
    if raster.band_count != 4:
        raise ShapeMismatch(f"expected 4-band NRGB imagery, got {raster.band_count} bands")

    records = []
    for idx in chip_grid(raster.shape, chip_size, stride):
        rs = slice(idx.row_off, idx.row_off + chip_size)
        cs = slice(idx.col_off, idx.col_off + chip_size)
        nodata = raster.nodata_mask[rs, cs]
        label = mask.classes[rs, cs]
        nf = nan_fraction(raster.bands[:, rs, cs], nodata)
        if mode == "train":
            if nf >= MAX_NAN_FRACTION or class_density(label) < min_class_density:
                continue
        image = raster.bands[:, rs, cs].astype(np.float32, copy=True)
        image[:, nodata] = 0.0
        records.append(ChipRecord(image, label.astype(np.uint8, copy=True), idx, nf))
    return ChipDataset(records, mode, raster.transform, raster.crs_id, raster.shape,
                       stride)


# ---------------------------------------------------------------------------
# On-disk chip store: manifest.json plus flat little-endian binary arrays.
# ---------------------------------------------------------------------------

def save_dataset(ds: ChipDataset, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in ds.records:
        stem = f"chip_{rec.index.row_off}_{rec.index.col_off}"
        rec.image.astype("<f4").tofile(directory / f"{stem}.img")
        rec.label.astype(np.uint8).tofile(directory / f"{stem}.lbl")
        entries.append({
            "row_off": rec.index.row_off,
            "col_off": rec.index.col_off,
            "nan_fraction": rec.nan_fraction,
            "image_file": f"{stem}.img",
            "label_file": f"{stem}.lbl",
        })
    manifest = {
        "transform": list(ds.source_transform.to_tuple()),
        "crs_id": ds.crs_id,
        "chip_size": ds.chip_size,
        "stride": ds.stride,
        "mode": ds.mode,
        "source_shape": list(ds.source_shape) if ds.source_shape else None,
        "records": entries,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def load_dataset(directory) -> ChipDataset:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    cs = manifest["chip_size"]
    records = []
    for entry in manifest["records"]:
        image = np.fromfile(directory / entry["image_file"], dtype="<f4")
        image = image.reshape(4, cs, cs)
        label = np.fromfile(directory / entry["label_file"], dtype=np.uint8)
        label = label.reshape(cs, cs)
        idx = ChipIndex(entry["row_off"], entry["col_off"], cs)
        records.append(ChipRecord(image, label, idx, entry["nan_fraction"]))
    transform = AffineGeoTransform(*manifest["transform"])
    shape = tuple(manifest["source_shape"]) if manifest.get("source_shape") else None
    return ChipDataset(records, manifest["mode"], transform, manifest["crs_id"], shape,
                       manifest.get("stride", cs))


def require_nonempty(ds: ChipDataset) -> ChipDataset:
    if not ds.records:
        raise EmptyDataset("chip dataset has no records")
    return ds
