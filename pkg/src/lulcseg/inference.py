"""Post-processing and evaluation: softmax ensembling of model pairs,
geospatial max-pool merging of prediction chips, and per-class recall.

Recall is the headline metric because sparse ground truth punishes
false-positive-sensitive scores; classes absent from the ground truth report
NaN and are excluded from averages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .chipper import ChipDataset, ChipIndex
from .errors import AlignmentError, ChipOutOfBounds, IndexMismatch, ShapeMismatch
from .geo import (
    CLASS_NAMES,
    NUM_CLASSES,
    AffineGeoTransform,
    LabelMask,
    read_geotiff,
    write_geotiff,
)

_SIMPLEX_TOL = 1e-5
NAMED_CLASSES = tuple(range(4))  # Buildings, Roads, Trees, Water


@dataclass(frozen=True)
class ProbabilityChip:
    """Per-class softmax probabilities for one chip."""

    probs: np.ndarray
    index: ChipIndex

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float32)
        cs = self.index.chip_size
        if probs.shape != (NUM_CLASSES, cs, cs):
            raise ShapeMismatch(
                f"probs must be [{NUM_CLASSES}, {cs}, {cs}], got {probs.shape}"
            )
        sums = probs.sum(axis=0)
        if np.abs(sums - 1.0).max() > _SIMPLEX_TOL:
            raise ValueError("per-pixel class probabilities must sum to 1")
        object.__setattr__(self, "probs", probs)


@dataclass(frozen=True)
class ProbabilityMosaic:
    """Full-scene class probabilities with per-pixel chip coverage counts."""

    probs: np.ndarray
    transform: AffineGeoTransform
    coverage: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape[1:]


def ensemble(p1: ProbabilityChip, p2: ProbabilityChip) -> ProbabilityChip:
    """Element-wise mean of two aligned probability chips."""
    if p1.index != p2.index:
        raise IndexMismatch(f"chip indices differ: {p1.index} vs {p2.index}")
    return ProbabilityChip((p1.probs + p2.probs) / 2.0, p1.index)


def merge_chips(chips, mosaic_shape, transform: AffineGeoTransform) -> ProbabilityMosaic:
    """Merge prediction chips into a mosaic by per-pixel, per-class maximum.

    The max is commutative and associative, so any chip order (or overlap
    pattern) yields the identical mosaic. Uncovered pixels stay 0 with
    coverage 0.
    """
    rows, cols = int(mosaic_shape[0]), int(mosaic_shape[1])
    probs = np.zeros((NUM_CLASSES, rows, cols), dtype=np.float32)
    coverage = np.zeros((rows, cols), dtype=np.int32)
    for chip in chips:
        idx = chip.index
        if idx.row_off + idx.chip_size > rows or idx.col_off + idx.chip_size > cols:
            raise ChipOutOfBounds(f"chip {idx} exceeds mosaic {rows}x{cols}")
        rs = slice(idx.row_off, idx.row_off + idx.chip_size)
        cs = slice(idx.col_off, idx.col_off + idx.chip_size)
        np.maximum(probs[:, rs, cs], chip.probs, out=probs[:, rs, cs])
        coverage[rs, cs] += 1
    return ProbabilityMosaic(probs, transform, coverage)


def recall_per_class(mosaic: ProbabilityMosaic, gt: LabelMask, threshold: float) -> np.ndarray:
    """Recall TP/(TP+FN) per class at an inclusive probability threshold.

    A pixel counts as predicted-c when probs_c >= threshold, independently
    per class. Classes with no ground-truth pixels return NaN.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if mosaic.shape != gt.shape or mosaic.transform != gt.transform:
        raise AlignmentError(
            f"mosaic ({mosaic.shape}) and ground truth ({gt.shape}) are not aligned"
        )
    recalls = np.full(NUM_CLASSES, np.nan)
    for c in range(NUM_CLASSES):
        positives = gt.classes == c
        total = int(positives.sum())
        if total == 0:
            continue
        tp = int((positives & (mosaic.probs[c] >= threshold)).sum())
        recalls[c] = tp / total
    return recalls


def mean_named_recall(recalls: np.ndarray) -> float:
    """Average recall over the four named classes, skipping NaN entries."""
    named = np.asarray(recalls)[list(NAMED_CLASSES)]
    if np.all(np.isnan(named)):
        return float("nan")
    return float(np.nanmean(named))


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def predict_chips(models, ds: ChipDataset, batch_size: int = 4) -> list[ProbabilityChip]:
    """Run one or more models over a chip dataset and average their softmax
    outputs per chip (the two-model ensemble when given a pair)."""
    models = list(models)
    for model in models:
        model.eval()
    chips = []
    records = ds.records
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            batch = records[start:start + batch_size]
            x = torch.from_numpy(np.stack([r.image for r in batch])).float()
            mean_probs = None
            for model in models:
                probs = model(x).softmax(dim=1)
                mean_probs = probs if mean_probs is None else mean_probs + probs
            mean_probs = (mean_probs / len(models)).numpy().astype(np.float32)
            for rec, probs in zip(batch, mean_probs):
                # renormalize away float32 softmax rounding
                probs = probs / probs.sum(axis=0, keepdims=True)
                chips.append(ProbabilityChip(probs, rec.index))
    return chips


def save_probability_chips(chips, directory) -> None:
    """Store prediction chips as flat float32 files plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for chip in chips:
        stem = f"pred_{chip.index.row_off}_{chip.index.col_off}"
        chip.probs.astype("<f4").tofile(directory / f"{stem}.prb")
        entries.append({
            "row_off": chip.index.row_off,
            "col_off": chip.index.col_off,
            "chip_size": chip.index.chip_size,
            "file": f"{stem}.prb",
        })
    with open(directory / "manifest.json", "w") as fh:
        json.dump({"chips": entries}, fh, indent=1)


def load_probability_chips(directory) -> list[ProbabilityChip]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    chips = []
    for entry in manifest["chips"]:
        cs = entry["chip_size"]
        probs = np.fromfile(directory / entry["file"], dtype="<f4")
        probs = probs.reshape(NUM_CLASSES, cs, cs)
        chips.append(ProbabilityChip(probs, ChipIndex(entry["row_off"], entry["col_off"], cs)))
    return chips


def save_mosaic(mosaic: ProbabilityMosaic, probs_path, classes_path,
                coverage_path=None, crs_id: str = "") -> None:
    """Persist the probability mosaic, its argmax class raster, and
    (optionally) the chip-coverage counts as GeoTIFFs."""
    write_geotiff(probs_path, mosaic.probs, mosaic.transform, crs_id)
    classes = mosaic.probs.argmax(axis=0).astype(np.uint8)
    write_geotiff(classes_path, classes, mosaic.transform, crs_id)
    if coverage_path is not None:
        write_geotiff(coverage_path, mosaic.coverage.astype(np.int32),
                      mosaic.transform, crs_id)


def load_mosaic(probs_path, coverage_path) -> ProbabilityMosaic:
    probs, transform, _, _ = read_geotiff(probs_path)
    coverage, _, _, _ = read_geotiff(coverage_path)
    return ProbabilityMosaic(probs.astype(np.float32), transform,
                             coverage.astype(np.int32))


# ---------------------------------------------------------------------------
# Recall report
# ---------------------------------------------------------------------------

def recall_report(mosaic: ProbabilityMosaic, gt: LabelMask, thresholds) -> dict:
    """Nested report {class name: {threshold: recall-or-null}}."""
    report = {name: {} for name in CLASS_NAMES}
    for threshold in thresholds:
        recalls = recall_per_class(mosaic, gt, threshold)
        for c, name in enumerate(CLASS_NAMES):
            value = recalls[c]
            report[name][f"{threshold:g}"] = None if np.isnan(value) else float(value)
    return report


def format_recall_table(report: dict) -> str:
    """Plain-text table: one row per threshold, one column per named class."""
    named = [CLASS_NAMES[c] for c in NAMED_CLASSES]
    thresholds = sorted({t for scores in report.values() for t in scores},
                        key=float)
    header = ["Threshold"] + named
    widths = [max(len(h), 10) for h in header]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for t in thresholds:
        cells = [t.ljust(widths[0])]
        for name, w in zip(named, widths[1:]):
            value = report[name].get(t)
            cells.append(("n/a" if value is None else f"{value:.4f}").ljust(w))
        lines.append("  ".join(cells))
    return "\n".join(lines)


def write_recall_report(report: dict, json_path, text_path) -> None:
    with open(json_path, "w") as fh:
        json.dump(report, fh, indent=1)
    with open(text_path, "w") as fh:
        fh.write(format_recall_table(report) + "\n")
