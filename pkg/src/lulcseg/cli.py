"""Command-line pipeline driver.

Commands cover every stage from vector rasterization to recall evaluation;
``pipeline`` chains them. Each stage writes a provenance record keyed by a
hash of its config section and input files, so stale outputs are recomputed
instead of silently reused. Logs go to stderr as JSON lines; human summaries
go to stdout.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .chipper import build_dataset, load_dataset, save_dataset
from .config import load_config
from .errors import ConfigValidationError, PipelineError
from .geo import (
    BUILDINGS,
    ROADS,
    TREES,
    WATER,
    GeoRaster,
    LabelMask,
    load_georaster,
    load_labelmask,
    save_georaster,
    save_labelmask,
    write_geojson,
)
from .inference import (
    load_mosaic,
    load_probability_chips,
    merge_chips,
    predict_chips,
    recall_report,
    save_mosaic,
    save_probability_chips,
    write_recall_report,
)
from .losses import HausdorffParams
from .maskgen import (
    features_from_geojson,
    merge_masks,
    ndvi_mask,
    rasterize_lines,
    rasterize_polygons,
)
from .models import load_checkpoint
from .synthdata import SceneSpec, generate_scene
from .trainer import TrainConfig, train_cps, train_supervised

LOG = logging.getLogger("lulcseg")

PIPELINE_STAGES = ("rasterize", "chip", "train", "predict", "merge", "evaluate")
COMMANDS = ("synth",) + PIPELINE_STAGES + ("pipeline",)

_PRIORITY_CODES = {"Buildings": BUILDINGS, "Roads": ROADS, "Trees": TREES, "Water": WATER}


class _JsonLogFormatter(logging.Formatter):
    def format(self, record):
        entry = {
            "ts": round(time.time(), 3),
            "level": record.levelname.lower(),
            "event": record.getMessage(),
        }
        if record.__dict__.get("data"):
            entry.update(record.__dict__["data"])
        return json.dumps(entry)


def _setup_logging() -> None:
    level = os.environ.get("LULCSEG_LOG", "info").upper()
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLogFormatter())
    LOG.handlers[:] = [handler]
    LOG.setLevel(getattr(logging, level, logging.INFO))


def _log(event: str, **data) -> None:
    LOG.info(event, extra={"data": data})


# ---------------------------------------------------------------------------
# Provenance
# ---------------------------------------------------------------------------

def _file_sha(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _stage_hash(stage: str, section, inputs: dict) -> str:
    doc = json.dumps({"stage": stage, "section": section, "inputs": inputs},
                     sort_keys=True)
    return hashlib.sha256(doc.encode()).hexdigest()


def _input_manifest(paths) -> dict:
    manifest = {}
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise PipelineError(f"missing input: {path}")
        if path.is_dir():
            for child in sorted(path.rglob("*")):
                if child.is_file():
                    manifest[str(child)] = _file_sha(child)
        else:
            manifest[str(path)] = _file_sha(path)
    return manifest


def _up_to_date(stage_dir: Path, stage_hash: str) -> bool:
    record = stage_dir / "provenance.json"
    if not record.exists():
        return False
    try:
        with open(record) as fh:
            return json.load(fh).get("hash") == stage_hash
    except (OSError, json.JSONDecodeError):
        return False


def _write_provenance(stage_dir: Path, stage: str, stage_hash: str, inputs: dict) -> None:
    with open(stage_dir / "provenance.json", "w") as fh:
        json.dump({"stage": stage, "hash": stage_hash, "inputs": inputs}, fh, indent=1)


def _run_stage(stage: str, cfg: dict, section, input_paths, stage_dir: Path, body) -> bool:
    """Run one stage unless its provenance hash already matches. Returns
    True when work was done, False on an up-to-date skip."""
    inputs = _input_manifest(input_paths)
    stage_hash = _stage_hash(stage, section, inputs)
    if _up_to_date(stage_dir, stage_hash):
        _log("stage_skipped", stage=stage, reason="up-to-date", hash=stage_hash[:12])
        print(f"[{stage}] up to date, skipping")
        return False
    started = time.perf_counter()
    stage_dir.mkdir(parents=True, exist_ok=True)
    body()
    _write_provenance(stage_dir, stage, stage_hash, inputs)
    _log("stage_done", stage=stage, seconds=round(time.perf_counter() - started, 3),
         hash=stage_hash[:12])
    print(f"[{stage}] done in {time.perf_counter() - started:.1f}s -> {stage_dir}")
    return True


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_synth(cfg: dict) -> None:
    out = Path(cfg["paths"]["output_dir"]) / "scene"
    section = cfg["synth"]

    def body():
        spec = SceneSpec(
            seed=section["seed"], size=tuple(section["size"]),
            n_buildings=section["n_buildings"], n_roads=section["n_roads"],
            n_water=section["n_water"], sparsity=section["sparsity"],
            noise_sigma=section["noise_sigma"],
        )
        raster, dense, sparse = generate_scene(spec)
        save_georaster(out / "raster.tif", raster)
        save_labelmask(out / "dense_mask.tif", dense, raster.crs_id)
        for tag, filename in (("Buildings", "buildings.geojson"),
                              ("Roads", "roads.geojson"),
                              ("Water", "water.geojson")):
            write_geojson(out / filename, [f.to_geojson() for f in sparse[tag]])

    _run_stage("synth", cfg, section, [], out, body)


def stage_rasterize(cfg: dict) -> None:
    paths = cfg["paths"]
    out = Path(paths["output_dir"]) / "masks"
    section = cfg["maskgen"]
    inputs = [paths["raster"], paths["vectors"]["buildings"],
              paths["vectors"]["roads"], paths["vectors"]["water"]]

    def body():
        raster = load_georaster(paths["raster"])
        shape = raster.shape
        buildings = rasterize_polygons(
            features_from_geojson(paths["vectors"]["buildings"], "Buildings"),
            raster.transform, shape)
        roads = rasterize_lines(
            features_from_geojson(paths["vectors"]["roads"], "Roads"),
            raster.transform, shape, section["buffer_px"])
        water = rasterize_polygons(
            features_from_geojson(paths["vectors"]["water"], "Water"),
            raster.transform, shape)
        trees = ndvi_mask(raster, section["ndvi_threshold"])
        priority = tuple(_PRIORITY_CODES[name] for name in section["class_priority"])
        merged = merge_masks(buildings, roads, trees, water, priority)
        for name, mask in (("buildings", buildings), ("roads", roads),
                           ("trees", trees), ("water", water)):
            save_labelmask(out / f"{name}.tif",
                           LabelMask(mask.values.astype(np.int64), mask.transform),
                           raster.crs_id)
        save_labelmask(out / "merged.tif", merged, raster.crs_id)

    _run_stage("rasterize", cfg, section, inputs, out, body)


def stage_chip(cfg: dict) -> None:
    paths = cfg["paths"]
    out = Path(paths["output_dir"]) / "chips"
    section = cfg["chipper"]
    merged = Path(paths["output_dir"]) / "masks" / "merged.tif"
    inputs = [paths["raster"], merged]

    def body():
        raster = load_georaster(paths["raster"])
        mask = load_labelmask(merged)
        raster = GeoRaster(raster.bands, mask.transform, raster.nodata_mask,
                           raster.crs_id)
        for mode in ("train", "eval"):
            ds = build_dataset(raster, mask, mode, section["chip_size"],
                               section["stride"], section["min_class_density"])
            save_dataset(ds, out / mode)
            _log("chipped", mode=mode, records=len(ds))

    _run_stage("chip", cfg, section, inputs, out, body)


def _train_config(cfg: dict, checkpoint_dir: Path) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        regime=t["regime"], checkpoint_dir=str(checkpoint_dir),
        epochs=t["epochs"], rampup_length=t["rampup_length"],
        lambda_max=t["lambda_max"], batch_size=t["batch_size"],
        learning_rate=t["learning_rate"], optimizer=t["optimizer"],
        momentum=t["momentum"],
        hausdorff=HausdorffParams(t["hausdorff"]["erosions"],
                                  t["hausdorff"]["exponent"]),
        seed_pair=tuple(t["seed_pair"]), data_seed=t["data_seed"],
        width_multiplier=t["width_multiplier"],
        class_weight_cap=t["class_weight_cap"],
        tversky_a=t["tversky_a"], tversky_b=t["tversky_b"],
        ramp_over_total=t["ramp_over_total"],
    )


def stage_train(cfg: dict) -> None:
    out = Path(cfg["paths"]["output_dir"]) / "train"
    store = Path(cfg["paths"]["output_dir"]) / "chips" / "train"
    section = cfg["train"]

    def body():
        ds = load_dataset(store)
        train_cfg = _train_config(cfg, out)
        if section["regime"] == "cps":
            train_cps(train_cfg, ds)
        else:
            train_supervised(train_cfg, ds)

    _run_stage("train", cfg, section, [store], out, body)


def stage_predict(cfg: dict) -> None:
    paths = cfg["paths"]
    out = Path(paths["output_dir"]) / "predictions"
    train_dir = Path(paths["output_dir"]) / "train"
    store = Path(paths["output_dir"]) / "chips" / "eval"
    regime = cfg["train"]["regime"]
    checkpoint_dirs = (
        [train_dir / "model_1", train_dir / "model_2"] if regime == "cps"
        else [train_dir / "model"]
    )

    def body():
        models = [load_checkpoint(d)[0] for d in checkpoint_dirs]
        ds = load_dataset(store)
        chips = predict_chips(models, ds, batch_size=cfg["train"]["batch_size"])
        save_probability_chips(chips, out)
        _log("predicted", chips=len(chips), models=len(models))

    _run_stage("predict", cfg, {"regime": regime}, [store] + checkpoint_dirs, out, body)


def stage_merge(cfg: dict) -> None:
    paths = cfg["paths"]
    out = Path(paths["output_dir"]) / "mosaic"
    predictions = Path(paths["output_dir"]) / "predictions"
    store = Path(paths["output_dir"]) / "chips" / "eval"

    def body():
        ds = load_dataset(store)
        if ds.source_shape is None:
            raise PipelineError("eval chip store lacks the source raster shape")
        chips = load_probability_chips(predictions)
        mosaic = merge_chips(chips, ds.source_shape, ds.source_transform)
        save_mosaic(mosaic, out / "probabilities.tif", out / "classes.tif",
                    out / "coverage.tif", ds.crs_id)

    _run_stage("merge", cfg, {}, [predictions, store], out, body)


def stage_evaluate(cfg: dict) -> None:
    paths = cfg["paths"]
    out = Path(paths["output_dir"]) / "metrics"
    mosaic_dir = Path(paths["output_dir"]) / "mosaic"
    section = cfg["eval"]
    inputs = [mosaic_dir / "probabilities.tif", mosaic_dir / "coverage.tif",
              paths["ground_truth"]]

    def body():
        mosaic = load_mosaic(mosaic_dir / "probabilities.tif",
                             mosaic_dir / "coverage.tif")
        gt = load_labelmask(paths["ground_truth"])
        report = recall_report(mosaic, gt, section["thresholds"])
        write_recall_report(report, out / "recall.json", out / "recall.txt")
        print((out / "recall.txt").read_text())

    _run_stage("evaluate", cfg, section, inputs, out, body)


_STAGE_FUNCS = {
    "synth": stage_synth,
    "rasterize": stage_rasterize,
    "chip": stage_chip,
    "train": stage_train,
    "predict": stage_predict,
    "merge": stage_merge,
    "evaluate": stage_evaluate,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _acquire_lock(out_dir: Path):
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(
            f"output directory is locked by another run (remove {lock} if stale)"
        ) from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    return lock


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="lulcseg",
        description="Sparse-label land-cover segmentation pipeline",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY.PATH=VALUE", help="override a config value")
    parser.add_argument("--version", action="version", version=__version__)
    args = parser.parse_args(argv)

    _setup_logging()
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigValidationError as exc:
        LOG.error("config_invalid", extra={"data": {"error": str(exc)}})
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(cfg["paths"]["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        lock = _acquire_lock(out_dir)
    except PipelineError as exc:
        LOG.error("locked", extra={"data": {"error": str(exc)}})
        return 1
    try:
        with open(out_dir / "resolved_config.json", "w") as fh:
            json.dump(cfg, fh, indent=1)
        _log("run_started", command=args.command, output_dir=str(out_dir))
        if args.command == "pipeline":
            for stage in PIPELINE_STAGES:
                _STAGE_FUNCS[stage](cfg)
        else:
            _STAGE_FUNCS[args.command](cfg)
        _log("run_finished", command=args.command)
        return 0
    except PipelineError as exc:
        LOG.error("stage_failed", extra={"data": {
            "error_type": type(exc).__name__, "error": str(exc)}})
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        lock.unlink(missing_ok=True)


if __name__ == "__main__":
    sys.exit(main())
