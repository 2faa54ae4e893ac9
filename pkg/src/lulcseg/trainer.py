"""Training orchestration for the three regimes: the dual-model cross
pseudo-supervision framework, and the two single-model supervised baselines
(U-Net with weighted cross-entropy, DeepLab with Tversky loss).

Runs are deterministic: model initialization comes from explicit per-model
seeds, batch order from (data_seed, epoch), and no global RNG state is
consumed, so identical configs reproduce identical histories and parameters.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .chipper import ChipDataset
from .errors import DivergedLoss, EmptyDataset
from .losses import (
    ClassWeights,
    HausdorffParams,
    class_weights_from_dataset,
    cps_loss,
    normalization_constant,
    rampup,
    supervised_loss,
    total_loss,
    tversky_loss,
    weighted_ce,
)
from .models import ModelConfig, SegmentationModel, build_model, save_checkpoint

REGIMES = ("cps", "unet_wce", "deeplab_tversky")
OPTIMIZERS = ("sgd_momentum", "adam")


@dataclass
class TrainConfig:
    regime: str
    checkpoint_dir: str
    epochs: int = 50
    rampup_length: int = 10
    lambda_max: float = 0.1
    batch_size: int = 4
    learning_rate: float = 0.01
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    hausdorff: HausdorffParams = field(default_factory=HausdorffParams)
    seed_pair: tuple[int, int] = (1, 2)
    data_seed: int = 0
    width_multiplier: float = 1.0
    class_weight_cap: float = 50.0
    tversky_a: float = 0.3
    tversky_b: float = 0.7
    ramp_over_total: bool = False

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not 0 <= self.rampup_length <= self.epochs:
            raise ValueError("need 0 <= rampup_length <= epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.lambda_max <= 0:
            raise ValueError("lambda_max must be > 0")


@dataclass
class TrainHistory:
    """Per-epoch loss record; persists as line-delimited JSON."""

    epochs: list[dict] = field(default_factory=list)

    def append(self, **entry) -> None:
        self.epochs.append(entry)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for entry in self.epochs:
                fh.write(json.dumps(entry) + "\n")

    @classmethod
    def load(cls, path) -> "TrainHistory":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])


def _dataset_tensors(ds: ChipDataset):
    if not ds.records:
        raise EmptyDataset("cannot train on an empty dataset")
    images = torch.from_numpy(np.stack([r.image for r in ds.records])).float()
    labels = torch.from_numpy(np.stack([r.label for r in ds.records])).long()
    return images, labels


def batch_order(n: int, data_seed: int, epoch: int) -> np.ndarray:
    """Deterministic sample permutation for one epoch."""
    return np.random.default_rng([data_seed, epoch]).permutation(n)


def _batches(n: int, batch_size: int, data_seed: int, epoch: int):
    order = batch_order(n, data_seed, epoch)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(order[start:start + batch_size].copy())


def _make_optimizer(cfg: TrainConfig, model: SegmentationModel):
    if cfg.optimizer == "sgd_momentum":
        return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate,
                               momentum=cfg.momentum)
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)


def _snapshot(model: SegmentationModel) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _check_finite(value: float, cfg: TrainConfig, epoch: int, models_snapshots) -> None:
    if math.isfinite(value):
        return
    out = Path(cfg.checkpoint_dir)
    paths = []
    for name, (model, snap) in models_snapshots.items():
        model.load_state_dict(snap)
        path = out / name
        save_checkpoint(model, path, epoch=max(epoch - 1, 0))
        paths.append(str(path))
    raise DivergedLoss(
        f"non-finite loss at epoch {epoch}; last good checkpoints: {paths}"
    )


def train_cps(cfg: TrainConfig, ds: ChipDataset, epoch_callback=None):
    """Train the dual-model consistency framework.

    Both models update from one total objective per step: the supervised
    erosion + weighted-CE losses of each model plus the lambda-weighted
    cross pseudo-supervision term. Returns (checkpoint_1, checkpoint_2,
    history); ``epoch_callback(epoch, (model_1, model_2), entry)`` runs after
    each epoch on stable parameters.
    """
    if cfg.regime != "cps":
        raise ValueError(f"train_cps needs regime='cps', got {cfg.regime!r}")
    if ds.mode != "train":
        raise ValueError("training requires a train-mode dataset")
    images, labels = _dataset_tensors(ds)
    n, _, height, width = images.shape
    k_norm = normalization_constant(n, width, height)
    alpha = class_weights_from_dataset(ds, cfg.class_weight_cap)

    model_1 = build_model(ModelConfig("deeplab", cfg.width_multiplier, seed=cfg.seed_pair[0]))
    model_2 = build_model(ModelConfig("deeplab", cfg.width_multiplier, seed=cfg.seed_pair[1]))
    opt_1, opt_2 = _make_optimizer(cfg, model_1), _make_optimizer(cfg, model_2)

    history = TrainHistory()
    snap_1, snap_2 = _snapshot(model_1), _snapshot(model_2)
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        lam = rampup(cfg.rampup_length, epoch, cfg.epochs, cfg.lambda_max,
                     cfg.ramp_over_total)
        sums = {"l_hf": 0.0, "l_wce_sup": 0.0, "l_sup": 0.0, "l_cps": 0.0,
                "l_total": 0.0}
        for idx in _batches(n, cfg.batch_size, cfg.data_seed, epoch):
            x, y = images[idx], labels[idx]
            logits_1, logits_2 = model_1(x), model_2(x)
            l_sup, parts = supervised_loss(logits_1, logits_2, y, alpha,
                                           cfg.hausdorff, k_norm)
            if lam > 0.0:
                l_cps = cps_loss(logits_1, logits_2, alpha, k_norm)
            else:
                with torch.no_grad():  # recorded but not part of the objective
                    l_cps = cps_loss(logits_1, logits_2, alpha, k_norm)
            l_total = total_loss(l_sup, l_cps, lam) if lam > 0.0 else l_sup
            opt_1.zero_grad(set_to_none=True)
            opt_2.zero_grad(set_to_none=True)
            l_total.backward()
            opt_1.step()
            opt_2.step()
            sums["l_hf"] += parts["hausdorff"].item()
            sums["l_wce_sup"] += parts["weighted_ce"].item()
            sums["l_sup"] += l_sup.item()
            sums["l_cps"] += l_cps.item()
            sums["l_total"] += l_total.item()
        _check_finite(sums["l_total"], cfg, epoch,
                      {"model_1": (model_1, snap_1), "model_2": (model_2, snap_2)})
        snap_1, snap_2 = _snapshot(model_1), _snapshot(model_2)
        entry = {"epoch": epoch, "lambda": lam, **sums,
                 "wall_time": time.perf_counter() - started}
        history.append(**entry)
        if epoch_callback is not None:
            epoch_callback(epoch, (model_1, model_2), entry)

    out = Path(cfg.checkpoint_dir)
    save_checkpoint(model_1, out / "model_1", epoch=cfg.epochs, history=history.epochs)
    save_checkpoint(model_2, out / "model_2", epoch=cfg.epochs, history=history.epochs)
    history.save(out / "history.jsonl")
    return out / "model_1", out / "model_2", history


def train_supervised(cfg: TrainConfig, ds: ChipDataset, epoch_callback=None):
    """Train a single supervised baseline.

    ``unet_wce`` pairs a U-Net with abundance-weighted cross-entropy;
    ``deeplab_tversky`` pairs the DeepLab-style network with Tversky loss.
    Returns (checkpoint, history).
    """
    if cfg.regime not in ("unet_wce", "deeplab_tversky"):
        raise ValueError(f"train_supervised got regime {cfg.regime!r}")
    if ds.mode != "train":
        raise ValueError("training requires a train-mode dataset")
    images, labels = _dataset_tensors(ds)
    n, _, height, width = images.shape
    k_norm = normalization_constant(n, width, height)

    if cfg.regime == "unet_wce":
        arch = "unet"
        alpha = class_weights_from_dataset(ds, cfg.class_weight_cap)

        def objective(logits, y):
            return weighted_ce(logits, y, alpha, k_norm)
    else:
        arch = "deeplab"

        def objective(logits, y):
            return tversky_loss(logits, y, cfg.tversky_a, cfg.tversky_b)

    model = build_model(ModelConfig(arch, cfg.width_multiplier, seed=cfg.seed_pair[0]))
    opt = _make_optimizer(cfg, model)

    history = TrainHistory()
    snap = _snapshot(model)
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        epoch_loss = 0.0
        for idx in _batches(n, cfg.batch_size, cfg.data_seed, epoch):
            loss = objective(model(images[idx]), labels[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_loss += loss.item()
        _check_finite(epoch_loss, cfg, epoch, {"model": (model, snap)})
        snap = _snapshot(model)
        entry = {"epoch": epoch, "lambda": 0.0, "l_hf": 0.0, "l_wce_sup": 0.0,
                 "l_sup": epoch_loss, "l_cps": 0.0, "l_total": epoch_loss,
                 "wall_time": time.perf_counter() - started}
        history.append(**entry)
        if epoch_callback is not None:
            epoch_callback(epoch, (model,), entry)

    out = Path(cfg.checkpoint_dir)
    save_checkpoint(model, out / "model", epoch=cfg.epochs, history=history.epochs)
    history.save(out / "history.jsonl")
    return out / "model", history
