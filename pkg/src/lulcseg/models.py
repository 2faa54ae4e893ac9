"""Segmentation networks: a U-Net and a DeepLab-style encoder-decoder with
atrous spatial pyramid pooling over an inverted-residual encoder.

Both architectures downsample by 16, scale their channel counts with a width
multiplier, and are constructed deterministically from a seed: the same
config yields bit-identical initial parameters.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BadSpatialDims, ShapeMismatch, UnknownArchitecture

ARCHITECTURES = ("unet", "deeplab")
DOWNSAMPLING_FACTOR = 16
_GN_GROUPS = 4


@dataclass(frozen=True)
class ModelConfig:
    architecture: str
    width_multiplier: float = 1.0
    in_channels: int = 4
    num_classes: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise UnknownArchitecture(
                f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}"
            )
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be > 0")
        if self.in_channels != 4 or self.num_classes != 5:
            raise ValueError("this pipeline uses 4 input bands and 5 classes")


def _scaled(channels: int, multiplier: float) -> int:
    """Scale a channel count, keeping it a positive multiple of the GN groups."""
    return max(_GN_GROUPS, int(round(channels * multiplier / _GN_GROUPS)) * _GN_GROUPS)


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(_GN_GROUPS, channels)


class SegmentationModel(nn.Module):
    """Base class carrying the construction config and shared plumbing."""

    config: ModelConfig

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _check_input(self, batch: torch.Tensor) -> None:
        if batch.ndim != 4 or batch.shape[1] != self.config.in_channels:
            raise ShapeMismatch(
                f"expected [batch, {self.config.in_channels}, H, W], got {tuple(batch.shape)}"
            )
        h, w = batch.shape[-2:]
        if h % DOWNSAMPLING_FACTOR or w % DOWNSAMPLING_FACTOR:
            raise BadSpatialDims(
                f"H and W must be divisible by {DOWNSAMPLING_FACTOR}, got {h}x{w}"
            )

    def describe(self) -> dict:
        return {
            "architecture": self.config.architecture,
            "downsampling": DOWNSAMPLING_FACTOR,
            "parameters": self.param_count(),
        }


# ---------------------------------------------------------------------------
# DeepLab-style network
# ---------------------------------------------------------------------------

class _InvertedResidual(nn.Module):
    """Expand -> depthwise -> project block with an identity shortcut."""

    def __init__(self, cin: int, cout: int, stride: int = 1, expand: int = 2):
        super().__init__()
        mid = cin * expand
        self.expand = nn.Conv2d(cin, mid, 1, bias=False)
        self.gn1 = _gn(mid)
        self.depthwise = nn.Conv2d(mid, mid, 3, stride=stride, padding=1,
                                   groups=mid, bias=False)
        self.gn2 = _gn(mid)
        self.project = nn.Conv2d(mid, cout, 1, bias=False)
        self.gn3 = _gn(cout)
        self.use_residual = stride == 1 and cin == cout

    def forward(self, x):
        y = F.silu(self.gn1(self.expand(x)))
        y = F.silu(self.gn2(self.depthwise(y)))
        y = self.gn3(self.project(y))
        return x + y if self.use_residual else y


class _ASPP(nn.Module):
    """Atrous spatial pyramid pooling with 1x1, dilated 3x3 and image-pool branches."""

    dilations = (2, 4, 8)

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.branches = nn.ModuleList(
            [nn.Conv2d(cin, cout, 1, bias=False)]
            + [nn.Conv2d(cin, cout, 3, padding=d, dilation=d, bias=False)
               for d in self.dilations]
        )
        self.pool_proj = nn.Conv2d(cin, cout, 1, bias=False)
        self.merge = nn.Conv2d(cout * (len(self.branches) + 1), cout, 1, bias=False)
        self.gn = _gn(cout)

    def forward(self, x):
        outs = [branch(x) for branch in self.branches]
        pooled = self.pool_proj(x.mean(dim=(2, 3), keepdim=True))
        outs.append(pooled.expand(-1, -1, x.shape[2], x.shape[3]))
        return F.silu(self.gn(self.merge(torch.cat(outs, dim=1))))


class DeepLabModel(SegmentationModel):
    """Encoder-decoder with an inverted-residual encoder and ASPP head."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        wm = config.width_multiplier
        c_stem = _scaled(32, wm)
        c1, c2, c3 = _scaled(48, wm), _scaled(96, wm), _scaled(192, wm)
        c_aspp, c_dec = _scaled(128, wm), _scaled(64, wm)
        c_low = _scaled(24, wm)

        self.stem = nn.Conv2d(config.in_channels, c_stem, 3, stride=2, padding=1, bias=False)
        self.stem_gn = _gn(c_stem)
        self.stage1 = nn.Sequential(_InvertedResidual(c_stem, c1, stride=2))
        self.stage2 = nn.Sequential(
            _InvertedResidual(c1, c2, stride=2), _InvertedResidual(c2, c2)
        )
        self.stage3 = nn.Sequential(
            _InvertedResidual(c2, c3, stride=2), _InvertedResidual(c3, c3)
        )
        self.aspp = _ASPP(c3, c_aspp)
        self.low_proj = nn.Conv2d(c1, c_low, 1, bias=False)
        self.low_gn = _gn(c_low)
        self.decode = nn.Conv2d(c_aspp + c_low, c_dec, 3, padding=1, bias=False)
        self.decode_gn = _gn(c_dec)
        self.head = nn.Conv2d(c_dec, config.num_classes, 1)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        self._check_input(batch)
        x = F.silu(self.stem_gn(self.stem(batch)))
        low = self.stage1(x)
        deep = self.stage3(self.stage2(low))
        y = self.aspp(deep)
        y = F.interpolate(y, size=low.shape[-2:], mode="bilinear", align_corners=False)
        low = F.silu(self.low_gn(self.low_proj(low)))
        y = F.silu(self.decode_gn(self.decode(torch.cat([y, low], dim=1))))
        y = self.head(y)
        return F.interpolate(y, size=batch.shape[-2:], mode="bilinear", align_corners=False)

    def describe(self) -> dict:
        info = super().describe()
        info["aspp_dilations"] = sorted(
            {m.dilation[0] for m in self.aspp.modules() if isinstance(m, nn.Conv2d)}
        )
        return info


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------

class _DoubleConv(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.gn1 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.gn2 = _gn(cout)

    def forward(self, x):
        x = F.relu(self.gn1(self.conv1(x)))
        return F.relu(self.gn2(self.conv2(x)))


class UNetModel(SegmentationModel):
    """Classic four-level U-Net with bilinear upsampling."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        wm = config.width_multiplier
        chs = [_scaled(c, wm) for c in (32, 64, 128, 256, 512)]
        self.enc = nn.ModuleList()
        cin = config.in_channels
        for c in chs:
            self.enc.append(_DoubleConv(cin, c))
            cin = c
        self.dec = nn.ModuleList()
        self.up = nn.ModuleList()
        for deep, skip in zip(reversed(chs[1:]), reversed(chs[:-1])):
            self.up.append(nn.Conv2d(deep, skip, 1, bias=False))
            self.dec.append(_DoubleConv(skip * 2, skip))
        self.head = nn.Conv2d(chs[0], config.num_classes, 1)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        self._check_input(batch)
        skips = []
        x = batch
        for i, block in enumerate(self.enc):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        x = skips.pop()
        for up, block in zip(self.up, self.dec):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = up(x)
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


# ---------------------------------------------------------------------------
# Construction and checkpointing
# ---------------------------------------------------------------------------

def build_model(config: ModelConfig) -> SegmentationModel:
    """Build and deterministically initialize a network from its config."""
    if config.architecture == "unet":
        model = UNetModel(config)
    elif config.architecture == "deeplab":
        model = DeepLabModel(config)
    else:  # unreachable, ModelConfig validates
        raise UnknownArchitecture(config.architecture)
    _init_parameters(model, config.seed)
    return model


def _init_parameters(model: SegmentationModel, seed: int) -> None:
    """He-normal conv weights, unit norm scales, zero biases, seeded."""
    gen = torch.Generator().manual_seed(seed)
    for module in model.modules():
        if isinstance(module, nn.Conv2d):
            fan_in = module.in_channels // module.groups * module.kernel_size[0] * module.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                module.weight.normal_(0.0, std, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
        elif isinstance(module, nn.GroupNorm):
            with torch.no_grad():
                module.weight.fill_(1.0)
                module.bias.zero_()


def save_checkpoint(model: SegmentationModel, directory, epoch: int = 0,
                    history: list | None = None) -> None:
    """Persist a model as descriptor.json + params.bin (little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    with open(directory / "params.bin", "wb") as fh:
        for name, tensor in model.state_dict().items():
            array = tensor.detach().cpu().numpy().astype("<f4")
            fh.write(array.tobytes())
            tensors.append({"name": name, "shape": list(array.shape), "offset": offset})
            offset += array.nbytes
    descriptor = {
        "config": asdict(model.config),
        "epoch": epoch,
        "history": history if history is not None else [],
        "dtype": "<f4",
        "tensors": tensors,
    }
    with open(directory / "descriptor.json", "w") as fh:
        json.dump(descriptor, fh, indent=1)


def load_checkpoint(directory) -> tuple[SegmentationModel, dict]:
    """Rebuild a model from a checkpoint directory; returns (model, descriptor)."""
    directory = Path(directory)
    with open(directory / "descriptor.json") as fh:
        descriptor = json.load(fh)
    model = build_model(ModelConfig(**descriptor["config"]))
    blob = np.fromfile(directory / "params.bin", dtype=descriptor["dtype"])
    state = {}
    for entry in descriptor["tensors"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"] // 4
        array = blob[start:start + size].reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.copy())
    model.load_state_dict(state)
    return model, descriptor
