"""Weakly-supervised segmentation model and its training loss.

The network is:  VGG19-style convolutional backbone -> one 1x1 convolution
per class -> softmax along the class axis (the per-pixel probability maps)
-> global aggregation to one probability per class. Training only supervises
the three cancer classes; the NC channel is sliced out of the loss but stays
in the softmax, so it fills in as the complement of the cancer maps.

Backbone identifiers: ``"vgg19"`` is the full-width stack (64..512 filters);
``"vgg19_w<N>"`` scales the widths from a first-block count of N (e.g.
``vgg19_w16`` -> 16/32/64/128/128), keeping the 16-conv / 5-maxpool layout
and its total downsampling of 32.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .aggregation import AggregationSpec, GlobalAggregation2d
from .data import GlobalLabel

DOWNSAMPLING_FACTOR = 32  # five 2x2 max poolings
_VGG19_CONVS_PER_BLOCK = (2, 2, 4, 4, 4)
_VGG19_BASE_WIDTH = 64

LOSS_EPS = 1e-7


def _backbone_widths(backbone: str) -> list[int]:
    if backbone == "vgg19":
        base = _VGG19_BASE_WIDTH
    else:
        m = re.fullmatch(r"vgg19_w(\d+)", backbone)
        if not m:
            raise ValueError(
                f"unknown backbone {backbone!r}; expected 'vgg19' or 'vgg19_w<N>'"
            )
        base = int(m.group(1))
        if base < 4:
            raise ValueError(f"backbone width must be >= 4, got {base}")
    return [base, base * 2, base * 4, base * 8, base * 8]


def head_side(input_side: int) -> int:
    """Spatial side of the segmentation head for a given input side.

    Each of the five poolings floors odd sides, e.g. 750 -> ... -> 23.
    """
    side = input_side
    for _ in range(5):
        side //= 2
    return side


@dataclass(frozen=True)
class ModelConfig:
    """Architecture parameters of the weakly-supervised model.

    ``input_side`` does not have to be an exact multiple of 32 (the default
    750 is not); odd intermediate sizes floor at each pooling. It must be
    large enough to leave a non-empty head.
    """

    num_classes: int = 4
    input_side: int = 750
    backbone: str = "vgg19"
    pretrained_weights_path: str | None = None
    aggregation: AggregationSpec = field(default_factory=AggregationSpec)

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        _backbone_widths(self.backbone)  # validates the identifier
        if head_side(self.input_side) < 1:
            raise ValueError(
                f"input_side {self.input_side} collapses to an empty map after "
                f"{DOWNSAMPLING_FACTOR}x downsampling"
            )

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_side": self.input_side,
            "backbone": self.backbone,
            "pretrained_weights_path": self.pretrained_weights_path,
            "aggregation": self.aggregation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["aggregation"] = AggregationSpec.from_dict(d["aggregation"])
        return cls(**d)


def make_vgg_backbone(backbone: str) -> tuple[nn.Sequential, int]:
    """Build the convolutional stack; returns (module, output channels)."""
    widths = _backbone_widths(backbone)
    layers: list[nn.Module] = []
    in_ch = 3
    for width, n_convs in zip(widths, _VGG19_CONVS_PER_BLOCK):
        for _ in range(n_convs):
            layers.append(nn.Conv2d(in_ch, width, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=True))
            in_ch = width
        layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
    module = nn.Sequential(*layers)
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            nn.init.zeros_(m.bias)
    return module, widths[-1]


class WeGleNet(nn.Module):
    """Backbone + per-class 1x1 segmentation head + global aggregation."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.backbone, feat_ch = make_vgg_backbone(config.backbone)
        self.seg_head = nn.Conv2d(feat_ch, config.num_classes, kernel_size=1)
        self.aggregation = GlobalAggregation2d(config.aggregation)
        self.trained = False

    def segment(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probability maps (N, C, h, w), softmax over C."""
        features = self.backbone(x)
        return F.softmax(self.seg_head(features), dim=1)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (global class probabilities (N, C), probability maps)."""
        maps = self.segment(x)
        return self.aggregation(maps), maps


def load_pretrained_backbone(model: WeGleNet, path: str | Path) -> None:
    """Load backbone weights from a torch state-dict file.

    Keys may carry an optional ``backbone.`` prefix. A shape mismatch fails
    with the offending layer named; keys absent from the file are left at
    their initialization.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pretrained weights file not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(state, dict):
        raise ValueError(f"{path} does not contain a state dict")
    own = model.backbone.state_dict()
    filtered = {}
    for key, value in state.items():
        name = key.removeprefix("backbone.")
        if name not in own:
            continue
        if tuple(value.shape) != tuple(own[name].shape):
            raise ValueError(
                f"pretrained weight shape mismatch at layer backbone.{name}: "
                f"file has {tuple(value.shape)}, model needs {tuple(own[name].shape)}"
            )
        filtered[name] = value
    if not filtered:
        raise ValueError(f"{path} contains no weights matching backbone layers")
    model.backbone.load_state_dict(filtered, strict=False)


def build_model(config: ModelConfig) -> WeGleNet:
    model = WeGleNet(config)
    if config.pretrained_weights_path is not None:
        load_pretrained_backbone(model, config.pretrained_weights_path)
    return model


def _as_target_array(label) -> np.ndarray:
    if isinstance(label, GlobalLabel):
        return label.as_array()
    arr = np.asarray(label, dtype=np.float64)
    if arr.shape[-1] != 3:
        raise ValueError(f"weak targets must have 3 entries (GG3, GG4, GG5), got shape {arr.shape}")
    return arr


def weak_loss(global_probs, label, eps: float = LOSS_EPS):
    """Mean binary cross-entropy over the three cancer-class probabilities.

    ``global_probs`` holds 4 entries per sample (NC first); the NC entry has
    no target and does not enter the sum, so the loss value is invariant to
    it (gradients still reach the NC logits through the softmax upstream).
    Accepts torch tensors (returns a differentiable scalar) or array-likes
    (returns a float).
    """
    is_torch = isinstance(global_probs, torch.Tensor)
    probs = global_probs if is_torch else torch.as_tensor(np.asarray(global_probs, dtype=np.float64))
    if probs.shape[-1] != 4:
        raise ValueError(f"expected 4 global probabilities per sample, got shape {tuple(probs.shape)}")
    targets = torch.as_tensor(_as_target_array(label), dtype=probs.dtype, device=probs.device)
    if targets.shape != probs.shape[:-1] + (3,):
        raise ValueError(
            f"targets shape {tuple(targets.shape)} does not match probabilities "
            f"shape {tuple(probs.shape)}"
        )
    cancer = probs[..., 1:4].clamp(eps, 1.0 - eps)
    bce = -(targets * cancer.log() + (1.0 - targets) * (1.0 - cancer).log())
    loss = bce.mean()
    return loss if is_torch else float(loss)


@dataclass
class ClassProbabilityMaps:
    """Per-pixel class probability volume at head resolution.

    ``probs`` has shape (h, w, num_classes) and sums to one along the class
    axis; ``source_size`` remembers the original core side for upsampling.
    """

    probs: np.ndarray
    source_size: int

    def __post_init__(self) -> None:
        p = self.probs
        if p.ndim != 3:
            raise ValueError(f"probs must be (h, w, classes), got shape {p.shape}")
        if p.min() < -1e-6 or p.max() > 1.0 + 1e-6:
            raise ValueError("probabilities must lie in [0, 1]")
        sums = p.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise ValueError("per-pixel class probabilities must sum to 1 (within 1e-5)")

    @property
    def num_classes(self) -> int:
        return int(self.probs.shape[-1])

    def upsampled(self, out_side: int | None = None, renormalize: bool = True) -> np.ndarray:
        side = self.source_size if out_side is None else out_side
        return upsample_probability_maps(self.probs, side, renormalize=renormalize)

    def argmax_mask(self, out_side: int | None = None) -> np.ndarray:
        """Discrete mask at the requested side; ties break to the lower class."""
        up = self.upsampled(out_side)
        return np.argmax(up, axis=-1).astype(np.uint8)


def upsample_probability_maps(probs: np.ndarray, out_side: int, renormalize: bool = True) -> np.ndarray:
    """Bilinear upsampling of (h, w, C) probability maps to (out_side, out_side, C).

    Bilinear interpolation preserves the per-pixel simplex up to rounding;
    ``renormalize`` divides by the per-pixel sum to restore it exactly.
    """
    t = torch.as_tensor(np.asarray(probs, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0)
    up = F.interpolate(t, size=(out_side, out_side), mode="bilinear", align_corners=False)
    arr = up.squeeze(0).permute(1, 2, 0).numpy()
    arr = np.clip(arr, 0.0, 1.0)
    if renormalize:
        arr = arr / arr.sum(axis=-1, keepdims=True)
    return arr


def prepare_input(image: np.ndarray, input_side: int) -> torch.Tensor:
    """Resize a square RGB core to the model input and scale to [0, 1]."""
    if image.ndim != 3 or image.shape[2] != 3 or image.shape[0] == 0:
        raise ValueError(f"expected a non-empty (H, W, 3) image, got shape {image.shape}")
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square core image, got {image.shape[0]}x{image.shape[1]}")
    if image.shape[0] != input_side:
        image = np.asarray(
            Image.fromarray(image).resize((input_side, input_side), Image.BILINEAR)
        )
    return torch.from_numpy(image.astype(np.float32) / 255.0).permute(2, 0, 1)


@torch.no_grad()
def infer_segmentation(model: WeGleNet, image: np.ndarray) -> tuple[ClassProbabilityMaps, np.ndarray]:
    """Full-core inference: probability maps plus the discrete mask.

    The image is resized to the model's input side for the forward pass; the
    head-resolution maps are kept, and the discrete mask is produced at the
    original core side (bilinear upsampling, renormalization, per-pixel
    argmax with ties broken toward the lower class index).
    """
    source_size = int(image.shape[0])
    x = prepare_input(image, model.config.input_side).unsqueeze(0)
    was_training = model.training
    model.eval()
    maps = model.segment(x)
    if was_training:
        model.train()
    probs = maps.squeeze(0).permute(1, 2, 0).numpy().astype(np.float64)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    cpm = ClassProbabilityMaps(probs=probs, source_size=source_size)
    return cpm, cpm.argmax_mask()
