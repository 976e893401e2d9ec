"""Fully-supervised baselines: residual UNet and the CAM-style VGG19 classifier.

The UNet encoder/decoder is symmetric: residual blocks of three 3x3 convs
(the third layer's output added to the first layer's via a shortcut) with
2x2 max pooling on the way down and stride-2 3x3 transposed convolutions with
skip concatenations on the way up, closed by a 1x1 conv and class softmax.

The VGG19 classifier trains as backbone -> GAP -> dense -> softmax on patch
labels; ``convert_to_cam`` copies the dense weights into a 1x1 convolution
over the pre-GAP activation volume, so the converted model emits per-class
spatial maps whose GAP equals the classifier logits exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import ClassProbabilityMaps, make_vgg_backbone, prepare_input

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UNetConfig:
    base_filters: int = 64
    depth: int = 5
    input_side: int = 224
    num_classes: int = 4

    def __post_init__(self) -> None:
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        factor = 2 ** (self.depth - 1)
        if self.input_side % factor != 0:
            raise ValueError(
                f"input_side {self.input_side} is not divisible by 2^(depth-1)={factor}"
            )

    @property
    def encoder_filters(self) -> tuple[int, ...]:
        """Filter counts per level, doubling from base (64 -> 1024 at depth 5)."""
        return tuple(self.base_filters * 2**i for i in range(self.depth))

    def to_dict(self) -> dict:
        return {
            "base_filters": self.base_filters,
            "depth": self.depth,
            "input_side": self.input_side,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


class ResidualConvBlock(nn.Module):
    """Three 3x3 conv+ReLU layers; output = third layer's + first layer's."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.conv3 = nn.Conv2d(out_channels, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y1 = F.relu(self.conv1(x))
        y2 = F.relu(self.conv2(y1))
        y3 = F.relu(self.conv3(y2))
        return y1 + y3


class ResidualUNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        filters = config.encoder_filters

        self.encoders = nn.ModuleList()
        in_ch = 3
        for ch in filters[:-1]:
            self.encoders.append(ResidualConvBlock(in_ch, ch))
            in_ch = ch
        self.pool = nn.MaxPool2d(2, 2)
        self.bottleneck = ResidualConvBlock(filters[-2], filters[-1])

        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for ch in reversed(filters[:-1]):
            self.upconvs.append(
                nn.ConvTranspose2d(ch * 2, ch, kernel_size=3, stride=2, padding=1, output_padding=1)
            )
            self.decoders.append(ResidualConvBlock(ch * 2, ch))
        self.classifier = nn.Conv2d(filters[0], config.num_classes, kernel_size=1)
        self.trained = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities (N, C, H, W) at input resolution."""
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for upconv, decoder, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = F.relu(upconv(x))
            x = torch.cat([x, skip], dim=1)
            x = decoder(x)
        return F.softmax(self.classifier(x), dim=1)


def build_unet(config: UNetConfig = UNetConfig()) -> ResidualUNet:
    return ResidualUNet(config)


def dice_loss(pred, target, eps: float = 1.0):
    """Categorical Dice loss: 1 - mean_k (2 sum(p*g) + eps) / (sum p + sum g + eps).

    ``pred`` holds per-class probabilities, ``target`` the one-hot reference,
    both (..., C, H, W) or (H, W, C)-style as long as shapes match; the class
    axis is taken as dim 1 for 4D tensors and the last axis otherwise.
    Accepts torch tensors (differentiable) or arrays (returns float).
    """
    is_torch = isinstance(pred, torch.Tensor)
    p = pred if is_torch else torch.as_tensor(np.asarray(pred, dtype=np.float64))
    g = target if isinstance(target, torch.Tensor) else torch.as_tensor(
        np.asarray(target, dtype=np.float64), dtype=p.dtype
    )
    if p.shape != g.shape:
        raise ValueError(f"pred shape {tuple(p.shape)} != target shape {tuple(g.shape)}")
    class_dim = 1 if p.ndim == 4 else -1
    reduce_dims = tuple(d for d in range(p.ndim) if d != (class_dim % p.ndim))
    intersection = (p * g).sum(dim=reduce_dims)
    denom = p.sum(dim=reduce_dims) + g.sum(dim=reduce_dims)
    dice = (2.0 * intersection + eps) / (denom + eps)
    loss = 1.0 - dice.mean()
    return loss if is_torch else float(loss)


class Vgg19Classifier(nn.Module):
    """Patch classifier: VGG19-style backbone -> GAP -> dense layer."""

    def __init__(self, num_classes: int = 4, backbone: str = "vgg19", input_side: int = 224):
        super().__init__()
        self.num_classes = num_classes
        self.backbone_name = backbone
        self.input_side = input_side
        self.backbone, self.feature_channels = make_vgg_backbone(backbone)
        self.fc = nn.Linear(self.feature_channels, num_classes)
        self.trained = False

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class logits (N, C); apply softmax/cross-entropy externally."""
        feats = self.features(x)
        pooled = feats.mean(dim=(2, 3))
        return self.fc(pooled)


class Vgg19CamSegmenter(nn.Module):
    """Converted classifier: the dense layer applied as a 1x1 convolution."""

    def __init__(self, classifier: Vgg19Classifier):
        super().__init__()
        self.num_classes = classifier.num_classes
        self.input_side = classifier.input_side
        self.backbone = classifier.backbone  # shared weights
        self.cam_conv = nn.Conv2d(classifier.feature_channels, classifier.num_classes, 1)
        with torch.no_grad():
            self.cam_conv.weight.copy_(
                classifier.fc.weight.reshape(classifier.num_classes, classifier.feature_channels, 1, 1)
            )
            self.cam_conv.bias.copy_(classifier.fc.bias)
        self.trained = classifier.trained

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Per-class spatial logit maps (N, C, h, w)."""
        return self.cam_conv(self.backbone(x))

    def segment(self, x: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities: softmax of the logit maps over C."""
        return F.softmax(self.forward(x), dim=1)


def build_vgg19sup(num_classes: int = 4, backbone: str = "vgg19", input_side: int = 224) -> Vgg19Classifier:
    return Vgg19Classifier(num_classes=num_classes, backbone=backbone, input_side=input_side)


def convert_to_cam(classifier: Vgg19Classifier) -> Vgg19CamSegmenter:
    """Turn the trained classifier into a map-producing segmenter.

    Converting an untrained classifier is allowed (useful for tests) but
    flagged, since its maps are meaningless.
    """
    if not classifier.trained:
        logger.warning("converting a classifier that was never trained; maps will be random")
    return Vgg19CamSegmenter(classifier)


@torch.no_grad()
def infer_full_core(model, image: np.ndarray) -> tuple[ClassProbabilityMaps, np.ndarray]:
    """Whole-core inference with a baseline model.

    The core is resized to the model's training side, passed through, and the
    maps are kept at head resolution inside ``ClassProbabilityMaps`` (224 for
    the UNet, 224/32 = 7 for the converted VGG19 classifier); the discrete
    mask is returned at the original core side.
    """
    if isinstance(model, Vgg19Classifier):
        raise TypeError("run convert_to_cam(classifier) first; the classifier emits no maps")
    input_side = model.config.input_side if isinstance(model, ResidualUNet) else model.input_side
    source_size = int(image.shape[0])
    x = prepare_input(image, input_side).unsqueeze(0)
    was_training = model.training
    model.eval()
    if isinstance(model, ResidualUNet):
        maps = model(x)
    else:
        maps = model.segment(x)
    if was_training:
        model.train()
    probs = maps.squeeze(0).permute(1, 2, 0).numpy().astype(np.float64)
    probs = probs / probs.sum(axis=-1, keepdims=True)
    cpm = ClassProbabilityMaps(probs=probs, source_size=source_size)
    return cpm, cpm.argmax_mask()
