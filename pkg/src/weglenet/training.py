"""Optimization loops for the three model kinds, with checkpointing.

Per-model defaults: the weakly-supervised model trains on whole cores with
SGD (lr 1e-3, momentum 0.9, batches of 8) for 120 epochs (400 with
hide-and-seek); the UNet trains on patches with Nadam (lr 1e-4, batches of
16) for 60 epochs under categorical Dice; the VGG19 classifier trains on
patches with SGD (lr 1e-3, batches of 64) for 120 epochs under categorical
cross-entropy. The learning rate is flat except for an exponential decay
over the final ``decay_window`` epochs. Early stopping retains the weights
of the epoch with the lowest validation loss without halting the run.

The weak loop never reads pixel masks; deleting every mask from the dataset
must not change it.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .aggregation import AggregationSpec
from .augment import HideAndSeekConfig, augment, hide_and_seek
from .baselines import ResidualUNet, UNetConfig, Vgg19Classifier, build_unet, build_vgg19sup, dice_loss
from .data import CoreSample, dataset_mean_rgb, split_cores
from .model import ModelConfig, WeGleNet, build_model, weak_loss
from .patches import extract_patches

CHECKPOINT_SCHEMA_VERSION = 1

MODEL_KINDS = ("weglenet", "unet", "vgg19sup")

_DEFAULTS = {
    "weglenet": {"optimizer": "sgd", "base_lr": 1e-3, "batch_size": 8, "epochs": 120, "input_side": 750},
    "unet": {"optimizer": "nadam", "base_lr": 1e-4, "batch_size": 16, "epochs": 60, "input_side": 224},
    "vgg19sup": {"optimizer": "sgd", "base_lr": 1e-3, "batch_size": 64, "epochs": 120, "input_side": 224},
}
_WEGLENET_HS_EPOCHS = 400


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; fields left at None resolve to the per-model defaults."""

    model_kind: str = "weglenet"
    epochs: int | None = None
    batch_size: int | None = None
    base_lr: float | None = None
    optimizer: str | None = None  # sgd | nadam
    hs_enabled: bool = False
    decay_window: int = 20
    seed: int = 0
    momentum: float = 0.9  # 0 = plain SGD
    deterministic: bool = False
    augment_enabled: bool = True
    input_side: int | None = None
    backbone: str = "vgg19"  # weglenet / vgg19sup conv stack
    aggregation: AggregationSpec = field(default_factory=AggregationSpec)
    base_filters: int = 64  # unet
    patch_window: int = 750
    patch_step: int = 350
    hs_patch_side: int | None = None
    hs_prob: float = 0.25
    class_balanced: bool = False  # vgg19sup inverse-frequency class weights

    def __post_init__(self) -> None:
        if self.model_kind not in MODEL_KINDS:
            raise ValueError(f"model_kind must be one of {MODEL_KINDS}, got {self.model_kind!r}")
        if self.optimizer is not None and self.optimizer not in ("sgd", "nadam"):
            raise ValueError(f"optimizer must be 'sgd' or 'nadam', got {self.optimizer!r}")

    def resolved(self) -> "TrainConfig":
        """Fill every None field with the model kind's default."""
        d = _DEFAULTS[self.model_kind]
        epochs = self.epochs
        if epochs is None:
            epochs = _WEGLENET_HS_EPOCHS if (self.model_kind == "weglenet" and self.hs_enabled) else d["epochs"]
        return replace(
            self,
            epochs=epochs,
            batch_size=self.batch_size or d["batch_size"],
            base_lr=self.base_lr if self.base_lr is not None else d["base_lr"],
            optimizer=self.optimizer or d["optimizer"],
            input_side=self.input_side or d["input_side"],
        )

    def to_dict(self) -> dict:
        cfg = self.resolved()
        out = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
        out["aggregation"] = cfg.aggregation.to_dict()
        return out


def lr_schedule(epoch: int, total_epochs: int, base_lr: float, decay_window: int = 20) -> float:
    """Flat until the final ``decay_window`` epochs, then base_lr * e^(-0.1 t).

    ``t`` counts epochs since the decay window began (0-indexed), so the first
    decayed epoch still runs at exactly ``base_lr``.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    decay_start = max(total_epochs - decay_window, 0)
    if epoch < decay_start:
        return base_lr
    return base_lr * math.exp(-0.1 * (epoch - decay_start))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainResult:
    model: torch.nn.Module  # best-epoch weights loaded
    best_epoch: int
    best_val_loss: float
    log: list[EpochRecord]
    config: TrainConfig  # resolved

    def write_log_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "val_loss", "lr"])
            for rec in self.log:
                writer.writerow([rec.epoch, f"{rec.train_loss:.8f}", f"{rec.val_loss:.8f}", f"{rec.lr:.8e}"])


def default_hs_patch_side(input_side: int) -> int:
    """75 when it divides the input; otherwise the divisor closest to side/10."""
    if input_side % 75 == 0:
        return 75
    divisors = [d for d in range(2, input_side) if input_side % d == 0]
    if not divisors:
        raise ValueError(f"input side {input_side} has no proper divisor for the hiding grid")
    return min(divisors, key=lambda d: (abs(d - input_side / 10), d))


def _resize_uint8(image: np.ndarray, side: int) -> np.ndarray:
    if image.shape[0] == side and image.shape[1] == side:
        return image
    return np.asarray(Image.fromarray(image).resize((side, side), Image.BILINEAR))


def _to_batch(images: list[np.ndarray]) -> torch.Tensor:
    arr = np.stack(images).astype(np.float32) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def _make_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    if config.optimizer == "nadam":
        return torch.optim.NAdam(model.parameters(), lr=config.base_lr)
    return torch.optim.SGD(model.parameters(), lr=config.base_lr, momentum=config.momentum)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(loss: torch.Tensor, epoch: int, batch_idx: int) -> None:
    if not torch.isfinite(loss):
        raise RuntimeError(f"non-finite loss at epoch {epoch}, batch {batch_idx}")


class _WeakCoreLoader:
    """Whole-core batches for the weakly supervised loop. Never touches masks."""

    def __init__(self, cores: list[CoreSample], config: TrainConfig, fill_rgb: np.ndarray):
        self.cores = cores
        self.config = config
        self.fill = tuple(float(v) for v in fill_rgb)
        self.images = [_resize_uint8(c.image, config.input_side) for c in cores]
        self.targets = np.stack([c.label.as_array() for c in cores])
        self.hs_config = None
        if config.hs_enabled:
            side = config.hs_patch_side or default_hs_patch_side(config.input_side)
            self.hs_config = HideAndSeekConfig(patch_side=side, hide_prob=config.hs_prob, fill=self.fill)

    def epoch_batches(self, epoch: int, train: bool):
        rng_order = np.random.default_rng([self.config.seed, epoch, 0xC0DE])
        order = rng_order.permutation(len(self.cores)) if train else np.arange(len(self.cores))
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            images = []
            for i in idx:
                img = self.images[i]
                if train:
                    rng = np.random.default_rng([self.config.seed, epoch, int(i)])
                    if self.config.augment_enabled:
                        img, _ = augment(img, None, rng, image_fill=self.fill)
                    if self.hs_config is not None:
                        img = hide_and_seek(img, self.hs_config, rng)
                images.append(img)
            yield _to_batch(images), torch.from_numpy(self.targets[idx])


class _PatchLoader:
    """Patch batches for the supervised baselines."""

    def __init__(self, cores: list[CoreSample], config: TrainConfig, fill_rgb: np.ndarray, dense: bool):
        self.config = config
        self.fill = tuple(float(v) for v in fill_rgb)
        self.dense = dense
        labeling = "dense" if dense else "strict"
        self.records = []
        for core in cores:
            self.records.extend(
                extract_patches(
                    core,
                    window=config.patch_window,
                    step=config.patch_step,
                    labeling=labeling,
                    resize_to=config.input_side,
                    keep_mask=dense,
                )
            )
        if not self.records:
            raise ValueError("patch extraction produced no training patches")

    def class_counts(self) -> np.ndarray:
        return np.bincount([r.label for r in self.records], minlength=4)

    def epoch_batches(self, epoch: int, train: bool):
        rng_order = np.random.default_rng([self.config.seed, epoch, 0xBA7C4])
        order = rng_order.permutation(len(self.records)) if train else np.arange(len(self.records))
        bs = self.config.batch_size
        for start in range(0, len(order), bs):
            idx = order[start : start + bs]
            images, masks, labels = [], [], []
            for i in idx:
                rec = self.records[i]
                img, msk = rec.pixels, rec.mask
                if train and self.config.augment_enabled:
                    rng = np.random.default_rng([self.config.seed, epoch, int(i)])
                    img, msk = augment(img, msk, rng, image_fill=self.fill)
                images.append(img)
                masks.append(msk)
                labels.append(rec.label)
            x = _to_batch(images)
            if self.dense:
                mask_idx = torch.from_numpy(np.stack(masks).astype(np.int64))
                onehot = F.one_hot(mask_idx, num_classes=4).permute(0, 3, 1, 2).float()
                yield x, onehot
            else:
                yield x, torch.tensor(labels, dtype=torch.int64)


def _mean_loss(total: float, batches: int) -> float:
    return total / max(batches, 1)


def train(model: torch.nn.Module | None, cores: list[CoreSample], config: TrainConfig) -> TrainResult:
    """Run the per-model training loop; returns the best-epoch model and log.

    ``model`` may be None to build one from the config. Early stopping keeps
    the weights minimizing the validation loss; the log records every epoch.
    """
    config = config.resolved()
    train_cores = split_cores(cores, "train")
    val_cores = split_cores(cores, "val")
    if not train_cores or not val_cores:
        raise ValueError(
            f"dataset needs non-empty train and val splits, got {len(train_cores)} train / "
            f"{len(val_cores)} val cores"
        )

    torch.manual_seed(config.seed)
    if config.deterministic:
        torch.use_deterministic_algorithms(True)

    if model is None:
        model = build_default_model(config)

    fill = dataset_mean_rgb(train_cores)
    kind = config.model_kind
    if kind == "weglenet":
        train_loader = _WeakCoreLoader(train_cores, config, fill)
        val_loader = _WeakCoreLoader(val_cores, config, fill)

        def batch_loss(batch):
            x, targets = batch
            probs, _ = model(x)
            return weak_loss(probs, targets)

    elif kind == "unet":
        train_loader = _PatchLoader(train_cores, config, fill, dense=True)
        val_loader = _PatchLoader(val_cores, config, fill, dense=True)

        def batch_loss(batch):
            x, onehot = batch
            return dice_loss(model(x), onehot)

    else:  # vgg19sup
        train_loader = _PatchLoader(train_cores, config, fill, dense=False)
        val_loader = _PatchLoader(val_cores, config, fill, dense=False)
        weights = None
        if config.class_balanced:
            counts = train_loader.class_counts().astype(np.float64)
            inv = np.where(counts > 0, counts.sum() / np.maximum(counts, 1), 0.0)
            weights = torch.tensor(inv / inv.sum() * 4, dtype=torch.float32)

        def batch_loss(batch):
            x, labels = batch
            return F.cross_entropy(model(x), labels, weight=weights)

    optimizer = _make_optimizer(model, config)

    log: list[EpochRecord] = []
    best_val = math.inf
    best_epoch = -1
    best_state: dict[str, torch.Tensor] | None = None

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config.epochs, config.base_lr, config.decay_window)
        _set_lr(optimizer, lr)

        model.train()
        total, n_batches = 0.0, 0
        for batch_idx, batch in enumerate(train_loader.epoch_batches(epoch, train=True)):
            optimizer.zero_grad(set_to_none=True)
            loss = batch_loss(batch)
            _check_finite(loss, epoch, batch_idx)
            loss.backward()
            optimizer.step()
            total += float(loss.detach())
            n_batches += 1
        train_loss = _mean_loss(total, n_batches)

        model.eval()
        with torch.no_grad():
            total, n_batches = 0.0, 0
            for batch in val_loader.epoch_batches(epoch, train=False):
                total += float(batch_loss(batch))
                n_batches += 1
        val_loss = _mean_loss(total, n_batches)

        log.append(EpochRecord(epoch=epoch, train_loss=train_loss, val_loss=val_loss, lr=lr))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if best_state is not None:
        model.load_state_dict(best_state)
    model.trained = True
    model.eval()
    return TrainResult(model=model, best_epoch=best_epoch, best_val_loss=best_val, log=log, config=config)


def build_default_model(config: TrainConfig) -> torch.nn.Module:
    """Construct the model named by a resolved train config."""
    config = config.resolved()
    if config.model_kind == "weglenet":
        return build_model(
            ModelConfig(
                input_side=config.input_side,
                backbone=config.backbone,
                aggregation=config.aggregation,
            )
        )
    if config.model_kind == "unet":
        return build_unet(UNetConfig(base_filters=config.base_filters, input_side=config.input_side))
    return build_vgg19sup(backbone=config.backbone, input_side=config.input_side)


def _model_config_dict(model: torch.nn.Module) -> dict:
    if isinstance(model, WeGleNet):
        return model.config.to_dict()
    if isinstance(model, ResidualUNet):
        return model.config.to_dict()
    if isinstance(model, Vgg19Classifier):
        return {
            "num_classes": model.num_classes,
            "backbone": model.backbone_name,
            "input_side": model.input_side,
        }
    raise TypeError(f"cannot checkpoint model of type {type(model).__name__}")


def model_kind_of(model: torch.nn.Module) -> str:
    if isinstance(model, WeGleNet):
        return "weglenet"
    if isinstance(model, ResidualUNet):
        return "unet"
    if isinstance(model, Vgg19Classifier):
        return "vgg19sup"
    raise TypeError(f"unknown model type {type(model).__name__}")


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    train_config: TrainConfig | None = None,
    best_epoch: int | None = None,
    best_val_loss: float | None = None,
) -> None:
    """Write the shared checkpoint archive (schema v1).

    A torch-serialized dict with keys: schema_version, model_kind,
    model_config, state_dict (cpu tensors), train_config, best_epoch,
    best_val_loss, created (unix time; metadata only).
    """
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "model_kind": model_kind_of(model),
        "model_config": _model_config_dict(model),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "train_config": train_config.to_dict() if train_config else None,
        "best_epoch": best_epoch,
        "best_val_loss": best_val_loss,
        "created": time.time(),
    }
    torch.save(payload, path)


def load_checkpoint(path: str | Path, expect_kind: str | None = None):
    """Rebuild a model from a checkpoint; returns (model, metadata dict)."""
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise ValueError(f"{path} is not a checkpoint archive")
    if payload["schema_version"] != CHECKPOINT_SCHEMA_VERSION:
        raise ValueError(
            f"unsupported checkpoint schema {payload['schema_version']} "
            f"(this build reads version {CHECKPOINT_SCHEMA_VERSION})"
        )
    kind = payload["model_kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"checkpoint holds a {kind!r} model, expected {expect_kind!r}")
    cfg = payload["model_config"]
    if kind == "weglenet":
        model = WeGleNet(ModelConfig.from_dict(cfg))
    elif kind == "unet":
        model = build_unet(UNetConfig.from_dict(cfg))
    elif kind == "vgg19sup":
        model = build_vgg19sup(
            num_classes=cfg["num_classes"], backbone=cfg["backbone"], input_side=cfg["input_side"]
        )
    else:
        raise ValueError(f"checkpoint names unknown model kind {kind!r}")
    model.load_state_dict(payload["state_dict"])
    model.trained = True
    model.eval()
    meta = {k: v for k, v in payload.items() if k != "state_dict"}
    return model, meta


def write_run_config(path: str | Path, payload: dict) -> None:
    """Echo the parameters that produced an output directory (JSON)."""
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, default=str)
        f.write("\n")
