"""Geometric augmentation and hide-and-seek regularization.

The same geometric transform is always applied to the image and (when given)
its mask: rotation by a uniform angle in [0, 360), independent horizontal and
vertical mirroring with probability 0.5 each, and translation up to +/-10%
per axis. Pixels exposed by the transform are filled with the dataset mean
(image) and NC (mask).

``apply_geometric`` is the deterministic core; ``augment`` only draws the
parameters from the caller's rng and delegates, which keeps runs reproducible
from an explicit seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .data import NC


@dataclass(frozen=True)
class GeometricParams:
    angle_deg: float = 0.0
    flip_h: bool = False
    flip_v: bool = False
    shift_rc: tuple[int, int] = (0, 0)

    def is_identity(self) -> bool:
        return (
            self.angle_deg == 0.0
            and not self.flip_h
            and not self.flip_v
            and self.shift_rc == (0, 0)
        )


def draw_params(rng: np.random.Generator, side: int, max_shift_frac: float = 0.10) -> GeometricParams:
    max_shift = int(round(max_shift_frac * side))
    return GeometricParams(
        angle_deg=float(rng.uniform(0.0, 360.0)),
        flip_h=bool(rng.uniform() < 0.5),
        flip_v=bool(rng.uniform() < 0.5),
        shift_rc=(
            int(rng.integers(-max_shift, max_shift + 1)),
            int(rng.integers(-max_shift, max_shift + 1)),
        ),
    )


def _shift2d(arr: np.ndarray, shift_rc: tuple[int, int], fill) -> np.ndarray:
    """Translate without wrap-around; exposed pixels take ``fill``."""
    dr, dc = shift_rc
    out = np.empty_like(arr)
    out[...] = fill
    h, w = arr.shape[:2]
    src_r = slice(max(0, -dr), min(h, h - dr))
    dst_r = slice(max(0, dr), min(h, h + dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_c = slice(max(0, dc), min(w, w + dc))
    if src_r.start < src_r.stop and src_c.start < src_c.stop:
        out[dst_r, dst_c] = arr[src_r, src_c]
    return out


def apply_geometric(
    image: np.ndarray,
    mask: np.ndarray | None,
    params: GeometricParams,
    image_fill: tuple[int, int, int] = (255, 255, 255),
) -> tuple[np.ndarray, np.ndarray | None]:
    """Apply one transform to image and mask (rotate, mirror, then translate).

    Rotation resamples the image bilinearly and the mask nearest-neighbor;
    an exact identity draw returns the inputs unchanged.
    """
    if params.is_identity():
        return image, mask

    img = image
    msk = mask
    if params.angle_deg != 0.0:
        fill = tuple(int(round(v)) for v in image_fill)
        pil = Image.fromarray(img).rotate(
            params.angle_deg, resample=Image.BILINEAR, fillcolor=fill
        )
        img = np.asarray(pil)
        if msk is not None:
            pil_m = Image.fromarray(msk).rotate(
                params.angle_deg, resample=Image.NEAREST, fillcolor=NC
            )
            msk = np.asarray(pil_m)
    if params.flip_h:
        img = img[:, ::-1]
        msk = msk[:, ::-1] if msk is not None else None
    if params.flip_v:
        img = img[::-1]
        msk = msk[::-1] if msk is not None else None
    if params.shift_rc != (0, 0):
        img = _shift2d(img, params.shift_rc, np.asarray(image_fill, dtype=img.dtype))
        msk = _shift2d(msk, params.shift_rc, NC) if msk is not None else None
    return np.ascontiguousarray(img), (np.ascontiguousarray(msk) if msk is not None else None)


def augment(
    image: np.ndarray,
    mask: np.ndarray | None,
    rng: np.random.Generator,
    image_fill: tuple[int, int, int] = (255, 255, 255),
    max_shift_frac: float = 0.10,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Random translation + rotation + mirroring, identical on image and mask."""
    params = draw_params(rng, side=image.shape[0], max_shift_frac=max_shift_frac)
    return apply_geometric(image, mask, params, image_fill=image_fill)


@dataclass(frozen=True)
class HideAndSeekConfig:
    """Grid hiding: square tiles of ``patch_side`` replaced by ``fill``."""

    patch_side: int = 75
    hide_prob: float = 0.25
    fill: tuple[float, float, float] = (128.0, 128.0, 128.0)

    def __post_init__(self) -> None:
        if self.patch_side <= 0:
            raise ValueError(f"patch_side must be positive, got {self.patch_side}")
        if not 0.0 <= self.hide_prob <= 1.0:
            raise ValueError(f"hide_prob must lie in [0, 1], got {self.hide_prob}")

    def validate_for(self, side: int) -> None:
        if side % self.patch_side != 0:
            raise ValueError(
                f"patch_side {self.patch_side} does not divide image side {side}"
            )


def hide_and_seek(image: np.ndarray, config: HideAndSeekConfig, rng: np.random.Generator) -> np.ndarray:
    """Independently replace each grid tile by the fill with prob ``hide_prob``.

    Pixels outside hidden tiles are returned byte-identical.
    """
    side = image.shape[0]
    if image.shape[1] != side:
        raise ValueError(f"expected a square image, got {image.shape[:2]}")
    config.validate_for(side)
    n = side // config.patch_side
    hidden = rng.uniform(size=(n, n)) < config.hide_prob
    if not hidden.any():
        return image.copy()
    out = image.copy()
    fill = np.asarray(config.fill)
    if out.dtype == np.uint8:
        fill = np.clip(np.round(fill), 0, 255).astype(np.uint8)
    else:
        fill = fill.astype(out.dtype)
    p = config.patch_side
    for r, c in np.argwhere(hidden):
        out[r * p : (r + 1) * p, c * p : (c + 1) * p] = fill
    return out
