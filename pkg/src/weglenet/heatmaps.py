"""Rendering of class probability maps and discrete masks.

Color convention: green = GG3, blue = GG4, red = GG5; NC stays uncolored
(white in standalone masks, untouched pixels in overlays).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import CLASS_NAMES
from .model import ClassProbabilityMaps, upsample_probability_maps

CLASS_RGB = {
    1: (0, 200, 0),  # GG3 green
    2: (0, 0, 230),  # GG4 blue
    3: (220, 0, 0),  # GG5 red
}


def colorize_mask(mask: np.ndarray) -> np.ndarray:
    """Discrete mask to an RGB image (NC white)."""
    out = np.full(mask.shape + (3,), 255, dtype=np.uint8)
    for code, rgb in CLASS_RGB.items():
        out[mask == code] = rgb
    return out


def overlay_mask(image: np.ndarray, mask: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """Blend class colors over the image on cancerous pixels only."""
    out = image.astype(np.float64).copy()
    for code, rgb in CLASS_RGB.items():
        sel = mask == code
        out[sel] = (1 - alpha) * out[sel] + alpha * np.asarray(rgb, dtype=np.float64)
    return np.clip(out, 0, 255).astype(np.uint8)


def class_heatmap(image: np.ndarray, prob: np.ndarray, class_code: int, alpha: float = 0.6) -> np.ndarray:
    """Blend one class color over the image, weighted by its probability map."""
    rgb = np.asarray(CLASS_RGB[class_code], dtype=np.float64)
    weight = alpha * np.clip(prob, 0.0, 1.0)[..., None]
    out = (1 - weight) * image.astype(np.float64) + weight * rgb
    return np.clip(out, 0, 255).astype(np.uint8)


def export_core_heatmaps(
    image: np.ndarray,
    probs: ClassProbabilityMaps | np.ndarray,
    out_dir: str | Path,
    core_id: str,
) -> list[Path]:
    """Write per-class overlays and the combined mask for one core.

    Produces ``<core>_gg3/gg4/gg5.png`` (probability-weighted overlays) and
    ``<core>_mask.png`` (argmax overlay). Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    side = int(image.shape[0])
    if isinstance(probs, ClassProbabilityMaps):
        up = probs.upsampled(side)
    else:
        up = upsample_probability_maps(np.asarray(probs), side)

    written = []
    for code in (1, 2, 3):
        path = out_dir / f"{core_id}_{CLASS_NAMES[code].lower()}.png"
        Image.fromarray(class_heatmap(image, up[..., code], code)).save(path)
        written.append(path)
    mask = np.argmax(up, axis=-1).astype(np.uint8)
    path = out_dir / f"{core_id}_mask.png"
    Image.fromarray(overlay_mask(image, mask)).save(path)
    written.append(path)
    return written
