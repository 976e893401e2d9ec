"""Moving-window patch extraction and the patch labeling protocol.

Windows are placed at offsets 0, step, 2*step, ... and kept only while fully
inside the core, which gives ``(floor((N - w) / s) + 1)**2`` windows; no extra
edge-flush window is added when ``(N - w)`` is not a multiple of ``s``.

Labeling (``strict`` is the default):

* a window with no grade annotation anywhere is labeled NC;
* otherwise the central region (side = ``step``, so central regions tile the
  core without overlap at the default 750/350 geometry) decides: no grade in
  the central region drops the patch; more than one distinct grade drops it
  in strict mode or takes the majority grade in ``majority`` mode; a single
  grade labels the patch with that grade.

``labeling="dense"`` keeps every window unlabeled-by-rule (label = NC for
grade-free windows, majority grade otherwise) and is meant for mask-supervised
training where the mask crop itself is the target.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .data import CoreSample, NC

LABELING_MODES = ("strict", "majority", "dense")


@dataclass
class PatchRecord:
    """One extracted window with its protocol label and provenance."""

    pixels: np.ndarray  # (side, side, 3) uint8
    label: int  # class code 0..3
    origin: tuple[str, int, int]  # (core_id, row offset, col offset)
    mask: np.ndarray | None = None  # (side, side) mask crop, for dense supervision


def window_offsets(side: int, window: int, step: int) -> list[int]:
    if window <= 0 or step <= 0:
        raise ValueError(f"window and step must be positive, got {window}, {step}")
    if window > side:
        return []
    return list(range(0, side - window + 1, step))


def count_windows(side: int, window: int, step: int) -> int:
    """Closed form for the number of windows per axis, squared."""
    if window > side:
        return 0
    per_axis = (side - window) // step + 1
    return per_axis * per_axis


def _majority_grade(mask_region: np.ndarray) -> int:
    """Most frequent grade code in the region; ties go to the lower grade."""
    counts = np.bincount(mask_region.ravel(), minlength=4)
    grade_counts = counts[1:4]
    return int(np.argmax(grade_counts)) + 1  # argmax takes the first (lower) on ties


def extract_patches(
    core: CoreSample,
    window: int = 750,
    step: int = 350,
    labeling: str = "strict",
    resize_to: int | None = None,
    keep_mask: bool = False,
) -> list[PatchRecord]:
    """Extract and label patches from an annotated core.

    ``resize_to`` optionally rescales patch pixels (bilinear with
    anti-aliasing) and mask crops (nearest) after extraction; the recorded
    origin always refers to source coordinates.
    """
    if labeling not in LABELING_MODES:
        raise ValueError(f"labeling must be one of {LABELING_MODES}, got {labeling!r}")
    if core.mask is None:
        raise ValueError(f"core {core.core_id} has no mask; patch labeling requires annotations")
    side = core.source_size
    offsets = window_offsets(side, window, step)
    if not offsets:
        warnings.warn(
            f"window {window} exceeds core side {side}; no patches extracted", stacklevel=2
        )
        return []

    margin = (window - step) // 2  # central region of side = step
    records = []
    for r_off in offsets:
        for c_off in offsets:
            mask_win = core.mask[r_off : r_off + window, c_off : c_off + window]
            grades_in_window = np.unique(mask_win[mask_win > 0])

            if grades_in_window.size == 0:
                label = NC
            else:
                central = mask_win[margin : margin + step, margin : margin + step]
                central_grades = np.unique(central[central > 0])
                if central_grades.size == 0:
                    if labeling == "dense":
                        label = _majority_grade(mask_win)
                    else:
                        continue  # ambiguous: grades at the rim only
                elif central_grades.size == 1:
                    label = int(central_grades[0])
                else:
                    if labeling == "strict":
                        continue  # multiple grade annotations
                    label = _majority_grade(central)

            pixels = core.image[r_off : r_off + window, c_off : c_off + window]
            mask_crop = mask_win if keep_mask else None
            if resize_to is not None and resize_to != window:
                pixels = np.asarray(
                    Image.fromarray(pixels).resize((resize_to, resize_to), Image.BILINEAR)
                )
                if mask_crop is not None:
                    mask_crop = np.asarray(
                        Image.fromarray(mask_crop).resize((resize_to, resize_to), Image.NEAREST)
                    )
            records.append(
                PatchRecord(
                    pixels=np.ascontiguousarray(pixels),
                    label=label,
                    origin=(core.core_id, r_off, c_off),
                    mask=np.ascontiguousarray(mask_crop) if mask_crop is not None else None,
                )
            )
    return records
