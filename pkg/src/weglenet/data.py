"""Core samples and the on-disk dataset layout.

Layout (written by the synthetic generator, readable for Arvaniti-style data
arranged the same way)::

    root/
      images/<core_id>.png    RGB tissue-core image
      masks/<core_id>.png     paletted mask, codes 0..4 (optional per core)
      labels.csv              header: core_id,primary,secondary,split

Mask codes on disk: 0 = benign, 1 = GG3, 2 = GG4, 3 = GG5, 4 = background.
Benign and background are merged into the non-cancerous class (code 0) at
load time, so in-memory masks only carry codes 0..3.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

CLASS_NAMES = ("NC", "GG3", "GG4", "GG5")
NC, GG3, GG4, GG5 = 0, 1, 2, 3
BACKGROUND_CODE = 4  # on-disk only; merged into NC when loading
NUM_CLASSES = 4

GRADES = (3, 4, 5)
SPLITS = ("train", "val", "test")

#: class code (1..3) -> Gleason grade (3..5), and back
CODE_TO_GRADE = {GG3: 3, GG4: 4, GG5: 5}
GRADE_TO_CODE = {3: GG3, 4: GG4, 5: GG5}


@dataclass(frozen=True)
class GlobalLabel:
    """Presence booleans for the three cancer grades, derived from the score."""

    gg3: bool = False
    gg4: bool = False
    gg5: bool = False

    @classmethod
    def from_score(cls, primary: int, secondary: int) -> "GlobalLabel":
        """Derive presence booleans from a (primary, secondary) grade pair.

        A benign core is encoded as (0, 0) and maps to all-false.
        """
        if (primary == 0) != (secondary == 0):
            raise ValueError(
                f"inconsistent score ({primary}, {secondary}): 0 marks a benign core "
                "and must appear in both positions"
            )
        present = set()
        for grade in (primary, secondary):
            if grade == 0:
                continue
            if grade not in GRADES:
                raise ValueError(f"Gleason grade must be one of {GRADES} or 0, got {grade}")
            present.add(grade)
        return cls(gg3=3 in present, gg4=4 in present, gg5=5 in present)

    @property
    def present(self) -> tuple[bool, bool, bool]:
        return (self.gg3, self.gg4, self.gg5)

    def as_array(self) -> np.ndarray:
        """Float targets for the three cancer classes, ordered GG3, GG4, GG5."""
        return np.array(self.present, dtype=np.float64)

    def any_cancer(self) -> bool:
        return self.gg3 or self.gg4 or self.gg5


@dataclass
class CoreSample:
    """One tissue-core image with optional pixel mask and global label."""

    core_id: str
    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray | None = None  # (H, W) uint8, codes 0..3
    score: tuple[int, int] | None = None  # (primary, secondary); (0, 0) = benign
    split: str = "train"

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"core {self.core_id}: image must be (H, W, 3), got {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape[:2]:
            raise ValueError(
                f"core {self.core_id}: mask shape {self.mask.shape} does not match "
                f"image shape {self.image.shape[:2]}"
            )
        if self.split not in SPLITS:
            raise ValueError(f"core {self.core_id}: split must be one of {SPLITS}, got {self.split!r}")

    @property
    def label(self) -> GlobalLabel:
        if self.score is None:
            raise ValueError(f"core {self.core_id} has no global score")
        return GlobalLabel.from_score(*self.score)

    @property
    def source_size(self) -> int:
        return int(self.image.shape[0])


def merge_background(mask: np.ndarray) -> np.ndarray:
    """Map on-disk mask codes to in-memory codes (background joins NC)."""
    out = np.asarray(mask).copy()
    bad = (out > BACKGROUND_CODE)
    if bad.any():
        raise ValueError(f"mask contains invalid codes {sorted(np.unique(out[bad]))}")
    out[out == BACKGROUND_CODE] = NC
    return out.astype(np.uint8)


def read_labels_csv(path: Path) -> list[dict]:
    """Parse labels.csv; malformed rows are rejected with their line number."""
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"core_id", "primary", "secondary", "split"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise ValueError(f"{path}: header must contain columns {sorted(required)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                parsed = {
                    "core_id": row["core_id"].strip(),
                    "primary": int(row["primary"]),
                    "secondary": int(row["secondary"]),
                    "split": row["split"].strip(),
                }
                if not parsed["core_id"]:
                    raise ValueError("empty core_id")
                if parsed["split"] not in SPLITS:
                    raise ValueError(f"split must be one of {SPLITS}")
                # validates the grade pair
                GlobalLabel.from_score(parsed["primary"], parsed["secondary"])
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}, line {lineno}: malformed row ({exc})") from exc
            rows.append(parsed)
    return rows


def load_dataset(root: str | Path) -> list[CoreSample]:
    """Load every core listed in ``root/labels.csv``.

    Cores without a mask file simply get ``mask=None``; an image/mask size
    mismatch is an error naming the offending core.
    """
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.exists():
        raise FileNotFoundError(f"no labels.csv under {root}")
    rows = read_labels_csv(labels_path)

    cores = []
    for row in rows:
        core_id = row["core_id"]
        image_path = root / "images" / f"{core_id}.png"
        if not image_path.exists():
            raise FileNotFoundError(f"core {core_id}: missing image {image_path}")
        image = np.asarray(Image.open(image_path).convert("RGB"))

        mask = None
        mask_path = root / "masks" / f"{core_id}.png"
        if mask_path.exists():
            mask = merge_background(np.asarray(Image.open(mask_path)))
            if mask.shape != image.shape[:2]:
                raise ValueError(
                    f"core {core_id}: mask size {mask.shape} does not match image size "
                    f"{image.shape[:2]}"
                )
        cores.append(
            CoreSample(
                core_id=core_id,
                image=image,
                mask=mask,
                score=(row["primary"], row["secondary"]),
                split=row["split"],
            )
        )
    return cores


MASK_PALETTE = [
    255, 255, 255,  # 0 NC: white
    0, 200, 0,      # 1 GG3: green
    0, 0, 230,      # 2 GG4: blue
    220, 0, 0,      # 3 GG5: red
    160, 160, 160,  # 4 background: grey
] + [0, 0, 0] * 251


def save_mask_png(mask: np.ndarray, path: Path) -> None:
    """Write a mask as a paletted PNG (codes preserved, palette for viewing)."""
    img = Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="P")
    img.putpalette(MASK_PALETTE)
    img.save(path)


def save_dataset(root: str | Path, cores: list[CoreSample], force: bool = False) -> None:
    """Write cores to the on-disk layout. Refuses a non-empty root unless forced."""
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise FileExistsError(f"{root} exists and is not empty (use force to overwrite)")
    (root / "images").mkdir(parents=True, exist_ok=True)
    has_masks = any(c.mask is not None for c in cores)
    if has_masks:
        (root / "masks").mkdir(exist_ok=True)

    with open(root / "labels.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["core_id", "primary", "secondary", "split"])
        for core in cores:
            if core.score is None:
                raise ValueError(f"core {core.core_id} has no score; cannot write labels.csv")
            writer.writerow([core.core_id, core.score[0], core.score[1], core.split])

    for core in cores:
        Image.fromarray(core.image).save(root / "images" / f"{core.core_id}.png")
        if core.mask is not None:
            save_mask_png(core.mask, root / "masks" / f"{core.core_id}.png")


def split_cores(cores: list[CoreSample], split: str) -> list[CoreSample]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    return [c for c in cores if c.split == split]


def dataset_mean_rgb(cores: list[CoreSample]) -> np.ndarray:
    """Per-channel mean intensity over the given cores (used as fill value)."""
    if not cores:
        raise ValueError("cannot compute mean of an empty core list")
    acc = np.zeros(3, dtype=np.float64)
    for core in cores:
        acc += core.image.reshape(-1, 3).mean(axis=0)
    return acc / len(cores)
