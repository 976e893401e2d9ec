"""Core-level Gleason scoring from a discrete segmentation mask.

Pipeline: count the per-class tissue fractions w (GG3/GG4/GG5 pixels over all
mask pixels), zero every class below the presence threshold ``c``, then apply
the dominance rule: if the largest surviving fraction exceeds ``d``, all other
classes are suppressed. Primary/secondary grades are the top two survivors
(secondary = primary when only one survives); a core with no survivor is
benign. Exact fraction ties break toward the lower grade.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .data import NUM_CLASSES


class GleasonScore(NamedTuple):
    primary: int
    secondary: int

    @property
    def total(self) -> int:
        return self.primary + self.secondary

    def __str__(self) -> str:
        return f"{self.primary}+{self.secondary}={self.total}"


#: ordinal axis for core-level agreement: benign, then scores 6..10
SCORE_CLASS_NAMES = ("benign", "6", "7", "8", "9", "10")


def score_to_ordinal(score: GleasonScore | None) -> int:
    """Map a score (or benign = None) onto the ordinal axis 0..5."""
    if score is None:
        return 0
    return score.total - 5


@dataclass(frozen=True)
class ClassPercentages:
    """Tissue fractions per cancer class; the remainder up to 1 is NC."""

    gg3: float = 0.0
    gg4: float = 0.0
    gg5: float = 0.0

    def __post_init__(self) -> None:
        values = self.as_array()
        if (values < 0).any():
            raise ValueError(f"class percentages must be >= 0, got {tuple(values)}")
        if values.sum() > 1.0 + 1e-9:
            raise ValueError(f"class percentages sum to {values.sum():.6f} > 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.gg3, self.gg4, self.gg5], dtype=np.float64)


def class_percentages(mask: np.ndarray) -> ClassPercentages:
    """Per-class pixel fractions of a discrete mask (codes 0..3)."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("cannot compute class percentages of an empty mask")
    if mask.min() < 0 or mask.max() >= NUM_CLASSES:
        raise ValueError(f"mask codes must lie in 0..{NUM_CLASSES - 1}")
    counts = np.bincount(mask.ravel().astype(np.int64), minlength=NUM_CLASSES)
    fractions = counts / mask.size
    return ClassPercentages(gg3=float(fractions[1]), gg4=float(fractions[2]), gg5=float(fractions[3]))


@dataclass(frozen=True)
class ScoringConfig:
    """Presence threshold ``c`` and dominance threshold ``d``."""

    c: float = 0.03
    d: float = 0.70

    def __post_init__(self) -> None:
        if not 0.0 <= self.c < self.d <= 1.0:
            raise ValueError(f"need 0 <= c < d <= 1, got c={self.c}, d={self.d}")


def apply_score_rule(w: ClassPercentages, cfg: ScoringConfig = ScoringConfig()) -> GleasonScore | None:
    """Primary/secondary grade pair from class percentages; None = benign.

    The presence filter runs first, then the dominance rule; both use strict
    inequalities (w < c zeroed; max w > d suppresses the rest).
    """
    grades = np.array([3, 4, 5])
    values = w.as_array()
    values = np.where(values < cfg.c, 0.0, values)
    if not (values > 0).any():
        return None
    if values.max() > cfg.d:
        keep = np.argmax(values)  # first max = lower grade on ties
        suppressed = np.zeros_like(values)
        suppressed[keep] = values[keep]
        values = suppressed
    order = np.argsort(-values, kind="stable")  # descending, ties to lower grade
    primary = int(grades[order[0]])
    if values[order[1]] > 0:
        secondary = int(grades[order[1]])
    else:
        secondary = primary
    return GleasonScore(primary, secondary)


def gleason_score_sum(primary: int, secondary: int) -> int:
    """Combined Gleason score (6..10) from the two majority grades."""
    for grade in (primary, secondary):
        if grade not in (3, 4, 5):
            raise ValueError(f"Gleason grades must be in {{3, 4, 5}}, got {grade}")
    return primary + secondary


def score_mask(mask: np.ndarray, cfg: ScoringConfig = ScoringConfig()) -> GleasonScore | None:
    """Convenience: percentages + scoring rule in one call."""
    return apply_score_rule(class_percentages(mask), cfg)


def score_from_label_pair(primary: int, secondary: int) -> GleasonScore | None:
    """Reference (primary, secondary) pair to a score; (0, 0) = benign."""
    if primary == 0 and secondary == 0:
        return None
    return GleasonScore(primary, secondary)


def write_scoring_csv(path: str | Path, rows: list[dict]) -> None:
    """Emit the scoring table: one row per core.

    Benign cores leave primary/secondary empty and put 'benign' in the score
    column. Row keys: core_id, w (ClassPercentages), score (GleasonScore|None).
    """
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["core_id", "w_gg3", "w_gg4", "w_gg5", "primary", "secondary", "score"])
        for row in rows:
            w: ClassPercentages = row["w"]
            score: GleasonScore | None = row["score"]
            writer.writerow(
                [
                    row["core_id"],
                    f"{w.gg3:.6f}",
                    f"{w.gg4:.6f}",
                    f"{w.gg5:.6f}",
                    score.primary if score else "",
                    score.secondary if score else "",
                    score.total if score else "benign",
                ]
            )
