"""Figures of merit: confusion matrices, quadratic kappa, F1/mIoU/ACC,
one-vs-rest AUC, and the pixel/patch/core evaluation procedures.

Conventions: confusion rows are the reference, columns the prediction.
Classes absent from both reference and prediction are excluded from macro
averages. AUC follows the Mann-Whitney convention (ties count 0.5 per pair).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES, GlobalLabel, NC
from .patches import PatchRecord
from .scoring import SCORE_CLASS_NAMES


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K) int64, rows = reference
    class_names: tuple[str, ...]

    def __post_init__(self) -> None:
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {self.counts.shape}")
        if len(self.class_names) != self.counts.shape[0]:
            raise ValueError("class_names length must match matrix size")
        if (self.counts < 0).any():
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_labels(cls, ref, pred, class_names: tuple[str, ...]) -> "ConfusionMatrix":
        ref = np.asarray(ref, dtype=np.int64).ravel()
        pred = np.asarray(pred, dtype=np.int64).ravel()
        if ref.shape != pred.shape:
            raise ValueError(f"ref and pred lengths differ: {ref.size} vs {pred.size}")
        k = len(class_names)
        if ref.size and (ref.min() < 0 or ref.max() >= k or pred.min() < 0 or pred.max() >= k):
            raise ValueError(f"labels must lie in 0..{k - 1}")
        counts = np.bincount(ref * k + pred, minlength=k * k).reshape(k, k)
        return cls(counts=counts, class_names=tuple(class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as f:
            f.write("ref\\pred," + ",".join(self.class_names) + "\n")
            for name, row in zip(self.class_names, self.counts):
                f.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")


def quadratic_kappa(ref, pred, num_classes: int) -> float:
    """Cohen's kappa with quadratic disagreement weights.

    kappa = 1 - sum(W * O) / sum(W * E), where W_ij = (i - j)^2 / (K - 1)^2,
    O is the observed confusion and E the outer product of the marginals
    scaled to the same total. When both raters are constant and identical
    (no expected disagreement) the convention is kappa = 1, with a warning.
    """
    ref = np.asarray(ref, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if ref.size == 0 or ref.shape != pred.shape:
        raise ValueError("ref and pred must be equal-length, non-empty label sequences")
    k = int(num_classes)
    if k < 2:
        raise ValueError(f"num_classes must be >= 2, got {k}")
    if ref.min() < 0 or ref.max() >= k or pred.min() < 0 or pred.max() >= k:
        raise ValueError(f"labels must lie in 0..{k - 1}")

    observed = np.bincount(ref * k + pred, minlength=k * k).reshape(k, k).astype(np.float64)
    n = observed.sum()
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / n
    idx = np.arange(k, dtype=np.float64)
    weights = (idx[:, None] - idx[None, :]) ** 2 / (k - 1) ** 2
    denom = (weights * expected).sum()
    if denom == 0.0:
        warnings.warn(
            "no expected disagreement (both raters constant and equal); kappa = 1 by convention",
            stacklevel=2,
        )
        return 1.0
    return float(1.0 - (weights * observed).sum() / denom)


def confusion_metrics(cm: ConfusionMatrix) -> dict:
    """Per-class F1, macro F1, mIoU and accuracy from a confusion matrix.

    Classes with no reference and no predicted units are left out of the
    macro averages (their F1 reads as NaN in the per-class listing).
    """
    counts = cm.counts.astype(np.float64)
    if counts.sum() == 0:
        raise ValueError("confusion matrix is all-zero")
    tp = np.diag(counts)
    fp = counts.sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    present = (tp + fp + fn) > 0

    with np.errstate(divide="ignore", invalid="ignore"):
        f1 = 2 * tp / (2 * tp + fp + fn)
        iou = tp / (tp + fp + fn)
    f1 = np.where(present, f1, np.nan)
    iou = np.where(present, iou, np.nan)
    return {
        "f1_per_class": {name: float(v) for name, v in zip(cm.class_names, f1)},
        "macro_f1": float(np.nanmean(f1)) if present.any() else float("nan"),
        "miou": float(np.nanmean(iou)) if present.any() else float("nan"),
        "accuracy": float(tp.sum() / counts.sum()),
    }


def binary_auc(scores, positives) -> float:
    """ROC AUC via the rank statistic; ties average (Mann-Whitney)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives, dtype=bool).ravel()
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    ranks[order] = np.arange(1, scores.size + 1)
    # average the ranks of tied scores
    sorted_scores = scores[order]
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + 1 + j + 1)
        i = j + 1
    rank_sum = ranks[positives].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def corelevel_auc(label_probs, labels: list[GlobalLabel]) -> dict:
    """Macro one-vs-rest AUC of the global cancer-class probabilities.

    ``label_probs`` is (n_cores, 3) ordered GG3, GG4, GG5. Classes without
    both a positive and a negative core are skipped and reported as such.
    """
    probs = np.asarray(label_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != 3:
        raise ValueError(f"label_probs must be (n_cores, 3), got shape {probs.shape}")
    if probs.shape[0] != len(labels):
        raise ValueError("label_probs and labels length mismatch")
    targets = np.array([lab.present for lab in labels], dtype=bool)

    per_class: dict[str, float] = {}
    skipped: list[str] = []
    for i, name in enumerate(("GG3", "GG4", "GG5")):
        pos = targets[:, i]
        if pos.all() or not pos.any():
            skipped.append(name)
            continue
        per_class[name] = binary_auc(probs[:, i], pos)
    if not per_class:
        raise ValueError("no class has both positive and negative cores; AUC undefined")
    return {
        "macro_auc": float(np.mean(list(per_class.values()))),
        "per_class": per_class,
        "skipped": skipped,
    }


@dataclass
class EvaluationReport:
    level: str  # pixel | patch | core
    kappa: float
    f1_per_class: dict[str, float]
    macro_f1: float
    miou: float
    accuracy: float
    confusion: ConfusionMatrix
    auc: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not -1.0 - 1e-9 <= self.kappa <= 1.0 + 1e-9:
            raise ValueError(f"kappa out of [-1, 1]: {self.kappa}")

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "kappa": self.kappa,
            "f1_per_class": self.f1_per_class,
            "macro_f1": self.macro_f1,
            "miou": self.miou,
            "accuracy": self.accuracy,
            "auc": self.auc,
            "confusion": {
                "class_names": list(self.confusion.class_names),
                "counts": self.confusion.counts.tolist(),
            },
            "extra": self.extra,
        }

    def to_json(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
            f.write("\n")


def _report_from_labels(level: str, ref, pred, class_names, auc=None, extra=None) -> EvaluationReport:
    cm = ConfusionMatrix.from_labels(ref, pred, class_names)
    derived = confusion_metrics(cm)
    kappa = quadratic_kappa(ref, pred, len(class_names))
    return EvaluationReport(
        level=level,
        kappa=kappa,
        f1_per_class=derived["f1_per_class"],
        macro_f1=derived["macro_f1"],
        miou=derived["miou"],
        accuracy=derived["accuracy"],
        confusion=cm,
        auc=auc,
        extra=extra or {},
    )


def pixel_level_eval(pred_masks: dict[str, np.ndarray], ref_masks: dict[str, np.ndarray]) -> EvaluationReport:
    """Pixel-level report over all cores present in both mappings."""
    shared = sorted(set(pred_masks) & set(ref_masks))
    if not shared:
        raise ValueError("no cores shared between predictions and references")
    refs, preds = [], []
    for core_id in shared:
        ref = np.asarray(ref_masks[core_id]).ravel()
        pred = np.asarray(pred_masks[core_id]).ravel()
        if ref.shape != pred.shape:
            raise ValueError(f"core {core_id}: mask sizes differ ({ref.size} vs {pred.size} pixels)")
        refs.append(ref)
        preds.append(pred)
    return _report_from_labels(
        "pixel", np.concatenate(refs), np.concatenate(preds), CLASS_NAMES,
        extra={"n_cores": len(shared)},
    )


def patch_predicted_label(pred_window: np.ndarray) -> int:
    """Patch label from a predicted-mask window.

    NC only when every pixel is NC; otherwise the majority class among the
    cancerous pixels (ties to the lower grade).
    """
    window = np.asarray(pred_window)
    counts = np.bincount(window.ravel().astype(np.int64), minlength=4)
    if counts[1:].sum() == 0:
        return NC
    return int(np.argmax(counts[1:])) + 1


def patch_level_eval(
    pred_masks: dict[str, np.ndarray],
    ref_patches: list[PatchRecord],
    window: int = 750,
) -> EvaluationReport:
    """Patch-level report: reference labels vs predictions read off the masks."""
    if not ref_patches:
        raise ValueError("no reference patches given")
    refs, preds = [], []
    for record in ref_patches:
        core_id, r_off, c_off = record.origin
        if core_id not in pred_masks:
            raise ValueError(f"no predicted mask for core {core_id}")
        mask = pred_masks[core_id]
        if r_off + window > mask.shape[0] or c_off + window > mask.shape[1]:
            raise ValueError(
                f"patch window at ({r_off}, {c_off}) size {window} exceeds predicted mask "
                f"bounds {mask.shape} for core {core_id}"
            )
        refs.append(record.label)
        preds.append(patch_predicted_label(mask[r_off : r_off + window, c_off : c_off + window]))
    return _report_from_labels("patch", refs, preds, CLASS_NAMES, extra={"n_patches": len(refs)})


def core_level_eval(pred_ordinals, ref_ordinals, auc: float | None = None) -> EvaluationReport:
    """Core-level scoring report on the ordinal axis benign, 6..10."""
    return _report_from_labels("core", ref_ordinals, pred_ordinals, SCORE_CLASS_NAMES, auc=auc)
