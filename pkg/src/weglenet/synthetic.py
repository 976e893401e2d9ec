"""Synthetic tissue-core generator for dataset-free runs.

Each core is a light slide background with a roughly centered tissue disc.
Non-cancerous tissue carries sparse gland-like rings; each cancer grade has
its own blob texture and color signature so class identity is locally
decidable:

* GG3 -- small dense rings on a mauve base
* GG4 -- fused clusters of mid-size rings on a blue-violet base
* GG5 -- solid dark nests with cell speckle, no lumens

The mask is exactly the set of rendered blob discs (clipped at the canvas),
and the global score is the top-two grades by rendered area.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import CoreSample, GRADE_TO_CODE, NC

SLIDE_RGB = (246, 244, 248)
TISSUE_BASE_RGB = (228, 195, 213)
TISSUE_RING_RGB = (196, 138, 176)
TISSUE_LUMEN_RGB = (250, 244, 250)

GRADE_STYLE = {
    # grade: (base, ring/speckle, lumen or None)
    3: ((208, 172, 220), (158, 108, 196), (240, 230, 246)),
    4: ((152, 156, 216), (104, 108, 186), (214, 216, 242)),
    5: ((122, 86, 148), (92, 58, 118), None),
}


@dataclass(frozen=True)
class SynthesisSpec:
    """Parameters of the synthetic core renderer."""

    side: int = 512
    tissue_radius_frac: float = 0.46
    benign_fraction: float = 0.2
    grade_pool: tuple[int, ...] = (3, 4, 5)
    min_grades: int = 1
    max_grades: int = 2
    blobs_per_grade: tuple[int, int] = (1, 2)
    blob_radius_frac: tuple[float, float] = (0.16, 0.30)
    noise: float = 5.0

    def __post_init__(self) -> None:
        if self.side < 64:
            raise ValueError(f"side must be >= 64, got {self.side}")
        if not 0.0 <= self.benign_fraction <= 1.0:
            raise ValueError("benign_fraction must lie in [0, 1]")
        if not all(g in (3, 4, 5) for g in self.grade_pool):
            raise ValueError(f"grade_pool entries must be Gleason grades, got {self.grade_pool}")
        if not 1 <= self.min_grades <= self.max_grades <= len(self.grade_pool):
            raise ValueError("need 1 <= min_grades <= max_grades <= len(grade_pool)")


def _disc_window(side: int, cy: float, cx: float, radius: float):
    """Bounding-box slice plus a boolean disc inside it (clipped at canvas)."""
    r0 = max(0, int(np.floor(cy - radius)))
    r1 = min(side, int(np.ceil(cy + radius)) + 1)
    c0 = max(0, int(np.floor(cx - radius)))
    c1 = min(side, int(np.ceil(cx + radius)) + 1)
    if r0 >= r1 or c0 >= c1:
        return None
    yy, xx = np.mgrid[r0:r1, c0:c1]
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
    return (slice(r0, r1), slice(c0, c1)), inside


def _paint_disc(canvas: np.ndarray, cy: float, cx: float, radius: float, rgb) -> None:
    hit = _disc_window(canvas.shape[0], cy, cx, radius)
    if hit is None:
        return
    window, inside = hit
    canvas[window][inside] = rgb


def _paint_ring(canvas: np.ndarray, cy: float, cx: float, radius: float, ring_rgb, lumen_rgb) -> None:
    hit = _disc_window(canvas.shape[0], cy, cx, radius)
    if hit is None:
        return
    window, inside = hit
    canvas[window][inside] = ring_rgb
    if lumen_rgb is not None and radius > 2.5:
        hit = _disc_window(canvas.shape[0], cy, cx, radius * 0.55)
        if hit is not None:
            window, inside = hit
            canvas[window][inside] = lumen_rgb


def _scatter_rings(
    canvas: np.ndarray,
    rng: np.random.Generator,
    cy: float,
    cx: float,
    region_radius: float,
    ring_radius: tuple[float, float],
    spacing: float,
    ring_rgb,
    lumen_rgb,
) -> None:
    """Fill a disc region with randomly placed rings of the given size range."""
    mean_r = 0.5 * (ring_radius[0] + ring_radius[1])
    count = max(1, int((region_radius / (spacing * mean_r)) ** 2))
    angles = rng.uniform(0.0, 2 * np.pi, size=count)
    dists = region_radius * np.sqrt(rng.uniform(0.0, 1.0, size=count))
    radii = rng.uniform(ring_radius[0], ring_radius[1], size=count)
    for ang, dist, r in zip(angles, dists, radii):
        _paint_ring(canvas, cy + dist * np.sin(ang), cx + dist * np.cos(ang), r, ring_rgb, lumen_rgb)


def _render_grade_blob(
    canvas: np.ndarray,
    rng: np.random.Generator,
    grade: int,
    cy: float,
    cx: float,
    radius: float,
    scale: float,
) -> None:
    base, accent, lumen = GRADE_STYLE[grade]
    _paint_disc(canvas, cy, cx, radius, base)
    if grade == 3:
        _scatter_rings(canvas, rng, cy, cx, radius, (3.0 * scale, 5.5 * scale), 2.2, accent, lumen)
    elif grade == 4:
        # fused clusters: a few cluster sites, each a clump of overlapping rings
        n_clusters = max(2, int(radius / (14.0 * scale)))
        for _ in range(n_clusters):
            ang = rng.uniform(0.0, 2 * np.pi)
            dist = radius * 0.8 * np.sqrt(rng.uniform())
            ccy, ccx = cy + dist * np.sin(ang), cx + dist * np.cos(ang)
            for _ in range(rng.integers(3, 6)):
                jy, jx = rng.normal(scale=4.0 * scale, size=2)
                _paint_ring(canvas, ccy + jy, ccx + jx, rng.uniform(5.0, 9.0) * scale, accent, lumen)
    else:
        # solid nests: dark speckle only
        _scatter_rings(canvas, rng, cy, cx, radius, (1.2 * scale, 2.4 * scale), 2.0, accent, None)


def synthesize_core(seed: int, spec: SynthesisSpec = SynthesisSpec(), core_id: str | None = None,
                    split: str = "train") -> CoreSample:
    """Render one synthetic core; bit-identical for a fixed (seed, spec)."""
    rng = np.random.default_rng(seed)
    side = spec.side
    scale = side / 512.0

    canvas = np.empty((side, side, 3), dtype=np.float64)
    canvas[:] = SLIDE_RGB
    mask = np.full((side, side), NC, dtype=np.uint8)

    center = side / 2.0 + rng.uniform(-0.02 * side, 0.02 * side, size=2)
    tissue_r = spec.tissue_radius_frac * side * rng.uniform(0.94, 1.0)
    _paint_disc(canvas, center[0], center[1], tissue_r, TISSUE_BASE_RGB)
    _scatter_rings(
        canvas, rng, center[0], center[1], tissue_r,
        (6.0 * scale, 11.0 * scale), 2.6, TISSUE_RING_RGB, TISSUE_LUMEN_RGB,
    )

    if rng.uniform() < spec.benign_fraction:
        grades: list[int] = []
    else:
        n_grades = int(rng.integers(spec.min_grades, spec.max_grades + 1))
        grades = list(rng.choice(spec.grade_pool, size=n_grades, replace=False))

    for grade in grades:
        n_blobs = int(rng.integers(spec.blobs_per_grade[0], spec.blobs_per_grade[1] + 1))
        for _ in range(n_blobs):
            radius = rng.uniform(*spec.blob_radius_frac) * side
            max_offset = max(tissue_r - 0.6 * radius, 0.1 * side)
            ang = rng.uniform(0.0, 2 * np.pi)
            dist = max_offset * np.sqrt(rng.uniform())
            cy, cx = center[0] + dist * np.sin(ang), center[1] + dist * np.cos(ang)
            _render_grade_blob(canvas, rng, int(grade), cy, cx, radius, scale)
            hit = _disc_window(side, cy, cx, radius)
            if hit is not None:
                window, inside = hit
                mask[window][inside] = GRADE_TO_CODE[int(grade)]

    canvas += rng.uniform(-spec.noise, spec.noise, size=canvas.shape)
    image = np.clip(canvas, 0, 255).astype(np.uint8)

    areas = np.bincount(mask.ravel(), minlength=4)
    score = score_from_areas(areas)
    return CoreSample(
        core_id=core_id or f"synth{seed:06d}",
        image=image,
        mask=mask,
        score=score,
        split=split,
    )


def score_from_areas(areas: np.ndarray) -> tuple[int, int]:
    """Top-two grades by pixel area; (0, 0) when no grade was rendered."""
    grade_areas = [(int(areas[code]), grade) for grade, code in GRADE_TO_CODE.items()]
    present = sorted((a, -g) for a, g in grade_areas if a > 0)
    if not present:
        return (0, 0)
    primary = -present[-1][1]
    secondary = -present[-2][1] if len(present) > 1 else primary
    return (primary, secondary)


def synthesize_dataset(
    n_cores: int,
    seed: int,
    spec: SynthesisSpec = SynthesisSpec(),
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
) -> list[CoreSample]:
    """Generate ``n_cores`` cores with a deterministic 70/15/15 split by index."""
    if n_cores <= 0:
        raise ValueError(f"n_cores must be positive, got {n_cores}")
    if abs(sum(split_fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_train = int(round(split_fractions[0] * n_cores))
    n_val = int(round(split_fractions[1] * n_cores))
    cores = []
    for i in range(n_cores):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        core_seed = seed * 1_000_003 + i
        cores.append(synthesize_core(core_seed, spec, core_id=f"core{i:04d}", split=split))
    return cores
