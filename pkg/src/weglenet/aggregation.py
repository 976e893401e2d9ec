"""Global-aggregation operators that pool a 2D activation map to one value.

Four operators are provided:

* ``LSE``  -- log-sum-exponential, ``(1/r) * log((1/S) * sum(exp(r * x)))``
  over the ``S`` map entries. Interpolates between average pooling
  (``r -> 0``) and max pooling (``r -> inf``) via the sharpness ``r``.
* ``GAP``  -- global average pooling.
* ``GMP``  -- global max pooling.
* ``MixP`` -- convex mix ``alpha * GMP + (1 - alpha) * GAP``; in the trainable
  layer ``alpha`` is learned through a sigmoid so it stays in ``[0, 1]``.

``aggregate`` / ``lse_gradient`` are the pure numpy reference path;
``GlobalAggregation2d`` is the differentiable layer used inside models.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

AGGREGATION_METHODS = ("LSE", "GAP", "GMP", "MixP")


@dataclass(frozen=True)
class AggregationSpec:
    """Choice and parameters of the global pooling operator.

    ``r`` is only meaningful for LSE (must be > 0), ``alpha`` only for MixP
    (must lie in [0, 1]; it is the initial value of the trainable mix).
    """

    method: str = "LSE"
    r: float = 8.0
    alpha: float = 0.5

    def __post_init__(self) -> None:
        if self.method not in AGGREGATION_METHODS:
            raise ValueError(
                f"unknown aggregation method {self.method!r}; expected one of {AGGREGATION_METHODS}"
            )
        if self.method == "LSE" and not self.r > 0:
            raise ValueError(f"LSE requires r > 0, got r={self.r}")
        if self.method == "MixP" and not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"MixP requires alpha in [0, 1], got alpha={self.alpha}")

    def to_dict(self) -> dict:
        return {"method": self.method, "r": self.r, "alpha": self.alpha}

    @classmethod
    def from_dict(cls, d: dict) -> "AggregationSpec":
        return cls(**d)


def _as_map(map2d) -> np.ndarray:
    arr = np.asarray(map2d, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("aggregation map is empty")
    return arr


def aggregate(map2d, spec: AggregationSpec) -> float:
    """Pool a 2D activation map to a single value.

    LSE uses the max-shift trick (subtract the max before exponentiation,
    add it back after the log) so large ``r * x`` never overflows. For any
    operator the result lies in ``[min(map), max(map)]``.
    """

    arr = _as_map(map2d)
    if spec.method == "GAP":
        return float(arr.mean())
    if spec.method == "GMP":
        return float(arr.max())
    if spec.method == "MixP":
        return float(spec.alpha * arr.max() + (1.0 - spec.alpha) * arr.mean())
    # LSE with max-shift: m + (1/r) log(mean(exp(r (x - m))))
    m = float(arr.max())
    shifted = np.exp(spec.r * (arr - m))
    return float(m + np.log(shifted.mean()) / spec.r)


def lse_gradient(map2d, r: float) -> np.ndarray:
    """Analytic gradient of the LSE pool w.r.t. every map entry.

    d LSE / d x_ij = exp(r * x_ij) / sum(exp(r * x_kl)); computed with the
    same max-shift used by ``aggregate`` so it is stable for large ``r``.
    """

    if not r > 0:
        raise ValueError(f"LSE requires r > 0, got r={r}")
    arr = _as_map(map2d)
    shifted = np.exp(r * (arr - arr.max()))
    return shifted / shifted.sum()


class GlobalAggregation2d(nn.Module):
    """Pools per-class maps ``(N, C, H, W)`` to global scores ``(N, C)``.

    For MixP the mix coefficient is stored as an unconstrained scalar and
    passed through a sigmoid, so the effective ``alpha`` stays in [0, 1]
    without any projection step during optimization.
    """

    def __init__(self, spec: AggregationSpec):
        super().__init__()
        self.spec = spec
        if spec.method == "MixP":
            a = min(max(spec.alpha, 1e-4), 1.0 - 1e-4)
            logit = float(np.log(a / (1.0 - a)))
            self._alpha_raw = nn.Parameter(torch.tensor(logit, dtype=torch.float32))

    @property
    def alpha(self) -> float:
        """Effective MixP mix coefficient in [0, 1]."""
        if self.spec.method != "MixP":
            raise AttributeError("alpha is only defined for MixP aggregation")
        return float(torch.sigmoid(self._alpha_raw))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ValueError(f"expected (N, C, H, W) maps, got shape {tuple(x.shape)}")
        method = self.spec.method
        if method == "GAP":
            return x.mean(dim=(2, 3))
        if method == "GMP":
            return x.amax(dim=(2, 3))
        if method == "MixP":
            a = torch.sigmoid(self._alpha_raw)
            return a * x.amax(dim=(2, 3)) + (1.0 - a) * x.mean(dim=(2, 3))
        r = self.spec.r
        n_pixels = x.shape[2] * x.shape[3]
        # logsumexp is internally max-shifted; subtract log(S) to get the mean.
        return (torch.logsumexp(r * x, dim=(2, 3)) - float(np.log(n_pixels))) / r

    def extra_repr(self) -> str:
        if self.spec.method == "LSE":
            return f"method=LSE, r={self.spec.r}"
        return f"method={self.spec.method}"
