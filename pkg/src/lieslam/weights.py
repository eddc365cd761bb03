"""Adaptive factor weighting from a sensor's deviation score."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class WeightParams:
    tau: float = 0.0
    kappa: float = 20.0
    w_min: float = 0.05

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if not 0 < self.w_min <= 1:
            raise ValueError("w_min must lie in (0, 1]")


def weight_from_deviation(score: float, params: WeightParams) -> float:
    """Full weight up to ``tau``, exponential decay beyond it, floored at ``w_min``."""
    if score < 0:
        raise ValueError(f"deviation score must be nonnegative, got {score}")
    if score <= params.tau:
        return 1.0
    return max(params.w_min, math.exp(-params.kappa * (score - params.tau)))
