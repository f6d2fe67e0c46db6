"""Image-level quality scoring and routing to the predictor heads.

Both scores are computed from the calibration maps' detached values; routing
is a hard, non-differentiable decision, so no gradients ever flow through
this module. Scoring is pure and stateless: the same maps always produce
the same verdict.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import EPS
from .losses import CalibrationSet

HIGH_QUALITY = "high"
LOW_QUALITY = "low"


def _maps(calib):
    if isinstance(calib, CalibrationSet):
        return np.asarray(calib.s.value, dtype=np.float64)
    maps = np.asarray(calib, dtype=np.float64)
    if maps.ndim != 3:
        raise ValueError(f"expected (M,H,W) calibration maps, got {maps.shape}")
    return maps


@dataclass(frozen=True)
class QualityVerdict:
    u_a: float
    u_b: float
    tau_a: float
    tau_b: float
    route: str

    @property
    def is_high_quality(self):
        return self.route == HIGH_QUALITY


def confidence_score(calib):
    """Entropy-style confidence of the mean calibration map.

    u_a = sum_i(-s*_i * ln s*_i) / (sum_i s*_i + EPS), with 0*ln(0) = 0.
    Zero exactly when every s*_i lies in {0, 1}; large when the mean map is
    full of mid-range values.
    """
    maps = _maps(calib)
    s_star = maps.mean(axis=0)
    positive = s_star > 0.0
    num = -np.sum(s_star[positive] * np.log(s_star[positive]))
    return float(num / (s_star.sum() + EPS) + 0.0)  # +0.0 normalizes -0.0


def agreement_score(calib):
    """Scaled cross-source variance of the calibration maps.

    u_b = 4M * sum_i Var(s_i^1..s_i^M) / (sum_m sum_i s_i^m + EPS), with the
    population variance over the M values at each pixel. Zero exactly when
    all maps agree pixelwise.
    """
    maps = _maps(calib)
    m = maps.shape[0]
    if m < 2:
        raise ValueError(f"agreement needs at least 2 sources, got {m}")
    var = maps.var(axis=0)  # population variance (divide by M)
    return float(4.0 * m * var.sum() / (maps.sum() + EPS))


def route_sample(calib, tau_a, tau_b):
    """High quality iff u_a < tau_a AND u_b < tau_b; deterministic."""
    for name, tau in (("tau_a", tau_a), ("tau_b", tau_b)):
        if not 0.0 < tau <= 1.0:
            raise ValueError(f"{name} must be in (0, 1], got {tau}")
    u_a = confidence_score(calib)
    u_b = agreement_score(calib)
    route = HIGH_QUALITY if (u_a < tau_a and u_b < tau_b) else LOW_QUALITY
    return QualityVerdict(u_a=u_a, u_b=u_b, tau_a=tau_a, tau_b=tau_b, route=route)
