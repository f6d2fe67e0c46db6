"""Training objectives for learning from multiple noisy annotations.

All losses are differentiable graphs over autodiff arrays, jointly
differentiable w.r.t. the segmentation network (through the prediction) and
the uncertainty estimator (through the reliability maps). Conventions:

* natural logarithm throughout; probabilities are clamped to
  [EPS, 1-EPS] before any log, and 0*log(0) is treated as 0 downstream;
* denominators are clamped below by EPS (guards the all-zero corner without
  perturbing the documented hand values);
* per-image pixel count is N, source count is M.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .autodiff import EPS
from .models import UncertaintySet


def sigmoid_ramp(alpha_max=1.0, slope=10.0):
    """Monotone S-shaped schedule over the training-step fraction t in [0,1]."""
    def ramp(t):
        return float(alpha_max * expit(slope * (2.0 * t - 1.0)))
    return ramp


@dataclass
class LossWeights:
    lam: float = 1.0          # weight of the reliability-weighted Dice term
    alpha_max: float = 1.0    # ceiling of the consistency-term schedule
    alpha_ramp: object = None  # t in [0,1] -> alpha in [0, alpha_max]

    def __post_init__(self):
        if self.alpha_ramp is None:
            self.alpha_ramp = sigmoid_ramp(self.alpha_max)
        ts = np.linspace(0.0, 1.0, 101)
        vals = np.array([self.alpha_ramp(t) for t in ts])
        if np.any(np.diff(vals) < -1e-12):
            raise ValueError("alpha_ramp must be nondecreasing")
        if self.alpha_max > 0.0:
            if vals[0] > 0.05 * self.alpha_max:
                raise ValueError("alpha_ramp(0) must be <= 0.05 * alpha_max")
            if vals[-1] < 0.95 * self.alpha_max:
                raise ValueError("alpha_ramp(1) must be >= 0.95 * alpha_max")


@dataclass
class CalibrationSet:
    """Per-source latent-truth estimates |y - sigma| and their mean map."""
    s: object       # DiffArray (M,H,W)
    s_star: object  # DiffArray (H,W)

    def maps(self):
        return self.s.value

    def mean_map(self):
        return self.s_star.value


def _sigma_node(sigma):
    node = sigma.sigma if isinstance(sigma, UncertaintySet) else sigma
    if node.value.ndim != 3:
        raise ValueError(f"expected (M,H,W) uncertainty maps, got {node.shape}")
    return node


def _pred_node(pred, spatial):
    if pred.value.shape[-2:] != spatial:
        raise ValueError(
            f"prediction {pred.value.shape} does not match annotations {spatial}"
        )
    if pred.value.ndim == 2:
        return pred
    if pred.value.ndim == 3 and pred.value.shape[0] == 1:
        return pred
    raise ValueError(f"expected (H,W) or (1,H,W) prediction, got {pred.value.shape}")


def _annotations(annotations, spatial=None):
    y = np.asarray(annotations, dtype=np.float64)
    if y.ndim != 3 or y.shape[0] < 1:
        raise ValueError(f"expected (M,H,W) annotations with M >= 1, got {y.shape}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("annotations must be binary {0,1}")
    if spatial is not None and y.shape[1:] != spatial:
        raise ValueError(f"annotations {y.shape} do not match {spatial}")
    return y


def binary_ce_map(pred, target):
    """Elementwise -[y*log(p) + (1-y)*log(1-p)], with p clamped."""
    p = ad.clip(pred, EPS, 1.0 - EPS)
    return -(ad.log(p) * target + ad.log(1.0 - p) * (1.0 - target))


def weighted_ce(pred, annotations, sigma):
    """Reliability-weighted cross entropy over all sources.

    (1/(N*M)) * sum_m sum_i [ exp(-sigma_im) * CE(p_i, y_im) + sigma_im / 2 ]
    """
    sig = _sigma_node(sigma)
    y = _annotations(annotations, sig.value.shape[1:])
    m = y.shape[0]
    n = y.shape[1] * y.shape[2]
    p = _pred_node(pred, y.shape[1:])
    ce = binary_ce_map(p, y)                      # (M,H,W) via broadcast
    weighted = ad.exp(-sig) * ce + 0.5 * sig
    return ad.reduce_sum(weighted) * (1.0 / (n * m))


def dice_loss(pred, target):
    """Sum_i (p_i - y_i)^2 / max(sum p^2 + sum y^2, EPS)."""
    y = np.asarray(target, dtype=np.float64)
    p = _pred_node(pred, y.shape[-2:])
    yv = y.reshape(p.value.shape[-2:]) if y.ndim == 2 else y
    num = ad.reduce_sum(ad.square(p - yv))
    denom = ad.reduce_sum(ad.square(p)) + float(np.sum(yv * yv))
    return ad.div(num, ad.clip(denom, EPS, np.inf))


def weighted_dice(pred, annotations, sigma):
    """Reliability-weighted Dice over all sources.

    (1/M) * sum_m [ sum_i exp(-sigma_im)*(p_i-y_im)^2 / (sum p^2 + sum y_m^2)
                    + sum_i sigma_im / (2N) ]
    """
    sig = _sigma_node(sigma)
    y = _annotations(annotations, sig.value.shape[1:])
    m = y.shape[0]
    n = y.shape[1] * y.shape[2]
    p = _pred_node(pred, y.shape[1:])
    sq_err = ad.square(ad.sub(p, y))              # (M,H,W)
    num = ad.reduce_sum(ad.exp(-sig) * sq_err, axes=(1, 2))     # (M,)
    p_sq = ad.reduce_sum(ad.square(p))                            # scalar
    y_sq = (y * y).sum(axis=(1, 2))                               # (M,) constant
    denom = ad.clip(ad.add(p_sq, y_sq), EPS, np.inf)              # (M,)
    per_source = ad.div(num, denom)
    reg = ad.reduce_sum(sig) * (1.0 / (2.0 * n))
    return (ad.reduce_sum(per_source) + reg) * (1.0 / m)


def calibration_maps(annotations, sigma):
    """s_im = |y_im - sigma_im| per source, plus the mean map over sources."""
    sig = _sigma_node(sigma)
    y = _annotations(annotations, sig.value.shape[1:])
    s = ad.absolute(ad.sub(y, sig))
    s_star = ad.reduce_mean(s, axes=(0,))
    return CalibrationSet(s=s, s_star=s_star)


def consistency_loss(calib):
    """(1/(M*N)) * sum_m sum_i (s_im - s*_i)^2 — zero iff all maps agree."""
    s = calib.s
    m, h, w = s.value.shape
    diff = ad.sub(s, calib.s_star)
    return ad.reduce_sum(ad.square(diff)) * (1.0 / (m * h * w))


@dataclass
class LossParts:
    weighted_ce: float
    weighted_dice: float
    consistency: float
    alpha: float
    total: float


def total_loss(pred, annotations, sigma, weights, step_fraction):
    """Combined objective: W-CE + lam * W-Dice + alpha(t) * consistency.

    Returns (scalar DiffArray, LossParts with detached component values).
    """
    if not 0.0 <= step_fraction <= 1.0:
        raise ValueError(f"step_fraction must be in [0,1], got {step_fraction}")
    alpha = float(weights.alpha_ramp(step_fraction))
    l_ce = weighted_ce(pred, annotations, sigma)
    l_dice = weighted_dice(pred, annotations, sigma)
    l_cons = consistency_loss(calibration_maps(annotations, sigma))
    total = l_ce + weights.lam * l_dice + alpha * l_cons
    parts = LossParts(
        weighted_ce=l_ce.item(),
        weighted_dice=l_dice.item(),
        consistency=l_cons.item(),
        alpha=alpha,
        total=total.item(),
    )
    return total, parts


def plain_ce_dice(pred, target, lam=1.0):
    """Mean binary CE + lam * Dice against one fused mask (baseline loss)."""
    y = np.asarray(target, dtype=np.float64)
    p = _pred_node(pred, y.shape[-2:])
    ce = ad.reduce_mean(binary_ce_map(p, y.reshape(p.value.shape)))
    return ce + lam * dice_loss(pred, target)
