"""Walk through the uncertainty-weighted losses and the quality gate.

The per-pixel reliability maps sigma act on the losses in two ways: the
factor exp(-sigma) discounts unreliable pixels, and the additive sigma/2
term stops the network from declaring everything unreliable. Calibration
maps |y - sigma| then estimate the latent truth per source; their entropy
and cross-source variance grade the whole sample.
"""

import math

import numpy as np

from multirater import autodiff as ad
from multirater.losses import (
    calibration_maps,
    consistency_loss,
    dice_loss,
    weighted_ce,
    weighted_dice,
)
from multirater.quality import agreement_score, confidence_score, route_sample

LN2 = math.log(2.0)

# One pixel, one source: watch the CE term react to sigma
print("weighted CE on a single pixel (p=0.5, y=1):")
for sigma in (0.0, 0.25, 0.5, LN2, 0.99):
    tape = ad.Tape()
    val = weighted_ce(tape.leaf(np.full((1, 1, 1), 0.5)), np.ones((1, 1, 1)),
                      tape.leaf(np.full((1, 1, 1), sigma))).item()
    print(f"  sigma={sigma:.3f} -> loss {val:.4f} "
          f"(CE factor {math.exp(-sigma):.3f}, floor {sigma / 2:.3f})")

# The weighted Dice reduces to plain Dice when sigma is zero
rng = np.random.default_rng(1)
p = rng.uniform(0.1, 0.9, (1, 8, 8))
y = (rng.random((1, 8, 8)) > 0.5).astype(float)
tape = ad.Tape()
wd = weighted_dice(tape.leaf(p), y, tape.leaf(np.zeros((1, 8, 8)))).item()
tape = ad.Tape()
d = dice_loss(tape.leaf(p), y[0]).item()
print(f"\nweighted Dice with sigma=0 equals Dice: {wd:.6f} == {d:.6f}")

# Calibration maps: two sources that fully contradict each other
y2 = np.stack([np.ones((8, 8)), np.zeros((8, 8))])
tape = ad.Tape()
calib = calibration_maps(y2, tape.leaf(np.zeros((2, 8, 8))))
print(f"\ncontradicting sources: consistency loss = "
      f"{consistency_loss(calib).item():.4f} (0.25 = maximal for M=2)")
print(f"confidence score u_a = {confidence_score(calib):.4f} (ln 2 = worst)")
print(f"agreement  score u_b = {agreement_score(calib):.4f} (2.0 = worst)")

# The quality gate: a sample is high quality iff both scores clear their
# thresholds; everything else trains the auxiliary head instead
for maps, label in (
    (np.stack([np.ones((8, 8)), np.ones((8, 8))]), "perfect agreement"),
    (np.stack([np.full((8, 8), 0.5)] * 2), "wholly uncertain"),
    (y2, "full contradiction"),
):
    v = route_sample(maps, tau_a=0.2, tau_b=0.2)
    print(f"{label:20s}: u_a={v.u_a:.3f} u_b={v.u_b:.3f} -> {v.route}")
