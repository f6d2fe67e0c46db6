"""Tour of the reverse-mode engine: tapes, gradients, and a sanity check.

Every model and loss in this package is built from the handful of array
operations shown here. A Tape records each operation as it executes;
backward() then replays the record in reverse, accumulating exact
gradients. We finish by cross-checking one gradient against central
finite differences.
"""

import numpy as np

from multirater import autodiff as ad

rng = np.random.default_rng(0)

# A tiny differentiable computation: y = sum(sigmoid(W (*) x)^2)
tape = ad.Tape()
x = tape.constant(rng.random((1, 6, 6)))        # inputs need no gradient
w = tape.leaf(rng.normal(size=(2, 1, 3, 3)))    # parameters do
feat = ad.sigmoid(ad.conv2d(x, w, stride=1, pad=1))
y = ad.reduce_sum(ad.square(feat))
print(f"forward value: {y.item():.6f}")

tape.backward(y)
print(f"gradient shape: {w.grad.shape}, ||dy/dW|| = {np.linalg.norm(w.grad):.6f}")

# Spot-check one entry with central finite differences
h = 1e-6
wv = w.value.copy()


def f(entry):
    t = ad.Tape()
    probe = wv.copy()
    probe[0, 0, 1, 1] = entry
    out = ad.reduce_sum(ad.square(ad.sigmoid(
        ad.conv2d(t.constant(x.value), t.leaf(probe), stride=1, pad=1))))
    return out.item()


center = wv[0, 0, 1, 1]
fd = (f(center + h) - f(center - h)) / (2 * h)
print(f"analytic dy/dW[0,0,1,1] = {w.grad[0, 0, 1, 1]:+.8f}")
print(f"finite-difference check = {fd:+.8f}")

print("\nGraphs are define-by-run; a new forward pass starts a new tape.")
print(f"nodes recorded on this tape: {len(tape._nodes)}")
