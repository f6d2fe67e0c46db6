import math

import numpy as np
import pytest

from multirater import autodiff as ad
from multirater import losses
from multirater.losses import (
    LossWeights,
    calibration_maps,
    consistency_loss,
    dice_loss,
    sigmoid_ramp,
    total_loss,
    weighted_ce,
    weighted_dice,
)
from oracles import finite_diff_grad, rel_err

LN2 = math.log(2.0)


def nodes(pred, sigma):
    tape = ad.Tape()
    return tape, tape.leaf(pred), tape.leaf(sigma)


# -- weighted cross entropy ---------------------------------------------------

def test_weighted_ce_zero_sigma_reduces_to_mean_ce():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(1, 6, 6))
    y = (rng.random((3, 6, 6)) > 0.5).astype(float)
    tape, pn, sn = nodes(p, np.zeros((3, 6, 6)))
    got = weighted_ce(pn, y, sn).item()
    pc = np.clip(p, ad.EPS, 1 - ad.EPS)
    plain = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()
    assert got == pytest.approx(plain, abs=1e-12)


def test_weighted_ce_single_pixel_hand_values():
    # sigma = 0: plain -ln(0.5)
    tape, pn, sn = nodes(np.array([[[0.5]]]), np.zeros((1, 1, 1)))
    got = weighted_ce(pn, np.ones((1, 1, 1)), sn).item()
    assert got == pytest.approx(-math.log(0.5), abs=1e-9)
    # sigma = ln 2: 0.5 * 0.6931 + 0.3466 = 0.6931
    tape, pn, sn = nodes(np.array([[[0.5]]]), np.full((1, 1, 1), LN2))
    got = weighted_ce(pn, np.ones((1, 1, 1)), sn).item()
    assert got == pytest.approx(LN2, abs=1e-9)


def test_weighted_ce_rejects_empty_sources():
    tape = ad.Tape()
    pn = tape.leaf(np.full((1, 2, 2), 0.5))
    sn = tape.leaf(np.zeros((0, 2, 2)))
    with pytest.raises(ValueError, match="M >= 1"):
        weighted_ce(pn, np.zeros((0, 2, 2)), sn)


def test_weighted_ce_downweights_monotonically():
    # with p, y fixed, the CE factor exp(-sigma) strictly decreases in sigma
    y = np.ones((1, 1, 1))
    p = np.array([[[0.3]]])
    vals = []
    for s in np.linspace(0.01, 0.99, 9):
        tape, pn, sn = nodes(p, np.full((1, 1, 1), s))
        ce_factor = weighted_ce(pn, y, sn).item() - s / 2.0
        vals.append(ce_factor)
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_weighted_ce_regularizer_floor():
    # as sigma -> 1 the per-pixel term stays above sigma/2 = 1/2
    tape, pn, sn = nodes(np.array([[[0.999]]]), np.full((1, 1, 1), 0.999999))
    got = weighted_ce(pn, np.ones((1, 1, 1)), sn).item()
    assert got >= 0.5 - 1e-9


# -- dice ---------------------------------------------------------------------

def test_dice_loss_identity_and_total_miss():
    y = np.zeros((4, 4))
    y[1:3, 1:3] = 1.0
    tape = ad.Tape()
    assert dice_loss(tape.leaf(y), y).item() == pytest.approx(0.0, abs=1e-12)

    tape = ad.Tape()
    ones = tape.leaf(np.ones((3, 3)))
    got = dice_loss(ones, np.zeros((3, 3))).item()
    assert got == pytest.approx(1.0, abs=1e-12)


def test_dice_loss_hand_value():
    tape = ad.Tape()
    p = tape.leaf(np.full((2, 2), 0.5))
    got = dice_loss(p, np.ones((2, 2))).item()
    assert got == pytest.approx(0.2, abs=1e-9)


def test_dice_equals_one_minus_overlap_form():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.0, 1.0, size=(5, 5))
    y = (rng.random((5, 5)) > 0.4).astype(float)
    tape = ad.Tape()
    got = dice_loss(tape.leaf(p), y).item()
    alt = 1.0 - 2.0 * (p * y).sum() / ((p * p).sum() + (y * y).sum())
    assert got == pytest.approx(alt, abs=1e-10)


# -- weighted dice ------------------------------------------------------------

def test_weighted_dice_reduces_to_dice():
    rng = np.random.default_rng(2)
    p = rng.uniform(0.05, 0.95, size=(1, 4, 4))
    y = (rng.random((1, 4, 4)) > 0.5).astype(float)
    tape, pn, sn = nodes(p, np.zeros((1, 4, 4)))
    wd = weighted_dice(pn, y, sn).item()
    tape2 = ad.Tape()
    d = dice_loss(tape2.leaf(p), y[0]).item()
    assert wd == pytest.approx(d, abs=1e-12)


def test_weighted_dice_perfect_prediction_zero():
    y = np.zeros((2, 4, 4))
    y[:, 1:3, 1:3] = 1.0
    tape, pn, sn = nodes(y[0].reshape(1, 4, 4), np.zeros((2, 4, 4)))
    assert weighted_dice(pn, y, sn).item() == pytest.approx(0.0, abs=1e-12)


def test_weighted_dice_hand_value():
    # M=1, N=4, p=0.5, y=1, sigma=ln2 -> 0.5*0.2 + ln2/2
    tape, pn, sn = nodes(np.full((1, 2, 2), 0.5), np.full((1, 2, 2), LN2))
    got = weighted_dice(pn, np.ones((1, 2, 2)), sn).item()
    assert got == pytest.approx(0.5 * 0.2 + LN2 / 2.0, abs=1e-9)


# -- calibration + consistency -------------------------------------------------

def test_calibration_map_hand_values():
    y = np.stack([np.ones((2, 2)), np.zeros((2, 2))])
    sigma = np.stack([np.zeros((2, 2)), np.zeros((2, 2))])
    tape = ad.Tape()
    calib = calibration_maps(y, tape.leaf(sigma))
    assert np.all(calib.maps()[0] == 1.0)
    assert np.all(calib.maps()[1] == 0.0)
    assert np.all(calib.mean_map() == 0.5)

    tape = ad.Tape()
    calib = calibration_maps(
        np.ones((1, 1, 1)), tape.leaf(np.full((1, 1, 1), 0.3)))
    assert calib.maps()[0, 0, 0] == pytest.approx(0.7, abs=1e-12)


def test_consistency_loss_degenerate_cases():
    tape = ad.Tape()
    sigma = tape.leaf(np.random.default_rng(3).uniform(0.1, 0.9, (1, 3, 3)))
    calib = calibration_maps((np.random.default_rng(4).random((1, 3, 3)) > 0.5
                              ).astype(float), sigma)
    assert consistency_loss(calib).item() == pytest.approx(0.0, abs=1e-15)

    y = np.zeros((3, 2, 2))
    tape = ad.Tape()
    calib = calibration_maps(y, tape.leaf(np.full((3, 2, 2), 0.25)))
    assert consistency_loss(calib).item() == pytest.approx(0.0, abs=1e-15)


def test_consistency_loss_hand_value():
    # s1 = 1, s2 = 0 -> s* = 0.5 -> loss = 0.25
    y = np.stack([np.ones((4, 4)), np.zeros((4, 4))])
    tape = ad.Tape()
    calib = calibration_maps(y, tape.leaf(np.zeros((2, 4, 4))))
    assert consistency_loss(calib).item() == pytest.approx(0.25, abs=1e-9)


# -- schedule ------------------------------------------------------------------

def test_sigmoid_ramp_shape():
    ramp = sigmoid_ramp(1.0)
    ts = np.linspace(0, 1, 50)
    vals = [ramp(t) for t in ts]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    assert vals[0] <= 0.05
    assert vals[-1] >= 0.95
    assert ramp(0.5) == pytest.approx(0.5)


def test_loss_weights_validate_ramp():
    with pytest.raises(ValueError, match="nondecreasing"):
        LossWeights(alpha_ramp=lambda t: 1.0 - t)
    with pytest.raises(ValueError, match="alpha_ramp\\(0\\)"):
        LossWeights(alpha_ramp=lambda t: 0.5 + 0.5 * t)
    LossWeights()  # defaults valid


# -- combined objective ---------------------------------------------------------

def test_total_loss_component_isolation():
    rng = np.random.default_rng(5)
    p = rng.uniform(0.1, 0.9, (1, 4, 4))
    y = (rng.random((2, 4, 4)) > 0.5).astype(float)
    s = rng.uniform(0.1, 0.9, (2, 4, 4))

    tape, pn, sn = nodes(p, s)
    weights = LossWeights(lam=0.0, alpha_max=0.0, alpha_ramp=lambda t: 0.0)
    got, parts = total_loss(pn, y, sn, weights, 0.5)
    tape2, pn2, sn2 = nodes(p, s)
    assert got.item() == pytest.approx(weighted_ce(pn2, y, sn2).item(), abs=1e-12)
    assert parts.alpha == 0.0


def test_total_loss_frozen_sigma_single_source_is_ce_plus_dice():
    rng = np.random.default_rng(6)
    p = rng.uniform(0.1, 0.9, (1, 4, 4))
    y = (rng.random((1, 4, 4)) > 0.5).astype(float)
    tape, pn, sn = nodes(p, np.zeros((1, 4, 4)))
    weights = LossWeights(lam=1.0)
    got, _ = total_loss(pn, y, sn, weights, 0.0)

    pc = np.clip(p, ad.EPS, 1 - ad.EPS)
    ce = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()
    dice = ((p - y) ** 2).sum() / ((p * p).sum() + (y * y).sum())
    # M=1 consistency term is exactly zero, so alpha's value is irrelevant
    assert got.item() == pytest.approx(ce + dice, abs=1e-12)


def test_total_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    p_logit = rng.normal(size=(1, 4, 4))
    s_logit = rng.normal(size=(2, 4, 4))
    y = (rng.random((2, 4, 4)) > 0.5).astype(float)
    weights = LossWeights()

    def value(pl, sl):
        tape = ad.Tape()
        pred = ad.sigmoid(tape.leaf(pl))
        sigma = ad.sigmoid(tape.leaf(sl))
        out, _ = total_loss(pred, y, sigma, weights, 0.5)
        return tape, out

    tape, out = value(p_logit, s_logit)
    pred_leaf = tape._nodes[0]
    sigma_leaf = tape._nodes[2]
    tape.backward(out)
    g_p = finite_diff_grad(lambda v: value(v, s_logit)[1].item(), p_logit)
    g_s = finite_diff_grad(lambda v: value(p_logit, v)[1].item(), s_logit)
    assert rel_err(pred_leaf.grad, g_p) <= 1e-6
    assert rel_err(sigma_leaf.grad, g_s) <= 1e-6


def test_total_loss_rejects_bad_step_fraction():
    tape, pn, sn = nodes(np.full((1, 2, 2), 0.5), np.zeros((1, 2, 2)))
    with pytest.raises(ValueError, match="step_fraction"):
        total_loss(pn, np.ones((1, 2, 2)), sn, LossWeights(), 1.5)


def test_plain_ce_dice_baseline_loss():
    rng = np.random.default_rng(8)
    p = rng.uniform(0.1, 0.9, (1, 4, 4))
    y = (rng.random((4, 4)) > 0.5).astype(float)
    tape = ad.Tape()
    got = losses.plain_ce_dice(tape.leaf(p), y, lam=1.0).item()
    pc = np.clip(p[0], ad.EPS, 1 - ad.EPS)
    ce = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()
    dice = ((p[0] - y) ** 2).sum() / ((p * p).sum() + (y * y).sum())
    assert got == pytest.approx(ce + dice, abs=1e-12)
