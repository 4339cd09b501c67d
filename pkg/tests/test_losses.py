"""Loss stack vs 64-bit dense-loop oracles and algebraic identities."""

import math

import numpy as np
import pytest

from asfseg.errors import UsageError
from asfseg.losses import (LossWeights, bce, dice_loss, loss_bin, loss_edge,
                           loss_ms, loss_total)
from asfseg.network import NetworkOutputs
from asfseg.volume import MaskSet
from conftest import random_binary

EPS = 1e-7


def bce_oracle(pred, target):
    """Dense loop, float64 accumulation."""
    p = pred.reshape(-1).astype(np.float64)
    t = target.reshape(-1).astype(np.float64)
    total = 0.0
    for pi, ti in zip(p, t):
        pi = min(max(pi, EPS), 1.0 - EPS)
        total += -(ti * math.log(pi) + (1.0 - ti) * math.log(1.0 - pi))
    return total / len(p)


def dice_oracle(pred, target, smooth=1e-6):
    p = pred.reshape(-1).astype(np.float64)
    t = target.reshape(-1).astype(np.float64)
    inter = sum(pi * ti for pi, ti in zip(p, t))
    return 1.0 - (2.0 * inter + smooth) / (sum(p) + sum(t) + smooth)


def test_bce_half_everywhere_is_ln2(rng):
    pred = np.full((8, 8), 0.5, np.float32)
    for target in (np.zeros((8, 8)), np.ones((8, 8)), random_binary(rng, (8, 8))):
        assert bce(pred, target.astype(np.float32)) == pytest.approx(math.log(2), abs=1e-6)


def test_bce_perfect_prediction_is_tiny(rng):
    t = random_binary(rng, (8, 8)).astype(np.float32)
    assert bce(t, t) <= 1e-6


def test_bce_matches_dense_oracle(rng):
    for _ in range(10):
        pred = rng.uniform(0.01, 0.99, (8, 8)).astype(np.float32)
        target = random_binary(rng, (8, 8)).astype(np.float32)
        assert bce(pred, target) == pytest.approx(bce_oracle(pred, target), abs=1e-6)


def test_bce_shape_mismatch():
    with pytest.raises(UsageError):
        bce(np.full((4, 4), 0.5, np.float32), np.zeros((4, 5), np.float32))


def test_dice_identical_is_near_zero(rng):
    t = random_binary(rng, (8, 8), 0.4).astype(np.float32)
    assert dice_loss(t, t) <= 1e-5


def test_dice_disjoint_is_near_one():
    pred = np.zeros((4, 4), np.float32)
    pred[:2] = 1.0
    target = np.zeros((4, 4), np.float32)
    target[2:] = 1.0
    assert dice_loss(pred, target) == pytest.approx(1.0, abs=1e-6)


def test_dice_half_overlap_is_one_third(rng):
    # |target| = 32, pred covers half of it: 1 - 32/48 = 1/3
    target = np.zeros((8, 8), np.float32)
    target[:4] = 1.0
    pred = np.zeros((8, 8), np.float32)
    pred[:2] = 1.0
    got = dice_loss(pred, target)
    assert got == pytest.approx(1.0 / 3.0, abs=1e-4)
    assert got == pytest.approx(dice_oracle(pred, target), abs=1e-6)


def test_dice_matches_dense_oracle(rng):
    for _ in range(10):
        pred = rng.uniform(0, 1, (8, 8)).astype(np.float32)
        target = random_binary(rng, (8, 8)).astype(np.float32)
        assert dice_loss(pred, target) == pytest.approx(dice_oracle(pred, target), abs=1e-6)


def test_loss_edge_lambda_algebra(rng):
    pred = rng.uniform(0.05, 0.95, (8, 8)).astype(np.float32)
    target = random_binary(rng, (8, 8)).astype(np.float32)
    assert loss_edge(pred, target, LossWeights(edge_bce=0, edge_dice=0)) == 0.0
    only_bce = loss_edge(pred, target, LossWeights(edge_bce=1, edge_dice=0))
    assert only_bce == pytest.approx(bce(pred, target), abs=1e-7)
    both = loss_edge(pred, target, LossWeights())
    assert both == pytest.approx(bce(pred, target) + dice_loss(pred, target), abs=1e-7)


def test_loss_edge_requires_edge_branch():
    with pytest.raises(UsageError):
        loss_edge(None, np.zeros((4, 4), np.float32))


def test_loss_ms_composition(rng):
    preds = [rng.uniform(0.05, 0.95, (8 // f, 8 // f)).astype(np.float32) for f in (1, 2, 4)]
    targets = [random_binary(rng, p.shape).astype(np.float32) for p in preds]
    assert loss_ms(preds, targets, LossWeights(scale=(0, 0, 0))) == 0.0
    got = loss_ms(preds, targets)
    expect = sum(bce(p, t) for p, t in zip(preds, targets))
    assert got == pytest.approx(expect, abs=1e-7)
    perfect = loss_ms(targets, targets)
    assert perfect <= 3e-6


def test_loss_ms_length_mismatch(rng):
    preds = [np.full((4, 4), 0.5, np.float32)] * 2
    with pytest.raises(UsageError):
        loss_ms(preds, preds + [np.full((4, 4), 0.5, np.float32)])


def test_loss_bin_examples(rng):
    t = random_binary(rng, (8, 8)).astype(np.float32)
    assert loss_bin(t, t) <= 2e-6
    target = np.zeros((4, 4), np.float32)
    target[:2] = 1.0
    pred = np.full((4, 4), 0.5, np.float32)
    expect = bce_oracle(pred, target) + dice_oracle(pred, target)
    assert loss_bin(pred, target) == pytest.approx(expect, abs=1e-6)


def test_loss_bin_monotone_toward_target(rng):
    target = random_binary(rng, (4, 4)).astype(np.float32)
    pred = rng.uniform(0.2, 0.8, (4, 4)).astype(np.float32)
    base = loss_bin(pred, target)
    for idx in ((0, 0), (1, 3), (3, 2)):
        improved = pred.copy()
        improved[idx] += (target[idx] - improved[idx]) * 0.5
        assert loss_bin(improved, target) <= base + 1e-9


def _random_bundle(rng, hw=8):
    outputs = NetworkOutputs(
        final=rng.uniform(0.05, 0.95, (hw, hw)).astype(np.float32),
        scales=[rng.uniform(0.05, 0.95, (hw // f, hw // f)).astype(np.float32)
                for f in (1, 2, 4)],
        edge=rng.uniform(0.05, 0.95, (hw, hw)).astype(np.float32),
    )
    gts = MaskSet(mask=random_binary(rng, (hw, hw)),
                  edge=random_binary(rng, (hw, hw)),
                  scales=[random_binary(rng, (hw // f, hw // f)) for f in (1, 2, 4)])
    return outputs, gts


def test_loss_total_additivity(rng):
    w = LossWeights(edge_bce=0.5, edge_dice=2.0, scale=(1.0, 0.25, 4.0))
    for _ in range(20):
        outputs, gts = _random_bundle(rng)
        report = loss_total(outputs, gts, w)
        assert report.l_total == pytest.approx(report.l_bin + report.l_edge + report.l_ms,
                                               abs=1e-12)
        expect_bin = bce(outputs.final, gts.mask) + dice_loss(outputs.final, gts.mask, w.dice_smooth)
        assert report.l_bin == pytest.approx(expect_bin, abs=1e-9)


def test_loss_total_disabled_branches_contribute_zero(rng):
    outputs, gts = _random_bundle(rng)
    outputs.edge = None
    outputs.scales = []
    report = loss_total(outputs, gts)
    assert report.l_edge == 0.0 and report.l_ms == 0.0
    assert report.l_total == report.l_bin


def test_loss_total_perfect_predictions(rng):
    gts = MaskSet(mask=random_binary(rng, (8, 8)),
                  edge=random_binary(rng, (8, 8)),
                  scales=[random_binary(rng, (8 // f, 8 // f)) for f in (1, 2, 4)])
    outputs = NetworkOutputs(final=gts.mask.astype(np.float32),
                             scales=[s.astype(np.float32) for s in gts.scales],
                             edge=gts.edge.astype(np.float32))
    assert loss_total(outputs, gts).l_total <= 1e-5


def test_losses_permutation_invariant(rng):
    pred = rng.uniform(0.05, 0.95, (6, 6)).astype(np.float32)
    target = random_binary(rng, (6, 6)).astype(np.float32)
    perm = rng.permutation(36)
    pred_p = pred.reshape(-1)[perm].reshape(6, 6)
    target_p = target.reshape(-1)[perm].reshape(6, 6)
    assert bce(pred, target) == pytest.approx(bce(pred_p, target_p), abs=1e-7)
    assert dice_loss(pred, target) == pytest.approx(dice_loss(pred_p, target_p), abs=1e-7)


def test_weights_validation():
    with pytest.raises(UsageError):
        LossWeights(edge_bce=-1.0)
    with pytest.raises(UsageError):
        LossWeights(scale=(1.0, 1.0))
