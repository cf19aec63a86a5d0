"""Segmentation losses for the two stages.

First stage: squared-denominator soft Dice plus binary cross-entropy,

    L = -(2 sum p g + eps) / (sum p^2 + sum g^2 + eps) - mean[g log p + (1-g) log(1-p)]

Second stage: per-pixel squared error plus binary cross-entropy,

    L = mean[(g - p)^2 - (g log p + (1-g) log(1-p))]

Sums run over every pixel handed in (a whole batch is one pixel set).
Probabilities are clamped to [1e-12, 1 - 1e-12] inside the logarithms only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import LossHead
from .errors import EmptyInput, ProbabilityOutOfRange

DICE_EPS = 1e-6
PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class LossValue:
    total: float
    components: dict = field(default_factory=dict)


def _check(p, g):
    p = np.asarray(p, dtype=np.float64).ravel()
    g = np.asarray(g, dtype=np.float64).ravel()
    if p.size == 0 or g.size == 0:
        raise EmptyInput("loss needs at least one pixel")
    if p.size != g.size:
        raise EmptyInput(f"prediction has {p.size} pixels, target has {g.size}")
    if not ((p >= 0) & (p <= 1)).all():
        raise ProbabilityOutOfRange("predicted probabilities must lie in [0, 1]")
    if not ((g >= 0) & (g <= 1)).all():
        raise ProbabilityOutOfRange("targets must lie in [0, 1]")
    return p, g


def _bce_terms(p, g):
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return g * np.log(pc) + (1.0 - g) * np.log1p(-pc)


def loss_gsm(p, g) -> LossValue:
    p, g = _check(p, g)
    inter = math.fsum(p * g)
    denom = math.fsum(p * p) + math.fsum(g * g)
    dice = -(2.0 * inter + DICE_EPS) / (denom + DICE_EPS)
    ce = -math.fsum(_bce_terms(p, g)) / p.size
    return LossValue(dice + ce, {"dice_term": dice, "ce_term": ce})


def loss_lrm(p, g) -> LossValue:
    p, g = _check(p, g)
    mse = math.fsum((g - p) ** 2) / p.size
    ce = -math.fsum(_bce_terms(p, g)) / p.size
    return LossValue(mse + ce, {"mse_term": mse, "ce_term": ce})


def _bce_grad(p, g):
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    return -(g / pc - (1.0 - g) / (1.0 - pc)) * inside / p.size


class _ClampKinks:
    def kinks(self, p):
        return (p <= PROB_CLAMP) | (p >= 1.0 - PROB_CLAMP)


class GsmLoss(_ClampKinks, LossHead):
    """Graph head for the first-stage loss."""

    name = "gsm_dice_ce"

    def value(self, pred, target):
        return loss_gsm(pred, target).total

    def grad(self, pred, target):
        p = np.asarray(pred, dtype=np.float64)
        g = np.asarray(target, dtype=np.float64)
        inter = math.fsum((p * g).ravel())
        denom = math.fsum((p * p).ravel()) + math.fsum((g * g).ravel())
        num = 2.0 * inter + DICE_EPS
        den = denom + DICE_EPS
        d_dice = -(2.0 * g * den - num * 2.0 * p) / (den * den)
        return d_dice + _bce_grad(p, g)


class LrmLoss(_ClampKinks, LossHead):
    """Graph head for the second-stage loss."""

    name = "lrm_mse_ce"

    def value(self, pred, target):
        return loss_lrm(pred, target).total

    def grad(self, pred, target):
        p = np.asarray(pred, dtype=np.float64)
        g = np.asarray(target, dtype=np.float64)
        return -2.0 * (g - p) / p.size + _bce_grad(p, g)


def head_for(kind: str) -> LossHead:
    kind = kind.upper()
    if kind == "GSM":
        return GsmLoss()
    if kind == "LRM":
        return LrmLoss()
    raise ValueError(f"unknown module kind {kind!r}")
