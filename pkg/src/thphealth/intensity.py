"""Type-specific conditional intensities, the point-process likelihood and
the auxiliary type / time losses.

The functions here work on plain numpy values for a single history state or
sequence. :mod:`thphealth.model` evaluates the same quantities batched on the
autodiff graph; the two are checked against each other in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import softplus_np
from .data import ClassWeights, EventSequence


@dataclass(frozen=True)
class IntensityHead:
    """lambda_k(s) = softplus_beta(w_k . h + b_k + alpha_k * s)."""

    w: np.ndarray  # (K, d)
    b: np.ndarray  # (K,)
    alpha: np.ndarray  # (K,)
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "w", np.atleast_2d(np.asarray(self.w, dtype=np.float64)))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=np.float64).reshape(-1))
        if not self.beta > 0:
            raise ValueError("softplus temperature beta must be positive")
        K = self.w.shape[0]
        if self.b.shape != (K,) or self.alpha.shape != (K,):
            raise ValueError("intensity head shapes are inconsistent")

    @property
    def K(self) -> int:
        return self.w.shape[0]

    def preactivation(self, h) -> np.ndarray:
        return self.w @ np.asarray(h, dtype=np.float64) + self.b


@dataclass(frozen=True)
class TimeHead:
    """Linear read-out of log(1 + gap): v . h + c."""

    v: np.ndarray
    c: float

    def predict_log_gap(self, h) -> float:
        return float(np.dot(self.v, h) + self.c)


@dataclass(frozen=True)
class LossBreakdown:
    nll: float
    type_ce: float
    time_mse: float
    total: float


def _check_s(s):
    s_arr = np.asarray(s, dtype=np.float64)
    if np.any(s_arr < 0) or np.any(s_arr > 1):
        raise ValueError("within-interval time s must lie in [0, 1]")
    return s_arr


def intensities(h, s, head: IntensityHead) -> np.ndarray:
    """All K intensities; ``s`` may be an array, giving shape s.shape + (K,)."""
    s = _check_s(s)
    pre = head.preactivation(h)
    return softplus_np(pre + head.alpha * s[..., None], head.beta)


def intensity_k(h, s, head: IntensityHead, k: int) -> float:
    return float(intensities(h, s, head)[..., k])


def total_intensity(h, s, head: IntensityHead):
    out = intensities(h, s, head).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def type_probabilities(h, s, head: IntensityHead) -> np.ndarray:
    lam = intensities(h, s, head)
    return lam / lam.sum(axis=-1, keepdims=True)


def trapezoid_weights(n_quad: int) -> np.ndarray:
    """Weights of the composite trapezoid rule on n_quad+1 points of [0, 1]."""
    if n_quad < 2:
        raise ValueError("n_quad must be at least 2")
    w = np.full(n_quad + 1, 1.0 / n_quad)
    w[0] = w[-1] = 0.5 / n_quad
    return w


def compensator(h, delta: float, head: IntensityHead, n_quad: int = 32) -> float:
    """Integral of the total intensity over an interval of length ``delta``.

    Within the interval the intensity is a function of s = elapsed/delta, so
    the integral is delta * int_0^1 lambda(s) ds, evaluated by the composite
    trapezoid rule.
    """
    if not delta > 0:
        raise ValueError("interval length must be positive")
    w = trapezoid_weights(n_quad)
    s = np.linspace(0.0, 1.0, n_quad + 1)
    return float(delta * np.dot(w, total_intensity(h, s, head)))


def sequence_nll(seq: EventSequence, hiddens, head: IntensityHead, n_quad: int = 32) -> float:
    """Negative log-likelihood summed over events 2..n.

    Event j is scored with history state h_{j-1}: its type intensity at s = 1
    minus the compensator over (t_{j-1}, t_j].
    """
    n = len(seq)
    if n < 2:
        raise ValueError("sequence_nll needs at least 2 events")
    hiddens = np.asarray(hiddens, dtype=np.float64)
    total = 0.0
    for j in range(1, n):
        h = hiddens[j - 1]
        lam_event = intensity_k(h, 1.0, head, int(seq.types[j]))
        total += math.log(lam_event) - compensator(h, float(seq.times[j] - seq.times[j - 1]), head, n_quad)
    return -total


def weighted_ce(p, k_true: int, w: ClassWeights | np.ndarray) -> float:
    weights = w.as_array() if isinstance(w, ClassWeights) else np.asarray(w, dtype=np.float64)
    pk = float(np.asarray(p)[k_true])
    if not pk > 0:
        raise ValueError("true-class probability must be positive")
    return -float(weights[k_true]) * math.log(pk)


def time_mse(pred: float, dt_true: float) -> float:
    if dt_true < 0:
        raise ValueError("true gap must be non-negative")
    return (pred - math.log1p(dt_true)) ** 2


def total_loss(nll, type_ce, time_mse, gamma_type: float = 1.0, gamma_time: float = 0.1) -> LossBreakdown:
    """Average per-event loss components and combine them.

    Each argument is a sequence of per-event values (one per prediction
    position); scalars are treated as a single event.
    """
    if gamma_type < 0 or gamma_time < 0:
        raise ValueError("loss weights must be non-negative")
    parts = [np.atleast_1d(np.asarray(x, dtype=np.float64)) for x in (nll, type_ce, time_mse)]
    if any(p.size == 0 for p in parts):
        raise ValueError("empty batch")
    if len({p.size for p in parts}) != 1:
        raise ValueError("loss components must cover the same events")
    a, b, c = (float(p.mean()) for p in parts)
    return LossBreakdown(a, b, c, a + gamma_type * b + gamma_time * c)


def sequence_losses(seq: EventSequence, hiddens, head: IntensityHead, time_head: TimeHead, weights, n_quad=32):
    """Per-event (nll, weighted ce, time mse) arrays for one sequence.

    Type probabilities for the cross-entropy are taken at s = 0, matching
    how predictions are made.
    """
    hiddens = np.asarray(hiddens, dtype=np.float64)
    nll, ce, mse = [], [], []
    for j in range(1, len(seq)):
        h = hiddens[j - 1]
        dt = float(seq.times[j] - seq.times[j - 1])
        k = int(seq.types[j])
        nll.append(compensator(h, dt, head, n_quad) - math.log(intensity_k(h, 1.0, head, k)))
        ce.append(weighted_ce(type_probabilities(h, 0.0, head), k, weights))
        mse.append(time_mse(time_head.predict_log_gap(h), dt))
    return np.array(nll), np.array(ce), np.array(mse)
