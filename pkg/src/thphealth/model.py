"""Parameter container for the Hawkes transformer and its batched forward
pass / training objective on the autodiff graph."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import ClassWeights, EventSequence, GapStats
from .encoder import EncoderOutput, EncoderParams, embed_arrays, encode_history
from .intensity import IntensityHead, LossBreakdown, TimeHead, trapezoid_weights


@dataclass
class ModelParams:
    encoder: EncoderParams
    w: Parameter  # (K, d)
    b: Parameter  # (K,)
    alpha: Parameter  # (K,)
    v: Parameter  # (d, 1)
    c: Parameter  # (1,)
    beta: float = 1.0

    @property
    def K(self) -> int:
        return self.encoder.K

    @property
    def d(self) -> int:
        return self.encoder.d

    def parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + [self.w, self.b, self.alpha, self.v, self.c]

    def named_parameters(self) -> dict[str, Parameter]:
        out = {}
        for p in self.parameters():
            if p.name in out:
                raise ValueError(f"duplicate parameter name {p.name}")
            out[p.name] = p
        return out

    def intensity_head(self) -> IntensityHead:
        return IntensityHead(self.w.data.copy(), self.b.data.copy(), self.alpha.data.copy(), self.beta)

    def time_head(self) -> TimeHead:
        return TimeHead(self.v.data[:, 0].copy(), float(self.c.data[0]))


@dataclass(frozen=True)
class Batch:
    """Right-padded sequences. ``pad_mask`` is True on padding slots."""

    patient_ids: tuple
    types: np.ndarray
    times: np.ndarray
    gaps: np.ndarray
    pad_mask: np.ndarray

    @property
    def lengths(self) -> np.ndarray:
        return (~self.pad_mask).sum(axis=1)

    @property
    def loss_mask(self) -> np.ndarray:
        """(B, n-1): position j predicts event j+1, which must be real."""
        return ~self.pad_mask[:, 1:]

    @property
    def n_loss_positions(self) -> int:
        return int(self.loss_mask.sum())

    @property
    def next_gaps(self) -> np.ndarray:
        return np.where(self.loss_mask, self.times[:, 1:] - self.times[:, :-1], 0.0)

    @property
    def next_types(self) -> np.ndarray:
        return np.where(self.loss_mask, self.types[:, 1:], 0)


def pad_batch(sequences: list[EventSequence]) -> Batch:
    if not sequences:
        raise ValueError("cannot pad an empty batch")
    n = max(len(s) for s in sequences)
    B = len(sequences)
    types = np.zeros((B, n), np.int64)
    times = np.zeros((B, n))
    gaps = np.zeros((B, n))
    pad = np.ones((B, n), bool)
    for i, s in enumerate(sequences):
        L = len(s)
        types[i, :L] = s.types
        times[i, :L] = s.times
        if L:
            times[i, L:] = s.times[-1]
        gaps[i, :L] = s.gaps
        pad[i, :L] = False
    return Batch(tuple(s.patient_id for s in sequences), types, times, gaps, pad)


def forward(params: ModelParams, batch: Batch, stats: GapStats, *, training=False, dropout=0.0, rng=None) -> EncoderOutput:
    X = embed_arrays(batch.types, batch.gaps, stats, params.encoder)
    return encode_history(X, params.encoder, batch.pad_mask, training=training, dropout=dropout, rng=rng)


def batch_loss(
    params: ModelParams,
    batch: Batch,
    stats: GapStats,
    weights: ClassWeights,
    *,
    n_quad=32,
    gamma_type=1.0,
    gamma_time=0.1,
    training=False,
    dropout=0.0,
    rng=None,
) -> tuple[Tensor, LossBreakdown]:
    """Per-event averaged objective nll + gamma_type * ce + gamma_time * mse."""
    count = batch.n_loss_positions
    if count == 0:
        raise ValueError("empty batch: no prediction positions")
    K = params.K
    out = forward(params, batch, stats, training=training, dropout=dropout, rng=rng)
    h = out.hidden[:, :-1, :]  # state before each predicted event
    B, m, d = h.shape
    mask = batch.loss_mask.astype(np.float64)
    dt = batch.next_gaps
    onehot = np.eye(K)[batch.next_types]

    pre = h @ params.w.transpose() + params.b  # (B, m, K)
    s = np.linspace(0.0, 1.0, n_quad + 1)[:, None]
    grid = pre.reshape((B, m, 1, K)) + params.alpha * s  # (B, m, Q+1, K)
    lam = ad.softplus(grid, params.beta)
    lam_total = lam.sum(axis=-1)  # (B, m, Q+1)
    comp = (lam_total * trapezoid_weights(n_quad)).sum(axis=-1) * dt
    lam_end = lam[:, :, n_quad, :]
    log_event = (ad.log(lam_end) * onehot).sum(axis=-1)
    nll = ((comp - log_event) * mask).sum() * (1.0 / count)

    lam_start = lam[:, :, 0, :]
    log_p = (ad.log(lam_start) * onehot).sum(axis=-1) - ad.log(lam_start.sum(axis=-1))
    w_true = weights.as_array()[batch.next_types] * mask
    ce = -((log_p * w_true).sum() * (1.0 / count))

    pred = (h @ params.v).reshape((B, m)) + params.c
    target = np.log1p(dt)
    mse = (ad.squared_error(pred, target) * mask).sum() * (1.0 / count)

    total = nll + gamma_type * ce + gamma_time * mse
    return total, LossBreakdown(nll.item(), ce.item(), mse.item(), total.item())


@dataclass(frozen=True)
class BatchPredictions:
    """Outputs at every real position j, predicting event j+1."""

    hidden: np.ndarray  # (B, n, d)
    type_probs: np.ndarray  # (B, n, K) at s = 0
    log_gap: np.ndarray  # (B, n) predicted log(1 + gap)
    attention: np.ndarray  # (B, L, h, n, n)


def predict_batch(params: ModelParams, batch: Batch, stats: GapStats) -> BatchPredictions:
    with ad.no_grad():
        out = forward(params, batch, stats)
    hidden = out.hidden.data
    pre = hidden @ params.w.data.T + params.b.data
    lam = ad.softplus_np(pre, params.beta)
    probs = lam / lam.sum(axis=-1, keepdims=True)
    log_gap = (hidden @ params.v.data)[..., 0] + params.c.data[0]
    return BatchPredictions(hidden, probs, log_gap, out.attention)
