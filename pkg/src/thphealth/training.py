"""Initialization, AdamW, gradient clipping, learning-rate schedule,
batching and the training loop with best-checkpoint retention."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .checkpoint import Checkpoint
from .config import TrainConfig
from .data import (
    ClassWeights,
    Dataset,
    compute_class_weights,
    compute_type_frequencies,
    empirical_event_rate,
    gap_stats,
    median_gap,
)
from .encoder import make_encoder_params
from .evaluation import evaluate
from .model import Batch, ModelParams, batch_loss, pad_batch

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "train_nll", "train_ce", "train_time_mse", "eval_macro_f1", "eval_medae", "lr"]


class TrainingDiverged(RuntimeError):
    """Non-finite loss; ``checkpoint`` holds the last finite state."""

    def __init__(self, message, checkpoint=None, metrics=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.metrics = metrics or []


def init_params(cfg: TrainConfig, seed: int | None = None, event_rate: float | None = None) -> ModelParams:
    """Glorot-uniform weights, zero biases and slopes.

    With ``event_rate`` (events/day over all types) the baseline terms start
    at log(rate / K) so the initial intensities are on the data's scale.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    enc = make_encoder_params(cfg.K, cfg.d, cfg.n_layers, cfg.n_heads, cfg.d_ff, rng)
    bound_w = math.sqrt(6.0 / (cfg.d + cfg.K))
    bound_v = math.sqrt(6.0 / (cfg.d + 1))
    b0 = math.log(event_rate / cfg.K) if event_rate else 0.0
    return ModelParams(
        encoder=enc,
        w=Parameter(rng.uniform(-bound_w, bound_w, size=(cfg.K, cfg.d)), "intensity.w"),
        b=Parameter(np.full(cfg.K, b0), "intensity.b"),
        alpha=Parameter(np.zeros(cfg.K), "intensity.alpha"),
        v=Parameter(rng.uniform(-bound_v, bound_v, size=(cfg.d, 1)), "time.v"),
        c=Parameter(np.zeros(1), "time.c"),
        beta=cfg.beta,
    )


@dataclass
class AdamWState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state: AdamWState, lr, weight_decay, betas=(0.9, 0.999), eps=1e-8) -> AdamWState:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("params, grads and optimizer state differ in length")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ValueError(f"shape mismatch for {getattr(p, 'name', '?')}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * ((m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.data)
    return state


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_gradients(grads, max_norm: float) -> list:
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads)
    scale = max_norm / norm
    return [g * scale for g in grads]


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the base rate, then inverse square-root decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    if step <= cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    return cfg.learning_rate * math.sqrt(cfg.warmup_steps / step)


def make_batches(dataset: Dataset, batch_size: int, seed) -> list[Batch]:
    """Shuffle with ``seed`` (an int or a sequence such as (seed, epoch)) and
    pad each group of ``batch_size`` sequences."""
    if len(dataset) == 0:
        raise ValueError("cannot batch an empty dataset")
    order = np.random.default_rng(seed).permutation(len(dataset))
    seqs = [dataset[i] for i in order]
    return [pad_batch(seqs[i : i + batch_size]) for i in range(0, len(seqs), batch_size)]


def _train_ready(d: Dataset, cfg: TrainConfig) -> Dataset:
    return d.subset(s.truncated(cfg.max_len) for s in d if len(s) >= 2)


def _metric_key(row):
    # higher macro-F1, then lower MedAE, then earlier epoch
    return (-row["eval_macro_f1"], row["eval_medae"], row["epoch"])


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(METRICS_HEADER)
        for r in rows:
            wr.writerow([r["epoch"]] + [repr(float(r[k])) for k in METRICS_HEADER[1:]])


def train(cfg: TrainConfig, train_set: Dataset, eval_set: Dataset, *, metrics_path=None, progress=False, selection="macro_f1") -> Checkpoint:
    """Train from scratch and return the best checkpoint by eval macro-F1.

    ``selection="last"`` returns the final epoch instead.

    Gap statistics, class weights and the reference gap are fitted on
    ``train_set`` only. The returned checkpoint's ``best["metrics"]`` holds
    the full per-epoch log.
    """
    if selection not in ("macro_f1", "last"):
        raise ValueError(f"unknown selection rule {selection!r}")
    if train_set.K != cfg.K or eval_set.K != cfg.K:
        raise ValueError("dataset K does not match the configuration")
    train_set = _train_ready(train_set, cfg)
    if len(train_set) == 0:
        raise ValueError("training set has no sequence with at least 2 events")
    stats = gap_stats(train_set)
    weights = compute_class_weights(compute_type_frequencies(train_set)) if cfg.weighted_ce else ClassWeights.uniform(cfg.K)
    params = init_params(cfg, event_rate=empirical_event_rate(train_set))
    plist = params.parameters()
    state = AdamWState()
    ckpt = Checkpoint(params, cfg, stats, weights, train_set.type_names, median_gap(train_set), epoch=0, best={})
    best = ckpt.copy()
    rows: list[dict] = []
    step = 0
    lr = 0.0

    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch, 1])
        sums = np.zeros(3)
        count = 0
        for batch in make_batches(train_set, cfg.batch_size, [cfg.seed, epoch]):
            step += 1
            lr = lr_schedule(step, cfg)
            ad.zero_grad(plist)
            try:
                loss, parts = batch_loss(
                    params, batch, stats, weights,
                    n_quad=cfg.n_quad, gamma_type=cfg.gamma_type, gamma_time=cfg.gamma_time,
                    training=True, dropout=cfg.dropout, rng=rng,
                )
                ad.backward(loss)
                grads = [p.grad for p in plist]
                if not all(np.all(np.isfinite(g)) for g in grads):
                    raise FloatingPointError("non-finite gradient")
            except FloatingPointError as exc:
                best.best["metrics"] = rows
                raise TrainingDiverged(f"training diverged at epoch {epoch}, step {step}: {exc}", best, rows) from None
            grads = clip_gradients(grads, cfg.clip_norm)
            adamw_step(plist, grads, state, lr, cfg.weight_decay)
            n = batch.n_loss_positions
            sums += n * np.array([parts.nll, parts.type_ce, parts.time_mse])
            count += n

        ckpt.epoch = epoch
        report = evaluate(ckpt, eval_set, intensity_time=False)
        row = {
            "epoch": epoch,
            "train_nll": sums[0] / count,
            "train_ce": sums[1] / count,
            "train_time_mse": sums[2] / count,
            "eval_macro_f1": report.macro_f1,
            "eval_medae": report.medae_days,
            "lr": lr,
        }
        rows.append(row)
        if progress:
            log.info("epoch %d nll %.4f ce %.4f mse %.4f macroF1 %.4f medae %.3f", epoch, row["train_nll"], row["train_ce"], row["train_time_mse"], row["eval_macro_f1"], row["eval_medae"])
        if not best.best or selection == "last" or _metric_key(row) < _metric_key(best.best):
            best = ckpt.copy()
            best.best = dict(row)
        if metrics_path is not None:
            write_metrics(rows, metrics_path)

    if metrics_path is not None:
        write_metrics(rows, metrics_path)
    best.best = dict(best.best)
    best.best["metrics"] = rows
    return best
