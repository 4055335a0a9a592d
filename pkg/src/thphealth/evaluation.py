"""Next-event prediction, classification / timing metrics and the CSV
exports used for interpretability."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .autodiff import no_grad, softplus_np
from .checkpoint import IncompatibleCheckpoint
from .data import Dataset, EventSequence
from .encoder import attention_recency, mean_attention
from .intensity import IntensityHead, TimeHead, type_probabilities
from .model import batch_loss, pad_batch, predict_batch


@dataclass
class EvalReport:
    per_class_f1: list
    macro_f1: float
    medae_days: float
    confusion: list  # confusion[true][pred]
    n_predictions: int
    type_names: list = field(default_factory=list)
    model: str = "thp"
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        return cls(**data)


def predict_next_type(h, head: IntensityHead) -> tuple[int, np.ndarray]:
    """Argmax of the type distribution right after the last event (s = 0);
    ties go to the lowest index."""
    p = type_probabilities(h, 0.0, head)
    return int(np.argmax(p)), p


def predict_time_gap(h, time_head: TimeHead) -> float:
    """Back-transform the predicted log(1 + gap) to days, floored at 0."""
    return max(float(np.expm1(time_head.predict_log_gap(h))), 0.0)


def _expected_time(pre, alpha, beta, horizon_days, n_grid, ref_gap):
    """Vectorized intensity-based mean gap for rows of pre-activations (N, K)."""
    if not horizon_days > 0 or n_grid < 2:
        raise ValueError("need horizon_days > 0 and n_grid >= 2")
    if not ref_gap > 0:
        raise ValueError("reference gap must be positive")
    u = np.linspace(0.0, horizon_days, n_grid + 1)
    s = np.minimum(u / ref_gap, 1.0)
    lam = softplus_np(pre[:, None, :] + alpha * s[:, None], beta).sum(axis=-1)  # (N, G+1)
    du = u[1] - u[0]
    Lam = np.concatenate([np.zeros((lam.shape[0], 1)), np.cumsum(0.5 * du * (lam[:, 1:] + lam[:, :-1]), axis=1)], axis=1)
    f = u * lam * np.exp(-Lam)
    body = du * (f.sum(axis=1) - 0.5 * (f[:, 0] + f[:, -1]))
    return body + horizon_days * np.exp(-Lam[:, -1])


def expected_time_from_intensity(h, head: IntensityHead, horizon_days=365.0, n_grid=4000, ref_gap=1.0) -> float:
    """E[gap] under the model's intensity, truncated at ``horizon_days``.

    Past the last event the within-interval variable is clamped as
    s = min(u / ref_gap, 1), with ref_gap the median training gap.
    """
    pre = head.preactivation(h)[None]
    return float(_expected_time(pre, head.alpha, head.beta, horizon_days, n_grid, ref_gap)[0])


def f1_report(preds, labels, K: int) -> tuple[list, float, list]:
    """Per-class F1 (0/0 counted as 0), macro-F1 and the confusion matrix."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if preds.size == 0:
        raise ValueError("no predictions")
    confusion = np.zeros((K, K), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    # exact rationals so macro-F1 is the correctly rounded mean
    exact = []
    for k in range(K):
        tp = int(confusion[k, k])
        denom = 2 * tp + int(confusion[:, k].sum() - tp) + int(confusion[k, :].sum() - tp)
        exact.append(Fraction(2 * tp, denom) if denom else Fraction(0))
    return [float(x) for x in exact], float(sum(exact) / K), confusion.tolist()


def medae(pred_days, true_days) -> float:
    pred = np.asarray(pred_days, dtype=np.float64)
    true = np.asarray(true_days, dtype=np.float64)
    if pred.shape != true.shape:
        raise ValueError("pred and true differ in length")
    if pred.size == 0:
        raise ValueError("medae of an empty input")
    return float(np.median(np.abs(pred - true)))


@dataclass
class Predictions:
    pred_type: np.ndarray
    true_type: np.ndarray
    pred_gap: np.ndarray
    true_gap: np.ndarray
    probs: np.ndarray
    pre: np.ndarray  # intensity pre-activations at s = 0


def collect_predictions(ckpt, dataset: Dataset, batch_size: int = 64) -> Predictions:
    """Predictions from h_{j-1} for every position j >= 2 of every sequence."""
    ckpt.check_compatible(dataset.K)
    params = ckpt.params
    seqs = [s.truncated(ckpt.config.max_len) for s in dataset if len(s) >= 2]
    out = {k: [] for k in ("pred_type", "true_type", "pred_gap", "true_gap", "probs", "pre")}
    for start in range(0, len(seqs), batch_size):
        chunk = seqs[start : start + batch_size]
        batch = pad_batch(chunk)
        pred = predict_batch(params, batch, ckpt.gap_stats)
        pre = pred.hidden @ params.w.data.T + params.b.data
        for i, seq in enumerate(chunk):
            m = len(seq) - 1
            probs = pred.type_probs[i, :m]
            out["probs"].append(probs)
            out["pre"].append(pre[i, :m])
            out["pred_type"].append(np.argmax(probs, axis=1))
            out["true_type"].append(seq.types[1:])
            out["pred_gap"].append(np.maximum(np.expm1(pred.log_gap[i, :m]), 0.0))
            out["true_gap"].append(np.diff(seq.times))
    if not out["true_type"]:
        K = dataset.K
        return Predictions(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0), np.zeros((0, K)), np.zeros((0, K)))
    return Predictions(**{k: np.concatenate(v) for k, v in out.items()})


def evaluate(ckpt, dataset: Dataset, *, intensity_time=True, horizon_days=365.0, n_grid=2000) -> EvalReport:
    preds = collect_predictions(ckpt, dataset)
    if preds.true_type.size == 0:
        raise ValueError("no predictions: dataset has no sequence with at least 2 events")
    f1, macro, confusion = f1_report(preds.pred_type, preds.true_type, dataset.K)
    extra = {}
    if intensity_time:
        est = np.concatenate(
            [
                _expected_time(preds.pre[i : i + 512], ckpt.params.alpha.data, ckpt.params.beta, horizon_days, n_grid, ckpt.median_gap)
                for i in range(0, len(preds.pre), 512)
            ]
        )
        extra["medae_intensity_days"] = medae(est, preds.true_gap)
    return EvalReport(
        per_class_f1=f1,
        macro_f1=macro,
        medae_days=medae(preds.pred_gap, preds.true_gap),
        confusion=confusion,
        n_predictions=int(preds.true_type.size),
        type_names=list(dataset.type_names),
        model="thp",
        extra=extra,
    )


def mean_event_nll(ckpt, dataset: Dataset, batch_size: int = 32) -> float:
    """Held-out point-process NLL per predicted event (positions j >= 2)."""
    ckpt.check_compatible(dataset.K)
    seqs = [s.truncated(ckpt.config.max_len) for s in dataset if len(s) >= 2]
    if not seqs:
        raise ValueError("no predictions: dataset has no sequence with at least 2 events")
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(seqs), batch_size):
            batch = pad_batch(seqs[start : start + batch_size])
            _, parts = batch_loss(ckpt.params, batch, ckpt.gap_stats, ckpt.class_weights, n_quad=ckpt.config.n_quad)
            total += parts.nll * batch.n_loss_positions
            count += batch.n_loss_positions
    return total / count


def export_explanations(ckpt, seq: EventSequence, out_dir, *, n_points=101, bucket_width=7.0) -> dict:
    """Write intensity, recency and heatmap CSVs for one patient.

    The intensity curve covers the interval after the last observed event,
    on an s-grid of ``n_points`` over [0, 1]. Returns the written paths.
    """
    if len(seq) == 0:
        raise ValueError("cannot explain an empty sequence")
    if seq.types.max() >= ckpt.K:
        raise IncompatibleCheckpoint(f"incompatible event-type count: sequence uses type {seq.types.max()}, checkpoint has K={ckpt.K}")
    seq = seq.truncated(ckpt.config.max_len)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pred = predict_batch(ckpt.params, pad_batch([seq]), ckpt.gap_stats)
    n = len(seq)
    A = mean_attention(pred.attention[0])
    head = ckpt.params.intensity_head()
    h_last = pred.hidden[0, n - 1]

    names = list(ckpt.type_names)
    s = np.linspace(0.0, 1.0, n_points)
    lam = softplus_np(head.preactivation(h_last) + head.alpha * s[:, None], head.beta)
    pid = _safe_name(seq.patient_id)
    paths = {
        "intensity": out_dir / f"{pid}_intensity.csv",
        "recency": out_dir / f"{pid}_recency.csv",
        "heatmap": out_dir / f"{pid}_heatmap.csv",
    }
    with open(paths["intensity"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["s"] + [f"lambda_{t}" for t in names] + ["lambda_total"])
        for si, row in zip(s, lam):
            wr.writerow([repr(float(si))] + [repr(float(x)) for x in row] + [repr(float(row.sum()))])
    with open(paths["recency"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["lag_days", "mean_weight"])
        for lag, weight in attention_recency(A, seq.times, bucket_width):
            wr.writerow([repr(lag), repr(weight)])
    with open(paths["heatmap"], "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["query_index", "key_index", "weight"])
        for i in range(n):
            for j in range(n):
                wr.writerow([i, j, repr(float(A[i, j]))])
    return {k: str(v) for k, v in paths.items()}


def _safe_name(pid: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in pid)
