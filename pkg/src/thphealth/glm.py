"""Count-feature GLM baseline: multinomial logistic regression for the next
event type and a Gamma log-link regression for the time to the next event."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .data import Dataset, EventSequence
from .evaluation import EvalReport, f1_report, medae

ZERO_GAP_SHIFT = 1e-3


@dataclass(frozen=True)
class GlmFeatures:
    counts: np.ndarray  # (K,) events of each type in the trailing window
    since_last: float
    since_start: float

    def vector(self) -> np.ndarray:
        """Design row with a leading intercept: (1, counts..., since_last, since_start)."""
        return np.concatenate([[1.0], self.counts, [self.since_last, self.since_start]])


@dataclass
class GlmParams:
    type_betas: np.ndarray  # (K, K+3); last row is pinned to zero
    time_beta: np.ndarray  # (K+3,)
    window_days: float = 100.0

    @property
    def K(self) -> int:
        return self.type_betas.shape[0]

    def to_dict(self) -> dict:
        return {
            "type_betas": self.type_betas.tolist(),
            "time_beta": self.time_beta.tolist(),
            "window_days": self.window_days,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GlmParams":
        return cls(np.asarray(data["type_betas"], float), np.asarray(data["time_beta"], float), float(data["window_days"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "GlmParams":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def featurize(seq: EventSequence, j: int, K: int, window_days: float = 100.0) -> GlmFeatures:
    """Features for predicting event ``j`` (0-based, j >= 1) from its past.

    Counts cover the half-open window (t_{j-1} - window, t_{j-1}], so the
    anchor event itself is included.
    """
    if not 1 <= j < len(seq):
        raise IndexError(f"position {j} has no previous event in a sequence of length {len(seq)}")
    t = seq.times
    anchor = t[j - 1]
    past = slice(0, j)
    inside = t[past] > anchor - window_days
    counts = np.bincount(seq.types[past][inside], minlength=K).astype(np.float64)
    since_last = float(anchor - t[j - 2]) if j >= 2 else 0.0
    return GlmFeatures(counts, since_last, float(anchor - t[0]))


def design_matrix(dataset: Dataset, window_days: float = 100.0):
    """Stack features for every prediction position; returns (X, y_type, y_gap)."""
    K = dataset.K
    rows, labels, gaps = [], [], []
    for seq in dataset:
        for j in range(1, len(seq)):
            rows.append(featurize(seq, j, K, window_days).vector())
            labels.append(int(seq.types[j]))
            gaps.append(float(seq.times[j] - seq.times[j - 1]))
    if not rows:
        return np.zeros((0, K + 3)), np.zeros(0, np.int64), np.zeros(0)
    return np.array(rows), np.array(labels, np.int64), np.array(gaps)


def multinomial_probs(betas, X) -> np.ndarray:
    logits = np.atleast_2d(X) @ np.asarray(betas).T
    return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def _standardizer(X):
    """Column scaling for the non-intercept features (intercept in column 0)."""
    mu = X[:, 1:].mean(axis=0)
    sd = X[:, 1:].std(axis=0)
    sd[sd == 0] = 1.0
    return mu, sd


def _to_raw(B_std, mu, sd):
    """Map coefficients fitted on standardized columns back to raw features."""
    B = np.empty_like(B_std)
    B[:, 1:] = B_std[:, 1:] / sd
    B[:, 0] = B_std[:, 0] - B[:, 1:] @ mu
    return B


def multinomial_nll(B, Xs, y, l2, sample_weight):
    logits = Xs @ B.T
    lse = logsumexp(logits, axis=1)
    nll = np.sum(sample_weight * (lse - logits[np.arange(len(y)), y])) / len(y)
    return nll + 0.5 * l2 * np.sum(B[:, 1:] ** 2)


def fit_multinomial(X, y, K: int, l2: float = 1e-3, max_iter: int = 500, class_weights=None, tol: float = 1e-6, return_trace=False):
    """L2-regularized multinomial logistic regression.

    Full-batch gradient descent with Armijo backtracking from
    Barzilai-Borwein trial steps, on internally standardized features; the
    last class is the zero reference. The
    intercept is not penalized. Returns (K, p) coefficients on the raw scale.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite features")
    if X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError("X and y must be non-empty with matching rows")
    mu, sd = _standardizer(X)
    Xs = X.copy()
    Xs[:, 1:] = (X[:, 1:] - mu) / sd
    n, p = Xs.shape
    sw = np.ones(n) if class_weights is None else np.asarray(class_weights, float)[y]
    Y = np.eye(K)[y]
    B = np.zeros((K, p))
    free = np.ones((K, p))
    free[K - 1] = 0.0
    penal = np.ones(p)
    penal[0] = 0.0

    def grad(B):
        P = multinomial_probs(B, Xs)
        return (((P - Y) * sw[:, None]).T @ Xs / n + l2 * B * penal) * free

    f = multinomial_nll(B, Xs, y, l2, sw)
    G = grad(B)
    trace = [f]
    step = 1.0
    for _ in range(max_iter):
        gnorm2 = float(np.sum(G * G))
        if np.sqrt(gnorm2) < tol:
            break
        # Armijo backtracking from the trial step
        while True:
            B_new = B - step * G
            f_new = multinomial_nll(B_new, Xs, y, l2, sw)
            if f_new <= f - 0.5 * step * gnorm2 or step < 1e-12:
                break
            step *= 0.5
        if f_new > f:
            break
        G_new = grad(B_new)
        # Barzilai-Borwein trial step for the next iteration
        dB, dG = B_new - B, G_new - G
        curv = float(np.sum(dB * dG))
        step = min(float(np.sum(dB * dB)) / curv, 1e3) if curv > 0 else min(step * 2.0, 1e3)
        B, f, G = B_new, f_new, G_new
        trace.append(f)
    B_raw = _to_raw(B, mu, sd)
    B_raw[K - 1] = 0.0
    return (B_raw, np.array(trace)) if return_trace else B_raw


def fit_gamma_log_link(X, dt, max_iter: int = 100, tol: float = 1e-10) -> np.ndarray:
    """Gamma-family GLM with log link by iteratively reweighted least squares.

    For the Gamma variance function with a log link the IRLS weights are
    constant, so each iteration is an ordinary least-squares solve on the
    working response eta + (y - mu) / mu. Zero gaps are shifted to 1e-3 days.
    A ridge of 1e-8 is added if the normal equations are singular.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(dt, dtype=np.float64)
    if np.any(y < 0) or not np.all(np.isfinite(X)):
        raise ValueError("gaps must be non-negative and features finite")
    y = np.where(y <= 0, ZERO_GAP_SHIFT, y)
    mu, sd = _standardizer(X)
    Xs = X.copy()
    Xs[:, 1:] = (X[:, 1:] - mu) / sd
    beta = np.zeros(X.shape[1])
    beta[0] = np.log(y.mean())
    XtX = Xs.T @ Xs
    try:
        np.linalg.cholesky(XtX)
    except np.linalg.LinAlgError:
        XtX = XtX + 1e-8 * np.eye(len(XtX))
    for _ in range(max_iter):
        eta = Xs @ beta
        mu_hat = np.exp(eta)
        z = eta + (y - mu_hat) / mu_hat
        new = np.linalg.solve(XtX, Xs.T @ z)
        # damp wild first steps on badly scaled data
        delta = new - beta
        if np.max(np.abs(delta)) > 5:
            delta *= 5 / np.max(np.abs(delta))
        beta = beta + delta
        if np.max(np.abs(delta)) < tol:
            break
    return _to_raw(beta[None], mu, sd)[0]


def fit_glm(train: Dataset, window_days: float = 100.0, l2: float = 1e-3, max_iter: int = 500, class_weights=None) -> GlmParams:
    X, y, gaps = design_matrix(train, window_days)
    if len(y) == 0:
        raise ValueError("training set has no prediction positions")
    type_betas = fit_multinomial(X, y, train.K, l2=l2, max_iter=max_iter, class_weights=class_weights)
    time_beta = fit_gamma_log_link(X, gaps)
    return GlmParams(type_betas, time_beta, window_days)


def glm_predict(params: GlmParams, X):
    probs = multinomial_probs(params.type_betas, X)
    # clip the linear predictor so exp stays finite and positive
    eta = np.clip(np.atleast_2d(X) @ params.time_beta, -700.0, 700.0)
    return np.argmax(probs, axis=1), probs, np.exp(eta)


def glm_evaluate(params: GlmParams, dataset: Dataset, window_days: float | None = None) -> EvalReport:
    if dataset.K != params.K:
        raise ValueError(f"incompatible event-type count: GLM has K={params.K}, data has K={dataset.K}")
    window = params.window_days if window_days is None else window_days
    X, y, gaps = design_matrix(dataset, window)
    if len(y) == 0:
        raise ValueError("no predictions: dataset has no sequence with at least 2 events")
    pred_type, _, pred_gap = glm_predict(params, X)
    f1, macro, confusion = f1_report(pred_type, y, dataset.K)
    return EvalReport(
        per_class_f1=f1,
        macro_f1=macro,
        medae_days=medae(pred_gap, gaps),
        confusion=confusion,
        n_predictions=int(len(y)),
        type_names=list(dataset.type_names),
        model="glm",
        extra={"window_days": window},
    )
