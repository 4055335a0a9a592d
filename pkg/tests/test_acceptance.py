"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also collected in the pytest
terminal summary). The learning and ablation experiments take several
minutes each and carry the ``slow`` marker; they still run by default.
"""

import csv
import math
import time

import numpy as np
import pytest
from scipy import stats

from thphealth import autodiff as ad
from thphealth.cli import main
from thphealth.config import TrainConfig
from thphealth.data import ClassWeights, EventSequence, GapStats, split_dataset
from thphealth.evaluation import evaluate, export_explanations, f1_report, mean_event_nll, medae
from thphealth.glm import fit_gamma_log_link, fit_glm, glm_evaluate, multinomial_probs
from thphealth.intensity import IntensityHead, compensator, sequence_nll
from thphealth.model import batch_loss, pad_batch
from thphealth.simulate import (
    CohortConfig,
    HawkesParams,
    exact_intensity,
    exact_nll,
    homogeneous_poisson_rates,
    interval_nll,
    make_imbalanced_cohort,
    ogata_thinning,
    poisson_interval_nll,
)
from thphealth.training import init_params, train

TINY_FLAGS = [
    "--d", "8", "--n-layers", "1", "--n-heads", "2", "--d-ff", "16", "--n-quad", "8",
    "--batch-size", "8", "--warmup-steps", "5", "--learning-rate", "0.005",
]


def test_c01_gradient_check(criterion):
    cfg = TrainConfig(d=8, n_layers=1, n_heads=2, d_ff=16, n_quad=8, dropout=0.0)
    params = init_params(cfg, seed=0)
    rng = np.random.default_rng(1)
    for p in (params.b, params.alpha, params.c):
        p.data[...] = rng.standard_normal(p.data.shape) * 0.5
    seq = EventSequence("g", np.cumsum(rng.exponential(4.0, 6)), [0, 2, 1, 1, 0, 2])
    batch = pad_batch([seq])
    stats_, weights = GapStats(1.2, 0.8), ClassWeights((2.0, 1.0, 1.5))

    def loss():
        return batch_loss(params, batch, stats_, weights, n_quad=8, gamma_type=1.0, gamma_time=0.1)[0]

    t0 = time.perf_counter()
    err = ad.finite_diff_check(loss, params.parameters(), 1e-5)
    elapsed = time.perf_counter() - t0
    criterion(1, err < 1e-4 and elapsed < 10.0, f"max rel err {err:.2e} (< 1e-4), {elapsed:.1f}s (< 10s)")


def test_c02_poisson_oracle(criterion):
    rng = np.random.default_rng(2)
    K, d = 3, 4
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(100):
        lam = rng.uniform(0.05, 3.0, K)
        # inverse softplus so that softplus(b) == lam
        head = IntensityHead(np.zeros((K, d)), np.log(np.expm1(lam)), np.zeros(K))
        n = int(rng.integers(2, 30))
        seq = EventSequence("p", np.cumsum(rng.exponential(2.0, n)), rng.integers(0, K, n))
        got = sequence_nll(seq, rng.standard_normal((n, d)), head, 32)
        closed = lam.sum() * (seq.times[-1] - seq.times[0]) - np.log(lam[seq.types[1:]]).sum()
        worst = max(worst, abs(got - closed))
    elapsed = time.perf_counter() - t0
    criterion(2, worst <= 1e-8 and elapsed < 5.0, f"max |diff| {worst:.2e} over 100 sequences (<= 1e-8), {elapsed:.2f}s")


def test_c03_quadrature_convergence(criterion):
    head = IntensityHead([[1.0]], [-0.5], [3.0])
    h, delta = np.array([0.3]), 2.0
    t0 = time.perf_counter()
    ref = compensator(h, delta, head, 10_000)
    ns = [4, 8, 16, 32, 64]
    errs = np.array([abs(compensator(h, delta, head, n) - ref) for n in ns])
    ratios = errs[:-1] / errs[1:]
    elapsed = time.perf_counter() - t0
    ok = bool(np.all((ratios >= 3) & (ratios <= 5))) and elapsed < 5.0
    criterion(3, ok, f"error ratios per doubling {np.round(ratios, 3).tolist()} (in [3, 5])")


def test_c04_simulator_validity(criterion):
    cfg = CohortConfig.preset("two-type")
    p = cfg.params
    T, burn, runs = 365.0, 50.0, 1000
    t0 = time.perf_counter()
    rates = np.empty((runs, p.K))
    for s in range(runs):
        times, types = ogata_thinning(p, T, s)
        # the window (burn, T] skips the start-up transient from an empty history
        keep = times > burn
        rates[s] = np.bincount(types[keep], minlength=p.K) / (T - burn)
    target = np.linalg.solve(np.eye(p.K) - p.branching, p.mu)
    se = rates.std(axis=0, ddof=1) / math.sqrt(runs)
    z = np.abs(rates.mean(axis=0) - target) / se
    poisson = HawkesParams([0.3, 0.2], np.zeros((2, 2)), np.ones((2, 2)))
    times, _ = ogata_thinning(poisson, 20_500.0, 11)
    gaps = np.diff(np.concatenate([[0.0], times]))[:10_000]
    pval = stats.kstest(gaps, "expon", args=(0, 1 / 0.5)).pvalue
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(z <= 3)) and gaps.size == 10_000 and pval > 0.01 and elapsed < 120
    criterion(4, ok, f"rate z-scores {np.round(z, 2).tolist()} (<= 3), KS p={pval:.3f} (> 0.01), {elapsed:.0f}s")


def _quadrature_nll(p: HawkesParams, times, types, T, total_nodes=10_000):
    """Gauss-Legendre compensator on each inter-event segment plus the log term."""
    knots = np.concatenate([[0.0], times, [T]])
    per = max(2, total_nodes // (knots.size - 1))
    x, w = np.polynomial.legendre.leggauss(per)
    comp = 0.0
    for i, (a, b) in enumerate(zip(knots[:-1], knots[1:])):
        if b <= a:
            continue
        t = 0.5 * (b - a) * x + 0.5 * (a + b)
        ht, hk = times[:i], types[:i]
        lag = t[:, None] - ht[None, :]
        lam = p.mu.sum() + (p.A[:, hk][None] * np.exp(-p.delta[:, hk][None] * lag[:, None, :])).sum(axis=(1, 2))
        comp += 0.5 * (b - a) * (w @ lam)
    log_term = sum(math.log(exact_intensity(p, times[:j], types[:j], times[j], types[j])) for j in range(times.size))
    return comp - log_term


def test_c05_exact_nll_cross_check(criterion):
    rng = np.random.default_rng(5)
    T = 150.0
    worst = 0.0
    t0 = time.perf_counter()
    for s in range(20):
        K = int(rng.integers(1, 4))
        A = rng.uniform(0, 0.5, (K, K))
        delta = rng.uniform(0.2, 2.0, (K, K))
        # rescale to a branching spectral radius of 0.7
        A *= 0.7 / max(abs(np.linalg.eigvals(A / delta)))
        p = HawkesParams(rng.uniform(0.05, 0.3, K), A, delta)
        times, types = ogata_thinning(p, T, s)
        worst = max(worst, abs(exact_nll(p, (times, types), T) - _quadrature_nll(p, times, types, T)))
    elapsed = time.perf_counter() - t0
    criterion(5, worst <= 1e-6 and elapsed < 30, f"max |diff| {worst:.2e} over 20 sequences (<= 1e-6), {elapsed:.1f}s")


@pytest.mark.slow
def test_c06_learning_smoke(criterion):
    t0 = time.perf_counter()
    cohort = CohortConfig.preset("two-type", n_patients=500, horizon_days=365.0, seed=0)
    train_set, eval_set = split_dataset(make_imbalanced_cohort(cohort), 0.8, 0)
    cfg = TrainConfig(K=2, epochs=30, seed=0)
    ckpt = train(cfg, train_set, eval_set, selection="last")
    held = [s for s in eval_set if len(s) >= 2]
    n = sum(len(s) - 1 for s in held)
    thp = mean_event_nll(ckpt, eval_set)
    gen = sum(interval_nll(cohort.params, s) for s in held) / n
    rates = homogeneous_poisson_rates(train_set)
    poisson = sum(poisson_interval_nll(rates, s) for s in held) / n
    elapsed = time.perf_counter() - t0
    rel = (thp - gen) / abs(gen)
    ok = thp < poisson and abs(rel) <= 0.15 and elapsed < 900
    criterion(
        6, ok,
        f"per-event NLL thp={thp:.4f} poisson={poisson:.4f} generating={gen:.4f} "
        f"(rel gap {rel:+.1%}, <= 15%), {elapsed:.0f}s",
    )


ABLATION_SEEDS = (0, 1, 2)
ABLATION_EPOCHS = 40


@pytest.fixture(scope="module")
def ablation():
    """Weighted, unweighted and GLM reports on the imbalanced preset for each seed."""
    t0 = time.perf_counter()
    runs = []
    for seed in ABLATION_SEEDS:
        data = make_imbalanced_cohort(CohortConfig.preset("paper-like", n_patients=500, seed=seed))
        train_set, eval_set = split_dataset(data, 0.8, seed)
        row = {}
        for arm, weighted in (("weighted", True), ("unweighted", False)):
            cfg = TrainConfig(epochs=ABLATION_EPOCHS, seed=seed, weighted_ce=weighted)
            row[arm] = evaluate(train(cfg, train_set, eval_set), eval_set, intensity_time=False)
        row["glm"] = glm_evaluate(fit_glm(train_set), eval_set)
        counts = np.bincount(np.concatenate([s.types[1:] for s in train_set]), minlength=3)
        row["rarest"] = int(np.argmin(counts))
        row["majority"] = int(np.argmax(counts))
        runs.append(row)
    return runs, time.perf_counter() - t0


@pytest.mark.slow
def test_c07_weighted_ce_ablation(criterion, ablation):
    runs, elapsed = ablation
    rare_gain = np.median([r["weighted"].per_class_f1[r["rarest"]] - r["unweighted"].per_class_f1[r["rarest"]] for r in runs])
    macro_gain = np.median([r["weighted"].macro_f1 - r["unweighted"].macro_f1 for r in runs])
    major_drop = np.median([r["unweighted"].per_class_f1[r["majority"]] - r["weighted"].per_class_f1[r["majority"]] for r in runs])
    ok = rare_gain >= 0.05 and macro_gain > 0 and major_drop <= 0.05 and elapsed < 45 * 60
    criterion(
        7, ok,
        f"median rarest-class F1 gain {rare_gain:+.3f} (>= 0.05), macro-F1 gain {macro_gain:+.3f} (> 0), "
        f"majority F1 drop {major_drop:+.3f} (<= 0.05), {elapsed / 60:.1f} min",
    )


@pytest.mark.slow
def test_c08_glm_ordering(criterion, ablation):
    runs, _ = ablation
    thp_macro = np.median([r["weighted"].macro_f1 for r in runs])
    glm_macro = np.median([r["glm"].macro_f1 for r in runs])
    thp_medae = np.median([r["weighted"].medae_days for r in runs])
    glm_medae = np.median([r["glm"].medae_days for r in runs])
    ok = thp_macro > glm_macro and thp_medae <= glm_medae
    criterion(
        8, ok,
        f"median macro-F1 thp={thp_macro:.3f} > glm={glm_macro:.3f}; median MedAE thp={thp_medae:.2f} <= glm={glm_medae:.2f} days",
    )


def test_c09_metric_oracles(criterion):
    f1, macro, confusion = f1_report([0, 1, 1, 2], [0, 0, 1, 2], 3)
    ok = (
        f1 == [2 / 3, 2 / 3, 1.0]
        and macro == 7 / 9
        and confusion == [[1, 1, 0], [0, 1, 0], [0, 0, 1]]
        and medae([1, 2, 3], [0, 0, 0]) == 2.0
        and medae([1, 3], [0, 0]) == 2.0
    )
    criterion(9, ok, f"macro-F1 {macro!r} == 7/9, medae examples exact")


def test_c10_determinism(criterion, tmp_path):
    sim = ["simulate", "--preset", "paper-like", "--n-patients", "40", "--horizon-days", "200", "--seed", "4"]
    codes = [main([*sim, "--out", str(tmp_path / name)]) for name in ("a.jsonl", "b.jsonl")]
    same_data = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    for run in ("r1", "r2"):
        codes.append(main(["train", "--data", str(tmp_path / "a.jsonl"), "--out", str(tmp_path / run), "--epochs", "3", *TINY_FLAGS]))
    same_metrics = (tmp_path / "r1" / "metrics.csv").read_bytes() == (tmp_path / "r2" / "metrics.csv").read_bytes()
    ok = codes == [0, 0, 0, 0] and same_data and same_metrics
    criterion(10, ok, f"exit codes {codes}, dataset identical={same_data}, metrics identical={same_metrics}")


def _read(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array(rows[1:], dtype=float)


def test_c11_interpretability_contracts(criterion, tmp_path):
    t0 = time.perf_counter()
    data = make_imbalanced_cohort(CohortConfig.preset("paper-like", n_patients=40, horizon_days=200.0, seed=7))
    train_set, eval_set = split_dataset(data, 0.75, 7)
    cfg = TrainConfig(d=8, n_layers=1, n_heads=2, d_ff=16, n_quad=8, batch_size=8, warmup_steps=5, learning_rate=5e-3, epochs=2)
    ckpt = train(cfg, train_set, eval_set)
    upper, total_err, sorted_ok, nonneg = 0.0, 0.0, True, True
    for seq in list(eval_set)[:5]:
        paths = export_explanations(ckpt, seq, tmp_path / seq.patient_id)
        hm = _read(paths["heatmap"])
        upper = max(upper, float(np.abs(hm[hm[:, 1] > hm[:, 0], 2]).sum()))
        lam = _read(paths["intensity"])
        total_err = max(total_err, float(np.abs(lam[:, -1] - lam[:, 1:-1].sum(axis=1)).max()))
        rec = _read(paths["recency"])
        sorted_ok &= bool(np.all(np.diff(rec[:, 0]) > 0))
        nonneg &= bool(np.all(rec[:, 1] >= 0))
    elapsed = time.perf_counter() - t0
    ok = upper == 0.0 and total_err <= 1e-9 and sorted_ok and nonneg and elapsed < 10
    criterion(
        11, ok,
        f"mass above diagonal {upper}, total-column err {total_err:.1e} (<= 1e-9), "
        f"recency sorted={sorted_ok} non-negative={nonneg}, {elapsed:.1f}s",
    )


def test_c12_glm_oracles(criterion):
    t0 = time.perf_counter()
    dt = np.random.default_rng(0).gamma(2.0, 3.0, 400)
    b0 = fit_gamma_log_link(np.ones((400, 1)), dt)[0]
    intercept_err = abs(b0 - math.log(dt.mean()))

    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, 5000)
    y = rng.gamma(5.0, np.exp(2 + 0.5 * x) / 5.0)
    beta = fit_gamma_log_link(np.column_stack([np.ones(5000), x]), y)
    coef_rel = float(np.max(np.abs(beta - [2.0, 0.5]) / [2.0, 0.5]))

    rng = np.random.default_rng(2)
    sum_err = max(
        float(np.abs(multinomial_probs(rng.standard_normal((4, 6)) * 20, rng.standard_normal((50, 6)) * 5).sum(axis=1) - 1).max())
        for _ in range(20)
    )
    elapsed = time.perf_counter() - t0
    ok = intercept_err <= 1e-6 and coef_rel <= 0.05 and sum_err <= 1e-12 and elapsed < 30
    criterion(
        12, ok,
        f"intercept err {intercept_err:.1e} (<= 1e-6), coefficient rel err {coef_rel:.3f} (<= 0.05), "
        f"prob-sum err {sum_err:.1e} (<= 1e-12)",
    )
