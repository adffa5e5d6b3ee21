"""Acceptance criteria, run at their stated tolerances.

Criteria 4-9 run full 96 x 96 x 21 trials and take a while on one core.
``MSRPSF_ACCEPT_TRIALS`` sets the trial count (default 20).  Every
criterion records one pass/fail line that is printed in the terminal summary.
"""

import dataclasses
import math
import os
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from msrpsf.detect import Detection, extract_detections, match_truth, merge_clusters
from msrpsf.harness import ExperimentConfig, Resources, aggregate, run_trials, sweep_configs, truth_table
from msrpsf.metrics import localization_scores, scores_from_confusion
from msrpsf.optics import BandSpec, PsfDictionary
from msrpsf.scene import PointSource, Scene, SpectralLibrary, render_noiseless
from msrpsf.stage1 import (SolverConfig, admm_u0_gaussian, admm_u0_poisson, admm_x_multiband, conv3d_periodic,
                           kl_data_term, kl_gradient, lattice_kernel, solve_stage1)
from msrpsf.stage2 import stage2_alternate
from msrpsf.stage3 import assign_labels, unmix_simplex_ls

pytestmark = pytest.mark.acceptance

TRIALS = int(os.environ.get("MSRPSF_ACCEPT_TRIALS", "20"))
RESULTS: dict[int, tuple[bool, str]] = {}

# Reported values for the 4-band / 5-band Poisson pipeline.
REPORTED_RECALL, REPORTED_PRECISION, REPORTED_OA = 0.9480, 0.9534, 0.9328


def record(n: int, passed: bool, detail: str) -> None:
    RESULTS[n] = (bool(passed), detail)
    assert passed, f"criterion {n}: {detail}"


def pts(x: float) -> str:
    return f"{100 * x:.2f}"


class Runs:
    """Aggregated trials per configuration, sharing Stage 1 results."""

    def __init__(self):
        self.res = Resources()
        self._cache: dict = {}

    def summary(self, cfg: ExperimentConfig) -> dict:
        key = cfg.config_hash()
        if key not in self._cache:
            self._cache[key] = aggregate(run_trials(cfg, self.res))
        return self._cache[key]


@pytest.fixture(scope="module")
def runs():
    return Runs()


@pytest.fixture(scope="module")
def base():
    return ExperimentConfig(trials=TRIALS)


# ---------------------------------------------------------------- 1. oracles

def _random_dict(rng, shape, band):
    s = rng.random(shape)
    s /= s.sum(axis=(0, 1), keepdims=True)
    z = np.linspace(-1, 1, shape[2])
    return PsfDictionary(s, z, z, BandSpec(band))


def _loop_conv3d(K, X):
    m, n, d = X.shape
    out = np.zeros_like(X)
    for p, q, r in np.argwhere(X != 0):
        for a in range(m):
            for b in range(n):
                for c in range(d):
                    out[a, b, c] += X[p, q, r] * K[(a - p) % m, (b - q) % n, (c - r) % d]
    return out


def _dense_conv(K):
    shape = K.shape
    n = K.size
    A = np.zeros((n, n))
    for j in range(n):
        E = np.zeros(shape)
        E[np.unravel_index(j, shape)] = 1.0
        A[:, j] = _loop_conv3d(K, E).ravel()
    return A


def scalar_poisson_min(G, b, beta0, xi):
    # The objective is convex on u > -b, so its minimizer is the root of the derivative.
    def deriv(u):
        return 1.0 - G / (u + b) + beta0 * (u - xi)

    lo, hi = -b + 1e-15 * max(1.0, b), max(xi, 0.0) + G + b + 1.0 / beta0 + 1.0
    if deriv(lo) >= 0:
        return lo
    return brentq(deriv, lo, hi, xtol=1e-14, rtol=1e-15)


def scalar_gaussian_min(G, b, beta0, xi):
    def deriv(u):
        return (u + b - G) + beta0 * (u - xi)

    span = abs(G) + abs(b) + abs(xi) + 1.0
    return brentq(deriv, -10 * span, 10 * span, xtol=1e-14, rtol=1e-15)


def test_criterion_1_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    K, X = rng.random((8, 8, 4)), rng.random((8, 8, 4))
    err_conv = np.abs(conv3d_periodic(K, X) - _loop_conv3d(K, X)).max()

    dicts = [_random_dict(rng, (4, 4, 2), 400.0), _random_dict(rng, (4, 4, 2), 600.0)]
    U0 = [rng.normal(size=(4, 4, 2)) for _ in dicts]
    e0 = [rng.normal(size=(4, 4, 2)) for _ in dicts]
    U1, e1 = rng.normal(size=(4, 4, 2)), rng.normal(size=(4, 4, 2))
    b0, b1 = 0.8, 1.7
    lhs, rhs = b1 * np.eye(32), b1 * (U1 - e1).ravel()
    for d, u, e in zip(dicts, U0, e0):
        A = _dense_conv(lattice_kernel(d.slices))
        lhs += b0 * A.T @ A
        rhs += b0 * A.T @ (u - e).ravel()
    err_x = np.abs(admm_x_multiband(U0, e0, U1, e1, dicts, b0, b1) - np.linalg.solve(lhs, rhs).reshape(4, 4, 2)).max()

    err_p = err_g = 0.0
    for _ in range(1000):
        G = float(rng.poisson(rng.uniform(0, 50)))
        b = rng.uniform(0.5, 20)
        beta0 = 10 ** rng.uniform(-2, 1)
        xi = rng.uniform(-5, 60)
        up = admm_u0_poisson(np.full((1, 1, 1), xi), np.array([[G]]), b, beta0)[0, 0, 0]
        err_p = max(err_p, abs(up - scalar_poisson_min(G, b, beta0, xi)))
        ug = admm_u0_gaussian(np.full((1, 1, 1), xi), np.array([[G]]), b, beta0)[0, 0, 0]
        err_g = max(err_g, abs(ug - scalar_gaussian_min(G, b, beta0, xi)))
    elapsed = time.perf_counter() - t0
    ok = err_conv <= 1e-8 and err_x <= 1e-8 and err_p <= 1e-6 and err_g <= 1e-6 and elapsed < 10
    record(1, ok, f"conv {err_conv:.1e}, X-step {err_x:.1e}, U0 Poisson {err_p:.1e}, "
                  f"U0 Gaussian {err_g:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2. gradient

def test_criterion_2_gradient():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    dicts = [_random_dict(rng, (16, 16, 4), 400.0 + 150 * i) for i in range(2)]
    X = rng.random((16, 16, 4)) + 0.05
    G = rng.poisson(8.0, (2, 16, 16)).astype(float)
    b, h = 2.0, 1e-5
    grad = kl_gradient(X, dicts, G, b)
    worst = 0.0
    for flat in rng.choice(X.size, 20, replace=False):
        idx = np.unravel_index(flat, X.shape)
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        fd = (kl_data_term(Xp, dicts, G, b) - kl_data_term(Xm, dicts, G, b)) / (2 * h)
        worst = max(worst, abs(grad[idx] - fd) / abs(fd))
    elapsed = time.perf_counter() - t0
    record(2, worst <= 1e-4 and elapsed < 10, f"worst relative error {worst:.1e} over 20 voxels, {elapsed:.1f}s")


# ---------------------------------------------------------------- 3. noiseless recovery

# Equal flux over the four Stage 1 bands keeps the data inside the shared
# lattice model; the fifth band tells the materials apart.
NOISELESS_FLUX = np.array([[600.0, 600, 600, 600, 1200], [900, 900, 900, 900, 300], [400, 400, 400, 400, 400]])
NOISELESS_VOXELS = [(25, 30, 5), (60, 45, 12), (40, 72, 18)]
NOISELESS_SOLVER = SolverConfig(mu=0.1, beta0=1e-4, beta1=1e-3, min_inner=300, max_inner=300, max_outer=2)
# Centroids are flux-weighted means, so an exact voxel comes back to round-off.
LOC_ROUNDOFF = 1e-9


def test_criterion_3_noiseless_recovery(runs):
    t0 = time.perf_counter()
    cfg = ExperimentConfig()
    dicts = runs.res.dictionaries(cfg)
    zgrid = dicts[0].zeta_grid_ref
    sources = [PointSource(float(p), float(q), float(zgrid[r]), material=j, flux=NOISELESS_FLUX[j])
               for j, (p, q, r) in enumerate(NOISELESS_VOXELS)]
    scene = Scene(sources, cfg.background)
    clean = render_noiseless(scene, dicts)
    truth = truth_table(scene, dicts[0])

    est, _ = solve_stage1(clean.subset(range(4)), dicts[:4], NOISELESS_SOLVER)
    merged = merge_clusters(extract_detections(est.voxels))
    m1 = match_truth(merged, truth)
    s2 = stage2_alternate(merged, clean, dicts, cfg.gamma, "poisson", max_iters=1000, tol=1e-12)
    m2 = match_truth(s2.detections, truth)
    recall, precision, _ = localization_scores(m2)
    loc_err = max((np.abs(s2.detections[i].coords - truth[j]).max() for i, j in m2.pairs), default=math.inf)
    flux_err = max((np.abs(s2.fluxes.values[i] - NOISELESS_FLUX[j]).max() / NOISELESS_FLUX[j].max()
                    for i, j in m2.pairs), default=math.inf)

    sig = NOISELESS_FLUX / NOISELESS_FLUX.sum(axis=1, keepdims=True)
    lib = SpectralLibrary(["a", "b", "c"], np.array(cfg.bands_nm), sig)
    labels = assign_labels(unmix_simplex_ls(s2.fluxes.values, lib.at_bands(cfg.bands())))
    oa = np.mean([labels[i] == j for i, j in m2.pairs]) if m2.pairs else 0.0
    elapsed = time.perf_counter() - t0

    ok = (m1.n_matched == 3 and recall == 1.0 and precision == 1.0 and loc_err <= LOC_ROUNDOFF and flux_err <= 1e-6
          and oa == 1.0 and elapsed < 120)
    record(3, ok, f"{len(merged)} Stage 1 clusters, recall {pts(recall)}%, precision {pts(precision)}%, "
                  f"location error {loc_err:.1e} px, flux error {flux_err:.1e}, OA {pts(oa)}%, {elapsed:.0f}s")


# ---------------------------------------------------------------- 4. Poisson pipeline

def test_criterion_4_poisson_pipeline(runs, base):
    s = runs.summary(base)
    single = runs.summary(dataclasses.replace(base, stage1_band_count=1))
    gap = s["stage1_recall"] - single["stage1_recall"]
    ok = (abs(s["recall"] - REPORTED_RECALL) <= 0.10 and abs(s["precision"] - REPORTED_PRECISION) <= 0.10
          and abs(s["overall_accuracy"] - REPORTED_OA) <= 0.10 and gap >= 0.05 and s["trials"] >= 20
          and s["failed"] == 0)
    record(4, ok, f"{s['trials']} trials: recall {pts(s['recall'])}% (reported {pts(REPORTED_RECALL)}), "
                  f"precision {pts(s['precision'])}% (reported {pts(REPORTED_PRECISION)}), "
                  f"OA {pts(s['overall_accuracy'])}% (reported {pts(REPORTED_OA)}); Stage 1 recall "
                  f"{pts(s['stage1_recall'])}% multiband vs {pts(single['stage1_recall'])}% single band")


# ---------------------------------------------------------------- 5. gamma sweep

def test_criterion_5_gamma_sweep(runs, base):
    gammas = [0.1, 0.2, 0.3, 0.4, 0.5]
    rows = [runs.summary(dataclasses.replace(base, gamma=g)) for g in gammas]
    rec = [r["recall"] for r in rows]
    prec = [r["precision"] for r in rows]
    ok = (all(b <= a for a, b in zip(rec, rec[1:])) and rec[2] - rec[4] >= 0.08
          and all(b >= a for a, b in zip(prec, prec[1:])))
    record(5, ok, "recall " + " ".join(pts(v) for v in rec) + ", precision " + " ".join(pts(v) for v in prec))


# ---------------------------------------------------------------- 6. stopping threshold

def test_criterion_6_stopping(runs, base):
    loose = runs.summary(dataclasses.replace(base, solver=dataclasses.replace(base.solver, epsilon=1e-5)))
    tight = runs.summary(dataclasses.replace(base, solver=dataclasses.replace(base.solver, epsilon=1e-8)))
    diffs = {k: abs(loose[k] - tight[k]) for k in ("recall", "precision", "overall_accuracy")}
    saving = 1 - loose["time_total"] / tight["time_total"]
    ok = max(diffs.values()) <= 0.02 and saving >= 0.25
    record(6, ok, ", ".join(f"{k} differs by {pts(v)}" for k, v in diffs.items())
           + f"; time {loose['time_total']:.1f}s vs {tight['time_total']:.1f}s ({pts(saving)}% saved)")


# ---------------------------------------------------------------- 7. band counts

SCORES = ("recall", "precision", "overall_accuracy", "kappa")


def _nondecreasing(values, slack: float) -> bool:
    return all(b >= a - slack for a, b in zip(values, values[1:]))


def test_criterion_7_band_counts(runs, base):
    s1 = [runs.summary(dataclasses.replace(base, stage1_band_count=k)) for k in range(1, 5)]
    # Localization quality is what the Stage 1 band count drives.
    loc = [(r["recall"] + r["precision"]) / 2 for r in s1]
    jumps = np.diff(loc)
    s1_ok = all(_nondecreasing([r[k] for r in s1], 0.03) for k in SCORES) and int(np.argmax(jumps)) == 0

    s2 = [runs.summary(c) for _, c in sweep_configs(base, "bands_stage2")]
    prec2 = [r["precision"] for r in s2]
    s2_ok = _nondecreasing(prec2, 0.03)
    record(7, s1_ok and s2_ok, "Stage 1 bands 1-4 localization " + " ".join(pts(v) for v in loc)
           + "; Stage 2 bands 4-8 precision " + " ".join(pts(v) for v in prec2))


# ---------------------------------------------------------------- 8. regularizers

def test_criterion_8_regularizers(runs, base):
    ncv = runs.summary(base)
    l1 = runs.summary(dataclasses.replace(base, solver=dataclasses.replace(base.solver, regularizer="l1")))
    diffs = {k: abs(ncv[k] - l1[k]) for k in SCORES}
    ok = max(diffs.values()) <= 0.03 and l1["time_total"] < ncv["time_total"]
    record(8, ok, ", ".join(f"{k} differs by {pts(v)}" for k, v in diffs.items())
           + f"; time l1 {l1['time_total']:.1f}s vs nonconvex {ncv['time_total']:.1f}s")


# ---------------------------------------------------------------- 9. Gaussian pipeline

def test_criterion_9_gaussian(runs, base):
    g = ExperimentConfig.gaussian(trials=base.trials)
    multi = runs.summary(g)
    single = runs.summary(dataclasses.replace(g, stage1_band_count=1))
    pois = runs.summary(base)
    mean_g = np.mean([multi[k] for k in SCORES])
    mean_p = np.mean([pois[k] for k in SCORES])
    gap = multi["stage1_recall"] - single["stage1_recall"]
    ok = multi["failed"] == 0 and gap >= 0.05 and mean_g < mean_p
    record(9, ok, f"Stage 1 recall {pts(multi['stage1_recall'])}% multiband vs {pts(single['stage1_recall'])}% "
                  f"single; mean score {pts(mean_g)}% Gaussian vs {pts(mean_p)}% Poisson")


# ---------------------------------------------------------------- 10. metrics

def _kappa_oracle(C):
    # Observed and chance agreement from the marginals, written out longhand.
    n = sum(sum(row) for row in C)
    po = sum(C[i][i] for i in range(len(C))) / n
    pe = sum(sum(C[i]) * sum(row[i] for row in C) for i in range(len(C))) / n ** 2
    return po, (po - pe) / (1 - pe)


def test_criterion_10_metrics():
    errs = []
    oa, kappa = scores_from_confusion([[40, 10], [20, 30]])
    errs += [abs(oa - 0.70), abs(kappa - 0.40)]
    C = np.diag([1, 2, 3, 3, 3])
    C[0, 1] = 2
    oa, kappa = scores_from_confusion(C)
    errs += [abs(oa - 12 / 14), abs(kappa - 65 / 79)]
    rng = np.random.default_rng(10)
    for _ in range(50):
        M = rng.integers(0, 20, (4, 4))
        po, k = _kappa_oracle(M.tolist())
        oa, kappa = scores_from_confusion(M)
        errs += [abs(oa - po), abs(kappa - k)]

    truth = np.array([[20.0, 20.0, 5.0]])
    hit = match_truth([Detection(22.0, 20.0, 6.0, 1.0)], truth).n_matched == 1
    miss = match_truth([Detection(23.0, 20.0, 5.0, 1.0)], truth).n_matched == 0
    deep = match_truth([Detection(20.0, 20.0, 7.0, 1.0)], truth).n_matched == 0
    worst = max(errs)
    record(10, worst <= 1e-12 and hit and miss and deep,
           f"worst OA/kappa error {worst:.1e}; offset (2,0,1) matched {hit}, (3,0,0) rejected {miss}, "
           f"(0,0,2) rejected {deep}")
