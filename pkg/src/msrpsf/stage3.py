"""Stage 3: classify sources by simplex-constrained spectral unmixing.

Each estimated signature ``f`` (length K) is written as ``x @ M`` with
abundances ``x >= 0`` summing to one, where the rows of ``M`` are library
endmembers at the same bands.  Signatures and endmembers are both scaled to
unit sum first, because fluxes carry the photon budget while the library is
reflectance-normalized.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

KKT_TOL = 1e-9


@dataclass
class AbundanceMatrix:
    values: np.ndarray  # M x N
    residuals: np.ndarray  # M, Euclidean misfit on normalized rows


@dataclass
class QPResult:
    x: np.ndarray
    objective: float
    iterations: int
    kkt_residual: float


def normalize_rows(A) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    s = A.sum(axis=1, keepdims=True)
    if np.any(s <= 0):
        raise ValueError("rows must have a positive sum to be normalized")
    return A / s


def _solve_free(Q: np.ndarray, c: np.ndarray, free: np.ndarray) -> tuple[np.ndarray, float]:
    """Minimize over the free coordinates subject to sum(x_free) = 1."""
    k = free.size
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = Q[np.ix_(free, free)]
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.concatenate([c[free], [1.0]])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    return sol[:k], sol[k]


def simplex_ls(M: np.ndarray, f: np.ndarray, max_iter: int | None = None) -> QPResult:
    """Primal active-set solve of ``min ||x @ M - f||^2`` over the probability simplex.

    Starts at the best vertex.  Working-set ties break toward the lowest
    index, which keeps degenerate libraries deterministic.
    """
    M = np.asarray(M, dtype=float)
    f = np.asarray(f, dtype=float)
    N = M.shape[0]
    Q = M @ M.T
    c = M @ f
    scale = max(1.0, float(np.abs(Q).max()), float(np.abs(c).max()))
    tol = 1e-12 * scale

    def obj(x):
        r = x @ M - f
        return float(r @ r)

    vert = [obj(np.eye(N)[j]) for j in range(N)]
    x = np.zeros(N)
    x[int(np.argmin(vert))] = 1.0
    active = np.ones(N, dtype=bool)
    active[int(np.argmin(vert))] = False
    max_iter = max_iter or 50 * N + 50
    for it in range(1, max_iter + 1):
        free = np.flatnonzero(~active)
        z, _ = _solve_free(Q, c, free)
        p = np.zeros(N)
        p[free] = z - x[free]
        if np.abs(p).max() <= 1e-13:
            grad = Q @ x - c
            nu = grad[free].mean()
            lam = grad - nu
            lam[free] = 0.0
            j = int(np.argmin(lam))
            if not active.any() or lam[j] >= -tol:
                return QPResult(x, obj(x), it, kkt_residual(M, f, x))
            active[j] = False
            continue
        alpha, block = 1.0, -1
        for i in free:
            if p[i] < 0:
                a = -x[i] / p[i]
                if a < alpha:
                    alpha, block = a, i
        x = x + alpha * p
        if block >= 0:
            x[block] = 0.0
            active[block] = True
        x[active] = 0.0
        x = np.maximum(x, 0.0)
        x /= x.sum()
    logger.warning("active-set QP hit its iteration limit")
    return QPResult(x, obj(x), max_iter, kkt_residual(M, f, x))


def kkt_residual(M, f, x) -> float:
    """Largest violation of stationarity, sign and complementarity conditions."""
    M = np.asarray(M, dtype=float)
    grad = 2.0 * (M @ (x @ M - f))
    supp = x > 1e-12
    nu = grad[supp].mean() if supp.any() else grad.min()
    lam = grad - nu
    stat = np.abs(lam[supp]).max() if supp.any() else 0.0
    dual = max(0.0, -lam[~supp].min()) if (~supp).any() else 0.0
    primal = max(abs(x.sum() - 1.0), max(0.0, -x.min()))
    return float(max(stat, dual, primal))


def unmix_simplex_ls(F, library_bands) -> AbundanceMatrix:
    """Abundances for every row of ``F`` against the N x K ``library_bands``."""
    values = np.asarray(getattr(F, "values", F), dtype=float)
    lib = normalize_rows(library_bands)
    if lib.shape[1] < 2:
        raise ValueError("unmixing needs at least 2 bands")
    if values.size == 0:
        return AbundanceMatrix(np.zeros((0, lib.shape[0])), np.zeros(0))
    rows = normalize_rows(values)
    if rows.shape[1] != lib.shape[1]:
        raise ValueError(f"signatures have {rows.shape[1]} bands, library {lib.shape[1]}")
    X = np.zeros((rows.shape[0], lib.shape[0]))
    res = np.zeros(rows.shape[0])
    for j, f in enumerate(rows):
        qp = simplex_ls(lib, f)
        if qp.kkt_residual > KKT_TOL:
            logger.warning("row %d: KKT residual %.3g above %.0e", j, qp.kkt_residual, KKT_TOL)
        X[j] = qp.x
        res[j] = np.sqrt(qp.objective)
    return AbundanceMatrix(X, res)


def assign_labels(X) -> np.ndarray:
    """Dominant endmember per row; ``argmax`` already prefers the lowest index on ties."""
    values = np.asarray(getattr(X, "values", X), dtype=float)
    return np.argmax(values, axis=1) if values.size else np.zeros(0, dtype=int)


def write_classification(abund: AbundanceMatrix, labels, names, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["detection_id", "label", *[f"abundance_{n}" for n in names], "residual_norm"])
        for j, (row, lab) in enumerate(zip(abund.values, labels)):
            w.writerow([j, names[int(lab)], *[f"{v:.8f}" for v in row], f"{abund.residuals[j]:.8e}"])
