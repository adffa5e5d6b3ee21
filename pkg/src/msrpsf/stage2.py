"""Stage 2: per-band flux estimation and false-positive removal.

For each band the image is modelled as ``g = H f + b`` where column ``j`` of
``H`` is the unit-sum PSF of detection ``j`` at its continuous position.
Gaussian noise uses the least-squares solution; Poisson noise refines it by a
fixed-point iteration whose fixed points satisfy the Poisson likelihood
equations.  Detections with a negative flux in any band, or a total flux at
most ``gamma`` times the largest total, are dropped and the fit repeated.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detect import Detection
from .optics import BandSpec, PsfDictionary, psf_at

logger = logging.getLogger(__name__)

PINV_RCOND = 1e-10


@dataclass
class PsfMatrix:
    columns: np.ndarray  # L x M
    band: BandSpec


@dataclass
class FluxTable:
    values: np.ndarray  # M x K photons
    bands: list[BandSpec]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1, len(self.bands))


@dataclass
class FluxFit:
    flux: np.ndarray
    iterations: int = 0
    converged: bool = True
    # True when the Poisson iteration was abandoned for the least-squares answer.
    fallback: bool = False
    rank_deficient: bool = False


@dataclass
class Stage2Result:
    detections: list[Detection]
    fluxes: FluxTable
    rounds: int
    removed: list[Detection] = field(default_factory=list)
    # Input indices of the survivors, aligned with ``fluxes`` rows.
    kept_ids: list[int] = field(default_factory=list)
    # Per round: flux table, input indices of its rows, rows flagged.
    history: list[tuple[FluxTable, list[int], list[int]]] = field(default_factory=list)


def build_psf_matrix(detections: Sequence[Detection], dictionary: PsfDictionary) -> PsfMatrix:
    """One unit-sum PSF column per detection, at its continuous coordinates."""
    if len(detections) == 0:
        raise ValueError("need at least one detection")
    cols = []
    for d in detections:
        zeta = dictionary.zeta_ref_at(d.zeta_index)
        psf = psf_at(dictionary, d.x, d.y, zeta)
        cols.append(psf.ravel() / psf.sum())
    return PsfMatrix(np.stack(cols, axis=1), dictionary.band)


def _pinv(H: np.ndarray) -> tuple[np.ndarray, bool]:
    u, s, vt = np.linalg.svd(H, full_matrices=False)
    keep = s > PINV_RCOND * s.max() if s.size and s.max() > 0 else np.zeros_like(s, dtype=bool)
    deficient = not keep.all()
    if deficient:
        logger.warning("PSF matrix is rank deficient (%d of %d singular values kept); "
                       "using the minimum-norm solution", int(keep.sum()), s.size)
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T, deficient


def flux_gaussian(H, g, b: float) -> FluxFit:
    """Least-squares fluxes ``pinv(H) (g - b)``."""
    H = getattr(H, "columns", H)
    Hp, deficient = _pinv(H)
    return FluxFit(Hp @ (np.ravel(g) - b), rank_deficient=deficient)


def flux_poisson_fixed_point(H, g, b: float, max_iters: int = 100, tol: float = 1e-6) -> FluxFit:
    """Poisson fluxes by the fixed-point map ``f <- f_G + pinv(H) [r * Hf / (Hf + b)]``.

    ``r = Hf + b - g`` is the residual and ``f_G`` the least-squares start.
    A nonpositive model intensity anywhere aborts the iteration and the
    least-squares solution is returned with ``fallback`` set.
    """
    H = getattr(H, "columns", H)
    g = np.ravel(g).astype(float)
    if np.any(g < 0):
        raise ValueError("Poisson counts must be nonnegative")
    if b <= 0:
        raise ValueError("background must be positive")
    Hp, deficient = _pinv(H)
    f_G = Hp @ (g - b)
    f = f_G.copy()
    for it in range(1, max_iters + 1):
        Hf = H @ f
        denom = Hf + b
        if np.any(denom <= 0):
            logger.info("fixed point hit a nonpositive intensity at iteration %d; keeping least squares", it)
            return FluxFit(f_G, it, False, True, deficient)
        f_new = f_G + Hp @ ((denom - g) * Hf / denom)
        if not np.all(np.isfinite(f_new)):
            return FluxFit(f_G, it, False, True, deficient)
        scale = np.linalg.norm(f)
        step = np.linalg.norm(f_new - f)
        f = f_new
        if step <= tol * scale or (scale == 0 and step == 0):
            return FluxFit(f, it, True, False, deficient)
    return FluxFit(f, max_iters, False, False, deficient)


def false_positive_filter(F, gamma: float = 0.2) -> list[int]:
    """Rows with a negative entry or a total at most ``gamma`` times the largest total."""
    values = np.asarray(getattr(F, "values", F), dtype=float)
    if values.size == 0:
        return []
    values = values.reshape(values.shape[0], -1)
    sums = values.sum(axis=1)
    thresh = gamma * sums.max()
    flagged = np.any(values < 0, axis=1) | (sums <= thresh)
    return [int(j) for j in np.flatnonzero(flagged)]


def estimate_fluxes(columns: Sequence[np.ndarray], images: np.ndarray, b: float,
                    noise_model: str = "poisson", max_iters: int = 100, tol: float = 1e-6) -> np.ndarray:
    """M x K flux matrix; ``columns[i]`` is the L x M PSF matrix of band ``i``."""
    out = []
    for H, g in zip(columns, images):
        if noise_model == "poisson":
            fit = flux_poisson_fixed_point(H, g, b, max_iters, tol)
        elif noise_model == "gaussian":
            fit = flux_gaussian(H, g, b)
        else:
            raise ValueError(f"unknown noise model {noise_model!r}")
        out.append(fit.flux)
    return np.stack(out, axis=1)


def stage2_alternate(detections: Sequence[Detection], stack, dicts: Sequence[PsfDictionary],
                     gamma: float = 0.2, noise_model: str | None = None, max_iters: int = 100,
                     tol: float = 1e-6) -> Stage2Result:
    """Fit fluxes, drop flagged detections, refit, until nothing is flagged.

    ``stack`` supplies one image per dictionary (same band order) and the
    background level.  Centroid merging is expected to have happened already.
    """
    images = np.asarray(stack.images, dtype=float)
    if images.shape[0] != len(dicts):
        raise ValueError(f"{images.shape[0]} images but {len(dicts)} dictionaries")
    if noise_model is None:
        noise_model = "gaussian" if stack.noise_model == "gaussian" else "poisson"
    bands = [d.band for d in dicts]
    dets = list(detections)
    if not dets:
        logger.warning("stage 2 received no detections")
        return Stage2Result([], FluxTable(np.zeros((0, len(bands))), bands), 0)

    # PSF columns are fixed per detection, so build them once and slice.
    full = [build_psf_matrix(dets, d).columns for d in dicts]
    flat = images.reshape(images.shape[0], -1)
    alive = list(range(len(dets)))
    removed: list[Detection] = []
    history = []
    rounds = 0
    while alive:
        rounds += 1
        F = estimate_fluxes([H[:, alive] for H in full], flat, stack.background, noise_model, max_iters, tol)
        flags = false_positive_filter(F, gamma)
        history.append((FluxTable(F, bands), list(alive), flags))
        if not flags:
            return Stage2Result([dets[j] for j in alive], FluxTable(F, bands), rounds, removed, list(alive),
                                history)
        drop = {alive[j] for j in flags}
        removed.extend(dets[j] for j in sorted(drop))
        alive = [j for j in alive if j not in drop]
    logger.warning("stage 2 removed every detection")
    return Stage2Result([], FluxTable(np.zeros((0, len(bands))), bands), rounds, removed, [], history)


def write_flux_table(result: Stage2Result, path) -> None:
    """CSV rows ``(detection_id, wavelength_nm, flux, flagged)``.

    Ids index the Stage 2 input list.  Survivors carry their final fluxes;
    removed detections carry the fluxes of the round that flagged them.
    """
    rows = []
    for j, vals in zip(result.kept_ids, result.fluxes.values):
        rows.append((j, result.fluxes.bands, vals, 0))
    for table, ids, flags in result.history:
        for r in flags:
            rows.append((ids[r], table.bands, table.values[r], 1))
    rows.sort(key=lambda r: r[0])
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["detection_id", "wavelength_nm", "flux", "flagged"])
        for j, bands, vals, flagged in rows:
            for band, v in zip(bands, vals):
                w.writerow([j, f"{band.wavelength_nm:.2f}", f"{v:.6f}", flagged])
