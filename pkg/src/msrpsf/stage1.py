"""Stage 1: sparse 3D localization on the voxel lattice.

The observation model for band ``i`` is ``T(A_i * X) + b`` where ``*`` is a
periodic 3D convolution and ``T`` extracts the last axial slice.  Kernels are
arranged so that a unit voxel at ``(p, q, r)`` reproduces dictionary slice
``r`` centered at pixel ``(p, q)`` in that last slice.

Poisson data use a KL fidelity with a nonconvex ``x / (a + x)`` penalty
handled by iteratively reweighted l1 outer loops; each weighted-l1 subproblem
is solved by ADMM with per-band splitting variables ``U0[i] ~ A_i * X`` and
``U1 ~ X >= 0``.  Gaussian data use a quadratic fidelity with a plain l1
penalty and a single ADMM loop.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .optics import PsfDictionary

logger = logging.getLogger(__name__)

GOLDEN = (1 + math.sqrt(5)) / 2


class NumericalFailure(RuntimeError):
    pass


@dataclass
class SolverConfig:
    mu: float = 0.05
    a: float = 1.0
    beta0: float = 1.0
    beta1: float = 1.0
    rho: float = 1.618
    epsilon: float = 1e-5
    max_outer: int = 2
    max_inner: int = 400
    min_inner: int = 20
    noise_model: str = "poisson"
    # "nonconvex" (IRL1) or "l1" (constant weights mu, single outer loop).
    regularizer: str = "nonconvex"
    fourier_duals: bool = False

    def __post_init__(self):
        if not 0 < self.rho < GOLDEN:
            raise ValueError(f"rho must lie in (0, {GOLDEN:.6f}), got {self.rho}")
        if min(self.beta0, self.beta1) <= 0 or self.epsilon <= 0 or self.a <= 0 or self.mu < 0:
            raise ValueError("penalties, epsilon and a must be positive; mu nonnegative")
        if self.noise_model not in ("poisson", "gaussian"):
            raise ValueError(f"unknown noise model {self.noise_model!r}")
        if self.regularizer not in ("nonconvex", "l1"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration limits must be >= 1")


@dataclass
class LatticeEstimate:
    voxels: np.ndarray


@dataclass
class SolverState:
    X: np.ndarray
    U0: np.ndarray
    U1: np.ndarray
    eta0: np.ndarray
    eta1: np.ndarray
    weights: np.ndarray
    objective_trace: list[float] = field(default_factory=list)
    residual0_trace: list[float] = field(default_factory=list)
    residual1_trace: list[float] = field(default_factory=list)
    time_trace: list[float] = field(default_factory=list)
    outer_index: list[int] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    def write_diagnostics(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "outer", "data_term", "primal_residual_u0", "primal_residual_u1", "wall_time_s"])
            for t, row in enumerate(zip(self.outer_index, self.objective_trace, self.residual0_trace,
                                        self.residual1_trace, self.time_trace), start=1):
                w.writerow([t, *row])


# ---------------------------------------------------------------- operators

def lattice_kernel(slices: np.ndarray) -> np.ndarray:
    """3D convolution kernel for a dictionary stack (see module docstring)."""
    return np.fft.ifftshift(slices[:, :, ::-1], axes=(0, 1))


def conv3d_periodic(kernel: np.ndarray, X: np.ndarray) -> np.ndarray:
    return sfft.irfftn(sfft.rfftn(kernel) * sfft.rfftn(X), s=X.shape)


def extract_last(volume: np.ndarray) -> np.ndarray:
    return volume[..., -1]


def forward_image(X: np.ndarray, dictionary: PsfDictionary) -> np.ndarray:
    """``T(A * X)``: the noiseless band image of a voxel tensor, without background."""
    return extract_last(conv3d_periodic(lattice_kernel(dictionary.slices), X))


def _slice_spectra(dicts: Sequence[PsfDictionary]) -> np.ndarray:
    # Per-slice 2D spectra: T(A*X) = irfft2(sum_r B[..., r] * rfft2(X[..., r])).
    return np.stack([sfft.rfft2(np.fft.ifftshift(d.slices, axes=(0, 1)), axes=(0, 1)) for d in dicts])


def _images_from_spectra(B: np.ndarray, X: np.ndarray) -> np.ndarray:
    Xh = sfft.rfft2(X, axes=(0, 1))
    return sfft.irfft2((B * Xh[None]).sum(axis=-1), s=X.shape[:2], axes=(1, 2))


def _images(dicts, X):
    return _images_from_spectra(_slice_spectra(dicts), X)


def _as_images(stack_or_images) -> np.ndarray:
    imgs = getattr(stack_or_images, "images", stack_or_images)
    imgs = np.asarray(imgs, dtype=float)
    return imgs[None] if imgs.ndim == 2 else imgs


def _kl(T: np.ndarray, G: np.ndarray, b: float) -> float:
    arg = T + b
    if np.any(arg <= 0):
        raise ValueError("log argument must be positive; need X >= 0 and b > 0")
    # 0 * log(.) contributes nothing wherever G == 0.
    return float(T.sum() - np.sum(G * np.log(arg)))


def kl_data_term(X, dicts: Sequence[PsfDictionary], stack, b: float) -> float:
    """Sum over bands of ``<1, T(A_i*X) - G_i log(T(A_i*X) + b)>``."""
    G = _as_images(stack)
    return _kl(_images(dicts, X), G, b)


def kl_gradient(X, dicts: Sequence[PsfDictionary], stack, b: float) -> np.ndarray:
    G = _as_images(stack)
    T = _images(dicts, X)
    resid = 1.0 - G / (T + b)
    grad = np.zeros_like(X)
    for d, r in zip(dicts, resid):
        Z = np.zeros_like(X)
        Z[..., -1] = r
        K = sfft.rfftn(lattice_kernel(d.slices))
        grad += sfft.irfftn(np.conj(K) * sfft.rfftn(Z), s=X.shape)
    return grad


def gaussian_data_term(X, dicts: Sequence[PsfDictionary], stack, b: float) -> float:
    G = _as_images(stack)
    return float(0.5 * np.sum((_images(dicts, X) + b - G) ** 2))


# ---------------------------------------------------------------- closed-form steps

def irl1_weights(X_hat, mu: float, a: float):
    return a * mu / (a + np.asarray(X_hat)) ** 2


def admm_u0_poisson(xi0, G_band, b: float, beta0: float):
    """Minimize ``u - G log(u + b) + beta0/2 (u - xi0)^2`` on the last slice.

    The positive root of ``beta0 v^2 + (1 - beta0 b - beta0 xi0) v - G = 0``
    gives ``v = u + b``.  Other slices carry no fidelity term and pass through.
    """
    xi0 = np.asarray(xi0, dtype=float)
    u = xi0.copy()
    last = xi0[..., -1]
    xi1 = 1.0 - beta0 * b - beta0 * last
    u[..., -1] = (-xi1 + np.sqrt(xi1 * xi1 + 4.0 * beta0 * np.asarray(G_band))) / (2.0 * beta0) - b
    return u


def admm_u0_gaussian(xi0, G_band, b: float, beta0: float):
    xi0 = np.asarray(xi0, dtype=float)
    u = xi0.copy()
    u[..., -1] = (np.asarray(G_band) - b + beta0 * xi0[..., -1]) / (1.0 + beta0)
    return u


def admm_u1(v, weights, beta1: float):
    return np.maximum(np.asarray(v) - np.asarray(weights) / beta1, 0.0)


def admm_x_multiband(U0_all, eta0_all, U1, eta1, dicts: Sequence[PsfDictionary], beta0: float, beta1: float):
    """Closed-form X step of the multiband ADMM, solved in the 3D Fourier domain."""
    r = beta1 / beta0
    num = r * np.fft.fftn(U1 - eta1)
    den = np.full(U1.shape, r, dtype=float)
    for d, U0, e0 in zip(dicts, U0_all, eta0_all):
        K = np.fft.fftn(lattice_kernel(d.slices))
        num = num + np.conj(K) * np.fft.fftn(U0 - e0)
        den = den + np.abs(K) ** 2
    X = np.fft.ifftn(num / den)
    scale = max(1.0, float(np.abs(X.real).max()))
    if np.abs(X.imag).max() > 1e-10 * scale:
        raise NumericalFailure("X update has a non-negligible imaginary part")
    return X.real


def stop_relative_change(trace: Sequence[float], epsilon: float) -> bool:
    if len(trace) < 2:
        raise ValueError("need at least two objective values")
    cur, prev = trace[-1], trace[-2]
    if cur == 0:
        logger.info("stopping statistic has zero denominator; treating as converged")
        return True
    return abs(cur - prev) / abs(cur) < epsilon


def _rfft_norm(Yh: np.ndarray, shape) -> float:
    """l2 norm of the real signal(s) whose rfftn over the trailing 3 axes is ``Yh``."""
    n_last = shape[-1]
    w = np.full(Yh.shape[-1], 2.0)
    w[0] = 1.0
    if n_last % 2 == 0:
        w[-1] = 1.0
    return float(np.sqrt(np.sum(w * np.abs(Yh) ** 2) / np.prod(shape)))


# ---------------------------------------------------------------- solver

def solve_stage1(stack, dicts: Sequence[PsfDictionary], config: SolverConfig, b: float | None = None,
                 callback=None) -> tuple[LatticeEstimate, SolverState]:
    """Run the Stage 1 solver; returns the nonnegative iterate ``U1`` and diagnostics."""
    G = _as_images(stack)
    if b is None:
        b = getattr(stack, "background")
    K = len(dicts)
    if G.shape[0] != K:
        raise ValueError(f"{G.shape[0]} images but {K} dictionaries")
    m, n, d = dicts[0].shape
    shape = (m, n, d)
    cfg = config
    poisson = cfg.noise_model == "poisson"
    if poisson and b <= 0:
        raise ValueError("Poisson model needs a positive background")

    axes = (1, 2, 3)
    Ahat = np.stack([sfft.rfftn(lattice_kernel(dd.slices)) for dd in dicts])
    ratio = cfg.beta1 / cfg.beta0
    Omega = 1.0 / ((np.abs(Ahat) ** 2).sum(axis=0) + ratio)
    Bspec = _slice_spectra(dicts)
    u0_step = admm_u0_poisson if poisson else admm_u0_gaussian
    data_term = (lambda T: _kl(T, G, b)) if poisson else (lambda T: float(0.5 * np.sum((T + b - G) ** 2)))

    X = np.zeros(shape)
    U1 = np.zeros(shape)
    eta1 = np.zeros(shape)
    eta0 = np.zeros((K,) + shape)
    AX = np.zeros((K,) + shape)
    U0 = np.zeros((K,) + shape)
    if cfg.fourier_duals:
        eta0_h = np.zeros(Ahat.shape, dtype=complex)
        eta1_h = np.zeros(Ahat.shape[1:], dtype=complex)
        X_h = np.zeros(Ahat.shape[1:], dtype=complex)

    state = SolverState(X, U0, U1, eta0, eta1, np.full(shape, cfg.mu))
    outer_loops = cfg.max_outer if (poisson and cfg.regularizer == "nonconvex") else 1
    t_start = time.perf_counter()
    for k in range(outer_loops):
        if not poisson or cfg.regularizer == "l1":
            W = np.full(shape, cfg.mu)
        else:
            # The first pass sees U1 = 0, so it is a weighted l1 solve with mu / a.
            W = irl1_weights(U1, cfg.mu, cfg.a)
        state.weights = W
        trace_local: list[float] = []
        for t in range(cfg.max_inner):
            if cfg.fourier_duals:
                xi0 = sfft.irfftn(Ahat * X_h[None] + eta0_h, s=shape, axes=axes)
                U0 = np.stack([u0_step(xi0[i], G[i], b, cfg.beta0) for i in range(K)])
                U0_h = sfft.rfftn(U0, axes=axes)
                U1 = admm_u1(sfft.irfftn(X_h + eta1_h, s=shape), W, cfg.beta1)
                U1_h = sfft.rfftn(U1)
                X_h = Omega * ((np.conj(Ahat) * (U0_h - eta0_h)).sum(axis=0) + ratio * (U1_h - eta1_h))
                AX_h = Ahat * X_h[None]
                eta0_h = eta0_h - cfg.rho * (U0_h - AX_h)
                eta1_h = eta1_h - cfg.rho * (U1_h - X_h)
                res0 = _rfft_norm(U0_h - AX_h, shape)
                res1 = _rfft_norm(U1_h - X_h, shape)
            else:
                xi0 = AX + eta0
                U0 = np.stack([u0_step(xi0[i], G[i], b, cfg.beta0) for i in range(K)])
                U1 = admm_u1(X + eta1, W, cfg.beta1)
                X_h = Omega * ((np.conj(Ahat) * sfft.rfftn(U0 - eta0, axes=axes)).sum(axis=0)
                               + ratio * sfft.rfftn(U1 - eta1))
                X = sfft.irfftn(X_h, s=shape)
                AX = sfft.irfftn(Ahat * X_h[None], s=shape, axes=axes)
                eta0 = eta0 - cfg.rho * (U0 - AX)
                eta1 = eta1 - cfg.rho * (U1 - X)
                res0 = float(np.sqrt(np.sum((U0 - AX) ** 2)))
                res1 = float(np.sqrt(np.sum((U1 - X) ** 2)))

            if not np.all(np.isfinite(U1)) or not np.isfinite(res0 + res1):
                raise NumericalFailure(f"non-finite iterate at outer {k}, inner {t}")
            T = _images_from_spectra(Bspec, U1)
            D = data_term(T)
            state.iterations += 1
            state.objective_trace.append(D)
            state.residual0_trace.append(res0)
            state.residual1_trace.append(res1)
            state.time_trace.append(time.perf_counter() - t_start)
            state.outer_index.append(k)
            trace_local.append(D)
            if callback is not None:
                callback(k, t, U1, X)
            if (len(trace_local) >= 2 and t + 1 >= cfg.min_inner and U1.any()
                    and stop_relative_change(trace_local, cfg.epsilon)):
                state.converged = True
                break
    state.X, state.U0, state.U1 = X, U0, U1
    if cfg.fourier_duals:
        X = sfft.irfftn(X_h, s=shape)
        state.X = X
        state.eta0 = sfft.irfftn(eta0_h, s=shape, axes=axes)
        state.eta1 = sfft.irfftn(eta1_h, s=shape)
    else:
        state.eta0, state.eta1 = eta0, eta1
    logger.debug("stage 1 finished after %d iterations (%.2fs)", state.iterations, state.time_trace[-1])
    return LatticeEstimate(U1.copy()), state
