"""Experiment configuration, reproducible trials and parameter sweeps.

A trial draws a random scene from ``(seed, trial)``, renders every band,
adds noise, and runs Stage 1 on the first ``stage1_band_count`` bands,
centroid merging, Stage 2 on the first ``stage2_band_count`` bands and
Stage 3 against the library.  Sweeps re-run trials over one parameter and
reuse Stage 1 results whenever the Stage 1 inputs are unchanged.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from . import __version__
from . import rng as rng_mod
from .detect import extract_detections, match_truth, merge_clusters
from .metrics import classification_scores, localization_scores
from .optics import ApertureSpec, BandSpec, build_dictionaries, default_zeta_grid
from .scene import (PointSource, Scene, apply_gaussian, apply_poisson, bundled_library,
                    load_spectral_library, render_noiseless)
from .stage1 import SolverConfig, solve_stage1
from .stage2 import stage2_alternate
from .stage3 import assign_labels, unmix_simplex_ls

logger = logging.getLogger(__name__)

POISSON_BANDS = (400.0, 548.5, 697.0, 845.5, 993.9)
GAUSSIAN_BANDS = (1530.0, 1736.4, 1969.7, 2203.0, 2436.4)
POISSON_BANDS_8 = (400.00, 484.84, 569.69, 654.54, 739.39, 824.24, 909.09, 993.93)
GAUSSIAN_BANDS_8 = (1503.0, 1630.3, 1757.6, 1884.8, 2012.1, 2139.4, 2266.7, 2393.9)

THREADS_ENV = "MSRPSF_THREADS"
SWEEP_KINDS = ("bands_stage1", "bands_stage2", "gamma", "epsilon", "regularizer")

# Per-band solver values; multiplied by the Stage 1 band count when
# ``scale_solver_with_bands`` is on, since the data term sums over bands.
POISSON_SOLVER = SolverConfig(mu=0.0625, beta0=0.01, beta1=0.025, min_inner=200)
GAUSSIAN_SOLVER = SolverConfig(mu=2.5, beta0=0.01, beta1=0.025, min_inner=200, noise_model="gaussian",
                               regularizer="l1")


@dataclass
class ExperimentConfig:
    noise_model: str = "poisson"
    bands_nm: tuple = POISSON_BANDS
    stage1_band_count: int = 4
    stage2_band_count: int = 5
    trials: int = 20
    seed: int = 0
    source_count: int = 15
    sources_per_material: int = 3
    solver: SolverConfig = field(default_factory=lambda: dataclasses.replace(POISSON_SOLVER))
    gamma: float = 0.2
    output_dir: str = "runs"
    scale_solver_with_bands: bool = True
    image_side: int = 96
    depth_count: int = 21
    zeta_max: float = 21.0
    background: float = 10.0
    photon_budget: float = 2000.0
    flux_normalization: str = "library_peak"
    noise_fraction: float = 0.10
    pupil_plane_extent: float = 4.0
    reference_wavelength_nm: float = 400.0
    zone_count: int = 7
    margin: float = 6.0
    min_separation: float = 4.0
    library_path: str | None = None

    def __post_init__(self):
        self.bands_nm = tuple(float(b) for b in self.bands_nm)
        if isinstance(self.solver, dict):
            self.solver = SolverConfig(**self.solver)
        if self.noise_model not in ("poisson", "gaussian"):
            raise ValueError(f"unknown noise model {self.noise_model!r}")
        if not 1 <= self.stage1_band_count <= self.stage2_band_count <= len(self.bands_nm):
            raise ValueError("need 1 <= stage1_band_count <= stage2_band_count <= number of bands")
        if self.stage2_band_count < 2:
            raise ValueError("stage 3 unmixing needs stage2_band_count >= 2")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.source_count < 1 or self.sources_per_material < 1:
            raise ValueError("source counts must be >= 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.solver.noise_model != self.noise_model:
            raise ValueError("solver noise model must match the experiment noise model")

    @classmethod
    def gaussian(cls, **overrides) -> "ExperimentConfig":
        """Infrared Gaussian-noise setup with the doubled aperture."""
        base = dict(noise_model="gaussian", bands_nm=GAUSSIAN_BANDS, solver=dataclasses.replace(GAUSSIAN_SOLVER),
                    pupil_plane_extent=2.0, reference_wavelength_nm=1530.0)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bands_nm"] = list(self.bands_nm)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "solver" in data and isinstance(data["solver"], dict):
            sknown = {f.name for f in dataclasses.fields(SolverConfig)}
            bad = set(data["solver"]) - sknown
            if bad:
                raise ValueError(f"unknown solver keys: {sorted(bad)}")
            data["solver"] = SolverConfig(**data["solver"])
        return cls(**data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def aperture(self) -> ApertureSpec:
        return ApertureSpec(zone_count_L=self.zone_count, pupil_plane_extent=self.pupil_plane_extent,
                            reference_wavelength_nm=self.reference_wavelength_nm)

    def bands(self) -> list[BandSpec]:
        return [BandSpec(w, i) for i, w in enumerate(self.bands_nm)]

    def effective_solver(self, band_count: int | None = None) -> SolverConfig:
        k = self.stage1_band_count if band_count is None else band_count
        if not self.scale_solver_with_bands:
            return self.solver
        return dataclasses.replace(self.solver, mu=self.solver.mu * k, beta1=self.solver.beta1 * k)

    def stage1_key(self) -> str:
        """Hash of everything Stage 1 depends on (images, bands and solver)."""
        d = self.to_dict()
        for k in ("stage2_band_count", "gamma", "output_dir", "trials"):
            d.pop(k)
        # Noise streams are keyed per band, so later bands do not affect Stage 1.
        d["bands_nm"] = d["bands_nm"][: self.stage1_band_count]
        d["solver"] = dataclasses.asdict(self.effective_solver())
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class TrialReport:
    trial: int
    seed: int
    stage1_recall: float = math.nan
    stage1_precision: float = math.nan
    recall: float = math.nan
    precision: float = math.nan
    overall_accuracy: float = math.nan
    kappa: float = math.nan
    stage1_detections: int = 0
    detections: int = 0
    stage1_iterations: int = 0
    confusion: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    failed: bool = False
    error: str = ""

    def to_dict(self, include_timings: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_timings:
            d.pop("timings")
        return d


SCORE_FIELDS = ("stage1_recall", "stage1_precision", "recall", "precision", "overall_accuracy", "kappa")
TIME_FIELDS = ("stage1", "stage2", "stage3", "total")


class Resources:
    """Dictionaries and the library, built once per optical configuration."""

    def __init__(self):
        self._dicts: dict = {}
        self._libs: dict = {}
        # (stage1 key, trial) -> (detections, stage 1 seconds, iterations)
        self.stage1_cache: dict = {}

    def dictionaries(self, cfg: ExperimentConfig):
        key = (cfg.bands_nm, cfg.pupil_plane_extent, cfg.reference_wavelength_nm, cfg.zone_count,
               cfg.image_side, cfg.depth_count, cfg.zeta_max)
        if key not in self._dicts:
            self._dicts[key] = build_dictionaries(cfg.bands(), default_zeta_grid(cfg.depth_count, cfg.zeta_max),
                                                  cfg.aperture(), cfg.image_side)
        return self._dicts[key]

    def library(self, cfg: ExperimentConfig):
        if cfg.library_path not in self._libs:
            self._libs[cfg.library_path] = (load_spectral_library(cfg.library_path) if cfg.library_path
                                            else bundled_library())
        return self._libs[cfg.library_path]


_DEFAULT_RESOURCES = Resources()


def thread_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def random_scene(cfg: ExperimentConfig, trial: int, n_materials: int) -> Scene:
    """Uniform positions and depths; materials fixed at ``sources_per_material`` each."""
    needed = math.ceil(cfg.source_count / cfg.sources_per_material)
    if needed > n_materials:
        raise ValueError(f"{cfg.source_count} sources at {cfg.sources_per_material} per material need "
                         f"{needed} materials, library has {n_materials}")
    g = rng_mod.stream(cfg.seed, trial, 0, rng_mod.SCENE)
    lo, hi = cfg.margin, cfg.image_side - cfg.margin
    sources: list[PointSource] = []
    attempts = 0
    while len(sources) < cfg.source_count:
        attempts += 1
        if attempts > 100000:
            raise RuntimeError("could not place sources with the requested separation")
        x, y = g.uniform(lo, hi, 2)
        z = g.uniform(-cfg.zeta_max, cfg.zeta_max)
        if all(max(abs(x - s.x), abs(y - s.y)) > cfg.min_separation for s in sources):
            mat = len(sources) // cfg.sources_per_material
            sources.append(PointSource(float(x), float(y), float(z), mat, cfg.photon_budget))
    return Scene(sources, cfg.background, cfg.seed)


def simulate(cfg: ExperimentConfig, trial: int, resources: Resources | None = None):
    """Scene and noisy image stack for one trial (all configured bands)."""
    res = resources or _DEFAULT_RESOURCES
    dicts = res.dictionaries(cfg)
    lib = res.library(cfg)
    scene = random_scene(cfg, trial, lib.n_endmembers)
    clean = render_noiseless(scene, dicts, lib, cfg.flux_normalization)
    if cfg.noise_model == "poisson":
        stack = apply_poisson(clean, cfg.seed, key=(trial,))
    else:
        stack = apply_gaussian(clean, cfg.noise_fraction, cfg.seed, key=(trial,))
    return scene, stack


def truth_table(scene: Scene, dictionary) -> np.ndarray:
    return np.array([[s.x, s.y, dictionary.index_of_zeta_ref(s.zeta_ref)] for s in scene.sources])


def run_trial(cfg: ExperimentConfig, trial: int, resources: Resources | None = None) -> TrialReport:
    """Full pipeline for one trial; failures are recorded rather than raised."""
    report = TrialReport(trial=trial, seed=cfg.seed)
    try:
        with sfft.set_workers(thread_count()):
            _run_trial(cfg, trial, resources or _DEFAULT_RESOURCES, report)
    except Exception as exc:  # noqa: BLE001 - a failed trial must not stop the run
        logger.error("trial %d failed: %s", trial, exc)
        report.failed = True
        report.error = f"{type(exc).__name__}: {exc}"
        logger.debug("%s", traceback.format_exc())
    return report


def _run_trial(cfg: ExperimentConfig, trial: int, res: Resources, report: TrialReport) -> None:
    t0 = time.perf_counter()
    dicts = res.dictionaries(cfg)
    lib = res.library(cfg)
    scene, stack = simulate(cfg, trial, res)
    truth = truth_table(scene, dicts[0])
    k1, k2 = cfg.stage1_band_count, cfg.stage2_band_count

    key = (cfg.stage1_key(), trial)
    if key in res.stage1_cache:
        merged, t_s1, iters = res.stage1_cache[key]
    else:
        ts = time.perf_counter()
        est, state = solve_stage1(stack.subset(range(k1)), dicts[:k1], cfg.effective_solver())
        merged = merge_clusters(extract_detections(est.voxels))
        t_s1 = time.perf_counter() - ts
        iters = state.iterations
        res.stage1_cache[key] = (merged, t_s1, iters)
    report.stage1_iterations = iters
    report.stage1_detections = len(merged)
    m1 = match_truth(merged, truth)
    report.stage1_recall, report.stage1_precision, _ = localization_scores(m1)

    ts = time.perf_counter()
    s2 = stage2_alternate(merged, stack.subset(range(k2)), dicts[:k2], cfg.gamma, cfg.noise_model)
    t_s2 = time.perf_counter() - ts
    report.detections = len(s2.detections)
    m2 = match_truth(s2.detections, truth)
    report.recall, report.precision, flags = localization_scores(m2)
    report.flags.extend(flags)

    ts = time.perf_counter()
    n_classes = lib.n_endmembers
    if m2.pairs:
        abund = unmix_simplex_ls(s2.fluxes.values, lib.at_bands(cfg.bands()[:k2]))
        labels = assign_labels(abund)
        pred = [int(labels[i]) for i, _ in m2.pairs]
        true = [scene.sources[j].material for _, j in m2.pairs]
        oa, kappa, C = classification_scores(pred, true, n_classes)
    else:
        oa, kappa, C = math.nan, math.nan, np.zeros((n_classes, n_classes), dtype=int)
        report.flags.append("classification_undefined")
    t_s3 = time.perf_counter() - ts
    report.overall_accuracy, report.kappa = float(oa), float(kappa)
    report.confusion = C.tolist()
    report.timings = {"stage1": t_s1, "stage2": t_s2, "stage3": t_s3, "total": time.perf_counter() - t0}


def provenance(cfg: ExperimentConfig, resources: Resources | None = None) -> dict:
    res = resources or _DEFAULT_RESOURCES
    return {"config_hash": cfg.config_hash(), "seed": cfg.seed, "library_checksum": res.library(cfg).checksum,
            "version": __version__}


def _mean(values) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


def aggregate(reports: Sequence[TrialReport]) -> dict:
    """Arithmetic means over trials; undefined (nan) entries and failed trials are skipped."""
    ok = [r for r in reports if not r.failed]
    out = {f: _mean([getattr(r, f) for r in ok]) for f in SCORE_FIELDS}
    for f in TIME_FIELDS:
        out[f"time_{f}"] = _mean([r.timings.get(f, math.nan) for r in ok])
    out["trials"] = len(reports)
    out["failed"] = len(reports) - len(ok)
    return out


def run_trials(cfg: ExperimentConfig, resources: Resources | None = None) -> list[TrialReport]:
    return [run_trial(cfg, t, resources) for t in range(cfg.trials)]


def sweep_configs(cfg: ExperimentConfig, kind: str,
                  values: Sequence | None = None) -> list[tuple[object, ExperimentConfig]]:
    """Sweep points ``(value, config)``; ``values`` defaults to the standard grid for ``kind``."""
    if kind not in SWEEP_KINDS:
        raise ValueError(f"unknown sweep {kind!r}; choose from {SWEEP_KINDS}")
    rep = dataclasses.replace
    if kind == "bands_stage1":
        values = values or list(range(1, cfg.stage2_band_count))
        return [(int(v), rep(cfg, stage1_band_count=int(v))) for v in values]
    if kind == "bands_stage2":
        bands = POISSON_BANDS_8 if cfg.noise_model == "poisson" else GAUSSIAN_BANDS_8
        base = rep(cfg, bands_nm=bands, stage2_band_count=max(cfg.stage1_band_count, 2))
        values = values or list(range(base.stage1_band_count, len(bands) + 1))
        return [(int(v), rep(base, stage2_band_count=int(v))) for v in values]
    if kind == "gamma":
        values = values or [0.1, 0.2, 0.3, 0.4, 0.5]
        return [(float(v), rep(cfg, gamma=float(v))) for v in values]
    if kind == "epsilon":
        values = values or [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8]
        return [(float(v), rep(cfg, solver=rep(cfg.solver, epsilon=float(v)))) for v in values]
    values = values or ["l1", "nonconvex"]
    return [(str(v), rep(cfg, solver=rep(cfg.solver, regularizer=str(v)))) for v in values]


def run_sweep(cfg: ExperimentConfig, kind: str, values: Sequence | None = None, out_dir=None,
              resources: Resources | None = None) -> list[dict]:
    """Mean scores and timings per sweep point; optionally written as CSV."""
    res = resources or _DEFAULT_RESOURCES
    rows, per_trial = [], []
    for value, point in sweep_configs(cfg, kind, values):
        logger.info("sweep %s = %s", kind, value)
        reports = run_trials(point, res)
        summary = {kind: value, **aggregate(reports)}
        rows.append(summary)
        per_trial.extend({kind: value, **_flat(r)} for r in reports)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / f"sweep_{kind}_trials.csv", per_trial)
        _write_csv(out / f"sweep_{kind}.csv", rows)
        (out / f"sweep_{kind}_provenance.json").write_text(
            json.dumps({**provenance(cfg, res), "sweep": kind, "config": cfg.to_dict()}, indent=2, sort_keys=True))
    return rows


def _flat(r: TrialReport) -> dict:
    d = {k: getattr(r, k) for k in ("trial", "seed", *SCORE_FIELDS, "stage1_detections", "detections",
                                     "stage1_iterations", "failed")}
    for f in TIME_FIELDS:
        d[f"time_{f}"] = r.timings.get(f, math.nan)
    return d


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            # repr keeps full precision so the summary can be recomputed exactly.
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def reaggregate(trials_csv, kind: str) -> list[dict]:
    """Recompute a sweep summary from its per-trial CSV."""
    groups: dict = {}
    with open(trials_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            groups.setdefault(row[kind], []).append(row)
    out = []
    for value, rows in groups.items():
        ok = [r for r in rows if r["failed"] != "True"]
        d = {kind: value}
        for f in SCORE_FIELDS:
            d[f] = _mean([float(r[f]) for r in ok])
        for f in TIME_FIELDS:
            d[f"time_{f}"] = _mean([float(r[f"time_{f}"]) for r in ok])
        d["trials"] = len(rows)
        d["failed"] = len(rows) - len(ok)
        out.append(d)
    return out


def write_trial_report(report: TrialReport, cfg: ExperimentConfig, path, resources: Resources | None = None,
                       include_timings: bool = False) -> None:
    """JSON report with provenance; timings are left out by default so reruns are byte-identical."""
    data = {**report.to_dict(include_timings), "provenance": provenance(cfg, resources)}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
