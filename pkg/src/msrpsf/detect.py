"""Turn a voxel estimate into point detections and score them against truth."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

TOL_XY = 2.0
TOL_Z = 1.0
_EPS = 1e-9


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    zeta_index: float
    total_voxel_flux: float

    @property
    def coords(self) -> np.ndarray:
        return np.array([self.x, self.y, self.zeta_index])


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    false_positives: list[int] = field(default_factory=list)
    false_negatives: list[int] = field(default_factory=list)
    n_detections: int = 0
    n_truth: int = 0

    @property
    def n_matched(self) -> int:
        return len(self.pairs)


def extract_detections(voxels: np.ndarray, floor: float | None = None) -> list[Detection]:
    """Every voxel above ``floor`` as a single-voxel candidate.

    The default floor is ``1e-8`` of the largest voxel.
    """
    voxels = getattr(voxels, "voxels", voxels)
    vmax = float(voxels.max()) if voxels.size else 0.0
    if vmax <= 0:
        return []
    if floor is None:
        floor = 1e-8 * vmax
    if floor < 0:
        raise ValueError("floor must be >= 0")
    idx = np.argwhere(voxels > floor)
    return [Detection(float(p), float(q), float(r), float(voxels[p, q, r])) for p, q, r in idx]


def _components(coords: np.ndarray, tol_xy: float, tol_z: float) -> np.ndarray:
    n = len(coords)
    if n == 0:
        return np.zeros(0, dtype=int)
    # Chebyshev distance on tolerance-scaled axes: adjacent iff all |d| <= tol.
    scale = np.array([1.0 / tol_xy if tol_xy > 0 else 1e12,
                      1.0 / tol_xy if tol_xy > 0 else 1e12,
                      1.0 / tol_z if tol_z > 0 else 1e12])
    tree = cKDTree(coords * scale)
    pairs = tree.query_pairs(1.0 + _EPS, p=np.inf, output_type="ndarray")
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n)) if len(pairs) else \
        coo_matrix((n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def _merge_once(cands: Sequence[Detection], tol_xy: float, tol_z: float) -> list[Detection]:
    coords = np.array([c.coords for c in cands])
    flux = np.array([c.total_voxel_flux for c in cands])
    labels = _components(coords, tol_xy, tol_z)
    out = []
    for lab in range(labels.max() + 1):
        sel = labels == lab
        f = flux[sel]
        total = f.sum()
        w = f / total if total > 0 else np.full(f.size, 1.0 / f.size)
        c = (coords[sel] * w[:, None]).sum(axis=0)
        out.append(Detection(float(c[0]), float(c[1]), float(c[2]), float(total)))
    out.sort(key=lambda d: (d.x, d.y, d.zeta_index))
    return out


def merge_clusters(candidates: Sequence[Detection], tol_xy: float = TOL_XY, tol_z: float = TOL_Z) -> list[Detection]:
    """Replace tolerance-connected groups by flux-weighted centroids.

    Merging repeats until no two centroids are adjacent, so the result is a
    fixed point of this function.
    """
    if tol_xy < 0 or tol_z < 0:
        raise ValueError("tolerances must be >= 0")
    dets = list(candidates)
    if not dets:
        return []
    while True:
        merged = _merge_once(dets, tol_xy, tol_z)
        if len(merged) == len(dets):
            return merged
        dets = merged


def within_tolerance(offset, tol_xy: float = TOL_XY, tol_z: float = TOL_Z) -> bool:
    dx, dy, dz = (abs(float(v)) for v in offset)
    return dx <= tol_xy + _EPS and dy <= tol_xy + _EPS and dz <= tol_z + _EPS


def match_truth(detections: Sequence[Detection], truth: np.ndarray, tol_xy: float = TOL_XY,
                tol_z: float = TOL_Z) -> MatchResult:
    """Greedy nearest-first one-to-one matching.

    ``truth`` is an ``M x 3`` array of ``(x, y, zeta_index)``.  Candidate pairs
    are ranked by tolerance-scaled Euclidean distance; ties break on the
    detection coordinates, then the truth index, so the result does not
    depend on the order of ``detections``.
    """
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    det = np.array([d.coords for d in detections]).reshape(-1, 3)
    cand = []
    for i, dc in enumerate(det):
        for j, tc in enumerate(truth):
            off = dc - tc
            if within_tolerance(off, tol_xy, tol_z):
                sx = tol_xy if tol_xy > 0 else 1.0
                sz = tol_z if tol_z > 0 else 1.0
                dist = float(np.sqrt((off[0] / sx) ** 2 + (off[1] / sx) ** 2 + (off[2] / sz) ** 2))
                cand.append((dist, tuple(dc), j, i))
    cand.sort(key=lambda c: c[:3])
    used_d, used_t = set(), set()
    res = MatchResult(n_detections=len(det), n_truth=len(truth))
    for _, _, j, i in cand:
        if i in used_d or j in used_t:
            continue
        used_d.add(i)
        used_t.add(j)
        res.pairs.append((i, j))
    res.pairs.sort()
    res.false_positives = [i for i in range(len(det)) if i not in used_d]
    res.false_negatives = [j for j in range(len(truth)) if j not in used_t]
    return res


def write_detections(detections: Sequence[Detection], path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "zeta_index", "flux"])
        for d in detections:
            w.writerow([f"{d.x:.6f}", f"{d.y:.6f}", f"{d.zeta_index:.6f}", f"{d.total_voxel_flux:.6f}"])


def read_detections(path) -> list[Detection]:
    with open(Path(path), newline="") as fh:
        return [Detection(float(r["x"]), float(r["y"]), float(r["zeta_index"]), float(r["flux"]))
                for r in csv.DictReader(fh)]
