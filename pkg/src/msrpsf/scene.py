"""Spectral libraries, scenes, the multiband forward model and sensor noise."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import rng as rng_mod
from .optics import BandSpec, PsfDictionary, psf_at

logger = logging.getLogger(__name__)

DEFAULT_BACKGROUND = 10.0
DEFAULT_PHOTON_BUDGET = 2000.0


class LibraryParseError(ValueError):
    pass


@dataclass
class SpectralLibrary:
    """Endmember signatures sampled at ``wavelengths_nm``.

    Each row of ``signatures`` has unit sum over the sampled wavelengths.
    """

    endmember_names: list[str]
    wavelengths_nm: np.ndarray
    signatures: np.ndarray
    checksum: str = ""

    @property
    def n_endmembers(self) -> int:
        return self.signatures.shape[0]

    def band_indices(self, bands: Sequence[BandSpec]) -> np.ndarray:
        """Nearest library sample for each band."""
        lo, hi = self.wavelengths_nm[0], self.wavelengths_nm[-1]
        step = np.min(np.diff(self.wavelengths_nm)) if self.wavelengths_nm.size > 1 else 0.0
        idx = []
        for b in bands:
            lam = b.wavelength_nm
            if lam < lo - step / 2 or lam > hi + step / 2:
                raise ValueError(f"band {lam} nm outside library coverage [{lo}, {hi}] nm")
            idx.append(int(np.argmin(np.abs(self.wavelengths_nm - lam))))
        return np.asarray(idx)

    def at_bands(self, bands: Sequence[BandSpec]) -> np.ndarray:
        """N x K matrix of library values at the bands' nearest samples."""
        return self.signatures[:, self.band_indices(bands)]


def _parse_library(lines, source: str) -> SpectralLibrary:
    reader = csv.reader(lines)
    try:
        header = next(reader)
    except StopIteration:
        raise LibraryParseError(f"{source}: empty file")
    header = [h.strip() for h in header]
    if len(header) < 2 or header[0].lower() != "wavelength_nm":
        raise LibraryParseError(f"{source}: header must be 'wavelength_nm' followed by endmember names")
    names = header[1:]
    rows = []
    for line_no, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise LibraryParseError(f"{source}: row {line_no} has {len(row)} cells, expected {len(header)}")
        vals = []
        for col, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise LibraryParseError(f"{source}: row {line_no}, column {col + 1} ({header[col]}): "
                                        f"non-numeric value {cell!r}")
            if not np.isfinite(v):
                raise LibraryParseError(f"{source}: row {line_no}, column {col + 1}: non-finite value")
            if col > 0 and v < 0:
                raise LibraryParseError(f"{source}: row {line_no}, column {col + 1} ({header[col]}): "
                                        f"negative reflectance {v}")
            vals.append(v)
        rows.append(vals)
    if len(rows) < 2:
        raise LibraryParseError(f"{source}: need at least 2 wavelength rows, found {len(rows)}")
    data = np.asarray(rows)
    order = np.argsort(data[:, 0], kind="stable")
    data = data[order]
    wl = data[:, 0]
    if np.any(np.diff(wl) <= 0):
        raise LibraryParseError(f"{source}: duplicate wavelengths")
    sig = data[:, 1:].T
    sums = sig.sum(axis=1)
    if np.any(sums <= 0):
        bad = names[int(np.argmin(sums))]
        raise LibraryParseError(f"{source}: endmember {bad!r} is identically zero")
    sig = sig / sums[:, None]
    h = hashlib.sha256(",".join(names).encode())
    h.update(np.ascontiguousarray(data).tobytes())
    return SpectralLibrary(names, wl, sig, checksum=h.hexdigest()[:16])


def load_spectral_library(path) -> SpectralLibrary:
    path = Path(path)
    with open(path, newline="") as fh:
        return _parse_library(fh, str(path))


def bundled_library() -> SpectralLibrary:
    """Synthetic five-material library shipped with the package."""
    text = resources.files("msrpsf.data").joinpath("synthetic_library.csv").read_text()
    return _parse_library(text.splitlines(), "synthetic_library.csv")


def band_signature(lib: SpectralLibrary, material: int, bands: Sequence[BandSpec],
                   photon_budget: float = DEFAULT_PHOTON_BUDGET, normalization: str = "library_peak"):
    """Photons per band emitted by one source of ``material``.

    normalization:
      ``library_peak``  budget times the library value divided by the largest
                        value in the whole library, so material brightness
                        differences survive.
      ``band_sum``      the selected bands share the budget in proportion to
                        the signature.
    """
    if photon_budget == 0:
        return np.zeros(len(bands))
    vals = lib.at_bands(bands)[material]
    if normalization == "library_peak":
        return photon_budget * vals / lib.signatures.max()
    if normalization == "band_sum":
        return photon_budget * vals / vals.sum()
    raise ValueError(f"unknown normalization {normalization!r}")


@dataclass
class PointSource:
    x: float
    y: float
    zeta_ref: float
    material: int = 0
    photon_budget: float = DEFAULT_PHOTON_BUDGET
    # Explicit per-band fluxes override the library lookup.
    flux: np.ndarray | None = None

    def __post_init__(self):
        if self.photon_budget < 0:
            raise ValueError("photon budget must be nonnegative")


@dataclass
class Scene:
    sources: list[PointSource] = field(default_factory=list)
    background_b: float = DEFAULT_BACKGROUND
    seed: int = 0

    def __post_init__(self):
        if self.background_b < 0:
            raise ValueError("background must be >= 0")

    def fluxes(self, lib: SpectralLibrary | None, bands: Sequence[BandSpec],
               normalization: str = "library_peak") -> np.ndarray:
        """M x K matrix of true per-band fluxes."""
        out = np.zeros((len(self.sources), len(bands)))
        for j, s in enumerate(self.sources):
            if s.flux is not None:
                out[j] = np.asarray(s.flux, dtype=float)
            else:
                if lib is None:
                    raise ValueError("source has no explicit flux and no library was given")
                out[j] = band_signature(lib, s.material, bands, s.photon_budget, normalization)
        return out

    def to_json(self) -> dict:
        return {
            "sources": [
                {"x": s.x, "y": s.y, "zeta_ref": s.zeta_ref, "material": s.material,
                 "budget": s.photon_budget, **({"flux": list(map(float, s.flux))} if s.flux is not None else {})}
                for s in self.sources
            ],
            "background": self.background_b,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, data: dict) -> "Scene":
        srcs = [
            PointSource(x=float(s["x"]), y=float(s["y"]), zeta_ref=float(s["zeta_ref"]),
                        material=int(s.get("material", 0)),
                        photon_budget=float(s.get("budget", DEFAULT_PHOTON_BUDGET)),
                        flux=np.asarray(s["flux"], dtype=float) if "flux" in s else None)
            for s in data.get("sources", [])
        ]
        return cls(srcs, float(data.get("background", DEFAULT_BACKGROUND)), int(data.get("seed", 0)))


def save_scene(scene: Scene, path) -> None:
    Path(path).write_text(json.dumps(scene.to_json(), indent=2))


def load_scene(path) -> Scene:
    return Scene.from_json(json.loads(Path(path).read_text()))


@dataclass
class ImageStack:
    images: np.ndarray  # K x m x n
    bands: list[BandSpec]
    background: float = DEFAULT_BACKGROUND
    noise_model: str = "none"
    seed: int | None = None
    # Noiseless signal without background, kept for the Gaussian noise rule.
    signal: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=float)
        if self.images.ndim != 3 or self.images.shape[0] != len(self.bands) or len(self.bands) < 1:
            raise ValueError("images must be K x m x n with one BandSpec per band")

    @property
    def shape(self) -> tuple[int, int]:
        return self.images.shape[1:]

    def subset(self, indices) -> "ImageStack":
        indices = list(indices)
        return ImageStack(self.images[indices], [self.bands[i] for i in indices], self.background,
                          self.noise_model, self.seed,
                          None if self.signal is None else self.signal[indices])


def save_stack(stack: ImageStack, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, img in enumerate(stack.images):
        name = f"band_{i:02d}.npy"
        np.save(directory / name, img)
        files.append(name)
    manifest = {
        "bands_nm": [b.wavelength_nm for b in stack.bands],
        "files": files,
        "background": stack.background,
        "seed": stack.seed,
        "noise_model": stack.noise_model,
        "shape": list(stack.shape),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return directory


def load_stack(directory) -> ImageStack:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    images = np.stack([np.load(directory / f) for f in manifest["files"]])
    bands = [BandSpec(w, i) for i, w in enumerate(manifest["bands_nm"])]
    return ImageStack(images, bands, manifest["background"], manifest.get("noise_model", "none"),
                      manifest.get("seed"))


def render_noiseless(scene: Scene, dicts: Sequence[PsfDictionary], lib: SpectralLibrary | None = None,
                     normalization: str = "library_peak") -> ImageStack:
    """Background plus every source's flux-weighted PSF, one image per band."""
    if not dicts:
        raise ValueError("need at least one dictionary")
    m, n, _ = dicts[0].shape
    bands = [d.band for d in dicts]
    flux = scene.fluxes(lib, bands, normalization)
    signal = np.zeros((len(dicts), m, n))
    for j, src in enumerate(scene.sources):
        for i, d in enumerate(dicts):
            try:
                psf = psf_at(d, src.x, src.y, src.zeta_ref)
            except ValueError as exc:
                raise ValueError(f"source {j}: {exc}") from None
            signal[i] += flux[j, i] * psf
    return ImageStack(signal + scene.background_b, bands, scene.background_b, "none", scene.seed, signal)


def _band_key(band: BandSpec) -> int:
    # Streams follow the band, not its position, so noise commutes with band reordering.
    return int(round(band.wavelength_nm * 1000))


def apply_poisson(stack: ImageStack, rng_seed: int, key: tuple[int, ...] = ()) -> ImageStack:
    if np.any(stack.images < 0):
        raise ValueError("Poisson intensities must be nonnegative")
    out = np.empty_like(stack.images)
    for i, img in enumerate(stack.images):
        out[i] = rng_mod.stream(rng_seed, *key, _band_key(stack.bands[i]), rng_mod.NOISE).poisson(img)
    return ImageStack(out, stack.bands, stack.background, "poisson", rng_seed, stack.signal)


def apply_gaussian(stack: ImageStack, noise_fraction: float = 0.10, rng_seed: int = 0,
                   key: tuple[int, ...] = ()) -> ImageStack:
    """Additive noise with per-band sigma ``noise_fraction * max(signal)``."""
    if noise_fraction < 0:
        raise ValueError("noise_fraction must be >= 0")
    signal = stack.signal if stack.signal is not None else stack.images - stack.background
    out = stack.images.copy()
    if noise_fraction > 0:
        for i in range(out.shape[0]):
            sigma = noise_fraction * signal[i].max()
            g = rng_mod.stream(rng_seed, *key, _band_key(stack.bands[i]), rng_mod.NOISE)
            out[i] += sigma * g.standard_normal(out[i].shape)
    return ImageStack(out, stack.bands, stack.background, "gaussian", rng_seed, stack.signal)


def gaussian_sigmas(stack: ImageStack, noise_fraction: float = 0.10) -> np.ndarray:
    signal = stack.signal if stack.signal is not None else stack.images - stack.background
    return noise_fraction * signal.reshape(signal.shape[0], -1).max(axis=1)
