"""Rotating-PSF optics: spiral phase pupil, PSF slices and per-band dictionaries.

Conventions
-----------
Images are indexed ``[x, y]`` (axis 0 is x).  The PSF of a source at the
geometric image center sits at pixel ``(m // 2, n // 2)``.  The pupil plane
is sampled on a ``pupil_grid_side`` square array spanning
``pupil_plane_extent * lambda / lambda_ref`` in normalized pupil units, so the
pixel pitch in scaled image coordinates ``s`` is
``lambda_ref / (lambda * pupil_plane_extent)``: longer wavelengths give
spatially larger PSFs on a shared pixel lattice.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigurationError(ValueError):
    """Raised when an optical configuration cannot be sampled faithfully."""


@dataclass(frozen=True)
class ApertureSpec:
    pupil_radius_R: float = 0.05
    zone_count_L: int = 7
    pupil_grid_side: int = 384
    pupil_plane_extent: float = 4.0
    reference_wavelength_nm: float = 400.0
    # Multiplies the reference-wavelength defocus; 1 for the nominal aperture.
    defocus_gain: float = 1.0

    def __post_init__(self):
        if self.zone_count_L < 1:
            raise ConfigurationError("zone_count_L must be >= 1")
        if self.pupil_grid_side < 16:
            raise ConfigurationError("pupil_grid_side must be >= 16")
        if self.pupil_plane_extent < 2.0:
            raise ConfigurationError("pupil_plane_extent must cover the unit pupil (>= 2)")
        if self.pupil_radius_R <= 0 or self.reference_wavelength_nm <= 0:
            raise ConfigurationError("pupil radius and reference wavelength must be positive")


@dataclass(frozen=True)
class BandSpec:
    wavelength_nm: float
    band_index: int = 0

    def __post_init__(self):
        if not self.wavelength_nm > 0:
            raise ValueError(f"wavelength must be positive, got {self.wavelength_nm}")


@dataclass(frozen=True)
class OpticalGeometry:
    focus_distance_l0: float = 1.0e6
    image_distance_zI: float = 0.5
    pixel_pitch: float = 1.0e-6

    def __post_init__(self):
        if self.focus_distance_l0 <= 0 or self.image_distance_zI <= 0 or self.pixel_pitch <= 0:
            raise ValueError("optical distances and pixel pitch must be strictly positive")


@dataclass(frozen=True)
class PsfSlice:
    pixels: np.ndarray
    zeta: float
    band: BandSpec


@dataclass
class PsfDictionary:
    """Stack of unit-sum PSF slices, ``slices[:, :, r]`` at defocus ``zeta_grid[r]``.

    ``zeta_grid_ref`` holds the same depths expressed as reference-wavelength
    defocus, which is the shared depth axis across bands.
    """

    slices: np.ndarray
    zeta_grid: np.ndarray
    zeta_grid_ref: np.ndarray
    band: BandSpec
    aperture: ApertureSpec = field(default_factory=ApertureSpec)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.slices.shape

    @property
    def depth_count(self) -> int:
        return self.slices.shape[2]

    def zeta_ref_at(self, index: float) -> float:
        """Reference defocus at a (possibly fractional) depth index."""
        z0 = self.zeta_grid_ref[0]
        step = self.zeta_grid_ref[1] - self.zeta_grid_ref[0] if self.depth_count > 1 else 0.0
        return float(z0 + step * index)

    def index_of_zeta_ref(self, zeta_ref: float) -> float:
        z0 = self.zeta_grid_ref[0]
        step = self.zeta_grid_ref[1] - self.zeta_grid_ref[0] if self.depth_count > 1 else 1.0
        return float((zeta_ref - z0) / step)


def spiral_phase(u_radius, u_angle, L):
    """Spiral phase ``l * angle`` for the annular zone containing ``u_radius``.

    Zone ``l`` spans ``sqrt((l-1)/L) <= u <= sqrt(l/L)``; a radius exactly on
    an interior boundary belongs to the outer zone.
    """
    u_radius = np.asarray(u_radius, dtype=float)
    if np.any(u_radius < 0) or np.any(u_radius > 1):
        raise ValueError("u_radius must lie in [0, 1]; mask with the pupil first")
    zone = np.minimum(np.floor(u_radius**2 * L) + 1, L)
    out = zone * np.asarray(u_angle, dtype=float)
    return out if out.ndim else float(out)


def scale_defocus(zeta_ref, lambda_ref, lam):
    """Defocus at wavelength ``lam`` given its value at ``lambda_ref``."""
    if lambda_ref <= 0 or lam <= 0:
        raise ValueError("wavelengths must be positive")
    return zeta_ref * lambda_ref / lam


def band_defocus(zeta_ref, band: BandSpec, aperture: ApertureSpec):
    """Defocus in ``band`` for a source with reference defocus ``zeta_ref``."""
    return aperture.defocus_gain * scale_defocus(
        zeta_ref, aperture.reference_wavelength_nm, band.wavelength_nm
    )


def zeta_from_depth(z, band: BandSpec, aperture: ApertureSpec, geom: OpticalGeometry):
    lam = band.wavelength_nm * 1e-9
    R, l0 = aperture.pupil_radius_R, geom.focus_distance_l0
    return math.pi * (l0 - z) * R**2 / (lam * l0 * z)


def depth_from_defocus(zeta, band: BandSpec, aperture: ApertureSpec, geom: OpticalGeometry):
    """Axial object distance for defocus ``zeta`` observed in ``band``."""
    lam = band.wavelength_nm * 1e-9
    R, l0 = aperture.pupil_radius_R, geom.focus_distance_l0
    denom = lam * l0 * zeta + math.pi * R**2
    if abs(denom) <= 1e-12 * math.pi * R**2:
        raise ZeroDivisionError("defocus maps to a source at infinity")
    return math.pi * l0 * R**2 / denom


def object_coords(x_img, y_img, z, geom: OpticalGeometry):
    """Object-space position of a source imaged at pixel offsets from the axis."""
    if z <= 0:
        raise ValueError("z must be positive")
    x = x_img * geom.pixel_pitch
    y = y_img * geom.pixel_pitch
    mag = -z / geom.image_distance_zI
    return np.array([mag * x, mag * y, z])


def _pupil_grid(aperture: ApertureSpec, band: BandSpec):
    extent = aperture.pupil_plane_extent * band.wavelength_nm / aperture.reference_wavelength_nm
    n = aperture.pupil_grid_side
    du = extent / n
    top_zone = 1.0 - math.sqrt((aperture.zone_count_L - 1) / aperture.zone_count_L)
    if top_zone / du < 2.0:
        raise ConfigurationError(
            f"pupil grid too coarse: outer zone spans {top_zone / du:.2f} samples (< 2); "
            "increase pupil_grid_side"
        )
    coords = (np.arange(n) - n // 2) * du
    ux, uy = np.meshgrid(coords, coords, indexing="ij")
    return ux, uy, du


def pupil_function(zeta, band: BandSpec, aperture: ApertureSpec):
    """Complex masked pupil ``P(u) exp(i(zeta u^2 - psi(u)))`` and its sample step."""
    ux, uy, du = _pupil_grid(aperture, band)
    rho = np.hypot(ux, uy)
    inside = rho <= 1.0
    psi = np.zeros_like(rho)
    psi[inside] = spiral_phase(rho[inside], np.arctan2(uy[inside], ux[inside]), aperture.zone_count_L)
    field_ = np.zeros(rho.shape, dtype=complex)
    field_[inside] = np.exp(1j * (zeta * rho[inside] ** 2 - psi[inside]))
    return field_, du


def psf_slice(zeta, band: BandSpec, aperture: ApertureSpec, image_side: int, normalize: bool = True):
    """Incoherent rotating PSF at defocus ``zeta`` on an ``image_side`` square grid.

    The pupil integral is evaluated with a centered 2D DFT of the masked
    pupil and cropped to the sensor grid.  With ``normalize=False`` the raw
    ``|integral|^2 / pi`` values are returned.
    """
    if not np.isfinite(zeta):
        raise ValueError("zeta must be finite")
    n = aperture.pupil_grid_side
    if image_side > n:
        raise ConfigurationError("image_side exceeds pupil_grid_side; nothing to crop from")
    pupil, du = pupil_function(zeta, band, aperture)
    # sum_u P(u) exp(+i 2 pi u.s) du^2 on s_k = (k - n//2) / (n du)
    amp = np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(pupil))) * (n * n * du * du)
    intensity = np.abs(amp) ** 2 / math.pi
    lo = n // 2 - image_side // 2
    img = intensity[lo:lo + image_side, lo:lo + image_side]
    if normalize:
        img = img / img.sum()
    return PsfSlice(pixels=img, zeta=float(zeta), band=band)


def scaled_coordinate_pitch(band: BandSpec, aperture: ApertureSpec) -> float:
    """Pixel pitch of the sensor grid in scaled image coordinates ``s``."""
    extent = aperture.pupil_plane_extent * band.wavelength_nm / aperture.reference_wavelength_nm
    return 1.0 / extent


def default_zeta_grid(d: int = 21, zeta_max: float = 21.0) -> np.ndarray:
    return np.linspace(-zeta_max, zeta_max, d)


def build_dictionary(band: BandSpec, zeta_grid_ref, aperture: ApertureSpec, image_side: int) -> PsfDictionary:
    zeta_grid_ref = np.asarray(zeta_grid_ref, dtype=float)
    if zeta_grid_ref.ndim != 1 or zeta_grid_ref.size < 1:
        raise ValueError("zeta grid must be a non-empty 1D array")
    if zeta_grid_ref.size > 1:
        steps = np.diff(zeta_grid_ref)
        if np.any(steps <= 0) or not np.allclose(steps, steps[0], rtol=1e-9, atol=1e-12):
            raise ValueError("zeta grid must be uniform and strictly increasing")
    zetas = band_defocus(zeta_grid_ref, band, aperture)
    stack = np.stack([psf_slice(z, band, aperture, image_side).pixels for z in zetas], axis=2)
    return PsfDictionary(slices=stack, zeta_grid=zetas, zeta_grid_ref=zeta_grid_ref.copy(),
                         band=band, aperture=aperture)


def build_dictionaries(bands, zeta_grid_ref, aperture: ApertureSpec, image_side: int) -> list[PsfDictionary]:
    return [build_dictionary(b, zeta_grid_ref, aperture, image_side) for b in bands]


def shifted_psf(zeta_ref, x, y, band: BandSpec, aperture: ApertureSpec, image_side: int) -> np.ndarray:
    """Unit-sum PSF for a source at continuous pixel position ``(x, y)``.

    The slice is evaluated at the exact band defocus and moved from the image
    center with a Fourier phase ramp (periodic boundary).  Ringing from
    fractional shifts is clipped at zero before renormalizing.
    """
    psf = psf_slice(band_defocus(zeta_ref, band, aperture), band, aperture, image_side).pixels
    return fourier_shift(psf, x - image_side // 2, y - image_side // 2)


def psf_at(dictionary: PsfDictionary, x: float, y: float, zeta_ref: float) -> np.ndarray:
    """Unit-sum PSF for a continuous source position in one band.

    On-lattice depths reuse the stored dictionary slice; other depths are
    evaluated at the exact defocus.
    """
    m, n, _ = dictionary.shape
    lo, hi = dictionary.zeta_grid_ref[0], dictionary.zeta_grid_ref[-1]
    if not lo - 1e-9 <= zeta_ref <= hi + 1e-9:
        raise ValueError(f"zeta_ref {zeta_ref} outside dictionary range [{lo}, {hi}]")
    r = dictionary.index_of_zeta_ref(zeta_ref)
    if abs(r - round(r)) < 1e-9:
        return fourier_shift(dictionary.slices[:, :, int(round(r))], x - m // 2, y - n // 2)
    return shifted_psf(zeta_ref, x, y, dictionary.band, dictionary.aperture, m)


def fourier_shift(img: np.ndarray, dx: float, dy: float) -> np.ndarray:
    m, n = img.shape
    kx = np.fft.fftfreq(m)[:, None]
    ky = np.fft.fftfreq(n)[None, :]
    ramp = np.exp(-2j * math.pi * (kx * dx + ky * dy))
    out = np.fft.ifft2(np.fft.fft2(img) * ramp).real
    np.maximum(out, 0.0, out=out)
    return out / out.sum()


def save_dictionary(dictionary: PsfDictionary, path) -> Path:
    """Write ``<path>.npy`` (float64 m x n x d) and a ``<path>.json`` sidecar."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".npy", ".json") else path
    base.parent.mkdir(parents=True, exist_ok=True)
    np.save(base.with_suffix(".npy"), dictionary.slices)
    a = dictionary.aperture
    meta = {
        "format": "msrpsf-dictionary/1",
        "shape": list(dictionary.slices.shape),
        "dtype": "float64",
        "layout": "slices[x, y, depth], depth ordered by increasing zeta",
        "wavelength_nm": dictionary.band.wavelength_nm,
        "band_index": dictionary.band.band_index,
        "zeta_grid": dictionary.zeta_grid.tolist(),
        "zeta_grid_ref": dictionary.zeta_grid_ref.tolist(),
        "aperture": {
            "pupil_radius_R": a.pupil_radius_R,
            "zone_count_L": a.zone_count_L,
            "pupil_grid_side": a.pupil_grid_side,
            "pupil_plane_extent": a.pupil_plane_extent,
            "reference_wavelength_nm": a.reference_wavelength_nm,
            "defocus_gain": a.defocus_gain,
        },
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return base


def load_dictionary(path) -> PsfDictionary:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".npy", ".json") else path
    meta = json.loads(base.with_suffix(".json").read_text())
    slices = np.load(base.with_suffix(".npy"))
    if list(slices.shape) != meta["shape"]:
        raise ValueError(f"dictionary tensor shape {slices.shape} does not match sidecar {meta['shape']}")
    return PsfDictionary(
        slices=slices,
        zeta_grid=np.asarray(meta["zeta_grid"]),
        zeta_grid_ref=np.asarray(meta["zeta_grid_ref"]),
        band=BandSpec(meta["wavelength_nm"], meta.get("band_index", 0)),
        aperture=ApertureSpec(**meta["aperture"]),
    )
