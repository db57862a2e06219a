"""Centered 2D DFTs, frequency masks and the filters built from them.

Images are ``(..., H, W, C)`` arrays; transforms act on the two spatial axes
independently per channel. The DFT is orthonormal and the zero frequency sits
at ``(H // 2, W // 2)``. Masks are real and depend only on the distance to that
center, so every mask filter here is a real, self-adjoint linear map.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad

SPATIAL = (-3, -2)
IMAG_TOLERANCE = 1e-4


def _check_image(x: np.ndarray) -> None:
    if x.ndim < 3 or x.shape[-3] < 2 or x.shape[-2] < 2:
        raise ValueError(f"expected an (..., H, W, C) image with H, W >= 2, got {x.shape}")


def dft2(image: np.ndarray) -> np.ndarray:
    """Orthonormal, DC-centered 2D DFT of each channel."""
    x = np.asarray(image)
    _check_image(x)
    return np.fft.fftshift(np.fft.fft2(x, axes=SPATIAL, norm="ortho"), axes=SPATIAL)


def idft2(spectrum: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Inverse of :func:`dft2`; returns the real part.

    Raises if the imaginary residue exceeds ``IMAG_TOLERANCE``, which means the
    spectrum was not conjugate-symmetric (it did not come from a real image).
    """
    spec = np.asarray(spectrum)
    _check_image(spec)
    x = np.fft.ifft2(np.fft.ifftshift(spec, axes=SPATIAL), axes=SPATIAL, norm="ortho")
    residue = float(np.max(np.abs(x.imag))) if x.size else 0.0
    if residue > IMAG_TOLERANCE:
        raise ValueError(
            f"idft2: imaginary residue {residue:.3g} exceeds {IMAG_TOLERANCE}; "
            "spectrum is not conjugate-symmetric"
        )
    return x.real.astype(dtype)


@lru_cache(maxsize=None)
def _distance(h: int, w: int) -> np.ndarray:
    u = np.arange(h) - h // 2
    v = np.arange(w) - w // 2
    d = np.sqrt(u[:, None] ** 2 + v[None, :] ** 2)
    d.flags.writeable = False
    return d


def frequency_distance(h: int, w: int) -> np.ndarray:
    """Euclidean distance of every spectrum cell from the DC cell, in bins."""
    return _distance(int(h), int(w))


def nyquist(h: int, w: int) -> float:
    return min(h, w) / 2.0


@lru_cache(maxsize=64)
def gaussian_lowpass_mask(h: int, w: int, r: float) -> np.ndarray:
    """exp(-D^2 / (2 r^2)), equal to 1 at DC."""
    if not r > 0:
        raise ValueError(f"radius must be positive, got {r}")
    d = _distance(h, w)
    m = np.exp(-(d ** 2) / (2.0 * float(r) ** 2))
    m.flags.writeable = False
    return m


@lru_cache(maxsize=64)
def band_mask(h: int, w: int, lo: float, hi: float) -> np.ndarray:
    """Binary annulus: 1 where lo <= D < hi."""
    if not 0 <= lo < hi:
        raise ValueError(f"need 0 <= lo < hi, got lo={lo}, hi={hi}")
    d = _distance(h, w)
    m = ((d >= lo) & (d < hi)).astype(np.float64)
    m.flags.writeable = False
    return m


def is_binary(mask: np.ndarray) -> bool:
    return bool(np.all((mask == 0) | (mask == 1)))


def _half_mask(mask: np.ndarray):
    """The mask in unshifted rfft layout, or None if it is not even about DC.

    An even real mask keeps a real image's spectrum conjugate-symmetric, so the
    half-spectrum transform gives the same result at half the cost.
    """
    m = np.fft.ifftshift(mask)
    mirrored = np.roll(m[::-1, ::-1], (1, 1), axis=(0, 1))
    if not np.array_equal(m, mirrored):
        return None
    return m[:, : mask.shape[1] // 2 + 1]


def _filter_array(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    half = _half_mask(mask)
    if half is None:
        spec = dft2(x) * mask.astype(x.dtype)[:, :, None]
        return idft2(spec, dtype=x.dtype)
    h, w = mask.shape
    spec = np.fft.rfft2(x, axes=SPATIAL) * half.astype(x.dtype)[:, :, None]
    return np.fft.irfft2(spec, s=(h, w), axes=SPATIAL).astype(x.dtype, copy=False)


def apply_mask(x, mask: np.ndarray):
    """Real part of F^-1(mask * F(x)) for an array or a tape tensor.

    The map is linear and self-adjoint (real mask, unitary transform), so its
    adjoint on the tape is the same filter.
    """
    mask = np.asarray(mask)
    if isinstance(x, ad.Tensor):
        if x.shape[-3:-1] != mask.shape:
            raise ad.ShapeError("spectral-filter", x.shape, mask.shape)
        out = _filter_array(x.data, mask)
        return ad.custom_op("spectral-filter", [x], out, lambda g: (_filter_array(g, mask),))
    x = np.asarray(x)
    _check_image(x)
    if x.shape[-3:-1] != mask.shape:
        raise ad.ShapeError("spectral-filter", x.shape, mask.shape)
    return _filter_array(x, mask)


def default_radius(side: int) -> float:
    """The reference radius of 40 at 224 px, rescaled to another image side."""
    return 40.0 * side / 224.0


def lowpass_unclamped(image, r: float):
    h, w = image.shape[-3], image.shape[-2]
    return apply_mask(image, gaussian_lowpass_mask(h, w, float(r)))


def apply_lowpass(image, r: float):
    """Gaussian low-pass G_r followed by a clamp to [0, 1]."""
    out = lowpass_unclamped(image, r)
    if isinstance(out, ad.Tensor):
        return ad.clamp(out, 0.0, 1.0)
    return np.clip(out, 0.0, 1.0)


def band_project(delta, mask: np.ndarray):
    """Project a perturbation onto the frequencies selected by ``mask``."""
    return apply_mask(delta, mask)


def highpass_project(image, r: float):
    """(I - G_r) applied without the clamp."""
    low = lowpass_unclamped(image, r)
    if isinstance(image, ad.Tensor):
        return ad.subtract(image, low)
    return np.asarray(image) - low
