"""Discrete 2D parallel-beam Radon transform, its adjoint and Ram-Lak FBP.

Geometry: pixel (i, j) of a J x J frame has its center at
``x = j - (J-1)/2``, ``y = (J-1)/2 - i`` (pixel units, row 0 on top). A view
at angle theta integrates along lines ``x cos(theta) + y sin(theta) = s``.
The detector has J bins of the same spacing as the pixels, centered on the
rotation axis, so only objects supported in the inscribed disk are seen in
full at every angle.

Each pixel is treated as a constant-valued square. Its projection onto the
detector axis is a trapezoid, and the weight it deposits into a bin is the
exact overlap of that trapezoid with the bin. This is linear, conserves mass
and has a closed-form adjoint.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .types import DynamicObject, ImageFrame, Projection, SinogramSet

# detector bins touched by one pixel footprint, relative to floor(s)
_OFFSETS = (-1, 0, 1, 2)
# band-limited upsampling of filtered projections before interpolation
FBP_UPSAMPLE = 4


def pixel_centers(J):
    """Pixel center coordinates (x, y), each flattened row-major."""
    c = np.arange(J) - (J - 1) / 2
    x = np.broadcast_to(c[None, :], (J, J)).ravel()
    y = np.broadcast_to(-c[:, None], (J, J)).ravel()
    return x, y


def detector_offsets(J):
    return np.arange(J) - (J - 1) / 2


def _ramp2(u):
    return 0.5 * np.maximum(u, 0.0) ** 2


def _trapezoid_cdf(u, w1, w2):
    """CDF of U(-w1/2, w1/2) + U(-w2/2, w2/2), with w1 >= w2 >= 0."""
    if w2 < 1e-12:
        return np.clip(u / w1 + 0.5, 0.0, 1.0)
    return (
        _ramp2(u + (w1 + w2) / 2)
        - _ramp2(u + (w1 - w2) / 2)
        - _ramp2(u - (w1 - w2) / 2)
        + _ramp2(u - (w1 + w2) / 2)
    ) / (w1 * w2)


@lru_cache(maxsize=4096)
def _footprint_cached(angle, J):
    c, s = np.cos(angle), np.sin(angle)
    w1, w2 = sorted((abs(c), abs(s)), reverse=True)
    x, y = pixel_centers(J)
    center = x * c + y * s
    base = np.floor(center + (J - 1) / 2).astype(np.int64)
    idx = np.empty((J * J, len(_OFFSETS)), dtype=np.int64)
    wts = np.empty((J * J, len(_OFFSETS)))
    for col, off in enumerate(_OFFSETS):
        k = base + off
        rel = (k - (J - 1) / 2) - center
        w = _trapezoid_cdf(rel + 0.5, w1, w2) - _trapezoid_cdf(rel - 0.5, w1, w2)
        valid = (k >= 0) & (k < J)
        idx[:, col] = np.clip(k, 0, J - 1)
        wts[:, col] = np.where(valid, w, 0.0)
    idx.setflags(write=False)
    wts.setflags(write=False)
    return idx, wts


def footprint(angle, J):
    """Detector bin indices and weights for every pixel, each (J*J, 4).

    Out-of-detector contributions carry weight zero.
    """
    return _footprint_cached(float(angle), int(J))


@lru_cache(maxsize=4096)
def _system_matrix_cached(angle, J):
    idx, wts = footprint(angle, J)
    cols = np.repeat(np.arange(J * J), len(_OFFSETS))
    return sp.csr_matrix((wts.ravel(), (idx.ravel(), cols)), shape=(J, J * J))


def system_matrix(angle, J):
    """Sparse (J, J*J) projection matrix for a unit-spacing grid."""
    return _system_matrix_cached(float(angle), int(J))


def _as_frame(frame):
    if isinstance(frame, ImageFrame):
        return frame
    return ImageFrame(np.asarray(frame, dtype=float))


def radon_project(frame, angle, time_index=0) -> Projection:
    """Project a frame at one view angle."""
    frame = _as_frame(frame)
    if not np.isfinite(angle):
        raise ValidationError("angle must be finite")
    A = system_matrix(angle, frame.J)
    bins = (A @ frame.pixels.ravel()) * frame.pixel_spacing
    return Projection(bins, angle, time_index)


def radon_adjoint(proj: Projection, pixel_spacing=1.0) -> ImageFrame:
    """Exact adjoint of :func:`radon_project` (same spacing)."""
    J = proj.bins.size
    A = system_matrix(proj.angle, J)
    pixels = (A.T @ proj.bins).reshape(J, J) * pixel_spacing
    return ImageFrame(pixels, pixel_spacing)


def sinogram(frame, angles) -> np.ndarray:
    """(len(angles), J) projections of one frame."""
    frame = _as_frame(frame)
    return np.stack([radon_project(frame, a).bins for a in angles])


def ramp_filter(n, spacing=1.0):
    """Frequency response of the discrete Ram-Lak kernel (length n, FFT order).

    Built from the band-limited spatial kernel h[0] = 1/4, h[odd k] =
    -1/(pi k)^2 so the DC response is exact.
    """
    k = np.arange(-(n // 2), n // 2)
    h = np.zeros(n)
    h[k == 0] = 0.25
    odd = (k % 2) == 1
    h[odd] = -1.0 / (np.pi * k[odd]) ** 2
    return np.real(np.fft.fft(np.fft.ifftshift(h))) / spacing


def _filtered_upsampled(sino, spacing):
    n_views, J = sino.shape
    n = int(2 ** np.ceil(np.log2(2 * J)))
    padded = np.zeros((n_views, n))
    padded[:, :J] = sino
    spec = np.fft.fft(padded, axis=1) * ramp_filter(n, spacing)
    up = FBP_UPSAMPLE
    spec_up = np.zeros((n_views, n * up), dtype=complex)
    half = n // 2
    spec_up[:, :half] = spec[:, :half]
    spec_up[:, -half:] = spec[:, -half:]
    # split the Nyquist bin so the upsampled signal stays real
    spec_up[:, half] = 0.5 * spec[:, half]
    spec_up[:, -half] = 0.5 * spec[:, half]
    return np.real(np.fft.ifft(spec_up, axis=1)) * up


def fov_mask(J):
    """Pixels whose centers lie in the inscribed disk of the frame."""
    x, y = pixel_centers(J)
    return (x**2 + y**2 <= (J / 2) ** 2).reshape(J, J)


def fbp_static(projections, pixel_spacing=1.0) -> ImageFrame:
    """Ram-Lak filtered backprojection of a (static) set of projections.

    Filtering is done in the frequency domain after zero-padding to the next
    power of two >= 2J. Filtered projections are upsampled (band-limited)
    before linear interpolation at the pixel positions, and each view gets
    weight pi / n_views. Pixels outside the scanned disk are set to zero.
    """
    projections = list(projections)
    if len(projections) < 2:
        raise ValidationError("FBP needs at least 2 projections")
    angles = np.array([p.angle for p in projections])
    if np.unique(np.round(angles % np.pi, 12)).size < 2:
        raise ValidationError("FBP needs at least 2 distinct view angles")
    sino = np.stack([p.bins for p in projections])
    J = sino.shape[1]
    q = _filtered_upsampled(sino, pixel_spacing)
    grid = (np.arange(q.shape[1]) / FBP_UPSAMPLE) - (J - 1) / 2
    x, y = pixel_centers(J)
    out = np.zeros(J * J)
    for theta, row in zip(angles, q):
        out += np.interp(x * np.cos(theta) + y * np.sin(theta), grid, row)
    out *= np.pi / len(projections)
    out = out.reshape(J, J) * fov_mask(J)
    return ImageFrame(out, pixel_spacing)


def sliding_windows(P):
    """Start index of the P/2-long window used for each frame t."""
    if P < 4 or P % 2:
        raise ValidationError("sliding-window FBP needs an even P >= 4")
    W = P // 2
    t = np.arange(P)
    return np.clip(t - W // 2, 0, P - W), W


def fbp_sliding_window(sinos: SinogramSet, pixel_spacing=1.0) -> DynamicObject:
    """Per-frame FBP from the P/2 temporally nearest projections (stride 1)."""
    starts, W = sliding_windows(sinos.P)
    frames = [
        fbp_static(sinos.projections[s : s + W], pixel_spacing).pixels for s in starts
    ]
    return DynamicObject.from_stack(
        np.stack(frames), provenance="fbp_sliding_window", pixel_spacing=pixel_spacing
    )
