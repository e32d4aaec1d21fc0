"""Image quality metrics: PSNR, MAE, SSIM, HFEN, and per-frame aggregation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError

PSNR_CAP = 200.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
LOG_SIGMA = 1.5
LOG_SIZE = 9


def _pair(est, ref):
    est = np.asarray(est, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if est.shape != ref.shape:
        raise ValidationError(f"shape mismatch {est.shape} vs {ref.shape}")
    return est, ref


def psnr(est, ref, peak=None):
    """10 log10(peak^2 / MSE); peak defaults to max(ref). Capped at PSNR_CAP."""
    est, ref = _pair(est, ref)
    if peak is None:
        peak = float(np.max(ref))
    if not peak > 0:
        raise ValidationError("PSNR peak must be positive")
    mse = float(np.mean((est - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse))


def mae(est, ref):
    est, ref = _pair(est, ref)
    return float(np.mean(np.abs(est - ref)))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(est, ref, data_range=None):
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5).

    Local statistics use reflective boundaries; the map is averaged away
    from a 5-pixel border. ``data_range`` defaults to max(ref) - min(ref).
    """
    est, ref = _pair(est, ref)
    if data_range is None:
        data_range = float(np.max(ref) - np.min(ref))
    if data_range <= 0:
        data_range = max(float(np.max(np.abs(ref))), 1.0)
    w = gaussian_window()
    filt = lambda a: ndimage.correlate(a, w, mode="reflect")
    mu_x, mu_y = filt(est), filt(ref)
    sxx = filt(est * est) - mu_x**2
    syy = filt(ref * ref) - mu_y**2
    sxy = filt(est * ref) - mu_x * mu_y
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    smap = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    )
    pad = (SSIM_WINDOW - 1) // 2
    if min(smap.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(np.mean(smap))


def log_kernel(sigma=LOG_SIGMA, size=LOG_SIZE):
    """Rotationally symmetric Laplacian of Gaussian, shifted to zero sum."""
    r = np.arange(size) - (size - 1) / 2
    x, y = np.meshgrid(r, r)
    rr = x**2 + y**2
    g = np.exp(-rr / (2 * sigma**2))
    g /= g.sum()
    h = g * (rr - 2 * sigma**2) / sigma**4
    return h - h.mean()


def hfen(est, ref):
    """|| LoG(est) - LoG(ref) ||_2 with a 9x9, sigma = 1.5 px LoG."""
    est, ref = _pair(est, ref)
    k = log_kernel()
    diff = ndimage.correlate(est - ref, k, mode="reflect")
    return float(np.linalg.norm(diff))


@dataclass
class MetricsRecord:
    psnr_db: float
    ssim: float
    mae: float
    hfen: float
    per_frame: dict = field(default_factory=dict)
    frames_evaluated: list = field(default_factory=list)
    psnr_capped: bool = False

    def summary(self):
        return {k: v for k, v in asdict(self).items() if k not in ("per_frame", "frames_evaluated")}


def evaluate(est, ref, frames=None, peak=None) -> MetricsRecord:
    """Mean of per-frame metrics over ``frames`` (all frames by default).

    ``est`` and ``ref`` are DynamicObjects or (J, J, P) arrays. The PSNR peak
    is the ground-truth maximum over the whole object unless given.
    """
    est_a = getattr(est, "frames", est)
    ref_a = getattr(ref, "frames", ref)
    est_a, ref_a = _pair(est_a, ref_a)
    if est_a.ndim != 3:
        raise ValidationError("evaluate expects J x J x P arrays")
    if frames is None:
        frames = range(ref_a.shape[2])
    frames = [int(t) for t in frames]
    if not frames:
        raise ValidationError("no frames to evaluate")
    if peak is None:
        peak = float(np.max(ref_a))
    rows = {"psnr_db": [], "ssim": [], "mae": [], "hfen": []}
    for t in frames:
        e, r = est_a[:, :, t], ref_a[:, :, t]
        rows["psnr_db"].append(psnr(e, r, peak))
        rows["ssim"].append(ssim(e, r))
        rows["mae"].append(mae(e, r))
        rows["hfen"].append(hfen(e, r))
    per_frame = {k: np.array(v) for k, v in rows.items()}
    return MetricsRecord(
        psnr_db=float(np.mean(per_frame["psnr_db"])),
        ssim=float(np.mean(per_frame["ssim"])),
        mae=float(np.mean(per_frame["mae"])),
        hfen=float(np.mean(per_frame["hfen"])),
        per_frame=per_frame,
        frames_evaluated=frames,
        psnr_capped=bool(np.any(per_frame["psnr_db"] >= PSNR_CAP)),
    )
