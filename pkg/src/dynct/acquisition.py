"""Time-sequential acquisition: angle schedules, noise calibration, measurement synthesis."""

from __future__ import annotations

import logging

import numpy as np

from .errors import ValidationError
from .metrics import psnr
from .tomo import fbp_static, radon_project, system_matrix
from .types import AngleSchedule, DynamicObject, ImageFrame, Projection, SinogramSet

log = logging.getLogger(__name__)

CALIBRATION_VIEWS = 512
CALIBRATION_TARGET_DB = 46.0
CALIBRATION_TOL_DB = 0.05
CALIBRATION_MAX_ITERS = 60
CALIBRATION_SEED = 2024


def _is_power_of_two(n):
    return n >= 1 and (n & (n - 1)) == 0


def bit_reverse(p, bits):
    out = 0
    for _ in range(bits):
        out = (out << 1) | (p & 1)
        p >>= 1
    return out


def bit_reversed_schedule(P) -> AngleSchedule:
    """theta_p = pi * bitreverse_k(p) / P for P = 2**k."""
    P = int(P)
    if not _is_power_of_two(P):
        raise ValidationError(
            f"bit-reversed sampling needs P to be a power of two (got {P}); "
            "use uniform_schedule or reduced_view_schedule instead"
        )
    k = P.bit_length() - 1
    order = np.array([bit_reverse(p, k) for p in range(P)])
    return AngleSchedule(np.pi * order / P, "bit_reversed", P)


def reduced_view_schedule(P_hat, P) -> AngleSchedule:
    """Bit-reversed pattern over P_hat distinct views, repeated to length P."""
    P_hat, P = int(P_hat), int(P)
    if P_hat > P or P % P_hat:
        raise ValidationError(f"P_hat={P_hat} must divide P={P}")
    base = bit_reversed_schedule(P_hat).angles
    return AngleSchedule(np.tile(base, P // P_hat), "reduced_view", P_hat)


def uniform_schedule(P) -> AngleSchedule:
    """Sequential sweep: theta_p = pi * p / P."""
    P = int(P)
    if P < 1:
        raise ValidationError("P must be positive")
    return AngleSchedule(np.pi * np.arange(P) / P, "uniform", P)


def make_schedule(scheme, P, P_hat=None) -> AngleSchedule:
    if scheme == "bit_reversed":
        return bit_reversed_schedule(P)
    if scheme == "reduced_view":
        return reduced_view_schedule(P_hat if P_hat else P, P)
    if scheme == "uniform":
        return uniform_schedule(P)
    raise ValidationError(f"unknown schedule scheme {scheme!r}")


def simulate_measurements(obj: DynamicObject, schedule: AngleSchedule, sigma, seed) -> SinogramSet:
    """Project frame p at theta_p and add i.i.d. N(0, sigma^2) to every bin."""
    if obj.P != schedule.P:
        raise ValidationError(f"object has {obj.P} frames but schedule has {schedule.P} angles")
    if sigma < 0:
        raise ValidationError("noise sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    projs = []
    for p, theta in enumerate(schedule.angles):
        clean = radon_project(obj.frame(p), theta).bins
        noise = rng.standard_normal(clean.size) * sigma
        projs.append(Projection(clean + noise, theta, p))
    return SinogramSet(projs, schedule, float(sigma), seed)


def _calibration_fbps(frame: ImageFrame, seed):
    """FBP of the clean views and of unit-variance noise alone (FBP is linear)."""
    angles = np.pi * np.arange(CALIBRATION_VIEWS) / CALIBRATION_VIEWS
    x = frame.pixels.ravel()
    clean = [Projection(system_matrix(a, frame.J) @ x * frame.pixel_spacing, a) for a in angles]
    rng = np.random.default_rng(seed)
    noise = [Projection(rng.standard_normal(frame.J), a) for a in angles]
    return (
        fbp_static(clean, frame.pixel_spacing).pixels,
        fbp_static(noise, frame.pixel_spacing).pixels,
    )


def calibrated_psnr(frame, sigma, seed=CALIBRATION_SEED):
    """PSNR of a 512-view Ram-Lak FBP of ``frame`` with noise std ``sigma``."""
    frame = frame if isinstance(frame, ImageFrame) else ImageFrame(frame)
    clean, noise = _calibration_fbps(frame, seed)
    return psnr(clean + sigma * noise, frame.pixels)


def calibrate_noise_sigma(static_frame, target_db=CALIBRATION_TARGET_DB, seed=CALIBRATION_SEED):
    """Noise std for which 512-view FBP of ``static_frame`` has PSNR ``target_db``.

    Bisection on log(sigma) with a fixed noise draw, stopping within
    0.05 dB of the target.
    """
    frame = static_frame if isinstance(static_frame, ImageFrame) else ImageFrame(static_frame)
    if not np.any(frame.pixels):
        raise ValidationError("cannot calibrate noise on an all-zero frame")
    clean, noise = _calibration_fbps(frame, seed)
    ref = frame.pixels

    def level(sigma):
        return psnr(clean + sigma * noise, ref)

    noiseless = level(0.0)
    if noiseless <= target_db + CALIBRATION_TOL_DB:
        raise ValidationError(
            f"noiseless FBP reaches only {noiseless:.2f} dB; target {target_db} dB is unattainable"
        )
    scale = float(np.max(np.abs(ref))) * frame.J * frame.pixel_spacing
    lo, hi = np.log(scale * 1e-8), np.log(scale)
    while level(np.exp(hi)) > target_db:
        hi += np.log(10.0)
    sigma = np.exp(hi)
    for _ in range(CALIBRATION_MAX_ITERS):
        mid = 0.5 * (lo + hi)
        sigma = np.exp(mid)
        value = level(sigma)
        if abs(value - target_db) < CALIBRATION_TOL_DB:
            break
        if value > target_db:
            lo = mid
        else:
            hi = mid
    log.debug("calibrated sigma=%.4g (%.3f dB, noiseless %.2f dB)", sigma, level(sigma), noiseless)
    return float(sigma)
