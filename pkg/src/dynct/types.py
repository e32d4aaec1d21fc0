"""Plain data containers passed between the modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


def _require_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{what} contains non-finite values")


@dataclass
class ImageFrame:
    """A single J x J density image."""

    pixels: np.ndarray
    pixel_spacing: float = 1.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValidationError(f"frame must be square 2D, got shape {self.pixels.shape}")
        if self.pixels.shape[0] < 2:
            raise ValidationError("frame size J must be >= 2")
        if not self.pixel_spacing > 0:
            raise ValidationError("pixel_spacing must be positive")
        _require_finite(self.pixels, "frame")

    @property
    def J(self) -> int:
        return self.pixels.shape[0]


@dataclass
class Projection:
    """Line integrals on a J-bin detector at one view angle and time."""

    bins: np.ndarray
    angle: float
    time_index: int = 0

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=float)
        if self.bins.ndim != 1:
            raise ValidationError("projection bins must be 1D")
        if not np.isfinite(self.angle):
            raise ValidationError("projection angle must be finite")
        self.angle = float(self.angle) % (2 * np.pi)
        _require_finite(self.bins, "projection")


@dataclass
class AngleSchedule:
    """View angle per time sample; times are p * dt with dt = 1."""

    angles: np.ndarray
    scheme_name: str = "custom"
    distinct_views: int | None = None
    times: np.ndarray | None = None

    def __post_init__(self):
        self.angles = np.asarray(self.angles, dtype=float)
        if self.angles.ndim != 1 or self.angles.size < 1:
            raise ValidationError("schedule needs at least one angle")
        if np.any(self.angles < 0) or np.any(self.angles >= np.pi):
            raise ValidationError("schedule angles must lie in [0, pi)")
        if self.times is None:
            self.times = np.arange(self.angles.size, dtype=float)
        self.times = np.asarray(self.times, dtype=float)
        if self.times.shape != self.angles.shape or np.any(np.diff(self.times) <= 0):
            raise ValidationError("schedule times must be strictly increasing, one per angle")
        if self.distinct_views is None:
            self.distinct_views = int(np.unique(self.angles).size)

    @property
    def P(self) -> int:
        return self.angles.size

    def normalized_times(self) -> np.ndarray:
        """Time coordinate fed to the neural field, t_p / (P - 1) in [0, 1]."""
        if self.P == 1:
            return np.zeros(1)
        return (self.times - self.times[0]) / (self.times[-1] - self.times[0])


@dataclass
class SinogramSet:
    """Time-sequential measurements: projection p taken at angle schedule.angles[p]."""

    projections: list
    schedule: AngleSchedule
    noise_sigma: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if len(self.projections) != self.schedule.P:
            raise ValidationError("one projection per scheduled angle is required")
        for p, proj in enumerate(self.projections):
            if proj.time_index != p:
                raise ValidationError(f"projection {p} has time_index {proj.time_index}")
            if not np.isclose(proj.angle, self.schedule.angles[p], rtol=0, atol=1e-12):
                raise ValidationError(f"projection {p} angle disagrees with schedule")
        sizes = {proj.bins.size for proj in self.projections}
        if len(sizes) != 1:
            raise ValidationError("all projections must have the same detector size")

    @property
    def P(self) -> int:
        return len(self.projections)

    @property
    def J(self) -> int:
        return self.projections[0].bins.size

    def as_array(self) -> np.ndarray:
        """(P, J) sinogram."""
        return np.stack([proj.bins for proj in self.projections])

    @classmethod
    def from_array(cls, sino, schedule, noise_sigma=0.0, seed=None):
        projs = [Projection(row, schedule.angles[p], p) for p, row in enumerate(np.asarray(sino))]
        return cls(projs, schedule, noise_sigma, seed)


@dataclass
class DynamicObject:
    """J x J x P space-time density grid (frames along the last axis)."""

    frames: np.ndarray
    normalization: float | None = None
    provenance: str = ""
    pixel_spacing: float = 1.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or self.frames.shape[0] != self.frames.shape[1]:
            raise ValidationError(f"object must be J x J x P, got {self.frames.shape}")
        if self.frames.shape[2] < 1:
            raise ValidationError("object needs at least one frame")
        _require_finite(self.frames, "object")
        if self.normalization is None:
            self.normalization = float(np.max(self.frames)) if self.frames.size else 1.0

    @property
    def J(self) -> int:
        return self.frames.shape[0]

    @property
    def P(self) -> int:
        return self.frames.shape[2]

    def frame(self, t) -> ImageFrame:
        return ImageFrame(self.frames[:, :, t], self.pixel_spacing)

    def stack(self) -> np.ndarray:
        """Frames as a (P, J, J) array."""
        return np.moveaxis(self.frames, 2, 0)

    @classmethod
    def from_stack(cls, stack, **kwargs):
        return cls(np.moveaxis(np.asarray(stack), 0, 2), **kwargs)
