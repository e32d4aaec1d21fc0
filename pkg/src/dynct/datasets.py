"""Dynamic phantoms, volume ingestion and the single-file array container.

Container layout (all integers little-endian)::

    magic      8 bytes  b"DYNCTARR"
    version    u32
    meta_len   u64, then meta_len bytes of UTF-8 JSON
    n_arrays   u32
    per array:
        name_len u16, name (UTF-8)
        dtype_len u8, numpy dtype string (e.g. "<f8")
        ndim u8, then ndim x u64 shape
        nbytes u64, then nbytes of C-order payload
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ContainerError, ValidationError
from .types import AngleSchedule, DynamicObject, ImageFrame, SinogramSet

MAGIC = b"DYNCTARR"
VERSION = 1
SUPERSAMPLE = 4

RECIPES = ("warped_walnut", "static_walnut", "ellipses", "ellipses_merge", "porous")


# ---------------------------------------------------------------------------
# static slices
# ---------------------------------------------------------------------------


def _fine_grid(J, ss):
    """Sub-pixel centers in pixel units about the rotation axis (x right, y up)."""
    g = (np.arange(J * ss) + 0.5) / ss - J / 2
    return np.meshgrid(g, -g)


def _box_down(img, J, ss):
    return img.reshape(J, ss, J, ss).mean(axis=(1, 3))


def disk_phantom(J, radius, center=(0.0, 0.0), edge_sigma=0.0, value=1.0, supersample=8):
    """Area-sampled disk (pixel units), optionally Gaussian-smoothed at the edge."""
    X, Y = _fine_grid(J, supersample)
    inside = (X - center[0]) ** 2 + (Y - center[1]) ** 2 <= radius**2
    img = _box_down(inside.astype(float), J, supersample) * value
    if edge_sigma > 0:
        img = ndimage.gaussian_filter(img, edge_sigma, mode="constant")
    return img


def walnut_slice(J, seed=0, smoothing=None, supersample=SUPERSAMPLE):
    """Walnut-like cross-section: dense shell, lobed kernel, septum and voids.

    Rendered on a supersampled grid, area-averaged to J x J, then smoothed
    with a Gaussian of ``smoothing`` pixels (default J/32). Values in [0, 1]
    and support inside the inscribed disk.
    """
    if smoothing is None:
        smoothing = J / 32
    rng = np.random.default_rng(seed)
    X, Y = _fine_grid(J, supersample)
    X, Y = X / (J / 2), Y / (J / 2)
    a = 0.74 + 0.03 * rng.standard_normal()
    b = 0.64 + 0.03 * rng.standard_normal()
    rot = rng.uniform(0, np.pi)
    Xr = X * np.cos(rot) + Y * np.sin(rot)
    Yr = -X * np.sin(rot) + Y * np.cos(rot)
    R = np.sqrt((Xr / a) ** 2 + (Yr / b) ** 2)
    img = np.zeros_like(X)
    img[R <= 1.0] = 1.0
    img[R < 0.85] = 0.25
    lobes = int(rng.integers(3, 6))
    phase = rng.uniform(0, 2 * np.pi)
    theta = np.arctan2(Yr, Xr)
    lobe = (0.5 + 0.5 * np.cos(lobes * theta + phase + 2.0 * R)) > 0.55
    img[lobe & (R > 0.12) & (R < 0.78)] = 0.7
    img[(np.abs(Yr) < 0.04) & (R < 0.85)] = 0.9
    for _ in range(int(rng.integers(2, 5))):
        cx, cy = rng.uniform(-0.35, 0.35, 2)
        r = rng.uniform(0.05, 0.11)
        img[((Xr - cx) ** 2 + (Yr - cy) ** 2 < r * r) & (R < 0.85)] = 0.05
    img = _box_down(img, J, supersample)
    if smoothing > 0:
        img = ndimage.gaussian_filter(img, smoothing, mode="constant")
    return np.clip(img, 0.0, 1.0)


# ---------------------------------------------------------------------------
# warped sequences
# ---------------------------------------------------------------------------


@dataclass
class WarpRecipe:
    """Sinusoidal piecewise-affine warp of ``base_frame``.

    ``C`` holds the warp amplitude (pixels) per frame; C[0] must be 0.
    """

    N: int
    C: np.ndarray
    base_frame: ImageFrame

    def __post_init__(self):
        self.C = np.asarray(self.C, dtype=float)
        if self.N < 2:
            raise ValidationError("warp grid needs N >= 2")
        if self.C.ndim != 1 or self.C.size < 1:
            raise ValidationError("C must be a 1D array with one amplitude per frame")
        if np.any(self.C < 0):
            raise ValidationError("warp amplitudes C(t) must be nonnegative")
        if self.C[0] != 0:
            raise ValidationError("C(0) must be 0")
        if not isinstance(self.base_frame, ImageFrame):
            self.base_frame = ImageFrame(self.base_frame)

    @classmethod
    def linear(cls, base_frame, P, C_max=None, N=10):
        """C(t) rising linearly from 0 to C_max (default J/16) over P frames."""
        base_frame = base_frame if isinstance(base_frame, ImageFrame) else ImageFrame(base_frame)
        if C_max is None:
            C_max = base_frame.J / 16
        C = C_max * np.arange(P) / max(P - 1, 1)
        return cls(N, C, base_frame)


def warp_nodes(J, N):
    """Horizontal positions (column index) of the N warp grid lines."""
    return np.linspace(0, J - 1, N)


def warp_node_displacements(C_t, N):
    """Delta_n = -C(t) sin(3 pi n / N), n = 0..N-1."""
    n = np.arange(N)
    return -C_t * np.sin(3 * np.pi * n / N)


def warp_displacement(J, N, C_t):
    """Vertical displacement (pixels) of every column, piecewise-affine in x."""
    return np.interp(np.arange(J), warp_nodes(J, N), warp_node_displacements(C_t, N))


def warp_frame(base, N, C_t):
    """Shift column j of ``base`` vertically by its displacement (linear interp, edge clamp)."""
    base = np.asarray(base, dtype=float)
    J = base.shape[0]
    if C_t == 0:
        return base.copy()
    d = warp_displacement(J, N, C_t)
    rows = np.arange(J, dtype=float)
    out = np.empty_like(base)
    for j in range(J):
        out[:, j] = np.interp(rows - d[j], rows, base[:, j])
    return out


def warp_sequence(recipe: WarpRecipe) -> DynamicObject:
    """Frame t is the base frame warped with amplitude C(t); frame 0 is the base."""
    base = recipe.base_frame.pixels
    frames = [warp_frame(base, recipe.N, c) for c in recipe.C]
    steps = np.abs(np.diff(recipe.C)) if recipe.C.size > 1 else np.zeros(1)
    lipschitz = float(np.max(np.abs(np.diff(base, axis=0)))) if base.shape[0] > 1 else 0.0
    meta = {
        "warp_N": recipe.N,
        "C": recipe.C.tolist(),
        "max_velocity": float(np.max(steps)) * lipschitz,
    }
    return DynamicObject.from_stack(
        np.stack(frames),
        provenance="warp_sequence",
        pixel_spacing=recipe.base_frame.pixel_spacing,
        meta=meta,
    )


# ---------------------------------------------------------------------------
# procedural dynamic phantoms
# ---------------------------------------------------------------------------


def _ramp_edge(signed, width):
    """Linear edge profile: 1 inside, 0 outside, Lipschitz 1/width."""
    return np.clip(signed / width + 0.5, 0.0, 1.0)


def _ellipse_field(X, Y, cx, cy, a, b, rot, width):
    Xr = (X - cx) * np.cos(rot) + (Y - cy) * np.sin(rot)
    Yr = -(X - cx) * np.sin(rot) + (Y - cy) * np.cos(rot)
    rho = np.sqrt((Xr / a) ** 2 + (Yr / b) ** 2)
    # (1 - rho) * min(a, b) is 1-Lipschitz, so the field is (1/width)-Lipschitz
    return _ramp_edge((1.0 - rho) * min(a, b), width)


def _ellipses(J, P, seed, merge):
    rng = np.random.default_rng(seed)
    X, Y = _fine_grid(J, SUPERSAMPLE)
    width = J / 32
    t = np.arange(P) / max(P - 1, 1)
    if merge:
        # two blobs approach and fuse: a topology change
        gap = J * 0.22
        specs = [
            (-gap, 0.0, J * 0.12, J * 0.09, 0.0, +gap * 0.9, 0.0, 1.0),
            (+gap, 0.0, J * 0.12, J * 0.09, 0.0, -gap * 0.9, 0.0, 0.8),
        ]
    else:
        specs = []
        for _ in range(3):
            cx, cy = rng.uniform(-J * 0.15, J * 0.15, 2)
            a, b = rng.uniform(J * 0.06, J * 0.14, 2)
            vx, vy = rng.uniform(-J * 0.1, J * 0.1, 2)
            specs.append((cx, cy, a, b, rng.uniform(0, np.pi), vx, vy, rng.uniform(0.4, 1.0)))
    frames = []
    for tt in t:
        img = np.zeros_like(X)
        for cx, cy, a, b, rot, vx, vy, val in specs:
            img = np.maximum(img, val * _ellipse_field(X, Y, cx + vx * tt, cy + vy * tt, a, b, rot, width))
        frames.append(_box_down(img, J, SUPERSAMPLE))
    speed = max(np.hypot(s[5], s[6]) for s in specs) / max(P - 1, 1)
    max_val = max(s[7] for s in specs)
    return np.stack(frames), speed * max_val / width


def _porous(J, P, seed, strain=0.3):
    """Porous block with smooth-edged pores, compressed vertically toward its bottom."""
    rng = np.random.default_rng(seed)
    X, Y = _fine_grid(J, SUPERSAMPLE)
    width = J / 32
    half = J * 0.3
    bottom = -half
    pores = [(rng.uniform(-half, half), rng.uniform(-half, half), rng.uniform(J * 0.03, J * 0.07)) for _ in range(14)]
    t = np.arange(P) / max(P - 1, 1)
    frames = []
    for tt in t:
        s = 1.0 - strain * tt
        Yu = bottom + (Y - bottom) / s
        solid = np.minimum(_ramp_edge(half - np.abs(X), width), _ramp_edge(half - np.abs(Yu), width))
        void = np.zeros_like(X)
        for px, py, pr in pores:
            void = np.maximum(void, _ramp_edge(pr - np.hypot(X - px, Yu - py), width))
        frames.append(_box_down(np.clip(solid - void, 0.0, 1.0), J, SUPERSAMPLE))
    # |d/dt Yu| <= |Y - bottom| strain / s_min^2 with |Y - bottom| <= J/2 - bottom;
    # solid - void is (2/width)-Lipschitz in Yu
    s_min = 1.0 - strain
    speed = (J / 2 - bottom) * strain / s_min**2 / max(P - 1, 1)
    return np.stack(frames), 2 * speed / width


def procedural_phantom(J, P, recipe_id="warped_walnut", seed=0, C_max=None, N=10, smoothing=None) -> DynamicObject:
    """Deterministic dynamic phantom families with known ground truth.

    ``meta["max_velocity"]`` bounds the pixelwise (hence mean) absolute change
    between consecutive frames.
    """
    if J < 2 or P < 2:
        raise ValidationError("procedural phantoms need J >= 2 and P >= 2")
    if recipe_id == "warped_walnut":
        base = ImageFrame(walnut_slice(J, seed, smoothing))
        obj = warp_sequence(WarpRecipe.linear(base, P, C_max, N))
    elif recipe_id == "static_walnut":
        base = walnut_slice(J, seed, smoothing)
        obj = DynamicObject(np.repeat(base[:, :, None], P, axis=2), meta={"max_velocity": 0.0})
    elif recipe_id in ("ellipses", "ellipses_merge"):
        stack, vmax = _ellipses(J, P, seed, recipe_id == "ellipses_merge")
        obj = DynamicObject.from_stack(stack, meta={"max_velocity": float(vmax)})
    elif recipe_id == "porous":
        stack, vmax = _porous(J, P, seed)
        obj = DynamicObject.from_stack(stack, meta={"max_velocity": float(vmax)})
    else:
        raise ValidationError(f"unknown phantom recipe {recipe_id!r}; choose from {RECIPES}")
    obj.frames = np.clip(obj.frames, 0.0, 1.0)
    obj.normalization = float(obj.frames.max())
    obj.provenance = f"procedural:{recipe_id}"
    obj.meta.update({"recipe": recipe_id, "seed": int(seed), "J": int(J), "P": int(P)})
    return obj


def static_training_slices(J, n_objects=4, seed=1000, smoothing=None):
    """Static walnut-like slices from objects other than the test object.

    Each object contributes its slice plus rotated and flipped copies, the
    analogue of axial/coronal/sagittal slices of a second specimen.
    """
    frames = []
    for k in range(n_objects):
        base = walnut_slice(J, seed + k, smoothing)
        for r in range(4):
            rot = np.rot90(base, r)
            frames.extend([rot, rot[:, ::-1]])
    return [ImageFrame(f) for f in frames]


# ---------------------------------------------------------------------------
# container I/O
# ---------------------------------------------------------------------------


def save_arrays(path, arrays: dict, meta: dict):
    """Write named arrays plus a JSON metadata block to one file."""
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.hasobject:
            raise ValidationError(f"array {name!r} has object dtype")
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        parts += [struct.pack("<H", len(name_b)), name_b, struct.pack("<B", len(dtype_b)), dtype_b]
        parts.append(struct.pack("<B", arr.ndim))
        parts += [struct.pack("<Q", n) for n in arr.shape]
        payload = arr.tobytes(order="C")
        parts += [struct.pack("<Q", len(payload)), payload]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise ContainerError(f"truncated file while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))[0]


def load_arrays(path):
    """Inverse of :func:`save_arrays`; returns (arrays, meta)."""
    data = Path(path).read_bytes()
    rd = _Reader(data)
    if rd.take(len(MAGIC), "magic") != MAGIC:
        raise ContainerError("not a dynct container (bad magic)", 0)
    version = rd.unpack("<I", "version")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}", rd.pos - 4)
    meta_len = rd.unpack("<Q", "metadata length")
    start = rd.pos
    try:
        meta = json.loads(rd.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"corrupt metadata block: {exc}", start) from None
    arrays = {}
    for _ in range(rd.unpack("<I", "array count")):
        at = rd.pos
        name = rd.take(rd.unpack("<H", "name length"), "array name").decode("utf-8")
        dtype_str = rd.take(rd.unpack("<B", "dtype length"), "dtype").decode("ascii")
        try:
            dtype = np.dtype(dtype_str)
        except TypeError:
            raise ContainerError(f"bad dtype {dtype_str!r} for array {name!r}", at) from None
        ndim = rd.unpack("<B", "ndim")
        shape = tuple(rd.unpack("<Q", "shape") for _ in range(ndim))
        nbytes = rd.unpack("<Q", "payload length")
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if nbytes != expected:
            raise ContainerError(
                f"array {name!r}: declared {nbytes} bytes but shape {shape} x {dtype} needs {expected}",
                rd.pos - 8,
            )
        payload = rd.take(nbytes, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if rd.pos != len(data):
        raise ContainerError(f"{len(data) - rd.pos} trailing bytes after last array", rd.pos)
    return arrays, meta


def save_object(path, obj):
    """Persist a DynamicObject or SinogramSet."""
    if isinstance(obj, DynamicObject):
        meta = {
            "kind": "DynamicObject",
            "normalization": obj.normalization,
            "provenance": obj.provenance,
            "pixel_spacing": obj.pixel_spacing,
            "meta": obj.meta,
        }
        save_arrays(path, {"frames": obj.frames}, meta)
    elif isinstance(obj, SinogramSet):
        sch = obj.schedule
        meta = {
            "kind": "SinogramSet",
            "scheme_name": sch.scheme_name,
            "distinct_views": sch.distinct_views,
            "noise_sigma": obj.noise_sigma,
            "seed": obj.seed,
        }
        save_arrays(path, {"sinogram": obj.as_array(), "angles": sch.angles, "times": sch.times}, meta)
    else:
        raise ValidationError(f"cannot save object of type {type(obj).__name__}")


def load_object(path):
    arrays, meta = load_arrays(path)
    kind = meta.get("kind")
    if kind == "DynamicObject":
        return DynamicObject(
            arrays["frames"],
            normalization=meta["normalization"],
            provenance=meta["provenance"],
            pixel_spacing=meta["pixel_spacing"],
            meta=meta["meta"],
        )
    if kind == "SinogramSet":
        sch = AngleSchedule(arrays["angles"], meta["scheme_name"], meta["distinct_views"], arrays["times"])
        return SinogramSet.from_array(arrays["sinogram"], sch, meta["noise_sigma"], meta["seed"])
    raise ContainerError(f"container holds {kind!r}, not a DynamicObject or SinogramSet")


# ---------------------------------------------------------------------------
# ingestion
# ---------------------------------------------------------------------------


def _read_stack(path):
    path = Path(path)
    if path.is_dir():
        from PIL import Image

        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".tif", ".tiff", ".pgm"))
        if not files:
            raise ValidationError(f"no image slices in {path}")
        return np.stack([np.asarray(Image.open(f), dtype=float) for f in files])
    suffix = path.suffix.lower()
    if suffix == ".npy":
        return np.load(path)
    if suffix == ".npz":
        with np.load(path) as z:
            return z[z.files[0]]
    if suffix in (".tif", ".tiff"):
        from PIL import Image, ImageSequence

        with Image.open(path) as im:
            return np.stack([np.asarray(page, dtype=float) for page in ImageSequence.Iterator(im)])
    arrays, meta = load_arrays(path)
    if meta.get("kind") == "DynamicObject":
        return np.moveaxis(arrays["frames"], 2, 0)
    return next(iter(arrays.values()))


def _square(img):
    h, w = img.shape
    n = max(h, w)
    out = np.zeros((n, n), dtype=float)
    out[(n - h) // 2 : (n - h) // 2 + h, (n - w) // 2 : (n - w) // 2 + w] = img
    return out


def ingest_volume(path, J=None, axis=0, pixel_spacing=1.0):
    """Load a slice stack (.npy/.npz/.tif/container/dir of images) as ImageFrames.

    Slices are taken along ``axis``, zero-padded to square, and resized to
    J x J by antialiased linear interpolation. Pixel spacing grows by the
    resize factor so total mass (sum x pixel area) is approximately kept.
    """
    from skimage.transform import resize

    vol = np.asarray(_read_stack(path), dtype=float)
    if vol.ndim == 2:
        vol = vol[None]
    if vol.ndim != 3:
        raise ValidationError(f"expected a 3D volume, got shape {vol.shape}")
    vol = np.moveaxis(vol, axis, 0)
    frames = []
    for sl in vol:
        sq = _square(sl)
        n = sq.shape[0]
        target = J or n
        img = sq if target == n else resize(sq, (target, target), order=1, anti_aliasing=True, preserve_range=True)
        frames.append(ImageFrame(img, pixel_spacing * n / target))
    return frames
