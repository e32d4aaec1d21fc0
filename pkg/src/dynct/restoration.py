"""Learned static restoration prior: degradation ensemble, CNN, supervised training."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .errors import NumericalError, ValidationError
from .types import ImageFrame

log = logging.getLogger(__name__)

SIGMA_MAX = 5e-2
K_MAX = 2.0


@dataclass
class DegradationSample:
    """H = zeta * blur_k + (1 - zeta) * I, followed by N(0, sigma^2) noise."""

    zeta: float
    kernel_size: float
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.zeta <= 1.0:
            raise ValidationError("zeta must lie in [0, 1]")
        if self.kernel_size < 0 or self.sigma < 0:
            raise ValidationError("kernel size and noise level must be nonnegative")

    @classmethod
    def draw(cls, rng, k_max=K_MAX, sigma_max=SIGMA_MAX):
        return cls(
            zeta=float(rng.uniform(0.0, 1.0)),
            kernel_size=float(rng.uniform(0.0, k_max)),
            sigma=float(rng.uniform(0.0, sigma_max)),
            seed=int(rng.integers(2**31)),
        )


def gaussian_blur(img, k):
    """Normalized Gaussian blur of std k px, truncated at 3k, reflective edges."""
    if k <= 0:
        return np.array(img, dtype=float, copy=True)
    return ndimage.gaussian_filter(np.asarray(img, dtype=float), k, mode="reflect", truncate=3.0)


def degrade(frame, sample: DegradationSample):
    pixels = frame.pixels if isinstance(frame, ImageFrame) else np.asarray(frame, dtype=float)
    out = pixels
    if sample.zeta > 0 and sample.kernel_size > 0:
        out = sample.zeta * gaussian_blur(pixels, sample.kernel_size) + (1.0 - sample.zeta) * pixels
    if sample.sigma > 0:
        out = out + sample.sigma * np.random.default_rng(sample.seed).standard_normal(pixels.shape)
    if isinstance(frame, ImageFrame):
        return ImageFrame(out, frame.pixel_spacing)
    return out


class RestorationModel(nn.Module):
    """Plain conv stack: 3x3 convs, ReLU after all but the single-channel output.

    With ``residual=True`` the net predicts the correction added to the input.
    """

    def __init__(self, layers=6, channels=64, residual=False, zero_init=False, seed=0, dtype=torch.float32):
        super().__init__()
        if layers < 2:
            raise ValidationError("restoration net needs at least 2 layers")
        self.n_layers, self.channels, self.residual = layers, channels, residual
        gen = torch.Generator().manual_seed(int(seed))
        convs = []
        for k in range(layers):
            cin = 1 if k == 0 else channels
            cout = 1 if k == layers - 1 else channels
            conv = nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect", dtype=dtype)
            with torch.no_grad():
                if zero_init:
                    conv.weight.zero_()
                else:
                    bound = np.sqrt(6.0 / (cin * 9))
                    conv.weight.copy_((2 * torch.rand(conv.weight.shape, generator=gen, dtype=torch.float64) - 1) * bound)
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)

    @property
    def receptive_field(self):
        return 2 * self.n_layers + 1

    def forward(self, x):
        """(B, J, J) or (B, 1, J, J) frames in, same shape out."""
        squeeze = x.dim() == 3
        h = x.unsqueeze(1) if squeeze else x
        inp = h
        for conv in self.convs[:-1]:
            h = torch.relu(conv(h))
        h = self.convs[-1](h)
        if self.residual:
            h = inp + h
        return h.squeeze(1) if squeeze else h

    def arch(self):
        return {"layers": self.n_layers, "channels": self.channels, "residual": self.residual}


def restore(model, frame):
    """Deterministic forward pass on one frame."""
    pixels = frame.pixels if isinstance(frame, ImageFrame) else np.asarray(frame, dtype=float)
    rf = getattr(model, "receptive_field", 1)
    if min(pixels.shape) < rf:
        raise ValidationError(f"frame {pixels.shape} smaller than receptive field {rf}")
    dtype = next(model.parameters()).dtype if any(True for _ in model.parameters()) else torch.float64
    with torch.no_grad():
        out = model(torch.as_tensor(pixels, dtype=dtype)[None])[0].double().numpy()
    if isinstance(frame, ImageFrame):
        return ImageFrame(out, frame.pixel_spacing)
    return out


@dataclass
class TrainConfig:
    epochs: int = 100
    batch: int = 16
    lr: float = 1e-3
    sigma_max: float = SIGMA_MAX
    k_max: float = K_MAX
    seed: int = 0
    patch: int | None = None
    layers: int = 6
    channels: int = 64
    residual: bool = False


@dataclass
class TrainResult:
    model: RestorationModel
    loss_history: list = field(default_factory=list)
    epoch_loss: list = field(default_factory=list)
    seconds: float = 0.0


def _crop(img, patch, rng):
    if patch is None or patch >= img.shape[0]:
        return img
    i, j = rng.integers(0, img.shape[0] - patch + 1, 2)
    return img[i : i + patch, j : j + patch]


def make_pairs(frames, k_max, sigma_max, rng, patch=None):
    """Fresh degradations of the given clean frames: (clean, degraded) arrays."""
    clean, noisy = [], []
    for f in frames:
        f = _crop(f, patch, rng)
        clean.append(f)
        noisy.append(degrade(f, DegradationSample.draw(rng, k_max, sigma_max)))
    return np.stack(clean), np.stack(noisy)


def train_restorer(clean_frames, config: TrainConfig | None = None) -> TrainResult:
    """Fit the restoration net to undo random blur + noise (mean squared error).

    Every epoch visits each frame once in shuffled mini-batches, and each
    visit draws a new degradation.
    """
    config = config or TrainConfig()
    frames = [f.pixels if isinstance(f, ImageFrame) else np.asarray(f, dtype=float) for f in clean_frames]
    if not frames:
        raise ValidationError("training set is empty")
    if len({f.shape for f in frames}) != 1:
        raise ValidationError("training frames must share one shape")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = RestorationModel(config.layers, config.channels, config.residual, seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    result = TrainResult(model)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(frames))
        losses = []
        for start in range(0, len(order), config.batch):
            batch = [frames[i] for i in order[start : start + config.batch]]
            clean, noisy = make_pairs(batch, config.k_max, config.sigma_max, rng, config.patch)
            x = torch.as_tensor(noisy, dtype=torch.float32)
            y = torch.as_tensor(clean, dtype=torch.float32)
            loss = torch.mean((model(x) - y) ** 2)
            if not torch.isfinite(loss):
                raise NumericalError("restorer training loss is not finite", {"epoch": epoch})
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        result.loss_history.extend(losses)
        result.epoch_loss.append(float(np.mean(losses)))
        if epoch % 20 == 0:
            log.info("restorer epoch %d loss %.3e", epoch, result.epoch_loss[-1])
    result.seconds = time.perf_counter() - t0
    model.eval()
    return result


def restoration_mse(model, frames, k_max=K_MAX, sigma_max=SIGMA_MAX, seed=123):
    """Mean squared error of restored vs clean over held-out degradations; also returns degraded MSE."""
    rng = np.random.default_rng(seed)
    frames = [f.pixels if isinstance(f, ImageFrame) else f for f in frames]
    clean, noisy = make_pairs(frames, k_max, sigma_max, rng)
    restored = np.stack([restore(model, n) for n in noisy])
    return float(np.mean((restored - clean) ** 2)), float(np.mean((noisy - clean) ** 2))


def model_arrays(model: RestorationModel):
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return arrays, {"kind": "RestorationModel", "arch": model.arch()}


def save_restorer(path, model, extra_meta=None):
    from .datasets import save_arrays

    arrays, meta = model_arrays(model)
    meta.update(extra_meta or {})
    save_arrays(path, arrays, meta)


def load_restorer(path) -> RestorationModel:
    from .datasets import load_arrays

    arrays, meta = load_arrays(path)
    if meta.get("kind") != "RestorationModel":
        raise ValidationError(f"{path} does not hold a restoration model")
    arch = meta["arch"]
    first = next(iter(arrays.values()))
    dtype = torch.float64 if first.dtype == np.float64 else torch.float32
    model = RestorationModel(arch["layers"], arch["channels"], arch["residual"], dtype=dtype)
    model.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    model.eval()
    return model


def train_config_dict(config: TrainConfig):
    return asdict(config)
