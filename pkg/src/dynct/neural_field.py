"""Coordinate MLP with Fourier positional encoding, rendered on a space-time grid."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import NumericalError, ValidationError
from .types import DynamicObject


@dataclass
class NFConfig:
    """Positional encoding size L, number of hidden layers h and their width.

    ``init_gain`` sets the uniform init bound sqrt(init_gain / fan_in) for
    weights and biases; 6 gives He-uniform.
    """

    L: int = 10
    hidden_layers: int = 7
    width: int = 64
    init_gain: float = 1.0

    def __post_init__(self):
        if self.L < 1 or self.hidden_layers < 1 or self.width < 1:
            raise ValidationError("NF config needs L, hidden_layers, width >= 1")
        if not self.init_gain > 0:
            raise ValidationError("init_gain must be positive")

    @property
    def in_features(self):
        return 6 * self.L

    def layer_shapes(self):
        dims = [self.in_features] + [self.width] * self.hidden_layers + [1]
        return list(zip(dims[:-1], dims[1:]))

    def check_expressivity(self, J):
        """Warn when depth is below log2(J pi / (L pi / 2)) for grid size J."""
        need = math.log2(J * math.pi / (self.L * math.pi / 2))
        if self.hidden_layers < need:
            warnings.warn(
                f"{self.hidden_layers} hidden layers < {need:.2f} needed to reach the grid "
                f"frequency at J={J} with L={self.L}",
                stacklevel=2,
            )
        return need


def param_count(arch: NFConfig) -> int:
    """Sum over layers of (fan_in + 1) * fan_out."""
    return sum((i + 1) * o for i, o in arch.layer_shapes())


def frequencies(L):
    return np.pi * np.arange(1, L + 1) / 2


def posenc(nu, L):
    """Encode coordinates in [0, 1]^3 as (..., L, 6): three sines then three cosines.

    Works on numpy arrays and torch tensors.
    """
    is_torch = torch.is_tensor(nu)
    lib = torch if is_torch else np
    if nu.shape[-1] != 3:
        raise ValidationError("coordinates must have 3 components (x, y, t)")
    if is_torch:
        bad = bool(((nu < 0) | (nu > 1)).any())
    else:
        nu = np.asarray(nu, dtype=float)
        bad = bool(np.any((nu < 0) | (nu > 1)))
    if bad:
        raise ValidationError("coordinates must be normalized to [0, 1]")
    freq = frequencies(L)
    if is_torch:
        freq = torch.as_tensor(freq, dtype=nu.dtype, device=nu.device)
    arg = nu[..., None, :] * freq[:, None]
    return lib.cat([lib.sin(arg), lib.cos(arg)], -1) if is_torch else np.concatenate([np.sin(arg), np.cos(arg)], -1)


class NeuralField(nn.Module):
    """f(nu) = MLP(posenc(nu)); ReLU hidden layers, linear scalar output."""

    def __init__(self, config: NFConfig | None = None, seed=0, dtype=torch.float32):
        super().__init__()
        self.config = config or NFConfig()
        layers = [nn.Linear(i, o, dtype=dtype) for i, o in self.config.layer_shapes()]
        self.layers = nn.ModuleList(layers)
        self.reset_parameters(seed)

    def reset_parameters(self, seed):
        """Fan-in scaled uniform weights and biases drawn from ``seed``."""
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for layer in self.layers:
                bound = math.sqrt(self.config.init_gain / layer.in_features)
                for p in (layer.weight, layer.bias):
                    u = torch.rand(p.shape, generator=gen, dtype=torch.float64)
                    p.copy_((2 * u - 1) * bound)

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def forward_encoded(self, feats):
        """MLP on already encoded inputs of shape (..., 6L)."""
        h = feats
        for layer in self.layers[:-1]:
            h = torch.relu(layer(h))
        return self.layers[-1](h).squeeze(-1)

    def forward(self, coords):
        coords = torch.as_tensor(coords, dtype=self.dtype)
        if coords.shape[-1] != 3:
            raise ValidationError("NF expects (..., 3) coordinates")
        feats = posenc(coords, self.config.L)
        return self.forward_encoded(feats.reshape(*feats.shape[:-2], -1))


FORWARD_CHUNK = 1024


def _rowwise_mlp(nf: NeuralField, feats):
    # per-row multiply and reduce; GEMM tiling would make rounding depend on row position
    h = feats
    last = len(nf.layers) - 1
    for k, layer in enumerate(nf.layers):
        h = (h[:, None, :] * layer.weight).sum(-1) + layer.bias
        if k < last:
            h = torch.relu(h)
    return h[:, 0]


def nf_forward(nf: NeuralField, coords):
    """Densities at a batch of coordinates (no output nonlinearity).

    Each point gets bit-identical output whether evaluated alone, in a batch,
    or in any permutation of one. Use ``GridEncoding.render`` for speed.
    """
    coords = torch.as_tensor(coords, dtype=nf.dtype)
    if coords.shape[-1] != 3:
        raise ValidationError("NF expects (..., 3) coordinates")
    lead = coords.shape[:-1]
    flat = coords.reshape(-1, 3)
    feats = posenc(flat, nf.config.L).reshape(flat.shape[0], -1)
    out = [_rowwise_mlp(nf, chunk) for chunk in feats.split(FORWARD_CHUNK)]
    return (torch.cat(out) if out else feats.new_zeros(0)).reshape(lead)


def grid_coords(J, P):
    """(P, J*J, 3) pixel-center coordinates ((i+.5)/J, (j+.5)/J, t/(P-1))."""
    if J < 1 or P < 1:
        raise ValidationError("grid needs J, P >= 1")
    s = (np.arange(J) + 0.5) / J
    ii, jj = np.meshgrid(s, s, indexing="ij")
    t = np.arange(P) / (P - 1) if P > 1 else np.zeros(1)
    xy = np.stack([ii.ravel(), jj.ravel()], -1)
    out = np.empty((P, J * J, 3))
    out[:, :, :2] = xy
    out[:, :, 2] = t[:, None]
    return out


class GridEncoding:
    """Precomputed positional encodings of every grid point, indexed by frame."""

    def __init__(self, J, P, L, dtype=torch.float32):
        self.J, self.P, self.L = J, P, L
        feats = posenc(grid_coords(J, P), L).reshape(P, J * J, 6 * L)
        self.feats = torch.as_tensor(feats, dtype=dtype)

    def render(self, nf: NeuralField, frames=None):
        """(len(frames), J, J) tensor; all frames by default."""
        feats = self.feats if frames is None else self.feats[frames]
        return nf.forward_encoded(feats).reshape(-1, self.J, self.J)


def render_grid(nf: NeuralField, J, P) -> DynamicObject:
    enc = GridEncoding(J, P, nf.config.L, nf.dtype)
    with torch.no_grad():
        stack = enc.render(nf).double().numpy()
    return DynamicObject.from_stack(stack, provenance="neural_field")


def nf_gradient(nf: NeuralField, loss_closure):
    """Reverse-mode gradient of a scalar loss with respect to every parameter.

    ``loss_closure(nf)`` must return a scalar tensor. Returns a dict keyed by
    parameter name.
    """
    params = dict(nf.named_parameters())
    loss = loss_closure(nf)
    if not torch.is_tensor(loss):
        loss = torch.as_tensor(loss, dtype=nf.dtype)
    if not torch.isfinite(loss):
        raise NumericalError("loss is not finite", {"loss": float(loss.detach())})
    if not loss.requires_grad:
        return {k: torch.zeros_like(p) for k, p in params.items()}
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return {k: (torch.zeros_like(p) if g is None else g) for (k, p), g in zip(params.items(), grads)}


def nf_arrays(nf: NeuralField):
    """Named parameter arrays plus config metadata, for the array container."""
    arrays = {k: v.detach().cpu().numpy() for k, v in nf.state_dict().items()}
    return arrays, {"kind": "NFParams", "config": asdict(nf.config), "dtype": str(nf.dtype)}


def nf_from_arrays(arrays, meta) -> NeuralField:
    dtype = torch.float64 if meta.get("dtype") == "torch.float64" else torch.float32
    nf = NeuralField(NFConfig(**meta["config"]), dtype=dtype)
    nf.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("layers.")})
    return nf


def save_nf(path, nf):
    from .datasets import save_arrays

    save_arrays(path, *nf_arrays(nf))


def load_nf(path) -> NeuralField:
    from .datasets import load_arrays

    arrays, meta = load_arrays(path)
    if meta.get("kind") != "NFParams":
        raise ValidationError(f"{path} does not hold NF parameters")
    return nf_from_arrays(arrays, meta)
