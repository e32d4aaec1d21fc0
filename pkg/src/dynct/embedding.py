"""Representation power: direct NF fits vs rank-K separable (SVD) truncations."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import NumericalError, ValidationError
from .metrics import evaluate, psnr
from .neural_field import NeuralField, NFConfig, grid_coords, param_count, posenc
from .types import DynamicObject


def _matrix(obj: DynamicObject):
    return obj.frames.reshape(obj.J * obj.J, obj.P)


def svd_truncate(obj: DynamicObject, K) -> DynamicObject:
    """Best rank-K approximation of the J^2 x P Casorati matrix."""
    K = int(K)
    if not 1 <= K <= min(obj.J**2, obj.P):
        raise ValidationError(f"rank K={K} outside [1, {min(obj.J ** 2, obj.P)}]")
    U, s, Vt = np.linalg.svd(_matrix(obj), full_matrices=False)
    low = (U[:, :K] * s[:K]) @ Vt[:K]
    return DynamicObject(low.reshape(obj.frames.shape), provenance=f"svd_rank{K}", pixel_spacing=obj.pixel_spacing)


def psm_param_count(J, P, K):
    return int(K) * (int(J) ** 2 + int(P))


def als_rank_k(M, K, iters=500, seed=0):
    """Alternating least squares for min ||M - U V^T||_F with rank K."""
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((M.shape[1], K))
    for _ in range(iters):
        U = np.linalg.lstsq(V, M.T, rcond=None)[0].T
        V = np.linalg.lstsq(U, M, rcond=None)[0].T
    return U @ V.T


@dataclass
class EmbeddingResult:
    label: str
    params: int
    psnr_db: float
    ssim: float
    seconds: float
    config: dict = field(default_factory=dict)
    psnr_curve: list = field(default_factory=list)  # (iteration, PSNR) pairs

    def __post_init__(self):
        if self.params <= 0:
            raise ValidationError("parameter count must be positive")
        if not (np.isfinite(self.psnr_db) and np.isfinite(self.ssim)):
            raise NumericalError("embedding metrics are not finite", {"label": self.label})

    def row(self):
        return {k: v for k, v in asdict(self).items() if k not in ("config", "psnr_curve")}


def psm_embedding(obj: DynamicObject, K) -> EmbeddingResult:
    t0 = time.perf_counter()
    approx = svd_truncate(obj, K)
    rec = evaluate(approx, obj)
    return EmbeddingResult(
        f"psm_rank{K}", psm_param_count(obj.J, obj.P, K), rec.psnr_db, rec.ssim,
        time.perf_counter() - t0, {"K": int(K)},
    )


def fit_nf_embedding(
    obj: DynamicObject,
    arch: NFConfig,
    iters=10000,
    lr=5e-3,
    seed=0,
    batch_points=16384,
    eval_every=500,
):
    """Fit an NF to the whole space-time grid by minibatch MSE with Adam.

    Returns ``(nf, EmbeddingResult)``. Points are drawn uniformly with
    replacement from the J*J*P grid at every iteration.
    """
    if iters < 0:
        raise ValidationError("iters must be nonnegative")
    J, P = obj.J, obj.P
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(int(seed))
    nf = NeuralField(arch, seed=seed)
    feats = torch.as_tensor(posenc(grid_coords(J, P), arch.L).reshape(P * J * J, -1), dtype=torch.float32)
    target = torch.as_tensor(obj.stack().reshape(-1), dtype=torch.float32)
    n = target.numel()
    batch_points = min(int(batch_points), n)
    opt = torch.optim.Adam(nf.parameters(), lr=lr)
    gt = obj.stack()
    peak = float(gt.max())

    def render():
        with torch.no_grad():
            return torch.cat([nf.forward_encoded(c) for c in feats.split(65536)]).double().numpy().reshape(P, J, J)

    curve = []
    t0 = time.perf_counter()
    for it in range(iters):
        idx = torch.randint(0, n, (batch_points,), generator=gen)
        loss = torch.mean((nf.forward_encoded(feats[idx]) - target[idx]) ** 2)
        if not torch.isfinite(loss):
            raise NumericalError("embedding fit diverged", {"iteration": it, "curve": curve})
        opt.zero_grad()
        loss.backward()
        opt.step()
        if eval_every and (it + 1) % eval_every == 0:
            curve.append((it + 1, psnr(render(), gt, peak)))
    seconds = time.perf_counter() - t0
    est = DynamicObject.from_stack(render())
    rec = evaluate(est, obj)
    result = EmbeddingResult(
        f"nf_{arch.hidden_layers}x{arch.width}_L{arch.L}", param_count(arch), rec.psnr_db, rec.ssim,
        seconds, {**asdict(arch), "iters": iters, "lr": lr, "seed": seed, "batch_points": batch_points}, curve,
    )
    return nf, result


def matched_nf_config(J, P, K=3, L=10, widths=(32, 48, 64, 96), depths=(2, 3, 4, 5, 7), tol=0.2):
    """The NF config whose parameter count is closest to rank-K PSM (within tol)."""
    target = psm_param_count(J, P, K)
    best = None
    for h in depths:
        for w in widths:
            cfg = NFConfig(L=L, hidden_layers=h, width=w)
            gap = abs(param_count(cfg) - target) / target
            if gap <= tol and (best is None or gap < best[0]):
                best = (gap, cfg)
    if best is None:
        raise ValidationError(f"no NF config within {tol:.0%} of {target} parameters")
    return best[1]


def write_results_csv(path, results):
    rows = [r.row() for r in results]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def plot_curves(path, results):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for r in results:
        if r.psnr_curve:
            its, vals = zip(*r.psnr_curve)
            ax.plot(its, vals, label=f"{r.label} ({r.params})")
        else:
            ax.axhline(r.psnr_db, ls="--", color="gray", label=f"{r.label} ({r.params})")
    ax.set_xlabel("iteration")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
