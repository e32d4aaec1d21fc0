"""Neural-field reconstruction from time-sequential projections.

The solver alternates three updates per outer iteration:

* a few Adam steps on the NF parameters against projection fidelity, a
  temporal second-difference penalty and the augmented coupling to fbar;
* an fbar update that pulls the NF render toward the restoration prior
  (a single network application per frame, or an exact inner solve);
* a scaled dual ascent step.

With ``lam == 0`` the prior and coupling vanish and the method reduces to
plain temporally regularized NF fitting (Temp-NF).
"""

from __future__ import annotations

import copy
import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .errors import NumericalError, ValidationError
from .metrics import psnr
from .neural_field import GridEncoding, NeuralField, NFConfig
from .tomo import footprint
from .types import DynamicObject, ImageFrame, SinogramSet

log = logging.getLogger(__name__)

HISTORY_COLUMNS = (
    "iter",
    "fidelity",
    "rho_tau",
    "rho_red",
    "primal_residual",
    "psnr_if_gt_available",
    "seconds",
    "objective",
    "lagrangian",
    "primal_residual_rel",
)


@dataclass
class SolverConfig:
    lam: float = 1.0
    xi: float = 1e2
    beta: float = 1.0
    outer_iters: int = 200
    inner_steps: int = 20
    lr: float = 5e-3
    batch_size: int | None = None  # defaults to max(1, P // 8)
    seed: int = 0
    nf: NFConfig = field(default_factory=NFConfig)
    fbar_mode: str = "fixed_point"  # or "exact"
    early_stop_tol: float = 1e-5
    early_stop_window: int = 10
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.nf, dict):
            self.nf = NFConfig(**self.nf)
        if self.lam < 0 or self.xi < 0:
            raise ValidationError("lam and xi must be nonnegative")
        if self.lam > 0 and not self.beta > 0:
            raise ValidationError("beta must be positive when lam > 0")
        if self.beta < 0:
            raise ValidationError("beta must be nonnegative")
        if self.outer_iters < 0 or self.inner_steps < 0:
            raise ValidationError("iteration counts must be nonnegative")
        if self.fbar_mode not in ("fixed_point", "exact"):
            raise ValidationError(f"unknown fbar mode {self.fbar_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def minibatch(self, P):
        m = self.batch_size if self.batch_size is not None else max(1, P // 8)
        if not 1 <= m <= P:
            raise ValidationError(f"minibatch size {m} outside [1, {P}]")
        return m

    @property
    def coupled(self):
        """Whether the prior/augmented terms take part (they are dropped at lam = 0)."""
        return self.lam > 0

    def to_dict(self):
        return asdict(self)


class TorchProjector:
    """Differentiable per-frame projection using the cached pixel footprints."""

    def __init__(self, angles, J, pixel_spacing=1.0, dtype=torch.float32):
        self.J = int(J)
        idx, wts = zip(*(footprint(a, J) for a in angles))
        self.idx = torch.as_tensor(np.stack(idx).reshape(len(angles), -1))
        self.wts = torch.as_tensor(np.stack(wts).reshape(len(angles), -1) * pixel_spacing, dtype=dtype)

    def __call__(self, frames, times):
        """frames (B, J, J) projected at the angles of ``times`` (B,) -> (B, J)."""
        times = torch.as_tensor(times, dtype=torch.long)
        B = frames.shape[0]
        vals = (frames.reshape(B, -1, 1) * self.wts[times].reshape(B, -1, 4)).reshape(B, -1)
        out = torch.zeros(B, self.J, dtype=frames.dtype)
        return out.scatter_add(1, self.idx[times], vals)


class ReconProblem:
    """Measurements plus the precomputed operators shared by all solver steps."""

    def __init__(self, sinos: SinogramSet, L, dtype=torch.float32, pixel_spacing=1.0, gt: DynamicObject | None = None):
        if sinos.P < 1:
            raise ValidationError("no projections")
        self.sinos = sinos
        self.J, self.P = sinos.J, sinos.P
        self.dtype = dtype
        self.g = torch.as_tensor(sinos.as_array(), dtype=dtype)
        self.projector = TorchProjector(sinos.schedule.angles, self.J, pixel_spacing, dtype)
        self.encoding = GridEncoding(self.J, self.P, L, dtype)
        if gt is not None and (gt.J, gt.P) != (self.J, self.P):
            raise ValidationError("ground truth does not match the measurement grid")
        self.gt = gt

    def render(self, nf, frames=None):
        return self.encoding.render(nf, frames)


# ---------------------------------------------------------------- loss terms


def _batch_tensor(batch, P):
    batch = torch.as_tensor(batch, dtype=torch.long).reshape(-1)
    if batch.numel() == 0:
        raise ValidationError("empty minibatch")
    if int(batch.min()) < 0 or int(batch.max()) >= P:
        raise ValidationError("minibatch index out of range")
    return batch


def fidelity_loss(nf, problem: ReconProblem, batch):
    """(P/|B|) * sum over t in B of ||g_t - R_t f_t||^2."""
    batch = _batch_tensor(batch, problem.P)
    frames = problem.render(nf, batch)
    resid = problem.g[batch] - problem.projector(frames, batch)
    return (problem.P / batch.numel()) * torch.sum(resid**2)


def _stack_of(obj):
    if isinstance(obj, DynamicObject):
        return obj.stack()
    return obj


def temporal_penalty(obj):
    """Sum over interior frames of ||f_{t-1} - 2 f_t + f_{t+1}||^2.

    Accepts a DynamicObject or a (P, J, J) array/tensor; 0 when P < 3.
    """
    f = _stack_of(obj)
    if f.shape[0] < 3:
        return f.sum() * 0 if torch.is_tensor(f) else 0.0
    d2 = f[:-2] - 2 * f[1:-1] + f[2:]
    return (d2**2).sum() if torch.is_tensor(f) else float(np.sum(d2**2))


class LinearStub:
    """D(f) = A f for a fixed (J*J, J*J) matrix or a scalar; used to validate the solver."""

    def __init__(self, A):
        self.A = A

    def __call__(self, stack):
        stack = np.asarray(stack, dtype=float)
        if np.isscalar(self.A):
            return self.A * stack
        flat = stack.reshape(stack.shape[0], -1)
        return (flat @ np.asarray(self.A).T).reshape(stack.shape)


def apply_restorer(model, stack):
    """Apply D to a (B, J, J) numpy stack frame by frame (batched)."""
    stack = np.asarray(stack, dtype=float)
    if model is None:
        return stack.copy()
    if isinstance(model, torch.nn.Module):
        dtype = next(model.parameters()).dtype
        with torch.no_grad():
            return model(torch.as_tensor(stack, dtype=dtype)).double().numpy()
    return np.asarray(model(stack), dtype=float)


def _frame_pixels(frame):
    return frame.pixels if isinstance(frame, ImageFrame) else np.asarray(frame, dtype=float)


def red_penalty(frame, model, restored=None):
    """f^T (f - D(f)) with the frame vectorized."""
    f = _frame_pixels(frame)
    d = apply_restorer(model, f[None])[0] if restored is None else restored
    return float(np.sum(f * (f - d)))


def red_gradient(frame, model, restored=None):
    """Gradient-rule residual f - D(f)."""
    f = _frame_pixels(frame)
    d = apply_restorer(model, f[None])[0] if restored is None else restored
    out = f - d
    return ImageFrame(out, frame.pixel_spacing) if isinstance(frame, ImageFrame) else out


# ---------------------------------------------------------------- state


@dataclass
class ADMMState:
    nf: NeuralField
    optimizer: torch.optim.Optimizer
    fbar: np.ndarray  # (P, J, J)
    dual: np.ndarray  # (P, J, J)
    generator: torch.Generator
    restored: np.ndarray | None = None  # cached D(fbar), same shape
    iteration: int = 0
    history: list = field(default_factory=list)

    def fbar_object(self):
        return DynamicObject.from_stack(self.fbar, provenance="fbar")


def init_state(problem: ReconProblem, config: SolverConfig, restorer=None) -> ADMMState:
    nf = NeuralField(config.nf, seed=config.seed, dtype=config.torch_dtype)
    opt = torch.optim.Adam(nf.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(int(config.seed))
    with torch.no_grad():
        f0 = problem.render(nf).double().numpy()
    state = ADMMState(nf, opt, f0.copy(), np.zeros_like(f0), gen)
    if config.coupled:
        state.restored = apply_restorer(restorer, state.fbar)
    return state


def sample_batch(state: ADMMState, P, m):
    return torch.randint(0, P, (m,), generator=state.generator)


def inner_loss(nf, problem: ReconProblem, state: ADMMState, config: SolverConfig, batch):
    """Minibatch estimate of the NF subproblem objective; returns (total, terms)."""
    batch = _batch_tensor(batch, problem.P)
    P, m = problem.P, batch.numel()
    scale = P / m
    # frames needed: the batch plus neighbours of interior batch frames
    interior = batch[(batch > 0) & (batch < P - 1)]
    needed = torch.unique(torch.cat([batch, interior - 1, interior + 1]))
    pos = torch.full((P,), -1, dtype=torch.long)
    pos[needed] = torch.arange(needed.numel())
    frames = problem.render(nf, needed)

    fb = frames[pos[batch]]
    resid = problem.g[batch] - problem.projector(fb, batch)
    terms = {"fidelity": scale * torch.sum(resid**2)}
    if config.xi > 0 and interior.numel():
        d2 = frames[pos[interior - 1]] - 2 * frames[pos[interior]] + frames[pos[interior + 1]]
        terms["rho_tau"] = config.xi * scale * torch.sum(d2**2)
    if config.coupled and config.beta > 0:
        target = torch.as_tensor(state.fbar - state.dual, dtype=fb.dtype)[batch]
        terms["augmented"] = 0.5 * config.beta * scale * torch.sum((fb - target) ** 2)
    total = sum(terms.values())
    return total, terms


def full_inner_loss(nf, problem, state, config):
    """Deterministic full-batch version of the inner objective (every t once)."""
    return inner_loss(nf, problem, state, config, torch.arange(problem.P))


# ---------------------------------------------------------------- steps


def nf_step(state: ADMMState, problem: ReconProblem, config: SolverConfig):
    """``inner_steps`` Adam updates on fresh minibatches drawn with replacement."""
    m = config.minibatch(problem.P)
    for _ in range(config.inner_steps):
        batch = sample_batch(state, problem.P, m)
        loss, terms = inner_loss(state.nf, problem, state, config, batch)
        if not torch.isfinite(loss):
            raise NumericalError(
                "non-finite inner loss",
                {"iteration": state.iteration, **{k: float(v.detach()) for k, v in terms.items()}},
            )
        state.optimizer.zero_grad()
        loss.backward()
        state.optimizer.step()
    return state.nf


def fbar_step_fixed_point(state: ADMMState, f_tilde, config: SolverConfig, restorer=None):
    """lam/(lam+beta) D(fbar_prev) + beta/(lam+beta) (f_tilde + dual)."""
    lam, beta = config.lam, config.beta
    if not lam + beta > 0:
        raise ValidationError("lam + beta must be positive")
    c = f_tilde + state.dual
    if lam == 0:
        return c
    d = state.restored if state.restored is not None else apply_restorer(restorer, state.fbar)
    return (lam / (lam + beta)) * d + (beta / (lam + beta)) * c


def fbar_step_exact(state: ADMMState, f_tilde, config: SolverConfig, restorer=None, tol=1e-8, max_steps=100):
    """Gradient descent on lam rho(f) + beta/2 ||c - f||^2 for every frame.

    Uses 2 lam (f - D f) + beta (f - c) as the gradient (exact for a
    symmetric linear D), warm-started at the previous fbar.
    """
    lam, beta = config.lam, config.beta
    c = f_tilde + state.dual
    if lam == 0:
        return c
    if not beta > 0:
        raise ValidationError("beta must be positive")
    step = 1.0 / (beta + 4.0 * lam)
    f = state.fbar.copy()

    def objective(f, d):
        return lam * np.sum(f * (f - d)) + 0.5 * beta * np.sum((c - f) ** 2)

    d = apply_restorer(restorer, f)
    prev, rises = objective(f, d), 0
    for _ in range(max_steps):
        grad = 2 * lam * (f - d) + beta * (f - c)
        if np.max(np.sqrt(np.sum(grad**2, axis=(1, 2)))) < tol:
            break
        f = f - step * grad
        d = apply_restorer(restorer, f)
        cur = objective(f, d)
        rises = rises + 1 if cur > prev else 0
        if rises >= 10:
            raise NumericalError("exact fbar step diverged", {"objective": float(cur)})
        prev = cur
    return f


def dual_step(dual, f_tilde, fbar):
    return dual + (f_tilde - fbar)


def stationarity_residual(fbar, f_tilde, dual, restorer, config):
    """lam (f - D f) + beta (f - f_tilde - dual)."""
    return config.lam * (fbar - apply_restorer(restorer, fbar)) + config.beta * (fbar - f_tilde - dual)


# ---------------------------------------------------------------- driver


def _record(state, problem, config, f_tilde, seconds):
    with torch.no_grad():
        ft = torch.as_tensor(f_tilde, dtype=problem.dtype)
        resid = problem.g - problem.projector(ft, torch.arange(problem.P))
        fidelity = float(torch.sum(resid.double() ** 2))
    rho_tau = temporal_penalty(f_tilde)
    row = {"iter": state.iteration, "fidelity": fidelity, "rho_tau": rho_tau}
    objective = fidelity + config.xi * rho_tau
    if config.coupled:
        rho_red = float(np.sum(state.fbar * (state.fbar - state.restored)))
        diff = f_tilde - state.fbar
        primal = float(np.linalg.norm(diff))
        aug = 0.5 * config.beta * float(np.sum((diff + state.dual) ** 2))
        objective += config.lam * rho_red + aug
        lagrangian = objective - 0.5 * config.beta * float(np.sum(state.dual**2))
    else:
        rho_red, primal, lagrangian = 0.0, 0.0, objective
    row.update(
        rho_red=rho_red,
        primal_residual=primal,
        primal_residual_rel=primal / max(float(np.linalg.norm(f_tilde)), 1e-300),
        objective=objective,
        lagrangian=lagrangian,
        seconds=seconds,
        psnr_if_gt_available=float("nan"),
    )
    if problem.gt is not None:
        gt = problem.gt.stack()
        peak = float(np.max(gt))
        row["psnr_if_gt_available"] = float(np.mean([psnr(f_tilde[t], gt[t], peak) for t in range(problem.P)]))
    return row


def _converged(history, config):
    w = config.early_stop_window
    if w <= 0 or len(history) <= w:
        return False
    old, new = history[-1 - w]["objective"], history[-1]["objective"]
    return abs(new - old) <= config.early_stop_tol * max(abs(old), 1e-300)


def save_checkpoint(path, state: ADMMState, config: SolverConfig):
    payload = {
        "nf": state.nf.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "fbar": state.fbar,
        "dual": state.dual,
        "restored": state.restored,
        "generator": state.generator.get_state(),
        "iteration": state.iteration,
        "history": state.history,
        "config": config.to_dict(),
    }
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, problem: ReconProblem, config: SolverConfig) -> ADMMState:
    payload = torch.load(path, weights_only=False)
    state = init_state(problem, SolverConfig(**{**config.to_dict(), "lam": 0.0}))
    state.nf.load_state_dict(payload["nf"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.generator.set_state(payload["generator"])
    state.fbar, state.dual, state.restored = payload["fbar"], payload["dual"], payload["restored"]
    state.iteration = payload["iteration"]
    state.history = list(payload["history"])
    return state


def _snapshot(state):
    return {
        "nf": copy.deepcopy(state.nf.state_dict()),
        "optimizer": copy.deepcopy(state.optimizer.state_dict()),
        "fbar": state.fbar.copy(),
        "dual": state.dual.copy(),
        "restored": None if state.restored is None else state.restored.copy(),
        "generator": state.generator.get_state(),
        "iteration": state.iteration,
        "history": list(state.history),
    }


@dataclass
class ReconResult:
    obj: DynamicObject
    state: ADMMState
    history: list
    stopped_early: bool = False


def rsr_nf_reconstruct(
    sinos: SinogramSet,
    restorer,
    config: SolverConfig,
    gt: DynamicObject | None = None,
    resume_from=None,
    pixel_spacing=1.0,
) -> ReconResult:
    """Run ``outer_iters`` rounds of {nf_step, fbar step, dual step}."""
    if config.coupled and restorer is None:
        raise ValidationError("lam > 0 needs a restoration model")
    problem = ReconProblem(sinos, config.nf.L, config.torch_dtype, pixel_spacing, gt)
    state = load_checkpoint(resume_from, problem, config) if resume_from else init_state(problem, config, restorer)
    fstep = fbar_step_exact if config.fbar_mode == "exact" else fbar_step_fixed_point
    good = _snapshot(state)
    stopped = False
    while state.iteration < config.outer_iters:
        t0 = time.perf_counter()
        try:
            nf_step(state, problem, config)
            with torch.no_grad():
                f_tilde = problem.render(state.nf).double().numpy()
            if not np.all(np.isfinite(f_tilde)):
                raise NumericalError("non-finite NF render", {"iteration": state.iteration})
            if config.coupled:
                state.fbar = fstep(state, f_tilde, config, restorer)
                state.dual = dual_step(state.dual, f_tilde, state.fbar)
                state.restored = apply_restorer(restorer, state.fbar)
                if not (np.all(np.isfinite(state.fbar)) and np.all(np.isfinite(state.dual))):
                    raise NumericalError("non-finite ADMM state", {"iteration": state.iteration})
            else:
                state.fbar, state.dual = f_tilde, np.zeros_like(f_tilde)
        except NumericalError as err:
            if config.checkpoint_path:
                torch.save(good, config.checkpoint_path)
                err.diagnostics["last_good_checkpoint"] = str(config.checkpoint_path)
            err.diagnostics["last_good_iteration"] = good["iteration"]
            raise
        state.iteration += 1
        state.history.append(_record(state, problem, config, f_tilde, time.perf_counter() - t0))
        row = state.history[-1]
        log.info(
            "iter %d obj %.4e fid %.4e psnr %.2f",
            row["iter"], row["objective"], row["fidelity"], row["psnr_if_gt_available"],
        )
        good = _snapshot(state)
        if config.checkpoint_every and config.checkpoint_path and state.iteration % config.checkpoint_every == 0:
            save_checkpoint(config.checkpoint_path, state, config)
        if _converged(state.history, config):
            stopped = True
            break
    with torch.no_grad():
        final = problem.render(state.nf).double().numpy()
    obj = DynamicObject.from_stack(final, provenance="rsr-nf" if config.coupled else "temp-nf", pixel_spacing=pixel_spacing)
    return ReconResult(obj, state, state.history, stopped)


def temp_nf_reconstruct(sinos, config: SolverConfig, gt=None, resume_from=None, pixel_spacing=1.0) -> ReconResult:
    """The same pipeline with the spatial prior switched off (lam = 0)."""
    cfg = SolverConfig(**{**config.to_dict(), "lam": 0.0})
    return rsr_nf_reconstruct(sinos, None, cfg, gt, resume_from, pixel_spacing)


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_COLUMNS})
