"""End-to-end experiment runner: phantom -> schedule -> measurements -> reconstruction -> report."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .acquisition import calibrate_noise_sigma, make_schedule, simulate_measurements
from .datasets import ingest_volume, load_object, procedural_phantom, save_object
from .errors import ValidationError
from .metrics import evaluate
from .neural_field import NFConfig
from .reconstruction import SolverConfig, rsr_nf_reconstruct, temp_nf_reconstruct, write_history_csv
from .restoration import load_restorer
from .tomo import fbp_sliding_window
from .types import DynamicObject

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "DYNCT_OUTPUT_ROOT"
METHODS = ("rsr-nf", "temp-nf", "fbp")
METRIC_COLUMNS = ("method", "P", "P_hat", "sigma", "psnr_db", "ssim", "mae", "hfen")


@dataclass
class DatasetSpec:
    recipe: str = "warped_walnut"
    J: int = 64
    P: int = 64
    seed: int = 0
    C_max: float | None = None
    N: int = 10
    smoothing: float | None = None
    path: str | None = None  # ingest a volume instead of generating
    axis: int = 0


@dataclass
class ScheduleSpec:
    scheme: str = "bit_reversed"
    P_hat: int | None = None
    P_hat_sweep: list = field(default_factory=list)
    noise_seed: int = 7
    target_db: float = 46.0
    sigma: float | None = None  # overrides calibration


@dataclass
class RestorerSpec:
    checkpoint: str | None = None


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    method: str = "rsr-nf"
    output_dir: str = "run"
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    restorer: RestorerSpec = field(default_factory=RestorerSpec)

    def to_dict(self):
        return asdict(self)


_NESTED = {
    ExperimentConfig: {"dataset": DatasetSpec, "schedule": ScheduleSpec, "solver": SolverConfig, "restorer": RestorerSpec},
    SolverConfig: {"nf": NFConfig},
}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ValidationError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _NESTED.get(cls, {}).get(key)
        kwargs[key] = _build(sub, value, f"{where}.{key}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as err:
        raise ValidationError(f"{where}: {err}") from err


def config_from_dict(data) -> ExperimentConfig:
    version = data.get("schema_version", SCHEMA_VERSION) if isinstance(data, dict) else None
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    cfg = _build(ExperimentConfig, data, "config")
    if cfg.method not in METHODS:
        raise ValidationError(f"method must be one of {METHODS}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise ValidationError(f"{path}: invalid JSON ({err})") from err
    return config_from_dict(data)


def save_config(path, config: ExperimentConfig):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def resolve_output_dir(output_dir):
    out = Path(output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def validate_config(config: ExperimentConfig):
    """Referential checks that must pass before any expensive stage runs."""
    if config.method == "rsr-nf" and config.solver.lam > 0:
        ckpt = config.restorer.checkpoint
        if not ckpt or not Path(ckpt).is_file():
            raise ValidationError(f"rsr-nf with lam > 0 needs a restorer checkpoint; not found: {ckpt!r}")
    if config.dataset.path and not Path(config.dataset.path).exists():
        raise ValidationError(f"dataset path not found: {config.dataset.path}")
    for p_hat in config.schedule.P_hat_sweep:
        if config.dataset.P % int(p_hat):
            raise ValidationError(f"P_hat={p_hat} does not divide P={config.dataset.P}")


def build_object(spec: DatasetSpec):
    if spec.path:
        if str(spec.path).endswith(".dct"):
            return load_object(spec.path)
        frames = ingest_volume(spec.path, spec.J, spec.axis)
        return DynamicObject(
            np.stack([f.pixels for f in frames], axis=2),
            provenance=f"ingest:{spec.path}",
            pixel_spacing=frames[0].pixel_spacing,
        )
    return procedural_phantom(spec.J, spec.P, spec.recipe, spec.seed, spec.C_max, spec.N, spec.smoothing)


def reconstruct(method, sinos, solver: SolverConfig, restorer=None, gt=None):
    """Returns (DynamicObject, history list)."""
    if method == "fbp":
        return fbp_sliding_window(sinos, gt.pixel_spacing if gt is not None else 1.0), []
    if method == "temp-nf":
        res = temp_nf_reconstruct(sinos, solver, gt=gt)
    else:
        res = rsr_nf_reconstruct(sinos, restorer, solver, gt=gt)
    return res.obj, res.history


def plot_psnr_vs_t(path, per_frame, label):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(per_frame, label=label)
    ax.set_xlabel("t")
    ax.set_ylabel("PSNR (dB)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_xt_slice(path, est, ref, column=None):
    """x-t images of one detector-aligned column, estimate next to ground truth."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    column = ref.J // 2 if column is None else column
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    lo, hi = float(ref.frames.min()), float(ref.frames.max())
    for ax, obj, title in zip(axes, (ref, est), ("ground truth", "estimate")):
        ax.imshow(obj.frames[:, column, :], cmap="gray", vmin=lo, vmax=hi, aspect="auto")
        ax.set_title(title)
        ax.set_xlabel("t")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _write_metrics(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def run_experiment(config: ExperimentConfig) -> Path:
    """Run one experiment (or a P_hat sweep) and write every artifact to its output directory.

    On failure a machine-readable ``error.json`` is written next to any partial
    outputs before the exception propagates.
    """
    out = resolve_output_dir(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "validate"
    try:
        validate_config(config)
        save_config(out / "config.json", config)
        restorer = load_restorer(config.restorer.checkpoint) if config.method == "rsr-nf" and config.solver.lam > 0 else None

        stage = "dataset"
        obj = build_object(config.dataset)
        stage = "calibrate"
        sched_spec = config.schedule
        sigma = sched_spec.sigma
        if sigma is None:
            sigma = calibrate_noise_sigma(obj.frame(0), sched_spec.target_db)
        sweep = [int(p) for p in sched_spec.P_hat_sweep] or [sched_spec.P_hat or obj.P]
        solver = dataclasses.replace(config.solver, seed=config.seed)

        rows = []
        for p_hat in sweep:
            tag = f"_Phat{p_hat}" if len(sweep) > 1 else ""
            stage = f"simulate{tag}"
            scheme = "reduced_view" if p_hat != obj.P else sched_spec.scheme
            schedule = make_schedule(scheme, obj.P, p_hat)
            sinos = simulate_measurements(obj, schedule, sigma, sched_spec.noise_seed)
            stage = f"reconstruct{tag}"
            est, history = reconstruct(config.method, sinos, solver, restorer, gt=obj)
            stage = f"report{tag}"
            rec = evaluate(est, obj)
            rows.append(
                {"method": config.method, "P": obj.P, "P_hat": p_hat, "sigma": float(sigma), **rec.summary()}
            )
            rows[-1].pop("psnr_capped", None)
            save_object(out / f"reconstruction{tag}.dct", est)
            write_history_csv(out / f"history{tag}.csv", history)
            plot_psnr_vs_t(out / f"psnr_vs_t{tag}.png", rec.per_frame["psnr_db"], f"{config.method} P_hat={p_hat}")
            plot_xt_slice(out / f"xt_slice{tag}.png", est, obj)
        _write_metrics(out / "metrics.csv", rows)
        return out
    except Exception as err:
        manifest = {
            "stage": stage,
            "error_type": type(err).__name__,
            "message": str(err),
            "diagnostics": getattr(err, "diagnostics", {}),
            "traceback": traceback.format_exc(),
        }
        (out / "error.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
        raise
