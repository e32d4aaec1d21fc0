"""Command line front end.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
Relative output paths are resolved against $DYNCT_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from .errors import NumericalError, ValidationError
from .experiment import (
    ExperimentConfig,
    load_config,
    reconstruct,
    resolve_output_dir,
    run_experiment,
)
from .reconstruction import SolverConfig, write_history_csv

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _out(path):
    p = resolve_output_dir(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def cmd_phantom(args):
    from .datasets import RECIPES, procedural_phantom, save_object

    if args.recipe not in RECIPES:
        raise ValidationError(f"unknown recipe {args.recipe!r}; choose from {RECIPES}")
    obj = procedural_phantom(args.J, args.P, args.recipe, args.seed, args.C_max, args.N, args.smoothing)
    save_object(_out(args.out), obj)
    print(f"wrote {args.recipe} J={args.J} P={args.P} to {args.out}")


def cmd_simulate(args):
    from .acquisition import calibrate_noise_sigma, make_schedule, simulate_measurements
    from .datasets import load_object, save_object

    obj = load_object(args.object)
    sigma = args.sigma if args.sigma is not None else calibrate_noise_sigma(obj.frame(0), args.target_db)
    schedule = make_schedule(args.scheme, obj.P, args.P_hat)
    sinos = simulate_measurements(obj, schedule, sigma, args.seed)
    save_object(_out(args.out), sinos)
    print(f"sigma={sigma:.6g}; wrote {obj.P} projections to {args.out}")


def cmd_train_restorer(args):
    from .datasets import load_object, static_training_slices
    from .restoration import TrainConfig, save_restorer, train_restorer

    if args.frames:
        stack = load_object(args.frames).stack()
        frames = list(stack)
    else:
        frames = static_training_slices(args.J, args.n_objects, args.seed + 1000)
    cfg = TrainConfig(
        epochs=args.epochs, batch=args.batch, lr=args.lr, sigma_max=args.sigma_max, k_max=args.k_max,
        seed=args.seed, residual=args.residual,
    )
    result = train_restorer(frames, cfg)
    save_restorer(_out(args.out), result.model, {"train": vars(cfg), "final_loss": result.epoch_loss[-1]})
    print(f"final epoch loss {result.epoch_loss[-1]:.4e} after {result.seconds:.1f}s; wrote {args.out}")


def _solver_from_args(args):
    from .neural_field import NFConfig

    return SolverConfig(
        lam=args.lam, xi=args.xi, beta=args.beta, outer_iters=args.outer_iters, inner_steps=args.inner_steps,
        lr=args.lr, batch_size=args.batch_size, seed=args.seed,
        nf=NFConfig(args.L, args.layers, args.width), fbar_mode=args.fbar_mode,
    )


def cmd_reconstruct(args):
    from .datasets import load_object, save_object
    from .metrics import evaluate
    from .restoration import load_restorer

    solver = _solver_from_args(args)
    restorer = None
    if args.mode == "rsr-nf" and solver.lam > 0:
        if not args.restorer or not Path(args.restorer).is_file():
            raise ValidationError(f"rsr-nf with lam > 0 needs --restorer (got {args.restorer!r})")
        restorer = load_restorer(args.restorer)
    sinos = load_object(args.sinos)
    gt = load_object(args.gt) if args.gt else None
    est, history = reconstruct(args.mode, sinos, solver, restorer, gt)
    save_object(_out(args.out), est)
    if args.history:
        write_history_csv(_out(args.history), history)
    if gt is not None:
        print(json.dumps(evaluate(est, gt).summary()))


def cmd_embed(args):
    from .datasets import load_object
    from .embedding import fit_nf_embedding, plot_curves, psm_embedding, write_results_csv
    from .neural_field import NFConfig

    obj = load_object(args.object)
    results = [psm_embedding(obj, K) for K in args.K]
    for layers in args.layers:
        for width in args.width:
            _, res = fit_nf_embedding(obj, NFConfig(args.L, layers, width), args.iters, args.lr, args.seed)
            results.append(res)
    out = resolve_output_dir(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_results_csv(out / "embedding.csv", results)
    plot_curves(out / "embedding_psnr.png", results)
    for r in results:
        print(f"{r.label:>20s} params={r.params:7d} psnr={r.psnr_db:.2f}")


def cmd_evaluate(args):
    from .datasets import load_object
    from .metrics import evaluate

    rec = evaluate(load_object(args.est), load_object(args.ref), args.frames, args.peak)
    print(json.dumps(rec.summary()))


def cmd_sweep(args):
    config = load_config(args.config)
    if args.output_dir:
        config.output_dir = args.output_dir
    if args.P_hat:
        config.schedule.P_hat_sweep = list(args.P_hat)
    out = run_experiment(config)
    print(f"results in {out}")


def cmd_template(args):
    print(json.dumps(ExperimentConfig().to_dict(), indent=2))


def build_parser():
    p = argparse.ArgumentParser(prog="dynct", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a procedural dynamic phantom")
    s.add_argument("--recipe", default="warped_walnut")
    s.add_argument("--J", type=int, default=64)
    s.add_argument("--P", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--C-max", dest="C_max", type=float)
    s.add_argument("--N", type=int, default=10)
    s.add_argument("--smoothing", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("simulate", help="time-sequential projections of an object")
    s.add_argument("--object", required=True)
    s.add_argument("--scheme", default="bit_reversed", choices=("bit_reversed", "reduced_view", "uniform"))
    s.add_argument("--P-hat", dest="P_hat", type=int)
    s.add_argument("--sigma", type=float, help="noise std; calibrated when omitted")
    s.add_argument("--target-db", type=float, default=46.0)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train-restorer", help="pretrain the static restoration network")
    s.add_argument("--frames", help="container with static training frames")
    s.add_argument("--J", type=int, default=64)
    s.add_argument("--n-objects", type=int, default=4)
    s.add_argument("--epochs", type=int, default=150)
    s.add_argument("--batch", type=int, default=16)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--sigma-max", type=float, default=5e-2)
    s.add_argument("--k-max", type=float, default=2.0)
    s.add_argument("--residual", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_restorer)

    d = SolverConfig()
    s = sub.add_parser("reconstruct", help="reconstruct a dynamic object from projections")
    s.add_argument("--sinos", required=True)
    s.add_argument("--mode", default="rsr-nf", choices=("rsr-nf", "temp-nf", "fbp"))
    s.add_argument("--restorer")
    s.add_argument("--gt")
    s.add_argument("--lam", type=float, default=d.lam)
    s.add_argument("--xi", type=float, default=d.xi)
    s.add_argument("--beta", type=float, default=d.beta)
    s.add_argument("--outer-iters", type=int, default=d.outer_iters)
    s.add_argument("--inner-steps", type=int, default=d.inner_steps)
    s.add_argument("--lr", type=float, default=d.lr)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--L", type=int, default=d.nf.L)
    s.add_argument("--layers", type=int, default=d.nf.hidden_layers)
    s.add_argument("--width", type=int, default=d.nf.width)
    s.add_argument("--fbar-mode", default=d.fbar_mode, choices=("fixed_point", "exact"))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("embed", help="NF vs rank-K embedding study on a known object")
    s.add_argument("--object", required=True)
    s.add_argument("--K", type=int, nargs="+", default=[1, 2, 3, 5])
    s.add_argument("--layers", type=int, nargs="+", default=[3])
    s.add_argument("--width", type=int, nargs="+", default=[64])
    s.add_argument("--L", type=int, default=10)
    s.add_argument("--iters", type=int, default=10000)
    s.add_argument("--lr", type=float, default=5e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("evaluate", help="metrics of an estimate against ground truth")
    s.add_argument("--est", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--frames", type=int, nargs="+")
    s.add_argument("--peak", type=float)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sweep", help="run an experiment config (optionally over several P_hat)")
    s.add_argument("--config", required=True)
    s.add_argument("--output-dir")
    s.add_argument("--P-hat", dest="P_hat", type=int, nargs="+")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("config-template", help="print a default experiment config")
    s.set_defaults(func=cmd_template)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ValidationError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as err:
        print(f"numerical failure: {err} {err.diagnostics}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
