"""Embedding capacity: rank-K SVD truncation against parameter-matched neural fields.

    python scripts/embedding_study.py --iters 10000
"""

import argparse
from pathlib import Path

from dynct.datasets import procedural_phantom
from dynct.embedding import (
    fit_nf_embedding,
    matched_nf_config,
    plot_curves,
    psm_embedding,
    write_results_csv,
)
from dynct.errors import ValidationError


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--J", type=int, default=64)
    ap.add_argument("--P", type=int, default=64)
    ap.add_argument("--K", type=int, nargs="+", default=[1, 2, 3, 4, 6])
    ap.add_argument("--iters", type=int, default=10_000)
    ap.add_argument("--lr", type=float, default=5e-3)
    ap.add_argument("--out-dir", default="runs/embedding")
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    obj = procedural_phantom(args.J, args.P, "warped_walnut", seed=0, C_max=args.J / 4)
    results = [psm_embedding(obj, K) for K in args.K]
    for K in args.K:
        try:
            arch = matched_nf_config(args.J, args.P, K)
        except ValidationError as err:
            print(f"rank {K}: skipped ({err})")
            continue
        _, res = fit_nf_embedding(obj, arch, iters=args.iters, lr=args.lr)
        res.label = f"nf_matched_rank{K}_{arch.hidden_layers}x{arch.width}"
        results.append(res)
        print(f"{res.label:>28s} params={res.params:6d} psnr={res.psnr_db:.2f} ({res.seconds:.0f}s)", flush=True)
    for r in results[: len(args.K)]:
        print(f"{r.label:>28s} params={r.params:6d} psnr={r.psnr_db:.2f}")
    write_results_csv(out / "embedding.csv", results)
    plot_curves(out / "embedding_psnr.png", results)


if __name__ == "__main__":
    main()
