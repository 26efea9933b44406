"""Kept-set F1 against gold labels as the fusion weight moves from outliers to probabilities.

    python scripts/alpha_sweep.py --ratio 3
"""

import argparse

from tokcomp.cli import ALPHA_SWEEP
from tokcomp.compressor import PER_CLASS, WHOLE_SET, CompressionRequest
from tokcomp.evaluation import evaluate_compression
from tokcomp.experiment import toy_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ratio", type=float, default=3.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--beta", type=float, default=0.001)
    args = ap.parse_args()

    run = toy_run(beta=args.beta, seed=args.seed)
    print(f"trained: val acc {run.report.best_val_accuracy:.4f}")
    print(f"{'alpha':>6} {'per-class F1':>13} {'whole-set F1':>13}")
    for alpha in ALPHA_SWEEP:
        f1 = []
        for mode in (PER_CLASS, WHOLE_SET):
            req = CompressionRequest(tau=1 / args.ratio, alpha=alpha, outlier_mode=mode)
            f1.append(evaluate_compression(run.classifier, run.val_set, req).kept_f1)
        print(f"{alpha:>6.1f} {f1[0]:>13.4f} {f1[1]:>13.4f}")


if __name__ == "__main__":
    main()
