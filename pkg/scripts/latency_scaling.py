"""Wall-time scaling of compression with document length.

    python scripts/latency_scaling.py --lengths 32 64 128 256

Times the full pipeline and, separately, the scoring and selection stages
on cached activations, then fits a power law to each.
"""

import argparse
import time

import numpy as np

from tokcomp.compressor import CompressionRequest, fuse, normalized_outlier_scores, select
from tokcomp.corpus import RuleSpec, Vocabulary, make_synthetic_corpus
from tokcomp.evaluation import latency_exponent
from tokcomp.model import ModelConfig, TokenClassifier, init_params, preserve_probs


def best_of(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", type=int, nargs="+", default=[64, 128, 256])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--checkpoint", help="trained model; an untrained toy model otherwise")
    args = ap.parse_args()

    if args.checkpoint:
        clf = TokenClassifier.from_checkpoint(args.checkpoint)
    else:
        data = make_synthetic_corpus(RuleSpec(), 200, seed=0)
        vocab = Vocabulary.build([s.tokens for s in data])
        cfg = ModelConfig(vocab_size=len(vocab), max_len=max(args.lengths))
        clf = TokenClassifier(init_params(cfg), cfg, vocab)

    req = CompressionRequest()
    slope, times = latency_exponent(clf, args.lengths, args.repeats, req)

    rng = np.random.default_rng(1)
    stage = {}
    for n in args.lengths:
        toks = [clf.vocab.tokens[2:][i] for i in rng.integers(len(clf.vocab) - 2, size=n)]
        last = clf.activations(toks)[-1]

        def score_and_select(last=last, n=n):
            p = preserve_probs(clf.params, last)
            m = fuse(p, normalized_outlier_scores(last, p), req.alpha)
            select(m, n, req.tau)

        stage[n] = best_of(score_and_select, args.repeats)
    logn = np.log(args.lengths)
    stage_slope = np.polyfit(logn, np.log([stage[n] for n in args.lengths]), 1)[0]

    print(f"{'n':>6} {'pipeline ms':>12} {'scoring ms':>11}")
    for n in args.lengths:
        print(f"{n:>6} {times[n] * 1e3:>12.2f} {stage[n] * 1e3:>11.3f}")
    print(f"fitted exponent: pipeline {slope:.2f}, scoring+selection {stage_slope:.2f}")


if __name__ == "__main__":
    main()
