"""Token-level metrics, compression ratio and latency reporting."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .compressor import CompressionRequest, compress_tokens, select
from .corpus import LabeledSequence
from .model import preserve_probs


def token_metrics(pred, gold) -> dict[str, float]:
    """Accuracy plus precision/recall/F1 of the preserve class (1).

    Precision (recall) is 0 when nothing is predicted (labelled) preserve.
    """
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    tp = int((pred & gold).sum())
    fp = int((pred & ~gold).sum())
    fn = int((~pred & gold).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {
        "accuracy": float((pred == gold).mean()) if pred.size else 0.0,
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


@dataclass
class EvalReport:
    alpha: float
    tau: float
    outlier_mode: str
    documents: int
    token_accuracy: float
    precision: float
    recall: float
    f1: float
    kept_precision: float
    kept_recall: float
    kept_f1: float
    mean_ratio: float
    latency_mean_s: float
    latency_p50_s: float
    latency_p95_s: float
    latency_per_doc_s: list[float]

    def to_dict(self, with_per_doc: bool = False) -> dict:
        d = asdict(self)
        if not with_per_doc:
            d.pop("latency_per_doc_s")
        return d


def _run_one(classifier, seq: LabeledSequence, request: CompressionRequest):
    start = time.perf_counter()
    result = compress_tokens(classifier, list(seq.tokens), request)
    elapsed = time.perf_counter() - start
    p = np.array([r.p_preserve for r in result.records])
    kept = np.array([r.kept for r in result.records])
    return p, kept, result.ratio, elapsed


def evaluate_compression(
    classifier,
    dataset: Sequence[LabeledSequence],
    request: CompressionRequest,
    workers: int = 1,
) -> EvalReport:
    """Classifier metrics (``p >= 0.5``) and kept-set metrics against gold labels."""
    if not dataset:
        raise ValueError("evaluation needs at least one document")
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            runs = list(pool.map(lambda s: _run_one(classifier, s, request), dataset))
    else:
        runs = [_run_one(classifier, s, request) for s in dataset]
    gold = np.concatenate([np.asarray(s.labels) for s in dataset])
    pred = np.concatenate([p >= 0.5 for p, *_ in runs])
    kept = np.concatenate([k for _, k, *_ in runs])
    cls_m = token_metrics(pred, gold)
    kept_m = token_metrics(kept, gold)
    lat = np.array([r[3] for r in runs])
    return EvalReport(
        alpha=request.alpha,
        tau=request.tau,
        outlier_mode=request.outlier_mode,
        documents=len(dataset),
        token_accuracy=cls_m["accuracy"],
        precision=cls_m["precision"],
        recall=cls_m["recall"],
        f1=cls_m["f1"],
        kept_precision=kept_m["precision"],
        kept_recall=kept_m["recall"],
        kept_f1=kept_m["f1"],
        mean_ratio=float(np.mean([r[2] for r in runs])),
        latency_mean_s=float(lat.mean()),
        latency_p50_s=float(np.percentile(lat, 50)),
        latency_p95_s=float(np.percentile(lat, 95)),
        latency_per_doc_s=lat.tolist(),
    )


def latency_exponent(
    classifier,
    lengths: Sequence[int] = (64, 128, 256),
    repeats: int = 5,
    request: CompressionRequest = CompressionRequest(),
    seed: int = 0,
) -> tuple[float, dict[int, float]]:
    """Fit ``time ~ n^k`` on the best-of-``repeats`` wall time per length.

    Documents are random draws from the classifier's vocabulary.
    """
    rng = np.random.default_rng(seed)
    words = classifier.vocab.tokens[2:] or ("x",)
    times = {}
    for n in lengths:
        tokens = [words[i] for i in rng.integers(len(words), size=n)]
        compress_tokens(classifier, tokens, request)  # warm-up
        best = float("inf")
        for _ in range(repeats):
            start = time.perf_counter()
            compress_tokens(classifier, tokens, request)
            best = min(best, time.perf_counter() - start)
        times[n] = best
    slope = np.polyfit(np.log(list(times)), np.log(list(times.values())), 1)[0]
    return float(slope), times


def probability_only_kept(classifier, tokens: Sequence[str], tau: float) -> np.ndarray:
    """Baseline: keep the tokens with the highest preserve probability."""
    p = preserve_probs(classifier.params, classifier.activations(tokens)[-1])
    return select(p, len(tokens), tau)
