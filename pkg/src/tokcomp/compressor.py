"""Compression phase: rank tokens by a fused probability/outlier metric and keep the top ones.

For each document the classifier's preserve probabilities split tokens into
two predicted classes (``p >= 0.5`` and ``p < 0.5``).  Within each class the
last-layer vectors are standardised per dimension; a token's outlier score is
the Euclidean norm of its standardised vector, min-max normalised inside the
class.  The ranking metric is ``alpha * p + (1 - alpha) * s_norm``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import detokenize, tokenize
from .model import SequenceTooLongError, preserve_probs

STD_EPS = 1e-8
# relative spread below which a category's scores count as identical
DEGENERATE_RTOL = 1e-9
PER_CLASS, WHOLE_SET = "per_class", "whole_set"


@dataclass(frozen=True)
class CompressionRequest:
    tau: float = 1.0 / 3.0
    alpha: float = 0.5
    outlier_mode: str = PER_CLASS

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.outlier_mode not in (PER_CLASS, WHOLE_SET):
            raise ValueError(f"unknown outlier mode {self.outlier_mode!r}")

    @classmethod
    def from_ratio(cls, ratio: float, **kw) -> "CompressionRequest":
        if ratio < 1.0:
            raise ValueError(f"compression ratio must be >= 1, got {ratio}")
        return cls(tau=1.0 / ratio, **kw)


def target_count(n: int, tau: float) -> int:
    """``clamp(round_half_up(n * tau), 1, n)``."""
    return min(max(int(math.floor(n * tau + 0.5)), 1), n)


@dataclass(frozen=True)
class ClassPartition:
    preserve: np.ndarray
    discard: np.ndarray


def partition(probabilities) -> ClassPartition:
    p = np.asarray(probabilities, dtype=float)
    return ClassPartition(np.flatnonzero(p >= 0.5), np.flatnonzero(p < 0.5))


@dataclass(frozen=True)
class OutlierScores:
    index: np.ndarray  # token positions belonging to the category
    mean: np.ndarray
    std: np.ndarray
    z: np.ndarray
    s: np.ndarray
    s_norm: np.ndarray
    s_min: float
    s_max: float


def outlier_scores(last_layer: np.ndarray, index) -> OutlierScores:
    """Z-score outlier scores for the rows of ``last_layer`` listed in ``index``.

    Population statistics; ``STD_EPS`` is added to every per-dimension std.
    A category whose scores are all equal (including a singleton) gets
    ``s_norm = 0`` throughout.
    """
    index = np.asarray(index, dtype=np.intp)
    if index.size == 0:
        raise ValueError("outlier_scores needs a nonempty category")
    h = np.asarray(last_layer, dtype=np.float64)[index]
    mu = h.mean(axis=0)
    sigma = np.sqrt(((h - mu) ** 2).mean(axis=0))
    z = (h - mu) / (sigma + STD_EPS)
    s = np.sqrt((z * z).sum(axis=1))
    s_min, s_max = float(s.min()), float(s.max())
    if s_max - s_min <= DEGENERATE_RTOL * max(1.0, abs(s_max)):
        s_norm = np.zeros_like(s)
    else:
        s_norm = (s - s_min) / (s_max - s_min)
    return OutlierScores(index, mu, sigma, z, s, s_norm, s_min, s_max)


def whole_set_outlier_scores(last_layer: np.ndarray) -> OutlierScores:
    """Ablation variant: one category holding every token."""
    return outlier_scores(last_layer, np.arange(len(last_layer)))


def normalized_outlier_scores(last_layer: np.ndarray, probs, mode: str = PER_CLASS) -> np.ndarray:
    """Per-token ``s_norm`` in original token order."""
    n = len(probs)
    out = np.zeros(n)
    if mode == WHOLE_SET:
        groups = [np.arange(n)]
    else:
        part = partition(probs)
        groups = [g for g in (part.preserve, part.discard) if g.size]
    for g in groups:
        sc = outlier_scores(last_layer, g)
        out[sc.index] = sc.s_norm
    return out


def fuse(p, s_norm, alpha: float) -> np.ndarray:
    return alpha * np.asarray(p, dtype=float) + (1.0 - alpha) * np.asarray(s_norm, dtype=float)


def select(metrics, n: int, tau: float) -> np.ndarray:
    """Indices of the top ``target_count(n, tau)`` metrics, in ascending order.

    Ties go to the lower index.
    """
    m = np.asarray(metrics, dtype=float)
    if len(m) != n:
        raise ValueError(f"expected {n} metrics, got {len(m)}")
    k = target_count(n, tau)
    order = np.argsort(-m, kind="stable")
    return np.sort(order[:k])


@dataclass(frozen=True)
class TokenMetricRecord:
    index: int
    surface: str
    p_preserve: float
    s_norm: float
    metric: float
    kept: bool

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "surface": self.surface,
            "p": self.p_preserve,
            "s_norm": self.s_norm,
            "m": self.metric,
            "kept": self.kept,
        }


@dataclass(frozen=True)
class CompressionResult:
    text: str
    records: tuple[TokenMetricRecord, ...]
    ratio: float

    @property
    def kept_tokens(self) -> list[str]:
        return [r.surface for r in self.records if r.kept]


def score_tokens(classifier, tokens: Sequence[str], request: CompressionRequest):
    """Return ``(p, s_norm, m)`` arrays for a tokenised document."""
    last = classifier.activations(tokens)[-1]
    p = preserve_probs(classifier.params, last)
    s_norm = normalized_outlier_scores(last, p, request.outlier_mode)
    return p, s_norm, fuse(p, s_norm, request.alpha)


def compress_tokens(classifier, tokens: Sequence[str], request: CompressionRequest) -> CompressionResult:
    n = len(tokens)
    if n == 0:
        return CompressionResult("", (), 1.0)
    if n > classifier.config.max_len:
        raise SequenceTooLongError(f"document of {n} tokens exceeds max_len {classifier.config.max_len}")
    p, s_norm, m = score_tokens(classifier, tokens, request)
    kept = select(m, n, request.tau)
    mask = np.zeros(n, dtype=bool)
    mask[kept] = True
    records = tuple(
        TokenMetricRecord(i, tokens[i], float(p[i]), float(s_norm[i]), float(m[i]), bool(mask[i]))
        for i in range(n)
    )
    return CompressionResult(detokenize(tokens[i] for i in kept), records, n / len(kept))


def compress(classifier, text: str, request: CompressionRequest) -> CompressionResult:
    return compress_tokens(classifier, tokenize(text), request)


def compress_many(classifier, texts: Sequence[str], request: CompressionRequest, workers: int = 1):
    """Compress documents independently; results come back in input order."""
    if workers <= 1:
        return [compress(classifier, t, request) for t in texts]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda t: compress(classifier, t, request), texts))
