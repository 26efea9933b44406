"""Per-layer inter-class cosine similarity, the over-smoothing diagnostic."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag


class NoEligibleSequenceError(ValueError):
    """No sequence in the corpus contains both classes."""


def layer_similarity(activations: Sequence, preserve_idx, discard_idx, layer: int) -> float | None:
    """Mean cosine similarity over all (preserve, discard) token pairs at ``layer``.

    Returns ``None`` when either index set is empty, so callers can skip the
    sequence.
    """
    preserve_idx = np.asarray(preserve_idx, dtype=np.intp)
    discard_idx = np.asarray(discard_idx, dtype=np.intp)
    if preserve_idx.size == 0 or discard_idx.size == 0:
        return None
    h = ag.as_tensor(activations[layer]).data
    return float(ag.pairwise_cosine(h[preserve_idx], h[discard_idx]).data.mean())


@dataclass(frozen=True)
class LayerStat:
    layer: int
    mean: float
    std: float
    count: int


@dataclass(frozen=True)
class OversmoothingReport:
    layers: tuple[LayerStat, ...]
    included: int
    excluded: int

    @property
    def means(self) -> np.ndarray:
        return np.array([s.mean for s in self.layers])

    @property
    def stds(self) -> np.ndarray:
        return np.array([s.std for s in self.layers])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "mean", "std", "count"])
        for s in self.layers:
            w.writerow([s.layer, repr(s.mean), repr(s.std), s.count])
        return buf.getvalue()


def sequence_similarities(classifier, seq) -> list[float] | None:
    """``[S^0, ..., S^L]`` for one labelled sequence, or ``None`` if it lacks a class."""
    if seq.preserve_idx.size == 0 or seq.discard_idx.size == 0:
        return None
    acts = classifier.activations(seq.tokens)
    return [layer_similarity(acts, seq.preserve_idx, seq.discard_idx, l) for l in range(len(acts))]


def corpus_report(classifier, dataset: Sequence, workers: int = 1) -> OversmoothingReport:
    """Mean and population std of each layer's similarity across eligible sequences."""
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(lambda s: sequence_similarities(classifier, s), dataset))
    else:
        rows = [sequence_similarities(classifier, s) for s in dataset]
    kept = [r for r in rows if r is not None]
    if not kept:
        raise NoEligibleSequenceError("no sequence contains both preserve and discard tokens")
    # sorted columns make the reduction independent of record order
    table = np.sort(np.array(kept), axis=0)
    stats = tuple(
        LayerStat(l, float(table[:, l].mean()), float(table[:, l].std()), len(kept))
        for l in range(table.shape[1])
    )
    return OversmoothingReport(stats, included=len(kept), excluded=len(rows) - len(kept))
