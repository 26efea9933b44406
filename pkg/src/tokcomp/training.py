"""Losses and the training loop.

The objective per sequence is ``CE + beta * CS`` where CE is the mean token
cross-entropy of the classifier and CS is the mean cosine similarity between
last-layer representations of preserve-labelled and discard-labelled tokens.
Batch loss is the mean over sequences.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, NamedTuple, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .corpus import LabeledSequence, Vocabulary
from .diagnostics import layer_similarity
from .model import ModelConfig, forward, init_params, logits, preserve_probs

log = logging.getLogger(__name__)

REPORTED_LR = 1e-5


class TrainingDivergedError(RuntimeError):
    pass


class Example(NamedTuple):
    ids: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_sequence(cls, seq: LabeledSequence, vocab: Vocabulary) -> "Example":
        return cls(vocab.encode(seq.tokens), np.asarray(seq.labels, dtype=np.intp))

    @property
    def preserve_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def discard_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)


@dataclass(frozen=True)
class TrainConfig:
    beta: float = 0.001
    epochs: int = 10
    batch_size: int = 10
    lr: float = 1e-3
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    clip_norm: float = 1.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be > 0")


@dataclass
class EpochRecord:
    epoch: int
    ce_loss: float
    cs_loss: float
    val_accuracy: float
    mean_S_L: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int = 0

    @property
    def final_mean_S_L(self) -> float:
        return self.epochs[self.selected_epoch - 1].mean_S_L

    @property
    def best_val_accuracy(self) -> float:
        return self.epochs[self.selected_epoch - 1].val_accuracy

    def to_jsonl(self) -> str:
        lines = [json.dumps(asdict(r)) for r in self.epochs]
        lines.append(
            json.dumps({"selected_epoch": self.selected_epoch, "final_mean_S_L": self.final_mean_S_L})
        )
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def cross_entropy_loss(params: Mapping, activations: Sequence[Tensor], labels) -> Tensor:
    return ag.softmax_cross_entropy(logits(params, activations[-1]), labels)


def cs_loss(activations: Sequence[Tensor], preserve_idx, discard_idx) -> Tensor:
    """Mean cross-class cosine similarity on the last layer; 0 if a class is absent."""
    preserve_idx, discard_idx = np.asarray(preserve_idx), np.asarray(discard_idx)
    if preserve_idx.size == 0 or discard_idx.size == 0:
        return Tensor(0.0)
    h = ag.as_tensor(activations[-1])
    sims = ag.pairwise_cosine(ag.take_rows(h, preserve_idx), ag.take_rows(h, discard_idx))
    return ag.mean_all(sims)


def combined_loss(
    params: Mapping,
    config: ModelConfig,
    batch: Sequence[Example],
    beta: float,
    rng: np.random.Generator | None = None,
    parts: dict | None = None,
) -> Tensor:
    """Mean over ``batch`` of ``CE + beta * CS``.

    CS uses the gold labels.  When ``parts`` is given it receives the batch
    means of the two components as floats.
    """
    total = None
    ce_sum = cs_sum = 0.0
    for ex in batch:
        acts = forward(params, config, ex.ids, rng=rng)
        loss = cross_entropy_loss(params, acts, ex.labels)
        ce_sum += float(loss.data)
        if beta != 0.0 or parts is not None:
            cs = cs_loss(acts, ex.preserve_idx, ex.discard_idx)
            cs_sum += float(cs.data)
            if beta != 0.0:
                loss = loss + cs * beta
        total = loss if total is None else total + loss
    if parts is not None:
        parts["ce"] = ce_sum / len(batch)
        parts["cs"] = cs_sum / len(batch)
    return total * (1.0 / len(batch))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: Mapping[str, np.ndarray], lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, g in grads.items():
            m = self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            v = self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate(params, config: ModelConfig, examples: Sequence[Example]) -> tuple[float, float]:
    """Token argmax accuracy and mean last-layer inter-class similarity.

    The similarity mean covers only sequences that contain both classes
    (NaN if none do).
    """
    correct = total = 0
    sims = []
    for ex in examples:
        h = forward(params, config, ex.ids)[-1].data
        pred = (preserve_probs(params, h) >= 0.5).astype(np.intp)
        correct += int((pred == ex.labels).sum())
        total += len(ex.labels)
        s = layer_similarity([h], ex.preserve_idx, ex.discard_idx, 0)
        if s is not None:
            sims.append(s)
    return correct / total, (float(np.mean(sims)) if sims else float("nan"))


def train(
    model_config: ModelConfig,
    vocab: Vocabulary,
    train_set: Sequence[LabeledSequence],
    val_set: Sequence[LabeledSequence],
    cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[dict[str, np.ndarray], TrainReport]:
    """Train from a fresh init and return the best-validation-accuracy params."""
    if not train_set or not val_set:
        raise ValueError("train and validation sets must both be nonempty")
    longest = max(s.n for s in (*train_set, *val_set))
    if longest > model_config.max_len:
        raise ValueError(f"longest sequence ({longest}) exceeds max_len {model_config.max_len}")

    train_ex = [Example.from_sequence(s, vocab) for s in train_set]
    val_ex = [Example.from_sequence(s, vocab) for s in val_set]
    params = init_params(model_config)
    opt = Adam(params, cfg.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
    shuffle_rng = np.random.default_rng(cfg.seed)
    dropout_rng = np.random.default_rng([cfg.seed, 1])
    names = list(params)

    report = TrainReport()
    best_acc, best_params = -1.0, None
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_ex))
        ce_acc = cs_acc = 0.0
        n_batches = 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = [train_ex[i] for i in order[start : start + cfg.batch_size]]
            parts: dict = {}
            with Tape() as tape:
                leaves = {k: Tensor(params[k], requires_grad=True) for k in names}
                loss = combined_loss(leaves, model_config, batch, cfg.beta, dropout_rng, parts)
                grad_list = tape.gradients(loss, [leaves[k] for k in names])
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at epoch {epoch}, batch {b}")
            grads = dict(zip(names, grad_list))
            clip_global_norm(grads, cfg.clip_norm)
            opt.step(params, grads)
            ce_acc += parts["ce"]
            cs_acc += parts["cs"]
            n_batches += 1

        acc, mean_sl = evaluate(params, model_config, val_ex)
        rec = EpochRecord(epoch, ce_acc / n_batches, cs_acc / n_batches, acc, mean_sl)
        report.epochs.append(rec)
        log.info("epoch %d ce=%.4f cs=%.4f val_acc=%.4f S_L=%.4f", *asdict(rec).values())
        if on_epoch is not None:
            on_epoch(rec)
        if acc > best_acc:
            best_acc, best_params = acc, {k: v.copy() for k, v in params.items()}
            report.selected_epoch = epoch
    return best_params, report
