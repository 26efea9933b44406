"""Desk-scale training runs shared by the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass

from .corpus import LabeledSequence, RuleSpec, SplitSpec, Vocabulary, make_synthetic_corpus, split
from .model import ModelConfig, TokenClassifier
from .training import TrainConfig, TrainReport, train

TOY_CORPUS_SIZE = 600


@dataclass
class ToyRun:
    classifier: TokenClassifier
    report: TrainReport
    train_set: list[LabeledSequence]
    val_set: list[LabeledSequence]


def toy_run(
    beta: float = 0.001,
    seed: int = 0,
    size: int = TOY_CORPUS_SIZE,
    rule: RuleSpec = RuleSpec(),
    model_overrides: dict | None = None,
    train_overrides: dict | None = None,
) -> ToyRun:
    """Generate the synthetic corpus with ``seed``, split it, train with toy defaults.

    The same seed drives the corpus, the split, initialisation and the
    training order, so runs that differ only in ``beta`` see identical data.
    """
    data = make_synthetic_corpus(rule, size, seed=seed)
    tr, va = split(data, SplitSpec(seed=seed))
    vocab = Vocabulary.build([s.tokens for s in tr])
    mc = ModelConfig(vocab_size=len(vocab), seed=seed, **(model_overrides or {}))
    tc = TrainConfig(beta=beta, seed=seed, **(train_overrides or {}))
    params, report = train(mc, vocab, tr, va, tc)
    return ToyRun(TokenClassifier(params, mc, vocab), report, tr, va)
