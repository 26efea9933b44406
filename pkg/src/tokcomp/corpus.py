"""Tokenisation, vocabularies and labelled compression datasets.

Dataset files are JSON lines, one record per line::

    {"tokens": ["Hello", ",", "world"], "labels": [1, 0, 1]}

Label 1 means *preserve*, 0 means *discard*.
"""

from __future__ import annotations

import hashlib
import json
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1
PRESERVE, DISCARD = 1, 0


class DatasetError(ValueError):
    """A dataset record failed validation."""


# ---------------------------------------------------------------------------
# tokenisation
# ---------------------------------------------------------------------------


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    """Whitespace split, then peel leading/trailing punctuation into single-char tokens.

    >>> tokenize("Hello, world.")
    ['Hello', ',', 'world', '.']
    """
    out: list[str] = []
    for word in text.split():
        start, end = 0, len(word)
        while start < end and _is_punct(word[start]):
            start += 1
        while end > start and _is_punct(word[end - 1]):
            end -= 1
        out.extend(word[:start])
        if start < end:
            out.append(word[start:end])
        out.extend(word[end:])
    return out


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    min_freq: int = 2
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:2] != (PAD, UNK):
            raise ValueError("vocabulary must start with the PAD and UNK entries")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], min_freq: int = 2) -> "Vocabulary":
        """Keep tokens seen at least ``min_freq`` times, ordered by
        descending frequency and then lexicographically."""
        counts = Counter(tok for seq in sequences for tok in seq)
        kept = sorted(
            (t for t, c in counts.items() if c >= min_freq and t not in (PAD, UNK)),
            key=lambda t: (-counts[t], t),
        )
        return cls((PAD, UNK, *kept), min_freq)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        get = self._index.get
        return np.fromiter((get(t, UNK_ID) for t in tokens), dtype=np.int64, count=len(tokens))

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


# ---------------------------------------------------------------------------
# labelled sequences
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabeledSequence:
    tokens: tuple[str, ...]
    labels: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) == 0:
            raise DatasetError("sequence must contain at least one token")
        if len(self.tokens) != len(self.labels):
            raise DatasetError(f"{len(self.tokens)} tokens but {len(self.labels)} labels")
        for y in self.labels:
            if type(y) is not int or y not in (0, 1):
                raise DatasetError(f"label {y!r} is not 0 or 1")

    @property
    def n(self) -> int:
        return len(self.tokens)

    @property
    def preserve_idx(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.labels) == PRESERVE)

    @property
    def discard_idx(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.labels) == DISCARD)

    def to_record(self) -> dict:
        return {"tokens": list(self.tokens), "labels": list(self.labels)}


def load_dataset(path) -> list[LabeledSequence]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tokens, labels = rec["tokens"], rec["labels"]
                if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
                    raise DatasetError("'tokens' must be an array of strings")
                if not isinstance(labels, list):
                    raise DatasetError("'labels' must be an array")
                out.append(LabeledSequence(tuple(tokens), tuple(labels)))
            except (json.JSONDecodeError, KeyError, TypeError, DatasetError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_dataset(dataset: Iterable[LabeledSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in dataset:
            fh.write(json.dumps(seq.to_record(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# train / validation split
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not math.isclose(self.train_fraction + self.validation_fraction, 1.0, abs_tol=1e-9):
            raise ValueError("train and validation fractions must sum to 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train fraction must lie strictly between 0 and 1")


def split(dataset: Sequence[LabeledSequence], spec: SplitSpec = SplitSpec()):
    """Seeded shuffle, then the first ``floor(n * train_fraction)`` records train."""
    n = len(dataset)
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    n_train = int(math.floor(n * spec.train_fraction + 1e-9))
    if n_train == 0 or n_train == n:
        raise DatasetError(f"split of {n} records at {spec.train_fraction} leaves an empty side")
    order = np.random.default_rng(spec.seed).permutation(n)
    train = [dataset[i] for i in order[:n_train]]
    val = [dataset[i] for i in order[n_train:]]
    return train, val


# ---------------------------------------------------------------------------
# synthetic corpora
# ---------------------------------------------------------------------------

_SYLLABLES = (
    "ba be bi bo bu da de di do du fa fe fi fo ka ke ki ko ku la le li lo lu "
    "ma me mi mo mu na ne ni no nu pa pe pi po ra re ri ro ru sa se si so su "
    "ta te ti to tu va ve vi vo za ze zi zo"
).split()


@dataclass(frozen=True)
class WordClass:
    """A pool of generated words sharing one labelling rule.

    ``preserve`` is True/False for a fixed label, or None for a contextual
    class: preserved iff the sequence contains a word from a ``trigger`` class.
    """

    name: str
    size: int
    preserve: bool | None
    weight: float
    trigger: bool = False


@dataclass(frozen=True)
class RuleSpec:
    """Deterministic labelling rule over a generated vocabulary.

    Labels are a function of the word and, for contextual classes, of whether
    a trigger word occurs in the same sequence; the rule itself is therefore a
    Bayes-optimal classifier.  Trigger words appear (once) in a sequence with
    probability ``trigger_rate`` and are always preserved.  A fraction
    ``label_noise`` of labels is flipped at random, which caps the
    classifier's attainable margin the way real annotation noise does.
    """

    classes: tuple[WordClass, ...] = (
        WordClass("content", 120, True, 0.35),
        WordClass("filler", 40, False, 0.35),
        WordClass("punct", 4, False, 0.10),
        WordClass("ambiguous", 30, None, 0.20),
        WordClass("trigger", 4, True, 0.0, trigger=True),
    )
    min_len: int = 8
    max_len: int = 32
    trigger_rate: float = 0.5
    label_noise: float = 0.005
    vocab_seed: int = 1234

    def words(self) -> dict[str, list[str]]:
        rng = np.random.default_rng(self.vocab_seed)
        seen: set[str] = set()
        out: dict[str, list[str]] = {}
        for cls in self.classes:
            words = []
            if cls.name == "punct":
                words = list(",.;:!?")[: cls.size]
            while len(words) < cls.size:
                k = int(rng.integers(2, 4))
                w = "".join(rng.choice(_SYLLABLES, size=k))
                if w not in seen:
                    seen.add(w)
                    words.append(w)
            out[cls.name] = words
        return out

    def label(self, cls: WordClass, has_trigger: bool) -> int:
        keep = has_trigger if cls.preserve is None else cls.preserve
        return PRESERVE if keep else DISCARD


def make_synthetic_corpus(rule: RuleSpec, size: int, seed: int) -> list[LabeledSequence]:
    words = rule.words()
    weights = np.array([c.weight for c in rule.classes], dtype=float)
    weights /= weights.sum()
    triggers = [c for c in rule.classes if c.trigger]
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(size):
        n = int(rng.integers(rule.min_len, rule.max_len + 1))
        picked = [rule.classes[c] for c in rng.choice(len(rule.classes), size=n, p=weights)]
        has_trigger = bool(triggers) and rng.random() < rule.trigger_rate
        if has_trigger:
            picked[int(rng.integers(n))] = triggers[int(rng.integers(len(triggers)))]
        tokens, labels = [], []
        for cls in picked:
            pool = words[cls.name]
            tokens.append(pool[int(rng.integers(len(pool)))])
            y = rule.label(cls, has_trigger)
            if rule.label_noise and rng.random() < rule.label_noise:
                y = 1 - y
            labels.append(y)
        out.append(LabeledSequence(tuple(tokens), tuple(labels)))
    return out
