"""Bidirectional transformer encoder with a linear token-classification head.

Parameters live in a flat ``dict[str, np.ndarray]``.  Encoder weights are
prefixed ``enc.`` and the classifier weights ``cls.``; the classifier has two
output columns, column 1 being *preserve*.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import Vocabulary

PRESERVE_COLUMN = 1
CHECKPOINT_VERSION = 1


class SequenceTooLongError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class VocabularyMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    max_len: int = 256
    vocab_size: int = 2
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.max_len < 1 or self.vocab_size < 2:
            raise ValueError("max_len must be >= 1 and vocab_size >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = config.dim, config.ffn_dim
    shapes = {
        "enc.tok_emb": (config.vocab_size, d),
        "enc.pos_emb": (config.max_len, d),
        "enc.emb_ln.g": (d,),
        "enc.emb_ln.b": (d,),
    }
    for l in range(config.layers):
        p = f"enc.{l}."
        shapes.update(
            {
                p + "wq": (d, d), p + "bq": (d,),
                p + "wk": (d, d), p + "bk": (d,),
                p + "wv": (d, d), p + "bv": (d,),
                p + "wo": (d, d), p + "bo": (d,),
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "w1": (d, f), p + "b1": (f,),
                p + "w2": (f, d), p + "b2": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
            }
        )
    shapes["cls.w"] = (d, 2)
    shapes["cls.b"] = (2,)
    return shapes


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gains.

    Embedding tables use the model width as fan-in.
    """
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            fan_in = config.dim if "emb" in name else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def _tensors(params: Mapping) -> dict[str, Tensor]:
    return {k: ag.as_tensor(v) for k, v in params.items()}


def _attention(x: Tensor, P: dict, prefix: str, heads: int) -> tuple[Tensor, np.ndarray]:
    n, d = x.shape
    dh = d // heads

    def split_heads(t: Tensor) -> Tensor:
        return ag.transpose(ag.reshape(t, (n, heads, dh)), (1, 0, 2))

    q = split_heads(x @ P[prefix + "wq"] + P[prefix + "bq"])
    k = split_heads(x @ P[prefix + "wk"] + P[prefix + "bk"])
    v = split_heads(x @ P[prefix + "wv"] + P[prefix + "bv"])
    scores = ag.matmul(q, ag.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(dh))
    weights = ag.softmax(scores, axis=-1)
    ctx = ag.reshape(ag.transpose(ag.matmul(weights, v), (1, 0, 2)), (n, d))
    return ctx @ P[prefix + "wo"] + P[prefix + "bo"], weights.data


def forward(
    params: Mapping,
    config: ModelConfig,
    ids: Sequence[int],
    positions: Sequence[int] | None = None,
    rng: np.random.Generator | None = None,
    return_attention: bool = False,
):
    """Run the encoder and return ``[H^0, ..., H^L]``, each ``(n, dim)``.

    ``H^0`` is the (normalised) embedding output.  Dropout applies only when a
    generator is passed.  ``positions`` defaults to ``0..n-1``.
    """
    ids = np.asarray(ids, dtype=np.intp)
    n = len(ids)
    if n < 1:
        raise ValueError("forward needs at least one token")
    if n > config.max_len:
        raise SequenceTooLongError(f"sequence of {n} tokens exceeds max_len {config.max_len}")
    if positions is None:
        positions = np.arange(n)
    P = _tensors(params)
    rate = config.dropout if rng is not None else 0.0

    x = ag.embedding_lookup(P["enc.tok_emb"], ids) + ag.embedding_lookup(P["enc.pos_emb"], positions)
    x = ag.layer_norm(x, P["enc.emb_ln.g"], P["enc.emb_ln.b"])
    layers = [x]
    attn = []
    x = ag.dropout(x, rate, rng)
    for l in range(config.layers):
        p = f"enc.{l}."
        a, w = _attention(x, P, p, config.heads)
        attn.append(w)
        x = ag.layer_norm(x + ag.dropout(a, rate, rng), P[p + "ln1.g"], P[p + "ln1.b"])
        h = ag.gelu(x @ P[p + "w1"] + P[p + "b1"]) @ P[p + "w2"] + P[p + "b2"]
        x = ag.layer_norm(x + ag.dropout(h, rate, rng), P[p + "ln2.g"], P[p + "ln2.b"])
        layers.append(x)
    if return_attention:
        return layers, attn
    return layers


def logits(params: Mapping, h: Tensor) -> Tensor:
    return ag.as_tensor(h) @ ag.as_tensor(params["cls.w"]) + ag.as_tensor(params["cls.b"])


def preserve_probs(params: Mapping, last_layer) -> np.ndarray:
    """Softmax preserve probability for every row of the last-layer matrix."""
    rows = np.atleast_2d(ag.as_tensor(last_layer).data)
    z = rows @ ag.as_tensor(params["cls.w"]).data + ag.as_tensor(params["cls.b"]).data
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, PRESERVE_COLUMN] / e.sum(axis=1)


def classify(params: Mapping, h) -> float:
    """Preserve probability for a single last-layer vector."""
    return float(preserve_probs(params, np.asarray(ag.as_tensor(h).data).reshape(1, -1))[0])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    params: Mapping[str, np.ndarray],
    config: ModelConfig,
    path,
    vocab: Vocabulary | None = None,
    train_seed: int | None = None,
) -> None:
    """Write an ``.npz`` container: a JSON header plus one float64 array per parameter."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "vocab_hash": vocab.digest() if vocab is not None else None,
        "vocab": list(vocab.tokens) if vocab is not None else None,
        "train_seed": train_seed,
        "params": [{"name": k, "shape": list(np.shape(v))} for k, v in params.items()],
    }
    arrays = {f"p:{k}": np.asarray(v, dtype=np.float64) for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def read_checkpoint_meta(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as z:
            return json.loads(str(z["__meta__"]))
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc


def load_checkpoint(path, vocab: Vocabulary | None = None):
    """Load ``(params, config)``.

    Raises :class:`CheckpointError` on version or shape problems; emits a
    :class:`VocabularyMismatchWarning` when ``vocab`` differs from the one the
    checkpoint was trained with.
    """
    meta = read_checkpoint_meta(path)
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {meta.get('version')!r}")
    try:
        config = ModelConfig(**{f.name: meta["config"][f.name] for f in fields(ModelConfig)})
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config block ({exc})") from exc
    expected = param_shapes(config)
    params = {}
    with np.load(path, allow_pickle=False) as z:
        for entry in meta["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            key = f"p:{name}"
            if key not in z:
                raise CheckpointError(f"{path}: missing tensor {name}")
            arr = z[key]
            if arr.shape != shape or expected.get(name) != shape:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {arr.shape}, header says {shape}, "
                    f"config implies {expected.get(name)}"
                )
            params[name] = arr.astype(np.float64)
    missing = set(expected) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    if vocab is not None and meta.get("vocab_hash") != vocab.digest():
        warnings.warn(
            f"{path} was trained with a different vocabulary", VocabularyMismatchWarning, stacklevel=2
        )
    return params, config


@dataclass
class TokenClassifier:
    """Params, config and vocabulary bundled for inference."""

    params: dict
    config: ModelConfig
    vocab: Vocabulary

    @classmethod
    def from_checkpoint(cls, path) -> "TokenClassifier":
        meta = read_checkpoint_meta(path)
        if not meta.get("vocab"):
            raise CheckpointError(f"{path}: checkpoint carries no vocabulary")
        vocab = Vocabulary(tuple(meta["vocab"]))
        params, config = load_checkpoint(path, vocab)
        return cls(params, config, vocab)

    def activations(self, tokens: Sequence[str]) -> list[np.ndarray]:
        layers = forward(self.params, self.config, self.vocab.encode(tokens))
        return [h.data for h in layers]

    def save(self, path, train_seed: int | None = None) -> None:
        save_checkpoint(self.params, self.config, path, self.vocab, train_seed)
