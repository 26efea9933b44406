import math

import numpy as np
import pytest

from tokcomp.autograd import Tape, Tensor, grad_check
from tokcomp.corpus import LabeledSequence, RuleSpec, SplitSpec, Vocabulary, make_synthetic_corpus, split
from tokcomp.model import ModelConfig, forward, init_params
from tokcomp.training import (
    REPORTED_LR,
    Adam,
    Example,
    TrainConfig,
    TrainingDivergedError,
    clip_global_norm,
    combined_loss,
    cross_entropy_loss,
    cs_loss,
    train,
)


def brute_cs(h, ip, idd):
    total = 0.0
    for i in ip:
        for j in idd:
            u, v = h[i], h[j]
            total += float(u @ v) / max(math.sqrt(u @ u) * math.sqrt(v @ v), 1e-8)
    return total / (len(ip) * len(idd))


def _head(w, b):
    return {"cls.w": np.asarray(w, float), "cls.b": np.asarray(b, float)}


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------


def test_ce_uniform_logits_is_ln2():
    h = Tensor(np.random.default_rng(0).normal(size=(5, 3)))
    loss = cross_entropy_loss(_head(np.zeros((3, 2)), [0, 0]), [h], [1, 0, 1, 1, 0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-15)


def test_ce_saturated_logits():
    labels = np.array([1, 0, 1])
    h = Tensor(np.where(labels[:, None] == 1, 1.0, -1.0))
    loss = cross_entropy_loss(_head([[-10.0, 10.0]], [0, 0]), [h], labels)
    assert loss.item() < 1e-8


def test_ce_matches_per_token_oracle():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(5, 4))
    w, b = rng.normal(size=(4, 2)), rng.normal(size=2)
    labels = [0, 1, 1, 0, 1]
    expected = 0.0
    for i in range(5):
        z = h[i] @ w + b
        p = math.exp(z[labels[i]]) / (math.exp(z[0]) + math.exp(z[1]))
        expected -= math.log(p)
    expected /= 5
    assert cross_entropy_loss(_head(w, b), [Tensor(h)], labels).item() == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# CS loss
# ---------------------------------------------------------------------------


def test_cs_orthogonal_classes_is_zero():
    h = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert cs_loss([Tensor(h)], [0, 1], [2]).item() == 0.0


def test_cs_shared_vector_is_one():
    h = np.tile([0.3, -2.0, 1.0], (4, 1))
    assert cs_loss([Tensor(h)], [0, 2], [1, 3]).item() == pytest.approx(1.0, abs=1e-15)


def test_cs_matches_brute_force_pairs():
    rng = np.random.default_rng(2)
    for _ in range(20):
        h = rng.normal(size=(5, 6))
        got = cs_loss([Tensor(h)], [0, 2, 4], [1, 3]).item()
        assert got == pytest.approx(brute_cs(h, [0, 2, 4], [1, 3]), abs=1e-12)


def test_cs_empty_class_is_zero():
    h = Tensor(np.ones((3, 2)))
    assert cs_loss([h], [0, 1, 2], []).item() == 0.0
    assert cs_loss([h], [], [0]).item() == 0.0


def test_cs_uses_last_layer_only():
    first = Tensor(np.eye(2))
    last = Tensor(np.ones((2, 2)))
    assert cs_loss([first, last], [0], [1]).item() == pytest.approx(1.0)


def test_cs_invariant_to_token_rescaling():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(6, 4))
    base = cs_loss([Tensor(h)], [0, 1, 2], [3, 4, 5]).item()
    for k in range(6):
        scaled = h.copy()
        scaled[k] *= rng.uniform(0.01, 100)
        assert abs(cs_loss([Tensor(scaled)], [0, 1, 2], [3, 4, 5]).item() - base) < 1e-9


def test_cs_gradient_six_tokens():
    rng = np.random.default_rng(4)
    h0 = rng.normal(size=(6, 5))
    err = grad_check(lambda ts: cs_loss(ts, [0, 1, 2], [3, 4, 5]), [h0], seed=1, n_coords=30)
    assert err < 1e-4


# ---------------------------------------------------------------------------
# combined loss
# ---------------------------------------------------------------------------


@pytest.fixture
def tiny():
    cfg = ModelConfig(layers=2, dim=8, heads=2, ffn_dim=12, max_len=10, vocab_size=12, dropout=0.0, seed=5)
    rng = np.random.default_rng(6)
    batch = [
        Example(rng.integers(2, 12, size=n), rng.integers(0, 2, size=n))
        for n in (4, 6, 3)
    ]
    return cfg, init_params(cfg), batch


def test_combined_beta_zero_equals_ce_exactly(tiny):
    cfg, params, batch = tiny
    (ex,) = batch[:1]
    total = combined_loss(params, cfg, [ex], 0.0).item()
    ce = cross_entropy_loss(params, forward(params, cfg, ex.ids), ex.labels).item()
    assert total == ce


def test_combined_is_mean_of_sequence_terms(tiny):
    cfg, params, batch = tiny
    beta = 0.37
    expected = 0.0
    for ex in batch:
        acts = forward(params, cfg, ex.ids)
        ce = cross_entropy_loss(params, acts, ex.labels).item()
        cs = brute_cs(acts[-1].data, ex.preserve_idx, ex.discard_idx) if (
            ex.preserve_idx.size and ex.discard_idx.size
        ) else 0.0
        expected += ce + beta * cs
    expected /= len(batch)
    assert combined_loss(params, cfg, batch, beta).item() == pytest.approx(expected, abs=1e-12)


def test_combined_loss_gradient_matches_finite_differences(tiny):
    cfg, params, batch = tiny
    names = list(params)

    def f(ts):
        return combined_loss(dict(zip(names, ts)), cfg, batch, 0.5)

    err = grad_check(f, [params[k] for k in names], seed=3, n_coords=40)
    assert err < 1e-4


def test_cs_term_does_not_reach_classifier(tiny):
    cfg, params, batch = tiny
    names = list(params)
    with Tape() as tape:
        leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        acts = forward(leaves, cfg, batch[0].ids)
        loss = cs_loss(acts, [0, 1], [2, 3])
        grads = dict(zip(names, tape.gradients(loss, [leaves[k] for k in names])))
    assert not grads["cls.w"].any() and not grads["cls.b"].any()
    assert grads["enc.1.ln2.g"].any()


def test_reported_beta_setting_is_accepted():
    assert TrainConfig(beta=0.001).beta == 0.001
    with pytest.raises(ValueError):
        TrainConfig(beta=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)


def test_defaults_follow_reported_protocol():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size) == (10, 10)
    assert REPORTED_LR == 1e-5
    assert TrainConfig(lr=REPORTED_LR).lr == 1e-5


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


def test_adam_first_step_moves_by_lr():
    params = {"w": np.array([1.0, -2.0])}
    opt = Adam(params, lr=0.1)
    opt.step(params, {"w": np.array([0.5, -3.0])})
    np.testing.assert_allclose(params["w"], [0.9, -1.9], atol=1e-7)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == 5.0
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])
    small = {"a": np.array([0.1])}
    clip_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _small_run(beta=0.0, seed=0, epochs=2):
    data = make_synthetic_corpus(RuleSpec(), 40, seed=seed)
    tr, va = split(data, SplitSpec(seed=seed))
    vocab = Vocabulary.build([s.tokens for s in tr])
    mc = ModelConfig(layers=1, dim=16, heads=2, ffn_dim=32, max_len=64, vocab_size=len(vocab), seed=seed)
    return train(mc, vocab, tr, va, TrainConfig(beta=beta, epochs=epochs, seed=seed))


def test_train_is_deterministic():
    p1, r1 = _small_run(beta=0.01)
    p2, r2 = _small_run(beta=0.01)
    assert r1 == r2
    for k in p1:
        assert p1[k].tobytes() == p2[k].tobytes()


def test_selected_epoch_is_earliest_argmax():
    _, rep = _small_run(epochs=3)
    accs = [r.val_accuracy for r in rep.epochs]
    assert rep.selected_epoch == accs.index(max(accs)) + 1
    assert rep.to_jsonl().count("\n") == 4


def test_divergence_is_reported(monkeypatch):
    import tokcomp.training as tr_mod

    real = tr_mod.combined_loss

    def poisoned(*a, **kw):
        return real(*a, **kw) * float("nan")

    monkeypatch.setattr(tr_mod, "combined_loss", poisoned)
    with pytest.raises(TrainingDivergedError, match="batch 0"):
        _small_run()


def test_train_requires_both_splits():
    vocab = Vocabulary.build([["a", "a"]])
    mc = ModelConfig(layers=1, dim=4, heads=1, ffn_dim=4, max_len=4, vocab_size=len(vocab))
    with pytest.raises(ValueError):
        train(mc, vocab, [LabeledSequence(("a",), (1,))], [], TrainConfig())
