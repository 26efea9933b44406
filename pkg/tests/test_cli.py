import json

import numpy as np
import pytest

from tokcomp.cli import ALPHA_SWEEP, EXIT_DATA, EXIT_OK, EXIT_USAGE, main, parse_args
from tokcomp.corpus import load_dataset, tokenize
from tokcomp.model import TokenClassifier

TINY = ["--layers", "1", "--dim", "16", "--heads", "2", "--ffn", "32", "--epochs", "2", "--max-len", "320"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus.jsonl"
    assert main(["make-corpus", "--size", "40", "--seed", "3", "--out", str(corpus)]) == EXIT_OK
    out = root / "run"
    assert main(["train", "--dataset", str(corpus), "--out", str(out), *TINY]) == EXIT_OK
    return root, corpus, out / "model.npz"


def test_usage_errors_exit_2(capsys):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["compress", "--ratio", "2", "--tau", "0.5", "--checkpoint", "x"]) == EXIT_USAGE
    assert main(["train", "--out", "x"]) == EXIT_USAGE  # no dataset
    assert main(["compress", "--checkpoint", "x", "--alpha", "1.5"]) == EXIT_USAGE
    assert "usage error" in capsys.readouterr().err


def test_missing_files_exit_3(tmp_path, workspace):
    _, corpus, ckpt = workspace
    assert main(["compress", "--checkpoint", str(tmp_path / "nope.npz")]) == EXIT_DATA
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"tokens": ["a"], "labels": [2]}\n')
    assert main(["diagnose", "--dataset", str(bad), "--checkpoint", str(ckpt)]) == EXIT_DATA


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 3, "lr": 0.01}))
    args = parse_args(["train", "--config", str(cfg), "--epochs", "5"])
    assert args.epochs == 5 and args.lr == 0.01 and args.batch == 10
    cfg.write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit):
        parse_args(["train", "--config", str(cfg)])


def test_train_outputs(workspace):
    _, _, ckpt = workspace
    run = ckpt.parent
    assert (run / "vocab.txt").exists()
    lines = (run / "train_report.jsonl").read_text().splitlines()
    assert len(lines) == 3
    assert "selected_epoch" in json.loads(lines[-1])


def test_beta_sweep_writes_one_checkpoint_per_value(workspace):
    root, corpus, _ = workspace
    out = root / "sweep"
    argv = ["train", "--dataset", str(corpus), "--out", str(out), *TINY, "--beta", "0", "0.001", "0.01"]
    assert main(argv) == EXIT_OK
    assert sorted(p.parent.name for p in out.glob("*/model.npz")) == ["beta_0", "beta_0.001", "beta_0.01"]


def test_training_is_reproducible(workspace, tmp_path):
    _, corpus, ckpt = workspace
    assert main(["train", "--dataset", str(corpus), "--out", str(tmp_path), *TINY]) == EXIT_OK
    a, b = np.load(ckpt), np.load(tmp_path / "model.npz")
    assert sorted(a.files) == sorted(b.files)
    for k in a.files:
        assert a[k].tobytes() == b[k].tobytes()


def test_diagnose_csv_has_one_row_per_layer(workspace, tmp_path):
    _, corpus, ckpt = workspace
    out = tmp_path / "diag.csv"
    assert main(["diagnose", "--dataset", str(corpus), "--checkpoint", str(ckpt), "--out", str(out)]) == EXIT_OK
    rows = out.read_text().splitlines()
    assert rows[0] == "layer,mean,std,count"
    assert len(rows) == 1 + 2  # embeddings + one block


def test_diagnose_many_checkpoints(workspace, tmp_path):
    root, corpus, ckpt = workspace
    argv = ["diagnose", "--dataset", str(corpus), "--checkpoint", str(ckpt), str(ckpt), "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    assert len(list(tmp_path.glob("*.csv"))) == 1  # same checkpoint twice maps to one file


def _vocab_doc(ckpt, n, seed=0):
    words = TokenClassifier.from_checkpoint(ckpt).vocab.tokens[2:]
    rng = np.random.default_rng(seed)
    return " ".join(words[i] for i in rng.integers(len(words), size=n))


def test_ratio_three_on_300_tokens_keeps_100(workspace, tmp_path):
    _, _, ckpt = workspace
    doc = _vocab_doc(ckpt, 300)
    src, out = tmp_path / "in.txt", tmp_path / "out.txt"
    src.write_text(doc + "\n")
    argv = ["compress", "--checkpoint", str(ckpt), "--input", str(src), "--out", str(out), "--ratio", "3"]
    assert main(argv) == EXIT_OK
    assert len(tokenize(out.read_text())) == 100


def test_ratio_one_is_identity(workspace, tmp_path):
    _, corpus, ckpt = workspace
    docs = [" ".join(s.tokens) for s in load_dataset(corpus)[:5]]
    src, out = tmp_path / "in.txt", tmp_path / "out.txt"
    src.write_text("\n".join(docs) + "\n")
    argv = ["compress", "--checkpoint", str(ckpt), "--input", str(src), "--out", str(out), "--ratio", "1"]
    assert main(argv) == EXIT_OK
    assert out.read_text().splitlines() == docs


def test_batch_equals_single_runs_and_line_count(workspace, tmp_path):
    _, corpus, ckpt = workspace
    docs = [" ".join(s.tokens) for s in load_dataset(corpus)[:20]]
    src, out = tmp_path / "in.txt", tmp_path / "out.txt"
    src.write_text("\n".join(docs) + "\n")
    base = ["compress", "--checkpoint", str(ckpt), "--tau", "0.4"]
    assert main([*base, "--input", str(src), "--out", str(out), "--workers", "4"]) == EXIT_OK
    batch = out.read_text().splitlines()
    assert len(batch) == 20
    single = []
    for i, d in enumerate(docs):
        (tmp_path / f"d{i}.txt").write_text(d + "\n")
        assert main([*base, "--input", str(tmp_path / f"d{i}.txt"), "--out", str(tmp_path / f"o{i}.txt")]) == 0
        single.append((tmp_path / f"o{i}.txt").read_text().rstrip("\n"))
    assert batch == single


def test_token_records(workspace, tmp_path):
    _, _, ckpt = workspace
    src, rec = tmp_path / "in.txt", tmp_path / "rec.jsonl"
    src.write_text(_vocab_doc(ckpt, 12) + "\n" + _vocab_doc(ckpt, 7, seed=1) + "\n")
    argv = ["compress", "--checkpoint", str(ckpt), "--input", str(src), "--out", str(tmp_path / "o.txt"),
            "--emit-token-records", str(rec), "--whole-set"]
    assert main(argv) == EXIT_OK
    rows = [json.loads(x) for x in rec.read_text().splitlines()]
    assert len(rows) == 19
    assert set(rows[0]) == {"doc", "index", "surface", "p", "s_norm", "m", "kept"}
    assert all(0.0 <= r["s_norm"] <= 1.0 for r in rows)


def test_evaluate_alpha_sweep(workspace, tmp_path):
    _, corpus, ckpt = workspace
    out = tmp_path / "eval.jsonl"
    argv = ["evaluate", "--checkpoint", str(ckpt), "--dataset", str(corpus), "--alpha-sweep", "--out", str(out)]
    assert main(argv) == EXIT_OK
    rows = [json.loads(x) for x in out.read_text().splitlines()]
    assert [r["alpha"] for r in rows] == list(ALPHA_SWEEP)
    assert all(0.0 <= r["f1"] <= 1.0 and r["mean_ratio"] >= 1.0 for r in rows)


def test_diagnose_without_eligible_sequences_exits_3(workspace, tmp_path):
    _, _, ckpt = workspace
    one_class = tmp_path / "one.jsonl"
    one_class.write_text('{"tokens": ["a", "b"], "labels": [1, 1]}\n')
    assert main(["diagnose", "--dataset", str(one_class), "--checkpoint", str(ckpt)]) == EXIT_DATA


def test_diagnose_two_checkpoints_two_csvs(workspace, tmp_path):
    root, corpus, _ = workspace
    sweep = root / "sweep"
    if not sweep.exists():
        main(["train", "--dataset", str(corpus), "--out", str(sweep), *TINY, "--beta", "0", "0.01"])
    ckpts = sorted(str(p) for p in sweep.glob("beta_0*/model.npz"))[:2]
    assert main(["diagnose", "--dataset", str(corpus), "--checkpoint", *ckpts, "--out", str(tmp_path)]) == EXIT_OK
    assert len(list(tmp_path.glob("*.csv"))) == 2


def test_blank_lines_keep_line_count(workspace, tmp_path):
    _, _, ckpt = workspace
    src, out = tmp_path / "in.txt", tmp_path / "out.txt"
    src.write_text(_vocab_doc(ckpt, 9) + "\n\n" + _vocab_doc(ckpt, 4, seed=2) + "\n")
    assert main(["compress", "--checkpoint", str(ckpt), "--input", str(src), "--out", str(out)]) == EXIT_OK
    lines = out.read_text().split("\n")[:-1]
    assert len(lines) == 3 and lines[1] == ""
