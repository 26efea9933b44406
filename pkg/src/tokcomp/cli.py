"""Command-line entry point: ``tokcomp {make-corpus,train,diagnose,compress,evaluate}``.

Settings resolve as command-line flag > ``--config`` JSON file > built-in
default.  Config keys are the flag names without dashes (``batch``,
``emit_token_records``, ...).

Exit codes: 0 success, 2 usage error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .compressor import PER_CLASS, WHOLE_SET, CompressionRequest, compress_many
from .corpus import (
    DatasetError,
    RuleSpec,
    SplitSpec,
    Vocabulary,
    load_dataset,
    make_synthetic_corpus,
    save_dataset,
    split,
)
from .diagnostics import NoEligibleSequenceError, corpus_report
from .evaluation import evaluate_compression
from .model import CheckpointError, ModelConfig, SequenceTooLongError, TokenClassifier
from .training import TrainConfig, TrainingDivergedError, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
ALPHA_SWEEP = tuple(round(0.1 * i, 1) for i in range(11))

log = logging.getLogger("tokcomp")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int, default=4)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--ffn", type=int, default=256)
    g.add_argument("--max-len", type=int, default=256)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--min-freq", type=int, default=2)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--beta", type=float, nargs="+", default=[0.001], help="one checkpoint per value")
    g.add_argument("--epochs", type=int, default=10)
    g.add_argument("--batch", type=int, default=10)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--clip", type=float, default=1.0)
    g.add_argument("--train-fraction", type=float, default=0.8)


def _add_request_flags(p):
    g = p.add_argument_group("compression")
    g.add_argument("--ratio", type=float, help="target compression ratio r (tau = 1/r)")
    g.add_argument("--tau", type=float, help="fraction of tokens to keep")
    g.add_argument("--alpha", type=float, default=0.5)
    g.add_argument("--whole-set", action="store_true", help="score outliers over all tokens at once")
    g.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokcomp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with flag defaults")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out")

    p = sub.add_parser("make-corpus", help="write a synthetic labelled corpus")
    common(p)
    p.add_argument("--size", type=int, default=600)
    p.add_argument("--label-noise", type=float, default=RuleSpec().label_noise)

    p = sub.add_parser("train", help="train a compressor checkpoint")
    common(p)
    p.add_argument("--dataset")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("diagnose", help="per-layer inter-class similarity CSV")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--checkpoint", nargs="+")

    p = sub.add_parser("compress", help="compress documents, one per input line")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input", default="-", help="text file, one document per line ('-' = stdin)")
    p.add_argument("--emit-token-records", metavar="PATH", help="write per-token JSON lines here")
    _add_request_flags(p)

    p = sub.add_parser("evaluate", help="token metrics, achieved ratio and latency")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--alpha-sweep", action="store_true", help=f"evaluate alpha in {ALPHA_SWEEP}")
    _add_request_flags(p)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("config file must hold a JSON object")
        known = vars(args)
        unknown = set(overrides) - set(known) - {"command"}
        if unknown:
            parser.error(f"unknown config keys: {sorted(unknown)}")
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        subparser.set_defaults(**{k: v for k, v in overrides.items() if k != "command"})
        args = parser.parse_args(argv)
    return args


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, []):
            raise UsageError(f"--{name.replace('_', '-')} is required for '{args.command}'")


def request_from_args(args) -> CompressionRequest:
    if args.ratio is not None and args.tau is not None:
        raise UsageError("--ratio and --tau are mutually exclusive")
    mode = WHOLE_SET if args.whole_set else PER_CLASS
    try:
        if args.tau is not None:
            return CompressionRequest(tau=args.tau, alpha=args.alpha, outlier_mode=mode)
        return CompressionRequest.from_ratio(args.ratio or 3.0, alpha=args.alpha, outlier_mode=mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_make_corpus(args) -> int:
    _require(args, "out")
    data = make_synthetic_corpus(RuleSpec(label_noise=args.label_noise), args.size, args.seed)
    save_dataset(data, args.out)
    log.info("wrote %d sequences to %s", len(data), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    _require(args, "dataset", "out")
    data = load_dataset(args.dataset)
    if not data:
        raise DatasetError(f"{args.dataset}: dataset is empty")
    try:
        spec = SplitSpec(args.train_fraction, 1.0 - args.train_fraction, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    train_set, val_set = split(data, spec)
    vocab = Vocabulary.build([s.tokens for s in train_set], min_freq=args.min_freq)
    try:
        model_cfg = ModelConfig(
            layers=args.layers, dim=args.dim, heads=args.heads, ffn_dim=args.ffn,
            max_len=args.max_len, vocab_size=len(vocab), dropout=args.dropout, seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    betas = args.beta if isinstance(args.beta, list) else [args.beta]
    for beta in betas:
        target = out if len(betas) == 1 else out / f"beta_{beta:g}"
        target.mkdir(parents=True, exist_ok=True)
        try:
            cfg = TrainConfig(
                beta=beta, epochs=args.epochs, batch_size=args.batch, lr=args.lr,
                seed=args.seed, clip_norm=args.clip,
            )
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        params, report = train(model_cfg, vocab, train_set, val_set, cfg)
        (target / "train_report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
        TokenClassifier(params, model_cfg, vocab).save(target / "model.npz", train_seed=args.seed)
        vocab.save(target / "vocab.txt")
        log.info(
            "beta=%g: selected epoch %d, val acc %.4f, S^L %.4f -> %s",
            beta, report.selected_epoch, report.best_val_accuracy, report.final_mean_S_L, target,
        )
    return EXIT_OK


def cmd_diagnose(args) -> int:
    _require(args, "dataset", "checkpoint")
    data = load_dataset(args.dataset)
    if not data:
        raise DatasetError(f"{args.dataset}: dataset is empty")
    ckpts = args.checkpoint if isinstance(args.checkpoint, list) else [args.checkpoint]
    if len(ckpts) > 1:
        _require(args, "out")
    for ckpt in ckpts:
        clf = TokenClassifier.from_checkpoint(ckpt)
        report = corpus_report(clf, data)
        if len(ckpts) == 1:
            dest = args.out
        else:
            p = Path(ckpt)
            dest = Path(args.out) / f"{p.parent.name}_{p.stem}.csv"
        fh = _open_out(dest)
        try:
            fh.write(report.to_csv())
        finally:
            if fh is not sys.stdout:
                fh.close()
        log.info("%s: %d sequences used, %d skipped", ckpt, report.included, report.excluded)
    return EXIT_OK


def _read_documents(path) -> list[str]:
    if path == "-":
        text = sys.stdin.read()
    else:
        text = Path(path).read_text(encoding="utf-8")
    return text.splitlines()


def cmd_compress(args) -> int:
    _require(args, "checkpoint")
    request = request_from_args(args)
    clf = TokenClassifier.from_checkpoint(args.checkpoint)
    docs = _read_documents(args.input)
    results = compress_many(clf, docs, request, workers=args.workers)
    fh = _open_out(args.out)
    try:
        for r in results:
            fh.write(r.text + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.emit_token_records:
        with _open_out(args.emit_token_records) as rec_fh:
            for doc_id, r in enumerate(results):
                for rec in r.records:
                    rec_fh.write(json.dumps({"doc": doc_id, **rec.to_dict()}, ensure_ascii=False) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "checkpoint", "dataset")
    base = request_from_args(args)
    clf = TokenClassifier.from_checkpoint(args.checkpoint)
    data = load_dataset(args.dataset)
    if not data:
        raise DatasetError(f"{args.dataset}: dataset is empty")
    alphas = ALPHA_SWEEP if args.alpha_sweep else (base.alpha,)
    fh = _open_out(args.out)
    try:
        for a in alphas:
            req = CompressionRequest(tau=base.tau, alpha=a, outlier_mode=base.outlier_mode)
            report = evaluate_compression(clf, data, req, workers=args.workers)
            fh.write(json.dumps(report.to_dict()) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


COMMANDS = {
    "make-corpus": cmd_make_corpus,
    "train": cmd_train,
    "diagnose": cmd_diagnose,
    "compress": cmd_compress,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    np.seterr(all="raise", under="ignore")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"tokcomp {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        DatasetError,
        CheckpointError,
        NoEligibleSequenceError,
        SequenceTooLongError,
        FileNotFoundError,
        IsADirectoryError,
    ) as exc:
        print(f"tokcomp {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"tokcomp {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
