"""Command-line workflow: prepare, train, diacritize, evaluate, bench.

Every command is deterministic given its flags and seed (bench wall times
aside).  Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime or
numeric error.  Output files are written atomically, so a failing command
leaves no partial artifacts.  Flag defaults reproduce the reference
configuration, so a bare ``train --arch atcn`` runs the standard setup.

The default seed can also come from the DIACRITIZER_SEED environment
variable; an explicit ``--seed`` wins.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import evaluation as ev
from . import models as md
from . import numerics as nm
from . import textdata as td
from . import training as tr

__all__ = ["main"]


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    raw = os.environ.get("DIACRITIZER_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="diacritizer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="filter a raw corpus and report statistics")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--max-word-chars", type=int, default=10)
    p.add_argument("--max-words", type=int, default=70)
    p.add_argument("--require-diacritic", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("train", help="train a sequence labeler end to end")
    p.add_argument("--arch", required=True, choices=md.ARCHITECTURES)
    p.add_argument("--train", required=True, dest="train_path")
    p.add_argument("--dev", required=True, dest="dev_path")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--num-layers", type=int, default=3)
    p.add_argument("--kernel-size", type=int, default=5)
    p.add_argument("--embedding-dim", type=int, default=45)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--dilation-base", type=int, default=2)
    p.add_argument("--threshold", type=float, default=0.01,
                   help="convergence threshold on dev-accuracy improvement")
    p.add_argument("--absolute-improvement", action="store_true",
                   help="treat the threshold as an absolute accuracy delta")
    p.add_argument("--log", default=None, help="epoch log path (default: <out>.log)")
    p.add_argument("--max-word-chars", type=int, default=10)
    p.add_argument("--max-words", type=int, default=70)
    p.add_argument("--require-diacritic", action=argparse.BooleanOptionalAction, default=True)

    p = sub.add_parser("diacritize", help="restore diacritics in a text file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--batch-size", type=int, default=128)

    p = sub.add_parser("evaluate", help="score a model on a gold corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True, dest="test_path")
    p.add_argument("--seen-words", default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--diff", default=None)
    p.add_argument("--batch-size", type=int, default=128)

    p = sub.add_parser("bench", help="compare inference throughput across models")
    p.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    p.add_argument("--input", required=True)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=128)

    return parser


def _read_corpus(path: str) -> list[td.DiacritizedSentence]:
    try:
        return td.read_corpus(path)
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read corpus {path}: {exc}") from None


def _load_model(path: str) -> md.SequenceLabeler:
    try:
        return md.load_model(path)
    except md.CheckpointError as exc:
        raise DataError(str(exc)) from None


def cmd_prepare(args) -> int:
    sentences = _read_corpus(args.input)
    rules = td.CorpusFilterRules(
        max_word_chars=args.max_word_chars,
        require_diacritic=args.require_diacritic,
        max_sentence_words=args.max_words,
    )
    kept, counts = td.filter_corpus(sentences, rules)
    td.write_corpus(kept, args.output)
    word_tokens = sum(s.n_words() for s in kept)
    forms = set()
    for s in kept:
        forms.update(s.undiacritized_words())
    print(f"read={len(sentences)} kept={len(kept)}")
    for reason in ("word_length", "no_diacritic", "sentence_length"):
        print(f"rejected_{reason}={counts[reason]}")
    print(f"word_tokens={word_tokens}")
    print(f"distinct_undiacritized_forms={len(forms)}")
    return 0


def cmd_train(args) -> int:
    seed = _default_seed() if args.seed is None else args.seed
    raw_train = _read_corpus(args.train_path)
    dev = _read_corpus(args.dev_path)
    rules = td.CorpusFilterRules(
        max_word_chars=args.max_word_chars,
        require_diacritic=args.require_diacritic,
        max_sentence_words=args.max_words,
    )
    train_sents, counts = td.filter_corpus(raw_train, rules)
    if not train_sents:
        raise DataError(
            f"no training sentences survive filtering (rejected: {counts})"
        )
    if not dev:
        raise DataError("dev corpus is empty")
    chars, labels, seen = td.build_vocabs(train_sents)
    windows = []
    for sent in train_sents:
        windows.extend(td.make_windows(sent, chars, labels, args.window))
    try:
        config = md.ModelConfig(
            arch=args.arch,
            char_vocab_size=len(chars),
            label_vocab_size=len(labels),
            num_layers=args.num_layers,
            hidden=args.hidden,
            kernel_size=args.kernel_size,
            embedding_dim=args.embedding_dim,
            dropout=args.dropout,
            dilation_base=args.dilation_base,
            seed=seed,
        )
        train_config = tr.TrainConfig(
            batch_size=args.batch_size,
            max_epochs=args.epochs,
            learning_rate=args.lr,
            convergence_threshold=args.threshold,
            relative_improvement=not args.absolute_improvement,
            shuffle_seed=seed,
            checkpoint_path=args.out,
            log_path=args.log if args.log is not None else f"{args.out}.log",
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    model = md.build_model(config)
    model.attach_vocabs(chars, labels, window=args.window)
    cp, records = tr.train(model, windows, dev, train_config)
    td.write_lines(sorted(seen), f"{args.out}.seen")
    best = max(r.dev_accuracy for r in records)
    print(
        f"arch={args.arch} train_sentences={len(train_sents)} windows={len(windows)} "
        f"char_vocab={len(chars)} label_vocab={len(labels)}"
    )
    print(f"epochs={len(records)} best_dev_accuracy={best:.6f}")
    print(f"checkpoint={args.out}")
    print(f"seen_words={args.out}.seen")
    return 0


def cmd_diacritize(args) -> int:
    model = _load_model(args.model)
    try:
        with open(args.input, "r", encoding="utf-8") as fh:
            lines = [line.rstrip("\n") for line in fh]
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read input {args.input}: {exc}") from None

    stripped_marks = 0
    jobs = []  # (line index, undiacritized sentence)
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        orig = td.decompose(line)
        stripped_marks += sum(1 for lab in orig.labels() if lab)
        bare = td.DiacritizedSentence(
            [[(base, "") for base, _ in word] for word in orig.words]
        )
        jobs.append((i, bare))

    out_lines = list(lines)
    if jobs:
        sentences = [sent for _, sent in jobs]
        predictions = ev.predict_corpus(
            model, sentences, batch_size=args.batch_size
        )
        for (i, sent), pred in zip(jobs, predictions):
            words = [
                [(base, lab) for (base, _), lab in zip(word, word_pred)]
                for word, word_pred in zip(sent.words, pred)
            ]
            out_lines[i] = td.recompose_words(words)
    td.atomic_write_text(args.output, "".join(f"{line}\n" for line in out_lines) if out_lines else "")
    chars = sum(s.n_chars() for _, s in jobs)
    print(f"lines={len(lines)} diacritized_chars={chars}")
    if stripped_marks:
        print(f"note: stripped {stripped_marks} pre-existing marks before prediction")
    return 0


def cmd_evaluate(args) -> int:
    model = _load_model(args.model)
    sentences = _read_corpus(args.test_path)
    if not sentences:
        raise DataError(f"test corpus {args.test_path} is empty")
    seen = None
    if args.seen_words is not None:
        try:
            seen = set(td.read_lines(args.seen_words))
        except OSError as exc:
            raise DataError(f"cannot read seen-words list: {exc}") from None
    else:
        print("warning: no --seen-words list; OOV metric disabled", file=sys.stderr)
    predictions = ev.predict_corpus(model, sentences, batch_size=args.batch_size)
    report = ev.score_predictions(sentences, predictions, model.label_vocab, seen)
    ev.write_report(report, args.report)
    if args.diff:
        ev.write_diff(sentences, predictions, args.diff)
    oov = "NA" if report.oov_wer is None else f"{report.oov_wer:.2%}"
    print("DER\tWER\tOOV\tFINAL")
    print(f"{report.der:.2%}\t{report.wer:.2%}\t{oov}\t{report.final_char_wer:.2%}")
    print(f"report={args.report}")
    return 0


def cmd_bench(args) -> int:
    paths = [p for p in args.models.split(",") if p]
    if not paths:
        raise UsageError("--models needs at least one checkpoint path")
    named = []
    for path in paths:
        model = _load_model(path)
        name = os.path.splitext(os.path.basename(path))[0]
        named.append((f"{name}:{model.config.arch}", model))
    sentences = _read_corpus(args.input)
    if not sentences:
        raise DataError(f"bench corpus {args.input} is empty")
    try:
        results = ev.throughput_bench(
            named, sentences, repeats=args.repeats, batch_size=args.batch_size
        )
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print("Model\tTime(s)\tChars/min")
    for r in results:
        print(f"{r.name}\t{r.wall_seconds:.3f}\t{r.chars_per_minute:,.0f}")
    if len(results) > 1:
        base = results[0]
        print(f"Comparison vs {base.name}:")
        print("Model\tTime\tSpeedup\tEfficiency")
        for r in results[1:]:
            print(
                f"{r.name}\t{ev.time_delta(r, base):+.1%}\t"
                f"x{ev.speedup(r, base):.2f}\t{ev.efficiency(r, base):+.1%}"
            )
    return 0


_COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "diacritize": cmd_diacritize,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (nm.NonFiniteError, tr.TrainingDivergence) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
