"""Accuracy metrics, report assembly, and the inference throughput bench.

Character-level scoring covers every base character of every word,
including characters whose gold label is empty (predicting a spurious mark
there is an error); boundary and padding positions never reach the
metrics.  A word is wrong as soon as any of its characters is wrong, which
is why WER is never below DER or the word-final error rate.

Gold labels missing from the model's label vocabulary are automatic
misses (the closed-set model cannot emit them); they stay inside DER/WER
and are also counted separately for diagnosis.

The throughput bench times the batched 32-bit inference path on identical
pre-built batches for every model, one model at a time, with a warm-up
pass excluded, and reports the median over repeats.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import models as md
from . import textdata as td
from .models import SequenceLabeler
from .textdata import DiacritizedSentence, Vocab

__all__ = [
    "EvalReport",
    "BenchResult",
    "der",
    "wer",
    "oov_wer",
    "final_char_wer",
    "confusion_matrix",
    "predict_corpus",
    "score_predictions",
    "evaluate_model",
    "throughput_bench",
    "speedup",
    "efficiency",
    "time_delta",
    "write_report",
    "write_diff",
]


def _check_partition(n: int, word_boundaries) -> None:
    pos = 0
    for start, stop in word_boundaries:
        if start != pos or stop <= start:
            raise ValueError(f"word boundaries do not partition positions at {start}")
        pos = stop
    if pos != n:
        raise ValueError(f"word boundaries cover {pos} positions, expected {n}")


def _check_lengths(gold, pred) -> None:
    if len(gold) != len(pred):
        raise ValueError(f"gold has {len(gold)} labels, prediction has {len(pred)}")


def der(gold, pred) -> float:
    """Fraction of scored characters whose predicted label mismatches."""
    _check_lengths(gold, pred)
    if not len(gold):
        raise ValueError("cannot score an empty sequence")
    wrong = sum(1 for g, p in zip(gold, pred) if g != p)
    return wrong / len(gold)


def wer(gold, pred, word_boundaries) -> float:
    """Fraction of words containing at least one mislabeled character."""
    _check_lengths(gold, pred)
    _check_partition(len(gold), word_boundaries)
    wrong = sum(
        1
        for start, stop in word_boundaries
        if any(gold[i] != pred[i] for i in range(start, stop))
    )
    return wrong / len(word_boundaries)


def oov_wer(gold, pred, word_boundaries, words, seen_set) -> float | None:
    """WER restricted to words whose undiacritized form was never seen.

    Returns None when the restriction is empty.
    """
    _check_lengths(gold, pred)
    _check_partition(len(gold), word_boundaries)
    if len(words) != len(word_boundaries):
        raise ValueError("one undiacritized form is needed per word")
    oov = [
        (start, stop)
        for (start, stop), w in zip(word_boundaries, words)
        if w not in seen_set
    ]
    if not oov:
        return None
    wrong = sum(
        1 for start, stop in oov if any(gold[i] != pred[i] for i in range(start, stop))
    )
    return wrong / len(oov)


def final_char_wer(gold, pred, word_boundaries) -> float:
    """Fraction of words whose final character's label mismatches."""
    _check_lengths(gold, pred)
    _check_partition(len(gold), word_boundaries)
    wrong = sum(1 for _, stop in word_boundaries if gold[stop - 1] != pred[stop - 1])
    return wrong / len(word_boundaries)


def confusion_matrix(gold, pred, label_vocab: Vocab):
    """counts[gold][pred] over scored characters, plus normalized error rates.

    Rows/columns follow the label vocabulary; gold labels outside it get
    extra trailing rows so the matrix total still equals the scored count.
    Returns (matrix, labels, per-label error rate dict normalized by gold
    frequency).
    """
    _check_lengths(gold, pred)
    labels = list(label_vocab.entries)
    index = {lab: i for i, lab in enumerate(labels)}
    for g in gold:
        if g not in index:
            index[g] = len(labels)
            labels.append(g)
    n = len(labels)
    mat = np.zeros((n, n), dtype=np.int64)
    for g, p in zip(gold, pred):
        mat[index[g], index[p]] += 1
    rates = {}
    for lab in labels:
        row = mat[index[lab]]
        total = int(row.sum())
        if total:
            rates[lab] = float(total - row[index[lab]]) / total
    return mat, labels, rates


@dataclass
class EvalReport:
    """All corpus-level measurements in one place."""

    der: float
    wer: float
    oov_wer: float | None
    final_char_wer: float
    confusion: np.ndarray
    confusion_labels: list[str]
    per_label_error: dict[str, float]
    chars_scored: int
    words_scored: int
    oov_words_scored: int
    unseen_label_misses: int


def predict_corpus(
    model: SequenceLabeler,
    sentences: list[DiacritizedSentence],
    batch_size: int = 128,
    dtype=np.float32,
) -> list[list[list[str]]]:
    """Predicted label strings per sentence/word/character.

    Sentences are windowed exactly as in training (the window size rides in
    the checkpoint); each word's labels come from the window where it is
    the center.  Inference runs on the 32-bit cast of the model by default.
    """
    if model.char_vocab is None or model.label_vocab is None:
        raise ValueError("model has no vocabularies attached")
    jobs = []  # (sentence index, word index, window)
    for si, sent in enumerate(sentences):
        for wi, win in enumerate(
            td.make_windows(sent, model.char_vocab, model.label_vocab, model.window)
        ):
            jobs.append((si, wi, win))
    runner = model.cast(dtype) if dtype != np.float64 else model
    label_of = model.label_vocab.token
    out: list[list[list[str]]] = [
        [[None] * len(word) for word in sent.words] for sent in sentences
    ]
    for lo in range(0, len(jobs), batch_size):
        chunk = jobs[lo : lo + batch_size]
        ids, mask = _pad_batch([win for _, _, win in chunk])
        logits = runner.forward_batch(ids).data
        pred = md.argmax_labels(logits)
        for row, (si, wi, win) in enumerate(chunk):
            m = mask[row, : len(win.char_ids)]
            out[si][wi] = [label_of(int(p)) for p in pred[row, : len(win.char_ids)][m]]
    return out


def _pad_batch(windows):
    longest = max(len(w.char_ids) for w in windows)
    ids = np.full((len(windows), longest), td.PAD_ID, dtype=np.int64)
    mask = np.zeros((len(windows), longest), dtype=bool)
    for i, w in enumerate(windows):
        ids[i, : len(w.char_ids)] = w.char_ids
        mask[i, : len(w.char_ids)] = w.center_mask
    return ids, mask


def score_predictions(
    sentences: list[DiacritizedSentence],
    predictions: list[list[list[str]]],
    label_vocab: Vocab,
    seen_words: set[str] | None = None,
) -> EvalReport:
    """Aggregate metrics over a predicted corpus."""
    gold: list[str] = []
    pred: list[str] = []
    boundaries: list[tuple[int, int]] = []
    forms: list[str] = []
    for sent, sent_pred in zip(sentences, predictions):
        for word, word_pred, form in zip(
            sent.words, sent_pred, sent.undiacritized_words()
        ):
            start = len(gold)
            gold.extend(label for _, label in word)
            pred.extend(word_pred)
            boundaries.append((start, len(gold)))
            forms.append(form)
    if not gold:
        raise ValueError("nothing to score")
    unseen_misses = sum(1 for g in gold if g not in label_vocab)
    mat, labels, rates = confusion_matrix(gold, pred, label_vocab)
    if seen_words is None:
        oov = None
        oov_count = 0
    else:
        oov = oov_wer(gold, pred, boundaries, forms, seen_words)
        oov_count = sum(1 for f in forms if f not in seen_words)
    return EvalReport(
        der=der(gold, pred),
        wer=wer(gold, pred, boundaries),
        oov_wer=oov,
        final_char_wer=final_char_wer(gold, pred, boundaries),
        confusion=mat,
        confusion_labels=labels,
        per_label_error=rates,
        chars_scored=len(gold),
        words_scored=len(boundaries),
        oov_words_scored=oov_count,
        unseen_label_misses=unseen_misses,
    )


def evaluate_model(
    model: SequenceLabeler,
    sentences: list[DiacritizedSentence],
    seen_words: set[str] | None = None,
    batch_size: int = 128,
    dtype=np.float32,
) -> EvalReport:
    predictions = predict_corpus(model, sentences, batch_size=batch_size, dtype=dtype)
    return score_predictions(sentences, predictions, model.label_vocab, seen_words)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------


def _label_name(label: str) -> str:
    if label == "":
        return "<none>"
    return "+".join(f"U+{ord(ch):04X}" for ch in label)


def format_report(report: EvalReport) -> str:
    lines = [
        f"der={report.der:.6f}",
        f"wer={report.wer:.6f}",
        "oov_wer=NA" if report.oov_wer is None else f"oov_wer={report.oov_wer:.6f}",
        f"final_char_wer={report.final_char_wer:.6f}",
        f"chars_scored={report.chars_scored}",
        f"words_scored={report.words_scored}",
        f"oov_words_scored={report.oov_words_scored}",
        f"unseen_label_misses={report.unseen_label_misses}",
        f"confusion_labels={len(report.confusion_labels)}",
    ]
    for lab in report.confusion_labels:
        lines.append(_label_name(lab))
    lines.append("confusion_counts=rows_gold_cols_predicted")
    for row in report.confusion:
        lines.append("\t".join(str(int(v)) for v in row))
    lines.append("per_label_error=normalized_by_gold_frequency")
    order = sorted(report.per_label_error, key=report.per_label_error.get, reverse=True)
    for lab in order:
        lines.append(f"{_label_name(lab)}\t{report.per_label_error[lab]:.6f}")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path: str) -> None:
    td.atomic_write_text(path, format_report(report))


def write_diff(
    sentences: list[DiacritizedSentence],
    predictions: list[list[list[str]]],
    path: str,
) -> None:
    """Aligned two-column gold/predicted text for qualitative review."""
    rows = []
    for sent, sent_pred in zip(sentences, predictions):
        gold_text = sent.to_text()
        pred_words = [
            [(base, plab) for (base, _), plab in zip(word, word_pred)]
            for word, word_pred in zip(sent.words, sent_pred)
        ]
        rows.append(f"{gold_text}\t{td.recompose_words(pred_words)}\n")
    td.atomic_write_text(path, "".join(rows))


# ---------------------------------------------------------------------------
# Throughput bench
# ---------------------------------------------------------------------------


@dataclass
class BenchResult:
    """Median-of-repeats inference timing for one model."""

    name: str
    wall_seconds: float
    repeat_seconds: list[float]
    chars_processed: int
    chars_per_minute: float


def throughput_bench(
    named_models: list[tuple[str, SequenceLabeler]],
    sentences: list[DiacritizedSentence],
    repeats: int = 5,
    batch_size: int = 128,
    dtype=np.float32,
) -> list[BenchResult]:
    """Time full-corpus inference per model on identical batches.

    Each model runs strictly alone: one untimed warm-up pass, then
    ``repeats`` timed passes over the same pre-built batches.  The reported
    rate counts diacritized characters (each character is the center of
    exactly one window) per minute of median wall time.
    """
    if not named_models:
        raise ValueError("need at least one model to bench")
    if not sentences:
        raise ValueError("cannot bench on an empty corpus")
    reference = named_models[0][1]
    for name, model in named_models[1:]:
        if model.char_vocab.entries != reference.char_vocab.entries:
            raise ValueError(
                f"model {name!r} has a different character vocabulary; "
                "benched models must share one corpus encoding"
            )
    windows = []
    for sent in sentences:
        windows.extend(
            td.make_windows(sent, reference.char_vocab, reference.label_vocab, reference.window)
        )
    batches = [
        _pad_batch(windows[lo : lo + batch_size])
        for lo in range(0, len(windows), batch_size)
    ]
    chars = int(sum(mask.sum() for _, mask in batches))

    results = []
    for name, model in named_models:
        runner = model.cast(dtype) if dtype != np.float64 else model
        _run_pass(runner, batches)  # warm-up, excluded from timing
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            _run_pass(runner, batches)
            times.append(time.perf_counter() - start)
        wall = float(np.median(times))
        results.append(
            BenchResult(
                name=name,
                wall_seconds=wall,
                repeat_seconds=times,
                chars_processed=chars,
                chars_per_minute=chars / (wall / 60.0),
            )
        )
    return results


def _run_pass(model: SequenceLabeler, batches) -> None:
    for ids, _ in batches:
        md.argmax_labels(model.forward_batch(ids).data)


def speedup(a: BenchResult, b: BenchResult) -> float:
    """rate_a / rate_b: how many times faster ``a`` diacritizes text."""
    return a.chars_per_minute / b.chars_per_minute


def efficiency(a: BenchResult, b: BenchResult) -> float:
    """Relative throughput improvement of ``a`` over ``b``: rate_a/rate_b - 1.

    A model measured against itself scores 0.  (Display convention: the
    headline "N times faster" figure is ``speedup``, which equals
    efficiency + 1.)
    """
    return speedup(a, b) - 1.0


def time_delta(a: BenchResult, b: BenchResult) -> float:
    """Relative wall-time change of ``a`` against baseline ``b``."""
    return (a.wall_seconds - b.wall_seconds) / b.wall_seconds
