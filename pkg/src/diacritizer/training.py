"""Mini-batch training with dev monitoring and best-checkpoint selection.

The loss is mean softmax cross-entropy over center-word positions only:
window construction presents every corpus character as a center exactly
once per epoch, so center-only loss scores each character once and avoids
overweighting frequent context words.

After every epoch the model is evaluated on the dev set through the same
32-bit inference path that checkpoints and prediction use, so the accuracy
recorded in a checkpoint reproduces exactly when the checkpoint is loaded
and re-evaluated.  Training stops once the improvement in dev accuracy
over the previous epoch falls below the convergence threshold (relative
improvement by default), or at ``max_epochs``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import evaluation as ev
from . import models as md
from . import numerics as nm
from . import textdata as td
from .numerics import AdamState, Rng, Tensor
from .textdata import TrainingWindow

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "Batch",
    "TrainingDivergence",
    "batch_windows",
    "loss",
    "masked_cross_entropy",
    "train",
]


@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 50
    learning_rate: float = 0.001
    convergence_threshold: float = 0.01
    relative_improvement: bool = True
    shuffle_seed: int = 0
    checkpoint_path: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not 0.0 <= self.convergence_threshold <= 1.0:
            raise ValueError("convergence_threshold must be in [0, 1]")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_accuracy: float
    seconds: float


@dataclass
class Batch:
    """Right-padded window group; padding is masked out of the loss."""

    char_ids: np.ndarray
    center_mask: np.ndarray
    label_ids: np.ndarray

    @property
    def size(self) -> int:
        return self.char_ids.shape[0]


class TrainingDivergence(RuntimeError):
    """Non-finite loss or gradients; names the offending batch."""

    def __init__(self, epoch: int, batch_index: int, detail: str):
        super().__init__(
            f"training diverged at epoch {epoch}, batch {batch_index}: {detail}"
        )
        self.epoch = epoch
        self.batch_index = batch_index


def batch_windows(
    windows: list[TrainingWindow], batch_size: int, rng: Rng | None = None
) -> list[Batch]:
    """Shuffle (when given an rng), group, and right-pad with ``<pad>``."""
    order = rng.permutation(len(windows)) if rng is not None else np.arange(len(windows))
    batches = []
    for lo in range(0, len(order), batch_size):
        group = [windows[i] for i in order[lo : lo + batch_size]]
        longest = max(len(w.char_ids) for w in group)
        ids = np.full((len(group), longest), td.PAD_ID, dtype=np.int64)
        mask = np.zeros((len(group), longest), dtype=bool)
        labels = np.zeros((len(group), longest), dtype=np.int64)
        for i, w in enumerate(group):
            n = len(w.char_ids)
            ids[i, :n] = w.char_ids
            mask[i, :n] = w.center_mask
            labels[i, :n] = w.label_ids
        batches.append(Batch(ids, mask, labels))
    return batches


def masked_cross_entropy(logits: Tensor, label_ids: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over masked positions of [B, T, L] logits."""
    label_ids = np.asarray(label_ids)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != mask.shape or label_ids.shape != mask.shape:
        raise ValueError(
            f"shape mismatch: logits {logits.shape}, labels {label_ids.shape}, "
            f"mask {mask.shape}"
        )
    n = int(mask.sum())
    if n == 0:
        raise ValueError("loss mask selects no positions")
    L = logits.shape[-1]
    active = label_ids[mask]
    if active.min() < 0 or active.max() >= L:
        raise ValueError("masked positions carry label ids outside the vocabulary")

    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    lse = (m + np.log(z))[..., 0]
    safe_labels = np.where(mask, label_ids, 0)
    gold = np.take_along_axis(x, safe_labels[..., None], axis=-1)[..., 0]
    value = float(((lse - gold) * mask).sum() / n)

    rows = np.nonzero(mask)

    def rule(g):
        p = e / z
        p[(*rows, active)] -= 1.0  # index triples are unique
        # positions outside the mask contribute nothing
        p *= mask[..., None]
        return (p * (float(g) / n),)

    return nm.apply(np.asarray(value), (logits,), rule, "cross_entropy")


def loss(logits: Tensor, label_ids, center_mask) -> Tensor:
    """Cross-entropy for a single [T, L] logit matrix (see masked_cross_entropy)."""
    if logits.ndim != 2:
        raise ValueError(f"expected [T, L] logits, got shape {logits.shape}")
    T, L = logits.shape
    wide = nm.reshape(logits, (1, T, L))
    return masked_cross_entropy(
        wide, np.asarray(label_ids)[None, :], np.asarray(center_mask)[None, :]
    )


def _run_epoch(model, batches, state: AdamState, rng: Rng, epoch: int) -> float:
    """One optimizer pass over the batches; returns the mean batch loss."""
    params = dict(model.parameters())
    losses = []
    for bi, batch in enumerate(batches):
        tape = nm.GradTape()
        try:
            logits = model.forward_batch(batch.char_ids, training=True, rng=rng, tape=tape)
            batch_loss = masked_cross_entropy(logits, batch.label_ids, batch.center_mask)
            handles = {name: p.grad_id for name, p in params.items()}
            grads_by_id = nm.backward(batch_loss, tape)
            grads = {name: grads_by_id[h] for name, h in handles.items()}
            nm.adam_step(params, grads, state)
        except nm.NonFiniteError as exc:
            raise TrainingDivergence(epoch, bi, str(exc)) from exc
        finally:
            tape.finish()
        losses.append(batch_loss.item())
    return float(np.mean(losses))


def _improvement(acc: float, prev: float, relative: bool) -> float:
    if not relative:
        return acc - prev
    if prev <= 0.0:
        return float("inf") if acc > prev else 0.0
    return (acc - prev) / prev


def train(
    model: md.SequenceLabeler,
    train_windows: list[TrainingWindow],
    dev_sentences: list[td.DiacritizedSentence],
    config: TrainConfig,
) -> tuple[md.Checkpoint, list[EpochRecord]]:
    """Optimize until converged; returns the best checkpoint and epoch log.

    The checkpoint with the highest dev accuracy wins; it is also written to
    ``config.checkpoint_path`` (atomically) whenever the best improves.
    """
    if not train_windows:
        raise ValueError("no training windows")
    if not dev_sentences:
        raise ValueError("no dev sentences")
    if model.char_vocab is None or model.label_vocab is None:
        raise ValueError("model needs vocabularies attached before training")

    state = AdamState(learning_rate=config.learning_rate)
    rng = Rng(config.shuffle_seed)
    records: list[EpochRecord] = []
    best_cp: md.Checkpoint | None = None
    best_acc = -1.0
    prev_acc: float | None = None
    log_fh = open(config.log_path, "w", encoding="utf-8") if config.log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            started = time.perf_counter()
            batches = batch_windows(train_windows, config.batch_size, rng)
            mean_loss = _run_epoch(model, batches, state, rng, epoch)
            report = ev.evaluate_model(model, dev_sentences, batch_size=config.batch_size)
            acc = 1.0 - report.der
            seconds = time.perf_counter() - started
            records.append(EpochRecord(epoch, mean_loss, acc, seconds))
            if log_fh:
                log_fh.write(f"{epoch}\t{mean_loss:.6f}\t{acc:.6f}\t{seconds:.3f}\n")
                log_fh.flush()
            if acc > best_acc:
                best_acc = acc
                model.dev_accuracy = acc
                best_cp = md.checkpoint_from_model(model)
                if config.checkpoint_path:
                    md.save_checkpoint(best_cp, config.checkpoint_path)
            if prev_acc is not None and _improvement(
                acc, prev_acc, config.relative_improvement
            ) < config.convergence_threshold:
                break
            prev_acc = acc
    finally:
        if log_fh:
            log_fh.close()
    return best_cp, records
