"""Sequence labelers: convolutional (causal/acausal) and recurrent stacks.

A model maps a sequence of character ids to one row of label logits per
position.  Four architectures share the same embedding and projection:

* ``tcn``   - residual blocks of dilated causal convolutions;
* ``atcn``  - the same blocks with symmetric (acausal) padding;
* ``lstm``  - stacked unidirectional LSTM layers;
* ``bilstm``- stacked bidirectional LSTM layers, directions concatenated.

Convolutional stacks use dilations 1, 2, 4, ... (``dilation_base ** i`` for
block ``i``), so the receptive field grows exponentially with depth.

Checkpoints are a binary format (magic ``ADRM``, version byte 1) holding a
key-value metadata document (config, both vocabularies, windowing) followed
by every parameter in canonical order as 32-bit little-endian floats.  See
docs/checkpoint_format.md for the byte-level layout.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as ly
from . import numerics as nm
from .numerics import Rng, Tensor
from .textdata import Vocab

__all__ = [
    "ARCHITECTURES",
    "CONV_ARCHITECTURES",
    "RECURRENT_ARCHITECTURES",
    "ModelConfig",
    "SequenceLabeler",
    "Checkpoint",
    "CheckpointError",
    "build_model",
    "forward",
    "predict",
    "argmax_labels",
    "receptive_field",
    "checkpoint_from_model",
    "model_from_checkpoint",
    "save_model",
    "load_model",
    "save_checkpoint",
    "load_checkpoint",
]

CONV_ARCHITECTURES = ("tcn", "atcn")
RECURRENT_ARCHITECTURES = ("lstm", "bilstm")
ARCHITECTURES = CONV_ARCHITECTURES + RECURRENT_ARCHITECTURES

CHECKPOINT_MAGIC = b"ADRM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture selection plus every model hyperparameter.

    ``hidden`` defaults to 500 for convolutional architectures and 250 per
    direction for recurrent ones.
    """

    arch: str
    char_vocab_size: int
    label_vocab_size: int
    num_layers: int = 3
    hidden: int | None = None
    kernel_size: int = 5
    embedding_dim: int = 45
    dropout: float = 0.5
    dilation_base: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(
                f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}"
            )
        if self.hidden is None:
            self.hidden = 500 if self.arch in CONV_ARCHITECTURES else 250
        if self.arch == "atcn" and self.kernel_size % 2 == 0:
            raise ValueError("atcn requires an odd kernel size")
        for name in ("char_vocab_size", "label_vocab_size", "num_layers", "hidden",
                     "kernel_size", "embedding_dim", "dilation_base"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def dilations(self) -> list[int]:
        return [self.dilation_base**i for i in range(self.num_layers)]


class SequenceLabeler:
    """A built network: embedding, body, and per-position projection.

    Vocabularies and the training window size ride along so that a loaded
    checkpoint is self-contained for prediction and evaluation.
    """

    def __init__(self, config: ModelConfig, rng: Rng | None):
        self.config = config
        self.char_vocab: Vocab | None = None
        self.label_vocab: Vocab | None = None
        self.window: int = 10
        self.dev_accuracy: float | None = None

        self.embedding = ly.EmbeddingLayer(config.char_vocab_size, config.embedding_dim, rng)
        self.blocks: list[ly.ResidualBlock] = []
        self.lstm_stacks: list[dict[str, ly.LstmLayer]] = []
        if config.arch in CONV_ARCHITECTURES:
            mode = ly.CAUSAL if config.arch == "tcn" else ly.ACAUSAL
            in_c = config.embedding_dim
            for d in config.dilations():
                self.blocks.append(
                    ly.ResidualBlock(
                        in_c, config.hidden, config.kernel_size, d,
                        config.dropout, mode, rng,
                    )
                )
                in_c = config.hidden
            feature_dim = config.hidden
        else:
            directions = ("fw", "bw") if config.arch == "bilstm" else ("fw",)
            in_dim = config.embedding_dim
            for _ in range(config.num_layers):
                stack = {d: ly.LstmLayer(in_dim, config.hidden, rng) for d in directions}
                self.lstm_stacks.append(stack)
                in_dim = config.hidden * len(directions)
            feature_dim = in_dim
        self.proj = ly.LinearLayer(feature_dim, config.label_vocab_size, rng)

    def attach_vocabs(self, char_vocab: Vocab, label_vocab: Vocab, window: int = 10) -> None:
        if len(char_vocab) != self.config.char_vocab_size:
            raise ValueError("character vocabulary size does not match the config")
        if len(label_vocab) != self.config.label_vocab_size:
            raise ValueError("label vocabulary size does not match the config")
        self.char_vocab = char_vocab
        self.label_vocab = label_vocab
        self.window = window

    def parameters(self) -> list[tuple[str, Tensor]]:
        """All parameters in canonical (construction) order."""
        named = [("embedding.table", self.embedding.table)]
        for i, block in enumerate(self.blocks):
            named.extend((f"blocks.{i}.{n}", p) for n, p in block.parameters())
        for i, stack in enumerate(self.lstm_stacks):
            for d, layer in stack.items():
                named.extend((f"lstm.{i}.{d}.{n}", p) for n, p in layer.parameters())
        named.extend((f"proj.{n}", p) for n, p in self.proj.parameters())
        return named

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.parameters())

    def forward_batch(
        self,
        ids: np.ndarray,
        training: bool = False,
        rng: Rng | None = None,
        tape: nm.GradTape | None = None,
    ) -> Tensor:
        """ids [B, T] -> logits Tensor [B, T, label_vocab_size]."""
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError(f"expected a non-empty [batch, time] id array, got {ids.shape}")
        if tape is not None:
            for _, p in self.parameters():
                tape.watch(p)
        x = self.embedding.forward(ids)
        p = self.config.dropout
        if self.blocks:
            for block in self.blocks:
                x = block.forward(x, training, rng)
        else:
            for i, stack in enumerate(self.lstm_stacks):
                if i > 0:
                    x = ly.dropout(x, p, training, rng)
                outs = [
                    layer.forward_seq(x, reverse=(direction == "bw"))
                    for direction, layer in stack.items()  # insertion order: fw, bw
                ]
                x = outs[0] if len(outs) == 1 else nm.concat(outs, axis=-1)
        logits = self.proj.forward(x)
        if tape is None:
            nm.ensure_all_finite(logits.data, "logits")
        return logits

    def cast(self, dtype) -> "SequenceLabeler":
        """Structure-sharing copy with parameters cast to ``dtype``.

        Used for the 32-bit inference path; the copy is untracked and must
        not be trained.
        """
        clone = SequenceLabeler(self.config, rng=None)
        ours = dict(self.parameters())
        for name, p in clone.parameters():
            p.data = ours[name].data.astype(dtype)
        clone.char_vocab = self.char_vocab
        clone.label_vocab = self.label_vocab
        clone.window = self.window
        clone.dev_accuracy = self.dev_accuracy
        return clone


def build_model(config: ModelConfig, rng: Rng | None = None) -> SequenceLabeler:
    """Initialize a model; embeddings uniform on [-0.1, 0.1], weights Xavier.

    With ``rng`` omitted, the stream is seeded from ``config.seed``, so a
    fixed (config, seed) pair yields bit-identical parameters.
    """
    return SequenceLabeler(config, rng if rng is not None else Rng(config.seed))


def forward(
    model: SequenceLabeler,
    char_ids,
    training: bool = False,
    rng: Rng | None = None,
    tape: nm.GradTape | None = None,
) -> Tensor:
    """Logits for one id sequence: [T] -> Tensor [T, label_vocab_size]."""
    ids = np.asarray(char_ids)
    if ids.ndim != 1:
        raise ValueError(f"expected a 1-D id sequence, got shape {ids.shape}")
    out = model.forward_batch(ids[None, :], training=training, rng=rng, tape=tape)
    return nm.reshape(out, (ids.shape[0], model.config.label_vocab_size))


def argmax_labels(logits: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties break to the lowest label id (first maximum)."""
    return np.argmax(logits, axis=-1)


def predict(model: SequenceLabeler, char_ids) -> np.ndarray:
    """Most-likely label id per position; ties break to the lowest id."""
    return argmax_labels(forward(model, char_ids).data)


def receptive_field(config: ModelConfig) -> tuple[int, int]:
    """(left, right) extent, in positions, a single output can see.

    Each residual block contributes two dilated convolutions of span
    ``(k - 1) * d``.  Causal stacks see only the left side; acausal stacks
    split the total span symmetrically.  Recurrent architectures have no
    bounded receptive field and are rejected.
    """
    if config.arch not in CONV_ARCHITECTURES:
        raise ValueError(f"receptive field is unbounded for {config.arch!r}")
    total = sum(2 * (config.kernel_size - 1) * d for d in config.dilations())
    if config.arch == "tcn":
        return total, 0
    return total // 2, total // 2


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(Exception):
    """Unreadable, corrupt, or incompatible checkpoint data."""


@dataclass
class Checkpoint:
    """Serializable model state: config, vocabularies, float32 parameters."""

    config: ModelConfig
    char_entries: list[str]
    label_entries: list[str]
    params: dict[str, np.ndarray]
    window: int = 10
    dev_accuracy: float | None = None
    version: int = CHECKPOINT_VERSION


def checkpoint_from_model(model: SequenceLabeler) -> Checkpoint:
    if model.char_vocab is None or model.label_vocab is None:
        raise CheckpointError("model has no vocabularies attached; cannot checkpoint")
    params = {
        name: p.data.astype(np.float32) for name, p in model.parameters()
    }
    return Checkpoint(
        config=replace(model.config),
        char_entries=list(model.char_vocab.entries),
        label_entries=list(model.label_vocab.entries),
        params=params,
        window=model.window,
        dev_accuracy=model.dev_accuracy,
    )


def model_from_checkpoint(cp: Checkpoint) -> SequenceLabeler:
    model = SequenceLabeler(cp.config, rng=None)
    for name, p in model.parameters():
        stored = cp.params.get(name)
        if stored is None:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if stored.shape != p.shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {stored.shape}, expected {p.shape}"
            )
        p.data = stored.astype(np.float64)
    model.attach_vocabs(Vocab(cp.char_entries), Vocab(cp.label_entries), cp.window)
    model.dev_accuracy = cp.dev_accuracy
    return model


def _escape(entry: str) -> str:
    return entry.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def _unescape(entry: str) -> str:
    out, i = [], 0
    while i < len(entry):
        ch = entry[i]
        if ch == "\\" and i + 1 < len(entry):
            nxt = entry[i + 1]
            out.append({"n": "\n", "r": "\r", "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def _metadata_text(cp: Checkpoint) -> str:
    cfg = cp.config
    lines = [
        f"arch={cfg.arch}",
        f"num_layers={cfg.num_layers}",
        f"hidden={cfg.hidden}",
        f"kernel_size={cfg.kernel_size}",
        f"embedding_dim={cfg.embedding_dim}",
        f"dropout={cfg.dropout!r}",
        f"dilation_base={cfg.dilation_base}",
        f"char_vocab_size={cfg.char_vocab_size}",
        f"label_vocab_size={cfg.label_vocab_size}",
        f"seed={cfg.seed}",
        f"window={cp.window}",
    ]
    if cp.dev_accuracy is not None:
        lines.append(f"dev_accuracy={cp.dev_accuracy!r}")
    lines.append(f"char_vocab={len(cp.char_entries)}")
    lines.extend(_escape(e) for e in cp.char_entries)
    lines.append(f"label_vocab={len(cp.label_entries)}")
    lines.extend(_escape(e) for e in cp.label_entries)
    return "\n".join(lines) + "\n"


def _parse_metadata(text: str) -> tuple[ModelConfig, list[str], list[str], int, float | None]:
    lines = text.split("\n")
    fields: dict[str, str] = {}
    char_entries: list[str] = []
    label_entries: list[str] = []
    i = 0
    while i < len(lines):
        line = lines[i]
        i += 1
        if not line and i >= len(lines):
            break
        if "=" not in line:
            raise CheckpointError(f"malformed metadata line {i}: {line!r}")
        key, value = line.split("=", 1)
        if key in ("char_vocab", "label_vocab"):
            count = int(value)
            bucket = char_entries if key == "char_vocab" else label_entries
            if i + count > len(lines):
                raise CheckpointError(f"metadata ends inside the {key} listing")
            bucket.extend(_unescape(lines[j]) for j in range(i, i + count))
            i += count
        else:
            fields[key] = value
    try:
        config = ModelConfig(
            arch=fields["arch"],
            char_vocab_size=int(fields["char_vocab_size"]),
            label_vocab_size=int(fields["label_vocab_size"]),
            num_layers=int(fields["num_layers"]),
            hidden=int(fields["hidden"]),
            kernel_size=int(fields["kernel_size"]),
            embedding_dim=int(fields["embedding_dim"]),
            dropout=float(fields["dropout"]),
            dilation_base=int(fields["dilation_base"]),
            seed=int(fields["seed"]),
        )
        window = int(fields["window"])
    except KeyError as exc:
        raise CheckpointError(f"metadata is missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise CheckpointError(f"malformed metadata value: {exc}") from None
    dev_accuracy = float(fields["dev_accuracy"]) if "dev_accuracy" in fields else None
    if len(char_entries) != config.char_vocab_size:
        raise CheckpointError("character vocabulary listing does not match its size")
    if len(label_entries) != config.label_vocab_size:
        raise CheckpointError("label vocabulary listing does not match its size")
    return config, char_entries, label_entries, window, dev_accuracy


def checkpoint_to_bytes(cp: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(bytes([cp.version]))
    meta = _metadata_text(cp).encode("utf-8")
    buf.write(struct.pack("<Q", len(meta)))
    buf.write(meta)
    for name, arr in cp.params.items():
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<Q", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def _read_exact(buf: io.BytesIO, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return data


def checkpoint_from_bytes(raw: bytes) -> Checkpoint:
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic bytes)")
    version = _read_exact(buf, 1, "format version")[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    meta_len = struct.unpack("<Q", _read_exact(buf, 8, "metadata length"))[0]
    meta = _read_exact(buf, meta_len, "metadata").decode("utf-8")
    config, char_entries, label_entries, window, dev_accuracy = _parse_metadata(meta)

    expected = [name for name, _ in SequenceLabeler(config, rng=None).parameters()]
    params: dict[str, np.ndarray] = {}
    for expected_name in expected:
        header = buf.read(8)
        if len(header) == 0:
            raise CheckpointError(f"checkpoint truncated: missing tensor {expected_name!r}")
        if len(header) != 8:
            raise CheckpointError(f"checkpoint truncated while reading tensor {expected_name!r}")
        name_len = struct.unpack("<Q", header)[0]
        name = _read_exact(buf, name_len, f"tensor name ({expected_name!r})").decode("utf-8")
        if name != expected_name:
            raise CheckpointError(
                f"unexpected tensor {name!r}; canonical order expects {expected_name!r}"
            )
        rank = struct.unpack("<Q", _read_exact(buf, 8, f"rank of {name!r}"))[0]
        dims = tuple(
            struct.unpack("<Q", _read_exact(buf, 8, f"dims of {name!r}"))[0]
            for _ in range(rank)
        )
        count = int(np.prod(dims)) if dims else 1
        values = _read_exact(buf, 4 * count, f"values of {name!r}")
        params[name] = np.frombuffer(values, dtype="<f4").reshape(dims).copy()
    if buf.read(1):
        raise CheckpointError("trailing data after the last tensor")
    return Checkpoint(
        config=config,
        char_entries=char_entries,
        label_entries=label_entries,
        params=params,
        window=window,
        dev_accuracy=dev_accuracy,
        version=version,
    )


def save_checkpoint(cp: Checkpoint, path: str) -> None:
    """Write atomically (temp file + rename) so failures leave no partial file."""
    data = checkpoint_to_bytes(cp)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return checkpoint_from_bytes(raw)


def save_model(model: SequenceLabeler, path: str) -> None:
    save_checkpoint(checkpoint_from_model(model), path)


def load_model(path: str) -> SequenceLabeler:
    return model_from_checkpoint(load_checkpoint(path))
