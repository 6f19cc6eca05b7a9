"""Neural building blocks for the sequence labelers.

Embeddings, dilated 1-D convolutions (causal or acausal), layer
normalization, inverted dropout, a linear projection, a from-scratch LSTM,
and the two-convolution residual block.

Internally every layer works on batched, channels-last activations
``[batch, time, channels]``; that keeps the convolution an im2col matrix
product and the normalization a reduction over the trailing axis.  The
module-level functions at the bottom expose the single-sequence
``[channels, time]`` / ``[time, features]`` views of the same math.

All convolutions preserve sequence length by zero padding:

* causal mode pads ``(k - 1) * d`` on the left only, so position ``t``
  never reads inputs after ``t``;
* acausal mode (odd ``k`` required) pads ``((k - 1) / 2) * d`` on each
  side, reading symmetrically from both directions.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .numerics import Rng, SliceGrad, Tensor

__all__ = [
    "CAUSAL",
    "ACAUSAL",
    "EmbeddingLayer",
    "Conv1dLayer",
    "LayerNormLayer",
    "LinearLayer",
    "LstmLayer",
    "ResidualBlock",
    "dropout",
    "conv1d",
    "layer_norm",
    "lstm_forward",
    "residual_block_forward",
]

CAUSAL = "causal"
ACAUSAL = "acausal"


class EmbeddingLayer:
    """Lookup table mapping vocabulary ids to dense rows."""

    def __init__(self, vocab_size: int, dim: int, rng: Rng | None):
        if rng is None:
            self.table = Tensor(np.zeros((vocab_size, dim)))
        else:
            self.table = nm.uniform_init((vocab_size, dim), -0.1, 0.1, rng)

    def parameters(self):
        return [("table", self.table)]

    def forward(self, ids: np.ndarray) -> Tensor:
        """ids [B, T] of ints -> [B, T, dim]."""
        ids = np.asarray(ids)
        vocab_size, dim = self.table.shape
        if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
            bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
            raise ValueError(f"id {bad} out of range for vocabulary of size {vocab_size}")
        table = self.table
        out = table.data[ids]

        def rule(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.ravel(), g.reshape(-1, dim))
            return (gt,)

        return nm.apply(out, (table,), rule, "embedding")


class Conv1dLayer:
    """Dilated length-preserving 1-D convolution, causal or acausal."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        dilation: int,
        padding_mode: str,
        rng: Rng | None,
    ):
        if padding_mode not in (CAUSAL, ACAUSAL):
            raise ValueError(f"unknown padding mode {padding_mode!r}")
        if padding_mode == ACAUSAL and kernel_size % 2 == 0:
            raise ValueError(
                f"acausal convolution needs an odd kernel size, got {kernel_size}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.dilation = dilation
        self.padding_mode = padding_mode
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel_size))
        else:
            w = nm.xavier_init(
                (out_channels, in_channels * kernel_size), rng
            ).data.reshape(out_channels, in_channels, kernel_size)
        self.weight = Tensor(w)  # [out, in, k]
        self.bias = Tensor(np.zeros(out_channels))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def padding(self) -> tuple[int, int]:
        span = (self.kernel_size - 1) * self.dilation
        if self.padding_mode == CAUSAL:
            return span, 0
        return span // 2, span // 2

    def forward(self, x: Tensor) -> Tensor:
        """x [B, T, in] -> [B, T, out]."""
        weight, bias = self.weight, self.bias
        B, T, C = x.shape
        if C != self.in_channels:
            raise ValueError(
                f"convolution expects {self.in_channels} input channels, got {C}"
            )
        k, d, O = self.kernel_size, self.dilation, self.out_channels
        left, right = self.padding()
        dtype = x.dtype

        xp = np.zeros((B, T + left + right, C), dtype=dtype)
        xp[:, left : left + T, :] = x.data
        # im2col: cols[b, t, j, c] = padded[b, t + j*d, c]
        cols = np.empty((B, T, k, C), dtype=dtype)
        for j in range(k):
            cols[:, :, j, :] = xp[:, j * d : j * d + T, :]
        cols_mat = cols.reshape(B * T, k * C)
        w_mat = np.ascontiguousarray(weight.data.transpose(0, 2, 1), dtype=dtype).reshape(
            O, k * C
        )
        out = cols_mat @ w_mat.T + np.asarray(bias.data, dtype=dtype)
        out = out.reshape(B, T, O)

        def rule(g):
            G = g.reshape(B * T, O)
            grad_b = G.sum(axis=0)
            grad_w = (G.T @ cols_mat).reshape(O, k, C).transpose(0, 2, 1)
            grad_cols = (G @ w_mat).reshape(B, T, k, C)
            gxp = np.zeros((B, T + left + right, C), dtype=g.dtype)
            for j in range(k):
                gxp[:, j * d : j * d + T, :] += grad_cols[:, :, j, :]
            return gxp[:, left : left + T, :].copy(), grad_w, grad_b

        return nm.apply(out, (x, weight, bias), rule, "conv1d")


class LayerNormLayer:
    """Normalizes the channel axis at each position, then scales and shifts."""

    epsilon = 1e-5

    def __init__(self, channels: int):
        self.channels = channels
        self.gamma = Tensor(np.ones(channels))
        self.beta = Tensor(np.zeros(channels))

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def forward(self, x: Tensor) -> Tensor:
        """x [..., channels] -> same shape."""
        if x.shape[-1] != self.channels:
            raise ValueError(
                f"layer norm expects {self.channels} channels, got {x.shape[-1]}"
            )
        gamma, beta, eps = self.gamma, self.beta, self.epsilon
        dtype = x.dtype
        mu = x.data.mean(axis=-1, keepdims=True)
        xc = x.data - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xh = xc * inv
        g_ = gamma.data.astype(dtype)
        out = g_ * xh + beta.data.astype(dtype)

        def rule(g):
            dxh = g * g_
            mean1 = dxh.mean(axis=-1, keepdims=True)
            mean2 = (dxh * xh).mean(axis=-1, keepdims=True)
            dx = inv * (dxh - mean1 - xh * mean2)
            axes = tuple(range(g.ndim - 1))
            return dx, (g * xh).sum(axis=axes), g.sum(axis=axes)

        return nm.apply(out, (x, gamma, beta), rule, "layer_norm")


class LinearLayer:
    """Per-position affine projection ``x @ W.T + b``."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng | None):
        if rng is None:
            w = np.zeros((out_dim, in_dim))
        else:
            w = nm.xavier_init((out_dim, in_dim), rng).data
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(w)
        self.bias = Tensor(np.zeros(out_dim))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x: Tensor) -> Tensor:
        """x [..., in_dim] -> [..., out_dim]."""
        lead = x.shape[:-1]
        flat = nm.reshape(x, (-1, self.in_dim))
        out = nm.add(nm.matmul(flat, nm.transpose(self.weight)), self.bias)
        return nm.reshape(out, lead + (self.out_dim,))


def dropout(x: Tensor, p: float, training: bool, rng: Rng | None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return nm.apply(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


class LstmLayer:
    """Single-direction LSTM with the standard gate equations.

    Gate blocks are stored row-stacked in [input, forget, cell, output]
    order: ``w_ih`` is [4H, in], ``w_hh`` is [4H, H], ``bias`` is [4H].
    Hidden and cell state start at zero.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: Rng | None):
        self.input_size = input_size
        self.hidden_size = hidden_size
        H = hidden_size
        if rng is None:
            self.w_ih = Tensor(np.zeros((4 * H, input_size)))
            self.w_hh = Tensor(np.zeros((4 * H, H)))
        else:
            self.w_ih = nm.xavier_init((4 * H, input_size), rng)
            self.w_hh = nm.xavier_init((4 * H, H), rng)
        self.bias = Tensor(np.zeros(4 * H))

    def parameters(self):
        return [("w_ih", self.w_ih), ("w_hh", self.w_hh), ("bias", self.bias)]

    def forward_seq(self, x: Tensor, reverse: bool = False) -> Tensor:
        """x [B, T, in] -> hidden states [B, T, H], aligned to input order."""
        B, T, C = x.shape
        if C != self.input_size:
            raise ValueError(f"lstm expects input size {self.input_size}, got {C}")
        H = self.hidden_size
        dtype = x.dtype

        # Input projections for every step in one product.
        flat = nm.reshape(x, (B * T, C))
        xw = nm.add(nm.matmul(flat, nm.transpose(self.w_ih)), self.bias)
        xw = nm.reshape(xw, (B, T, 4 * H))
        whh_t = nm.transpose(self.w_hh)

        h = Tensor(np.zeros((B, H), dtype=dtype))
        c = Tensor(np.zeros((B, H), dtype=dtype))
        steps = range(T - 1, -1, -1) if reverse else range(T)
        outputs: list[Tensor | None] = [None] * T
        for t in steps:
            z = nm.add(nm.select(xw, 1, t), nm.matmul(h, whh_t))
            i = nm.sigmoid(nm.narrow(z, 1, 0, H))
            f = nm.sigmoid(nm.narrow(z, 1, H, H))
            g = nm.tanh(nm.narrow(z, 1, 2 * H, H))
            o = nm.sigmoid(nm.narrow(z, 1, 3 * H, H))
            c = nm.add(nm.mul(f, c), nm.mul(i, g))
            h = nm.mul(o, nm.tanh(c))
            outputs[t] = h
        return nm.stack(outputs, axis=1)


class ResidualBlock:
    """Two dilated convolutions with layer norm, relu, and dropout, plus a skip.

    Each branch stage is conv -> layer norm -> relu -> dropout; the skip is
    the identity, or a 1x1 convolution when channel counts differ; a final
    relu follows the sum.  Both convolutions share the block's padding mode
    and dilation.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        dilation: int,
        dropout_p: float,
        padding_mode: str,
        rng: Rng | None,
    ):
        self.dropout_p = dropout_p
        self.conv1 = Conv1dLayer(
            in_channels, out_channels, kernel_size, dilation, padding_mode, rng
        )
        self.norm1 = LayerNormLayer(out_channels)
        self.conv2 = Conv1dLayer(
            out_channels, out_channels, kernel_size, dilation, padding_mode, rng
        )
        self.norm2 = LayerNormLayer(out_channels)
        if in_channels != out_channels:
            self.skip = Conv1dLayer(in_channels, out_channels, 1, 1, padding_mode, rng)
        else:
            self.skip = None

    def parameters(self):
        named = []
        for prefix, layer in (
            ("conv1", self.conv1),
            ("norm1", self.norm1),
            ("conv2", self.conv2),
            ("norm2", self.norm2),
            ("skip", self.skip),
        ):
            if layer is None:
                continue
            named.extend((f"{prefix}.{n}", p) for n, p in layer.parameters())
        return named

    def forward(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        y = dropout(nm.relu(self.norm1.forward(self.conv1.forward(x))), self.dropout_p, training, rng)
        y = dropout(nm.relu(self.norm2.forward(self.conv2.forward(y))), self.dropout_p, training, rng)
        s = self.skip.forward(x) if self.skip is not None else x
        return nm.relu(nm.add(s, y))


# ---------------------------------------------------------------------------
# Single-sequence views of the batched layers
# ---------------------------------------------------------------------------


def _channels_first_in(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 2:
        raise ValueError(f"expected a [channels, time] input, got shape {x.shape}")
    C, T = x.shape
    return nm.transpose(nm.reshape(x, (1, C, T)), (0, 2, 1))


def _channels_first_out(y: Tensor) -> Tensor:
    _, T, O = y.shape
    return nm.reshape(nm.transpose(y, (0, 2, 1)), (O, T))


def conv1d(x, layer: Conv1dLayer) -> Tensor:
    """Convolution on a single ``[channels, time]`` sequence."""
    return _channels_first_out(layer.forward(_channels_first_in(x)))


def layer_norm(x, layer: LayerNormLayer) -> Tensor:
    """Per-time-step channel normalization of a ``[channels, time]`` input."""
    return _channels_first_out(layer.forward(_channels_first_in(x)))


def lstm_forward(inputs, layer: LstmLayer, direction: str = "forward") -> Tensor:
    """Hidden states for a single ``[time, features]`` sequence.

    The backward direction processes the reversed sequence and re-reverses
    its outputs, so results are always aligned to input order.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"unknown direction {direction!r}")
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if x.ndim != 2:
        raise ValueError(f"expected a [time, features] input, got shape {x.shape}")
    T, C = x.shape
    out = layer.forward_seq(nm.reshape(x, (1, T, C)), reverse=direction == "backward")
    return nm.reshape(out, (T, layer.hidden_size))


def residual_block_forward(
    x, block: ResidualBlock, training: bool = False, rng: Rng | None = None
) -> Tensor:
    """Residual block on a single ``[channels, time]`` sequence."""
    return _channels_first_out(block.forward(_channels_first_in(x), training, rng))
