"""Dense tensors with reverse-mode automatic differentiation.

This module is the numeric substrate for the whole engine: a ``Tensor`` type
backed by numpy arrays (float64 for training and checking, float32 only on
the inference path), a gradient tape recording operations in execution
order, the Adam optimizer, and seeded initializers.

The tape is rebuilt on every forward pass (define-by-run).  Leaf tensors
(parameters, or inputs under a gradient check) are registered with
``GradTape.watch``; any operation touching a watched tensor records a
backward rule on the tape.  ``backward`` replays the tape in strict reverse
append order, which is a valid topological order by construction.

Randomness comes from ``Rng``, a thin wrapper over numpy's PCG64 generator;
a fixed seed yields a bit-identical stream on a given platform.

A tape and the tensors recorded on it belong to one worker at a time.
Independent tapes may run in parallel; read-only tensors (frozen weights)
may be shared freely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tensor",
    "GradTape",
    "SliceGrad",
    "apply",
    "backward",
    "AdamState",
    "adam_step",
    "Rng",
    "uniform_init",
    "xavier_init",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "relu",
    "tanh",
    "sigmoid",
    "tensor_sum",
    "stack",
    "concat",
    "narrow",
    "select",
]


class NonFiniteError(ArithmeticError):
    """Raised when NaN or Inf shows up in a forward value or a gradient."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    # One-pass probe: a sum over real finite values is finite unless the
    # array holds NaN/Inf (or is within one addition of overflow, in which
    # case aborting is the right call anyway).
    if arr.size and not math.isfinite(float(np.sum(arr))):
        raise NonFiniteError(f"non-finite values in {what}")


def ensure_all_finite(arr: np.ndarray, what: str) -> None:
    """Strict elementwise NaN/Inf check, used at pass boundaries."""
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense n-dimensional array, optionally tracked on a gradient tape.

    ``data`` is row-major (C order) numpy storage.  ``grad_id`` is the
    handle of the tape node that produced this tensor, or None when the
    tensor is not tracked.
    """

    __slots__ = ("data", "tape", "grad_id")

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.tape: GradTape | None = None
        self.grad_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype))

    def __repr__(self) -> str:
        tag = f", grad_id={self.grad_id}" if self.grad_id is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)


@dataclass
class SliceGrad:
    """Gradient contribution confined to an index of the parent tensor.

    Lets a slicing op accumulate into ``grad[key] += value`` instead of
    materializing a full-size zero array per slice.
    """

    key: tuple
    value: np.ndarray


class _Node:
    __slots__ = ("parents", "rule", "label", "shape", "dtype")

    def __init__(self, parents, rule, label, shape, dtype):
        self.parents = parents  # tuple of parent node ids (None for untracked)
        self.rule = rule  # callable(grad_out) -> contributions, None for leaves
        self.label = label
        self.shape = shape
        self.dtype = dtype


class GradTape:
    """Append-only record of operations; append order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaf_ids: list[int] = []
        self._watched: list[Tensor] = []
        self.active = True

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, tensor: Tensor) -> int:
        """Register a leaf whose gradient ``backward`` must report."""
        if not self.active:
            raise RuntimeError("cannot watch tensors on a finished tape")
        nid = len(self.nodes)
        self.nodes.append(_Node((), None, "leaf", tensor.shape, tensor.dtype))
        self.leaf_ids.append(nid)
        tensor.tape = self
        tensor.grad_id = nid
        self._watched.append(tensor)
        return nid

    def record(self, out_data: np.ndarray, parents: tuple, rule, label: str) -> Tensor:
        if not self.active:
            raise RuntimeError("cannot record on a finished tape")
        _check_finite(out_data, f"forward output of {label}")
        nid = len(self.nodes)
        self.nodes.append(_Node(parents, rule, label, out_data.shape, out_data.dtype))
        out = Tensor(out_data)
        out.tape = self
        out.grad_id = nid
        return out

    def finish(self) -> None:
        """Deactivate the tape and unbind the leaves it watched."""
        for t in self._watched:
            t.tape = None
            t.grad_id = None
        self._watched.clear()
        self.active = False


def _live_tape(*tensors) -> GradTape | None:
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None and t.tape.active:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different gradient tapes")
    return tape


def apply(out_data: np.ndarray, inputs, rule, label: str) -> Tensor:
    """Produce an op result, recording ``rule`` if any input is tracked.

    ``rule(grad_out)`` must return one contribution per input: a fresh
    ndarray shaped like that input, a SliceGrad, or None.  Contributions may
    alias the consumed ``grad_out`` buffer; the backward engine visits each
    node exactly once in reverse order, so consumed buffers are dead.
    """
    tape = _live_tape(*inputs)
    if tape is None:
        return Tensor(out_data)
    parents = tuple(
        t.grad_id if (isinstance(t, Tensor) and t.tape is tape) else None for t in inputs
    )
    return tape.record(out_data, parents, rule, label)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply(a.data + b.data, (a, b), rule, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply(a.data - b.data, (a, b), rule, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return apply(a.data * b.data, (a, b), rule, "mul")


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return apply(-x.data, (x,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Standard 2-D matrix product; raises on inner-dimension mismatch."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return apply(a.data @ b.data, (a, b), rule, "matmul")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return apply(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def rule(g):
        return (g.transpose(inv) if inv is not None else g.T,)

    return apply(x.data.transpose(axes), (x,), rule, "transpose")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0
    return apply(out, (x,), lambda g: (g * mask,), "relu")


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    out = np.tanh(x.data)
    return apply(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # Stable in both tails.
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    out[~pos] = e / (1.0 + e)
    return apply(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)
    shape, dtype = x.shape, x.dtype
    return apply(
        np.asarray(x.data.sum(), dtype=dtype),
        (x,),
        lambda g: (np.full(shape, g, dtype=dtype),),
        "sum",
    )


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def rule(g):
        moved = np.moveaxis(g, axis, 0)
        return tuple(moved[i] for i in range(len(tensors)))

    return apply(out, tensors, rule, "stack")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def rule(g):
        pieces = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(pieces)

    return apply(out, tensors, rule, "concat")


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice ``x[..., start:start+length, ...]`` along ``axis``."""
    x = _as_tensor(x)
    key = tuple(
        slice(start, start + length) if d == axis else slice(None) for d in range(x.ndim)
    )
    return apply(x.data[key].copy(), (x,), lambda g: (SliceGrad(key, g),), "narrow")


def select(x, axis: int, index: int) -> Tensor:
    """Index along ``axis``, dropping that axis."""
    x = _as_tensor(x)
    key = tuple(index if d == axis else slice(None) for d in range(x.ndim))
    return apply(x.data[key].copy(), (x,), lambda g: (SliceGrad(key, g),), "select")


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward(loss: Tensor, tape: GradTape) -> dict[int, Tensor]:
    """Reverse-mode sweep from a scalar loss over the whole tape.

    Returns a gradient tensor for every watched leaf, keyed by its handle;
    leaves the loss never touched get zero gradients.  The tape is finished
    (deactivated, leaves unbound) on the way out, including on error.
    """
    if loss.tape is not tape or loss.grad_id is None:
        raise ValueError("loss is not recorded on this tape")
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    try:
        grads: list[np.ndarray | None] = [None] * len(tape.nodes)
        grads[loss.grad_id] = np.ones_like(loss.data)
        for nid in range(loss.grad_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = tape.nodes[nid]
            _check_finite(g, f"gradient of {node.label}")
            if node.rule is not None:
                contribs = node.rule(g)
                for pid, contrib in zip(node.parents, contribs):
                    if pid is None or contrib is None:
                        continue
                    acc = grads[pid]
                    if isinstance(contrib, SliceGrad):
                        if acc is None:
                            parent = tape.nodes[pid]
                            acc = np.zeros(parent.shape, dtype=parent.dtype)
                            grads[pid] = acc
                        acc[contrib.key] += contrib.value
                    elif acc is None:
                        grads[pid] = contrib
                    else:
                        acc += contrib
            if node.rule is not None:
                grads[nid] = None  # consumed; leaves keep theirs for collection
        out: dict[int, Tensor] = {}
        for nid in tape.leaf_ids:
            g = grads[nid]
            node = tape.nodes[nid]
            out[nid] = Tensor(g if g is not None else np.zeros(node.shape, node.dtype))
        return out
    finally:
        tape.finish()


# ---------------------------------------------------------------------------
# Adam optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter.

    Moments are zero-initialized on a parameter's first update; ``t``
    increments by exactly one per ``adam_step``.
    """

    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState):
    """One Adam update with bias correction, applied in place.

    ``params`` maps names to Tensors, ``grads`` maps the same names to
    gradient Tensors or arrays.  Returns ``(params, state)``.
    """
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}"
            )
        _check_finite(g, f"gradient of parameter {name!r}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name!r}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# ---------------------------------------------------------------------------
# Seeded randomness and initializers
# ---------------------------------------------------------------------------


class Rng:
    """Deterministic random stream (numpy PCG64 behind a 64-bit seed)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, shape, low: float, high: float) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def split(self, salt: int) -> "Rng":
        """Independent child stream, reproducible from (seed, salt)."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + salt) % (1 << 63))


def uniform_init(shape, low: float, high: float, rng: Rng) -> Tensor:
    """Uniform initialization on ``[low, high]``; reproducible per seed."""
    if low > high:
        raise ValueError(f"uniform_init bounds reversed: low={low} > high={high}")
    return Tensor(rng.uniform(shape, low, high))


def xavier_init(shape, rng: Rng, magnitude: float = 3.0) -> Tensor:
    """Scaled-uniform initialization for a 2-D weight ``[fan_out, fan_in]``.

    Samples from [-b, b] with b = sqrt(magnitude * 2 / (fan_in + fan_out));
    the default magnitude of 3 makes b the classic sqrt(6 / (fan_in +
    fan_out)) bound.
    """
    if len(shape) != 2:
        raise ValueError(f"xavier_init expects a 2-D shape, got {tuple(shape)}")
    fan_out, fan_in = shape
    bound = math.sqrt(magnitude * 2.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(shape, -bound, bound))
