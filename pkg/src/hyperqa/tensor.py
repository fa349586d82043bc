"""Dense-array engine with reverse-mode differentiation.

Covers exactly what the attention model needs: batched matmul, masked
softmax, layer normalization, dropout, concatenation, embedding lookup,
cross entropy, and an Adam update. Arrays are numpy; each primitive
records an adjoint closure, and ``backward`` replays the tape once in
reverse topological order. Masked softmax assigns masked positions -inf
before normalizing so their probability and their incoming gradients are
exactly zero.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}")


class Tensor:
    """A shaped float array, optionally participating in the gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name!r})"

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray, fresh: bool = False) -> None:
    """Add g into t.grad. ``fresh`` marks arrays the caller just allocated
    for this parent alone; they are stored without a defensive copy."""
    if t.grad is None:
        t.grad = g if fresh else np.array(g)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape.

    Returns g itself when shapes already agree; any other result is a
    freshly allocated array.
    """
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return np.ascontiguousarray(g.reshape(shape))


class Tape:
    """Reverse-topological schedule of the ops reachable from a root tensor."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))
        self.order = order

    def run(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.data)
        for node in reversed(self.order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        # Consume the tape: intermediate grads and closures are dropped,
        # leaf gradients stay.
        for node in self.order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node.grad = None if node is not root else node.grad


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ShapeError("backward(non-scalar loss)", loss.shape)
    if not loss.requires_grad:
        raise ValueError("backward: loss does not require grad")
    Tape(loss).run(loss)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    if b.data.ndim == 2:
        # Stacked rows against one matrix: collapse the batch so BLAS sees a
        # single GEMM instead of one tiny call per leading index.
        k, n = b.data.shape
        a2d = a.data.reshape(-1, k)
        out_data = (a2d @ b.data).reshape(a.data.shape[:-1] + (n,))

        def bwd(g):
            g2d = g.reshape(-1, n)
            if a.requires_grad:
                _accumulate(a, (g2d @ b.data.T).reshape(a.data.shape), fresh=True)
            if b.requires_grad:
                _accumulate(b, a2d.T @ g2d, fresh=True)

        return _make(out_data, (a, b), bwd)

    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ b.data.swapaxes(-1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape), fresh=True)
        if b.requires_grad:
            gb = a.data.swapaxes(-1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape), fresh=True)

    return _make(out_data, (a, b), bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def bwd(g):
        # g is dead after this adjoint, so its buffer may be donated to at
        # most one pass-through parent; any other recipient copies.
        donated = False
        if a.requires_grad:
            ga = _unbroadcast(g, a.data.shape)
            _accumulate(a, ga, fresh=(ga is not g) or not donated)
            donated |= ga is g
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            _accumulate(b, gb, fresh=(gb is not g) or not donated)

    return _make(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape), fresh=True)
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape), fresh=True)

    return _make(out_data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * c, fresh=True)

    return _make(a.data * c, (a,), bwd)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty tensor list")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        # Slices along the concat axis are disjoint views of a dead buffer,
        # safe for each parent to own.
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)], fresh=True)

    return _make(out_data, tuple(tensors), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0), fresh=True)

    return _make(out_data, (a,), bwd)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape), fresh=True)

    return _make(out_data, (a,), bwd)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inverse = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g.transpose(inverse), fresh=True)

    return _make(a.data.transpose(axes), (a,), bwd)


def sum_(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accumulate(a, np.broadcast_to(gg, a.data.shape))

    return _make(out_data, (a,), bwd)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding_lookup: ids outside table of {table.data.shape[0]} rows"
        )
    out_data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            _accumulate(table, gt)

    return _make(out_data, (table,), bwd)


LAYER_NORM_EPS = 1e-6


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then gain and bias."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = centered * inv_std
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accumulate(x, gx)

    return _make(out_data, (x, gain, bias), bwd)


class SoftmaxMask:
    """Validated 0/1 mask with its additive (-inf at masked slots) form.

    Building this once and reusing it across attention blocks avoids
    re-deriving the -inf fill and the fully-masked-row check per call.
    The additive form is cached per dtype so float32 graphs stay float32.
    """

    def __init__(self, mask01: np.ndarray, axis: int = -1):
        mask01 = np.asarray(mask01)
        if not mask01.any(axis=axis).all():
            raise ValueError("masked_softmax: fully-masked row along softmax axis")
        self.mask01 = mask01
        self.axis = axis
        self._additive: dict[np.dtype, np.ndarray] = {}

    def additive_for(self, dtype) -> np.ndarray:
        key = np.dtype(dtype)
        arr = self._additive.get(key)
        if arr is None:
            arr = np.where(self.mask01 > 0, 0.0, -np.inf).astype(key)
            self._additive[key] = arr
        return arr


def masked_softmax(x: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with masked positions at exactly zero probability.

    ``mask`` holds {0,1} (ndarray broadcastable to x, or a prebuilt
    SoftmaxMask). Rows with no unmasked entry are an error; the caller
    must guarantee at least one.
    """
    if not isinstance(mask, SoftmaxMask):
        mask = SoftmaxMask(np.broadcast_to(np.asarray(mask), x.data.shape), axis)
    elif mask.axis != axis:
        raise ValueError(f"masked_softmax: mask built for axis {mask.axis}, got {axis}")
    filled = x.data + mask.additive_for(x.data.dtype)
    filled -= filled.max(axis=axis, keepdims=True)
    probs = np.exp(filled, out=filled)
    probs /= probs.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            inner = (g * probs).sum(axis=axis, keepdims=True)
            _accumulate(x, probs * (g - inner), fresh=True)

    return _make(probs, (x,), bwd)


def dropout(x: Tensor, rate: float, train: bool, seed) -> Tensor:
    """Inverted dropout: train-time scaling by 1/(1-rate), eval is identity.

    ``seed`` is an int or an already-seeded Generator (so one forward pass
    can reuse a single stream across its call sites).
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    dtype = x.data.dtype if x.data.dtype in (np.float32, np.float64) else np.float64
    factor = (rng.random(x.data.shape, dtype=dtype) >= rate).astype(dtype)
    factor *= 1.0 / (1.0 - rate)
    out_data = x.data * factor

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, g * factor, fresh=True)

    return _make(out_data, (x,), bwd)


def cross_entropy_logits(logits: Tensor, target_index) -> Tensor:
    """Mean cross entropy between softmax(logits) and integer target classes.

    Accepts a [C] vector with a scalar target or a [N, C] batch with [N]
    targets; implemented with log-sum-exp for stability.
    """
    targets = np.atleast_1d(np.asarray(target_index, dtype=np.int64))
    data = logits.data if logits.data.ndim == 2 else logits.data[None, :]
    n, c = data.shape
    if targets.shape != (n,):
        raise ShapeError("cross_entropy_logits", logits.shape, targets.shape)
    if targets.min() < 0 or targets.max() >= c:
        raise IndexError(f"cross_entropy_logits: target outside {c} classes")
    shifted = data - data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + data.max(axis=1)
    picked = data[np.arange(n), targets]
    out_data = np.asarray((lse - picked).mean(), dtype=data.dtype)

    def bwd(g):
        if logits.requires_grad:
            probs = np.exp(shifted)
            probs /= probs.sum(axis=1, keepdims=True)
            probs[np.arange(n), targets] -= 1.0
            gl = probs * (float(g) / n)
            _accumulate(logits, gl if logits.data.ndim == 2 else gl[0])

    return _make(out_data, (logits,), bwd)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update, in place; eps sits outside the sqrt."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step[{name}]", p.data.shape, g.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"HQACKPT1"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write a flat binary container: JSON header then row-major payloads."""
    names = list(arrays)
    header = {
        "names": names,
        "shapes": {k: list(arrays[k].shape) for k in names},
        "dtype": {k: str(arrays[k].dtype) for k in names},
        "meta": meta,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name]).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for name in header["names"]:
            shape = tuple(header["shapes"][name])
            dtype = np.dtype(header["dtype"][name])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * dtype.itemsize)
            arrays[name] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    return arrays, header["meta"]
