"""Small float64 tensor library with reverse-mode differentiation.

Only the operations the segmentation network needs are provided. Layers are
plain classes holding named parameter tensors; ``DC`` and ``DMLP`` keep the
density-assignment rule that an output subsection ``d`` only reads input
subsections ``d`` and sparser.
"""
from __future__ import annotations

import contextlib
import hashlib
import json
import struct
import threading
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import AssignmentError, ContractError, IoError, ParseError, ShapeError

LEAKY_SLOPE = 0.2
LN_EPS = 1e-6

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "locked", "is_param", "name",
                 "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.locked = False
        self.is_param = False
        self.name = name
        self._parents = _parents
        self._backward = _backward

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    # -- graph construction -------------------------------------------------
    @staticmethod
    def _make(data, parents, backward):
        track = grad_enabled() and any(p.requires_grad for p in parents)
        if not track:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = _wrap(other)
        a, b = self, other
        return Tensor._make(a.data + b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __mul__(self, other):
        other = _wrap(other)
        a, b = self, other
        return Tensor._make(a.data * b.data, (a, b),
                            lambda g: (_unbroadcast(g * b.data, a.shape),
                                       _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        a, b = self, other
        return Tensor._make(a.data / b.data, (a, b),
                            lambda g: (_unbroadcast(g / b.data, a.shape),
                                       _unbroadcast(-g * a.data / b.data ** 2, b.shape)))

    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self, other
        if b.ndim != 2:
            raise ShapeError("right operand of @ must be a matrix")
        if a.shape[-1] != b.shape[0]:
            raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")

        def back(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return Tensor._make(a.data @ b.data, (a, b), back)

    def __getitem__(self, key):
        a = self
        basic = _is_basic_index(key)

        def back(g):
            out = np.zeros_like(a.data)
            if basic:
                out[key] = g
            else:
                np.add.at(out, key, g)
            return (out,)

        return Tensor._make(a.data[key], (a,), back)

    def reshape(self, *shape):
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    def sum(self, axis=None, keepdims=False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)


def _is_basic_index(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in items)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def concat(tensors: Sequence[Tensor], axis=-1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = x.data > 0
    return Tensor._make(np.where(pos, x.data, slope * x.data), (x,),
                        lambda g: (np.where(pos, g, slope * g),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._make(out, (x,), lambda g: (g * sig,))


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def back(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(xhat * gamma.data + beta.data, (x, gamma, beta), back)


def gather_rows(x: Tensor, idx) -> Tensor:
    """``x[idx]`` along the first axis; ``idx`` may be any integer array."""
    idx = np.asarray(idx, dtype=np.int64)
    return x[idx]


def softmax_xent(logits: Tensor, labels, class_weights=None, mask=None) -> Tensor:
    """Mean over masked rows of ``w[y] * -log softmax(logits)[y]``.

    An empty mask yields a zero loss whose gradient is zero everywhere.
    """
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ShapeError(f"labels must be ({n},), got {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ShapeError("label out of range")
    w = np.ones(k) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    m = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    count = int(m.sum())
    if count == 0:
        return Tensor._make(np.zeros(()), (logits,), lambda g: (np.zeros_like(logits.data),))
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    nll = lse - z[rows, labels]
    coef = np.where(m, w[labels], 0.0) / count
    loss = float((coef * nll).sum())

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (g * coef[:, None] * p,)

    return Tensor._make(np.array(loss), (logits,), back)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

class Module:
    """Anything with named parameters. Children are found by attribute walk."""

    def named_parameters(self, prefix="") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.is_param:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def lock(self):
        for p in self.parameters():
            p.locked = True
            p.requires_grad = False
            p.grad = None

    def unlock(self):
        for p in self.parameters():
            p.locked = False
            p.requires_grad = True

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def param(data) -> Tensor:
    t = Tensor(data, requires_grad=True)
    t.is_param = True
    return t


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class FC(Module):
    def __init__(self, n_in: int, n_out: int, rng, bias=True):
        self.n_in, self.n_out = n_in, n_out
        self.W = param(_uniform(rng, n_in, (n_in, n_out)))
        self.b = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"FC expects {self.n_in} inputs, got {x.shape[-1]}")
        y = x @ self.W
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, width: int):
        self.gamma = param(np.ones(width))
        self.beta = param(np.zeros(width))

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """``leaky_relu(LN(FC(x)))``."""

    def __init__(self, n_in: int, n_out: int, rng):
        self.fc = FC(n_in, n_out, rng)
        self.ln = LayerNorm(n_out)

    def __call__(self, x):
        return leaky_relu(self.ln(self.fc(x)))


# --------------------------------------------------------------------------
# density-assigned layers
# --------------------------------------------------------------------------

def offsets(layout: Sequence[int]) -> np.ndarray:
    return np.r_[0, np.cumsum(layout)].astype(int)


def check_layout(x: Tensor, layout: Sequence[int]):
    if x.shape[-1] != sum(layout):
        raise ShapeError(f"feature width {x.shape[-1]} does not match layout {tuple(layout)}")


def split_subsections(x: Tensor, layout: Sequence[int]) -> List[Tensor]:
    off = offsets(layout)
    return [x[..., off[i]:off[i + 1]] for i in range(len(layout))]


def merge_subsections(parts: Sequence[Tensor], layouts: Sequence[Sequence[int]], n_sub: int):
    """Concatenate several assigned tensors subsection by subsection.

    The result has ``n_sub`` subsections; any subsections of an input beyond
    ``n_sub`` are folded into the last one, which every output may read.
    Returns ``(tensor, layout)``.
    """
    pieces = [[] for _ in range(n_sub)]
    widths = [0] * n_sub
    for x, layout in zip(parts, layouts):
        check_layout(x, layout)
        for j, block in enumerate(split_subsections(x, layout)):
            slot = min(j, n_sub - 1)
            pieces[slot].append(block)
            widths[slot] += layout[j]
    flat = [b for group in pieces for b in group]
    return concat(flat, axis=-1), tuple(widths)


def _input_span(layout_in, d, allocation):
    off = offsets(layout_in)
    start = 0 if allocation == "none" else off[d]
    return start, off[-1]


class _Assigned(Module):
    def __init__(self, layout_in, layout_out, rng, allocation, block):
        layout_in, layout_out = tuple(layout_in), tuple(layout_out)
        if len(layout_out) > len(layout_in):
            raise AssignmentError(
                f"cannot produce {len(layout_out)} subsections from {len(layout_in)}")
        if allocation not in ("full", "none"):
            raise ValueError(f"unknown allocation {allocation!r}")
        self.layout_in, self.layout_out, self.allocation = layout_in, layout_out, allocation
        self.blocks = []
        for d, width in enumerate(layout_out):
            start, stop = _input_span(layout_in, d, allocation)
            self.blocks.append(block(stop - start, width, rng))

    def __call__(self, x: Tensor) -> Tensor:
        check_layout(x, self.layout_in)
        outs = []
        for d, blk in enumerate(self.blocks):
            start, stop = _input_span(self.layout_in, d, self.allocation)
            outs.append(blk(x[..., start:stop]))
        return concat(outs, axis=-1)

    @property
    def a_in(self):
        return len(self.layout_in)

    @property
    def a_out(self):
        return len(self.layout_out)


class DC(_Assigned):
    """Density-connected layer: one FC per output subsection over inputs ``d..a_in``."""

    def __init__(self, layout_in, layout_out, rng, allocation="full"):
        super().__init__(layout_in, layout_out, rng, allocation, FC)

    def dense_weight(self) -> np.ndarray:
        """The implied (T_in, T_out) weight matrix with its zero blocks."""
        off_out = offsets(self.layout_out)
        W = np.zeros((sum(self.layout_in), sum(self.layout_out)))
        for d, blk in enumerate(self.blocks):
            start, stop = _input_span(self.layout_in, d, self.allocation)
            W[start:stop, off_out[d]:off_out[d + 1]] = blk.W.data
        return W

    def dense_bias(self) -> np.ndarray:
        return np.concatenate([blk.b.data for blk in self.blocks])


class DMLP(_Assigned):
    """Density-assigned MLP: an independent MLP (own FC, LN, activation) per output subsection."""

    def __init__(self, layout_in, layout_out, rng, allocation="full"):
        super().__init__(layout_in, layout_out, rng, allocation, MLP)


def attention_score(x: Tensor, score_layer, layout: Optional[Sequence[int]] = None) -> Tensor:
    """Gate ``x`` by a softmax of ``score_layer(x)`` over the feature axis.

    With a layout the softmax runs inside each subsection separately, so the
    gate never lets a denser subsection influence a sparser one.
    """
    scores = score_layer(x)
    if scores.shape != x.shape:
        raise ShapeError(f"score layer must be square, got {x.shape} -> {scores.shape}")
    if layout is None or len(layout) == 1:
        return x * softmax(scores, axis=-1)
    gates = [softmax(s, axis=-1) for s in split_subsections(scores, layout)]
    return x * concat(gates, axis=-1)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = b"HDVCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: Dict[str, Tensor], meta: Optional[dict] = None) -> str:
    """Write named float64 tensors plus lock flags; returns the file's SHA-256.

    Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON
    header (sorted keys), then each tensor's little-endian float64 bytes in
    header order.
    """
    entries = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        t = tensors[name]
        data = np.ascontiguousarray(t.data, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "locked": bool(t.locked),
                        "offset": offset, "nbytes": data.nbytes})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    payload = CKPT_MAGIC + struct.pack("<IQ", CKPT_VERSION, len(header)) + header + b"".join(blobs)
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path):
    """Returns ``(arrays, locked, meta)``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if raw[:8] != CKPT_MAGIC:
        raise ParseError("not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    body = raw[20 + hlen:]
    arrays, locked = {}, {}
    for e in header["tensors"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).copy()
        locked[e["name"]] = e["locked"]
    return arrays, locked, header["meta"]


def load_into(module: Module, arrays: Dict[str, np.ndarray], locked: Optional[dict] = None,
              strict=True):
    params = module.state_dict()
    missing = [k for k in params if k not in arrays]
    if strict and missing:
        raise ContractError(f"checkpoint lacks {missing[:5]}")
    for name, t in params.items():
        if name in arrays:
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: checkpoint {arrays[name].shape} vs model {t.shape}")
            t.data = arrays[name].copy()
            if locked is not None and locked.get(name):
                t.locked = True
                t.requires_grad = False
