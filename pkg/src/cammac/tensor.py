"""Dense numpy-backed tensors with a reverse-mode gradient tape.

Every differentiable operation is a :class:`Function` subclass with a
``forward`` and a ``backward`` static method.  Subclasses register
themselves by ``name`` in :data:`OPS`; the gradient-check suite iterates that
registry, so a new op without a check case is caught by the tests.

Recording only happens inside an active :class:`GradTape`::

    with GradTape() as tape:
        loss = model(...)
    backward(loss)          # populates .grad on every parameter leaf

Outside a tape, ops run in inference mode and record nothing.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

# Substituted for masked logits before a softmax; the softmax maps it to 0.
MASK_SENTINEL = -1e30
_MASKED_BELOW = MASK_SENTINEL / 2

OPS: dict[str, type["Function"]] = {}


class TensorError(Exception):
    pass


class ShapeError(TensorError, ValueError):
    pass


class NonFiniteError(TensorError, FloatingPointError):
    def __init__(self, op: str):
        super().__init__(f"op '{op}' produced NaN/Inf values")
        self.op = op


class DegenerateMaskError(TensorError, ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "grad_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if dtype is None and not (isinstance(data, np.ndarray) and data.dtype.kind == "f"):
            dtype = np.float64
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.grad_id: int | None = None
        self._tape: GradTape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return Add.apply(self, self._lift(other))

    def __radd__(self, other):
        return Add.apply(self._lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other):
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other):
        return Mul.apply(self._lift(other), self)

    def __neg__(self):
        return Mul.apply(self, self._lift(-1.0))

    def __matmul__(self, other):
        return MatMul.apply(self, other)

    def __getitem__(self, index):
        return Index.apply(self, index=index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def sum(self, axis=None, keepdims: bool = False):
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self):
        return Sum.apply(self) * (1.0 / self.size)

    def relu(self):
        return Relu.apply(self)

    def sigmoid(self):
        return Sigmoid.apply(self)

    def tanh(self):
        return Tanh.apply(self)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


class _Node:
    __slots__ = ("fn", "ctx", "inputs", "out")

    def __init__(self, fn, ctx, inputs, out):
        self.fn = fn
        self.ctx = ctx
        self.inputs = inputs
        self.out = out


_local = threading.local()


def active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Append-only record of operations; node inputs always precede the node."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaves: list[Tensor] = []
        self._size = 0

    def __enter__(self) -> "GradTape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def _slot(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t.grad_id
        if not t.requires_grad:
            return None
        t._tape = self
        t.grad_id = self._size
        self._size += 1
        self.leaves.append(t)
        return t.grad_id

    def record(self, fn, ctx, inputs: Sequence[Tensor], out: Tensor) -> None:
        slots = [self._slot(t) for t in inputs]
        if all(s is None for s in slots):
            return
        out._tape = self
        out.grad_id = self._size
        self._size += 1
        self.nodes.append(_Node(fn, ctx, slots, out.grad_id))

    def clear(self) -> None:
        for leaf in self.leaves:
            leaf._tape = None
            leaf.grad_id = None
        self.nodes = []
        self.leaves = []
        self._size = 0


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar loss.

    Sets ``.grad`` on every leaf that took part in the recorded graph (zeros
    for leaves the loss does not depend on) and clears the tape.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TensorError("loss was not computed under an active GradTape")
    grads: list[np.ndarray | None] = [None] * tape._size
    grads[loss.grad_id] = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = grads[node.out]
        if g is None:
            continue
        grads[node.out] = None
        in_grads = node.fn.backward(node.ctx, g)
        for slot, gi in zip(node.inputs, in_grads):
            if slot is None or gi is None:
                continue
            prev = grads[slot]
            grads[slot] = gi if prev is None else prev + gi
    for leaf in tape.leaves:
        g = grads[leaf.grad_id]
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype)
        assert leaf.grad.shape == leaf.shape
    tape.clear()


class Ctx:
    pass


class Function:
    name = ""

    def __init_subclass__(cls, **kw):
        super().__init_subclass__(**kw)
        if cls.name:
            OPS[cls.name] = cls

    @staticmethod
    def forward(ctx, *arrays, **kw) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kw) -> Tensor:
        ctx = Ctx()
        out = cls.forward(ctx, *[t.data for t in inputs], **kw)
        if not np.isfinite(out).all():
            raise NonFiniteError(cls.name)
        result = Tensor(out)
        tape = active_tape()
        if tape is not None:
            tape.record(cls, ctx, inputs, result)
        return result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_check(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("add", a, b)
        ctx.shapes = a.shape, b.shape
        return a + b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _unbroadcast(g, sa), _unbroadcast(g, sb)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("sub", a, b)
        ctx.shapes = a.shape, b.shape
        return a - b

    @staticmethod
    def backward(ctx, g):
        sa, sb = ctx.shapes
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        _broadcast_check("mul", a, b)
        ctx.a, ctx.b = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        return _unbroadcast(g * ctx.b, ctx.a.shape), _unbroadcast(g * ctx.a, ctx.b.shape)


class Relu(Function):
    name = "relu"

    @staticmethod
    def forward(ctx, a):
        ctx.pos = a > 0
        return np.where(ctx.pos, a, 0).astype(a.dtype, copy=False)

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.pos,)


class Sigmoid(Function):
    name = "sigmoid"

    @staticmethod
    def forward(ctx, a):
        ctx.out = _sigmoid(a)
        return ctx.out

    @staticmethod
    def backward(ctx, g):
        y = ctx.out
        return (g * y * (1 - y),)


class Tanh(Function):
    name = "tanh"

    @staticmethod
    def forward(ctx, a):
        ctx.out = np.tanh(a)
        return ctx.out

    @staticmethod
    def backward(ctx, g):
        y = ctx.out
        return (g * (1 - y * y),)


_ELEMENTWISE = {"add": Add, "sub": Sub, "mul": Mul, "relu": Relu, "sigmoid": Sigmoid, "tanh": Tanh}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    if op in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return fn.apply(a, a._lift(b))
    return fn.apply(a)


class MatMul(Function):
    """Batched matrix product with numpy ``matmul`` semantics (ranks >= 2)."""

    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        try:
            out = a @ b
        except ValueError:
            raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
        ctx.a, ctx.b = a, b
        return out

    @staticmethod
    def backward(ctx, g):
        a, b = ctx.a, ctx.b
        if b.ndim == 2:
            # shared weight matrix: fold leading dims into one GEMM
            ga = _mm(g, b.T)
            gb = _mm(a.reshape(-1, a.shape[-1]).T, g.reshape(-1, g.shape[-1]))
            return ga, gb
        ga = _mm(g, np.swapaxes(b, -1, -2))
        gb = _mm(np.swapaxes(a, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _mm(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # numpy's matmul is slow for outer products; broadcasting is exact there
    if x.shape[-1] == 1:
        return x * y
    return x @ y


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


class MaskedFill(Function):
    """Replace positions where ``keep`` is False with :data:`MASK_SENTINEL`."""

    name = "masked_fill"

    @staticmethod
    def forward(ctx, a, keep):
        keep = np.broadcast_to(np.asarray(keep, dtype=bool), a.shape)
        ctx.keep = keep
        return np.where(keep, a, np.asarray(MASK_SENTINEL, dtype=a.dtype))

    @staticmethod
    def backward(ctx, g):
        return (g * ctx.keep,)


def masked_fill(a: Tensor, keep) -> Tensor:
    return MaskedFill.apply(a, keep=keep)


class SoftmaxLastdim(Function):
    name = "softmax"

    @staticmethod
    def forward(ctx, a):
        if a.ndim == 0 or a.shape[-1] < 1:
            raise ShapeError(f"softmax: last dimension must be >= 1, got shape {a.shape}")
        masked = a <= _MASKED_BELOW
        if masked.all(axis=-1).any():
            raise DegenerateMaskError("softmax: every entry of a slice is masked")
        z = a - a.max(axis=-1, keepdims=True)
        e = np.exp(z)
        e[masked] = 0.0
        out = e / e.sum(axis=-1, keepdims=True)
        ctx.out = out
        return out

    @staticmethod
    def backward(ctx, g):
        y = ctx.out
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def softmax_lastdim(a: Tensor) -> Tensor:
    return SoftmaxLastdim.apply(a)


class ConcatLastdim(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *parts):
        lead = parts[0].shape[:-1]
        for p in parts[1:]:
            if p.shape[:-1] != lead:
                raise ShapeError(f"concat: leading dims differ, {parts[0].shape} vs {p.shape}")
        ctx.splits = np.cumsum([p.shape[-1] for p in parts])[:-1]
        return np.concatenate(parts, axis=-1)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.split(g, ctx.splits, axis=-1))


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat: no parts")
    return ConcatLastdim.apply(*parts)


class Stack(Function):
    name = "stack"

    @staticmethod
    def forward(ctx, *parts, axis=0):
        for p in parts[1:]:
            if p.shape != parts[0].shape:
                raise ShapeError(f"stack: shapes differ, {parts[0].shape} vs {p.shape}")
        ctx.axis = axis
        ctx.n = len(parts)
        return np.stack(parts, axis=axis)

    @staticmethod
    def backward(ctx, g):
        return tuple(np.take(g, i, axis=ctx.axis) for i in range(ctx.n))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*parts, axis=axis)


class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape):
        ctx.shape = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx.shape),)


class SwapLast(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, a):
        if a.ndim < 2:
            raise ShapeError(f"transpose needs rank >= 2, got shape {a.shape}")
        return np.swapaxes(a, -1, -2).copy()

    @staticmethod
    def backward(ctx, g):
        return (np.swapaxes(g, -1, -2),)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return SwapLast.apply(a)


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis=None, keepdims=False):
        ctx.shape = a.shape
        ctx.axis = axis
        ctx.keepdims = keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    @staticmethod
    def backward(ctx, g):
        if ctx.axis is not None and not ctx.keepdims:
            g = np.expand_dims(g, ctx.axis)
        return (np.broadcast_to(g, ctx.shape).copy(),)


class Index(Function):
    """Copying ``a[index]``; integer-array indices scatter-add in backward."""

    name = "index"

    @staticmethod
    def forward(ctx, a, index):
        ctx.shape, ctx.dtype, ctx.index = a.shape, a.dtype, index
        return np.array(a[index])

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=ctx.dtype)
        np.add.at(out, ctx.index, g)
        return (out,)


class Embedding(Function):
    """Row gather ``table[ids]`` for an integer id array of any shape."""

    name = "embedding"

    @staticmethod
    def forward(ctx, table, ids):
        ids = np.asarray(ids)
        ctx.ids, ctx.shape = ids, table.shape
        return table[ids]

    @staticmethod
    def backward(ctx, g):
        out = np.zeros(ctx.shape, dtype=g.dtype)
        np.add.at(out, ctx.ids.reshape(-1), g.reshape(-1, ctx.shape[-1]))
        return (out,)


def embedding(table: Tensor, ids) -> Tensor:
    return Embedding.apply(table, ids=ids)


class CrossEntropy(Function):
    """Mean negative log-likelihood of integer targets under softmax(logits)."""

    name = "cross_entropy"

    @staticmethod
    def forward(ctx, logits, targets):
        targets = np.asarray(targets)
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        n = logits.shape[0]
        ctx.probs = np.exp(logp)
        ctx.targets = targets
        return np.asarray(-logp[np.arange(n), targets].mean())

    @staticmethod
    def backward(ctx, g):
        grad = ctx.probs.copy()
        n = grad.shape[0]
        grad[np.arange(n), ctx.targets] -= 1.0
        return (grad * (g / n),)


def cross_entropy(logits: Tensor, targets) -> Tensor:
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [N, classes] logits, got {logits.shape}")
    return CrossEntropy.apply(logits, targets=targets)


class GRUScan(Function):
    """Recurrent part of a GRU over a padded batch.

    ``gx`` [B, L, 3H] holds the input projections (reset, update, candidate
    blocks).  Positions with ``mask == 0`` leave the hidden state untouched,
    so the forward direction carries the last valid state to the end and the
    reverse direction stays at zero until it reaches real tokens.
    Returns all hidden states [B, L, H] in input order.
    """

    name = "gru"

    @staticmethod
    def forward(ctx, gx, wh, bh, mask, reverse=False):
        B, L, H3 = gx.shape
        H = H3 // 3
        if wh.shape != (H, H3) or bh.shape != (H3,):
            raise ShapeError(f"gru: weights {wh.shape}/{bh.shape} do not match inputs {gx.shape}")
        m = np.asarray(mask, dtype=gx.dtype)[:, :, None]
        order = range(L - 1, -1, -1) if reverse else range(L)
        h = np.zeros((B, H), dtype=gx.dtype)
        hs = np.empty((B, L, H), dtype=gx.dtype)
        saved = []
        for t in order:
            gh = h @ wh + bh
            x = gx[:, t]
            r = _sigmoid(x[:, :H] + gh[:, :H])
            z = _sigmoid(x[:, H:2 * H] + gh[:, H:2 * H])
            n = np.tanh(x[:, 2 * H:] + r * gh[:, 2 * H:])
            h_new = (1 - z) * n + z * h
            saved.append((t, h, r, z, n, gh[:, 2 * H:]))
            h = m[:, t] * h_new + (1 - m[:, t]) * h
            hs[:, t] = h
        ctx.saved, ctx.wh, ctx.m, ctx.shape = saved, wh, m, gx.shape
        return hs

    @staticmethod
    def backward(ctx, g):
        B, L, H3 = ctx.shape
        H = H3 // 3
        wh, m = ctx.wh, ctx.m
        dgx = np.zeros(ctx.shape, dtype=g.dtype)
        dwh = np.zeros_like(wh)
        dbh = np.zeros(H3, dtype=g.dtype)
        dh = np.zeros((B, H), dtype=g.dtype)
        for t, h_prev, r, z, n, ghn in reversed(ctx.saved):
            dh = dh + g[:, t]
            dh_new = m[:, t] * dh
            dh_prev = (1 - m[:, t]) * dh + dh_new * z
            dz = dh_new * (h_prev - n)
            dan = dh_new * (1 - z) * (1 - n * n)
            dar = dan * ghn * r * (1 - r)
            daz = dz * z * (1 - z)
            dgh = np.concatenate([dar, daz, dan * r], axis=-1)
            dgx[:, t] = np.concatenate([dar, daz, dan], axis=-1)
            dwh += h_prev.T @ dgh
            dbh += dgh.sum(axis=0)
            dh = dh_prev + dgh @ wh.T
        return dgx, dwh, dbh


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def gru_scan(gx: Tensor, wh: Tensor, bh: Tensor, mask, reverse: bool = False) -> Tensor:
    return GRUScan.apply(gx, wh, bh, mask=mask, reverse=reverse)


def parameter(data: np.ndarray, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


# Gradient checking -------------------------------------------------------


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """||a - b|| / max(||a||, ||b||, floor), with 0 when both vanish.

    ``floor`` keeps gradients that are exactly zero in theory (rounding noise
    on both sides) from reporting a relative error of 1.
    """
    num = float(np.linalg.norm(np.ravel(a) - np.ravel(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return 0.0 if den == 0.0 else num / den


def numerical_gradient(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def check_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], *, eps: float = 1e-6,
                    seed: int = 0) -> list[float]:
    """Compare tape gradients of ``fn`` with central differences in float64.

    The scalar objective is ``sum(fn(*inputs) * R)`` for a fixed random ``R``,
    so every output element gets a distinct cotangent.  Returns one relative
    error per input array.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape():
        out = fn(*leaves)
        weights = np.random.default_rng(seed).standard_normal(out.shape)
        loss = (out * weights).sum()
    backward(loss)

    def objective() -> float:
        return float((fn(*leaves).data * weights).sum())

    return [relative_error(t.grad, numerical_gradient(objective, t.data, eps)) for t in leaves]
