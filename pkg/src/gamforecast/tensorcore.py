"""Dense float64 tensors with reverse-mode gradient accumulation.

The engine is deliberately small: row-major ``numpy`` storage, a
per-thread tape of recorded primitives, and a single ``backward`` walk
that accumulates gradients for every tensor that requires them.  One
tape and its tensors form one single-threaded evaluation context;
concurrent workers each get their own tape via thread-local state and
exchange parameters only as immutable flat arrays.

Gradient semantics: ``backward`` adds into ``Tensor.grad`` (fan-out
contributions within one call are summed), then clears the tape.  The
Adam optimizer clears grads after applying an update.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DomainError, OptimizerError, ShapeError

_state = threading.local()


def _tape() -> list:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = []
    return tape


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording on this thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def clear_tape() -> None:
    _tape().clear()


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # small operator sugar; all routed through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return hadamard(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return slice_(self, key)


def constant(data) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(data, requires_grad=False)


def _out(arr: np.ndarray, inputs: Sequence[Tensor],
         backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    track = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, track)
    if track:
        _tape().append((out, tuple(inputs), backward))
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operands have shapes {a.data.shape} and {b.data.shape}")


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _out(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _out(a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a: Tensor) -> Tensor:
    return _out(-a.data, (a,), lambda g: (-g,))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return _out(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _out(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: operands have shapes {a.data.shape} and {b.data.shape}")
    ad, bd = a.data, b.data
    return _out(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.data.shape}")
    return _out(np.ascontiguousarray(a.data.T), (a,),
                lambda g: (np.ascontiguousarray(g.T),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    datas = [t.data for t in tensors]
    try:
        arr = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    sizes = [d.shape[axis] for d in datas]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(sizes))
        )

    return _out(arr, tensors, backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        arr = np.ascontiguousarray(a.data.reshape(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.data.shape} as {shape}") from exc
    in_shape = a.data.shape
    return _out(arr, (a,), lambda g: (g.reshape(in_shape),))


def flatten(a: Tensor) -> Tensor:
    """Row-major flatten to a column vector."""
    return reshape(a, (a.data.size, 1))


def slice_(a: Tensor, key) -> Tensor:
    arr = np.ascontiguousarray(a.data[key])
    in_shape = a.data.shape

    def backward(g):
        full = np.zeros(in_shape)
        full[key] = g
        return (full,)

    return _out(arr, (a,), backward)


def sum_(a: Tensor) -> Tensor:
    in_shape = a.data.shape
    return _out(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, in_shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    in_shape = a.data.shape
    return _out(np.asarray(a.data.mean()), (a,),
                lambda g: (np.broadcast_to(g / n, in_shape).copy(),))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _out(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _out(out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, float(slope))
    return _out(a.data * factor, (a,), lambda g: (g * factor,))


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    out = np.where(a.data > 0, a.data, alpha * np.expm1(a.data))
    grad_factor = np.where(a.data > 0, 1.0, out + alpha)
    return _out(out, (a,), lambda g: (g * grad_factor,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _out(out, (a,), lambda g: (g * out,))


def softmax_over_subset(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Softmax restricted to ``indices`` of a vector; other entries are 0.

    ``a`` must be a vector shaped ``(n,)`` or ``(n, 1)``.
    """
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size == 0:
        raise DomainError("softmax_over_subset: empty index subset")
    if len(np.unique(idx)) != idx.size:
        raise DomainError("softmax_over_subset: duplicate indices")
    flat = a.data.reshape(-1)
    if a.data.ndim > 2 or (a.data.ndim == 2 and a.data.shape[1] != 1):
        raise ShapeError(f"softmax_over_subset: expected a vector, got shape {a.data.shape}")
    s = flat[idx]
    e = np.exp(s - s.max())
    y = e / e.sum()
    out = np.zeros_like(a.data)
    out.reshape(-1)[idx] = y
    in_shape = a.data.shape

    def backward(g):
        gi = g.reshape(-1)[idx]
        gx = np.zeros(in_shape)
        gx.reshape(-1)[idx] = y * (gi - float(gi @ y))
        return (gx,)

    return _out(out, (a,), backward)


def masked_row_softmax(scores: Tensor, active: np.ndarray) -> Tensor:
    """Row-wise softmax of a square score matrix over the active subset.

    For each active row i, entries at active columns are softmax-normalized;
    all other entries (inactive rows, inactive columns) are exactly 0.
    Equivalent to ``softmax_over_subset(scores[i], active_indices)`` per
    active row, fused into one tape record.
    """
    act = np.asarray(active, dtype=bool)
    n = scores.data.shape[0]
    if scores.data.shape != (n, n) or act.shape != (n,):
        raise ShapeError(
            f"masked_row_softmax: scores {scores.data.shape} vs active {act.shape}")
    out = np.zeros_like(scores.data)
    idx = np.flatnonzero(act)
    if idx.size:
        sub = scores.data[np.ix_(idx, idx)]
        e = np.exp(sub - sub.max(axis=1, keepdims=True))
        y = e / e.sum(axis=1, keepdims=True)
        out[np.ix_(idx, idx)] = y
    else:
        y = None

    def backward(g):
        gx = np.zeros_like(g)
        if idx.size:
            gs = g[np.ix_(idx, idx)]
            dot = (gs * y).sum(axis=1, keepdims=True)
            gx[np.ix_(idx, idx)] = y * (gs - dot)
        return (gx,)

    return _out(out, (scores,), backward)


def pairwise_sum(u: Tensor, v: Tensor) -> Tensor:
    """S[i, j] = u[0, i] + v[0, j] for row vectors u, v of equal width."""
    if u.data.shape != v.data.shape or u.data.ndim != 2 or u.data.shape[0] != 1:
        raise ShapeError(
            f"pairwise_sum: expected matching row vectors, got {u.data.shape} and {v.data.shape}")
    arr = u.data.T + v.data
    return _out(arr, (u, v),
                lambda g: (g.sum(axis=1).reshape(1, -1), g.sum(axis=0).reshape(1, -1)))


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate ``grad`` for every requires-grad tensor reachable from ``loss``.

    ``loss`` must be scalar.  The tape is cleared afterwards.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = _tape()
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for out, inputs, bw in reversed(tape):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            if out.requires_grad:
                out.grad = g if out.grad is None else out.grad + g
            for inp, gi in zip(inputs, bw(g)):
                if gi is None or not inp.requires_grad:
                    continue
                prev = adjoint.get(id(inp))
                adjoint[id(inp)] = gi if prev is None else prev + gi
        # whatever is left belongs to leaves (parameters, tracked inputs)
        leaves = {id(t): t for _, inputs, _ in tape for t in inputs}
        leaves[id(loss)] = loss
        for tid, g in adjoint.items():
            leaf = leaves.get(tid)
            if leaf is not None and leaf.requires_grad:
                leaf.grad = g if leaf.grad is None else leaf.grad + g
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterSet:
    """Ordered, named collection of trainable tensors.

    ``flat_view``/``load_flat`` use insertion order with row-major raveling
    of each tensor; that order is the canonical layout for checkpoints and
    federated averaging, so it must not change within a run.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    @property
    def total_size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def flat_view(self) -> np.ndarray:
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._params.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.total_size:
            raise ShapeError(
                f"load_flat: expected {self.total_size} values, got {vec.size}")
        pos = 0
        for t in self._params.values():
            n = t.data.size
            t.data[...] = vec[pos:pos + n].reshape(t.data.shape)
            pos += n

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
    """Uniform init in +-sqrt(6 / (fan_in + fan_out)) for a matrix shape."""
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Adam:
    """Adam with bias correction over a :class:`ParameterSet`.

    First/second moments persist across steps; grads are cleared after each
    update.  The update denominator is ``sqrt(v_hat) + eps``, so a zero
    gradient leaves a parameter untouched.
    """

    def __init__(self, params: ParameterSet, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for parameter '{name}'")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.grad = None

    def export_state(self) -> dict:
        return {
            "t": self.t,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for k in self.m:
            self.m[k][...] = state["m"][k]
            self.v[k][...] = state["v"][k]
