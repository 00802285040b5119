"""Dense float tensors with tape-based reverse-mode differentiation.

Every op records itself on the active :class:`Tape` (if any input requires a
gradient), and :meth:`Tape.backward` replays the recording in reverse.  Outside
a tape, ops are plain numpy calls, which is what inference uses.

Storage is float32.  Float64 tensors are carried through unchanged so the same
graph can be evaluated in a 64-bit "shadow" for gradient checking.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """A precondition of an op was violated (e.g. non-scalar loss)."""


class ParameterError(ValueError):
    """A hyperparameter is outside its valid range."""


_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "stack"):
        _state.stack = []
    return _state.stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.full(like.shape, x, dtype=like.dtype) if np.isscalar(x) else np.asarray(x, dtype=like.dtype))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops executed inside the block are recorded in
    execution order (which is a topological order by construction).
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        # smallest distance of any recorded kink input (relu, clamp) from its kink
        self.kink_margin = np.inf

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def note_kink(self, margin: float) -> None:
        if margin < self.kink_margin:
            self.kink_margin = float(margin)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every grad-requiring tensor on ``tape``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                touched[key] = parent
        _accumulate(node.out, g)
    # leaves (parameters, inputs) still hold their totals
    for key, g in grads.items():
        _accumulate(touched[key], g)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def make_op(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording it on the active tape when gradients are needed.

    ``backward_fn(grad_out)`` returns one gradient (or None) per parent.
    Other modules use this to define fused ops with hand-written gradients.
    """
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None:
        parents = tuple(parents)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            tape.nodes.append(_Node(out, parents, backward_fn))
    return out


def _recording() -> Tape | None:
    return active_tape()


# ---------------------------------------------------------------------------
# elementwise


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise DimensionError(f"{op}: cannot broadcast shapes {sa} and {sb} (only trailing-suffix broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra))) if extra else g.reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    x = a.data
    tape = _recording()
    if tape is not None and a.requires_grad and x.size:
        tape.note_kink(np.abs(x).min())
    mask = x > 0
    return make_op(np.where(mask, x, 0).astype(x.dtype), (a,), lambda g: (g * mask,))


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: ``add``, ``mul`` or ``relu``."""
    if op == "relu":
        return relu(a)
    if b is None:
        raise ContractError(f"elementwise {op!r} needs two operands")
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes of ``a`` are kept.

    ``b`` may be 2-D (shared weight) or carry the same leading axes as ``a``.
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if bd.ndim > 2 and bd.shape[:-2] != ad.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return make_op(ad @ bd, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Swap the last two axes, or permute by ``axes``."""
    if axes is None:
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    sizes = [d.shape[axis] for d in datas]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum(sizes)[:-1]
    return make_op(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def expand(a: Tensor, axis: int, n: int) -> Tensor:
    """Insert a new axis at ``axis`` and repeat ``a`` ``n`` times along it."""
    x = np.expand_dims(a.data, axis)
    reps = list(x.shape)
    reps[axis] = n
    out = np.broadcast_to(x, reps).copy()
    return make_op(out, (a,), lambda g: (g.sum(axis=axis),))


def sum(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    x = a.data
    out = x.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_op(np.asarray(out, dtype=x.dtype), (a,), bw)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis), 1.0 / n)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ContractError(f"token id out of range for table with {V} rows")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return make_op(table.data[ids], (table,), bw)


# ---------------------------------------------------------------------------
# normalisation, attention helpers, regularisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_op(p, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return make_op(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(out.astype(np.result_type(xd, gd), copy=False), (x, gain, bias), bw)


def dropout(x: Tensor, rate: float, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity in eval mode, keep-and-rescale in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ContractError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise ContractError("train-mode dropout needs a seeded generator")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_op(x.data * keep, (x,), lambda g: (g * keep,))


def sequence_nll(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-sequence summed negative log-likelihood.

    ``logits`` is (B, T, V); ``targets`` and ``mask`` are (B, T).  Masked-out
    positions (padding) contribute nothing.  Returns a (B,) tensor.
    """
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    tgt = np.asarray(targets, dtype=np.int64)
    m = np.asarray(mask, dtype=logits.dtype)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    out = -(picked * m).sum(axis=-1)

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        return ((p - onehot) * (m * g[:, None])[..., None],)

    return make_op(out.astype(logits.dtype, copy=False), (logits,), bw)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    tol: float

    @property
    def max_rel_err(self) -> float:
        return float(self.rel_err.max()) if self.rel_err.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def relative_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _scalarize(out: Tensor, seed: int) -> tuple[Tensor, np.ndarray | None]:
    if out.data.size == 1:
        return reshape(out, ()), None
    # rounded to the output dtype so analytic and numeric sides project identically
    w = np.random.default_rng(seed).uniform(-1.0, 1.0, size=out.shape).astype(out.dtype)
    return sum(mul(out, Tensor._wrap(w))), w.astype(np.float64)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3, tol: float = 1e-3,
               shadow: bool = True, floor: float = 1e-6, seed: int = 0) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection.  With
    ``shadow`` the finite differences are taken in float64, so the check
    measures the analytic gradient, not float32 cancellation noise.
    """
    report = grad_check_many(lambda ps: f(ps["x"]), {"x": x}, step=step, tol=tol,
                             shadow=shadow, floor=floor, seed=seed)
    return report["x"]


def analytic_gradients(f: Callable[[dict], Tensor], params: dict[str, Tensor], seed: int = 0,
                       dtype=None) -> tuple[dict[str, np.ndarray], np.ndarray | None, float]:
    """Tape gradients of ``f`` (reduced to a scalar), plus the projection used
    and the tape's kink margin."""
    live = {k: Tensor(v.data, requires_grad=True, dtype=dtype or v.dtype) for k, v in params.items()}
    with Tape() as tape:
        out = f(live)
        loss, w = _scalarize(out, seed)
    tape.backward(loss)
    grads = {k: (np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)) for k, t in live.items()}
    return grads, w, tape.kink_margin


def numeric_gradients(f: Callable[[dict], Tensor], params: dict[str, Tensor], w: np.ndarray | None,
                      step: float, index: dict[str, np.ndarray], dtype=np.float64) -> dict[str, np.ndarray]:
    """Central differences of ``f`` at the flat positions in ``index``."""
    probe = {k: Tensor(v.data, dtype=dtype or v.dtype) for k, v in params.items()}

    def evaluate() -> float:
        o = f(probe).data.astype(np.float64)
        return float(o.reshape(())) if w is None else float((o * w).sum())

    out = {}
    for k, idx in index.items():
        flat = probe[k].data.reshape(-1)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * step)
        out[k] = numeric
    return out


def probe_index(params: dict[str, Tensor], sample: int | None, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed + 1)
    index = {}
    for k, t in params.items():
        n = t.data.size
        if sample is not None and n > sample:
            index[k] = np.sort(rng.choice(n, size=sample, replace=False))
        else:
            index[k] = np.arange(n)
    return index


def grad_check_many(f: Callable[[dict], Tensor], params: dict[str, Tensor], step: float = 1e-3,
                    tol: float = 1e-3, shadow: bool = True, floor: float = 1e-6, seed: int = 0,
                    sample: int | None = None) -> dict[str, GradCheckReport]:
    """Multi-input :func:`grad_check`.  ``sample`` limits the number of
    finite-difference probes per tensor (chosen with ``seed``)."""
    grads, w, _ = analytic_gradients(f, params, seed)
    index = probe_index(params, sample, seed)
    numeric = numeric_gradients(f, params, w, step, index, np.float64 if shadow else None)
    return {k: GradCheckReport(grads[k].reshape(-1)[index[k]], numeric[k],
                               relative_error(grads[k].reshape(-1)[index[k]], numeric[k], floor), tol)
            for k in params}


def parameters_to(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return {k: Tensor(v.data, requires_grad=v.requires_grad, dtype=dtype, name=k) for k, v in params.items()}
