"""Dense-tensor numeric core: reverse-mode autodiff tape, SGD, gradient checking.

Everything downstream (backbones, the pointer output layer, training) is built
from the operations in this module. Tensors wrap numpy arrays and record a
backward closure when gradients are enabled; calling ``backward()`` on a
scalar loss walks the tape in reverse topological order.

Numeric contract: NaN and +inf anywhere are hard errors. -inf is reserved as
the masking sentinel for logits that must receive exactly zero probability;
it is handled before exponentiation inside ``softmax`` and never approximated
by a large finite number.
"""

from __future__ import annotations

import hashlib
import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from scipy.special import erf, expit

NEG_INF = float("-inf")

_MASK64 = (1 << 64) - 1


class NumericError(RuntimeError):
    """A tensor operation produced NaN/+inf or was numerically invalid."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class InvalidDistributionError(NumericError):
    """A softmax row had every entry masked; no distribution exists."""


_grad_enabled = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation-mode forward)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def _check_forward(arr: np.ndarray, op: str) -> None:
    # One reduction: np.max propagates NaN and surfaces +inf; -inf is the
    # permitted masking sentinel and passes.
    if arr.size == 0:
        return
    m = float(np.max(arr))
    if math.isnan(m):
        raise NumericError(f"NaN produced by op '{op}'")
    if m == math.inf:
        raise NumericError(f"+inf produced by op '{op}'")


def _check_grad(arr: np.ndarray, where: str) -> None:
    if arr.size == 0:
        return
    hi = float(np.max(arr))
    lo = float(np.min(arr))
    if math.isnan(hi) or hi == math.inf or lo == -math.inf:
        raise NumericError(f"non-finite gradient at {where}")


class Tensor:
    """A dense float array plus an optional position on the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- tape ----------------------------------------------------------
    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-accumulate gradients from this scalar into all leaves."""
        if self.size != 1:
            raise DimensionError("backward() requires a scalar tensor")
        # Iterative postorder topological sort; chunked LSTM graphs are too
        # deep for recursion.
        topo: list[Tensor] = []
        seen = {id(self)}
        stack: list[tuple[Tensor, int]] = [(self, 0)]
        while stack:
            node, idx = stack.pop()
            if idx < len(node._parents):
                stack.append((node, idx + 1))
                parent = node._parents[idx]
                if id(parent) not in seen and parent.requires_grad:
                    seen.add(id(parent))
                    stack.append((parent, 0))
            else:
                topo.append(node)
        self.grad = np.ones_like(self.data)
        # Non-finite gradients are detected where they land: sgd_step checks
        # every parameter gradient before touching values.
        for node in reversed(topo):
            if node._backward is None:
                continue
            g = node.grad
            if g is None:
                continue
            node._backward(g)
            # Intermediate grads are not needed once propagated.
            node.grad = None
            node._parents = ()
            node._backward = None

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    _check_forward(data, op)
    out = Tensor(data)
    if _grad_enabled[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def custom(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    """Register a tensor with a hand-written backward rule on the tape."""
    return _node(data, parents, backward, op)


# ---------------------------------------------------------------------------
# elementwise / structural operations
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _node(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D x 2-D, or stacked with identical leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs 2-D or stacked operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _node(out, (a, b), backward, "matmul")


def gather_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` (embedding); backward scatter-adds."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DimensionError("gather_rows indices must be integers")
    out = table.data[ids]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            table._accumulate(acc)

    return _node(out, (table,), backward, "gather_rows")


def gather_along_last(t: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one entry per row along the last axis: out[..., ] = t[..., ids[...]]."""
    ids = np.asarray(ids)
    if ids.shape != t.shape[:-1]:
        raise DimensionError(f"index shape {ids.shape} does not match {t.shape[:-1]}")
    out = np.take_along_axis(t.data, ids[..., None], axis=-1)[..., 0]

    def backward(g):
        if t.requires_grad:
            acc = np.zeros_like(t.data)
            np.put_along_axis(acc, ids[..., None], g[..., None], axis=-1)
            t._accumulate(acc)

    return _node(out, (t,), backward, "gather_along_last")


def concat(tensors: list, axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offset, offset + size)
                t._accumulate(g[tuple(idx)])
            offset += size

    return _node(out, tuple(tensors), backward, "concat")


def narrow(t: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * t.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = t.data[idx]

    def backward(g):
        if t.requires_grad:
            acc = np.zeros_like(t.data)
            acc[idx] = g
            t._accumulate(acc)

    return _node(out, (t,), backward, "narrow")


def reshape(t: Tensor, shape) -> Tensor:
    out = t.data.reshape(shape)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g.reshape(t.shape))

    return _node(out, (t,), backward, "reshape")


def swapaxes(t: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(t.data, ax1, ax2)

    def backward(g):
        if t.requires_grad:
            t._accumulate(np.swapaxes(g, ax1, ax2))

    return _node(out, (t,), backward, "swapaxes")


def tensor_sum(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = t.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not t.requires_grad:
            return
        if axis is None:
            t._accumulate(np.broadcast_to(g, t.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            t._accumulate(np.broadcast_to(gg, t.shape).copy())

    return _node(np.asarray(out), (t,), backward, "sum")


def mean(t: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = t.size if axis is None else t.shape[axis]
    return mul(tensor_sum(t, axis=axis, keepdims=keepdims), 1.0 / n)


def tanh(t: Tensor) -> Tensor:
    out = np.tanh(t.data)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * (1.0 - out * out))

    return _node(out, (t,), backward, "tanh")


def sigmoid(t: Tensor) -> Tensor:
    out = expit(t.data)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * out * (1.0 - out))

    return _node(out, (t,), backward, "sigmoid")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(t: Tensor) -> Tensor:
    """Exact (erf-based) GELU; smooth everywhere, so finite differences
    validate it at any probe point, unlike the relu kink."""
    x = t.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g):
        if t.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            t._accumulate(g * (cdf + x * pdf))

    return _node(out, (t,), backward, "gelu")


def exp(t: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(t.data)  # +inf is converted to NumericError below

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * out)

    return _node(out, (t,), backward, "exp")


def log(t: Tensor) -> Tensor:
    if (t.data <= 0).any():
        raise NumericError("log of a non-positive value")
    out = np.log(t.data)

    def backward(g):
        if t.requires_grad:
            t._accumulate(g / t.data)

    return _node(out, (t,), backward, "log")


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``.

    Entries equal to the -inf sentinel receive exactly zero probability. A
    slice with every entry masked has no valid distribution and raises
    ``InvalidDistributionError``.
    """
    x = t.data
    if x.shape[axis] < 1:
        raise DimensionError("softmax over an empty axis")
    m = x.max(axis=axis, keepdims=True)
    if (m == NEG_INF).any():
        raise InvalidDistributionError("softmax input has a fully masked slice")
    e = np.exp(x - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if t.requires_grad:
            inner = (g * y).sum(axis=axis, keepdims=True)
            t._accumulate(y * (g - inner))

    return _node(y, (t,), backward, "softmax")


def dropout(t: Tensor, rate: float, generator: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    if not 0.0 <= rate < 1.0:
        raise NumericError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return t
    keep = 1.0 - rate
    mask = (generator.random(t.shape) < keep).astype(t.data.dtype) / keep
    out = t.data * mask

    def backward(g):
        if t.requires_grad:
            t._accumulate(g * mask)

    return _node(out, (t,), backward, "dropout")


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, x.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, x.shape[-1]).sum(axis=0))
        if t.requires_grad:
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            t._accumulate(inv * (gh - m1 - xhat * m2))

    return _node(out, (t, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------------------
# parameters, RNG, optimizer, gradient checking
# ---------------------------------------------------------------------------

class Parameter:
    """Named trainable leaf tensor."""

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.value = Tensor(data, requires_grad=True, name=name)

    @property
    def grad(self) -> np.ndarray | None:
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.zero_grad()

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


@dataclass(frozen=True)
class RngState:
    """Deterministic, splittable random source.

    The same seed always yields bit-identical draws; children derived with
    ``child(tag)`` are independent streams keyed by the tag, so adding or
    removing one consumer never perturbs another.
    """

    seed: int
    algorithm: str = "philox4x32"

    def generator(self) -> np.random.Generator:
        if self.algorithm != "philox4x32":
            raise NumericError(f"unknown rng algorithm {self.algorithm!r}")
        return np.random.Generator(np.random.Philox(key=self.seed & _MASK64))

    def child(self, tag: str) -> "RngState":
        digest = hashlib.blake2b(
            self.seed.to_bytes(8, "little", signed=False) + tag.encode("utf-8"),
            digest_size=8,
        ).digest()
        return RngState(int.from_bytes(digest, "little"), self.algorithm)


def uniform_init(shape, rng: RngState, scale: float = 0.1, dtype=np.float64) -> np.ndarray:
    # Draw in float64 first so float32 builds see the same stream, just rounded.
    return rng.generator().uniform(-scale, scale, size=shape).astype(dtype)


def sgd_step(params: list[Parameter], lr: float, clip_norm: float) -> float:
    """Clip gradients to a global L2 norm, apply SGD, zero the gradients.

    Returns the pre-clip gradient norm. Any non-finite gradient aborts the
    step (no parameter is touched) with a diagnostic naming the parameter.
    """
    if clip_norm <= 0:
        raise NumericError("clip_norm must be positive")
    grads: list[tuple[Parameter, np.ndarray]] = []
    sq = 0.0
    for p in params:
        g = p.value.grad
        if g is None:
            continue
        _check_grad(g, f"parameter '{p.name}'")
        grads.append((p, g))
        sq += float(np.dot(g.reshape(-1).astype(np.float64), g.reshape(-1).astype(np.float64)))
    norm = math.sqrt(sq)
    scale = clip_norm / norm if norm > clip_norm else 1.0
    if lr != 0.0:
        step = lr * scale
        for p, g in grads:
            p.value.data -= (step * g).astype(p.value.data.dtype, copy=False)
    for p in params:
        p.zero_grad()
    return norm


def grad_check(
    loss_fn,
    params: list[Parameter],
    eps: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: RngState | None = None,
) -> float:
    """Compare tape gradients against central finite differences.

    ``loss_fn`` must be a deterministic scalar function of ``params``.
    Returns the worst relative error |a - n| / max(|a|, |n|, 1e-8) over the
    probed coordinates. Requires 64-bit parameters.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise NumericError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    for p in params:
        if p.value.data.dtype != np.float64:
            raise NumericError(f"grad_check requires float64 parameters ({p.name})")
        p.zero_grad()

    loss = loss_fn()
    if not math.isfinite(float(loss.item())):
        raise NumericError("loss_fn non-finite at the probe point")
    loss.backward()
    analytic = {p.name: (np.zeros_like(p.value.data) if p.grad is None else p.grad.copy()) for p in params}
    for p in params:
        p.zero_grad()

    gen = (rng or RngState(0)).generator()
    worst = 0.0
    for p in params:
        flat = p.value.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = gen.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        a_flat = analytic[p.name].reshape(-1)
        for j in coords:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + eps
                f1 = float(loss_fn().item())
                flat[j] = orig - eps
                f2 = float(loss_fn().item())
            flat[j] = orig
            if not (math.isfinite(f1) and math.isfinite(f2)):
                raise NumericError(f"loss_fn non-finite while probing '{p.name}'")
            numeric = (f1 - f2) / (2.0 * eps)
            a = float(a_flat[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
