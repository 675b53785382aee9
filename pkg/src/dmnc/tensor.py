"""Dense tensors with a reverse-mode differentiation tape.

Every primitive the model needs is defined here with an exact adjoint.
Recording is driven by an active :class:`Tape`: inside a ``with Tape() as t:``
block, any op whose inputs require gradients appends a backward closure to the
tape. Construction order is topological order, so ``backward`` is a single
reverse sweep over the node list. Outside a tape block ops only compute values,
which is the fast path used for evaluation and finite differencing.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

DEFAULT_DTYPE = np.float64

# Additive guard in the cosine-similarity denominator.
COSINE_EPS = 1e-6

_tape_stack: list["Tape"] = []

# When False, skips the per-primitive NaN/Inf guard. Training still checks the
# loss and every gradient once per step, so non-finite values surface at step
# granularity instead of op granularity.
_finite_checks = True

# Test hook: names of primitives whose adjoint is sign-flipped, used to prove
# the gradient checker actually detects broken backward passes.
_fault_injections: set[str] = set()


def set_finite_checks(enabled: bool) -> bool:
    """Toggle the per-primitive finite guard; returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def set_default_dtype(dtype) -> None:
    global DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"unsupported dtype {dtype}; use float32 or float64")
    DEFAULT_DTYPE = dtype.type


def _guard(arr: np.ndarray) -> None:
    # A finite array has a finite sum (magnitudes here never overflow), while
    # any NaN/Inf entry poisons the sum, so one reduction checks everything.
    if _finite_checks and not math.isfinite(arr.sum()):
        raise NonFiniteError(f"non-finite value in tensor of shape {arr.shape}")


class Tape:
    """Append-only record of differentiable ops, in construction order."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.nodes)


class Tensor:
    """n-dimensional double (or single) precision value, optionally taped."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        _guard(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        """Copy of the value with no tape history and no gradient slot."""
        return _result(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def sum(self, axis: int | None = None) -> "Tensor":
        return reduce_sum(self, axis)

    def reshape(self, *shape: int) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; constants are wrapped on the fly.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _NEG_ONE if self.data.dtype == np.float64 else _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.requires_grad = False
    return out


_NEG_ONE = _result(np.asarray(-1.0))


def _record(out: Tensor, bwd: Callable[[np.ndarray], None]) -> None:
    out.requires_grad = True
    _tape_stack[-1].nodes.append((out, bwd))


def _taping(*tensors: Tensor) -> bool:
    if not _tape_stack:
        return False
    for t in tensors:
        if t.requires_grad:
            return True
    return False


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # Rebinding (never in-place) keeps accumulated grads safe to alias views.
    t.grad = g if t.grad is None else t.grad + g


def constant(data) -> Tensor:
    return Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix / matrix-vector product with standard adjoints."""
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.shape[-1] != bd.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {ad.shape} x {bd.shape}")
    od = ad @ bd
    _guard(od)
    out = _result(od)
    if _taping(a, b):
        def bwd(g: np.ndarray) -> None:
            if a.requires_grad:
                if ad.ndim == 1:          # (k,) @ (k,n) -> (n,)
                    _accumulate(a, bd @ g)
                elif bd.ndim == 1:        # (m,k) @ (k,) -> (m,)
                    _accumulate(a, np.outer(g, bd))
                else:                     # (m,k) @ (k,n) -> (m,n)
                    _accumulate(a, g @ bd.T)
            if b.requires_grad:
                if bd.ndim == 1:
                    _accumulate(b, ad.T @ g if ad.ndim == 2 else ad * g)
                elif ad.ndim == 1:
                    _accumulate(b, np.outer(ad, g))
                else:
                    _accumulate(b, ad.T @ g)
        _record(out, bwd)
    return out


def _broadcast_ok(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    # Equal shapes, a scalar operand, or a row vector against a matrix.
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) == 2 and sb == (sa[1],):
        return True
    if len(sb) == 2 and sa == (sb[1],):
        return True
    return False


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    return g.sum(axis=0)  # row broadcast over leading axis


def add(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.data.shape, b.data.shape):
        raise DimensionError(f"add: incompatible shapes {a.data.shape} + {b.data.shape}")
    od = a.data + b.data
    _guard(od)
    out = _result(od)
    if _taping(a, b):
        def bwd(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _reduce_to(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(g, b.data.shape))
        _record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.data.shape, b.data.shape):
        raise DimensionError(f"sub: incompatible shapes {a.data.shape} - {b.data.shape}")
    od = a.data - b.data
    _guard(od)
    out = _result(od)
    if _taping(a, b):
        def bwd(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _reduce_to(g, a.data.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(-g, b.data.shape))
        _record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if not _broadcast_ok(a.data.shape, b.data.shape):
        raise DimensionError(f"mul: incompatible shapes {a.data.shape} * {b.data.shape}")
    ad, bd = a.data, b.data
    od = ad * bd
    _guard(od)
    out = _result(od)
    if _taping(a, b):
        def bwd(g: np.ndarray) -> None:
            if a.requires_grad:
                _accumulate(a, _reduce_to(g * bd, ad.shape))
            if b.requires_grad:
                _accumulate(b, _reduce_to(g * ad, bd.shape))
        _record(out, bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # exp of a non-positive argument never overflows; branch via where.
    t = np.exp(-np.abs(xd))
    od = np.where(xd >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    _guard(od)
    out = _result(od)
    if _taping(x):
        def bwd(g: np.ndarray) -> None:
            _accumulate(x, g * od * (1.0 - od))
        _record(out, bwd)
    return out


def tanh(x: Tensor) -> Tensor:
    od = np.tanh(x.data)
    _guard(od)
    out = _result(od)
    if _taping(x):
        flip = -1.0 if "tanh" in _fault_injections else 1.0
        def bwd(g: np.ndarray) -> None:
            _accumulate(x, flip * g * (1.0 - od * od))
        _record(out, bwd)
    return out


def relu(x: Tensor) -> Tensor:
    od = np.maximum(x.data, 0.0)
    out = _result(od)
    if _taping(x):
        mask = x.data > 0
        def bwd(g: np.ndarray) -> None:
            _accumulate(x, g * mask)
        _record(out, bwd)
    return out


def oneplus(x: Tensor) -> Tensor:
    """1 + log(1 + exp(x)); maps the reals onto (1, inf)."""
    od = 1.0 + np.logaddexp(0.0, x.data)
    _guard(od)
    out = _result(od)
    if _taping(x):
        xd = x.data
        def bwd(g: np.ndarray) -> None:
            t = np.exp(-np.abs(xd))
            s = np.where(xd >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
            _accumulate(x, g * s)
        _record(out, bwd)
    return out


def softmax(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim != 1 or xd.size < 1:
        raise DimensionError(f"softmax expects a non-empty vector, got shape {xd.shape}")
    e = np.exp(xd - xd.max())
    od = e / e.sum()
    out = _result(od)
    if _taping(x):
        def bwd(g: np.ndarray) -> None:
            _accumulate(x, od * (g - np.dot(g, od)))
        _record(out, bwd)
    return out


def safe_log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """log with the argument clamped below at ``floor``."""
    clamped = np.maximum(x.data, floor)
    od = np.log(clamped)
    out = _result(od)
    if _taping(x):
        live = x.data >= floor
        def bwd(g: np.ndarray) -> None:
            _accumulate(x, np.where(live, g / clamped, 0.0))
        _record(out, bwd)
    return out


def clip01(x: Tensor) -> Tensor:
    """Clamp into [0, 1]; gradient passes only strictly inside the interval.

    Safe for finite differencing as long as boundary hits are structural
    (identically 0/1 in a neighbourhood) rather than threshold crossings.
    """
    od = np.clip(x.data, 0.0, 1.0)
    out = _result(od)
    if _taping(x):
        inside = (x.data > 0.0) & (x.data < 1.0)
        def bwd(g: np.ndarray) -> None:
            _accumulate(x, g * inside)
        _record(out, bwd)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [p.data for p in parts]
    od = np.concatenate(datas, axis=axis)
    out = _result(od)
    if _taping(*parts):
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)
        def bwd(g: np.ndarray) -> None:
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    idx = (slice(None),) * axis + (slice(lo, hi),)
                    _accumulate(p, g[idx])
        _record(out, bwd)
    return out


def narrow(x: Tensor, key) -> Tensor:
    """Basic indexing (ints and slices); backward scatters into zeros."""
    try:
        od = x.data[key]
    except IndexError as e:
        raise IndexError(f"slice {key!r} out of range for shape {x.data.shape}") from e
    # ascontiguousarray would promote 0-d results to shape (1,).
    od = np.asarray(od) if np.ndim(od) == 0 else np.ascontiguousarray(od)
    out = _result(od)
    if _taping(x):
        def bwd(g: np.ndarray) -> None:
            z = np.zeros_like(x.data)
            z[key] = g
            _accumulate(x, z)
        _record(out, bwd)
    return out


def take(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along the first axis with constant indices."""
    idx = np.asarray(indices, dtype=np.intp)
    od = x.data[idx]
    out = _result(od)
    if _taping(x):
        def bwd(g: np.ndarray) -> None:
            z = np.zeros_like(x.data)
            np.add.at(z, idx, g)
            _accumulate(x, z)
        _record(out, bwd)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.data.shape}")
    out = _result(x.data.T)
    if _taping(x):
        def bwd(g: np.ndarray) -> None:
            _accumulate(x, g.T)
        _record(out, bwd)
    return out


def reshape(x: Tensor, shape) -> Tensor:
    od = x.data.reshape(shape)
    out = _result(od)
    if _taping(x):
        orig = x.data.shape
        def bwd(g: np.ndarray) -> None:
            _accumulate(x, g.reshape(orig))
        _record(out, bwd)
    return out


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    od = x.data.sum(axis=axis)
    out = _result(np.asarray(od))
    if _taping(x):
        def bwd(g: np.ndarray) -> None:
            if axis is None:
                _accumulate(x, np.broadcast_to(g, x.data.shape).copy())
            else:
                _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy())
        _record(out, bwd)
    return out


def outer(u: Tensor, v: Tensor) -> Tensor:
    if u.data.ndim != 1 or v.data.ndim != 1:
        raise DimensionError(f"outer expects vectors, got {u.data.shape} and {v.data.shape}")
    od = np.outer(u.data, v.data)
    _guard(od)
    out = _result(od)
    if _taping(u, v):
        ud, vd = u.data, v.data
        def bwd(g: np.ndarray) -> None:
            if u.requires_grad:
                _accumulate(u, g @ vd)
            if v.requires_grad:
                _accumulate(v, ud @ g)
        _record(out, bwd)
    return out


def cumprod_exclusive(x: Tensor) -> Tensor:
    """Exclusive running product: out[j] = prod(x[:j]), out[0] = 1."""
    xd = x.data
    if xd.ndim != 1:
        raise DimensionError(f"cumprod expects a vector, got shape {xd.shape}")
    od = np.concatenate(([1.0], np.cumprod(xd[:-1])))
    _guard(od)
    out = _result(od)
    if _taping(x):
        def bwd(g: np.ndarray) -> None:
            # d out[j] / d x[i] = prod(x[:j] without i) for i < j, which
            # factors as out[i] * prod(x[i+1:j]); the inner sums obey the
            # reverse recurrence s[i] = g[i+1] + x[i+1] * s[i+1]. Division
            # free, so exact zeros in x are handled exactly.
            n = xd.size
            s = 0.0
            grad = np.zeros_like(xd)
            for i in range(n - 2, -1, -1):
                s = g[i + 1] + xd[i + 1] * s
                grad[i] = od[i] * s
            _accumulate(x, grad)
        _record(out, bwd)
    return out


def cosine_rows(m: Tensor, k: Tensor) -> Tensor:
    """Per-row cosine similarity between a matrix and a key vector.

    The denominator carries an additive guard so zero rows (an empty memory)
    yield similarity 0 with finite gradients.
    """
    md, kd = m.data, k.data
    if md.ndim != 2 or kd.ndim != 1 or md.shape[1] != kd.shape[0]:
        raise DimensionError(f"cosine_rows: incompatible shapes {md.shape} vs {kd.shape}")
    dots = md @ kd
    row_norms = np.sqrt((md * md).sum(axis=1))
    k_norm = math.sqrt(float(kd @ kd))
    denom = row_norms * k_norm + COSINE_EPS
    od = dots / denom
    _guard(od)
    out = _result(od)
    if _taping(m, k):
        def bwd(g: np.ndarray) -> None:
            coef = g / denom
            if m.requires_grad:
                # d/d m_i: k/denom_i - c_i * k_norm * unit(m_i) / denom_i
                safe_rows = np.maximum(row_norms, 1e-300)
                gm = np.outer(coef, kd) - (coef * od * k_norm / safe_rows)[:, None] * md
                _accumulate(m, gm)
            if k.requires_grad:
                safe_k = max(k_norm, 1e-300)
                gk = coef @ md - ((coef * od * row_norms).sum() / safe_k) * kd
                _accumulate(k, gk)
        _record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# Backward pass and verification
# ---------------------------------------------------------------------------


def backward(root: Tensor, tape: Tape | None = None, seed: float = 1.0) -> None:
    """Reverse sweep from a scalar root over the (active) tape."""
    if root.data.shape != ():
        raise ContractError(f"backward root must be a scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        raise ContractError("backward root is not attached to a tape")
    if tape is None:
        if not _tape_stack:
            raise ContractError("no active tape")
        tape = _tape_stack[-1]
    root.grad = np.asarray(seed, dtype=root.data.dtype)
    for out, bwd in reversed(tape.nodes):
        g = out.grad
        if g is not None:
            bwd(g)


class GradCheckReport:
    """Per-parameter worst relative error from central differencing."""

    def __init__(self):
        self.per_param: dict[str, float] = {}
        self.worst_param: str | None = None
        self.max_rel_err = 0.0

    def update(self, name: str, err: float) -> None:
        self.per_param[name] = max(err, self.per_param.get(name, 0.0))
        if err > self.max_rel_err:
            self.max_rel_err = err
            self.worst_param = name

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol

    def __repr__(self) -> str:
        return (f"GradCheckReport(max_rel_err={self.max_rel_err:.3e}, "
                f"worst={self.worst_param})")


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor],
               eps: float | tuple[float, ...] = 1e-5,
               stride: int = 1,
               early_accept: float | None = None) -> GradCheckReport:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` must be deterministic and return a scalar Tensor built from
    ``params``. With ``stride > 1`` only every stride-th coordinate of each
    parameter is probed (the analytic pass always covers everything).
    ``early_accept`` skips the remaining step sizes once a coordinate's
    error is already at or below it; set it no higher than the tolerance
    the report will be judged against and pass/fail is unchanged, since
    the minimum over all steps can only be smaller.

    ``eps`` may be a tuple, in which case each coordinate scores the best
    agreement over the given step sizes. Truncation error grows with the
    step and roundoff shrinks with it, so no single step suits both flat,
    near-zero gradients and strongly curved ones; a genuinely wrong
    analytic gradient disagrees at every step size and still fails.
    """
    steps = (eps,) if isinstance(eps, float) else tuple(eps)
    with Tape() as tape:
        loss = f()
        backward(loss, tape)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}
    for p in params.values():
        p.zero_grad()

    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(0, flat.size, stride):
            orig = flat[i]
            best = math.inf
            for step in steps:
                flat[i] = orig + step
                up = float(f().data)
                flat[i] = orig - step
                down = float(f().data)
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                denom = max(abs(ana[i]), abs(numeric), 1e-8)
                best = min(best, abs(ana[i] - numeric) / denom)
                if early_accept is not None and best <= early_accept:
                    break
            report.update(name, best)
    return report
