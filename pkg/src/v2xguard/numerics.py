"""Dense tensor ops with a reverse-mode gradient tape.

Values are numpy arrays (float32 by default, float64 optional). Every op
run through a recording :class:`Tape` appends a node; :meth:`Tape.backward`
walks the nodes once in reverse creation order, which is a valid reverse
topological order because a node can only consume tensors created before it.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping

import numpy as np
from scipy.special import erf

MASK_VALUE = -1e9
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data: np.ndarray, requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.data.dtype})"


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Tape:
    """Records primitive ops for one forward pass.

    ``record=False`` turns the tape into a plain evaluator (no nodes, no
    backward). ``check_finite`` raises on any NaN/Inf produced by an op.
    """

    def __init__(self, dtype=np.float32, record: bool = True, check_finite: bool = False):
        self.dtype = np.dtype(dtype)
        self.record = record
        self.check_finite = check_finite
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    # -- leaves ----------------------------------------------------------

    def param(self, value: np.ndarray, name: str | None = None) -> Tensor:
        return Tensor(np.asarray(value, dtype=self.dtype), requires_grad=self.record, name=name)

    def const(self, value, name: str | None = None) -> Tensor:
        return Tensor(np.asarray(value, dtype=self.dtype), name=name)

    def _emit(self, data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(data)):
            raise FloatingPointError(f"non-finite values after op on {[t.shape for t in inputs]}")
        needs = self.record and any(t.requires_grad for t in inputs)
        out = Tensor(data, requires_grad=needs)
        if needs:
            self._nodes.append((out, inputs, backward))
        return out

    # -- elementwise -----------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        _check_broadcast("add", a, b)
        return self._emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        _check_broadcast("sub", a, b)
        return self._emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        _check_broadcast("mul", a, b)
        return self._emit(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = self.dtype.type(c)
        return self._emit(a.data * c, (a,), lambda g: (g * c,))

    def gelu(self, x: Tensor) -> Tensor:
        """Exact (erf) GELU."""
        cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))
        cdf = cdf.astype(x.data.dtype, copy=False)

        def backward(g):
            pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2 * math.pi)
            return (g * (cdf + x.data * pdf),)

        return self._emit(x.data * cdf, (x,), backward)

    def dropout(self, x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
        """Inverted dropout; identity when not training or rate == 0."""
        if not train or rate <= 0.0:
            return x
        if rate >= 1.0:
            raise ValueError("dropout rate must be < 1")
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.data.dtype) / x.data.dtype.type(1.0 - rate)
        return self._emit(x.data * keep, (x,), lambda g: (g * keep,))

    # -- linear algebra ---------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        """``a @ b`` for 2-D ``b`` (shared weights) or equal-batch 3-D operands."""
        if a.shape[-1] != b.shape[-2 if b.data.ndim >= 2 else 0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        if b.data.ndim == 3 and (a.data.ndim != 3 or a.shape[0] != b.shape[0]):
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        shared = b.data.ndim == 2
        k = a.shape[-1]
        if shared:
            # 2-D GEMM is markedly faster than numpy's stacked matmul
            out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
        else:
            out = a.data @ b.data

        def backward(g):
            ga = gb = None
            if shared:
                g2 = g.reshape(-1, g.shape[-1])
                if a.requires_grad:
                    ga = (g2 @ b.data.T).reshape(a.shape)
                if b.requires_grad:
                    gb = a.data.reshape(-1, k).T @ g2
            else:
                if a.requires_grad:
                    ga = g @ np.swapaxes(b.data, -1, -2)
                if b.requires_grad:
                    gb = np.swapaxes(a.data, -1, -2) @ g
            return ga, gb

        return self._emit(out, (a, b), backward)

    def linear(self, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
        y = self.matmul(x, w)
        return self.add(y, b) if b is not None else y

    # -- shape ops ---------------------------------------------------------

    def transpose(self, x: Tensor) -> Tensor:
        """Swap the last two axes."""
        return self._emit(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))

    def reshape(self, x: Tensor, shape: tuple[int, ...]) -> Tensor:
        if int(np.prod(shape)) != x.data.size:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
        old = x.shape
        return self._emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))

    def split_heads(self, x: Tensor, heads: int) -> Tensor:
        """(B, T, H*d) -> (B*H, T, d)."""
        b, t, dm = x.shape
        if dm % heads:
            raise ShapeError(f"split_heads: width {dm} not divisible by {heads}")
        d = dm // heads
        out = x.data.reshape(b, t, heads, d).transpose(0, 2, 1, 3).reshape(b * heads, t, d)

        def backward(g):
            return (g.reshape(b, heads, t, d).transpose(0, 2, 1, 3).reshape(b, t, dm),)

        return self._emit(out, (x,), backward)

    def merge_heads(self, x: Tensor, heads: int) -> Tensor:
        """(B*H, T, d) -> (B, T, H*d)."""
        bh, t, d = x.shape
        if bh % heads:
            raise ShapeError(f"merge_heads: leading dim {bh} not divisible by {heads}")
        b = bh // heads
        out = x.data.reshape(b, heads, t, d).transpose(0, 2, 1, 3).reshape(b, t, heads * d)

        def backward(g):
            return (g.reshape(b, t, heads, d).transpose(0, 2, 1, 3).reshape(bh, t, d),)

        return self._emit(out, (x,), backward)

    def take(self, x: Tensor, index: int, axis: int = 1) -> Tensor:
        """Select one position along ``axis`` (dropping that axis)."""
        out = np.take(x.data, index, axis=axis)

        def backward(g):
            full = np.zeros_like(x.data)
            sl = [slice(None)] * x.data.ndim
            sl[axis] = index
            full[tuple(sl)] = g
            return (full,)

        return self._emit(out, (x,), backward)

    # -- reductions --------------------------------------------------------

    def sum(self, x: Tensor, axis: int | None = None) -> Tensor:
        out = np.sum(x.data, axis=axis, dtype=np.float64).astype(self.dtype)
        shape = x.shape

        def backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).astype(self.dtype),)

        return self._emit(np.asarray(out), (x,), backward)

    def mean(self, x: Tensor, axis: int | None = None) -> Tensor:
        n = x.data.size if axis is None else x.shape[axis]
        return self.scale(self.sum(x, axis), 1.0 / n)

    # -- normalization / attention ----------------------------------------

    def softmax(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Row softmax over the last axis; ``mask`` is added before exponentiation."""
        z = x.data if mask is None else x.data + mask
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=-1, keepdims=True)

        def backward(g):
            return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

        return self._emit(y, (x,), backward)

    def layer_norm(self, x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
        mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(self.dtype)
        xc = x.data - mu
        var = (xc * xc).mean(axis=-1, keepdims=True, dtype=np.float64).astype(self.dtype)
        inv = 1.0 / np.sqrt(var + self.dtype.type(eps))
        xhat = xc * inv
        out = xhat * gain.data + bias.data

        def backward(g):
            gx = ggain = gbias = None
            if gain.requires_grad:
                ggain = _unbroadcast(g * xhat, gain.shape)
            if bias.requires_grad:
                gbias = _unbroadcast(g, bias.shape)
            if x.requires_grad:
                gh = g * gain.data
                m1 = gh.mean(axis=-1, keepdims=True)
                m2 = (gh * xhat).mean(axis=-1, keepdims=True)
                gx = inv * (gh - m1 - xhat * m2)
            return gx, ggain, gbias

        return self._emit(out, (x, gain, bias), backward)

    # -- loss ---------------------------------------------------------------

    def huber(self, pred: Tensor, target: Tensor, delta: float = 1.0) -> Tensor:
        """Elementwise Huber loss of the residual ``target - pred``."""
        if pred.shape != target.shape:
            raise ShapeError(f"huber: incompatible shapes {pred.shape} and {target.shape}")
        return self._emit(
            huber_value(target.data - pred.data, delta).astype(self.dtype, copy=False),
            (pred, target),
            lambda g: (g * huber_grad_pred(pred.data, target.data, delta), -g * huber_grad_pred(pred.data, target.data, delta)),
        )

    # -- backward -------------------------------------------------------------

    def backward(self, loss: Tensor, keep_intermediate: bool = False) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape.

        Gradients of intermediate results are released as soon as they have
        been propagated unless ``keep_intermediate`` is set.
        """
        if not self.record:
            raise RuntimeError("backward on a non-recording tape")
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, inputs, fn in reversed(self._nodes):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for t, g in zip(inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                # arrays are never mutated in place, so aliasing g is safe
                g = np.asarray(g, dtype=self.dtype)
                t.grad = g if t.grad is None else t.grad + g
            if not keep_intermediate:
                out.grad = None
        self._nodes.clear()


def huber_value(residual: np.ndarray, delta: float = 1.0) -> np.ndarray:
    a = np.abs(residual)
    return np.where(a <= delta, 0.5 * residual * residual, delta * a - 0.5 * delta * delta)


def huber_grad_pred(pred: np.ndarray, target: np.ndarray, delta: float = 1.0) -> np.ndarray:
    """d/dpred of the Huber loss; magnitude bounded by ``delta``."""
    return -np.clip(target - pred, -delta, delta)


def causal_mask(length: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: 0 on and below the diagonal, MASK_VALUE above."""
    m = np.triu(np.ones((length, length), dtype=bool), k=1)
    return np.where(m, MASK_VALUE, 0.0).astype(dtype)


def dropout_rng(seed: int, step: int, site: int) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by (seed, step, site)."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, step & 0xFFFFFFFF, site & 0xFFFFFFFF])
    return np.random.Generator(np.random.Philox(ss))


def grad_check(
    f: Callable[[Tape, Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-3,
    dtype=np.float64,
    max_entries: int | None = None,
    seed: int = 0,
    fd_dtype=None,
) -> float:
    """Max relative error between central differences and tape gradients.

    ``f`` builds a scalar from tensors wrapped on the given tape. The tape
    gradient is computed in ``dtype``; the finite differences in ``fd_dtype``
    (defaults to ``dtype``). At most ``max_entries`` coordinates per parameter
    are probed (all when None).
    Relative error is |g_fd - g_tape| / max(1, |g_fd|, |g_tape|).
    """
    fd_dtype = dtype if fd_dtype is None else fd_dtype
    base = {k: np.array(v, dtype=fd_dtype) for k, v in params.items()}

    def evaluate(values: Mapping[str, np.ndarray]) -> float:
        tape = Tape(fd_dtype, record=False)
        out = f(tape, {k: tape.const(v, name=k) for k, v in values.items()})
        val = float(np.asarray(out.data).reshape(()))
        if not math.isfinite(val):
            raise FloatingPointError("grad_check: objective is not finite")
        return val

    tape = Tape(dtype)
    leaves = {k: tape.param(v, name=k) for k, v in base.items()}
    loss = f(tape, leaves)
    if not math.isfinite(float(np.asarray(loss.data).reshape(()))):
        raise FloatingPointError("grad_check: objective is not finite")
    tape.backward(loss)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in base.items():
        analytic = leaves[name].grad
        if analytic is None:
            analytic = np.zeros_like(value)
        flat_idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            flat_idx = rng.choice(value.size, size=max_entries, replace=False)
        for j in flat_idx:
            idx = np.unravel_index(int(j), value.shape)
            orig = value[idx]
            value[idx] = orig + h
            fp = evaluate(base)
            value[idx] = orig - h
            fm = evaluate(base)
            value[idx] = orig
            fd = (fp - fm) / (2 * h)
            ga = float(analytic[idx])
            worst = max(worst, abs(fd - ga) / max(1.0, abs(fd), abs(ga)))
    return worst
