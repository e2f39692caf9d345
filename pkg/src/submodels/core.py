"""Dense float32 kernels, a tape-based reverse-mode differentiator and Adam.

Kernels keep float32 storage; reductions (matmul, layer norm statistics, the
MSE sum) accumulate in float64 and round once.  When any input is float64 the
whole computation stays in float64, which is what the finite-difference
checker relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch

F32 = np.float32
F64 = np.float64


def _out_dtype(*arrays: np.ndarray) -> np.dtype:
    return np.result_type(*(a.dtype for a in arrays))


class Param:
    """A named, replaceable parameter value.  Hashing is by identity."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=F32)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def copy(self) -> Param:
        return Param(self.name, self.value.copy())

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


# --------------------------------------------------------------------------
# plain kernels
# --------------------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    dt = _out_dtype(a, b)
    return (a.astype(F64) @ b.astype(F64)).astype(dt)


def _normalize(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    d = x.shape[-1]
    x64 = x.astype(F64)
    xc = x64 - x64.sum(axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt((xc * xc).sum(axis=-1, keepdims=True) / d + eps)
    return xc * inv, inv


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """gamma * (x - mean) / sqrt(var + eps) + beta over the last axis (population variance)."""
    x = np.asarray(x)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if d < 1 or gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionMismatch(
            f"layer_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    xhat, _ = _normalize(x, eps)
    return (gamma.astype(F64) * xhat + beta.astype(F64)).astype(_out_dtype(x, gamma, beta))


def relu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return np.maximum(x, x.dtype.type(0))


def mse_loss(pred: np.ndarray, target: np.ndarray):
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionMismatch(f"mse_loss: pred {pred.shape} vs target {target.shape}")
    diff = pred.astype(F64) - target.astype(F64)
    return _out_dtype(pred, target).type(np.mean(diff * diff))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    dt = g.dtype
    g = g.astype(F64)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.astype(dt)


# --------------------------------------------------------------------------
# differentiable record
# --------------------------------------------------------------------------

class Node:
    __slots__ = ("value", "requires_grad", "record", "param")

    def __init__(self, value, requires_grad, record, param=None):
        self.value = value
        self.requires_grad = requires_grad
        self.record = record
        self.param = param

    @property
    def shape(self):
        return self.value.shape


class DiffRecord:
    """Log of primitive applications for one forward pass.

    Only parameters in ``trainable`` get gradients; everything else is treated
    as a constant, so frozen weights never show up in :func:`backward`'s map.
    With ``enabled=False`` nothing is logged (pure inference).
    """

    def __init__(self, trainable: Iterable[Param] = (), *, enabled: bool = True):
        self.enabled = enabled
        self.trainable = frozenset(trainable) if enabled else frozenset()
        self.tape: list[tuple[Node, tuple[Node, ...], Callable]] = []

    # leaves
    def param(self, p: Param) -> Node:
        return Node(p.value, p in self.trainable, self, p)

    def const(self, value) -> Node:
        return Node(np.asarray(value), False, self)

    def _emit(self, value, parents: tuple[Node, ...], vjp: Callable) -> Node:
        for p in parents:
            if p.record is not self:
                raise ValueError("operand was produced under a different DiffRecord")
        needs = tuple(p.requires_grad for p in parents)
        req = any(needs)
        out = Node(value, req, self)
        if req:
            self.tape.append((out, parents, lambda g: vjp(g, needs)))
        return out

    # primitives; each vjp(g, needs) returns one cotangent per parent, None where not needed
    def matmul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value

        def vjp(g, needs):
            return (matmul(g, bv.T) if needs[0] else None,
                    matmul(av.T, g) if needs[1] else None)

        return self._emit(matmul(av, bv), (a, b), vjp)

    def add(self, a: Node, b: Node) -> Node:
        sa, sb = a.value.shape, b.value.shape
        return self._emit(a.value + b.value, (a, b), lambda g, needs: (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None))

    def mul(self, a: Node, b: Node) -> Node:
        av, bv = a.value, b.value
        return self._emit(av * bv, (a, b), lambda g, needs: (
            _unbroadcast(g * bv, av.shape) if needs[0] else None,
            _unbroadcast(g * av, bv.shape) if needs[1] else None))

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        return self._emit(relu(x.value), (x,), lambda g, needs: (g * mask,))

    def layer_norm(self, x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
        xv, gv = x.value, gamma.value
        xhat, inv = _normalize(xv, eps)
        dt = _out_dtype(xv, gv, beta.value)
        y = (gv.astype(F64) * xhat + beta.value.astype(F64)).astype(dt)
        d = xv.shape[-1]

        def vjp(g, needs):
            g64 = g.astype(F64)
            dx = None
            if needs[0]:
                dxhat = g64 * gv.astype(F64)
                dx = (inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                                 - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))).astype(xv.dtype)
            dgamma = (g64 * xhat).reshape(-1, d).sum(axis=0).astype(dt) if needs[1] else None
            dbeta = g64.reshape(-1, d).sum(axis=0).astype(dt) if needs[2] else None
            return dx, dgamma, dbeta

        return self._emit(y, (x, gamma, beta), vjp)

    def mse(self, pred: Node, target: Node) -> Node:
        pv, tv = pred.value, target.value
        loss = np.asarray(mse_loss(pv, tv))

        def vjp(g, needs):
            scale = F64(g) * 2.0 / pv.size
            diff = pv.astype(F64) - tv.astype(F64)
            return ((scale * diff).astype(pv.dtype) if needs[0] else None,
                    (-scale * diff).astype(tv.dtype) if needs[1] else None)

        return self._emit(loss, (pred, target), vjp)

    def take_rows(self, x: Node, rows) -> Node:
        rows = np.asarray(rows, dtype=np.intp)
        xv = x.value

        def vjp(g, needs):
            out = np.zeros(xv.shape, dtype=F64)
            np.add.at(out, rows, g.astype(F64))
            return (out.astype(g.dtype),)

        return self._emit(xv[rows], (x,), vjp)

    def take_col(self, x: Node, j: int) -> Node:
        xv = x.value

        def vjp(g, needs):
            out = np.zeros(xv.shape, dtype=g.dtype)
            out[:, j:j + 1] = g
            return (out,)

        return self._emit(xv[:, j:j + 1], (x,), vjp)

    def stitch(self, parts: Sequence[Node], rows: Sequence[np.ndarray], n_rows: int) -> Node:
        """Inverse of several take_rows: place ``parts[k]`` at ``rows[k]``."""
        rows = [np.asarray(r, dtype=np.intp) for r in rows]
        dt = _out_dtype(*(p.value for p in parts))
        out = np.empty((n_rows,) + parts[0].value.shape[1:], dtype=dt)
        for p, r in zip(parts, rows):
            out[r] = p.value
        return self._emit(out, tuple(parts),
                          lambda g, needs: tuple(g[r] if n else None for r, n in zip(rows, needs)))


def backward(record: DiffRecord, loss: Node) -> dict[Param, np.ndarray]:
    """Reverse-mode sweep over ``record``; returns gradients of trainable params only."""
    if loss.record is not record:
        raise ValueError("loss was not produced under this DiffRecord")
    if loss.value.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")
    grads: dict[Param, np.ndarray] = {}
    if not loss.requires_grad:
        return grads
    pending: dict[Node, np.ndarray] = {loss: np.ones_like(loss.value)}

    def deliver(node: Node, g: np.ndarray):
        if node.param is not None:
            prev = grads.get(node.param)
            grads[node.param] = g if prev is None else prev + g
        else:
            prev = pending.get(node)
            pending[node] = g if prev is None else prev + g

    if loss.param is not None:
        deliver(loss, pending.pop(loss))
    for out, parents, vjp in reversed(record.tape):
        g = pending.pop(out, None)
        if g is None:
            continue
        for parent, gp in zip(parents, vjp(g)):
            if gp is not None:
                deliver(parent, gp.reshape(parent.value.shape))
    return grads


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: tuple[str, tuple[int, ...]] | None
    n_checked: int


def grad_check(loss_fn: Callable[[DiffRecord], Node], params: Sequence[Param],
               eps: float = 1e-3, tol: float = 1e-3) -> GradCheckReport:
    """Compare backprop against central differences on float64 copies of ``params``.

    ``loss_fn`` builds the loss under the record it is handed and must be
    deterministic.  Parameter values are restored before returning.
    """
    if not eps > 0:
        raise ValueError("grad_check: eps must be positive")
    originals = [p.value for p in params]
    try:
        for p in params:
            p.value = p.value.astype(F64)
        rec = DiffRecord(params)
        analytic = backward(rec, loss_fn(rec))

        def evaluate() -> float:
            return float(loss_fn(DiffRecord(enabled=False)).value)

        worst_err, worst, n = 0.0, None, 0
        for p in params:
            base = p.value
            ga = analytic.get(p, np.zeros_like(base))
            for idx in np.ndindex(base.shape):
                bumped = base.copy()
                bumped[idx] = base[idx] + eps
                p.value = bumped
                up = evaluate()
                bumped[idx] = base[idx] - eps
                down = evaluate()
                p.value = base
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise FloatingPointError(f"non-finite loss perturbing {p.name}{list(idx)}")
                num = (up - down) / (2 * eps)
                a = float(ga[idx])
                err = abs(a - num) / max(1e-8, abs(a), abs(num))
                n += 1
                if worst is None or err > worst_err:
                    worst_err, worst = err, (p.name, idx)
    finally:
        for p, v in zip(params, originals):
            p.value = v
    return GradCheckReport(worst_err, worst_err < tol, worst, n)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict[Param, np.ndarray] = field(default_factory=dict)
    v: dict[Param, np.ndarray] = field(default_factory=dict)
    t: dict[Param, int] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Iterable[Param], grads: Mapping[Param, np.ndarray],
              state: AdamState, hyper: AdamHyper = AdamHyper()) -> AdamState:
    """Bias-corrected Adam; parameters without a gradient entry are left alone."""
    allowed = set(params)
    for p in grads:
        if p not in allowed:
            raise KeyError(f"gradient for unknown parameter {p.name}")
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    for p, g in grads.items():
        if g.shape != p.value.shape:
            raise DimensionMismatch(f"adam: grad {g.shape} vs param {p.name} {p.value.shape}")
        g = g.astype(F32)
        m = state.m.get(p)
        if m is None:
            m = np.zeros_like(g)
            state.v[p] = np.zeros_like(g)
        t = state.t.get(p, 0) + 1
        m = F32(b1) * m + F32(1 - b1) * g
        v = F32(b2) * state.v[p] + F32(1 - b2) * (g * g)
        m_hat = m / F32(1 - b1 ** t)
        v_hat = v / F32(1 - b2 ** t)
        p.value = (p.value - F32(hyper.lr) * m_hat / (np.sqrt(v_hat) + F32(hyper.eps))).astype(F32)
        state.m[p], state.v[p], state.t[p] = m, v, t
    return state
