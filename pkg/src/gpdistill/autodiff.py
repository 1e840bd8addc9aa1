"""Reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Tape` is an append-only record of a computation: every operation
pushes one node holding its forward value, the indices of its parent nodes,
and one vector-Jacobian closure per parent.  Because nodes are appended in
execution order, the node list *is* a topological order, and
:meth:`Tape.backward` visits each node exactly once in reverse to accumulate
adjoints.

Design rules:

* every node value is a float64 ndarray (0-d for scalars) and is checked
  finite at creation; a non-finite forward value raises NumericalError at the
  op that produced it rather than poisoning downstream math;
* gradients only flow into nodes created via :meth:`Tape.parameter` (or
  derived from them), so constants cost no backward work;
* all forward math is plain numpy executed eagerly, which keeps replays of
  the same graph bitwise deterministic.

The convolution/pooling/normalization forward helpers are shared with the
plain (tape-free) evaluation paths in :mod:`gpdistill.nets` so both paths are
bit-identical by construction.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    DegenerateInputError,
    NumericalError,
    ParameterError,
    ShapeError,
)

__all__ = ["Tape", "Var", "conv2d_value", "l2_normalize_rows_value"]

Array = np.ndarray

#: rows with L2 norm below this are considered degenerate for normalization
NORM_FLOOR = 1e-12


class Var:
    """Handle to one node on a tape."""

    __slots__ = ("tape", "i")

    def __init__(self, tape: "Tape", i: int):
        self.tape = tape
        self.i = i

    @property
    def value(self) -> Array:
        return self.tape.values[self.i]

    @property
    def shape(self) -> tuple:
        return self.tape.values[self.i].shape

    # arithmetic sugar; scalars/ndarrays are wrapped as constants
    def __add__(self, other):
        return self.tape.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        return self.tape.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, other)

    def __rtruediv__(self, other):
        return self.tape.div(other, self)

    def __neg__(self):
        return self.tape.neg(self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Reduce gradient ``g`` back down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def conv2d_value(x: Array, k: Array, bias: Array | None, stride: int) -> Array:
    """Valid (unpadded) 2-D convolution, shared by tape and plain paths.

    x: (B, C_in, H, W); k: (C_out, C_in, kh, kw); bias: (C_out,) or None.
    """
    b_n, c_in, h, w = x.shape
    c_out, c_in_k, kh, kw = k.shape
    if c_in != c_in_k:
        raise ShapeError(f"conv2d: channel mismatch, input {c_in} vs kernel {c_in_k}")
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    if h < kh or w < kw or oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} at stride {stride}"
        )
    out = np.zeros((b_n, c_out, oh, ow))
    for i in range(kh):
        for j in range(kw):
            sub = x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
            out += np.einsum("oc,bcyx->boyx", k[:, :, i, j], sub, optimize=True)
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def l2_normalize_rows_value(a: Array) -> tuple[Array, Array]:
    """Row-normalize a (B, D) array; returns (normalized, row_norms)."""
    norms = np.sqrt(np.sum(a * a, axis=1))
    if np.any(norms < NORM_FLOOR):
        raise DegenerateInputError(
            "l2_normalize_rows: a row has (numerically) zero norm"
        )
    return a / norms[:, None], norms


class Tape:
    """Append-only computation record supporting one reverse sweep."""

    def __init__(self):
        self.values: list[Array] = []
        self.parents: list[tuple[int, ...]] = []
        self.vjps: list[tuple[Callable[[Array], Array], ...]] = []
        self.needs: list[bool] = []

    def __len__(self) -> int:
        return len(self.values)

    # ------------------------------------------------------------------ core

    def _push(self, value, parents=(), vjps=(), needs: bool | None = None) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NumericalError("tape: op produced a non-finite value")
        if needs is None:
            needs = any(self.needs[p] for p in parents)
        self.values.append(value)
        self.parents.append(tuple(parents))
        self.vjps.append(tuple(vjps))
        self.needs.append(bool(needs))
        return Var(self, len(self.values) - 1)

    def constant(self, x) -> Var:
        """Leaf that never receives a gradient."""
        return self._push(x, needs=False)

    def parameter(self, x) -> Var:
        """Leaf that participates in differentiation."""
        return self._push(x, needs=True)

    def _coerce(self, x) -> Var:
        if isinstance(x, Var):
            if x.tape is not self:
                raise ShapeError("tape: mixing nodes from different tapes")
            return x
        return self.constant(x)

    def backward(self, out: Var) -> list[Array | None]:
        """Adjoints of ``out`` w.r.t. every node; one reverse pass, each node
        visited exactly once in reverse creation (= topological) order.

        Returns a list aligned with node indices; entries are None for nodes
        the gradient never reaches.  ``out`` must be scalar.
        """
        if not isinstance(out, Var) or out.tape is not self:
            raise ShapeError("backward: output is not a node of this tape")
        if out.value.size != 1:
            raise ShapeError("backward: output must be scalar")
        adj: list[Array | None] = [None] * len(self.values)
        adj[out.i] = np.ones_like(out.value)
        for i in range(out.i, -1, -1):
            g = adj[i]
            if g is None or not self.needs[i]:
                continue
            for p, vjp in zip(self.parents[i], self.vjps[i]):
                if not self.needs[p]:
                    continue
                contrib = vjp(g)
                if adj[p] is None:
                    adj[p] = contrib
                else:
                    adj[p] = adj[p] + contrib
        return adj

    # ----------------------------------------------------------- arithmetic

    def add(self, a, b) -> Var:
        a, b = self._coerce(a), self._coerce(b)
        av, bv = a.value, b.value
        sa, sb = av.shape, bv.shape
        return self._push(
            av + bv,
            (a.i, b.i),
            (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)),
        )

    def sub(self, a, b) -> Var:
        a, b = self._coerce(a), self._coerce(b)
        av, bv = a.value, b.value
        sa, sb = av.shape, bv.shape
        return self._push(
            av - bv,
            (a.i, b.i),
            (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(-g, sb)),
        )

    def neg(self, a) -> Var:
        a = self._coerce(a)
        return self._push(-a.value, (a.i,), (lambda g: -g,))

    def mul(self, a, b) -> Var:
        a, b = self._coerce(a), self._coerce(b)
        av, bv = a.value, b.value
        sa, sb = av.shape, bv.shape
        return self._push(
            av * bv,
            (a.i, b.i),
            (
                lambda g: _unbroadcast(g * bv, sa),
                lambda g: _unbroadcast(g * av, sb),
            ),
        )

    def div(self, a, b) -> Var:
        a, b = self._coerce(a), self._coerce(b)
        av, bv = a.value, b.value
        sa, sb = av.shape, bv.shape
        return self._push(
            av / bv,
            (a.i, b.i),
            (
                lambda g: _unbroadcast(g / bv, sa),
                lambda g: _unbroadcast(-g * av / (bv * bv), sb),
            ),
        )

    def square(self, a) -> Var:
        a = self._coerce(a)
        av = a.value
        return self._push(av * av, (a.i,), (lambda g: g * (2.0 * av),))

    def log(self, a) -> Var:
        a = self._coerce(a)
        av = a.value
        if np.any(av <= 0.0):
            raise NumericalError("log: non-positive argument")
        return self._push(np.log(av), (a.i,), (lambda g: g / av,))

    def exp(self, a) -> Var:
        a = self._coerce(a)
        ev = np.exp(a.value)
        return self._push(ev, (a.i,), (lambda g: g * ev,))

    def maximum_const(self, a, c: float) -> Var:
        """Elementwise max(a, c) for scalar c; gradient is 0 on the clamp."""
        a = self._coerce(a)
        av = a.value
        mask = (av > c).astype(np.float64)
        return self._push(np.maximum(av, c), (a.i,), (lambda g: g * mask,))

    # -------------------------------------------------------------- tensors

    def matmul(self, a, b) -> Var:
        a, b = self._coerce(a), self._coerce(b)
        av, bv = a.value, b.value
        if av.ndim == 2 and bv.ndim == 2:
            if av.shape[1] != bv.shape[0]:
                raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
            return self._push(
                np.matmul(av, bv),
                (a.i, b.i),
                (lambda g: np.matmul(g, bv.T), lambda g: np.matmul(av.T, g)),
            )
        if av.ndim == 2 and bv.ndim == 1:
            if av.shape[1] != bv.shape[0]:
                raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
            return self._push(
                np.matmul(av, bv),
                (a.i, b.i),
                (lambda g: np.outer(g, bv), lambda g: np.matmul(av.T, g)),
            )
        if av.ndim == 1 and bv.ndim == 2:
            if av.shape[0] != bv.shape[0]:
                raise ShapeError(f"matmul: inner dims differ, {av.shape} @ {bv.shape}")
            return self._push(
                np.matmul(av, bv),
                (a.i, b.i),
                (lambda g: np.matmul(bv, g), lambda g: np.outer(av, g)),
            )
        raise ShapeError(f"matmul: unsupported ranks {av.ndim} and {bv.ndim}")

    def dot(self, a, b) -> Var:
        a, b = self._coerce(a), self._coerce(b)
        av, bv = a.value, b.value
        if av.ndim != 1 or bv.ndim != 1 or av.shape != bv.shape:
            raise ShapeError(f"dot: need equal-length vectors, {av.shape} vs {bv.shape}")
        return self._push(
            np.dot(av, bv), (a.i, b.i), (lambda g: g * bv, lambda g: g * av)
        )

    def outer(self, a, b) -> Var:
        a, b = self._coerce(a), self._coerce(b)
        av, bv = a.value, b.value
        if av.ndim != 1 or bv.ndim != 1:
            raise ShapeError("outer: need 1-D operands")
        return self._push(
            np.outer(av, bv),
            (a.i, b.i),
            (lambda g: np.matmul(g, bv), lambda g: np.matmul(av, g)),
        )

    def transpose(self, a) -> Var:
        a = self._coerce(a)
        if a.value.ndim != 2:
            raise ShapeError("transpose: need a 2-D operand")
        return self._push(a.value.T, (a.i,), (lambda g: g.T,))

    def reshape(self, a, shape: tuple) -> Var:
        a = self._coerce(a)
        orig = a.value.shape
        return self._push(
            a.value.reshape(shape), (a.i,), (lambda g: g.reshape(orig),)
        )

    def sum(self, a, axis: int | None = None) -> Var:
        a = self._coerce(a)
        av = a.value
        if axis is None:
            return self._push(
                np.sum(av), (a.i,), (lambda g: np.broadcast_to(g, av.shape).copy(),)
            )
        def vjp(g, axis=axis):
            return np.broadcast_to(np.expand_dims(g, axis), av.shape).copy()
        return self._push(np.sum(av, axis=axis), (a.i,), (vjp,))

    def mean(self, a, axis: int | None = None) -> Var:
        a = self._coerce(a)
        n = a.value.size if axis is None else a.value.shape[axis]
        return self.mul(self.sum(a, axis=axis), 1.0 / float(n))

    # -------------------------------------------------------- nonlinearities

    def relu(self, a) -> Var:
        a = self._coerce(a)
        av = a.value
        mask = (av > 0.0).astype(np.float64)
        return self._push(av * mask, (a.i,), (lambda g: g * mask,))

    def leaky_relu(self, a, alpha: float) -> Var:
        a = self._coerce(a)
        av = a.value
        slope = np.where(av > 0.0, 1.0, float(alpha))
        return self._push(av * slope, (a.i,), (lambda g: g * slope,))

    def tanh(self, a) -> Var:
        a = self._coerce(a)
        tv = np.tanh(a.value)
        return self._push(tv, (a.i,), (lambda g: g * (1.0 - tv * tv),))

    def sigmoid(self, a) -> Var:
        a = self._coerce(a)
        sv = 1.0 / (1.0 + np.exp(-a.value))
        return self._push(sv, (a.i,), (lambda g: g * sv * (1.0 - sv),))

    # ------------------------------------------------------- structured ops

    def conv2d(self, x, k, bias, stride: int = 1) -> Var:
        """Valid 2-D convolution; x (B,Cin,H,W), k (Cout,Cin,kh,kw), bias (Cout,)."""
        x, k = self._coerce(x), self._coerce(k)
        xv, kv = x.value, k.value
        if xv.ndim != 4 or kv.ndim != 4:
            raise ShapeError("conv2d: x must be 4-D and kernels 4-D")
        stride = int(stride)
        if stride < 1:
            raise ParameterError("conv2d: stride must be >= 1")
        parents = [x.i, k.i]
        bias_v = None
        if bias is not None:
            bias = self._coerce(bias)
            bias_v = bias.value
            parents.append(bias.i)
        out = conv2d_value(xv, kv, bias_v, stride)
        _, _, kh, kw = kv.shape
        _, _, oh, ow = out.shape

        def vjp_x(g):
            gx = np.zeros_like(xv)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                        np.einsum("oc,boyx->bcyx", kv[:, :, i, j], g, optimize=True)
                    )
            return gx

        def vjp_k(g):
            gk = np.zeros_like(kv)
            for i in range(kh):
                for j in range(kw):
                    sub = xv[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
                    gk[:, :, i, j] = np.einsum("boyx,bcyx->oc", g, sub, optimize=True)
            return gk

        vjps = [vjp_x, vjp_k]
        if bias_v is not None:
            vjps.append(lambda g: g.sum(axis=(0, 2, 3)))
        return self._push(out, tuple(parents), tuple(vjps))

    def sum_pool_hw(self, a) -> Var:
        """Sum a (B, C, H, W) node over its spatial axes -> (B, C)."""
        a = self._coerce(a)
        av = a.value
        if av.ndim != 4:
            raise ShapeError("sum_pool_hw: need a 4-D operand")
        return self._push(
            av.sum(axis=(2, 3)),
            (a.i,),
            (lambda g: np.broadcast_to(g[:, :, None, None], av.shape).copy(),),
        )

    def l2_normalize_rows(self, a) -> Var:
        """Normalize each row of a (B, D) node to unit L2 norm."""
        a = self._coerce(a)
        av = a.value
        if av.ndim != 2:
            raise ShapeError("l2_normalize_rows: need a 2-D operand")
        bv, norms = l2_normalize_rows_value(av)

        def vjp(g):
            proj = np.sum(g * bv, axis=1, keepdims=True)
            return (g - proj * bv) / norms[:, None]

        return self._push(bv, (a.i,), (vjp,))

    def solve_sym(self, s, b) -> Var:
        """Solve S X = B for a square (symmetric positive definite) S.

        Backward uses the adjoint of the solve: grad_B = S^{-T} grad_X and
        grad_S = -grad_B X^T, so no explicit inverse is ever formed.
        """
        s, b = self._coerce(s), self._coerce(b)
        sv, bv = s.value, b.value
        if sv.ndim != 2 or sv.shape[0] != sv.shape[1]:
            raise ShapeError(f"solve_sym: S must be square, got {sv.shape}")
        if bv.shape[0] != sv.shape[0] or bv.ndim not in (1, 2):
            raise ShapeError(f"solve_sym: rhs shape {bv.shape} does not match {sv.shape}")
        try:
            xv = np.linalg.solve(sv, bv)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"solve_sym: singular system ({exc})") from exc

        def vjp_b(g):
            return np.linalg.solve(sv.T, g)

        def vjp_s(g):
            gb = np.linalg.solve(sv.T, g)
            if bv.ndim == 1:
                return -np.outer(gb, xv)
            return -np.matmul(gb, xv.T)

        return self._push(xv, (s.i, b.i), (vjp_s, vjp_b))

    def cross_entropy_with_logits(self, logits, labels: Sequence[int]) -> Var:
        """Mean softmax cross-entropy of (B, L) logits against integer labels."""
        logits = self._coerce(logits)
        lv = logits.value
        if lv.ndim != 2:
            raise ShapeError("cross_entropy_with_logits: logits must be (B, L)")
        y = np.asarray(labels)
        if y.ndim != 1 or y.shape[0] != lv.shape[0]:
            raise ShapeError("cross_entropy_with_logits: labels must be (B,)")
        if y.dtype.kind not in "iu":
            raise ParameterError("cross_entropy_with_logits: labels must be integers")
        if np.any(y < 0) or np.any(y >= lv.shape[1]):
            raise ParameterError("cross_entropy_with_logits: label out of range")
        b_n = lv.shape[0]
        m = lv.max(axis=1, keepdims=True)
        z = np.exp(lv - m)
        denom = z.sum(axis=1, keepdims=True)
        log_probs = (lv - m) - np.log(denom)
        loss = -float(np.mean(log_probs[np.arange(b_n), y]))
        softmax = z / denom

        def vjp(g):
            grad = softmax.copy()
            grad[np.arange(b_n), y] -= 1.0
            return g * grad / float(b_n)

        return self._push(loss, (logits.i,), (vjp,))
