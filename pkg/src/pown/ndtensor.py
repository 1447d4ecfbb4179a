"""Minimal dense/sparse matrix autodiff core.

Expressions form a DAG of 2-d float64 matrices. Building an expression is
cheap; `forward` fills the value cache bottom-up and `backward` accumulates
reverse-mode gradients into every parameter leaf. Graphs are meant to be
rebuilt after parameters change (one training step = one fresh graph).

Sparse matrices (CSR) appear only as constant leaves consumed by `spmm`;
everything differentiable is dense.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ContractViolation, NumericError, ShapeMismatchError

OP_TAGS = frozenset({
    "leaf", "matmul", "spmm", "add", "mul", "relu", "sigmoid", "log", "exp",
    "row-softmax", "row-l2-normalize", "reduce-mean", "reduce-sum",
    "slice-rows", "transpose", "scalar-scale", "dropout-mask-apply",
})


class Expr:
    """One node of the expression DAG."""

    __slots__ = ("op", "inputs", "value", "grad", "is_param", "name", "meta")

    def __init__(self, op, inputs=(), value=None, is_param=False, name=""):
        self.op = op
        self.inputs = tuple(inputs)
        self.value = value
        self.grad = None
        self.is_param = is_param
        self.name = name
        self.meta = {}

    def __repr__(self):
        shape = None if self.value is None else getattr(self.value, "shape", None)
        label = f" {self.name!r}" if self.name else ""
        return f"Expr({self.op}{label}, shape={shape})"


def _as_matrix(data):
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeMismatchError(f"expected a matrix, got ndim={arr.ndim}")
    return arr


def parameter(data, name=""):
    """Trainable dense leaf."""
    return Expr("leaf", value=_as_matrix(data), is_param=True, name=name)


def constant(data, name=""):
    """Non-trainable dense leaf."""
    return Expr("leaf", value=_as_matrix(data), name=name)


def sparse_constant(matrix, name=""):
    """Non-trainable CSR leaf; only valid as the left operand of spmm."""
    csr = sp.csr_matrix(matrix, dtype=np.float64)
    return Expr("leaf", value=csr, name=name)


def matmul(a, b):
    return Expr("matmul", (a, b))


def spmm(s, b):
    if s.op != "leaf" or not sp.issparse(s.value):
        raise ContractViolation("spmm: left operand must be a sparse constant leaf")
    return Expr("spmm", (s, b))


def add(a, b):
    return Expr("add", (a, b))


def mul(a, b):
    return Expr("mul", (a, b))


def relu(a):
    return Expr("relu", (a,))


def sigmoid(a):
    return Expr("sigmoid", (a,))


def log(a):
    return Expr("log", (a,))


def exp(a):
    return Expr("exp", (a,))


def row_softmax(a):
    return Expr("row-softmax", (a,))


def row_l2_normalize(a):
    return Expr("row-l2-normalize", (a,))


def reduce_mean(a):
    return Expr("reduce-mean", (a,))


def reduce_sum(a):
    return Expr("reduce-sum", (a,))


def slice_rows(a, rows):
    node = Expr("slice-rows", (a,))
    node.meta["rows"] = np.asarray(rows, dtype=np.intp)
    return node


def transpose(a):
    return Expr("transpose", (a,))


def scalar_scale(a, c):
    node = Expr("scalar-scale", (a,))
    node.meta["scale"] = float(c)
    return node


def dropout_mask_apply(a, mask):
    """Multiply by a precomputed keep mask (already scaled by 1/(1-rate))."""
    node = Expr("dropout-mask-apply", (a,))
    node.meta["mask"] = np.asarray(mask, dtype=np.float64)
    return node


def dropout_mask(shape, rate, rng):
    """Sample an inverted-dropout mask: 0 with probability `rate`, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ContractViolation(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    return (rng.random(shape) >= rate) / (1.0 - rate)


def clamp_min(a, floor):
    """max(a, floor), built from listed ops; gradient is zero below the floor."""
    shifted = add(a, constant([[-float(floor)]]))
    return add(relu(shifted), constant([[float(floor)]]))


def one_minus(a):
    return add(scalar_scale(a, -1.0), constant([[1.0]]))


def _topo(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.inputs:
            stack.append((parent, False))
    return order


def _check_finite(node):
    value = node.value
    data = value.data if sp.issparse(value) else value
    if not np.isfinite(data).all():
        raise NumericError(f"{node.op}: produced non-finite values")


def _binary_shapes(op, a, b):
    """Validate add/mul shapes: equal, or one side a 1x1 / row / column vector."""
    sa, sb = a.shape, b.shape
    ok = (
        sa == sb
        or (sb == (1, 1) or sa == (1, 1))
        or (sb[0] == 1 and sb[1] == sa[1])
        or (sb[1] == 1 and sb[0] == sa[0])
        or (sa[0] == 1 and sa[1] == sb[1])
        or (sa[1] == 1 and sa[0] == sb[0])
    )
    if not ok:
        raise ShapeMismatchError(f"{op}: incompatible shapes {sa} and {sb}")


def _compute(node):
    op = node.op
    vals = [p.value for p in node.inputs]
    if op == "matmul":
        a, b = vals
        if a.shape[1] != b.shape[0]:
            raise ShapeMismatchError(
                f"matmul: inner dimensions {a.shape} x {b.shape}")
        return a @ b
    if op == "spmm":
        s, b = vals
        if s.shape[1] != b.shape[0]:
            raise ShapeMismatchError(f"spmm: inner dimensions {s.shape} x {b.shape}")
        return np.asarray(s @ b)
    if op == "add":
        _binary_shapes("add", *vals)
        return vals[0] + vals[1]
    if op == "mul":
        _binary_shapes("mul", *vals)
        return vals[0] * vals[1]
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "sigmoid":
        x = vals[0]
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if op == "log":
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.log(vals[0])
    if op == "exp":
        return np.exp(vals[0])
    if op == "row-softmax":
        x = vals[0]
        shifted = x - x.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)
    if op == "row-l2-normalize":
        x = vals[0]
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        zero = norms[:, 0] == 0.0
        if zero.any():
            node.meta["zero_rows"] = np.flatnonzero(zero)
        safe = np.where(norms == 0.0, 1.0, norms)
        return x / safe
    if op == "reduce-mean":
        return np.array([[vals[0].mean()]])
    if op == "reduce-sum":
        return np.array([[vals[0].sum()]])
    if op == "slice-rows":
        rows = node.meta["rows"]
        if rows.size and (rows.min() < 0 or rows.max() >= vals[0].shape[0]):
            raise ShapeMismatchError("slice-rows: row index out of range")
        return vals[0][rows]
    if op == "transpose":
        return vals[0].T.copy()
    if op == "scalar-scale":
        return node.meta["scale"] * vals[0]
    if op == "dropout-mask-apply":
        mask = node.meta["mask"]
        if mask.shape != vals[0].shape:
            raise ShapeMismatchError(
                f"dropout-mask-apply: mask {mask.shape} vs value {vals[0].shape}")
        return vals[0] * mask
    raise ContractViolation(f"unknown op {op!r}")


def forward(root):
    """Fill the value cache of every node reachable from `root`; return its value."""
    for node in _topo(root):
        if node.value is None:
            if node.op == "leaf":
                raise ContractViolation("forward: leaf without a value")
            node.value = _compute(node)
            _check_finite(node)
        elif node.op == "leaf":
            _check_finite(node)
    return root.value


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _accumulate(node, target, contribution):
    if sp.issparse(target.value):
        return  # sparse leaves are constants; nothing propagates into them
    contribution = _unbroadcast(contribution, target.value.shape)
    if target.grad is None:
        target.grad = contribution.copy()
    else:
        target.grad += contribution


def _backprop(node):
    g = node.grad
    op = node.op
    ins = node.inputs
    if op == "matmul":
        a, b = ins
        _accumulate(node, a, g @ b.value.T)
        _accumulate(node, b, a.value.T @ g)
    elif op == "spmm":
        s, b = ins
        _accumulate(node, b, np.asarray(s.value.T @ g))
    elif op == "add":
        a, b = ins
        _accumulate(node, a, g)
        _accumulate(node, b, g)
    elif op == "mul":
        a, b = ins
        _accumulate(node, a, g * b.value)
        _accumulate(node, b, g * a.value)
    elif op == "relu":
        (a,) = ins
        _accumulate(node, a, g * (a.value > 0.0))
    elif op == "sigmoid":
        (a,) = ins
        y = node.value
        _accumulate(node, a, g * y * (1.0 - y))
    elif op == "log":
        (a,) = ins
        _accumulate(node, a, g / a.value)
    elif op == "exp":
        (a,) = ins
        _accumulate(node, a, g * node.value)
    elif op == "row-softmax":
        (a,) = ins
        y = node.value
        inner = (g * y).sum(axis=1, keepdims=True)
        _accumulate(node, a, y * (g - inner))
    elif op == "row-l2-normalize":
        (a,) = ins
        x = a.value
        y = node.value
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        safe = np.where(norms == 0.0, 1.0, norms)
        dot = (y * g).sum(axis=1, keepdims=True)
        grad_in = (g - y * dot) / safe
        grad_in[norms[:, 0] == 0.0] = 0.0
        _accumulate(node, a, grad_in)
    elif op == "reduce-mean":
        (a,) = ins
        _accumulate(node, a, np.full(a.value.shape, g[0, 0] / a.value.size))
    elif op == "reduce-sum":
        (a,) = ins
        _accumulate(node, a, np.full(a.value.shape, g[0, 0]))
    elif op == "slice-rows":
        (a,) = ins
        scatter = np.zeros_like(a.value)
        np.add.at(scatter, node.meta["rows"], g)
        _accumulate(node, a, scatter)
    elif op == "transpose":
        (a,) = ins
        _accumulate(node, a, g.T)
    elif op == "scalar-scale":
        (a,) = ins
        _accumulate(node, a, node.meta["scale"] * g)
    elif op == "dropout-mask-apply":
        (a,) = ins
        _accumulate(node, a, g * node.meta["mask"])
    elif op != "leaf":
        raise ContractViolation(f"unknown op {op!r}")


def backward(root):
    """Reverse pass from a scalar root; returns {parameter leaf: gradient}."""
    if root.value is None:
        forward(root)
    if root.value.shape != (1, 1):
        raise ContractViolation(
            f"backward: root must be 1x1 scalar, got {root.value.shape}")
    order = _topo(root)
    for node in order:
        node.grad = None
    root.grad = np.ones((1, 1))
    grads = {}
    for node in reversed(order):
        if node.grad is not None and node.op != "leaf":
            _backprop(node)
    for node in order:
        if node.is_param:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            grads[node] = node.grad
    return grads


@dataclass
class AdamState:
    """Per-parameter Adam moments plus shared step settings."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractViolation("learning_rate must be positive")


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place to each parameter leaf.

    Aborts (without mutating anything) if any gradient is non-finite.
    """
    params = list(params)
    for p in params:
        g = grads[p]
        if g.shape != p.value.shape:
            raise ShapeMismatchError(
                f"adam_step: grad {g.shape} vs param {p.value.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"adam_step: non-finite gradient for {p.name or p!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p in params:
        g = grads[p]
        m = state.first_moment.setdefault(p, np.zeros_like(p.value))
        v = state.second_moment.setdefault(p, np.zeros_like(p.value))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.value -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    worst: tuple = ()


def grad_check(build, params, tolerance=1e-4, step=1e-5):
    """Compare analytic gradients against central finite differences.

    `build` must construct a fresh scalar expression over the given parameter
    leaves each time it is called. Relative error uses the denominator
    max(|analytic|, |numeric|, 1), so tiny gradients are compared absolutely.
    """
    root = build()
    forward(root)
    grads = backward(root)
    max_rel, worst = 0.0, ()
    for p in params:
        analytic = grads[p]
        for idx in np.ndindex(p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + step
            f_plus = forward(build())[0, 0]
            p.value[idx] = orig - step
            f_minus = forward(build())[0, 0]
            p.value[idx] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(analytic[idx] - numeric) / max(
                abs(analytic[idx]), abs(numeric), 1.0)
            if rel > max_rel:
                max_rel, worst = rel, (p.name or "param", idx)
    return GradCheckReport(max_rel, tolerance, max_rel < tolerance, worst)
