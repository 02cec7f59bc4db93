"""Tape-based reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every primitive application in execution order, so
node ids are already a topological order and ``backward`` is a single sweep
from the loss towards the leaves.  Only the handful of primitives the
multi-task network needs are provided, each with a hand-written reverse rule.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np


class ShapeError(ValueError):
    pass


def _sigmoid(x):
    # tanh form is overflow-free and a single ufunc pass
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(kind, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


@dataclass
class Primitive:
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., list]
    arity: int | None = None


# --- forward / reverse rules -------------------------------------------------
# forward(values, **attrs) -> (output, cache)
# backward(g, values, out, cache, **attrs) -> list of input gradients


def _matmul_fwd(vals):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, None


def _matmul_bwd(g, vals, out, cache):
    a, b = vals
    return [g @ b.T, a.T @ g]


def _add_fwd(vals):
    a, b = vals
    _broadcast_check("add", a, b)
    return a + b, None


def _add_bwd(g, vals, out, cache):
    a, b = vals
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _mul_fwd(vals):
    a, b = vals
    _broadcast_check("mul", a, b)
    return a * b, None


def _mul_bwd(g, vals, out, cache):
    a, b = vals
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _concat_fwd(vals, axis=-1):
    ref = vals[0].shape
    for v in vals[1:]:
        if v.ndim != len(ref) or np.delete(v.shape, axis).tolist() != np.delete(ref, axis).tolist():
            raise ShapeError(f"concat: incompatible shapes {ref} and {v.shape}")
    return np.concatenate(vals, axis=axis), None


def _concat_bwd(g, vals, out, cache, axis=-1):
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return list(np.split(g, bounds, axis=axis))


def _sigmoid_fwd(vals):
    return _sigmoid(vals[0]), None


def _sigmoid_bwd(g, vals, out, cache):
    return [g * out * (1.0 - out)]


def _tanh_fwd(vals):
    return np.tanh(vals[0]), None


def _tanh_bwd(g, vals, out, cache):
    return [g * (1.0 - out * out)]


def _mean_time_fwd(vals):
    x = vals[0]
    if x.ndim != 2:
        raise ShapeError(f"mean_time: expected a [T x d] matrix, got shape {x.shape}")
    return x.mean(axis=0, keepdims=True), None


def _mean_time_bwd(g, vals, out, cache):
    x = vals[0]
    return [np.broadcast_to(g / x.shape[0], x.shape).copy()]


def _softmax_xent_fwd(vals, targets):
    logits = vals[0]
    rows = np.atleast_2d(logits)
    targets = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if targets.shape != (rows.shape[0],):
        raise ShapeError(
            f"softmax_xent: incompatible shapes {logits.shape} and targets {targets.shape}"
        )
    if targets.min() < 0 or targets.max() >= rows.shape[1]:
        raise ShapeError(f"softmax_xent: target index out of range for shape {logits.shape}")
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    n = rows.shape[0]
    loss = -log_p[np.arange(n), targets].mean()
    return np.array([loss]), (np.exp(log_p), targets)


def _softmax_xent_bwd(g, vals, out, cache, targets):
    probs, idx = cache
    n = probs.shape[0]
    d = probs.copy()
    d[np.arange(n), idx] -= 1.0
    d *= g[0] / n
    return [d.reshape(vals[0].shape)]


def _squared_error_fwd(vals, target):
    pred = vals[0]
    target = np.asarray(target, dtype=np.float64)
    _broadcast_check("squared_error", pred, target)
    diff = pred - target
    return np.array([np.sum(diff * diff)]), diff


def _squared_error_bwd(g, vals, out, diff, target):
    return [_unbroadcast(2.0 * g[0] * diff, vals[0].shape)]


def _scale_shift_fwd(vals, scale, shift=0.0):
    return scale * vals[0] + shift, None


def _scale_shift_bwd(g, vals, out, cache, scale, shift=0.0):
    return [scale * g]


def _gather_fwd(vals, ids):
    table = vals[0]
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"gather: incompatible shapes {table.shape} and ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather: id out of range for table of shape {table.shape}")
    return table[ids], ids


def _gather_bwd(g, vals, out, cache, ids):
    d = np.zeros_like(vals[0])
    np.add.at(d, cache, g)
    return [d]


def _slice_fwd(vals, start, stop, axis):
    x = vals[0]
    if x.ndim != 2 or not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice: range [{start}, {stop}) invalid for shape {x.shape}")
    return (x[start:stop] if axis == 0 else x[:, start:stop]).copy(), None


def _slice_bwd(g, vals, out, cache, start, stop, axis):
    d = np.zeros_like(vals[0])
    if axis == 0:
        d[start:stop] = g
    else:
        d[:, start:stop] = g
    return [d]


def _lstm_run(xw, u):
    """Run the recurrence over pre-projected inputs ``xw`` ([T x 4H])."""
    n, four_h = xw.shape
    hd = four_h // 4
    h = np.zeros(hd)
    c = np.zeros(hd)
    hs = np.empty((n, hd))
    cs = np.empty((n, hd))
    gates = np.empty((n, four_h))
    for t in range(n):
        z = xw[t] + h @ u
        gt = gates[t]
        gt[: 3 * hd] = 0.5 * (1.0 + np.tanh(0.5 * z[: 3 * hd]))
        gt[3 * hd :] = np.tanh(z[3 * hd :])
        c = gt[hd : 2 * hd] * c + gt[:hd] * gt[3 * hd :]
        h = gt[2 * hd : 3 * hd] * np.tanh(c)
        hs[t] = h
        cs[t] = c
    return hs, cs, gates


def _lstm_seq_fwd(vals, reverse=False):
    x, w, u, b = vals
    hd = u.shape[0]
    if (
        x.ndim != 2
        or w.shape != (x.shape[1], 4 * hd)
        or u.shape != (hd, 4 * hd)
        or b.size != 4 * hd
    ):
        raise ShapeError(
            f"lstm_seq: incompatible shapes x={x.shape} w={w.shape} u={u.shape} b={b.shape}"
        )
    xs = x[::-1] if reverse else x
    hs, cs, gates = _lstm_run(xs @ w + b.reshape(1, -1), u)
    out = hs[::-1].copy() if reverse else hs
    return out, (xs, hs, cs, gates)


def _lstm_seq_bwd(gout, vals, out, cache, reverse=False):
    x, w, u, b = vals
    xs, hs, cs, gates = cache
    g_h = gout[::-1] if reverse else gout
    n, hd = hs.shape
    i, f, o, g = (gates[:, k * hd : (k + 1) * hd] for k in range(4))
    tc = np.tanh(cs)
    c_prev = np.vstack([np.zeros((1, hd)), cs[:-1]])
    # dz = [dc, dc, dh, dc] * coef, row by row
    coef = np.hstack([g * i * (1 - i), c_prev * f * (1 - f), tc * o * (1 - o), i * (1 - g * g)])
    dc_from_dh = o * (1 - tc * tc)
    dz = np.empty_like(gates)
    ut = u.T.copy()
    dh = np.zeros(hd)
    dc = np.zeros(hd)
    for t in range(n - 1, -1, -1):
        dh = g_h[t] + dh
        dc = dc + dh * dc_from_dh[t]
        dzt = np.concatenate((dc, dc, dh, dc))
        dzt *= coef[t]
        dz[t] = dzt
        dc = dc * f[t]
        dh = dzt @ ut
    h_prev = np.vstack([np.zeros((1, hd)), hs[:-1]])
    dx = dz @ w.T
    if reverse:
        dx = dx[::-1].copy()
    return [dx, xs.T @ dz, h_prev.T @ dz, dz.sum(axis=0).reshape(b.shape)]


PRIMITIVES: dict[str, Primitive] = {
    "matmul": Primitive(_matmul_fwd, _matmul_bwd, 2),
    "add": Primitive(_add_fwd, _add_bwd, 2),
    "mul": Primitive(_mul_fwd, _mul_bwd, 2),
    "concat": Primitive(_concat_fwd, _concat_bwd),
    "sigmoid": Primitive(_sigmoid_fwd, _sigmoid_bwd, 1),
    "tanh": Primitive(_tanh_fwd, _tanh_bwd, 1),
    "mean_time": Primitive(_mean_time_fwd, _mean_time_bwd, 1),
    "softmax_xent": Primitive(_softmax_xent_fwd, _softmax_xent_bwd, 1),
    "squared_error": Primitive(_squared_error_fwd, _squared_error_bwd, 1),
    "scale_shift": Primitive(_scale_shift_fwd, _scale_shift_bwd, 1),
    "gather": Primitive(_gather_fwd, _gather_bwd, 1),
    "slice": Primitive(_slice_fwd, _slice_bwd, 1),
    "lstm_seq": Primitive(_lstm_seq_fwd, _lstm_seq_bwd, 4),
}


@contextlib.contextmanager
def override_backward(kind: str, rule: Callable[..., list]):
    """Temporarily swap the reverse rule of a primitive (used for negative controls)."""
    original = PRIMITIVES[kind]
    PRIMITIVES[kind] = Primitive(original.forward, rule, original.arity)
    try:
        yield
    finally:
        PRIMITIVES[kind] = original


class Tape:
    """Define-by-run record of a computation; rebuild one per essay."""

    def __init__(self) -> None:
        self.kinds: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.attrs: list[dict] = []
        self._caches: list[Any] = []
        self.leaf_names: dict[int, str] = {}

    def __len__(self) -> int:
        return len(self.values)

    def leaf(self, value, name: str | None = None) -> int:
        node = self._push("leaf", (), np.asarray(value, dtype=np.float64), {}, None)
        if name is not None:
            self.leaf_names[node] = name
        return node

    def apply(self, kind: str, inputs, **attrs) -> int:
        if kind not in PRIMITIVES:
            raise KeyError(f"unknown primitive {kind!r}")
        prim = PRIMITIVES[kind]
        inputs = tuple(int(i) for i in inputs)
        if prim.arity is not None and len(inputs) != prim.arity:
            raise ShapeError(f"{kind}: expected {prim.arity} inputs, got {len(inputs)}")
        out, cache = prim.forward([self.values[i] for i in inputs], **attrs)
        return self._push(kind, inputs, out, attrs, cache)

    def _push(self, kind, inputs, value, attrs, cache) -> int:
        self.kinds.append(kind)
        self.inputs.append(inputs)
        self.values.append(value)
        self.attrs.append(attrs)
        self._caches.append(cache)
        return len(self.values) - 1

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    # thin named wrappers keep model code readable
    def matmul(self, a, b):
        return self.apply("matmul", (a, b))

    def add(self, a, b):
        return self.apply("add", (a, b))

    def mul(self, a, b):
        return self.apply("mul", (a, b))

    def concat(self, *xs, axis=-1):
        return self.apply("concat", xs, axis=axis)

    def sigmoid(self, x):
        return self.apply("sigmoid", (x,))

    def tanh(self, x):
        return self.apply("tanh", (x,))

    def mean_time(self, x):
        return self.apply("mean_time", (x,))

    def softmax_xent(self, logits, targets):
        return self.apply("softmax_xent", (logits,), targets=np.asarray(targets, dtype=np.int64))

    def squared_error(self, pred, target):
        return self.apply("squared_error", (pred,), target=np.asarray(target, dtype=np.float64))

    def scale_shift(self, x, scale, shift=0.0):
        return self.apply("scale_shift", (x,), scale=float(scale), shift=float(shift))

    def gather(self, table, ids):
        return self.apply("gather", (table,), ids=np.asarray(ids, dtype=np.int64))

    def slice_rows(self, x, start, stop):
        return self.apply("slice", (x,), start=start, stop=stop, axis=0)

    def slice_cols(self, x, start, stop):
        return self.apply("slice", (x,), start=start, stop=stop, axis=1)

    def lstm_seq(self, x, w, u, b, reverse=False):
        return self.apply("lstm_seq", (x, w, u, b), reverse=reverse)

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Gradients of the scalar ``loss`` with respect to every node it depends on.

        Leaves the loss does not reach are reported with a zero gradient.
        """
        if self.values[loss].size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.values[loss].shape}")
        grads: dict[int, np.ndarray] = {loss: np.ones_like(self.values[loss])}
        for node in range(loss, -1, -1):
            g = grads.get(node)
            if g is None or self.kinds[node] == "leaf":
                continue
            ins = self.inputs[node]
            rule = PRIMITIVES[self.kinds[node]].backward
            in_grads = rule(
                g, [self.values[i] for i in ins], self.values[node], self._caches[node],
                **self.attrs[node],
            )
            for i, gi in zip(ins, in_grads):
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        for node, kind in enumerate(self.kinds):
            if kind == "leaf" and node not in grads:
                grads[node] = np.zeros_like(self.values[node])
        return grads


# --- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    primitives: frozenset = frozenset()

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    @property
    def failing(self) -> list[str]:
        return [k for k, v in self.errors.items() if v > self.tolerance]

    def __str__(self) -> str:
        status = "pass" if self.passed else "FAIL"
        line = f"{self.name}: {status} max_rel_err={self.max_error:.3e} tol={self.tolerance:.0e}"
        if not self.passed:
            line += " failing=" + ",".join(self.failing)
        return line


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; two (near-)zero gradients compare as equal."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if den < 1e-12:
        return float(num)
    return float(num / den)


def grad_check(
    build: Callable[[Tape, dict[str, int]], int],
    params: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    name: str = "grad_check",
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``build(tape, leaves)`` must deterministically construct the loss from the
    leaf node ids in ``leaves`` and return the loss node.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def run(values):
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in values.items()}
        return tape, leaves, build(tape, leaves)

    tape, leaves, loss = run(params)
    grads = tape.backward(loss)
    report = GradCheckReport(name=name, tolerance=tolerance, primitives=frozenset(tape.kinds) - {"leaf"})
    for key, value in params.items():
        numeric = np.zeros_like(value)
        flat = value.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            t_plus, _, l_plus = run(params)
            flat[j] = orig - h
            t_minus, _, l_minus = run(params)
            flat[j] = orig
            numeric.reshape(-1)[j] = (t_plus.value(l_plus)[0] - t_minus.value(l_minus)[0]) / (2 * h)
        report.errors[key] = relative_error(grads[leaves[key]], numeric)
    return report


def _random_case(kind: str, rng: np.random.Generator):
    """Random inputs (magnitude <= 1) and a loss builder exercising one primitive."""
    u = lambda *shape: rng.uniform(-1.0, 1.0, size=shape)  # noqa: E731
    # weight every output by a fixed random array so the loss is scalar
    weights: dict[tuple, np.ndarray] = {}

    def reduce(tape, node):
        shape = tape.value(node).shape
        if shape not in weights:
            weights[shape] = rng.uniform(-1.0, 1.0, size=shape)
        return tape.squared_error(tape.mul(node, tape.leaf(weights[shape])), 0.0)

    if kind == "matmul":
        params = {"a": u(3, 4), "b": u(4, 2)}
        body = lambda t, p: t.matmul(p["a"], p["b"])  # noqa: E731
    elif kind == "add":
        params = {"a": u(3, 4), "b": u(1, 4)}
        body = lambda t, p: t.add(p["a"], p["b"])  # noqa: E731
    elif kind == "mul":
        params = {"a": u(3, 4), "b": u(3, 4)}
        body = lambda t, p: t.mul(p["a"], p["b"])  # noqa: E731
    elif kind == "concat":
        params = {"a": u(3, 2), "b": u(3, 3)}
        body = lambda t, p: t.concat(p["a"], p["b"])  # noqa: E731
    elif kind in ("sigmoid", "tanh"):
        params = {"x": u(3, 4)}
        body = lambda t, p: t.apply(kind, (p["x"],))  # noqa: E731
    elif kind == "mean_time":
        params = {"x": u(5, 3)}
        body = lambda t, p: t.mean_time(p["x"])  # noqa: E731
    elif kind == "softmax_xent":
        targets = rng.integers(0, 5, size=4)
        params = {"logits": u(4, 5)}
        return params, lambda t, p: t.softmax_xent(p["logits"], targets)
    elif kind == "squared_error":
        target = u(2, 3)
        params = {"x": u(2, 3)}
        return params, lambda t, p: t.squared_error(p["x"], target)
    elif kind == "scale_shift":
        scale, shift = rng.uniform(-2, 2, size=2)
        params = {"x": u(2, 3)}
        body = lambda t, p: t.scale_shift(p["x"], scale, shift)  # noqa: E731
    elif kind == "gather":
        ids = rng.integers(0, 4, size=6)
        params = {"table": u(4, 3)}
        body = lambda t, p: t.gather(p["table"], ids)  # noqa: E731
    elif kind == "slice":
        params = {"x": u(5, 4)}
        body = lambda t, p: t.slice_cols(t.slice_rows(p["x"], 1, 4), 1, 3)  # noqa: E731
    elif kind == "lstm_seq":
        reverse = bool(rng.integers(2))
        params = {"x": u(4, 3), "w": u(3, 8), "u": u(2, 8), "b": u(1, 8)}
        body = lambda t, p: t.lstm_seq(p["x"], p["w"], p["u"], p["b"], reverse=reverse)  # noqa: E731
    else:
        raise KeyError(kind)
    return params, lambda t, p: reduce(t, body(t, p))


def check_primitive(kind: str, seed: int = 0, tolerance: float = 1e-4) -> GradCheckReport:
    """Finite-difference check of a single primitive on seeded random inputs."""
    rng = np.random.default_rng(seed)
    params, build = _random_case(kind, rng)
    report = grad_check(build, params, tolerance=tolerance, name=kind)
    return report
