"""Minimal reverse-mode autodiff over numpy arrays.

Each op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to input gradients. Node ids increase
monotonically, so sorting reachable nodes by id gives a topological order and
makes gradient accumulation deterministic.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE_NAMES = {
    np.dtype(np.float32): "f32",
    np.dtype(np.float64): "f64",
    np.dtype(np.int32): "i32",
    np.dtype(np.uint8): "u8",
}

_ids = itertools.count()
_grad_enabled = True
_kink_log: list | None = None


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    """Dense array plus the bookkeeping needed for backprop."""

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data)
        if self.data.dtype not in DTYPE_NAMES:
            self.data = self.data.astype(np.float64 if self.data.dtype.kind == "f" else np.int32)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = parents
        self.backward_fn = backward_fn
        self.op = op
        self.id = next(_ids)
        self.degenerate: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self) -> str:
        return DTYPE_NAMES[self.data.dtype]

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _make(data, parents, backward_fn, op) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=tuple(parents), backward_fn=backward_fn, op=op)


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def cast(a: Tensor, dtype) -> Tensor:
    """Change precision; the gradient is cast back to the input dtype."""
    return _make(a.data.astype(dtype), (a,), lambda g: (g.astype(a.data.dtype),), "cast")


def add_many(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


def relu(x: Tensor) -> Tensor:
    if _kink_log is not None:
        _kink_log.append(np.sign(x.data))
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.data.dtype), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).astype(x.data.dtype),)

    return _make(np.asarray(out, dtype=x.data.dtype), (x,), bw, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return scale(sum(x), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def concat(xs: Sequence[Tensor], axis=0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), bw, "concat")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows ``x[idx]`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), bw, "gather_rows")


def take_range(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``x[start:stop]`` along the first axis."""

    def bw(g):
        out = np.zeros_like(x.data)
        out[start:stop] = g
        return (out,)

    return _make(x.data[start:stop], (x,), bw, "take_range")


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"rowwise_dot: shapes {a.shape} and {b.shape}")
    return sum(mul(a, b), axis=1)


# ---------------------------------------------------------------------------
# normalisation / probabilities


def l2_normalize(v: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale each vector along ``axis`` to unit length.

    Vectors with norm below ``eps`` come back as zeros; their positions are
    recorded in ``out.degenerate``.
    """
    norm = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    bad = norm < eps
    safe = np.where(bad, 1.0, norm).astype(v.data.dtype)
    y = np.where(bad, 0.0, v.data / safe).astype(v.data.dtype)

    def bw(g):
        proj = np.sum(y * g, axis=axis, keepdims=True)
        return (np.where(bad, 0.0, (g - y * proj) / safe).astype(v.data.dtype),)

    out = _make(y, (v,), bw, "l2_normalize")
    out.degenerate = np.squeeze(bad, axis=axis)
    return out


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _log_softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(logits.data, axis)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (logits,), bw, "softmax")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    y = _log_softmax_np(logits.data, axis)
    p = np.exp(y)

    def bw(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _make(y, (logits,), bw, "log_softmax")


def masked_cross_entropy(logits: Tensor, labels, ignore_id: int = 255) -> Tensor:
    """Mean per-pixel NLL over pixels whose label is not ``ignore_id``.

    ``logits`` is [N,C,H,W], ``labels`` [N,H,W]. An all-ignored batch gives a
    zero loss with zero gradient.
    """
    labels = np.asarray(labels)
    n, c = logits.shape[:2]
    if labels.shape != (n,) + logits.shape[2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    valid = labels != ignore_id
    if np.any(labels[valid] >= c):
        raise ShapeError("label id out of range")
    n_valid = int(valid.sum())
    dt = logits.data.dtype
    if n_valid == 0:
        return _make(np.zeros((), dt), (logits,), lambda g: (np.zeros_like(logits.data),), "masked_ce")
    logp = _log_softmax_np(logits.data, axis=1)
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -np.sum(picked[valid]) / n_valid

    def bw(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad = (grad - onehot) * valid[:, None] / n_valid
        return ((g * grad).astype(dt),)

    return _make(np.asarray(loss, dtype=dt), (logits,), bw, "masked_ce")


def info_nce(pos_logits: Tensor, neg_logits: Tensor, neg_mask) -> tuple[Tensor, int]:
    """Mean over anchors of ``-log(e^p / (e^p + sum_masked e^n))``.

    ``pos_logits`` is [A], ``neg_logits`` [A,M] and ``neg_mask`` a boolean
    [A,M] selecting each anchor's negatives. Anchors without any negative are
    dropped; the number dropped is returned alongside the loss.
    """
    mask = np.asarray(neg_mask, dtype=bool)
    a = pos_logits.shape[0]
    if neg_logits.shape != (a, mask.shape[1]) or mask.shape[0] != a:
        raise ShapeError("info_nce: inconsistent anchor/negative shapes")
    keep = mask.any(axis=1)
    dropped = int(a - keep.sum())
    n = int(keep.sum())
    dt = pos_logits.data.dtype
    if n == 0:
        zero = _make(np.zeros((), dt), (pos_logits, neg_logits),
                     lambda g: (np.zeros_like(pos_logits.data), np.zeros_like(neg_logits.data)), "info_nce")
        return zero, dropped
    # work with negative-minus-positive gaps so tiny losses keep full precision
    gap = np.where(mask, neg_logits.data - pos_logits.data[:, None], -np.inf)
    top = np.maximum(np.max(gap, axis=1), 0.0)
    e_pos = np.exp(-top)
    e_neg = np.where(mask, np.exp(gap - top[:, None]), 0.0)
    s = e_neg.sum(axis=1)
    denom = e_pos + s
    per_anchor = np.where(top > 0, top + np.log(denom), np.log1p(s))
    loss = np.sum(np.where(keep, per_anchor, 0.0)) / n

    def bw(g):
        w = g * keep / n
        gp = (e_pos / denom - 1.0) * w
        gn = e_neg / denom[:, None] * w[:, None]
        return gp.astype(dt), gn.astype(dt)

    return _make(np.asarray(loss, dtype=dt), (pos_logits, neg_logits), bw, "info_nce"), dropped


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int | None = None) -> Tensor:
    """Same-size 2-D cross-correlation with zero padding.

    x: [N,C,H,W], w: [C',C,k,k] with odd k, optional bias b: [C'].
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects rank-4 input and kernel")
    n, c, h, wd = x.shape
    co, ci, k, k2 = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ShapeError("conv2d: kernel must be square with odd size")
    pad = (k - 1) // 2
    if padding is not None and padding != pad:
        raise ShapeError(f"conv2d: only same padding ({pad}) is supported")

    # columns are laid out channels-last with (ki, kj, c) ordering
    wmat = w.data.transpose(0, 2, 3, 1).reshape(co, k * k * c)
    xh = x.data.transpose(0, 2, 3, 1)
    if k == 1:
        cols = xh.reshape(-1, c)
    else:
        xp = np.pad(xh, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        cols = np.concatenate([xp[:, i:i + h, j:j + wd, :] for i in range(k) for j in range(k)],
                              axis=3).reshape(-1, k * k * c)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out_nchw = out.reshape(n, h, wd, co).transpose(0, 3, 1, 2)

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, co)
        gw = (gmat.T @ cols).reshape(co, k, k, c).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, h, wd, k * k, c)
            if k == 1:
                gx = gcols[:, :, :, 0, :].transpose(0, 3, 1, 2)
            else:
                gxp = np.zeros((n, h + 2 * pad, wd + 2 * pad, c), dtype=x.data.dtype)
                for i in range(k):
                    for j in range(k):
                        gxp[:, i:i + h, j:j + wd, :] += gcols[:, :, :, i * k + j, :]
                gx = gxp[:, pad:pad + h, pad:pad + wd, :].transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, gmat.sum(axis=0)

    return _make(np.ascontiguousarray(out_nchw), parents, bw, "conv2d")


# ---------------------------------------------------------------------------
# backprop


def _reachable(loss: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.id in seen or not t.requires_grad:
            continue
        seen[t.id] = t
        stack.extend(t.parents)
    return [seen[i] for i in sorted(seen, reverse=True)]


def backward(loss: Tensor, params: Sequence[Tensor] = ()) -> list[np.ndarray]:
    """Backpropagate from a scalar ``loss``.

    Sets ``.grad`` on every reachable trainable leaf and returns gradients for
    ``params`` in order (zeros for parameters the loss does not depend on).
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    for node in _reachable(loss):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.array(pg, dtype=parent.data.dtype)
    out = []
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        out.append(p.grad)
    return out


def zero_grad(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class ParamCheck:
    name: str
    checked: int
    excluded: int
    max_rel_err: float


@dataclass
class GradCheckReport:
    tol: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def __str__(self):
        rows = [f"{p.name}: checked={p.checked} excluded={p.excluded} max_rel={p.max_rel_err:.2e}"
                for p in self.params]
        return "\n".join(rows + [f"max_rel={self.max_rel_err:.2e} tol={self.tol:.0e}"])


def _run_recording(fn):
    global _kink_log
    _kink_log = []
    try:
        with no_grad():
            val = float(fn().data)
        return val, _kink_log
    finally:
        _kink_log = None


def _same_kinks(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def rel_err(a: float, b: float, floor: float = 1e-3) -> float:
    """|a-b| scaled by max(|a|, |b|, floor); the floor keeps near-zero gradients
    from turning roundoff into huge ratios."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    names: Sequence[str] | None = None,
    eps: float = 1e-5,
    tol: float = 1e-6,
    max_coords: int | None = 20,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` rebuilds the loss from the current parameter values. At most
    ``max_coords`` coordinates per parameter are sampled. A coordinate whose
    perturbation flips the sign of any relu input (including inputs sitting
    exactly at 0) is excluded.
    """
    names = list(names) if names is not None else [f"p{i}" for i in range(len(params))]
    zero_grad(params)
    loss = fn()
    analytic = [g.copy() for g in backward(loss, params)]
    _, base_kinks = _run_recording(fn)
    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol)
    for p, name, ga in zip(params, names, analytic):
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst, checked, excluded = 0.0, 0, 0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp, kp = _run_recording(fn)
            flat[i] = orig - eps
            fm, km = _run_recording(fn)
            flat[i] = orig
            if not (_same_kinks(kp, base_kinks) and _same_kinks(km, base_kinks)):
                excluded += 1
                continue
            num = (fp - fm) / (2 * eps)
            worst = max(worst, rel_err(float(ga.reshape(-1)[i]), num))
            checked += 1
        report.params.append(ParamCheck(name, checked, excluded, worst))
    return report

