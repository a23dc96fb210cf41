"""Dense float64 tensors with a reverse-mode gradient tape.

Every primitive below computes its forward value with numpy and, when a
:class:`GradTape` is recording and at least one input requires a gradient,
registers a closed-form backward rule on the tape. Primitives accept an
optional leading batch axis so training can run on whole mini-batches.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GradTape",
    "GradCheck",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "dense",
    "conv1d",
    "maxpool1d",
    "sigmoid",
    "tanh",
    "softmax",
    "log",
    "square",
    "sum",
    "mean",
    "reshape",
    "concat",
    "stack",
    "split",
    "embedding",
    "pick",
    "weighted_sum",
    "softmax_cross_entropy",
    "grad_check",
]


class Tensor:
    """A float64 array plus a flag saying whether gradients flow into it."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class GradTape:
    """Records primitive applications and replays them backward.

    Use as a context manager; tapes nest, and only the innermost one records.
    A tape belongs to the thread that entered it.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = sum(mul(w, w))
    >>> tape.gradient(y, [w])[0]
    array([4.])
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        self.records.append((out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Gradients of ``target`` w.r.t. each source (zeros when unreachable)."""
        grads: dict[int, np.ndarray] = {
            id(target): np.ones_like(target.data) if seed is None else np.asarray(seed, dtype=np.float64)
        }
        for out, inputs, backward in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            # keep the output's gradient available if it is also a requested source
            if any(out is s for s in sources):
                grads[id(out)] = g
            for t, gi in zip(inputs, backward(g)):
                if gi is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    needs = any(isinstance(t, Tensor) and t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, (a,), lambda g: (g * factor,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped from below first.

    Clamped entries receive zero gradient.
    """
    ad = a.data
    if floor is None:
        safe = ad
        live = None
    else:
        live = ad > floor
        safe = np.where(live, ad, floor)

    def backward(g):
        ga = g / safe
        return (ga if live is None else ga * live,)

    return _result(np.log(safe), (a,), backward)


# reductions and reshaping -------------------------------------------------


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.sum(a.data, axis=axis), (a,), backward)


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    n = len(parts)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(np.stack([p.data for p in parts], axis=axis), tuple(parts), backward)


def split(a: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    """Split into equal sections; each piece is its own tape entry."""
    size = a.shape[axis] // sections
    if size * sections != a.shape[axis]:
        raise ValueError(f"cannot split axis of length {a.shape[axis]} into {sections}")
    out = []
    for k in range(sections):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(k * size, (k + 1) * size)
        idx = tuple(idx)

        def backward(g, idx=idx):
            full = np.zeros_like(a.data)
            full[idx] = g
            return (full,)

        out.append(_result(a.data[idx], (a,), backward))
    return out


# linear maps ---------------------------------------------------------------


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """``a[..., n] @ w[n, m]`` (or ``w[n]``), batch axes carried on ``a`` only."""
    a, w = _as_tensor(a), _as_tensor(w)
    if a.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {w.shape}")
    ad, wd = a.data, w.data

    def backward(g):
        if wd.ndim == 1:
            ga = g[..., None] * wd
            gw = np.tensordot(ad, g, axes=(tuple(range(ad.ndim - 1)), tuple(range(g.ndim))))
        else:
            ga = g @ wd.T
            gw = ad.reshape(-1, wd.shape[0]).T @ g.reshape(-1, wd.shape[1])
        return ga, gw

    return _result(ad @ wd, (a, w), backward)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x[..., n]``, ``weight[n, m]``, ``bias[m]``."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ValueError(f"dense shapes disagree: x{x.shape} W{weight.shape} b{bias.shape}")
    xd, wd = x.data, weight.data
    n, m = wd.shape

    def backward(g):
        g2 = g.reshape(-1, m)
        return g @ wd.T, xd.reshape(-1, n).T @ g2, g2.sum(axis=0)

    return _result(xd @ wd + bias.data, (x, weight, bias), backward)


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded 1-D cross-correlation along time.

    ``x`` is ``[time, c_in]`` or ``[batch, time, c_in]``; ``kernels`` is
    ``[k, c_in, c_out]`` with ``k`` odd. Output keeps the time length.
    """
    x, kernels, bias = _as_tensor(x), _as_tensor(kernels), _as_tensor(bias)
    k, c_in, c_out = kernels.shape
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if x.shape[-1] != c_in:
        raise ValueError(f"input has {x.shape[-1]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"bias shape {bias.shape} != ({c_out},)")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    batch, steps, _ = xd.shape
    pad = (k - 1) // 2
    xp = np.pad(xd, ((0, 0), (pad, pad), (0, 0)))
    # [B, T, c_in, k] -> [B*T, k*c_in] with k-major layout matching kernels
    cols = sliding_window_view(xp, k, axis=1).transpose(0, 1, 3, 2).reshape(batch * steps, k * c_in)
    w2 = kernels.data.reshape(k * c_in, c_out)
    out = (cols @ w2 + bias.data).reshape(batch, steps, c_out)

    def backward(g):
        g3 = g[None] if squeeze else g
        g2 = g3.reshape(batch * steps, c_out)
        gk = (cols.T @ g2).reshape(k, c_in, c_out)
        gb = g2.sum(axis=0)
        gcols = (g2 @ w2.T).reshape(batch, steps, k, c_in)
        gxp = np.zeros((batch, steps + 2 * pad, c_in))
        for j in range(k):
            gxp[:, j : j + steps] += gcols[:, :, j]
        gx = gxp[:, pad : pad + steps]
        return (gx[0] if squeeze else gx), gk, gb

    return _result(out[0] if squeeze else out, (x, kernels, bias), backward)


def maxpool1d(x: Tensor, pool: int) -> Tensor:
    """Max over disjoint windows of ``pool`` steps; trailing remainder dropped.

    Gradient goes to the first maximal element of each window.
    """
    x = _as_tensor(x)
    if pool < 1:
        raise ValueError(f"pool must be >= 1, got {pool}")
    steps = x.shape[-2]
    if pool > steps:
        raise ValueError(f"pool {pool} exceeds time length {steps}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    batch, _, ch = xd.shape
    out_len = steps // pool
    xr = xd[:, : out_len * pool].reshape(batch, out_len, pool, ch)
    arg = np.argmax(xr, axis=2)[:, :, None, :]
    out = np.take_along_axis(xr, arg, axis=2)[:, :, 0, :]

    def backward(g):
        g3 = g[None] if squeeze else g
        gr = np.zeros((batch, out_len, pool, ch))
        np.put_along_axis(gr, arg, g3[:, :, None, :], axis=2)
        gx = np.zeros_like(xd)
        gx[:, : out_len * pool] = gr.reshape(batch, out_len * pool, ch)
        return (gx[0] if squeeze else gx,)

    return _result(out[0] if squeeze else out, (x,), backward)


# nonlinearities ------------------------------------------------------------


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # split by sign so exp never overflows
    ad = a.data
    e = np.exp(-np.abs(ad))
    y = np.where(ad >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def _softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    y = _softmax(a.data, axis)
    return _result(y, (a,), lambda g: (y * (g - np.sum(g * y, axis=axis, keepdims=True)),))


def softmax_cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Sum over positions of ``-log softmax(logits)[target]``, times an optional 0/1 mask."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    z = logits.data
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    m = np.ones_like(nll) if mask is None else np.asarray(mask, dtype=np.float64)

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        return (grad * (m * g)[..., None],)

    return _result(np.sum(nll * m), (logits,), backward)


# indexing ------------------------------------------------------------------


def embedding(table: Tensor, indices) -> Tensor:
    """Rows of ``table`` selected by integer ``indices`` (any shape)."""
    idx = np.asarray(indices, dtype=np.int64)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"embedding index out of range [0, {n})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(table.data[idx], (table,), backward)


def pick(a: Tensor, indices) -> Tensor:
    """``a[..., indices]`` along the last axis, one index per leading position."""
    idx = np.asarray(indices, dtype=np.int64)[..., None]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, g[..., None], axis=-1)
        return (ga,)

    return _result(np.take_along_axis(a.data, idx, axis=-1)[..., 0], (a,), backward)


def weighted_sum(weights: Tensor, vectors: Tensor) -> Tensor:
    """``sum_i weights[..., i] * vectors[..., i, :]`` (the context-vector contraction)."""
    weights, vectors = _as_tensor(weights), _as_tensor(vectors)
    wd, vd = weights.data, vectors.data
    if wd.shape != vd.shape[:-1]:
        raise ValueError(f"weights {wd.shape} do not match vectors {vd.shape}")
    out = np.einsum("...l,...ld->...d", wd, vd)

    def backward(g):
        return np.einsum("...d,...ld->...l", g, vd), wd[..., None] * g[..., None, :]

    return _result(out, (weights, vectors), backward)


# finite-difference verification -------------------------------------------


@dataclass(frozen=True)
class GradCheck:
    max_rel_error: float
    checked: int
    skipped: int

    def __float__(self) -> float:
        return self.max_rel_error


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    epsilon: float = 1e-5,
    seed: int = 0,
    max_coords: int | None = None,
) -> GradCheck:
    """Compare tape gradients of ``fn(*inputs)`` with central differences.

    Non-scalar outputs are reduced with a fixed random projection. Coordinates
    where the one-sided slopes disagree (a kink such as a pooling tie inside
    the epsilon ball) are skipped and counted. ``max_coords`` subsamples
    coordinates per input for large tensors.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    rng = np.random.default_rng(seed)
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True

    with GradTape() as tape:
        out = fn(*inputs)
    proj = None if out.data.ndim == 0 else rng.standard_normal(out.shape)

    def scalar(value: np.ndarray) -> float:
        return float(value) if proj is None else float(np.sum(value * proj))

    analytic = tape.gradient(out, inputs, seed=None if proj is None else proj)

    worst, checked, skipped = 0.0, 0, 0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = scalar(fn(*inputs).data)
            flat[i] = orig - epsilon
            f_minus = scalar(fn(*inputs).data)
            flat[i] = orig
            f0 = scalar(fn(*inputs).data)
            fwd = (f_plus - f0) / epsilon
            bwd = (f0 - f_minus) / epsilon
            if abs(fwd - bwd) > 1e-3 * max(abs(fwd), abs(bwd)) + 1e-6:
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = grad.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
            checked += 1
    return GradCheck(worst, checked, skipped)
