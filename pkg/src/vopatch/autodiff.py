"""Tape-based reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active, and having at least one
input that requires a gradient, are recorded in execution order. Calling
:func:`backward` replays the record in reverse once and returns the gradient
of a scalar output with respect to every leaf tensor that requires one.

Example::

    p = Tensor(np.random.rand(4), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(ad.square(p))
    grads = ad.backward(tape, loss)   # grads[p] == 2 * p.data
"""
from __future__ import annotations

import contextvars
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeMismatch(ValueError):
    pass


class NotOnTape(RuntimeError):
    pass


class NonScalarOutput(ValueError):
    pass


_ACTIVE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """A float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return swapaxes(self, -1, -2)


class Tape:
    """Ordered record of executed operations."""

    def __init__(self):
        self.nodes: list[tuple[Callable, tuple, Tensor]] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.nodes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = _ACTIVE.get()
    if tape is None:
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.nodes.append((backward_fn, inputs, out))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, output: Tensor) -> dict:
    """Reverse pass; returns ``{leaf: gradient}`` and fills ``leaf.grad``."""
    if output.data.size != 1:
        raise NonScalarOutput(f"output must be scalar, got shape {output.shape}")
    if output._tape is not tape:
        raise NotOnTape("output was not produced on this tape")
    if tape.consumed:
        raise RuntimeError("tape has already been replayed")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[int, Tensor] = {}
    for fn, inputs, out in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = fn(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if not isinstance(gi, np.ndarray) or gi.dtype != np.float64:
                gi = np.asarray(gi, dtype=np.float64)
            if gi.shape != t.data.shape:
                gi = _unbroadcast(gi, t.data.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if t._tape is None:
                leaves[key] = t
    tape.nodes.clear()
    result = {}
    for key, leaf in leaves.items():
        leaf.grad = grads.get(key, np.zeros_like(leaf.data))
        result[leaf] = leaf.grad
    return result


def grad(fn: Callable[..., Tensor], *arrays: np.ndarray):
    """Value and gradients of scalar ``fn`` at numpy ``arrays``."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    if not out.requires_grad:
        return out.item(), [np.zeros_like(leaf.data) for leaf in leaves]
    g = backward(tape, out)
    return out.item(), [g.get(leaf, np.zeros_like(leaf.data)) for leaf in leaves]


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def _check_broadcast(a: np.ndarray, b: np.ndarray):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad_, bd = a.data, b.data
    return _record(
        ad_ * bd,
        (a, b),
        lambda g: (g * bd if a.requires_grad else None, g * ad_ if b.requires_grad else None),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data)
    ad_, bd = a.data, b.data
    out = ad_ / bd

    def back(g):
        ga = g / bd if a.requires_grad else None
        gb = -g * out / bd if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), back)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _record(x * x, (a,), lambda g: (2.0 * x * g,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (0.5 * g / out,))


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; subgradient 1 strictly inside, 0 elsewhere."""
    a = as_tensor(a)
    x = a.data
    inside = (x > lo) & (x < hi)
    return _record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def pseudo_huber_weight(r, delta: float) -> Tensor:
    """IRLS weight ``1 / sqrt(1 + (r / delta)^2)`` of the pseudo-Huber loss."""
    r = as_tensor(r)
    x = r.data / delta
    out = 1.0 / np.sqrt(1.0 + x * x)
    return _record(out, (r,), lambda g: (-g * x * out**3 / delta,))


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.data.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _record(out, (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.data.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def l2_norm(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.sqrt((x * x).sum(axis=axis, keepdims=keepdims))

    def back(g):
        o = out
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
            o = np.expand_dims(o, axis)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(o > 0, g / np.where(o > 0, o, 1.0), 0.0)
        return (x * scale,)

    return _record(out, (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _record(a.data[idx], (a,), back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    sizes = np.cumsum([t.data.shape[axis] for t in ts])[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    n = len(ts)
    return _record(
        out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n))
    )


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad_, bd = a.data, b.data
    if ad_.ndim < 2 or bd.ndim < 2:
        raise ShapeMismatch("matmul operands must be at least 2-D")
    try:
        out = ad_ @ bd
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad_, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _record(out, (a, b), back)


def solve(a, b) -> Tensor:
    """Batched ``a^{-1} b`` for ``a (..., n, n)`` and ``b (..., n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != a.shape[-2] or b.shape[-1] != a.shape[-1]:
        raise ShapeMismatch(f"cannot solve {a.shape} with {b.shape}")
    ad_ = a.data
    x = np.linalg.solve(ad_, b.data[..., None])[..., 0]

    def back(g):
        gb = np.linalg.solve(np.swapaxes(ad_, -1, -2), g[..., None])[..., 0]
        ga = -gb[..., :, None] * x[..., None, :] if a.requires_grad else None
        return ga, gb

    return _record(x, (a, b), back)


_SERIES_CUTOFF = 1e-2


def rodrigues_coeffs(theta_sq) -> Tensor:
    """Stack ``[sin t / t, (1 - cos t) / t^2, (t - sin t) / t^3]`` for ``t^2 = theta_sq``.

    Series expansions are used below a small angle so the op is smooth at 0.
    """
    s_t = as_tensor(theta_sq)
    s = s_t.data
    small = s < _SERIES_CUTOFF
    safe = np.where(small, 1.0, s)
    th = np.sqrt(safe)
    sin, cos = np.sin(th), np.cos(th)
    a_cl = sin / th
    b_cl = (1.0 - cos) / safe
    c_cl = (1.0 - a_cl) / safe
    da_cl = (cos - a_cl) / (2.0 * safe)
    db_cl = (a_cl - 2.0 * b_cl) / (2.0 * safe)
    dc_cl = -(da_cl + c_cl) / safe
    a_s = 1.0 - s / 6.0 + s**2 / 120.0 - s**3 / 5040.0 + s**4 / 362880.0
    b_s = 0.5 - s / 24.0 + s**2 / 720.0 - s**3 / 40320.0 + s**4 / 3628800.0
    c_s = 1.0 / 6.0 - s / 120.0 + s**2 / 5040.0 - s**3 / 362880.0 + s**4 / 39916800.0
    da_s = -1.0 / 6.0 + s / 60.0 - s**2 / 1680.0 + s**3 / 90720.0
    db_s = -1.0 / 24.0 + s / 360.0 - s**2 / 13440.0 + s**3 / 907200.0
    dc_s = -1.0 / 120.0 + s / 2520.0 - s**2 / 120960.0 + s**3 / 9979200.0
    out = np.stack(
        [np.where(small, a_s, a_cl), np.where(small, b_s, b_cl), np.where(small, c_s, c_cl)], axis=-1
    )
    deriv = np.stack(
        [np.where(small, da_s, da_cl), np.where(small, db_s, db_cl), np.where(small, dc_s, dc_cl)],
        axis=-1,
    )
    return _record(out, (s_t,), lambda g: ((g * deriv).sum(axis=-1),))


# ---------------------------------------------------------------------------
# Image sampling
# ---------------------------------------------------------------------------


class BilinearSampler:
    """Precomputed bilinear sampling of a ``(h, w)`` grid at fixed coordinates.

    Samples at continuous ``(x, y)`` where texel ``(j, i)`` sits at
    ``(i + offset, j + offset)``; taps outside the grid read zero. Stored as a
    sparse ``(n_samples, h * w)`` matrix so sampling is linear in the image.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, src_shape: tuple[int, int], offset: float = 0.0):
        h, w = src_shape
        x = np.asarray(x, dtype=np.float64).ravel() - offset
        y = np.asarray(y, dtype=np.float64).ravel() - offset
        n = x.size
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx = x - x0
        fy = y - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        rows, cols, vals = [], [], []
        for dx, dy, wt in (
            (0, 0, (1 - fx) * (1 - fy)),
            (1, 0, fx * (1 - fy)),
            (0, 1, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wt != 0) & np.isfinite(x) & np.isfinite(y)
            rows.append(np.nonzero(ok)[0])
            cols.append(yi[ok] * w + xi[ok])
            vals.append(wt[ok])
        self.n_samples = n
        self.src_shape = (h, w)
        self.matrix = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, h * w)
        )
        self.matrix_t = self.matrix.T.tocsr()

    @classmethod
    def vstack(cls, samplers: Sequence["BilinearSampler"]) -> "BilinearSampler":
        """One sampler producing the concatenated samples of ``samplers``."""
        shapes = {s.src_shape for s in samplers}
        if len(shapes) != 1:
            raise ShapeMismatch(f"samplers read different grids: {sorted(shapes)}")
        out = cls.__new__(cls)
        out.src_shape = shapes.pop()
        out.n_samples = int(np.sum([s.n_samples for s in samplers]))
        out.matrix = sp.vstack([s.matrix for s in samplers], format="csr")
        out.matrix_t = out.matrix.T.tocsr()
        return out

    def apply(self, img: np.ndarray) -> np.ndarray:
        """Sample ``(..., h, w)`` numpy data; returns ``(..., n_samples)``."""
        lead = img.shape[:-2]
        flat = img.reshape(-1, self.src_shape[0] * self.src_shape[1])
        return (self.matrix @ flat.T).T.reshape(lead + (self.n_samples,))


def bilinear_sample(img, sampler: BilinearSampler) -> Tensor:
    """Differentiable (w.r.t. ``img`` only) sampling with a fixed sampler."""
    img = as_tensor(img)
    if img.shape[-2:] != sampler.src_shape:
        raise ShapeMismatch(f"image {img.shape} does not match sampler grid {sampler.src_shape}")
    shape = img.shape
    n_src = shape[-2] * shape[-1]

    def back(g):
        lead = g.shape[:-1]
        flat = g.reshape(-1, sampler.n_samples)
        return ((sampler.matrix_t @ flat.T).T.reshape(lead + (n_src,)).reshape(shape),)

    return _record(sampler.apply(img.data), (img,), back)


def sample_xy(img, x, y) -> Tensor:
    """Bilinear lookup of ``img (B, H, W)`` at per-batch coordinates ``x, y (B, N)``.

    Differentiable w.r.t. the image and the coordinates. Coordinates are
    clamped to the pixel-center hull, replicating the border; the coordinate
    gradient vanishes where clamping is active.
    """
    img, x, y = as_tensor(img), as_tensor(x), as_tensor(y)
    if img.ndim != 3 or x.shape != y.shape or x.shape[0] != img.shape[0]:
        raise ShapeMismatch(f"sample_xy got image {img.shape}, coords {x.shape} / {y.shape}")
    b, h, w = img.shape
    xd, yd = x.data, y.data
    xc = np.clip(xd, 0.0, w - 1.0)
    yc = np.clip(yd, 0.0, h - 1.0)
    in_x = (xd > 0.0) & (xd < w - 1.0)
    in_y = (yd > 0.0) & (yd < h - 1.0)
    x0 = np.minimum(np.floor(xc), w - 2).astype(np.int64)
    y0 = np.minimum(np.floor(yc), h - 2).astype(np.int64)
    fx = xc - x0
    fy = yc - y0
    base = (np.arange(b) * (h * w))[:, None]
    i00 = base + y0 * w + x0
    flat = img.data.reshape(-1)
    v00 = flat[i00]
    v10 = flat[i00 + 1]
    v01 = flat[i00 + w]
    v11 = flat[i00 + w + 1]
    top = v00 + fx * (v10 - v00)
    bot = v01 + fx * (v11 - v01)
    out = top + fy * (bot - top)

    def back(g):
        gimg = None
        if img.requires_grad:
            gfx, gfy = g * fx, g * fy
            w11 = gfx * fy
            w10 = gfx - w11
            w01 = gfy - w11
            w00 = g - gfx - w01
            idx = np.concatenate([i00.ravel(), (i00 + 1).ravel(), (i00 + w).ravel(), (i00 + w + 1).ravel()])
            wts = np.concatenate([w00.ravel(), w10.ravel(), w01.ravel(), w11.ravel()])
            gimg = np.bincount(idx, weights=wts, minlength=b * h * w).reshape(b, h, w)
        gx = g * ((1.0 - fy) * (v10 - v00) + fy * (v11 - v01)) * in_x if x.requires_grad else None
        gy = g * (bot - top) * in_y if y.requires_grad else None
        return gimg, gx, gy

    return _record(out, (img, x, y), back)


def pinhole_project(pts, fx: float, fy: float, cx: float, cy: float):
    """Project camera-frame points ``(..., 3)`` to pixel coordinates ``u, v``."""
    pts = as_tensor(pts)
    p = pts.data
    inv_z = 1.0 / p[..., 2]
    xn = p[..., 0] * inv_z
    yn = p[..., 1] * inv_z
    u = _record(fx * xn + cx, (pts,), lambda g: (np.stack([fx * g * inv_z, np.zeros_like(g), -fx * g * xn * inv_z], -1),))
    v = _record(fy * yn + cy, (pts,), lambda g: (np.stack([np.zeros_like(g), fy * g * inv_z, -fy * g * yn * inv_z], -1),))
    return u, v


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` at flat indices ``coords`` of ``x``."""
    x = np.array(x, dtype=np.float64, order="C")
    flat = x.reshape(-1)
    out = np.empty(len(coords))
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        out[k] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a - b| / max(max|b|, floor)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


def check_ops(seed: int = 0, h: float = 1e-5) -> dict:
    """Max relative error of every registered op's gradient vs central differences."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    m = rng.normal(size=(2, 4, 3))
    spd = rng.normal(size=(2, 3, 3))
    spd = spd @ np.swapaxes(spd, -1, -2) + 3 * np.eye(3)
    img = rng.uniform(size=(2, 6, 7))
    xs, ys = rng.uniform(0.2, 5.8, size=(2, 9)), rng.uniform(0.2, 4.8, size=(2, 9))
    sampler = BilinearSampler(rng.uniform(-1, 7, 20), rng.uniform(-1, 6, 20), (6, 7), offset=0.5)
    w = rng.normal(size=(3, 4))
    cases = {
        "add": (lambda x: add(x, b), a),
        "sub": (lambda x: sub(b, x), a),
        "mul": (lambda x: mul(x, b), a),
        "div": (lambda x: div(b, x), pos),
        "neg": (neg, a),
        "square": (square, a),
        "sqrt": (sqrt, pos),
        "clamp": (lambda x: clamp(x, -0.5, 0.5), a),
        "pseudo_huber_weight": (lambda x: pseudo_huber_weight(x, 0.3), a),
        "sum": (lambda x: sum(x, axis=0), a),
        "mean": (lambda x: mean(x, axis=1, keepdims=True), a),
        "l2_norm": (lambda x: l2_norm(x, axis=-1), a),
        "reshape": (lambda x: reshape(x, (4, 3)), a),
        "swapaxes": (lambda x: swapaxes(x, 0, 1), a),
        "getitem": (lambda x: x[1:, ::2], a),
        "concat": (lambda x: concat([x, square(x)], axis=1), a),
        "stack": (lambda x: stack([x, neg(x)]), a),
        "matmul": (lambda x: matmul(x, m), m.swapaxes(1, 2)),
        "solve": (lambda x: solve(x, np.ones((2, 3))), spd),
        "rodrigues_coeffs": (rodrigues_coeffs, rng.uniform(0.0, 2.0, size=5)),
        "bilinear_sample": (lambda x: bilinear_sample(x, sampler), img[0]),
        "sample_xy": (lambda x: sample_xy(x, xs, ys), img),
        "pinhole_project": (lambda x: concat(list(pinhole_project(x, 50.0, 40.0, 3.0, 2.0))), pos[:, :3] + 1.0),
    }
    out = {}
    for name, (fn, x0) in cases.items():
        x0 = np.asarray(x0, dtype=np.float64)
        y0 = fn(Tensor(x0)).data
        proj = rng.normal(size=y0.shape)

        def scalar(x, fn=fn, proj=proj):
            return float(np.sum(fn(Tensor(x)).data * proj))

        _, (g,) = grad(lambda t, fn=fn, proj=proj: sum(mul(fn(t), proj)), x0)
        coords = np.arange(x0.size)
        fd = finite_difference(scalar, x0, coords, h)
        out[name] = relative_error(g.reshape(-1)[coords], fd)
    return out
