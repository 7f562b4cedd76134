"""A small reverse-mode autodiff engine over numpy arrays.

Every primitive returns a new :class:`Tensor`. When gradient recording is
enabled and any operand requires a gradient, the primitive appends a record
to a thread-local tape. :func:`backward` replays that tape in reverse,
accumulating gradients, then clears it.

Only the operations needed by the model live here; tensors may carry leading
batch axes and all "rows" operations act on the last axis.
"""
import contextlib
import math
import threading

import numpy as np

from deformer import _kernels

MASK_FILL = -1e9
LOG_FLOOR = 1e-12

_state = threading.local()
_dtype = np.float64


class ShapeError(ValueError):
    pass


def set_precision(precision):
    """Select the float width used for new tensors ("float32" or "float64")."""
    global _dtype
    if precision in ("float64", "64", 64, np.float64):
        _dtype = np.float64
    elif precision in ("float32", "32", 32, np.float32):
        _dtype = np.float32
    else:
        raise ValueError(f"unknown precision {precision!r}")


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name):
    old = _dtype
    set_precision(name)
    try:
        yield
    finally:
        set_precision(old)


def _tape():
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = []
    return tape


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def clear_tape():
    _tape().clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("kind", "out", "inputs", "backward")

    def __init__(self, kind, out, inputs, backward):
        self.kind = kind
        self.out = out
        self.inputs = inputs
        self.backward = backward


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind, data, inputs, backward):
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype if data.dtype.kind == "f" else None)
    if needs:
        _tape().append(_Record(kind, out, inputs, backward))
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _rows(fn, x, *args):
    """Apply a 2-D kernel along the last axis of an n-D array."""
    flat = np.ascontiguousarray(x.reshape(-1, x.shape[-1]))
    if x.dtype not in (np.float32, np.float64):
        # extended precision only ever runs through the numpy kernels
        fn = getattr(_kernels, "np_" + fn.__name__.removeprefix("nb_").removeprefix("np_"))
    return fn(flat, *args)


# ----------------------------------------------------------------------------
# primitives
# ----------------------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # activations times a weight matrix: one flat GEMM each way
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", (a2 @ bd).reshape(*ad.shape[:-1], n), (a, b), backward)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), backward)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _emit("add", a.data + b.data, (a, b), backward)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _emit("mul", ad * bd, (a, b), backward)


def scale(a, c):
    c = float(c)
    return _emit("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def relu(a):
    out = np.maximum(a.data, 0)
    return _emit("relu", out, (a,), lambda g: (g * (a.data > 0),))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a):
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    """Natural log guarded by max(x, 1e-12); no gradient flows through the floor."""
    x = a.data
    safe = np.maximum(x, LOG_FLOOR)
    return _emit("log", np.log(safe), (a,), lambda g: (g * (x > LOG_FLOOR) / safe,))


def clip(a, lo, hi):
    x = a.data
    return _emit("clip", np.clip(x, lo, hi), (a,), lambda g: (g * ((x >= lo) & (x <= hi)),))


def softmax_rows(a):
    y = _rows(_kernels.softmax_rows, a.data).reshape(a.shape)

    def backward(g):
        return (_rows(_kernels.softmax_rows_backward, y, np.ascontiguousarray(g.reshape(-1, a.shape[-1]))).reshape(a.shape),)

    return _emit("softmax_rows", y, (a,), backward)


def log_softmax_rows(a):
    y = _rows(_kernels.log_softmax_rows, a.data).reshape(a.shape)

    def backward(g):
        p = np.exp(y)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax_rows", y, (a,), backward)


def logsumexp_rows(a):
    out = _rows(_kernels.logsumexp_rows, a.data).reshape(a.shape[:-1])

    def backward(g):
        return (g[..., None] * np.exp(a.data - out[..., None]),)

    return _emit("logsumexp_rows", out, (a,), backward)


def layer_norm_rows(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm_rows: incompatible shapes {x.shape} and {gain.shape}/{bias.shape}")
    xhat, inv_std = _rows(_kernels.layer_norm_rows, x.data, eps)
    xhat = xhat.reshape(x.shape)
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = np.ascontiguousarray((g * gain.data).reshape(-1, d))
            gx = _rows(_kernels.layer_norm_rows_backward, xhat, inv_std, gxhat).reshape(x.shape)
        gg = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gb = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, gg, gb

    return _emit("layer_norm_rows", out, (x, gain, bias), backward)


def dropout(a, keep_prob, rng=None, training=True):
    """Inverted dropout: kept units are divided by ``keep_prob`` at train time."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"dropout: keep probability must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return a
    if rng is None:
        raise ValueError("dropout: a random generator is required at train time")
    keep = (rng.random(a.shape) < keep_prob) / a.data.dtype.type(keep_prob)
    keep = keep.astype(a.data.dtype)
    return _emit("dropout", a.data * keep, (a,), lambda g: (g * keep,))


def masked_fill(a, mask, value=MASK_FILL):
    """Replace entries where ``mask`` is True by ``value``."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(a.shape, mask.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: incompatible shapes {a.shape} and {mask.shape}") from None
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _emit("masked_fill", out, (a,), lambda g: (_unbroadcast(np.where(mask, 0, g), a.shape),))


def slice_cols(a, start, stop):
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice_cols: bad range [{start}, {stop}) for shape {a.shape}")

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice_cols", a.data[..., start:stop], (a,), backward)


def concat_cols(tensors):
    tensors = [_as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_cols: incompatible shapes {tensors[0].shape} and {t.shape}")
    edges = np.cumsum([0] + [t.shape[-1] for t in tensors])

    def backward(g):
        return tuple(g[..., edges[i]:edges[i + 1]] if t.requires_grad else None
                     for i, t in enumerate(tensors))

    return _emit("concat_cols", np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors), backward)


def embedding_lookup(table, index):
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise ShapeError(f"embedding_lookup: index must be integer, got {index.dtype}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: index out of range for table shape {table.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _emit("embedding_lookup", table.data[index], (table,), backward)


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    out = a.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), backward)


def gather_last(a, index):
    """Pick ``a[..., index[...]]`` along the last axis."""
    index = np.asarray(index)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"gather_last: incompatible shapes {a.shape} and {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[-1]):
        raise ShapeError(f"gather_last: index out of range for shape {a.shape}")
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, index[..., None], g[..., None], axis=-1)
        return (full,)

    return _emit("gather_last", out, (a,), backward)


# ----------------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------------

def backward(loss):
    """Populate ``.grad`` on every tensor that requires it and feeds ``loss``."""
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = _tape()
    if not loss.requires_grad:
        tape.clear()
        return
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    try:
        for rec in reversed(tape):
            produced.add(id(rec.out))
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            rec.out.grad = g
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        leaves = {}
        for rec in tape:
            for t in rec.inputs:
                if t.requires_grad and id(t) not in produced:
                    leaves[id(t)] = t
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g
    finally:
        tape.clear()


def finite_difference_check(f, point, eps=1e-5, numeric_dtype=None):
    """Largest relative disagreement between backprop and central differences.

    ``f(*point)`` must return a scalar Tensor and be deterministic. Each
    coordinate contributes ``|a - n| / max(1e-12, |a| + |n|)``.

    ``numeric_dtype`` (e.g. ``np.longdouble``) evaluates the difference
    quotients in a wider float so that coordinates with gradients near
    1e-7 are not swamped by float64 round-off.
    """
    point = [_as_tensor(p) for p in point]
    saved = [p.requires_grad for p in point]
    for p in point:
        p.requires_grad = True
        p.grad = None
    clear_tape()
    originals = [p.data for p in point]
    try:
        loss = f(*point)
        backward(loss)
        worst = 0.0
        if numeric_dtype is not None:
            for p in point:
                p.data = p.data.astype(numeric_dtype)
        with no_grad():
            for p in point:
                analytic = np.zeros_like(p.data) if p.grad is None else p.grad
                flat = p.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = f(*point).data.reshape(-1)[0]
                    flat[i] = orig - eps
                    down = f(*point).data.reshape(-1)[0]
                    flat[i] = orig
                    numeric = float((up - down) / (2 * eps))
                    a = float(analytic.reshape(-1)[i])
                    err = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
                    if err > worst or math.isnan(err):
                        worst = err
    finally:
        for p, s, orig in zip(point, saved, originals):
            p.data = orig
            p.requires_grad = s
            p.grad = None
    return worst
