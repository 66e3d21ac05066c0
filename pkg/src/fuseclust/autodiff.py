"""Dense-tensor engine with tape-based reverse-mode gradients.

Values are numpy arrays (float32 for training, float64 for verification).
Ops executed while a Tape is active append a record holding the inputs,
outputs, a replay closure, and a vjp closure; Tape.backward walks the
records in exact reverse execution order. No tape active means pure
forward evaluation with no recording, which is what finite-difference
verification loops use.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class ContractError(ValueError):
    """An op precondition (other than shape) was violated."""


class NumericError(ArithmeticError):
    """A forward value or gradient came out non-finite."""


_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional float array, optionally carrying a gradient buffer.

    ``grad`` exists iff ``requires_grad`` and always matches ``data``'s
    shape. Tensors created by ops never require grad themselves; only
    leaf parameters do.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        # op outputs dominate construction; skip asarray for ready arrays
        if type(data) is np.ndarray and dtype is None:
            arr = data if data.dtype in _FLOAT_DTYPES else data.astype(np.float32)
        else:
            arr = np.asarray(data, dtype=dtype)
            if arr.dtype not in _FLOAT_DTYPES:
                arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routes through the recorded ops below
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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def parameter(data, name=None, dtype=None):
    """Leaf tensor that accumulates gradients; keeps the array's dtype
    unless one is forced."""
    return Tensor(data, requires_grad=True, dtype=dtype, name=name)


def constant(data, dtype=None):
    return Tensor(data, requires_grad=False, dtype=dtype)


class _Record:
    __slots__ = ("name", "inputs", "outputs", "forward", "vjp")

    def __init__(self, name, inputs, outputs, forward, vjp):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.forward = forward  # () -> tuple of arrays recomputed from inputs
        self.vjp = vjp          # tuple of out-grads -> tuple of in-grads (or None)


class Tape:
    """Ordered record of executed ops, for reverse-mode differentiation.

    Use as a context manager around a forward pass, then call
    ``backward(loss)``. ``check_finite`` validates every forward output
    and every gradient and raises NumericError naming the op.
    """

    def __init__(self, check_finite=True):
        self.records = []
        self.check_finite = check_finite
        self._produced = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        assert _TAPES.pop() is self
        return False

    def _record(self, name, inputs, outputs, forward, vjp):
        if self.check_finite:
            for out in outputs:
                if not np.all(np.isfinite(out.data)):
                    raise NumericError(f"non-finite values in forward op '{name}'")
        self.records.append(_Record(name, inputs, outputs, forward, vjp))
        for out in outputs:
            self._produced.add(id(out))

    def backward(self, loss):
        """Accumulate d(loss)/d(param) into every reachable parameter's grad.

        Parameters the loss does not depend on are left untouched, so a
        zeroed grad buffer stays exactly zero for them.
        """
        if not isinstance(loss, Tensor):
            raise ContractError("loss must be a Tensor")
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced and not loss.requires_grad:
            raise ContractError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            out_grads = tuple(grads.get(id(out)) for out in rec.outputs)
            if all(g is None for g in out_grads):
                continue
            out_grads = tuple(
                g if g is not None else np.zeros_like(out.data)
                for g, out in zip(out_grads, rec.outputs)
            )
            in_grads = rec.vjp(*out_grads)
            for inp, g in zip(rec.inputs, in_grads):
                if g is None:
                    continue
                if self.check_finite and not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient in backward of op '{rec.name}'")
                if id(inp) in self._produced:
                    acc = grads.get(id(inp))
                    grads[id(inp)] = g if acc is None else acc + g
                elif inp.requires_grad:
                    inp.grad += g
            # free the output grads; records are visited exactly once
            for out in rec.outputs:
                grads.pop(id(out), None)

    def replay(self):
        """Re-run every op forward and check bit-identical outputs."""
        for rec in self.records:
            fresh = rec.forward()
            for out, arr in zip(rec.outputs, fresh):
                if not np.array_equal(out.data, arr):
                    raise NumericError(f"replay mismatch in op '{rec.name}'")
        return True


_TAPES: list = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def backward(loss, tape):
    """Free-function spelling of Tape.backward."""
    tape.backward(loss)


def _as_tensor(x, like_dtype):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like_dtype))


def _coerce_pair(a, b):
    if isinstance(a, Tensor):
        b = _as_tensor(b, a.dtype)
    else:
        a = _as_tensor(a, b.dtype)
    if a.dtype != b.dtype:
        raise ContractError(f"mixed dtypes {a.dtype} vs {b.dtype}")
    return a, b


def _unbroadcast(g, shape):
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _emit(name, inputs, out_arrays, forward, vjp):
    if len(out_arrays) == 1:
        out = Tensor(out_arrays[0])
        if _TAPES:
            _TAPES[-1]._record(name, inputs, (out,), forward, vjp)
        return out
    outs = tuple(Tensor(a) for a in out_arrays)
    if _TAPES:
        _TAPES[-1]._record(name, inputs, outs, forward, vjp)
    return outs


# ---------------------------------------------------------------------------
# elementwise / reduction ops
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _coerce_pair(a, b)
    return _emit(
        "add", (a, b), (a.data + b.data,),
        lambda: (a.data + b.data,),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _coerce_pair(a, b)
    return _emit(
        "sub", (a, b), (a.data - b.data,),
        lambda: (a.data - b.data,),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = _coerce_pair(a, b)
    return _emit(
        "mul", (a, b), (a.data * b.data,),
        lambda: (a.data * b.data,),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = _coerce_pair(a, b)
    return _emit(
        "div", (a, b), (a.data / b.data,),
        lambda: (a.data / b.data,),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a):
    return _emit("neg", (a,), (-a.data,), lambda: (-a.data,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)
    return _emit("exp", (a,), (out,), lambda: (np.exp(a.data),), lambda g: (g * out,))


def log(a):
    return _emit("log", (a,), (np.log(a.data),),
                 lambda: (np.log(a.data),), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _emit("sqrt", (a,), (out,),
                 lambda: (np.sqrt(a.data),), lambda g: (g * (0.5 / out),))


def relu(a):
    return _emit("relu", (a,), (np.maximum(a.data, 0.0),),
                 lambda: (np.maximum(a.data, 0.0),),
                 lambda g: (g * (a.data > 0.0),))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


def gelu(a):
    """tanh-approximation GELU."""
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_K * (x * x * x)))
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    def forward():
        xx = a.data
        tt = np.tanh(_GELU_C * (xx + _GELU_K * (xx * xx * xx)))
        return (0.5 * xx * (1.0 + tt),)

    return _emit("gelu", (a,), (out,), forward, vjp)


def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", (a,), (np.asarray(out),),
                 lambda: (np.asarray(a.data.sum(axis=axis, keepdims=keepdims)),), vjp)


def tmean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit("mean", (a,), (np.asarray(out),),
                 lambda: (np.asarray(a.data.mean(axis=axis, keepdims=keepdims)),), vjp)


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    return _emit("reshape", (a,), (a.data.reshape(shape),),
                 lambda: (a.data.reshape(shape),),
                 lambda g: (g.reshape(a.shape),))


def transpose(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), (np.ascontiguousarray(a.data.transpose(axes)),),
                 lambda: (np.ascontiguousarray(a.data.transpose(axes)),),
                 lambda g: (g.transpose(inv),))


def concat(tensors, axis):
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _emit("concat", tensors, (out,),
                 lambda: (np.concatenate([t.data for t in tensors], axis=axis),), vjp)


def split(a, sections, axis):
    """Split into ``sections`` equal parts along ``axis``."""
    if a.shape[axis] % sections != 0:
        raise ShapeError(
            f"cannot split axis {axis} of size {a.shape[axis]} into {sections} equal parts")
    parts = np.split(a.data, sections, axis=axis)
    parts = tuple(np.ascontiguousarray(p) for p in parts)

    def vjp(*gs):
        return (np.concatenate(gs, axis=axis),)

    return _emit("split", (a,), parts,
                 lambda: tuple(np.ascontiguousarray(p) for p in np.split(a.data, sections, axis=axis)),
                 vjp)


def narrow(a, axis, start, length):
    """Contiguous slice [start, start+length) along one axis."""
    idx = tuple(
        slice(start, start + length) if d == axis else slice(None)
        for d in range(a.ndim)
    )

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _emit("narrow", (a,), (np.ascontiguousarray(a.data[idx]),),
                 lambda: (np.ascontiguousarray(a.data[idx]),), vjp)


def gather_rows(table, index):
    """Select rows of a 2-d table; backward scatter-adds into the table."""
    index = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-d table, got {table.shape}")

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _emit("gather_rows", (table,), (table.data[index].copy(),),
                 lambda: (table.data[index].copy(),), vjp)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _emit("matmul", (a, b), (out,), lambda: (a.data @ b.data,), vjp)


def linear(x, w, b=None):
    """x @ w (+ b) applied over the last axis, any leading shape."""
    lead = x.shape[:-1]
    h = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        h = add(h, b)
    return reshape(h, lead + (w.shape[-1],))


# ---------------------------------------------------------------------------
# normalization / attention primitives
# ---------------------------------------------------------------------------

def softmax(a, axis):
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    def forward():
        zz = a.data - a.data.max(axis=axis, keepdims=True)
        ee = np.exp(zz)
        return (ee / ee.sum(axis=axis, keepdims=True),)

    return _emit("softmax", (a,), (out,), forward, vjp)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    e = x.shape[-1]
    if gamma.shape != (e,) or beta.shape != (e,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {e}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        sum_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=sum_axes)
        dbeta = g.sum(axis=sum_axes)
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return (dx, dgamma, dbeta)

    def forward():
        m = x.data.mean(axis=-1, keepdims=True)
        c = x.data - m
        v = (c * c).mean(axis=-1, keepdims=True)
        return ((c * (1.0 / np.sqrt(v + eps))) * gamma.data + beta.data,)

    return _emit("layer_norm", (x, gamma, beta), (out,), forward, vjp)


# ---------------------------------------------------------------------------
# convolution (stride-s valid correlation on zero-padded input)
# ---------------------------------------------------------------------------

def _pad2d(x, pad):
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = x
    return out


def _im2col(x, k, stride, pad):
    if pad:
        x = _pad2d(x, pad)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * k * k)
    return np.ascontiguousarray(cols), oh, ow


def _conv2d_input_grad(gout, w, x_shape, stride, pad):
    """Gradient wrt conv input: dilate the output grad, correlate with the
    flipped kernel, crop the padding back off."""
    b, oc, oh, ow = gout.shape
    _, c, h, wdt = x_shape
    k = w.shape[2]
    hp, wp = h + 2 * pad, wdt + 2 * pad
    dh, dw = (oh - 1) * stride + 1, (ow - 1) * stride + 1
    g = np.zeros((b, oc, dh, dw), dtype=gout.dtype)
    g[:, :, ::stride, ::stride] = gout
    wf = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    cols, ch, cw = _im2col(g, k, 1, k - 1)
    flat = cols @ wf.reshape(c, oc * k * k).T
    gxp = np.zeros((b, c, hp, wp), dtype=gout.dtype)
    gxp[:, :, :ch, :cw] = flat.reshape(b, ch, cw, c).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + wdt])


def conv2d(x, w, b, stride, pad):
    """2-d correlation, NCHW layout, square kernel."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    k = w.shape[2]
    oc = w.shape[0]
    cols, oh, ow = _im2col(x.data, k, stride, pad)
    wmat = w.data.reshape(oc, -1)
    out = cols @ wmat.T + b.data
    out = np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, oc).transpose(0, 3, 1, 2))

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, oc)
        gw = (gmat.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        gb = gmat.sum(axis=0)
        gx = _conv2d_input_grad(g, w.data, x.shape, stride, pad)
        return (gx, gw, gb)

    def forward():
        c2, o2h, o2w = _im2col(x.data, k, stride, pad)
        o = c2 @ w.data.reshape(oc, -1).T + b.data
        return (np.ascontiguousarray(o.reshape(x.shape[0], o2h, o2w, oc).transpose(0, 3, 1, 2)),)

    return _emit("conv2d", (x, w, b), (out,), forward, vjp)
