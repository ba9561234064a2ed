"""Reverse-mode automatic differentiation over float64 numpy arrays.

Computation is define-by-run. While a :class:`Tape` is active, every primitive
applied to at least one tensor with ``requires_grad`` is appended to the tape
together with a closure that maps the output gradient to input gradients.
Because entries are appended in execution order the tape is already
topologically sorted, and :meth:`Tape.backward` is a single reverse sweep.

Outside of a tape nothing is recorded, which doubles as inference mode::

    with Tape() as tape:
        loss = cross_entropy(model(x), label)
        grads = tape.backward(loss)
"""

import itertools

import numpy as np

from .errors import ContractError, NumericError

_node_ids = itertools.count(1)
_active_tapes = []

KINDS = (
    "matmul", "add", "subtract", "multiply", "scale", "concat", "transpose",
    "softmax", "log_softmax", "sigmoid", "tanh", "relu", "sum", "mean",
    "select_rows",
    # structural helpers beyond the core set
    "slice", "reshape", "stack", "straight_through", "lstm",
)


class Tensor:
    """Dense float64 array that may take part in differentiation."""

    __slots__ = ("data", "requires_grad", "node", "grad")

    def __init__(self, data, requires_grad=False):
        data = np.array(data, dtype=np.float64)
        if not np.isfinite(data).all():
            raise NumericError("tensor created from non-finite values", kind="leaf")
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.node = next(_node_ids)
        self.grad = None

    @classmethod
    def _wrap(cls, data, requires_grad):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.node = next(_node_ids)
        out.grad = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data.copy()

    def detach(self):
        return Tensor._wrap(self.data.copy(), False)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of primitive applications for one backward pass."""

    def __init__(self):
        self.entries = []
        self._produced = set()

    def __enter__(self):
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        self.clear()
        return False

    def __len__(self):
        return len(self.entries)

    def clear(self):
        self.entries = []
        self._produced = set()

    def record(self, kind, inputs, out, backward):
        self.entries.append((kind, inputs, out, backward))
        self._produced.add(out.node)

    def backward(self, loss):
        """Propagate d(loss)/d(.) to every tensor on the tape.

        Returns a mapping from node id to gradient array. Leaf tensors (those
        requiring grad that no recorded primitive produced) also get ``.grad``.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node not in self._produced:
            raise ContractError("loss was not computed on this tape (detached)")
        grads = {loss.node: np.ones_like(loss.data)}
        leaves = {}
        for kind, inputs, out, backward in reversed(self.entries):
            g = grads.get(out.node)
            if g is None:
                continue
            for t, gi in zip(inputs, backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                prev = grads.get(t.node)
                grads[t.node] = gi if prev is None else prev + gi
                if t.node not in self._produced:
                    leaves[t.node] = t
        for node, t in leaves.items():
            t.grad = np.array(grads[node])
        return grads


def active_tape():
    return _active_tapes[-1] if _active_tapes else None


def _emit(kind, inputs, data, backward):
    if not np.isfinite(data).all():
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NumericError(f"{kind} produced non-finite values (inputs {shapes})", kind=kind)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor._wrap(data, True)
        tape.record(kind, inputs, out, backward)
        return out
    return Tensor._wrap(data, False)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def subtract(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    sa, sb = a.shape, b.shape
    return _emit("subtract", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    A, B = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * B, A.shape) if a.requires_grad else None,
                _unbroadcast(g * A, B.shape) if b.requires_grad else None)

    return _emit("multiply", (a, b), A * B, backward)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _emit("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def relu(a):
    a = as_tensor(a)
    pos = a.data > 0
    return _emit("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,))


# -- linear algebra and layout ----------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    A, B = a.data, b.data
    if A.ndim == 0 or B.ndim == 0:
        raise ContractError(f"matmul: scalar operand, shapes {A.shape} and {B.shape}")
    inner_b = B.shape[0] if B.ndim == 1 else B.shape[-2]
    if A.shape[-1] != inner_b:
        raise ContractError(f"matmul: shapes {A.shape} and {B.shape} do not conform")
    try:
        out = np.matmul(A, B)
    except ValueError:
        raise ContractError(f"matmul: shapes {A.shape} and {B.shape} do not conform") from None

    def backward(g):
        A2 = A[None, :] if A.ndim == 1 else A
        B2 = B[:, None] if B.ndim == 1 else B
        if A.ndim == 1:
            g = np.expand_dims(g, -2)
        if B.ndim == 1:
            g = np.expand_dims(g, -1)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(B2, -1, -2), A2.shape).reshape(A.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(A2, -1, -2) @ g, B2.shape).reshape(B.shape)
        return ga, gb

    return _emit("matmul", (a, b), out, backward)


def transpose(a):
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ContractError(f"transpose: needs at least 2 axes, got shape {a.shape}")
    return _emit("transpose", (a,), np.swapaxes(a.data, -1, -2).copy(),
                 lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ContractError(f"concat: shapes {shapes} do not conform on axis {axis}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tuple(tensors), out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ContractError(f"stack: shapes {shapes} differ") from None
    n = len(tensors)
    return _emit("stack", tuple(tensors), out,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape).copy()
    except ValueError:
        raise ContractError(f"reshape: cannot view {a.shape} as {shape}") from None
    src = a.shape
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def _is_basic_index(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, slice, type(None), type(Ellipsis))) for p in parts)


def take(a, index):
    """Index with numpy semantics (``a[index]``)."""
    a = as_tensor(a)
    try:
        out = np.array(a.data[index])
    except IndexError as err:
        raise ContractError(f"slice: {err} for shape {a.shape}") from None
    src = a.shape
    basic = _is_basic_index(index)

    def backward(g):
        z = np.zeros(src)
        if basic:
            z[index] = g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _emit("slice", (a,), out, backward)


def select_rows(a, mask):
    """Rows of ``a`` (axis 0) where the boolean ``mask`` is true, in order."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 1 or a.ndim == 0 or mask.shape[0] != a.shape[0]:
        raise ContractError(f"select_rows: mask shape {mask.shape} vs tensor shape {a.shape}")
    src = a.shape

    def backward(g):
        z = np.zeros(src)
        z[mask] = g
        return (z,)

    return _emit("select_rows", (a,), a.data[mask], backward)


def straight_through(soft, hard):
    """Forward the constant ``hard`` values, backward as identity into ``soft``."""
    soft = as_tensor(soft)
    hard = np.array(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ContractError(f"straight_through: shapes {soft.shape} and {hard.shape} differ")
    return _emit("straight_through", (soft,), hard, lambda g: (g,))


def _sigmoid(x):
    # tanh form never overflows and is several times cheaper than logaddexp
    return 0.5 * np.tanh(0.5 * x) + 0.5


def lstm_sequence(x, w_input, w_hidden, bias, mask=None):
    """Fused LSTM over a batch; returns every hidden state (B x L x d).

    Gate blocks are ordered input, forget, cell, output. Where the boolean
    ``mask`` (B x L) is false the step keeps the previous state. Same values
    as composing the step from primitives, one tape entry instead of ~20 per
    step.
    """
    x, w_input, w_hidden, bias = (as_tensor(t) for t in (x, w_input, w_hidden, bias))
    if x.ndim != 3 or x.shape[1] == 0:
        raise ContractError(f"lstm: need a nonempty B x L x in sequence, got {x.shape}")
    d = w_hidden.shape[0]
    if (w_input.shape != (x.shape[2], 4 * d) or w_hidden.shape != (d, 4 * d)
            or bias.shape != (4 * d,)):
        raise ContractError(
            f"lstm: input {x.shape}, weights {w_input.shape}, {w_hidden.shape}, bias {bias.shape}")
    batch, length, _ = x.shape
    X, Wi, Wh = x.data, w_input.data, w_hidden.data
    keep = None if mask is None else np.asarray(mask, dtype=np.float64).T[:, :, None]
    # time-major buffers: gates (i, f, g, o activated), previous h and c, tanh(c)
    proj = np.matmul(X.transpose(1, 0, 2), Wi) + bias.data
    gates = np.empty((length, batch, 4 * d))
    h_prev = np.empty((length, batch, d))
    c_prev = np.empty((length, batch, d))
    tanh_c = np.empty((length, batch, d))
    h = np.zeros((batch, d))
    c = np.zeros((batch, d))
    out = np.empty((length, batch, d))
    for t in range(length):
        z = proj[t]
        z += h @ Wh
        gt = gates[t]
        gt[:, :2 * d] = _sigmoid(z[:, :2 * d])
        gt[:, 2 * d:3 * d] = np.tanh(z[:, 2 * d:3 * d])
        gt[:, 3 * d:] = _sigmoid(z[:, 3 * d:])
        h_prev[t] = h
        c_prev[t] = c
        c_new = gt[:, d:2 * d] * c + gt[:, :d] * gt[:, 2 * d:3 * d]
        tc = tanh_c[t]
        np.tanh(c_new, out=tc)
        h_new = gt[:, 3 * d:] * tc
        if keep is None:
            c, h = c_new, h_new
        else:
            m = keep[t]
            c = c + m * (c_new - c)
            h = h + m * (h_new - h)
        out[t] = h

    def backward(grad):
        grad = grad.transpose(1, 0, 2)
        dproj = np.empty((length, batch, 4 * d))
        dh_next = np.zeros((batch, d))
        dc_next = np.zeros((batch, d))
        for t in range(length - 1, -1, -1):
            gt = gates[t]
            i, f, g, o = gt[:, :d], gt[:, d:2 * d], gt[:, 2 * d:3 * d], gt[:, 3 * d:]
            tc = tanh_c[t]
            dh = grad[t] + dh_next
            if keep is None:
                dh_new, dc = dh, dc_next
            else:
                m = keep[t]
                dh_new, dc = dh * m, dc_next * m
            dc = dc + dh_new * o * (1.0 - tc * tc)
            dz = dproj[t]
            dz[:, :d] = dc * g * i * (1.0 - i)
            dz[:, d:2 * d] = dc * c_prev[t] * f * (1.0 - f)
            dz[:, 2 * d:3 * d] = dc * i * (1.0 - g * g)
            dz[:, 3 * d:] = dh_new * tc * o * (1.0 - o)
            carry_h, carry_c = dh, dc_next
            dh_next = dz @ Wh.T
            dc_next = dc * f
            if keep is not None:
                dh_next += carry_h * (1.0 - m)
                dc_next += carry_c * (1.0 - m)
        flat = dproj.reshape(-1, 4 * d)
        d_x = np.matmul(dproj, Wi.T).transpose(1, 0, 2)
        d_wi = X.transpose(1, 0, 2).reshape(-1, X.shape[2]).T @ flat
        d_wh = h_prev.reshape(-1, d).T @ flat
        return d_x, d_wi, d_wh, flat.sum(axis=0)

    out = out.transpose(1, 0, 2)
    return _emit("lstm", (x, w_input, w_hidden, bias), out, backward)


# -- reductions and normalizers --------------------------------------------

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), backward)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    src = a.shape
    n = a.size if axis is None else src[axis]
    if n == 0:
        raise ContractError(f"mean: empty reduction over shape {src}")

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src),)

    return _emit("mean", (a,), np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), backward)


def softmax(a, axis=-1):
    a = as_tensor(a)
    if a.ndim == 0:
        raise ContractError("softmax: scalar input")
    e = np.exp(a.data - a.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", (a,), s,
                 lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    if a.ndim == 0:
        raise ContractError("log_softmax: scalar input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    s = np.exp(out)
    return _emit("log_softmax", (a,), out,
                 lambda g: (g - s * g.sum(axis=axis, keepdims=True),))


# -- losses -------------------------------------------------------------------

PROB_FLOOR = 1e-12


def cross_entropy(logits, label):
    """Negative log-likelihood of ``label`` under softmax(logits).

    ``logits`` has classes on the last axis; ``label`` is an int or an int
    array matching the leading axes. Returns one loss per leading index.
    """
    logits = as_tensor(logits)
    if logits.ndim == 0 or logits.shape[-1] < 2:
        raise ContractError(f"cross_entropy: need at least 2 classes, got shape {logits.shape}")
    n_classes = logits.shape[-1]
    label = np.asarray(label)
    if label.shape != logits.shape[:-1]:
        raise ContractError(f"cross_entropy: label shape {label.shape} vs logits {logits.shape}")
    if not np.issubdtype(label.dtype, np.integer) or (label < 0).any() or (label >= n_classes).any():
        raise ContractError(f"cross_entropy: label {label.tolist()} outside [0, {n_classes})")
    onehot = np.eye(n_classes)[label]
    return scale(sum(multiply(log_softmax(logits), onehot), axis=-1), -1.0)


def kl_divergence(pred_logits, target_probs):
    """KL(softmax(pred_logits) || target_probs), summed over the last axis.

    The target is a constant; entries below 1e-12 are floored there so the
    result stays finite.
    """
    pred_logits = as_tensor(pred_logits)
    q = target_probs.data if isinstance(target_probs, Tensor) else np.asarray(target_probs, float)
    if q.shape[-1:] != pred_logits.shape[-1:]:
        raise ContractError(f"kl_divergence: target shape {q.shape} vs logits {pred_logits.shape}")
    if (q < 0).any() or np.abs(q.sum(axis=-1) - 1.0).max() > 1e-6:
        raise ContractError("kl_divergence: target is not a probability vector")
    log_q = np.log(np.maximum(q, PROB_FLOOR))
    log_p = log_softmax(pred_logits)
    p = softmax(pred_logits)
    return sum(multiply(p, subtract(log_p, log_q)), axis=-1)
