"""Dense tensors with reverse-mode automatic differentiation.

Every primitive applied to a tensor that requires gradients is recorded on the
calling thread's `GraphTape`. `backward()` walks that tape in reverse order,
accumulates gradients into the leaf tensors and clears the tape afterwards.

Two precision modes exist: `standard` (32-bit floats, used for training) and
`high` (64-bit floats, used for gradient checks). In high-precision mode any
NaN or Inf flowing through a primitive raises a `NonFiniteError`.
"""

# pylint: disable-msg=arguments-differ
# pylint: disable-msg=too-few-public-methods

import threading
from contextlib import contextmanager

import numpy as np
from loguru import logger as log

from .exceptions import ConfigError, NonFiniteError, ShapeError, TapeError


PRECISIONS = {"standard": np.float32, "high": np.float64}

IGNORE_INDEX = -100
"""Label value marking positions that don't contribute to the loss."""

MASK_VALUE = -1e9
"""Finite fill value for masked attention scores."""

_LOCAL = threading.local()


def _state():
    """Get the calling thread's autodiff state, initializing it on first use."""
    if not hasattr(_LOCAL, "tape"):
        _LOCAL.tape = GraphTape()
        _LOCAL.precision = "standard"
        _LOCAL.grad_enabled = True
    return _LOCAL


def current_tape():
    """The `GraphTape` of the calling thread."""
    return _state().tape


def get_precision():
    """The precision mode of the calling thread, `standard` or `high`."""
    return _state().precision


def set_precision(mode):
    """Set the precision mode of the calling thread.

    Parameters
    ----------
    mode : str
        One of `standard` or `high`.

    Raises
    ------
    ConfigError
        Raised for unknown modes.
    """
    if mode not in PRECISIONS:
        raise ConfigError(
            f"Unknown precision mode '{mode}', use one of {list(PRECISIONS)}"
        )
    _state().precision = mode


@contextmanager
def precision(mode):
    """Context manager switching the calling thread's precision mode."""
    previous = get_precision()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(previous)


def default_dtype():
    """The numpy float type matching the current precision mode."""
    return PRECISIONS[get_precision()]


def is_grad_enabled():
    """Whether primitives are currently being recorded on the tape."""
    return _state().grad_enabled


@contextmanager
def no_grad():
    """Context manager disabling recording on the calling thread's tape."""
    state = _state()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


class Node:
    """One recorded primitive application."""

    def __init__(self, index, function, inputs, output):
        self.index = index
        self.function = function
        self.inputs = inputs
        self.output = output


class GraphTape:

    """Ordered record of the primitive applications on one thread.

    Nodes are appended in execution order, so every input of node `i` was
    produced by some node `j < i` or is a leaf.
    """

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def record(self, function, inputs, output):
        """Append a node and link the output tensor to it."""
        node = Node(len(self.nodes), function, inputs, output)
        self.nodes.append(node)
        output.node = node

    def holds(self, tensor):
        """Check if a tensor was produced by a node of this tape."""
        node = tensor.node
        return (
            node is not None
            and node.index < len(self.nodes)
            and self.nodes[node.index] is node
        )

    def clear(self):
        """Drop all nodes, turning their outputs into plain (leaf) tensors."""
        for node in self.nodes:
            node.output.node = None
        self.nodes = []


class Tensor:

    """A dense n-dimensional array that can take part in differentiation.

    Attributes
    ----------
    data : numpy.ndarray
        The values, row-major.
    requires_grad : bool
        Whether gradients should be accumulated into `grad`. For model
        parameters this is the *trainable* flag.
    grad : numpy.ndarray or None
        Same-shape gradient buffer, populated by `backward()`.
    node : Node or None
        The tape node that produced this tensor, None for leaves.
    """

    def __init__(self, data, requires_grad=False):
        if isinstance(data, np.ndarray) and np.issubdtype(data.dtype, np.floating):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=default_dtype())
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        """The tensor's dimensions as a tuple."""
        return tuple(self.data.shape)

    @property
    def ndim(self):
        """Number of dimensions."""
        return self.data.ndim

    @property
    def size(self):
        """Number of elements."""
        return int(self.data.size)

    def item(self):
        """Get the value of a single-element tensor as a Python float."""
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def zero_grad(self):
        """Reset the gradient buffer."""
        self.grad = None

    def detach(self):
        """A new leaf tensor sharing the data but not the history."""
        return Tensor(self.data)

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _check_finite(name, arrays):
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            msg = f"{name}: non-finite value in operand of shape {arr.shape}"
            log.error(msg)
            raise NonFiniteError(msg)


def _reduce_to(grad, shape):
    """Sum a gradient over the leading dimensions it was broadcast along."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _check_leading_broadcast(name, a, b):
    if a.shape == b.shape:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim :] != small.shape:
        raise ShapeError(f"{name}: shapes {a.shape} and {b.shape} don't conform")


class Function:

    """Base class for the differentiable primitives.

    Subclasses implement `forward()` on raw arrays (saving whatever they need
    for the backward pass on the instance) and `backward()` returning one
    gradient array (or None) per tensor input.
    """

    name = "function"

    def forward(self, *arrays, **attrs):
        """Compute the primitive's output array."""
        raise NotImplementedError(f"{self.name}: forward not implemented")

    def backward(self, grad):
        """Map the output gradient to a tuple of input gradients."""
        raise NotImplementedError(f"{self.name}: backward not implemented")

    @classmethod
    def apply(cls, *inputs, **attrs):
        """Run the primitive and record it on the tape if needed.

        Parameters
        ----------
        *inputs : Tensor
        **attrs
            Non-differentiable attributes passed on to `forward()`.

        Returns
        -------
        Tensor
        """
        func = cls()
        arrays = [tensor.data for tensor in inputs]
        high = get_precision() == "high"
        if high:
            _check_finite(cls.name, arrays)
        out = Tensor(func.forward(*arrays, **attrs))
        if high:
            _check_finite(cls.name, [out.data])
        if is_grad_enabled() and any(tensor.requires_grad for tensor in inputs):
            out.requires_grad = True
            current_tape().record(func, inputs, out)
        return out


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if (
            a.ndim < 2
            or b.ndim < 2
            or a.shape[-1] != b.shape[-2]
            or (b.ndim > 2 and b.shape[:-2] != a.shape[:-2])
        ):
            raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} don't conform")
        self.saved = (a, b)
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.saved
        grad_a = np.matmul(grad, np.swapaxes(b, -1, -2))
        if b.ndim == 2:
            grad_b = a.reshape(-1, a.shape[-1]).T @ grad.reshape(-1, grad.shape[-1])
        else:
            grad_b = np.matmul(np.swapaxes(a, -1, -2), grad)
        return grad_a, grad_b


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_leading_broadcast(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        shape_a, shape_b = self.shapes
        return _reduce_to(grad, shape_a), _reduce_to(grad, shape_b)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_leading_broadcast(self.name, a, b)
        self.saved = (a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return _reduce_to(grad * b, a.shape), _reduce_to(grad * a, b.shape)


class Scale(Function):
    name = "scale"

    def forward(self, x, factor=1.0):
        self.factor = float(factor)
        factor = self.factor
        return x * factor

    def backward(self, grad):
        return (grad * self.factor,)


class Softmax(Function):
    name = "softmax"

    def forward(self, x):
        if x.ndim == 0 or x.shape[-1] == 0:
            raise ShapeError(f"softmax: rows must be non-empty, got shape {x.shape}")
        exps = np.exp(x - np.max(x, axis=-1, keepdims=True))
        self.out = exps / np.sum(exps, axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        out = self.out
        return (out * (grad - np.sum(grad * out, axis=-1, keepdims=True)),)


class RmsNorm(Function):
    name = "rms_norm"

    def forward(self, x, gain, eps=1e-6):
        if gain.shape != (x.shape[-1],):
            raise ShapeError(
                f"rms_norm: shapes {x.shape} and {gain.shape} don't conform"
            )
        rstd = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
        normed = x * rstd
        self.saved = (normed, rstd, gain)
        return normed * gain

    def backward(self, grad):
        normed, rstd, gain = self.saved
        grad_normed = grad * gain
        grad_x = rstd * (
            grad_normed - normed * np.mean(grad_normed * normed, axis=-1, keepdims=True)
        )
        return grad_x, _reduce_to(grad * normed, gain.shape)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Silu(Function):
    name = "silu"

    def forward(self, x):
        self.saved = (x, _sigmoid(x))
        return x * self.saved[1]

    def backward(self, grad):
        x, sig = self.saved
        return (grad * sig * (1.0 + x * (1.0 - sig)),)


class Embedding(Function):
    name = "embedding"

    def forward(self, table, ids=None):
        ids = np.asarray(ids)
        if table.ndim != 2:
            raise ShapeError(f"embedding: table must be 2-D, got shape {table.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise ShapeError(
                f"embedding: ids out of range for table of shape {table.shape}"
            )
        self.saved = (table.shape, table.dtype, ids)
        return table[ids]

    def backward(self, grad):
        shape, dtype, ids = self.saved
        grad_table = np.zeros(shape, dtype=dtype)
        np.add.at(grad_table, ids, grad)
        return (grad_table,)


class CausalMask(Function):
    name = "causal_mask"

    def forward(self, scores):
        if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
            raise ShapeError(
                f"causal_mask: expected square scores, got shape {scores.shape}"
            )
        size = scores.shape[-1]
        self.mask = np.triu(np.ones((size, size), dtype=bool), k=1)
        return np.where(self.mask, scores.dtype.type(MASK_VALUE), scores)

    def backward(self, grad):
        return (np.where(self.mask, grad.dtype.type(0.0), grad),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes=None):
        if axes is None:
            if x.ndim < 2:
                raise ShapeError(
                    f"transpose: need at least 2 dims, got shape {x.shape}"
                )
            axes = list(range(x.ndim))
            axes[-1], axes[-2] = axes[-2], axes[-1]
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
        self.axes = tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=None):
        self.orig = x.shape
        try:
            return np.reshape(x, shape)
        except ValueError as err:
            raise ShapeError(f"reshape: can't reshape {x.shape} into {shape}") from err

    def backward(self, grad):
        return (np.reshape(grad, self.orig),)


class Concat(Function):
    name = "concat_rows"

    def forward(self, *arrays, axis=0):
        rest = {a.shape[:axis] + a.shape[axis + 1 :] for a in arrays}
        if axis < 0 or len(rest) != 1:
            raise ShapeError(
                f"concat_rows: shapes {[a.shape for a in arrays]} don't conform"
            )
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Sum(Function):
    name = "sum"

    def forward(self, x, axis=None):
        self.saved = (x.shape, axis)
        return np.asarray(np.sum(x, axis=axis), dtype=x.dtype)

    def backward(self, grad):
        shape, axis = self.saved
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class LogSigmoid(Function):
    name = "log_sigmoid"

    def forward(self, x):
        self.x = x
        return -np.logaddexp(x.dtype.type(0.0), -x)

    def backward(self, grad):
        return (grad * _sigmoid(-self.x),)


class RowNormalize(Function):
    name = "row_normalize"

    def forward(self, w):
        if w.ndim != 2:
            raise ShapeError(f"row_normalize: expected a matrix, got shape {w.shape}")
        norms = np.maximum(np.sqrt(np.sum(w * w, axis=-1, keepdims=True)), 1e-12)
        self.saved = (w / norms, norms)
        return self.saved[0]

    def backward(self, grad):
        out, norms = self.saved
        return ((grad - out * np.sum(grad * out, axis=-1, keepdims=True)) / norms,)


class WeightedCrossEntropy(Function):
    name = "weighted_cross_entropy"

    def forward(self, logits, targets=None, weights=None, normalizer=None):
        targets = np.asarray(targets)
        if logits.ndim != 2 or logits.shape[1] == 0 or logits.shape[0] == 0:
            raise ShapeError(
                "weighted_cross_entropy: expected non-empty N x V logits, "
                f"got {logits.shape}"
            )
        weights = np.asarray(weights, dtype=logits.dtype)
        if targets.shape != (logits.shape[0],) or weights.shape != targets.shape:
            raise ShapeError(
                f"weighted_cross_entropy: shapes {logits.shape} and {targets.shape} "
                "don't conform"
            )
        active = targets != IGNORE_INDEX
        if np.any((targets[active] < 0) | (targets[active] >= logits.shape[1])):
            raise ShapeError("weighted_cross_entropy: target index out of range")
        weights = np.where(active, weights, weights.dtype.type(0.0))
        norm = float(weights.sum()) if normalizer is None else float(normalizer)
        safe = np.where(active, targets, 0)
        rows = np.arange(logits.shape[0])
        shifted = logits - np.max(logits, axis=1, keepdims=True)
        lse = np.log(np.sum(np.exp(shifted), axis=1))
        losses = lse - shifted[rows, safe]
        self.saved = (shifted, lse, safe, rows, weights, norm)
        if norm == 0.0:
            return np.asarray(0.0, dtype=logits.dtype)
        return np.asarray(np.sum(weights * losses) / norm, dtype=logits.dtype)

    def backward(self, grad):
        shifted, lse, safe, rows, weights, norm = self.saved
        if norm == 0.0:
            return (np.zeros_like(shifted),)
        probs = np.exp(shifted - lse[:, None])
        probs[rows, safe] -= 1.0
        return (grad * (weights / norm)[:, None] * probs,)


def matmul(a, b):
    """Matrix product, batched over leading dims; `b` is 2-D or shares them."""
    return MatMul.apply(a, b)


def add(a, b):
    """Elementwise sum, broadcasting the smaller operand over leading dims."""
    return Add.apply(a, b)


def mul(a, b):
    """Elementwise product, broadcasting the smaller operand over leading dims."""
    return Mul.apply(a, b)


def scale(x, factor):
    """Multiply by a Python scalar."""
    return Scale.apply(x, factor=factor)


def softmax(x):
    """Numerically stable softmax over the last axis."""
    return Softmax.apply(x)


def rms_norm(x, gain, eps=1e-6):
    """RMS-normalize the last axis and multiply with a learned gain vector."""
    return RmsNorm.apply(x, gain, eps=eps)


def silu(x):
    """The SiLU activation `x * sigmoid(x)`."""
    return Silu.apply(x)


def embedding(table, ids):
    """Gather rows of `table` for an integer array of ids."""
    return Embedding.apply(table, ids=ids)


def causal_mask(scores):
    """Replace the strictly upper triangle of square scores by a large negative."""
    return CausalMask.apply(scores)


def transpose(x, axes=None):
    """Permute axes, by default swapping the last two."""
    return Transpose.apply(x, axes=axes)


def reshape(x, shape):
    """Reshape, keeping the row-major element order."""
    return Reshape.apply(x, shape=tuple(shape))


def concat_rows(tensors, axis=0):
    """Concatenate tensors along an axis (the first one by default)."""
    return Concat.apply(*tensors, axis=axis)


def tensor_sum(x, axis=None):
    """Sum over one axis or over all elements."""
    return Sum.apply(x, axis=axis)


def log_sigmoid(x):
    """Elementwise `log(sigmoid(x))`, computed stably."""
    return LogSigmoid.apply(x)


def row_normalize(w):
    """Divide each row of a matrix by its euclidean norm."""
    return RowNormalize.apply(w)


def weighted_cross_entropy(logits, targets, weights, normalizer=None):
    """Weighted next-token cross-entropy over an `N x V` logits matrix.

    Parameters
    ----------
    logits : Tensor
        Shape `(N, V)`.
    targets : array-like(int)
        Shape `(N,)`, positions with `IGNORE_INDEX` get weight 0.
    weights : array-like(float)
        Shape `(N,)`, per-position loss weights.
    normalizer : float, optional
        The divisor of the weighted sum, by default the sum of the weights.
        A normalizer of 0 yields a loss of 0.

    Returns
    -------
    Tensor
        A scalar.
    """
    return WeightedCrossEntropy.apply(
        logits, targets=targets, weights=weights, normalizer=normalizer
    )


def backward(loss):
    """Back-propagate from a scalar through the calling thread's tape.

    Gradients are summed up per pass first and then added to the leaf
    tensors' `grad` buffers, so repeated calls accumulate. Leaves recorded on
    the tape that didn't receive any gradient get a zero buffer. The tape is
    cleared afterwards.

    Parameters
    ----------
    loss : Tensor
        A single-element tensor produced by a recorded primitive.

    Raises
    ------
    TapeError
        Raised for non-scalar tensors or tensors not on the tape.
    """
    tape = current_tape()
    if loss.size != 1:
        msg = f"backward needs a scalar, got shape {loss.shape}"
        log.error(msg)
        raise TapeError(msg)
    if not tape.holds(loss):
        msg = "backward called on a tensor that is not on the tape"
        log.error(msg)
        raise TapeError(msg)

    grads = {id(loss): np.ones_like(loss.data)}
    leaf_grads = {}
    leaves = {}
    for node in reversed(tape.nodes[: loss.node.index + 1]):
        grad = grads.pop(id(node.output), None)
        if grad is None:
            continue
        for tensor, input_grad in zip(node.inputs, node.function.backward(grad)):
            if input_grad is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            target = leaf_grads if tensor.node is None else grads
            if tensor.node is None:
                leaves[key] = tensor
            if key in target:
                target[key] = target[key] + input_grad
            else:
                target[key] = input_grad

    for key, tensor in leaves.items():
        grad = np.asarray(leaf_grads[key], dtype=tensor.data.dtype)
        grad = grad.reshape(tensor.shape)
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
    for node in tape.nodes:
        for tensor in node.inputs:
            if tensor.requires_grad and tensor.node is None and tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
    log.trace("Backward pass over {} tape nodes done.", len(tape))
    tape.clear()


def grad_check(fn, params, h=1e-4, atol=0.0):
    """Compare analytic gradients against central finite differences.

    Parameters
    ----------
    fn : callable
        Deterministic function without arguments returning a scalar Tensor.
    params : list(Tensor)
        The tensors to check, perturbed in-place one entry at a time.
    h : float, optional
        The finite-difference step, by default 1e-4.
    atol : float, optional
        Entries whose absolute difference doesn't exceed this value count as
        exact, by default 0 (pure relative error).

    Returns
    -------
    float
        The maximum of `|a - n| / (|a| + |n| + 1e-12)` over all entries, or
        infinity if any value turned out non-finite.
    """
    if get_precision() != "high":
        log.warning("Running a gradient check in standard precision, expect noise!")
    for param in params:
        param.grad = None
    try:
        loss = fn()
        backward(loss)
    except NonFiniteError as err:
        log.warning("Gradient check hit a non-finite value: {}", err)
        return float("inf")
    analytic = [
        p.grad if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    with no_grad():
        for param, grads in zip(params, analytic):
            values = param.data
            for idx in np.ndindex(values.shape):
                orig = values[idx]
                try:
                    values[idx] = orig + h
                    f_plus = float(fn().data)
                    values[idx] = orig - h
                    f_minus = float(fn().data)
                except NonFiniteError as err:
                    log.warning("Gradient check hit a non-finite value: {}", err)
                    return float("inf")
                finally:
                    values[idx] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                ana = float(grads[idx])
                if not (np.isfinite(numeric) and np.isfinite(ana)):
                    return float("inf")
                diff = abs(ana - numeric)
                if diff <= atol:
                    continue
                worst = max(worst, diff / (abs(ana) + abs(numeric) + 1e-12))
    for param in params:
        param.grad = None
    log.debug(
        "Gradient check over {} tensors: max relative error {:.3e}",
        len(params),
        worst,
    )
    return worst
