# -*- coding: utf-8 -*-
#
#  This file is part of advmask-works.
#
#  Licensed under the Apache License, Version 2.0. See __init__.py.
#

"""Reverse-mode automatic differentiation over dense numpy tensors.

Graphs are built while the forward pass runs: every operation returns a
``Tensor`` remembering its parents and a closure that pushes the output
gradient back to them. ``backward()`` orders the reachable nodes
topologically and runs the closures in reverse.

Only the operations the classifier, the encoder and the attack loss need
are provided. There is no implicit broadcasting; ``broadcast_mul_channels``
and ``add_bias`` are the only operations combining operands of different
shapes.

Arithmetic runs in 32-bit floats. ``double_precision()`` switches newly
created tensors to 64-bit, which is what the gradient checks use.

"""

import contextlib
import itertools
import logging
import threading

import numpy as np

from advmask_works.exceptions import ContractError
from advmask_works.exceptions import DimensionError
from advmask_works.exceptions import NumericalError


logger = logging.getLogger(__name__)

_state = threading.local()
_ids = itertools.count()


def get_default_dtype():
    return getattr(_state, 'dtype', np.float32)


@contextlib.contextmanager
def double_precision():
    """Creates 64-bit tensors inside the block (for gradient checks)."""
    previous = get_default_dtype()
    _state.dtype = np.float64
    try:
        yield
    finally:
        _state.dtype = previous


class Tensor:
    """An n-dimensional array with an optional gradient slot.

    ``data`` and ``grad`` are numpy arrays of the same shape. Non-leaf
    tensors keep a reference to their parents and to the closure computing
    their parents' gradients; leaves have neither.

    """

    def __init__(self, data, requires_grad=False, _parents=(), _op='leaf'):
        self.data = np.array(data, dtype=get_default_dtype())
        if not np.all(np.isfinite(self.data)):
            raise NumericalError('Non-finite value produced by `{}`'.format(_op))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.id = next(_ids)
        self._parents = tuple(_parents)
        self._op = _op
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        return backward(self)

    def __repr__(self):
        return 'Tensor(shape={}, op={}, requires_grad={})'.format(
            self.shape, self._op, self.requires_grad)


class Graph:
    """The nodes reachable from a loss, in topological order.

    Every node appears after all of its inputs. ``backward()`` returns the
    graph it differentiated so callers can inspect the visiting order.

    """

    def __init__(self, nodes):
        self.nodes = list(nodes)
        self.index = dict((node.id, i) for i, node in enumerate(self.nodes))

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)

    def reverse(self):
        return reversed(self.nodes)


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(data, parents, op, backward_fn):
    out = Tensor(data, _parents=parents, _op=op)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    grad = np.asarray(grad, dtype=tensor.data.dtype)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise DimensionError('{}: shapes {} and {} differ'.format(op, a.shape, b.shape))


# Elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape('add', a, b)

    def _backward(out):
        _accumulate(a, out.grad)
        _accumulate(b, out.grad)
    return _result(a.data + b.data, (a, b), 'add', _backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape('sub', a, b)

    def _backward(out):
        _accumulate(a, out.grad)
        _accumulate(b, -out.grad)
    return _result(a.data - b.data, (a, b), 'sub', _backward)


def elementwise_mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape('elementwise_mul', a, b)

    def _backward(out):
        _accumulate(a, out.grad * b.data)
        _accumulate(b, out.grad * a.data)
    return _result(a.data * b.data, (a, b), 'elementwise_mul', _backward)


def scale(a, factor):
    """Multiplies by a constant Python number."""
    a = as_tensor(a)
    factor = float(factor)

    def _backward(out):
        _accumulate(a, out.grad * factor)
    return _result(a.data * factor, (a,), 'scale', _backward)


def add_scalar(a, value):
    a = as_tensor(a)

    def _backward(out):
        _accumulate(a, out.grad)
    return _result(a.data + float(value), (a,), 'add_scalar', _backward)


def maximum(a, b):
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape('maximum', a, b)
    pick_a = a.data >= b.data

    def _backward(out):
        _accumulate(a, out.grad * pick_a)
        _accumulate(b, out.grad * ~pick_a)
    return _result(np.where(pick_a, a.data, b.data), (a, b), 'maximum', _backward)


def relu(x):
    x = as_tensor(x)
    positive = x.data > 0

    def _backward(out):
        _accumulate(x, out.grad * positive)
    return _result(x.data * positive, (x,), 'relu', _backward)


def _stable_sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_tensor(x)
    s = _stable_sigmoid(x.data)

    def _backward(out):
        _accumulate(x, out.grad * s * (1.0 - s))
    return _result(s, (x,), 'sigmoid', _backward)


def broadcast_mul_channels(x, m):
    """Multiplies every channel of ``x[c,h,w]`` by the single-channel ``m[1,h,w]``."""
    x, m = as_tensor(x), as_tensor(m)
    if x.data.ndim != 3 or m.data.ndim != 3 or m.shape[0] != 1 or m.shape[1:] != x.shape[1:]:
        raise DimensionError('broadcast_mul_channels: cannot apply mask {} to {}'.format(
            m.shape, x.shape))

    def _backward(out):
        _accumulate(x, out.grad * m.data)
        _accumulate(m, (out.grad * x.data).sum(axis=0, keepdims=True))
    return _result(x.data * m.data, (x, m), 'broadcast_mul_channels', _backward)


# Reductions and reshaping

def sum(x):
    x = as_tensor(x)

    def _backward(out):
        _accumulate(x, np.broadcast_to(out.grad, x.shape))
    return _result(x.data.sum(), (x,), 'sum', _backward)


def mean(x):
    x = as_tensor(x)
    n = x.size

    def _backward(out):
        _accumulate(x, np.broadcast_to(out.grad / n, x.shape))
    return _result(x.data.mean(), (x,), 'mean', _backward)


def reshape(x, shape):
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError('reshape: cannot view {} as {}'.format(x.shape, shape))

    def _backward(out):
        _accumulate(x, out.grad.reshape(x.shape))
    return _result(data, (x,), 'reshape', _backward)


# Dense layers

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError('matmul: cannot multiply {} by {}'.format(a.shape, b.shape))

    def _backward(out):
        _accumulate(a, out.grad @ b.data.T)
        _accumulate(b, a.data.T @ out.grad)
    return _result(a.data @ b.data, (a, b), 'matmul', _backward)


def add_bias(x, bias):
    """Adds ``bias`` along axis 1 of ``x`` (dense ``[n,f]`` or conv ``[n,c,h,w]``)."""
    x, bias = as_tensor(x), as_tensor(bias)
    if bias.data.ndim != 1 or x.data.ndim < 2 or x.shape[1] != bias.shape[0]:
        raise DimensionError('add_bias: cannot add {} to {}'.format(bias.shape, x.shape))
    view = (1, -1) + (1,) * (x.data.ndim - 2)
    reduce_axes = (0,) + tuple(range(2, x.data.ndim))

    def _backward(out):
        _accumulate(x, out.grad)
        _accumulate(bias, out.grad.sum(axis=reduce_axes))
    return _result(x.data + bias.data.reshape(view), (x, bias), 'add_bias', _backward)


# Convolution and pooling

def _im2col(xp, k, stride, out_h, out_w):
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    # (n, c, oh, ow, k, k) -> (n, oh, ow, c, k, k)
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(xp.shape[0] * out_h * out_w, -1)


def conv2d(x, kernel, stride=1, padding=0):
    """Cross-correlation of ``x[c,h,w]`` (or a batch ``x[n,c,h,w]``) with
    ``kernel[c_out,c_in,k,k]``.

    Output spatial size is ``(h + 2*padding - k) // stride + 1``.

    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError('conv2d: expected [c,h,w] input and 4-d kernel, got {} and {}'.format(
            x.shape, kernel.shape))
    n, c, h, w = xd.shape
    c_out, c_in, k, k2 = kernel.shape
    if c_in != c or k != k2:
        raise DimensionError('conv2d: kernel {} does not fit input {}'.format(kernel.shape, x.shape))
    if stride < 1 or padding < 0 or k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError('conv2d: invalid geometry (k={}, stride={}, padding={}) for {}'.format(
            k, stride, padding, x.shape))
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (w + 2 * padding - k) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, out_h, out_w)
    wmat = kernel.data.reshape(c_out, -1)
    out = (cols @ wmat.T).reshape(n, out_h, out_w, c_out).transpose(0, 3, 1, 2)
    if single:
        out = out[0]

    def _backward(result):
        grad = result.grad[None] if single else result.grad
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
        if kernel.requires_grad:
            _accumulate(kernel, (g2.T @ cols).reshape(kernel.shape))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, out_h, out_w, c, k, k)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, dx[0] if single else dx)
    return _result(out, (x, kernel), 'conv2d', _backward)


def maxpool2(x):
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped."""
    x = as_tensor(x)
    single = x.data.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or xd.shape[2] < 2 or xd.shape[3] < 2:
        raise DimensionError('maxpool2: cannot pool {}'.format(x.shape))
    n, c, h, w = xd.shape
    oh, ow = h // 2, w // 2
    blocks = xd[:, :, :oh * 2, :ow * 2].reshape(n, c, oh, 2, ow, 2)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, 4)
    winner = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def _backward(result):
        grad = result.grad[None] if single else result.grad
        gblocks = np.zeros((n, c, oh, ow, 4), dtype=xd.dtype)
        np.put_along_axis(gblocks, winner[..., None], grad[..., None], axis=-1)
        gblocks = gblocks.reshape(n, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros_like(xd)
        dx[:, :, :oh * 2, :ow * 2] = gblocks.reshape(n, c, oh * 2, ow * 2)
        _accumulate(x, dx[0] if single else dx)
    return _result(out, (x,), 'maxpool2', _backward)


# Classification

def softmax(logits):
    """Row-wise softmax of a numpy array (no gradient)."""
    z = np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``logits[n,k]`` (or ``logits[k]``) against integer labels."""
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    z = logits.data[None] if single else logits.data
    if z.ndim != 2:
        raise DimensionError('softmax_cross_entropy: logits must be [n,k], got {}'.format(logits.shape))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if labels.shape != (n,):
        raise DimensionError('softmax_cross_entropy: {} labels for {} rows'.format(labels.shape, n))
    if labels.min() < 0 or labels.max() >= k:
        raise ContractError('softmax_cross_entropy: labels must lie in [0, {})'.format(k))
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()

    def _backward(out):
        grad = np.exp(log_probs)
        grad[np.arange(n), labels] -= 1.0
        grad *= out.grad / n
        _accumulate(logits, grad[0] if single else grad)
    return _result(loss, (logits,), 'softmax_cross_entropy', _backward)


# Differentiation

def topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in visited:
            continue
        visited.add(node.id)
        stack.append((node, True))
        for parent in node._parents:
            if parent.id not in visited:
                stack.append((parent, False))
    return Graph(order)


def backward(loss):
    """Fills ``grad`` on every tensor reachable from the scalar ``loss``.

    Gradients accumulate additively, so a tensor used several times
    receives the sum of its contributions. Returns the ``Graph`` visited.

    """
    if loss.size != 1:
        raise ContractError('backward() requires a scalar loss, got shape {}'.format(loss.shape))
    graph = topological_order(loss)
    for node in graph:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in graph.reverse():
        if node._backward is not None and node.grad is not None:
            node._backward(node)
    logger.debug('Backward pass over {} nodes'.format(len(graph)))
    return graph
