"""Dense-tensor engine with reverse-mode differentiation.

A ``Graph`` records every operation as it executes (define-by-run); the
record is rebuilt on each forward pass. ``backward`` on a scalar output
walks the record once in reverse insertion order and returns a
``GradStore`` holding the gradient of the output with respect to every
tensor created on the graph, intermediate activations included.

Everything is float64. Shapes are explicit: no broadcasting beyond what
the individual ops define, no batch dimension.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .errors import GraphError, ShapeError, ValidationError

BCE_EPS = 1e-7  # probability clamp for the cross-entropy loss


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Tensor:
    """n-dimensional float64 array bound to the graph that produced it."""

    __slots__ = ("data", "graph", "node_id", "requires_grad")

    def __init__(self, data: np.ndarray, graph: "Graph", node_id: int,
                 requires_grad: bool = False):
        self.data = data
        self.graph = graph
        self.node_id = node_id
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, node_id={self.node_id})"


class _Record:
    """One recorded op: output node, its input nodes, and a backward closure."""

    __slots__ = ("input_ids", "output_id", "backward_fn")

    def __init__(self, input_ids, output_id, backward_fn):
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward_fn = backward_fn


class Graph:
    """Ordered operation record for one forward pass.

    Tensors are created either as leaves (inputs, parameters) via
    :meth:`leaf` or as op outputs. Node ids are assigned in creation
    order, so every record's inputs precede its output.
    """

    def __init__(self):
        self._shapes: list[tuple] = []
        self._records: list[_Record] = []

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        """Register an input or parameter array as a graph leaf."""
        return self._new_tensor(_as_f64(data).copy(), requires_grad)

    def _new_tensor(self, data: np.ndarray, requires_grad: bool = False) -> Tensor:
        node_id = len(self._shapes)
        self._shapes.append(data.shape)
        return Tensor(data, self, node_id, requires_grad)

    def _record(self, inputs: Iterable[Tensor], output: Tensor, backward_fn) -> None:
        self._records.append(
            _Record(tuple(t.node_id for t in inputs), output.node_id, backward_fn))

    @property
    def num_nodes(self) -> int:
        return len(self._shapes)

    @property
    def num_records(self) -> int:
        return len(self._records)


class GradStore:
    """Gradients of one scalar output, keyed by graph node.

    Querying a tensor that the output does not depend on yields zeros of
    the tensor's shape.
    """

    def __init__(self, grads: dict, graph: Graph):
        self._grads = grads
        self._graph = graph

    def grad(self, t: Tensor) -> np.ndarray:
        if t.graph is not self._graph:
            raise GraphError("tensor does not belong to the graph this store was built from")
        g = self._grads.get(t.node_id)
        if g is None:
            return np.zeros(t.shape)
        return g

    __getitem__ = grad

    def __contains__(self, t: Tensor) -> bool:
        return t.graph is self._graph and t.node_id in self._grads


def _same_graph(*tensors: Tensor) -> Graph:
    g = tensors[0].graph
    for t in tensors[1:]:
        if t.graph is not g:
            raise GraphError("operands belong to different graphs")
    return g


def _accum(grads: dict, node_id: int, value: np.ndarray) -> None:
    old = grads.get(node_id)
    if old is None:
        grads[node_id] = value
    else:
        old += value


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Patch matrix of shape (C*kh*kw, out_h*out_w) from a padded input."""
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, out_h, out_w))
    for ki in range(kh):
        for kj in range(kw):
            cols[:, ki, kj] = xp[:, ki:ki + stride * out_h:stride,
                                 kj:kj + stride * out_w:stride]
    return cols.reshape(c * kh * kw, out_h * out_w)


def _col2im(dcols: np.ndarray, c: int, kh: int, kw: int, stride: int,
            out_h: int, out_w: int, padded_shape: tuple) -> np.ndarray:
    """Scatter-add the patch-matrix gradient back onto the padded input."""
    dxp = np.zeros(padded_shape)
    d = dcols.reshape(c, kh, kw, out_h, out_w)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, ki:ki + stride * out_h:stride,
                kj:kj + stride * out_w:stride] += d[:, ki, kj]
    return dxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of x [C_in,H,W] with weight [C_out,C_in,kH,kW].

    Zero padding, integer stride. Output is [C_out,H',W'] with
    H' = (H + 2*pad - kH)//stride + 1.
    """
    g = _same_graph(x, weight, bias)
    if x.data.ndim != 3 or weight.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError(
            f"conv2d expects input [C,H,W], weight [O,C,kH,kW], bias [O]; "
            f"got {x.shape}, {weight.shape}, {bias.shape}")
    c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weight.shape
    if wc_in != c_in:
        raise ShapeError(f"weight expects {wc_in} input channels, input has {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"kernel {kh}x{kw} does not fit padded input "
                         f"{h + 2 * pad}x{w + 2 * pad}")
    out_h = (h + 2 * pad - kh) // stride + 1
    out_w = (w + 2 * pad - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)
    w_mat = weight.data.reshape(c_out, c_in * kh * kw)
    out_mat = w_mat @ cols + bias.data[:, None]
    out = g._new_tensor(out_mat.reshape(c_out, out_h, out_w))

    def backward(grad_out, grads):
        g_mat = grad_out.reshape(c_out, out_h * out_w)
        _accum(grads, weight.node_id, (g_mat @ cols.T).reshape(weight.shape))
        _accum(grads, bias.node_id, g_mat.sum(axis=1))
        dxp = _col2im(w_mat.T @ g_mat, c_in, kh, kw, stride, out_h, out_w, xp.shape)
        if pad:
            dxp = dxp[:, pad:pad + h, pad:pad + w]
        _accum(grads, x.node_id, dxp)

    g._record((x, weight, bias), out, backward)
    return out


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2):
    """Non-overlapping max pooling over k x k windows.

    Requires k == stride and spatial dims divisible by stride. Returns
    (pooled tensor, within-window argmax coordinates [C,H',W',2]); on
    ties the first position in row-major window scan order wins, and the
    backward pass routes each output gradient to that single position.
    """
    g = _same_graph(x)
    if x.data.ndim != 3:
        raise ShapeError(f"maxpool2d expects [C,H,W], got {x.shape}")
    if k != stride:
        raise ValidationError(f"only non-overlapping pooling supported (k={k}, stride={stride})")
    c, h, w = x.shape
    if h % stride or w % stride:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by stride {stride}")
    out_h, out_w = h // stride, w // stride

    windows = (x.data.reshape(c, out_h, k, out_w, k)
               .transpose(0, 1, 3, 2, 4)
               .reshape(c, out_h, out_w, k * k))
    flat_idx = windows.argmax(axis=3)  # first occurrence on ties
    out = g._new_tensor(np.take_along_axis(windows, flat_idx[..., None], axis=3)[..., 0])
    argmax = np.stack([flat_idx // k, flat_idx % k], axis=-1)

    def backward(grad_out, grads):
        dx = np.zeros((c, h, w))
        ci, oi, oj = np.indices((c, out_h, out_w))
        dx[ci, oi * k + flat_idx // k, oj * k + flat_idx % k] = grad_out
        _accum(grads, x.node_id, dx)

    g._record((x,), out, backward)
    return out, argmax


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map: out_i = sum_j W_ij x_j + b_i for 1-D x."""
    g = _same_graph(x, weight, bias)
    if x.data.ndim != 1 or weight.data.ndim != 2 or bias.data.ndim != 1:
        raise ShapeError(f"dense expects x [n], weight [m,n], bias [m]; "
                         f"got {x.shape}, {weight.shape}, {bias.shape}")
    m, n = weight.shape
    if x.shape != (n,) or bias.shape != (m,):
        raise ShapeError(f"dense dimension mismatch: x {x.shape}, "
                         f"weight {weight.shape}, bias {bias.shape}")
    out = g._new_tensor(weight.data @ x.data + bias.data)

    def backward(grad_out, grads):
        _accum(grads, weight.node_id, np.outer(grad_out, x.data))
        _accum(grads, bias.node_id, grad_out.copy())
        _accum(grads, x.node_id, weight.data.T @ grad_out)

    g._record((x, weight, bias), out, backward)
    return out


def unary(x: Tensor, kind: str) -> Tensor:
    """Elementwise activation, kind in {"relu", "sigmoid"}.

    relu' is 0 at exactly 0; sigmoid' uses s*(1-s) from the cached output.
    """
    g = _same_graph(x)
    if kind == "relu":
        out = g._new_tensor(np.maximum(x.data, 0.0))

        def backward(grad_out, grads, _xd=x.data):
            _accum(grads, x.node_id, grad_out * (_xd > 0.0))

    elif kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-x.data))
        out = g._new_tensor(s)

        def backward(grad_out, grads, _s=s):
            _accum(grads, x.node_id, grad_out * _s * (1.0 - _s))

    else:
        raise ValidationError(f"unknown unary kind {kind!r}")
    g._record((x,), out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    return unary(x, "relu")


def sigmoid(x: Tensor) -> Tensor:
    return unary(x, "sigmoid")


def bce_loss(prob: Tensor, label: int) -> Tensor:
    """Binary cross-entropy -(y ln p + (1-y) ln(1-p)) for a scalar probability.

    p is clamped to [BCE_EPS, 1-BCE_EPS] before the logs; the clamp is
    flat, so gradients vanish outside the clamp range.
    """
    g = _same_graph(prob)
    if prob.size != 1:
        raise ShapeError(f"bce_loss expects a single probability, got shape {prob.shape}")
    if label not in (0, 1):
        raise ValidationError(f"label must be 0 or 1, got {label!r}")
    p_raw = float(prob.data.reshape(-1)[0])
    p = min(max(p_raw, BCE_EPS), 1.0 - BCE_EPS)
    y = float(label)
    out = g._new_tensor(np.asarray(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))

    def backward(grad_out, grads):
        if BCE_EPS <= p_raw <= 1.0 - BCE_EPS:
            d = -(y / p) + (1.0 - y) / (1.0 - p)
        else:
            d = 0.0
        _accum(grads, prob.node_id,
               np.full(prob.shape, float(grad_out) * d))

    g._record((prob,), out, backward)
    return out


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten to 1-D."""
    g = _same_graph(x)
    shape = x.shape
    out = g._new_tensor(x.data.reshape(-1).copy())

    def backward(grad_out, grads):
        _accum(grads, x.node_id, grad_out.reshape(shape))

    g._record((x,), out, backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    g = _same_graph(x)
    out = g._new_tensor(np.asarray(x.data.sum()))

    def backward(grad_out, grads):
        _accum(grads, x.node_id, np.full(x.shape, float(grad_out)))

    g._record((x,), out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    g = _same_graph(a, b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = g._new_tensor(a.data + b.data)

    def backward(grad_out, grads):
        _accum(grads, a.node_id, grad_out.copy())
        _accum(grads, b.node_id, grad_out.copy())

    g._record((a, b), out, backward)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    g = _same_graph(x)
    c = float(c)
    out = g._new_tensor(x.data * c)

    def backward(grad_out, grads):
        _accum(grads, x.node_id, grad_out * c)

    g._record((x,), out, backward)
    return out


def backward(output: Tensor) -> GradStore:
    """Gradients of a scalar output w.r.t. every tensor on its graph.

    Walks the operation record once, in reverse insertion order.
    Raises GraphError if the output is not a single-element tensor.
    """
    if output.size != 1:
        raise GraphError(f"backward requires a scalar output, got shape {output.shape}")
    g = output.graph
    grads: dict = {output.node_id: np.ones(output.shape)}
    for rec in reversed(g._records):
        grad_out = grads.get(rec.output_id)
        if grad_out is None:
            continue  # not an ancestor of the output
        rec.backward_fn(grad_out, grads)
    return GradStore(grads, g)


def finite_diff_grad(fn: Callable[[np.ndarray], float], point, eps: float) -> np.ndarray:
    """Central-difference gradient oracle: (f(x+e) - f(x-e)) / (2 eps) per coordinate."""
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(fn(x))
        flat[i] = orig - eps
        f_minus = float(fn(x))
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad
