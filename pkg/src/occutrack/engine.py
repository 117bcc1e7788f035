"""Dense-tensor compute engine with reverse-mode differentiation.

Supplies exactly the operations the tracking network needs: dilated 2D
convolution over [C, H, W] maps, the gating nonlinearities, per-cell
softmax, masked losses, and SGD/Adam parameter updates.  Tensors wrap
C-contiguous numpy arrays in float32 or float64; float64 is the default
and is what all oracle tests run in, float32 is used for training
throughput.

Recording is explicit: ops executed inside a ``with Graph():`` block are
taped and can be differentiated; outside a block they are plain numpy
math (used for inference).  A Graph and its tensors belong to one worker
at a time; a ParameterStore may be read concurrently by independent
forward passes, but updates are single-writer.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

SUPPORTED_DTYPES = (np.float32, np.float64)

# clamps applied before logarithms inside the losses
BCE_CLAMP = 1e-7
NLL_CLAMP = 1e-12

IGNORE_LABEL = 255


class ShapeError(ValueError):
    """Operand shapes (or dtypes) are inconsistent."""


class GraphError(RuntimeError):
    """Backward requested in an invalid state."""


class NonFiniteGradient(RuntimeError):
    """A parameter gradient contains NaN/Inf; the step was aborted."""


class Tensor:
    """A dense real-valued array node.

    Leaves hold parameters or input data; interior nodes are created by
    the ops below and carry a backward rule when a Graph is recording.
    """

    __slots__ = ("data", "grad", "name", "_backward", "_graph", "_col_cache")

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.name = name
        self._backward = None
        self._graph = None
        self._col_cache = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={tuple(self.shape)}, dtype={self.data.dtype})"


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Tape of primitive operations recorded during a forward pass.

    Nodes are appended in execution order, so the list is topologically
    sorted and a single reverse sweep propagates gradients.  Gradients
    accumulate across every use of a tensor, which is what makes
    backpropagation through time work when recurrent weights are reused
    at each step.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._consumed = False

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor):
        """Reverse-accumulate d(loss)/d(node) into every tensor on the tape."""
        if self._consumed:
            raise GraphError("graph already differentiated; record a new forward pass")
        if not self.nodes:
            raise GraphError("backward before forward: graph is empty")
        if loss._graph is not self:
            raise GraphError("loss tensor was not recorded on this graph")
        if loss.data.shape != ():
            raise GraphError(f"loss must be scalar, got shape {tuple(loss.data.shape)}")
        self._consumed = True
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _record(out_data, backward) -> Tensor:
    out = Tensor(out_data)
    graph = _active_graph()
    if graph is not None:
        out._backward = backward
        out._graph = graph
        graph.nodes.append(out)
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: operand dtypes differ, {a.data.dtype} vs {b.data.dtype}")


# ---------------------------------------------------------------------------
# dilated convolution


def _im2col(x: Tensor, dilation: int, ksize: int):
    """Stack the ksize*ksize dilated taps of x as a (k*k, Cin, H, W) array.

    Cached on the input tensor: the GRU convolves the same map with three
    kernels per gate group, and the backward kernel-gradient reuses it.
    Relies on tensor data never being mutated in place while a graph is
    alive (the engine has no in-place ops).
    """
    key = (dilation, ksize)
    if x._col_cache is not None and key in x._col_cache:
        return x._col_cache[key]
    cin, h, w = x.data.shape
    pad = dilation * (ksize // 2)
    if pad:
        padded = np.zeros((cin, h + 2 * pad, w + 2 * pad), dtype=x.data.dtype)
        padded[:, pad:pad + h, pad:pad + w] = x.data
    else:
        padded = x.data
    stack = np.empty((ksize * ksize, cin, h, w), dtype=x.data.dtype)
    idx = 0
    for ty in range(ksize):
        for tx in range(ksize):
            stack[idx] = padded[:, ty * dilation:ty * dilation + h,
                                tx * dilation:tx * dilation + w]
            idx += 1
    if x._col_cache is None:
        x._col_cache = {}
    x._col_cache[key] = stack
    return stack


def _bias_view(bias: Tensor, cout: int, h: int, w: int):
    shape = bias.data.shape
    if shape == (cout, h, w):
        return bias.data
    if shape == (cout, 1, 1):
        return bias.data
    if shape == (cout,):
        return bias.data.reshape(cout, 1, 1)
    raise ShapeError(
        f"conv2d_dilated: bias shape {shape} not broadcastable to ({cout}, {h}, {w})"
    )


def conv2d_dilated(x: Tensor, kernel: Tensor, dilation: int, bias: Tensor | None = None) -> Tensor:
    """Same-resolution dilated convolution of a [Cin,H,W] map.

    out[o,y,xx] = bias[o,y,xx]
                + sum_{i,dy,dx} kernel[o,i,dy+c,dx+c] * x[i, y+dy*dilation, xx+dx*dilation]

    with c = ksize//2, zero padding of width dilation*c on all sides so the
    output keeps the input resolution, and out-of-range input treated as
    empty.  Kernels must be square with odd size (3x3 for the recurrent
    layers, 1x1 for the decoders).
    """
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"conv2d_dilated: dilation must be a positive integer, got {dilation!r}")
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d_dilated: input must be [Cin,H,W], got {tuple(x.shape)}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d_dilated: kernel must be [Cout,Cin,k,k], got {tuple(kernel.shape)}")
    cout, cin, kh, kw = kernel.data.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d_dilated: kernel must be square with odd size, got {kh}x{kw}")
    if cin != x.data.shape[0]:
        raise ShapeError(
            f"conv2d_dilated: kernel expects {cin} input channels, input has {x.data.shape[0]}"
        )
    if kernel.data.dtype != x.data.dtype:
        raise ShapeError(f"conv2d_dilated: dtype mismatch {x.data.dtype} vs {kernel.data.dtype}")
    _, h, w = x.data.shape
    dilation = int(dilation)

    stack = _im2col(x, dilation, kh)
    kmat = kernel.data.transpose(0, 2, 3, 1).reshape(cout, kh * kw * cin)
    out = (kmat @ stack.reshape(kh * kw * cin, h * w)).reshape(cout, h, w)
    if bias is not None:
        out = out + _bias_view(bias, cout, h, w)

    def backward(g):
        gmat = g.reshape(cout, h * w)
        smat = stack.reshape(kh * kw * cin, h * w)
        gk = (gmat @ smat.T).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        kernel.add_grad(gk)
        # d/dx is itself a dilated correlation of g with the kernel flipped
        # spatially and transposed over channels, so reuse the matmul path
        gstack = _im2col(Tensor(g), dilation, kh)
        flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(
            cin, kh * kw * cout)
        x.add_grad((flipped @ gstack.reshape(kh * kw * cout, h * w)).reshape(cin, h, w))
        if bias is not None:
            shape = bias.data.shape
            if shape == (cout, h, w):
                bias.add_grad(g)
            elif shape == (cout, 1, 1):
                bias.add_grad(g.sum(axis=(1, 2), keepdims=True))
            else:
                bias.add_grad(g.sum(axis=(1, 2)))

    return _record(out, backward)


# ---------------------------------------------------------------------------
# element-wise ops


def sigmoid(t: Tensor) -> Tensor:
    s = expit(t.data)

    def backward(g):
        t.add_grad(g * (s * (1.0 - s)))

    return _record(s, backward)


def tanh_act(t: Tensor) -> Tensor:
    y = np.tanh(t.data)

    def backward(g):
        t.add_grad(g * (1.0 - y * y))

    return _record(y, backward)


def elem_add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "elem_add")

    def backward(g):
        a.add_grad(g)
        b.add_grad(g)

    return _record(a.data + b.data, backward)


def elem_mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "elem_mul")

    def backward(g):
        a.add_grad(g * b.data)
        b.add_grad(g * a.data)

    return _record(a.data * b.data, backward)


def one_minus(t: Tensor) -> Tensor:
    def backward(g):
        t.add_grad(-g)

    return _record(1.0 - t.data, backward)


def scalar_mul(t: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        t.add_grad(g * c)

    return _record(t.data * c, backward)


def reshape(t: Tensor, shape) -> Tensor:
    orig = t.data.shape
    out = t.data.reshape(shape)

    def backward(g):
        t.add_grad(g.reshape(orig))

    return _record(out, backward)


def softmax_per_cell(logits: Tensor) -> Tensor:
    """Softmax over axis 0 (the class axis), computed per spatial cell.

    Max-subtraction keeps the exponentials in range; every output column
    is a strictly positive distribution summing to 1.
    """
    if logits.data.shape[0] < 2:
        raise ShapeError(f"softmax_per_cell: need K >= 2 classes, got shape {tuple(logits.shape)}")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        dot = (g * p).sum(axis=0, keepdims=True)
        logits.add_grad(p * (g - dot))

    return _record(p, backward)


# ---------------------------------------------------------------------------
# losses


def masked_bce_loss(pred: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Binary cross-entropy restricted to mask==1 cells, mean per active cell.

    Gradient is exactly zero at masked-out cells; an empty mask yields a
    zero loss with zero gradient (a fully occluded target frame is legal).
    Predictions are clamped to [1e-7, 1-1e-7] before the logarithms, and
    the clamp contributes zero gradient where it is active.
    """
    _check_same_shape(pred, target, "masked_bce_loss")
    _check_same_shape(pred, mask, "masked_bce_loss")
    m = mask.data
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValueError("masked_bce_loss: mask must be binary")
    t = target.data
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("masked_bce_loss: target must be binary")

    n_active = float(m.sum())
    dtype = pred.data.dtype
    if n_active == 0.0:
        def backward_empty(g):
            pred.add_grad(np.zeros_like(pred.data))

        return _record(np.zeros((), dtype=dtype), backward_empty)

    norm = max(1.0, n_active)
    p = np.clip(pred.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    per_cell = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    loss = np.asarray((per_cell * m).sum() / norm, dtype=dtype)
    inside = (pred.data >= BCE_CLAMP) & (pred.data <= 1.0 - BCE_CLAMP)

    def backward(g):
        gp = m * inside * (p - t) / (p * (1.0 - p)) * (float(g) / norm)
        pred.add_grad(gp.astype(dtype, copy=False))

    return _record(loss, backward)


def weighted_masked_nll(pred: Tensor, labels, class_weights) -> Tensor:
    """Class-weighted negative log likelihood over labeled cells.

    ``pred`` is a [K,M,M] per-cell distribution, ``labels`` an integer
    [M,M] grid where 255 marks cells to ignore, ``class_weights`` K
    positive reals.  The sum of -w[label] * log pred[label] is normalized
    by the total weight of labeled cells; with no labeled cells the loss
    is zero.  Gradient is exactly zero at ignored cells.
    """
    w = np.asarray(class_weights, dtype=np.float64)
    k = pred.data.shape[0]
    if pred.data.ndim != 3:
        raise ShapeError(f"weighted_masked_nll: pred must be [K,M,M], got {tuple(pred.shape)}")
    if w.shape != (k,):
        raise ShapeError(f"weighted_masked_nll: need {k} class weights, got shape {w.shape}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weighted_masked_nll: class weights must be positive and finite")
    lab = np.asarray(labels)
    if lab.shape != pred.data.shape[1:]:
        raise ShapeError(
            f"weighted_masked_nll: labels shape {lab.shape} vs pred cells {pred.data.shape[1:]}"
        )
    labeled = lab != IGNORE_LABEL
    if np.any(labeled & (lab >= k)):
        bad = int(lab[labeled & (lab >= k)][0])
        raise ValueError(f"weighted_masked_nll: label index {bad} >= K={k}")

    dtype = pred.data.dtype
    if not labeled.any():
        def backward_empty(g):
            pred.add_grad(np.zeros_like(pred.data))

        return _record(np.zeros((), dtype=dtype), backward_empty)

    ys, xs = np.nonzero(labeled)
    cls = lab[ys, xs].astype(np.intp)
    p_sel = pred.data[cls, ys, xs]
    p_clamped = np.maximum(p_sel, NLL_CLAMP)
    w_cell = w[cls]
    norm = w_cell.sum()
    loss = np.asarray((w_cell * -np.log(p_clamped)).sum() / norm, dtype=dtype)

    def backward(g):
        gp = np.zeros_like(pred.data)
        live = p_sel >= NLL_CLAMP
        gp[cls, ys, xs] = np.where(live, -w_cell / p_clamped, 0.0) * (float(g) / norm)
        pred.add_grad(gp)

    return _record(loss, backward)


# ---------------------------------------------------------------------------
# parameters and updates

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParameterStore:
    """Named parameter tensors with gradient buffers and Adam state.

    Names are unique and shapes immutable after creation; optimizer state
    arrays mirror the parameter shapes.  Iteration follows insertion
    order, which keeps checkpoints and global-norm computations
    deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._adam: dict[str, dict] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(data, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def clip_grads(self, max_norm: float) -> float:
        """Scale all gradients so their global norm is at most max_norm.

        Returns the pre-clip norm.
        """
        norm = self.grad_norm()
        if norm > max_norm > 0.0:
            factor = max_norm / norm
            for t in self._params.values():
                if t.grad is not None:
                    t.grad *= factor
        return norm

    def step(self, learning_rate: float, method: str = "adaptive-moment"):
        """Apply one optimizer update in place and zero the gradients.

        ``method`` is "sgd" or "adaptive-moment" (Adam with decay rates
        0.9/0.999 and epsilon 1e-8, bias-corrected).  Parameters without
        a gradient (unused or frozen in this pass) are left untouched.
        A non-finite gradient aborts before any parameter is modified.
        """
        if method not in ("sgd", "adaptive-moment"):
            raise ValueError(f"unknown optimizer method {method!r}")
        for name, t in self._params.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        for name, t in self._params.items():
            g = t.grad
            if g is None:
                continue
            if method == "sgd":
                t.data -= learning_rate * g
            else:
                state = self._adam.get(name)
                if state is None:
                    state = {
                        "m": np.zeros_like(t.data),
                        "v": np.zeros_like(t.data),
                        "t": 0,
                    }
                    self._adam[name] = state
                state["t"] += 1
                state["m"] = ADAM_BETA1 * state["m"] + (1.0 - ADAM_BETA1) * g
                state["v"] = ADAM_BETA2 * state["v"] + (1.0 - ADAM_BETA2) * (g * g)
                m_hat = state["m"] / (1.0 - ADAM_BETA1 ** state["t"])
                v_hat = state["v"] / (1.0 - ADAM_BETA2 ** state["t"])
                t.data -= learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
            t.grad = None

    # --- optimizer state serialization (for training resume) ---

    def optimizer_state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, state in self._adam.items():
            out[f"adam.m.{name}"] = state["m"]
            out[f"adam.v.{name}"] = state["v"]
            out[f"adam.t.{name}"] = np.asarray(float(state["t"]), dtype=np.float64)
        return out

    def load_optimizer_state(self, arrays: dict[str, np.ndarray]):
        self._adam.clear()
        for name, t in self._params.items():
            mk, vk, tk = f"adam.m.{name}", f"adam.v.{name}", f"adam.t.{name}"
            if mk in arrays:
                self._adam[name] = {
                    "m": arrays[mk].astype(t.data.dtype),
                    "v": arrays[vk].astype(t.data.dtype),
                    "t": int(round(float(arrays[tk]))),
                }


def optimizer_step(store: ParameterStore, learning_rate: float, method: str = "adaptive-moment"):
    store.step(learning_rate, method)
