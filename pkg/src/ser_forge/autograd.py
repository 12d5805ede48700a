"""Minimal N-dimensional tensors with reverse-mode differentiation.

Each operation records its input tensors and a backward rule on the output;
`backward()` replays the rules in reverse topological order, summing
gradients where a tensor feeds several consumers. The op set is exactly what
the six-block CNN needs: 2-D and 1-D convolution, batchnorm, the three
activations, the two poolings, a dense layer, channel scaling, and a few
elementwise helpers for tests.

Arrays keep whatever float dtype they are given; gradient-check code runs
everything in float64 while training runs in float32.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import InvalidConfigError, InvalidInputError, InvalidShapeError, SerForgeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    """A numpy array plus an optional gradient and graph linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _accumulate(t: Tensor, grad: np.ndarray):
    # First contribution is adopted as-is; later ones allocate a fresh sum,
    # so aliasing a consumer's grad array here is safe.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = grad
    else:
        t.grad = t.grad + grad


def backward(loss: Tensor, params=None):
    """Propagate gradients from a scalar loss to everything that fed it.

    Tensors passed in `params` that did not participate in the graph end up
    with an all-zero gradient rather than None.
    """
    if loss.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")

    order = []
    state = {}  # id -> 1 while on stack, 2 when done
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            state[id(node)] = 2
            order.append(node)
            continue
        mark = state.get(id(node))
        if mark == 2:
            continue
        if mark == 1:
            raise SerForgeError("cycle detected in the computation record")
        state[id(node)] = 1
        stack.append((node, True))
        for parent in node._parents:
            if state.get(id(parent)) != 2:
                stack.append((parent, False))

    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is not None and node.grad is not None:
            node._backward_fn(node.grad)

    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.data)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise InvalidShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise InvalidShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def backward_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g, x.shape) * np.ones((), dtype=x.dtype))

    return _result(np.sum(x.data), (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def backward_fn(g):
        _accumulate(x, g.reshape(x.shape))

    return _result(out_data, (x,), backward_fn)


def relu(x: Tensor) -> Tensor:
    x_data = np.ascontiguousarray(x.data)
    out_data = np.empty_like(x_data)
    kernels.relu_forward(x_data, out_data)

    def backward_fn(g):
        dx = np.empty_like(x_data)
        kernels.relu_backward(np.ascontiguousarray(g), out_data, dx)
        _accumulate(x, dx)

    return _result(out_data, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out_data[~pos] = ez / (1.0 + ez)

    def backward_fn(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _result(out_data, (x,), backward_fn)


def softmax_lastdim(x: Tensor) -> Tensor:
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=-1, keepdims=True)

    def backward_fn(g):
        inner = np.sum(g * out_data, axis=-1, keepdims=True)
        _accumulate(x, out_data * (g - inner))

    return _result(out_data, (x,), backward_fn)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax_lastdim": softmax_lastdim}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise InvalidConfigError(
            f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}"
        ) from None
    return fn(x)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x (N, D) times w (O, D) transposed, plus b (O,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise InvalidShapeError(
            f"linear shapes incompatible: x {x.shape}, w {w.shape}, b {b.shape}"
        )
    out_data = x.data @ w.data.T + b.data

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        if w.requires_grad:
            _accumulate(w, g.T @ x.data)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    return _result(out_data, (x, w, b), backward_fn)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (N,C,H,W) with w (O,C,K,K), zero padding."""
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidShapeError(f"conv2d expects 4-D tensors, got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise InvalidShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {w.shape[1]}"
        )
    if w.shape[2] != w.shape[3]:
        raise InvalidShapeError(f"conv2d kernel must be square, got {w.shape[2:]}")
    if b is not None and b.shape != (w.shape[0],):
        raise InvalidShapeError(f"conv2d bias shape {b.shape} != ({w.shape[0]},)")
    if stride < 1 or padding < 0:
        raise InvalidConfigError(f"bad stride/padding: {stride}, {padding}")
    if x.dtype != w.dtype:
        raise InvalidInputError(f"conv2d dtype mismatch: {x.dtype} vs {w.dtype}")

    n, c, h, w_in = x.shape
    o, _, k, _ = w.shape
    if h + 2 * padding < k or w_in + 2 * padding < k:
        raise InvalidShapeError(
            f"kernel {k}x{k} does not fit the padded {h}x{w_in} input (padding {padding})"
        )
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w_in + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xp = np.ascontiguousarray(xp)
    parents = (x, w) if b is None else (x, w, b)

    # Small reduction dims (notably the 1-channel first layer) run the direct
    # kernels; everything else gathers windows once and leans on BLAS.
    use_gemm = c * k * k >= 32
    col_t = None
    if use_gemm:
        rows = n * h_out * w_out
        col_t = np.empty((c * k * k, rows), dtype=x.dtype)
        kernels.im2col_t(xp, col_t, h_out, w_out, k, stride)
        w2 = w.data.reshape(o, c * k * k)
        out2 = w2 @ col_t  # (O, rows)
        if b is not None:
            out2 += b.data[:, None]
        out_data = np.ascontiguousarray(
            out2.reshape(o, n, h_out, w_out).transpose(1, 0, 2, 3)
        )
    else:
        bias = b.data if b is not None else np.zeros(o, dtype=x.dtype)
        out_data = np.empty((n, o, h_out, w_out), dtype=x.dtype)
        kernels.conv2d_forward(xp, np.ascontiguousarray(w.data), bias, out_data, stride)

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))
        if use_gemm:
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
            if w.requires_grad:
                _accumulate(w, (g2 @ col_t.T).reshape(w.shape))
            if x.requires_grad:
                dcol_t = w.data.reshape(o, c * k * k).T @ g2
                dxp = np.zeros_like(xp)
                kernels.col2im_t_add(np.ascontiguousarray(dcol_t), dxp,
                                     h_out, w_out, k, stride)
                if padding:
                    dxp = dxp[:, :, padding:padding + h, padding:padding + w_in]
                _accumulate(x, dxp)
            return
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            kernels.conv2d_grad_weight(xp, g, dw, stride)
            _accumulate(w, dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            kernels.conv2d_grad_input(g, np.ascontiguousarray(w.data), dxp, stride)
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w_in]
            _accumulate(x, dxp)

    return _result(out_data, parents, backward_fn)


def conv1d_same(x: Tensor, w: Tensor) -> Tensor:
    """Length-preserving cross-correlation of x (N,1,C) with w (1,1,k), no bias."""
    if x.ndim != 3 or x.shape[1] != 1:
        raise InvalidShapeError(f"conv1d expects (N,1,C), got {x.shape}")
    if w.ndim != 3 or w.shape[:2] != (1, 1):
        raise InvalidShapeError(f"conv1d weight must be (1,1,k), got {w.shape}")
    k = w.shape[2]
    if k % 2 == 0:
        raise InvalidConfigError(f"conv1d kernel length must be odd, got {k}")

    c = x.shape[2]
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad)))
    taps = w.data[0, 0]
    out_data = np.zeros_like(x.data)
    for j in range(k):
        out_data += taps[j] * xp[:, :, j:j + c]

    def backward_fn(g):
        if w.requires_grad:
            dw = np.zeros_like(w.data)
            for j in range(k):
                dw[0, 0, j] = np.sum(g * xp[:, :, j:j + c])
            _accumulate(w, dw)
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, :, j:j + c] += taps[j] * g
            _accumulate(x, dxp[:, :, pad:pad + c] if pad else dxp)

    return _result(out_data, (x, w), backward_fn)


def avgpool2d(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 means; a trailing odd row/column is dropped."""
    if x.ndim != 4:
        raise InvalidShapeError(f"avgpool2d expects (N,C,H,W), got {x.shape}")
    n, c, h, w_in = x.shape
    if h < 2 or w_in < 2:
        raise InvalidShapeError(f"avgpool2d needs H,W >= 2, got {h}x{w_in}")
    h2, w2 = h // 2, w_in // 2
    x_data = np.ascontiguousarray(x.data)
    out_data = np.empty((n, c, h2, w2), dtype=x.dtype)
    kernels.avgpool2d_forward(x_data, out_data)

    def backward_fn(g):
        dx = np.empty_like(x_data)
        kernels.avgpool2d_backward(np.ascontiguousarray(g), dx)
        _accumulate(x, dx)

    return _result(out_data, (x,), backward_fn)


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise InvalidShapeError(f"global_avgpool expects (N,C,H,W), got {x.shape}")
    n, c, h, w_in = x.shape
    out_data = x.data.mean(axis=(2, 3))

    def backward_fn(g):
        per_cell = (g / (h * w_in))[:, :, None, None]
        _accumulate(x, np.broadcast_to(per_cell, x.shape).copy())

    return _result(out_data, (x,), backward_fn)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each (H,W) channel map of x (N,C,H,W) by the scalar s[n,c]."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise InvalidShapeError(f"scale_channels shapes incompatible: {x.shape}, {s.shape}")
    out_data = x.data * s.data[:, :, None, None]

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, g * s.data[:, :, None, None])
        if s.requires_grad:
            _accumulate(s, np.sum(g * x.data, axis=(2, 3)))

    return _result(out_data, (x, s), backward_fn)


class BatchNormState:
    """Running statistics for one batchnorm layer (not trainable)."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        dup = BatchNormState(self.running_mean.shape[0], self.running_mean.dtype)
        dup.running_mean = self.running_mean.copy()
        dup.running_var = self.running_var.copy()
        return dup


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str,
                fuse_relu: bool = False) -> Tensor:
    """Per-channel normalization over (N,H,W) with affine transform.

    Train mode normalizes by batch statistics (biased variance) and folds
    them into the running stats with momentum 0.1; eval mode normalizes by
    the running stats and leaves them untouched. `fuse_relu` clamps the
    output at zero in the same pass, equivalent to relu(batchnorm2d(...)).
    """
    if mode not in ("train", "eval"):
        raise InvalidConfigError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise InvalidShapeError(f"batchnorm2d expects (N,C,H,W), got {x.shape}")
    n, c, h, w_in = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidShapeError(f"gamma/beta must be ({c},), got {gamma.shape}, {beta.shape}")

    x_data = np.ascontiguousarray(x.data)
    m = n * h * w_in
    if mode == "train":
        if m < 2:
            raise InvalidInputError("training-mode batchnorm needs at least 2 values per channel")
        sums = np.empty(c, dtype=np.float64)
        sumsq = np.empty(c, dtype=np.float64)
        kernels.channel_sums(x_data, sums, sumsq)
        mean64 = sums / m
        var64 = np.maximum(sumsq / m - mean64**2, 0.0)
        mean = mean64.astype(x.dtype)
        var = var64.astype(x.dtype)
        mom = np.asarray(BN_MOMENTUM, dtype=state.running_mean.dtype)
        state.running_mean *= 1 - mom
        state.running_mean += mom * mean.astype(state.running_mean.dtype)
        state.running_var *= 1 - mom
        state.running_var += mom * var.astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)

    inv_std = (1.0 / np.sqrt(var.astype(np.float64) + BN_EPS)).astype(x.dtype)
    out_data = np.empty_like(x_data)
    if fuse_relu:
        kernels.bn_normalize_relu(x_data, mean, inv_std, gamma.data, beta.data, out_data)
    else:
        kernels.bn_normalize(x_data, mean, inv_std, gamma.data, beta.data, out_data)

    def backward_fn(g):
        g = np.ascontiguousarray(g)
        sum_g = np.empty(c, dtype=np.float64)
        sum_g_xhat = np.empty(c, dtype=np.float64)
        if fuse_relu:
            kernels.bnrelu_backward_reduce(g, out_data, x_data, mean, inv_std,
                                           sum_g, sum_g_xhat)
        else:
            kernels.bn_backward_reduce(g, x_data, mean, inv_std, sum_g, sum_g_xhat)
        if gamma.requires_grad:
            _accumulate(gamma, sum_g_xhat.astype(x.dtype))
        if beta.requires_grad:
            _accumulate(beta, sum_g.astype(x.dtype))
        if x.requires_grad:
            dx = np.empty_like(x_data)
            if mode == "train":
                mean_g = (sum_g / m).astype(x.dtype)
                mean_g_xhat = (sum_g_xhat / m).astype(x.dtype)
            else:
                # running stats do not depend on this batch
                mean_g = np.zeros(c, dtype=x.dtype)
                mean_g_xhat = np.zeros(c, dtype=x.dtype)
            if fuse_relu:
                kernels.bnrelu_backward_input(g, out_data, x_data, mean, inv_std,
                                              gamma.data, mean_g, mean_g_xhat, dx)
            else:
                kernels.bn_backward_input(g, x_data, mean, inv_std, gamma.data,
                                          mean_g, mean_g_xhat, dx)
            _accumulate(x, dx)

    return _result(out_data, (x, gamma, beta), backward_fn)
