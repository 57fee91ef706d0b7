"""Minimal reverse-mode autodiff over dense numpy arrays.

Implements exactly the differentiable operations needed by the saliency
detector and the classifier branch: 2-d convolution (with stride, padding
and dilation), 2x2 max pooling, batch normalisation, bilinear upsampling,
dense matrix multiplication, elementwise arithmetic/activations and the
two loss reductions.  Production tensors use 32-bit floats; every op is
dtype-polymorphic so gradient checks can run the same code in float64.

Tensors are immutable once created; gradients accumulate on the tape
built during the forward pass, so distinct forward passes never share
mutable state and may run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when an op's operands disagree on a named dimension."""


class Tensor:
    """A node in the computation tape.

    ``data`` is a read-only numpy array; ``grad`` is filled by
    :meth:`backward`.  Ops create new Tensors whose ``_backward`` closure
    scatters the upstream gradient to the parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- graph traversal -------------------------------------------------

    def backward(self, upstream=None):
        """Backpropagate from this node.

        ``upstream`` defaults to 1 and is only optional for scalar
        outputs; calling backward on a non-scalar without an explicit
        upstream gradient is rejected.
        """
        if upstream is None:
            if self.data.size != 1:
                raise ValueError(
                    "backward() without an upstream gradient requires a scalar "
                    f"output, got shape {self.data.shape}"
                )
            upstream = np.ones_like(self.data)
        else:
            upstream = np.asarray(upstream, dtype=self.data.dtype)
            if upstream.shape != self.data.shape:
                raise ShapeError(
                    f"upstream gradient shape {upstream.shape} does not match "
                    f"output shape {self.data.shape}"
                )

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): upstream}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(*tensors):
    return any(t.requires_grad for t in tensors)


# -- elementwise ops -----------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return Tensor(out_data, _needs_grad(a, b), (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return Tensor(out_data, _needs_grad(a, b), (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return Tensor(out_data, _needs_grad(a, b), (a, b), backward)


def _unbroadcast(g, shape):
    """Reduce a gradient back to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0)

    def backward(g):
        return ((x, g * mask),)

    return Tensor(out_data, x.requires_grad, (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    # overflow-safe split on the sign of x
    z = np.exp(-np.abs(x.data))
    out_data = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)

    def backward(g):
        return ((x, g * out_data * (1.0 - out_data)),)

    return Tensor(out_data, x.requires_grad, (x,), backward)


def log(x):
    x = as_tensor(x)
    out_data = np.log(x.data)

    def backward(g):
        return ((x, g / x.data),)

    return Tensor(out_data, x.requires_grad, (x,), backward)


def clamp(x, lo, hi):
    x = as_tensor(x)
    out_data = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        return ((x, g * inside),)

    return Tensor(out_data, x.requires_grad, (x,), backward)


def tsum(x):
    x = as_tensor(x)
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return ((x, np.broadcast_to(g, x.shape).astype(x.dtype)),)

    return Tensor(out_data, x.requires_grad, (x,), backward)


def tmean(x):
    x = as_tensor(x)
    out_data = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g):
        return ((x, np.broadcast_to(g / x.size, x.shape).astype(x.dtype)),)

    return Tensor(out_data, x.requires_grad, (x,), backward)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return tuple(out)

    return Tensor(out_data, _needs_grad(*tensors), tuple(tensors), backward)


def reshape(x, shape):
    x = as_tensor(x)
    out_data = x.data.reshape(shape)

    def backward(g):
        return ((x, g.reshape(x.shape)),)

    return Tensor(out_data, x.requires_grad, (x,), backward)


def matmul(x, w):
    """Dense layer core: [B, F] @ [F, O]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: input features {x.shape[-1]} "
            f"vs weight rows {w.shape[0]}"
        )
    out_data = x.data @ w.data

    def backward(g):
        return ((x, g @ w.data.T), (w, x.data.T @ g))

    return Tensor(out_data, _needs_grad(x, w), (x, w), backward)


# -- convolution ----------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    """One convolutional layer row: maps, kernel, stride, pad, dilation.

    Mirrors the layer-table convention of the detector: when stride is 1
    the padding must keep the output spatial size equal to the input size
    (``preserves_size``), which for a kernel k with dilation d requires
    pad = d*(k-1)/2 per side.
    """

    in_maps: int
    out_maps: int
    kernel_h: int
    kernel_w: int
    stride_h: int = 1
    stride_w: int = 1
    pad_h: int = 0
    pad_w: int = 0
    dilation_h: int = 1
    dilation_w: int = 1
    has_batchnorm: bool = True
    activation: str = "relu"  # none | relu | sigmoid

    def __post_init__(self):
        for name in (
            "in_maps",
            "out_maps",
            "kernel_h",
            "kernel_w",
            "stride_h",
            "stride_w",
            "dilation_h",
            "dilation_w",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"ConvSpec.{name} must be a positive integer")
        if self.pad_h < 0 or self.pad_w < 0:
            raise ValueError("ConvSpec padding must be non-negative")
        if self.activation not in ("none", "relu", "sigmoid"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def out_size(self, h, w):
        oh = (h + 2 * self.pad_h - self.dilation_h * (self.kernel_h - 1) - 1) // self.stride_h + 1
        ow = (w + 2 * self.pad_w - self.dilation_w * (self.kernel_w - 1) - 1) // self.stride_w + 1
        return oh, ow

    def preserves_size(self):
        if self.stride_h != 1 or self.stride_w != 1:
            return False
        return (
            2 * self.pad_h == self.dilation_h * (self.kernel_h - 1)
            and 2 * self.pad_w == self.dilation_w * (self.kernel_w - 1)
        )


def conv2d(x, weight, bias=None, stride=(1, 1), padding=(0, 0), dilation=(1, 1)):
    """Dilated cross-correlation of [B,C,H,W] with [O,C,kh,kw] kernels.

    Forward and backward both walk the kernel taps and issue one GEMM per
    tap, which keeps memory flat (no im2col buffer) at identical FLOPs.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,C,H,W], got rank {x.data.ndim}")
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be [O,C,kh,kw], got rank {weight.data.ndim}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d channel mismatch: input has {C} channels, weight expects {Cw}")
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d bias must have shape ({O},), got {bias.shape}")

    OH = (H + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    OW = (W + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if OH < 1 or OW < 1:
        raise ShapeError(
            f"conv2d output would be empty: input {H}x{W}, kernel {kh}x{kw}, "
            f"pad {ph}x{pw}, dilation {dh}x{dw}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    w2 = weight.data.reshape(O, C, kh * kw)
    out = np.zeros((B, O, OH * OW), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i * dh : i * dh + sh * (OH - 1) + 1 : sh,
                    j * dw : j * dw + sw * (OW - 1) + 1 : sw]
            out += np.matmul(w2[:, :, i * kw + j], xs.reshape(B, C, OH * OW))
    out = out.reshape(B, O, OH, OW)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gflat = g.reshape(B, O, OH * OW)
        grads = []
        if x.requires_grad:
            dxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    contrib = np.matmul(w2[:, :, i * kw + j].T, gflat)
                    dxp[:, :, i * dh : i * dh + sh * (OH - 1) + 1 : sh,
                        j * dw : j * dw + sw * (OW - 1) + 1 : sw] += contrib.reshape(B, C, OH, OW)
            dx = dxp[:, :, ph : ph + H, pw : pw + W] if (ph or pw) else dxp
            grads.append((x, dx))
        if weight.requires_grad:
            dw_ = np.empty_like(weight.data)
            for i in range(kh):
                for j in range(kw):
                    xs = xp[:, :, i * dh : i * dh + sh * (OH - 1) + 1 : sh,
                            j * dw : j * dw + sw * (OW - 1) + 1 : sw].reshape(B, C, OH * OW)
                    dw_[:, :, i, j] = np.einsum("bol,bcl->oc", gflat, xs, optimize=True)
            grads.append((weight, dw_))
        if bias is not None and bias.requires_grad:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    return Tensor(out, _needs_grad(*parents), parents, backward)


def maxpool2d(x):
    """2x2 max pooling with stride 2; gradient flows only to the argmax."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d input must be [B,C,H,W], got rank {x.data.ndim}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d requires even spatial dims, got {H}x{W}")
    OH, OW = H // 2, W // 2
    win = x.data.reshape(B, C, OH, 2, OW, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, OH, OW, 4)
    idx = np.argmax(win, axis=-1)  # first maximum wins on ties
    out_data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((B, C, OH, OW, 4), dtype=x.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(B, C, OH, OW, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return ((x, dx),)

    return Tensor(out_data, x.requires_grad, (x,), backward)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=0.1, eps=1e-5):
    """Per-channel batch normalisation over [B,C,H,W].

    ``running_mean``/``running_var`` are plain mutable arrays updated in
    place in training mode (running = (1-momentum)*running + momentum*batch);
    eval mode normalises by them and never writes.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    B, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm scale/shift must have shape ({C},)")
    if running_mean.shape != (C,) or running_var.shape != (C,):
        raise ShapeError(f"batchnorm running stats must have shape ({C},)")

    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean.astype(x.dtype)
        var = running_var.astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        grads = []
        n = B * H * W
        if x.requires_grad:
            gx = g * gamma.data[None, :, None, None]
            if training:
                sum_gx = gx.sum(axis=(0, 2, 3))
                sum_gx_xhat = (gx * xhat).sum(axis=(0, 2, 3))
                dx = (inv_std[None, :, None, None] / n) * (
                    n * gx
                    - sum_gx[None, :, None, None]
                    - xhat * sum_gx_xhat[None, :, None, None]
                )
            else:
                dx = gx * inv_std[None, :, None, None]
            grads.append((x, dx.astype(x.dtype)))
        if gamma.requires_grad:
            grads.append((gamma, (g * xhat).sum(axis=(0, 2, 3))))
        if beta.requires_grad:
            grads.append((beta, g.sum(axis=(0, 2, 3))))
        return tuple(grads)

    return Tensor(out_data.astype(x.dtype), _needs_grad(x, gamma, beta), (x, gamma, beta), backward)


# -- bilinear upsampling ---------------------------------------------------


def _interp_matrix(n_out, n_in, dtype):
    """Row-stochastic half-pixel-centre interpolation matrix [n_out, n_in]."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m[np.arange(n_out), i0] += 1.0 - t
    m[np.arange(n_out), i1] += t
    return m.astype(dtype)


def upsample_bilinear(x, target):
    """Bilinear interpolation of [B,C,h,w] to [B,C,H,W], half-pixel centres.

    Rejects targets smaller than the source; the interpolation is a fixed
    linear map so the backward pass is its transpose.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample input must be [B,C,h,w], got rank {x.data.ndim}")
    B, C, h, w = x.shape
    H, W = target
    if H < h or W < w:
        raise ShapeError(f"upsample target {H}x{W} smaller than source {h}x{w}")
    mr = _interp_matrix(H, h, x.dtype)
    mc = _interp_matrix(W, w, x.dtype)
    out_data = np.matmul(np.matmul(mr, x.data), mc.T)

    def backward(g):
        return ((x, np.matmul(np.matmul(mr.T, g), mc)),)

    return Tensor(out_data, x.requires_grad, (x,), backward)


# -- loss reductions -------------------------------------------------------


def mse_loss(pred, target):
    """Mean squared error over every element (the saliency criterion)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out_data = np.asarray(np.mean(diff * diff), dtype=pred.dtype)

    def backward(g):
        scale = 2.0 * g / diff.size
        return ((pred, scale * diff), (target, -scale * diff))

    return Tensor(out_data, _needs_grad(pred, target), (pred, target), backward)


def bce_loss(p, t, eps=1e-7):
    """Mean negative log-likelihood of probabilities ``p`` against {0,1}
    targets ``t``; ``p`` is clamped to [eps, 1-eps] and the clamp blocks
    the gradient outside that range."""
    p, t = as_tensor(p), as_tensor(t)
    if p.shape != t.shape:
        raise ShapeError(f"bce_loss shape mismatch: {p.shape} vs {t.shape}")
    pc = np.clip(p.data, eps, 1.0 - eps)
    inside = (p.data > eps) & (p.data < 1.0 - eps)
    losses = -(t.data * np.log(pc) + (1.0 - t.data) * np.log(1.0 - pc))
    out_data = np.asarray(losses.mean(), dtype=p.dtype)

    def backward(g):
        dp = (pc - t.data) / (pc * (1.0 - pc)) * inside
        return ((p, (g / p.size) * dp),)

    return Tensor(out_data, p.requires_grad, (p,), backward)


# -- finite-difference verification ----------------------------------------


def numeric_gradient(fn, arrays, index, eps=1e-3):
    """Central finite differences of ``fn(*arrays)`` w.r.t. one input array."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    grad = np.zeros_like(base[index])
    flat = grad.reshape(-1)
    target = base[index].reshape(-1)
    for k in range(target.size):
        orig = target[k]
        target[k] = orig + eps
        hi = float(fn(*[a.copy() for a in base]))
        target[k] = orig - eps
        lo = float(fn(*[a.copy() for a in base]))
        target[k] = orig
        flat[k] = (hi - lo) / (2.0 * eps)
    return grad


def gradcheck(build, arrays, eps=1e-3, wrt=None):
    """Compare analytic gradients of ``build`` against central differences.

    ``build`` maps Tensors to a scalar Tensor; ``arrays`` are the float
    inputs (promoted to float64 so the 1e-3 step dominates the error).
    Returns the maximum relative error over the checked inputs, where the
    relative error of one input is ||analytic - numeric||_inf normalised
    by the larger of the two gradient magnitudes.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    tensors = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = build(*tensors)
    out.backward()

    def scalar_fn(*raw):
        ts = [Tensor(r, requires_grad=False) for r in raw]
        return build(*ts).item()

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad
        if analytic is None:
            analytic = np.zeros_like(arrays[i])
        numeric = numeric_gradient(scalar_fn, arrays, i, eps=eps)
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max(initial=0.0) / scale))
    return worst
