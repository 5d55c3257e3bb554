"""Differentiable primitives for the network family used here.

All ops take and return :class:`~wavecontrast.engine.Tensor` and register a
backward closure on the active tape. Array layouts are channels-last:
signals (batch, time, ch), images (batch, h, w, ch). Unbatched inputs are
accepted and round-tripped through a leading singleton axis.

Convolutions are cross-correlations (no kernel flip). `same` padding at
stride 1 preserves the spatial extent, splitting the pad as left=(k-1)//2.
Max-pool windows are non-overlapping, trailing remainders are dropped, and
the backward routes gradient to the first maximal element of each window.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .engine import ShapeError, Tensor, make_node, same_dtype


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    same_dtype(a, b)
    out_data = a.data + b.data

    def _bw():
        a.accumulate_grad(_unbroadcast(out.grad, a.data.shape))
        b.accumulate_grad(_unbroadcast(out.grad, b.data.shape))

    out = make_node(out_data, (a, b), _bw, "add")
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    same_dtype(a, b)
    out_data = a.data - b.data

    def _bw():
        a.accumulate_grad(_unbroadcast(out.grad, a.data.shape))
        b.accumulate_grad(_unbroadcast(-out.grad, b.data.shape))

    out = make_node(out_data, (a, b), _bw, "sub")
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    same_dtype(a, b)
    out_data = a.data * b.data

    def _bw():
        a.accumulate_grad(_unbroadcast(out.grad * b.data, a.data.shape))
        b.accumulate_grad(_unbroadcast(out.grad * a.data, b.data.shape))

    out = make_node(out_data, (a, b), _bw, "mul")
    return out


def scale(a: Tensor, s: float) -> Tensor:
    c = np.asarray(s, dtype=a.data.dtype)
    out_data = a.data * c

    def _bw():
        a.accumulate_grad(out.grad * c)

    out = make_node(out_data, (a,), _bw, "scale")
    return out


def add_scalar(a: Tensor, s: float) -> Tensor:
    out_data = a.data + np.asarray(s, dtype=a.data.dtype)

    def _bw():
        a.accumulate_grad(out.grad.copy())

    out = make_node(out_data, (a,), _bw, "add_scalar")
    return out


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def _bw():
        a.accumulate_grad(out.grad * (a.data > 0))

    out = make_node(out_data, (a,), _bw, "relu")
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)


def mish(a: Tensor) -> Tensor:
    """x * tanh(softplus(x)), evaluated with a single exp.

    With u = exp(-softplus(x)) = where(x>=0, z/(1+z), 1/(1+z)) for
    z = exp(-|x|), the identity tanh(softplus(x)) = (1-u^2)/(1+u^2) holds
    exactly and stays stable for large |x|.
    """
    x = a.data
    z = np.exp(-np.abs(x))
    u = np.where(x >= 0, z, np.asarray(1.0, dtype=z.dtype)) / (1.0 + z)
    u2 = u * u
    t = (1.0 - u2) / (1.0 + u2)
    out_data = x * t

    def _bw():
        sig = 1.0 - u  # sigmoid(x) = 1 - exp(-softplus(x))
        a.accumulate_grad(out.grad * (t + x * (1.0 - t * t) * sig))

    out = make_node(out_data, (a,), _bw, "mish")
    return out


def square(a: Tensor) -> Tensor:
    out_data = a.data * a.data

    def _bw():
        a.accumulate_grad(out.grad * (2.0 * a.data))

    out = make_node(out_data, (a,), _bw, "square")
    return out


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative values")
    root = np.sqrt(a.data)
    # Clamp the denominator: at exactly zero the true derivative is infinite,
    # which matters for zero-distance pairs in the margin loss.
    floor = np.asarray(1e-12, dtype=a.data.dtype)

    def _bw():
        a.accumulate_grad(out.grad * (0.5 / np.maximum(root, floor)))

    out = make_node(root, (a,), _bw, "sqrt")
    return out


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a.accumulate_grad(np.broadcast_to(g, a.data.shape).astype(a.data.dtype).copy())

    out = make_node(out_data, (a,), _bw, "sum")
    return out


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.data.shape[ax]
    out_data = a.data.mean(axis=axis, keepdims=keepdims)

    def _bw():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        g = np.broadcast_to(g, a.data.shape).astype(a.data.dtype) / count
        a.accumulate_grad(g.astype(a.data.dtype))

    out = make_node(out_data, (a,), _bw, "mean")
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def _bw():
        a.accumulate_grad(out.grad.reshape(a.data.shape))

    out = make_node(out_data, (a,), _bw, "reshape")
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    same_dtype(*tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw():
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * out.grad.ndim
            idx[axis] = slice(lo, hi)
            t.accumulate_grad(out.grad[tuple(idx)].copy())

    out = make_node(out_data, tuple(tensors), _bw, "concat")
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2D operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} @ {b.data.shape}")
    out_data = a.data @ b.data

    def _bw():
        if a.requires_grad:
            a.accumulate_grad(out.grad @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ out.grad)

    out = make_node(out_data, (a, b), _bw, "matmul")
    return out


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight + bias; x may be (n,) or (batch, n)."""
    same_dtype(x, weight, bias)
    if weight.data.ndim != 2:
        raise ShapeError(f"dense weight must be 2D, got {weight.data.shape}")
    n, m = weight.data.shape
    if x.data.shape[-1] != n:
        raise ShapeError(f"dense input width {x.data.shape[-1]} != weight rows {n}")
    if bias.data.shape != (m,):
        raise ShapeError(f"dense bias shape {bias.data.shape} != ({m},)")
    if x.data.ndim == 1:
        return reshape(dense(reshape(x, (1, n)), weight, bias), (m,))
    if x.data.ndim != 2:
        raise ShapeError(f"dense input must be 1D or 2D, got {x.data.shape}")
    out_data = x.data @ weight.data + bias.data

    def _bw():
        if x.requires_grad:
            x.accumulate_grad(out.grad @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate_grad(x.data.T @ out.grad)
        if bias.requires_grad:
            bias.accumulate_grad(out.grad.sum(axis=0))

    out = make_node(out_data, (x, weight, bias), _bw, "dense")
    return out


# ---------------------------------------------------------------------------
# convolutions


def _pad_amounts(extent: int, k: int, stride: int, padding: str) -> tuple:
    if padding == "valid":
        return 0, 0
    if padding == "same":
        # Output extent ceil(extent/stride); pad split with the smaller half first.
        out_extent = -(-extent // stride)
        total = max((out_extent - 1) * stride + k - extent, 0)
        left = total // 2
        return left, total - left
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation over time. x: (batch, time, ch_in) or (time, ch_in)."""
    same_dtype(x, kernel, bias)
    if x.data.ndim == 2:
        return reshape(
            conv1d(reshape(x, (1,) + x.data.shape), kernel, bias, stride, padding),
            (-1, kernel.data.shape[2]),
        )
    if x.data.ndim != 3:
        raise ShapeError(f"conv1d input must be (batch, time, ch), got {x.data.shape}")
    if kernel.data.ndim != 3:
        raise ShapeError(f"conv1d kernel must be (k, ch_in, ch_out), got {kernel.data.shape}")
    k, cin, cout = kernel.data.shape
    if x.data.shape[2] != cin:
        raise ShapeError(f"conv1d channel mismatch: input has {x.data.shape[2]}, kernel expects {cin}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv1d bias shape {bias.data.shape} != ({cout},)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, t, _ = x.data.shape
    lo, hi = _pad_amounts(t, k, stride, padding)
    if t + lo + hi < k:
        raise ShapeError(f"conv1d kernel size {k} exceeds padded length {t + lo + hi}")
    xp = np.pad(x.data, ((0, 0), (lo, hi), (0, 0))) if (lo or hi) else x.data
    t_out = (xp.shape[1] - k) // stride + 1
    # Patch matrix: one GEMM instead of k small ones.
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (n, tp-k+1, c, k)
    cols = win[:, :: stride][:, :t_out].transpose(0, 1, 3, 2).reshape(n * t_out, k * cin)
    wmat = kernel.data.reshape(k * cin, cout)
    out_data = (cols @ wmat + bias.data).reshape(n, t_out, cout)

    def _bw():
        g2 = out.grad.reshape(n * t_out, cout)
        if bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0))
        if kernel.requires_grad:
            kernel.accumulate_grad((cols.T @ g2).reshape(k, cin, cout))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, t_out, k, cin)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, j : j + stride * t_out : stride, :] += dcols[:, :, j, :]
            x.accumulate_grad(dxp[:, lo : lo + t, :] if (lo or hi) else dxp)

    out = make_node(out_data, (x, kernel, bias), _bw, "conv1d")
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation over a plane. x: (batch, h, w, ch_in) or (h, w, ch_in)."""
    same_dtype(x, kernel, bias)
    if x.data.ndim == 3:
        inner = conv2d(reshape(x, (1,) + x.data.shape), kernel, bias, stride, padding)
        return reshape(inner, inner.data.shape[1:])
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d input must be (batch, h, w, ch), got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (kh, kw, ch_in, ch_out), got {kernel.data.shape}")
    kh, kw, cin, cout = kernel.data.shape
    if x.data.shape[3] != cin:
        raise ShapeError(f"conv2d channel mismatch: input has {x.data.shape[3]}, kernel expects {cin}")
    if bias.data.shape != (cout,):
        raise ShapeError(f"conv2d bias shape {bias.data.shape} != ({cout},)")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, h, wdt, _ = x.data.shape
    lo_h, hi_h = _pad_amounts(h, kh, stride, padding)
    lo_w, hi_w = _pad_amounts(wdt, kw, stride, padding)
    if h + lo_h + hi_h < kh or wdt + lo_w + hi_w < kw:
        raise ShapeError(f"conv2d kernel {kh}x{kw} exceeds padded extent")
    pad_any = lo_h or hi_h or lo_w or hi_w
    xp = np.pad(x.data, ((0, 0), (lo_h, hi_h), (lo_w, hi_w), (0, 0))) if pad_any else x.data
    h_out = (xp.shape[1] - kh) // stride + 1
    w_out = (xp.shape[2] - kw) // stride + 1
    # Patch matrix: (n*h_out*w_out, kh*kw*cin) against a flattened kernel.
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, :: stride, :: stride][:, :h_out, :w_out]  # (n, h_out, w_out, c, kh, kw)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h_out * w_out, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out_data = (cols @ wmat + bias.data).reshape(n, h_out, w_out, cout)

    def _bw():
        g2 = out.grad.reshape(n * h_out * w_out, cout)
        if bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0))
        if kernel.requires_grad:
            kernel.accumulate_grad((cols.T @ g2).reshape(kh, kw, cin, cout))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, h_out, w_out, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + stride * h_out : stride, j : j + stride * w_out : stride, :] += dcols[:, :, :, i, j, :]
            x.accumulate_grad(dxp[:, lo_h : lo_h + h, lo_w : lo_w + wdt, :] if pad_any else dxp)

    out = make_node(out_data, (x, kernel, bias), _bw, "conv2d")
    return out


# ---------------------------------------------------------------------------
# pooling and resampling


def max_pool(x: Tensor, window: int = 2, dims: int = 1) -> Tensor:
    """Non-overlapping max pooling; trailing remainder is dropped.

    dims=1 pools over the time axis of (batch, time, ch); dims=2 pools both
    spatial axes of (batch, h, w, ch). Ties route gradient to the first
    maximal element in window scan order.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    if dims == 1:
        if x.data.ndim == 2:
            inner = max_pool(reshape(x, (1,) + x.data.shape), window, dims=1)
            return reshape(inner, inner.data.shape[1:])
        if x.data.ndim != 3:
            raise ShapeError(f"1D max_pool input must be (batch, time, ch), got {x.data.shape}")
        n, t, c = x.data.shape
        t_out = t // window
        if t_out == 0:
            raise ShapeError(f"1D max_pool window {window} exceeds length {t}")
        win = x.data[:, : t_out * window, :].reshape(n, t_out, window, c)
        idx = win.argmax(axis=2)
        out_data = np.take_along_axis(win, idx[:, :, None, :], axis=2).squeeze(2)

        def _bw():
            dwin = np.zeros_like(win)
            np.put_along_axis(dwin, idx[:, :, None, :], out.grad[:, :, None, :], axis=2)
            dx = np.zeros_like(x.data)
            dx[:, : t_out * window, :] = dwin.reshape(n, t_out * window, c)
            x.accumulate_grad(dx)

        out = make_node(out_data, (x,), _bw, "max_pool1d")
        return out
    if dims == 2:
        if x.data.ndim == 3:
            inner = max_pool(reshape(x, (1,) + x.data.shape), window, dims=2)
            return reshape(inner, inner.data.shape[1:])
        if x.data.ndim != 4:
            raise ShapeError(f"2D max_pool input must be (batch, h, w, ch), got {x.data.shape}")
        n, h, wdt, c = x.data.shape
        h_out, w_out = h // window, wdt // window
        if h_out == 0 or w_out == 0:
            raise ShapeError(f"2D max_pool window {window} exceeds extent {h}x{wdt}")
        crop = x.data[:, : h_out * window, : w_out * window, :]
        win = crop.reshape(n, h_out, window, w_out, window, c).transpose(0, 1, 3, 2, 4, 5)
        flat = win.reshape(n, h_out, w_out, window * window, c)
        idx = flat.argmax(axis=3)
        out_data = np.take_along_axis(flat, idx[:, :, :, None, :], axis=3).squeeze(3)

        def _bw():
            dflat = np.zeros_like(flat)
            np.put_along_axis(dflat, idx[:, :, :, None, :], out.grad[:, :, :, None, :], axis=3)
            dwin = dflat.reshape(n, h_out, w_out, window, window, c).transpose(0, 1, 3, 2, 4, 5)
            dx = np.zeros_like(x.data)
            dx[:, : h_out * window, : w_out * window, :] = dwin.reshape(
                n, h_out * window, w_out * window, c
            )
            x.accumulate_grad(dx)

        out = make_node(out_data, (x,), _bw, "max_pool2d")
        return out
    raise ValueError(f"dims must be 1 or 2, got {dims}")


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over all spatial axes: (batch, ..., ch) -> (batch, ch)."""
    if x.data.ndim < 3:
        raise ShapeError(f"global_average_pool needs spatial axes, got {x.data.shape}")
    axes = tuple(range(1, x.data.ndim - 1))
    return tensor_mean(x, axis=axes)


def upsample_nearest(x: Tensor, factor: int, dims: int = 1) -> Tensor:
    """Nearest-neighbour upsampling, the inverse layout of max_pool."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if dims == 1:
        if x.data.ndim != 3:
            raise ShapeError(f"1D upsample input must be (batch, time, ch), got {x.data.shape}")
        n, t, c = x.data.shape
        out_data = np.repeat(x.data, factor, axis=1)

        def _bw():
            x.accumulate_grad(out.grad.reshape(n, t, factor, c).sum(axis=2))

        out = make_node(out_data, (x,), _bw, "upsample1d")
        return out
    if dims == 2:
        if x.data.ndim != 4:
            raise ShapeError(f"2D upsample input must be (batch, h, w, ch), got {x.data.shape}")
        n, h, wdt, c = x.data.shape
        out_data = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

        def _bw():
            g = out.grad.reshape(n, h, factor, wdt, factor, c).sum(axis=(2, 4))
            x.accumulate_grad(g)

        out = make_node(out_data, (x,), _bw, "upsample2d")
        return out
    raise ValueError(f"dims must be 1 or 2, got {dims}")


# ---------------------------------------------------------------------------
# stochastic and fused ops


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator] = None, training: bool = True) -> Tensor:
    """Inverted dropout: zero w.p. rate, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout requires a seeded generator")
    draw_dtype = x.data.dtype if x.data.dtype in (np.float32, np.float64) else np.float64
    keep = (rng.random(x.data.shape, dtype=draw_dtype) >= rate).astype(x.data.dtype)
    keep /= np.asarray(1.0 - rate, dtype=x.data.dtype)
    out_data = x.data * keep

    def _bw():
        x.accumulate_grad(out.grad * keep)

    out = make_node(out_data, (x,), _bw, "dropout")
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between rows of logits and integer labels."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.data.shape}")
    labels = np.asarray(labels)
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} != ({n},)")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("label outside class range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    denom = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(denom)
    out_data = np.asarray(-logp[np.arange(n), labels].mean(), dtype=logits.data.dtype)

    def _bw():
        p = ez / denom
        p[np.arange(n), labels] -= 1.0
        logits.accumulate_grad(p * (out.grad / n))

    out = make_node(out_data, (logits,), _bw, "softmax_cross_entropy")
    return out


def sigmoid_bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits, computed stably."""
    t = np.asarray(targets, dtype=logits.data.dtype)
    if t.shape != logits.data.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.data.shape}")
    z = logits.data
    # softplus(z) - t*z = -[t*log(sigmoid) + (1-t)*log(1-sigmoid)]
    per = np.logaddexp(np.asarray(0, dtype=z.dtype), z) - t * z
    out_data = np.asarray(per.mean(), dtype=z.dtype)

    def _bw():
        logits.accumulate_grad((_stable_sigmoid(z) - t) * (out.grad / z.size))

    out = make_node(out_data, (logits,), _bw, "sigmoid_bce_with_logits")
    return out


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target."""
    target = np.asarray(target, dtype=pred.data.dtype)
    if target.shape != pred.data.shape:
        raise ShapeError(f"target shape {target.shape} != prediction shape {pred.data.shape}")
    diff = pred.data - target
    out_data = np.asarray(np.mean(diff * diff), dtype=pred.data.dtype)

    def _bw():
        pred.accumulate_grad(diff * (2.0 * out.grad / pred.data.size))

    out = make_node(out_data, (pred,), _bw, "mse_loss")
    return out
