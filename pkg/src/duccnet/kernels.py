"""Raw numerical kernels: convolution, pooling, elementwise add, resize.

Tensors are plain numpy arrays. Images are (H, W, C), kernel banks are
(kh, kw, in_channels, out_channels), batches prepend a leading dimension;
every op accepts both the single-image and the batched layout. The engine
dtype is float32; passing float64 arrays keeps float64 throughout, which is
what the gradient-verification mode relies on.

The convolution is cross-correlation (no kernel flip) computed as im2col plus
one matrix product, so the per-element accumulation order is the fixed
row-major (kh, kw, channel) order of the flattened columns regardless of
BLAS threading.
"""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Tensor = np.ndarray


def conv_out_size(n: int, k: int, p: int, s: int) -> int:
    """Output spatial size floor((n + 2p - k)/s) + 1; must be >= 1."""
    out = (n + 2 * p - k) // s + 1
    if out < 1:
        raise ValueError(
            f"degenerate output size {out} for input {n}, kernel {k}, padding {p}, stride {s}"
        )
    return out


@dataclass
class ConvSpec:
    """Convolution geometry. padding is an integer or 'same'.

    'same' picks the smallest symmetric padding giving output size
    ceil(n/stride); for the stride-1 odd-kernel case that is (k - 1) // 2.
    """

    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: "int | str" = 0

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ValueError(f"kernel_size must be positive, got {self.kernel_size}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if isinstance(self.padding, str):
            if self.padding != "same":
                raise ValueError(f"padding must be an integer or 'same', got {self.padding!r}")
        elif self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")

    def resolve_padding(self, n: int) -> int:
        if self.padding != "same":
            return int(self.padding)
        target = -(-n // self.stride)  # ceil(n / stride)
        need = (target - 1) * self.stride + self.kernel_size - n
        p = max(0, -(-need // 2))
        if (n + 2 * p - self.kernel_size) // self.stride + 1 != target:
            # symmetric integer padding cannot express 'same' for even
            # kernels at stride 1; the architecture only uses odd kernels
            raise ValueError(
                f"'same' padding cannot reach output ceil({n}/{self.stride}) "
                f"with kernel_size {self.kernel_size}"
            )
        return p

    def out_size(self, n: int) -> int:
        return conv_out_size(n, self.kernel_size, self.resolve_padding(n), self.stride)


def _as_batch(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected rank 3 or 4 tensor, got rank {x.ndim}")


def _im2col(xp, k, stride):
    """Strided windows of a padded batch -> (B*Ho*Wo, k*k*C) columns.

    Column order is row-major (kh, kw, channel), fixing the accumulation
    order of the matrix product.
    """
    B = xp.shape[0]
    C = xp.shape[3]
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (B, H', W', C, k, k)
    win = win[:, ::stride, ::stride]
    Ho, Wo = win.shape[1], win.shape[2]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, k * k * C)
    return np.ascontiguousarray(cols), Ho, Wo


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, spec: ConvSpec) -> Tensor:
    """Cross-correlation of (B,H,W,Cin) with (K,K,Cin,Nk) plus channel bias."""
    xb, squeeze = _as_batch(x)
    B, H, W, Cin = xb.shape
    k = spec.kernel_size
    if Cin != spec.in_channels:
        raise ValueError(f"input channels {Cin} do not match spec in_channels {spec.in_channels}")
    if kernels.shape != (k, k, spec.in_channels, spec.out_channels):
        raise ValueError(
            f"kernel shape {kernels.shape} does not match spec "
            f"({k}, {k}, {spec.in_channels}, {spec.out_channels})"
        )
    if bias.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {bias.shape} does not match out_channels {spec.out_channels}")
    p = spec.resolve_padding(H)
    pw = spec.resolve_padding(W)
    # shape-law check up front; the window count below lands on the same size
    conv_out_size(H, k, p, spec.stride)
    conv_out_size(W, k, pw, spec.stride)
    xp = np.pad(xb, ((0, 0), (p, p), (pw, pw), (0, 0))) if (p or pw) else xb
    cols, Ho, Wo = _im2col(xp, k, spec.stride)
    y = cols @ kernels.reshape(k * k * spec.in_channels, spec.out_channels)
    y = y.reshape(B, Ho, Wo, spec.out_channels) + bias
    return y[0] if squeeze else y


def conv2d_backward(x: Tensor, kernels: Tensor, spec: ConvSpec, dy: Tensor):
    """Gradients (dx, dw, db) of conv2d given upstream dy.

    Recomputes the im2col columns from x instead of caching them; dx is a
    stride-1 correlation of the stride-dilated, (K-1)-padded dy with the
    spatially flipped, channel-swapped kernel bank.
    """
    xb, squeeze = _as_batch(x)
    dyb, _ = _as_batch(dy)
    B, H, W, Cin = xb.shape
    k = spec.kernel_size
    s = spec.stride
    Nk = spec.out_channels
    p = spec.resolve_padding(H)
    pw = spec.resolve_padding(W)
    Ho, Wo = dyb.shape[1], dyb.shape[2]

    xp = np.pad(xb, ((0, 0), (p, p), (pw, pw), (0, 0))) if (p or pw) else xb
    cols, _, _ = _im2col(xp, k, s)
    dy_flat = dyb.reshape(B * Ho * Wo, Nk)
    dw = (cols.T @ dy_flat).reshape(k, k, Cin, Nk)
    db = dyb.sum(axis=(0, 1, 2))

    # dilate dy by the stride, pad by k-1, correlate with the flipped bank
    dyd = np.zeros((B, (Ho - 1) * s + 1, (Wo - 1) * s + 1, Nk), dtype=dyb.dtype)
    dyd[:, ::s, ::s] = dyb
    dyp = np.pad(dyd, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0)))
    wflip = kernels[::-1, ::-1].transpose(0, 1, 3, 2)  # (k, k, Nk, Cin)
    gcols, Gh, Gw = _im2col(dyp, k, 1)
    dxp = (gcols @ wflip.reshape(k * k * Nk, Cin)).reshape(B, Gh, Gw, Cin)
    # input positions past the last window are never touched: pad the remainder
    rh = (H + 2 * p) - ((Ho - 1) * s + k)
    rw = (W + 2 * pw) - ((Wo - 1) * s + k)
    if rh or rw:
        dxp = np.pad(dxp, ((0, 0), (0, rh), (0, rw), (0, 0)))
    dx = dxp[:, p : p + H, pw : pw + W]
    if squeeze:
        return dx[0], dw, db
    return dx, dw, db


def maxpool2(x: Tensor, with_argmax: bool = False):
    """Non-overlapping 2x2 max. Ties resolve to the first window index
    in row-major order; the argmax is what the backward pass scatters to."""
    xb, squeeze = _as_batch(x)
    B, H, W, C = xb.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    rw = xb.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
    rw = rw.reshape(B, H // 2, W // 2, 4, C)
    idx = rw.argmax(axis=3)
    y = np.take_along_axis(rw, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    if squeeze:
        y = y[0]
        idx = idx[0]
    return (y, idx) if with_argmax else y


def maxpool2_backward(argmax: Tensor, dy: Tensor) -> Tensor:
    """Scatter dy back to the recorded per-window argmax positions."""
    dyb, squeeze = _as_batch(dy)
    idx = argmax[None] if argmax.ndim == 3 else argmax
    B, Ho, Wo, C = dyb.shape
    drw = np.zeros((B, Ho, Wo, 4, C), dtype=dyb.dtype)
    np.put_along_axis(drw, idx[:, :, :, None, :], dyb[:, :, :, None, :], axis=3)
    dx = drw.reshape(B, Ho, Wo, 2, 2, C).transpose(0, 1, 3, 2, 4, 5)
    dx = dx.reshape(B, Ho * 2, Wo * 2, C)
    return dx[0] if squeeze else dx


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of identically shaped tensors (the merge op)."""
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def resize_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resize of (H, W, C) or (B, H, W, C).

    Same-size resize is exact; outputs are clipped to the input value range
    so interpolation rounding can never escape it.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be >= 1, got {out_h}x{out_w}")
    xb, squeeze = _as_batch(x)
    B, H, W, C = xb.shape
    if H < 1 or W < 1 or C < 1:
        raise ValueError(f"empty input of shape {x.shape}")

    def axis_coords(n_in, n_out):
        if n_out == 1:
            src = np.array([(n_in - 1) / 2.0])
        else:
            src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (src - lo).astype(xb.dtype)
        return lo, hi, frac

    y0, y1, fy = axis_coords(H, out_h)
    x0, x1, fx = axis_coords(W, out_w)
    rows = xb[:, y0] * (1 - fy)[None, :, None, None] + xb[:, y1] * fy[None, :, None, None]
    out = rows[:, :, x0] * (1 - fx)[None, None, :, None] + rows[:, :, x1] * fx[None, None, :, None]
    np.clip(out, xb.min(), xb.max(), out=out)
    out = out.astype(xb.dtype, copy=False)
    return out[0] if squeeze else out
