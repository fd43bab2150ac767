"""Differentiable layers: affine, (de)convolution, pooling, activations, losses.

Convolution here is cross-correlation (no kernel flip), the mainstream
framework convention. ``conv2d`` insists on exact stride divisibility;
model builders choose pads so that this holds, which removes silent floor
truncation from the geometry. ``deconv2d`` is the exact linear adjoint of
``conv2d`` for shared weights, so its spatial output obeys

    size_out = (size_in - 1) * stride + kernel_size - 2 * pad

Weight layouts: conv weights are [out_ch, in_ch, k, k]; deconv weights are
[in_ch, out_ch, k, k]. The two interpretations share the same buffer layout,
which is what makes the adjoint identity hold with a literally shared array.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autograd import Tensor, _check_extents, _check_same_dtype, _make
from .errors import GeometryError, LabelError, ShapeError


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size,
               self.stride) < 1 or self.pad < 0:
            raise GeometryError(f"invalid conv geometry {self}")


@dataclass(frozen=True)
class DeconvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size,
               self.stride) < 1 or self.pad < 0:
            raise GeometryError(f"invalid deconv geometry {self}")


def conv_output_size(size_in: int, kernel_size: int, stride: int, pad: int) -> int:
    """Spatial output extent of a strided convolution; divisibility is exact."""
    span = size_in + 2 * pad - kernel_size
    if span < 0:
        raise GeometryError(
            f"kernel {kernel_size} exceeds padded input {size_in + 2 * pad}")
    if span % stride != 0:
        raise GeometryError(
            f"conv geometry not exact: ({size_in} + 2*{pad} - {kernel_size}) "
            f"is not divisible by stride {stride}")
    return span // stride + 1


def deconv_output_size(size_in: int, stride: int, kernel_size: int, pad: int) -> int:
    """Spatial output extent of a fractionally strided convolution."""
    out = (size_in - 1) * stride + kernel_size - 2 * pad
    if out < 1:
        raise GeometryError(
            f"deconv output size {out} < 1 for input {size_in}, stride {stride}, "
            f"kernel {kernel_size}, pad {pad}")
    return out


# -- im2col machinery ---------------------------------------------------------


@lru_cache(maxsize=128)
def _conv_indices(channels: int, h: int, w: int, k: int, stride: int, pad: int):
    """Gather indices (chan, row, col), each [channels*k*k, L], into the padded
    input, for every output position of the conv geometry."""
    ho = conv_output_size(h, k, stride, pad)
    wo = conv_output_size(w, k, stride, pad)
    i0 = np.tile(np.repeat(np.arange(k), k), channels)
    j0 = np.tile(np.arange(k), k * channels)
    i1 = stride * np.repeat(np.arange(ho), wo)
    j1 = stride * np.tile(np.arange(wo), ho)
    ii = i0[:, None] + i1[None, :]
    jj = j0[:, None] + j1[None, :]
    kk = np.repeat(np.arange(channels), k * k)[:, None]
    return kk, ii, jj, ho, wo


def _pad_hw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """[B,C,H,W] -> patch matrix [B, C*k*k, L] plus the output extents."""
    b, c, h, w = x.shape
    kk, ii, jj, ho, wo = _conv_indices(c, h, w, k, stride, pad)
    cols = _pad_hw(x, pad)[:, kk, ii, jj]
    return cols, ho, wo


def _col2im(cols: np.ndarray, channels: int, h: int, w: int, k: int,
            stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back to [B,C,H,W]."""
    b = cols.shape[0]
    kk, ii, jj, _, _ = _conv_indices(channels, h, w, k, stride, pad)
    hp, wp = h + 2 * pad, w + 2 * pad
    lin = ((kk * hp + ii) * wp + jj)  # [C*k*k, L] indices into one padded image
    flat = (np.arange(b)[:, None, None] * (channels * hp * wp) + lin[None]).ravel()
    acc = np.bincount(flat, weights=cols.astype(np.float64, copy=False).ravel(),
                      minlength=b * channels * hp * wp)
    out = acc.reshape(b, channels, hp, wp).astype(cols.dtype, copy=False)
    if pad == 0:
        return out
    return out[:, :, pad:-pad, pad:-pad]


# -- layers -------------------------------------------------------------------


def fully_connected(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map per row: x[batch, n_in] @ w[n_in, n_out] + b[n_out]."""
    _check_same_dtype("fully_connected", x, w, b)
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(
            f"fully_connected ranks: x{x.shape}, w{w.shape}, b{b.shape}")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ShapeError(
            f"fully_connected extents disagree: x{x.shape}, w{w.shape}, b{b.shape}")
    out = x.data @ w.data + b.data

    def bw(g, stash):
        stash.add(x, g @ w.data.T)
        stash.add(w, x.data.T @ g)
        stash.add(b, g.sum(axis=0))

    return _make(out, "fully_connected", (x, w, b), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, *, stride: int = 1,
           pad: int = 0) -> Tensor:
    """Strided 2-d cross-correlation of x[B,C,H,W] with weight [Co,Ci,k,k]."""
    _check_same_dtype("conv2d", x, weight, bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d ranks: x{x.shape}, weight{weight.shape}")
    b_sz, ci, h, w = x.shape
    co, ci_w, k, k2 = weight.shape
    if ci != ci_w or k != k2 or bias.shape != (co,):
        raise ShapeError(
            f"conv2d operands disagree: x{x.shape}, weight{weight.shape}, "
            f"bias{bias.shape}")
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    w_mat = weight.data.reshape(co, ci * k * k)
    out = np.matmul(w_mat, cols) + bias.data.reshape(1, co, 1)
    out = out.reshape(b_sz, co, ho, wo)

    def bw(g, stash):
        g_mat = g.reshape(b_sz, co, ho * wo)
        if weight.requires_grad:
            dw = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0)
            stash.add(weight, dw.reshape(weight.shape))
        stash.add(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w_mat.T, g_mat)
            stash.add(x, _col2im(dcols, ci, h, w, k, stride, pad))

    return _make(out, "conv2d", (x, weight, bias), bw)


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor, *, stride: int = 1,
             pad: int = 0) -> Tensor:
    """Transposed convolution of x[B,Ci,H,W] with weight [Ci,Co,k,k].

    Exact adjoint of :func:`conv2d` under the shared-buffer weight layout;
    output extent follows :func:`deconv_output_size`.
    """
    _check_same_dtype("deconv2d", x, weight, bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"deconv2d ranks: x{x.shape}, weight{weight.shape}")
    b_sz, ci, h, w = x.shape
    ci_w, co, k, k2 = weight.shape
    if ci != ci_w or k != k2 or bias.shape != (co,):
        raise ShapeError(
            f"deconv2d operands disagree: x{x.shape}, weight{weight.shape}, "
            f"bias{bias.shape}")
    ho = deconv_output_size(h, stride, k, pad)
    wo = deconv_output_size(w, stride, k, pad)
    w_mat = weight.data.reshape(ci, co * k * k)
    x_mat = x.data.reshape(b_sz, ci, h * w)
    cols = np.matmul(w_mat.T, x_mat)
    out = _col2im(cols, co, ho, wo, k, stride, pad)
    out = out + bias.data.reshape(1, co, 1, 1)

    def bw(g, stash):
        g_cols, _, _ = _im2col(g, k, stride, pad)
        if x.requires_grad:
            dx = np.matmul(w_mat, g_cols)
            stash.add(x, dx.reshape(x.shape))
        if weight.requires_grad:
            dw = np.matmul(x_mat, g_cols.transpose(0, 2, 1)).sum(axis=0)
            stash.add(weight, dw.reshape(weight.shape))
        stash.add(bias, g.sum(axis=(0, 2, 3)))

    return _make(out, "deconv2d", (x, weight, bias), bw)


def max_pool2d(x: Tensor, kernel_size: int, stride: int) -> Tensor:
    """Max pooling over square windows; geometry must divide exactly."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d expects [B,C,H,W], got {x.shape}")
    b_sz, c, h, w = x.shape
    flat = x.data.reshape(b_sz * c, 1, h, w)
    cols, ho, wo = _im2col(flat, kernel_size, stride, 0)
    winners = cols.argmax(axis=1)  # [B*C, L]
    out = np.take_along_axis(cols, winners[:, None, :], axis=1)
    out = out[:, 0, :].reshape(b_sz, c, ho, wo)

    def bw(g, stash):
        kk, ii, jj, _, _ = _conv_indices(1, h, w, kernel_size, stride, 0)
        l_range = np.arange(winners.shape[1])[None, :]
        rows = ii[winners, l_range]
        colx = jj[winners, l_range]
        n_idx = np.arange(b_sz * c)[:, None]
        flat_idx = ((n_idx * h + rows) * w + colx).ravel()
        acc = np.bincount(flat_idx, weights=g.astype(np.float64).ravel(),
                          minlength=b_sz * c * h * w)
        stash.add(x, acc.reshape(x.shape).astype(g.dtype, copy=False))

    return _make(out, "max_pool2d", (x,), bw)


def leaky_relu(x: Tensor, negative_slope: float) -> Tensor:
    """Elementwise max(x, slope*x). The subgradient at exactly 0 uses the
    negative-side slope, so behaviour is deterministic at the kink."""
    if not 0.0 <= negative_slope <= 1.0:
        raise ShapeError(f"negative_slope must be in [0, 1], got {negative_slope}")
    factor = np.where(x.data > 0, x.data.dtype.type(1),
                      x.data.dtype.type(negative_slope))

    def bw(g, stash):
        stash.add(x, g * factor)

    return _make(x.data * factor, "leaky_relu", (x,), bw)


def concat(parts: list[Tensor], axis: int) -> Tensor:
    """Concatenate tensors along one axis; all other extents must agree."""
    if not parts:
        raise ShapeError("concat needs at least one part")
    _check_same_dtype("concat", *parts)
    rank = parts[0].data.ndim
    if not 0 <= axis < rank:
        raise ShapeError(f"concat axis {axis} out of range for rank {rank}")
    for p in parts[1:]:
        if p.data.ndim != rank:
            raise ShapeError("concat parts differ in rank")
        for ax in range(rank):
            if ax != axis and p.shape[ax] != parts[0].shape[ax]:
                raise ShapeError(
                    f"concat off-axis extents differ: {p.shape} vs {parts[0].shape}")
    out = np.concatenate([p.data for p in parts], axis=axis)
    offsets = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g, stash):
        for part, piece in zip(parts, np.split(g, offsets, axis=axis)):
            stash.add(part, piece)

    return _make(out, "concat", tuple(parts), bw)


def reshape(x: Tensor, new_shape) -> Tensor:
    """Reinterpret extents; row-major order and element count are preserved."""
    new_shape = _check_extents(new_shape)
    if int(np.prod(new_shape)) != x.data.size:
        raise ShapeError(f"reshape {x.shape} -> {new_shape}: element counts differ")

    def bw(g, stash):
        stash.add(x, g.reshape(x.shape))

    return _make(x.data.reshape(new_shape), "reshape", (x,), bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a [batch, K] array (plain numpy, inference only)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    Numerically stabilized by max subtraction; ``labels`` is an integer
    array of class indices, one per row.
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects [batch, K], got {logits.shape}")
    b_sz, k = logits.shape
    if k < 2:
        raise ShapeError(f"softmax_cross_entropy needs K >= 2, got K={k}")
    labels = np.asarray(labels)
    if labels.shape != (b_sz,):
        raise LabelError(f"labels shape {labels.shape} != ({b_sz},)")
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"labels outside [0, {k}): {labels}")
    labels = labels.astype(np.intp)

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b_sz)
    loss = (-logp[rows, labels].sum() / b_sz).reshape(1).astype(logits.data.dtype)

    def bw(g, stash):
        p = np.exp(logp)
        p[rows, labels] -= 1
        stash.add(logits, (g.reshape(-1)[0] / b_sz) * p)

    return _make(loss, "softmax_cross_entropy", (logits,), bw)


def mse_pixel_loss(a: Tensor, b: Tensor) -> Tensor:
    """Mean over the batch of per-sample squared L2 distance.

    The first axis is the batch; the squared difference is summed over all
    remaining axes and averaged over the batch only.
    """
    _check_same_dtype("mse_pixel_loss", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_pixel_loss shapes differ: {a.shape} vs {b.shape}")
    batch = a.shape[0]
    diff = a.data - b.data
    loss = ((diff * diff).sum() / batch).reshape(1).astype(a.data.dtype)

    def bw(g, stash):
        scaled = (2.0 * g.reshape(-1)[0] / batch) * diff
        stash.add(a, scaled)
        stash.add(b, -scaled)

    return _make(loss, "mse_pixel_loss", (a, b), bw)
