"""Neural network layers on top of the tensor engine.

Feature maps are H x W x C float64 arrays. Convolution uses an im2col
lowering; pooling ops route gradients to the first (row-major) argmax so
backward passes are deterministic even on tied values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, TensorError, make_op

__all__ = [
    "ConvLayer",
    "FCLayer",
    "SppGrid",
    "conv2d",
    "relu",
    "sigmoid",
    "softmax_rows",
    "max_pool2d",
    "global_max_pool",
    "fully_connected",
    "stack_channels",
    "spp_pool",
    "spp_pool_regions",
    "feature_footprint",
]


@dataclass
class ConvLayer:
    filters: Tensor  # k x k x Cin x Cout
    bias: Tensor  # Cout
    stride: int = 1
    padding: int = 0


@dataclass
class FCLayer:
    weight: Tensor  # Din x Dout
    bias: Tensor  # Dout


@dataclass(frozen=True)
class SppGrid:
    grid_size: int = 6
    feature_stride: int = 1


# Cached flat scatter indices for col2im, keyed by geometry.
_COL2IM_CACHE: dict = {}


def _im2col_indices(hp, wp, cin, k, stride, ho, wo):
    key = (hp, wp, cin, k, stride, ho, wo)
    idx = _COL2IM_CACHE.get(key)
    if idx is None:
        i = (np.arange(ho) * stride)[:, None, None, None, None]
        j = (np.arange(wo) * stride)[None, :, None, None, None]
        a = np.arange(k)[None, None, :, None, None]
        b = np.arange(k)[None, None, None, :, None]
        c = np.arange(cin)[None, None, None, None, :]
        idx = (((i + a) * wp + (j + b)) * cin + c).reshape(ho * wo, k * k * cin)
        _COL2IM_CACHE[key] = idx
    return idx


def conv2d(x: Tensor, layer: ConvLayer) -> Tensor:
    """2-D cross-correlation plus bias; differentiable in x, filters, bias."""
    h, w, cin = x.data.shape
    k, k2, fcin, cout = layer.filters.data.shape
    if k != k2:
        raise TensorError("conv2d: non-square kernel")
    if fcin != cin:
        raise TensorError(f"conv2d: input has {cin} channels, filters expect {fcin}")
    s, p = layer.stride, layer.padding
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1
    if ho < 1 or wo < 1:
        raise TensorError(f"conv2d: kernel {k} larger than padded input {h + 2 * p}x{w + 2 * p}")

    xp = np.pad(x.data, ((p, p), (p, p), (0, 0))) if p else x.data
    hp, wp = xp.shape[:2]
    idx = _im2col_indices(hp, wp, cin, k, s, ho, wo)
    cols = xp.reshape(-1)[idx]  # (ho*wo, k*k*cin)
    wmat = layer.filters.data.reshape(k * k * cin, cout)
    out = (cols @ wmat + layer.bias.data[None, :]).reshape(ho, wo, cout)

    def bwd(g):
        gm = g.reshape(ho * wo, cout)
        gw = (cols.T @ gm).reshape(k, k, cin, cout)
        gb = gm.sum(axis=0)
        gcols = gm @ wmat.T
        gxp = np.bincount(idx.ravel(), weights=gcols.ravel(), minlength=hp * wp * cin)
        gxp = gxp.reshape(hp, wp, cin)
        gx = gxp[p : p + h, p : p + w] if p else gxp
        return (gx, gw, gb)

    return make_op(out, (x, layer.filters, layer.bias), bwd, "conv2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(g):
        return (g * mask,)

    return make_op(np.maximum(x.data, 0.0), (x,), bwd, "relu")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return make_op(out, (x,), bwd, "sigmoid")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an M x K matrix, computed with max subtraction."""
    if x.data.ndim != 2:
        raise TensorError("softmax_rows expects a 2-D tensor")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        dot = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - dot),)

    return make_op(p, (x,), bwd, "softmax_rows")


def max_pool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Channelwise max over window x window patches; gradient goes to the
    first row-major argmax of each window."""
    h, w, c = x.data.shape
    if window < 1 or window > h or window > w:
        raise TensorError(f"max_pool2d: window {window} invalid for {h}x{w} input")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (window, window), axis=(0, 1))
    win = win[::stride, ::stride]  # (ho, wo, c, window, window)
    # Reorder so the flattened window axis is row-major in (du, dv).
    flat = win.transpose(0, 1, 3, 4, 2).reshape(ho, wo, window * window, c)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None, :], axis=2)[:, :, 0, :]

    def bwd(g):
        ii = (np.arange(ho) * stride)[:, None, None]
        jj = (np.arange(wo) * stride)[None, :, None]
        du, dv = arg // window, arg % window
        lin = ((ii + du) * w + (jj + dv)) * c + np.arange(c)[None, None, :]
        gx = np.bincount(lin.ravel(), weights=g.ravel(), minlength=h * w * c)
        return (gx.reshape(h, w, c),)

    return make_op(out, (x,), bwd, "max_pool2d")


def global_max_pool(x: Tensor) -> Tensor:
    """H x W x C -> C, max over all spatial cells (first argmax on ties)."""
    h, w, c = x.data.shape
    flat = x.data.reshape(h * w, c)
    arg = flat.argmax(axis=0)
    out = flat[arg, np.arange(c)]

    def bwd(g):
        gx = np.zeros((h * w, c))
        gx[arg, np.arange(c)] = g
        return (gx.reshape(h, w, c),)

    return make_op(out, (x,), bwd, "global_max_pool")


def fully_connected(x: Tensor, layer: FCLayer) -> Tensor:
    """x @ W + b for a Din vector or an N x Din batch of rows."""
    wd, bd = layer.weight.data, layer.bias.data
    vec = x.data.ndim == 1
    if x.data.shape[-1] != wd.shape[0]:
        raise TensorError(
            f"fully_connected: input dim {x.data.shape[-1]} vs weight {wd.shape}"
        )
    xd = x.data[None, :] if vec else x.data
    out = xd @ wd + bd[None, :]

    def bwd(g):
        gm = g[None, :] if vec else g
        gw = xd.T @ gm
        gb = gm.sum(axis=0)
        gx = gm @ wd.T
        return (gx[0] if vec else gx, gw, gb)

    return make_op(out[0] if vec else out, (x, layer.weight, layer.bias), bwd, "fully_connected")


def stack_channels(tensors) -> Tensor:
    """Concatenate H x W x Ci maps along the channel axis."""
    tensors = list(tensors)
    hw = tensors[0].data.shape[:2]
    for t in tensors:
        if t.data.shape[:2] != hw:
            raise TensorError(
                f"stack_channels: spatial mismatch {t.data.shape[:2]} vs {hw}"
            )
    out = np.concatenate([t.data for t in tensors], axis=2)
    splits = np.cumsum([t.data.shape[2] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=2))

    return make_op(out, tuple(tensors), bwd, "stack_channels")


def feature_footprint(box, stride: int, h: int, w: int):
    """Map an image-coordinate (x1, y1, x2, y2) box to feature-map cell
    bounds [r0, r1) x [c0, c1): floor for starts, ceil for ends, clamped to
    cover at least one cell."""
    x1, y1, x2, y2 = box
    c0 = int(np.floor(x1 / stride))
    c1 = int(np.ceil(x2 / stride))
    r0 = int(np.floor(y1 / stride))
    r1 = int(np.ceil(y2 / stride))
    r0 = min(max(r0, 0), h - 1)
    c0 = min(max(c0, 0), w - 1)
    r1 = min(max(r1, r0 + 1), h)
    c1 = min(max(c1, c0 + 1), w)
    return r0, r1, c0, c1


def feature_footprints(boxes, stride: int, h: int, w: int) -> np.ndarray:
    """Vectorized `feature_footprint` over M boxes: (M, 4) [r0, r1, c0, c1]."""
    arr = np.array([tuple(b) for b in boxes], dtype=np.float64).reshape(-1, 4)
    c0 = np.clip(np.floor(arr[:, 0] / stride).astype(np.int64), 0, w - 1)
    r0 = np.clip(np.floor(arr[:, 1] / stride).astype(np.int64), 0, h - 1)
    c1 = np.clip(np.ceil(arr[:, 2] / stride).astype(np.int64), c0 + 1, w)
    r1 = np.clip(np.ceil(arr[:, 3] / stride).astype(np.int64), r0 + 1, h)
    return np.stack([r0, r1, c0, c1], axis=1)


def _bin_index(n: int, g: int):
    """Clamped bin slices over n cells: bin i nominally spans
    [floor(i*n/g), floor((i+1)*n/g)); an empty bin collapses to the single
    cell at its clamped start. Returns a (g, L) gather-index array whose
    padding repeats each bin's last cell (harmless under max with
    first-argmax tie-breaking)."""
    starts = np.minimum((np.arange(g) * n) // g, n - 1)
    ends = np.maximum((np.arange(1, g + 1) * n) // g, starts + 1)
    length = int((ends - starts).max())
    idx = starts[:, None] + np.arange(length)[None, :]
    return np.minimum(idx, (ends - 1)[:, None])


def _spp_one(hdata: np.ndarray, fp, g: int):
    """Pool one footprint; returns (pooled G x G x C, state for backward)."""
    r0, r1, c0, c1 = fp
    sub = hdata[r0:r1, c0:c1]
    ri = _bin_index(r1 - r0, g)  # (g, Lr)
    ci = _bin_index(c1 - c0, g)  # (g, Lc)
    lr, lc = ri.shape[1], ci.shape[1]
    cand = sub[ri][:, :, ci]  # (g, Lr, g, Lc, C)
    cand = cand.transpose(0, 2, 1, 3, 4).reshape(g, g, lr * lc, -1)
    arg = cand.argmax(axis=2)  # first (row-major within bin) on ties
    pooled = np.take_along_axis(cand, arg[:, :, None, :], axis=2)[:, :, 0, :]
    return pooled, (sub.shape, ri, ci, arg)


def _spp_backprop_one(gpooled, state, g):
    """Scatter a G x G x C pooled gradient onto the sub-map at the argmax
    cells recorded during the forward pass."""
    (hh, ww, c), ri, ci, arg = state
    lc = ci.shape[1]
    ii, jj, cc = np.meshgrid(np.arange(g), np.arange(g), np.arange(c), indexing="ij")
    rows = ri[ii, arg // lc]
    cols = ci[jj, arg % lc]
    gsub = np.zeros((hh, ww, c))
    np.add.at(gsub, (rows, cols, cc), gpooled)
    return gsub


def spp_pool(h: Tensor, box, grid: SppGrid) -> Tensor:
    """Fixed-grid max pooling of one image-coordinate box: G x G x C out."""
    x1, y1, x2, y2 = box
    if x2 <= x1 or y2 <= y1:
        raise TensorError(f"spp_pool: degenerate box {box}")
    hh, ww, _ = h.data.shape
    g = grid.grid_size
    fp = feature_footprint((x1, y1, x2, y2), grid.feature_stride, hh, ww)
    pooled, state = _spp_one(h.data, fp, g)

    def bwd(gout):
        gh = np.zeros_like(h.data)
        r0, r1, c0, c1 = fp
        gh[r0:r1, c0:c1] = _spp_backprop_one(gout, state, g)
        return (gh,)

    return make_op(pooled, (h,), bwd, "spp_pool")


def _batch_bin_index(start: np.ndarray, stop: np.ndarray, g: int):
    """Absolute gather indices (M, g, L) for per-region clamped bins over
    the [start, stop) cell ranges; padding repeats each bin's last cell."""
    n = (stop - start)[:, None]
    i = np.arange(g)[None, :]
    starts = np.minimum((i * n) // g, n - 1)
    ends = np.maximum(((i + 1) * n) // g, starts + 1)
    length = int((ends - starts).max())
    idx = starts[:, :, None] + np.arange(length)[None, None, :]
    idx = np.minimum(idx, (ends - 1)[:, :, None])
    return idx + start[:, None, None]


def spp_pool_regions(h: Tensor, boxes, grid: SppGrid) -> Tensor:
    """Batched SPP over M boxes: M x G x G x C, one tape node."""
    hh, ww, c = h.data.shape
    g = grid.grid_size
    m = len(boxes)
    for i, box in enumerate(boxes):
        x1, y1, x2, y2 = box
        if x2 <= x1 or y2 <= y1:
            raise TensorError(f"spp_pool: degenerate box {box} (region {i})")
    fp = feature_footprints(boxes, grid.feature_stride, hh, ww)
    ridx = _batch_bin_index(fp[:, 0], fp[:, 1], g)  # (M, g, Lr)
    cidx = _batch_bin_index(fp[:, 2], fp[:, 3], g)  # (M, g, Lc)
    lr, lc = ridx.shape[2], cidx.shape[2]
    cand = h.data[ridx[:, :, :, None, None], cidx[:, None, None, :, :]]
    cand = cand.transpose(0, 1, 3, 2, 4, 5).reshape(m, g, g, lr * lc, c)
    arg = cand.argmax(axis=3)  # first (row-major within bin) on ties
    out = np.take_along_axis(cand, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def bwd(gout):
        mm = np.arange(m)[:, None, None, None]
        ii = np.arange(g)[None, :, None, None]
        jj = np.arange(g)[None, None, :, None]
        rows = ridx[mm, ii, arg // lc]
        cols = cidx[mm, jj, arg % lc]
        lin = (rows * ww + cols) * c + np.arange(c)[None, None, None, :]
        gh = np.bincount(lin.ravel(), weights=gout.ravel(), minlength=hh * ww * c)
        return (gh.reshape(hh, ww, c),)

    return make_op(out, (h,), bwd, "spp_pool_regions")
