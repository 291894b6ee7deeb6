"""Spatial ops on [B,C,H,W] tensors: convolution, padding, resampling.

conv2d is cross-correlation (no kernel flip). Bilinear resampling uses
half-pixel source centers (align-corners false). Pixel shuffle and
unshuffle with factor 2 are exact inverse permutations.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _as_tensor, _make


def _sliding(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int) -> np.ndarray:
    """View of a padded input with window axes: [B,C,H',W',kh,kw]."""
    kh_eff = dilation * (kh - 1) + 1
    kw_eff = dilation * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh_eff, kw_eff), axis=(2, 3))
    return win[:, :, ::stride, ::stride, ::dilation, ::dilation]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-d cross-correlation with zero padding.

    x: [B,Cin,H,W], weight: [Cout,Cin,kh,kw], bias: [Cout] or None.
    Output spatial size: floor((H + 2p - d*(k-1) - 1)/s) + 1.
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be positive")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-d input and weight")
    b_, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"channel mismatch: input {cin} vs weight {cin_w}")
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ValueError("bias must be 1-d of length Cout")

    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ValueError("conv2d output would be empty")

    parents = (x, weight) if bias is None else (x, weight, bias)
    from .tensor import _grad_enabled

    def wants(t):
        return _grad_enabled and (t.requires_grad or t._backward_fn is not None)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        # 1x1: a per-pixel linear map, no im2col needed
        wmat = weight.data[:, :, 0, 0]
        xr = x.data.reshape(b_, cin, h * w)
        out = np.matmul(wmat, xr).reshape(b_, cout, h, w)
        if bias is not None:
            out += bias.data[None, :, None, None]

        def bw1(g):
            gr = g.reshape(b_, cout, h * w)
            if wants(weight):
                gw = np.tensordot(gr, xr, axes=([0, 2], [0, 2]))
                weight._accum(gw.reshape(weight.shape))
            if bias is not None:
                bias._accum(g.sum(axis=(0, 2, 3)))
            if wants(x):
                x._accum(np.matmul(wmat.T, gr).reshape(x.shape))

        return _make(out, parents, "conv2d", bw1)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = _sliding(xp, kh, kw, stride, dilation)  # [B,Cin,oh,ow,kh,kw] view
    # im2col once; reshaping the strided view materializes it
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b_, oh * ow, cin * kh * kw)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = cols @ wmat.T                              # [B,oh*ow,Cout]
    out = np.ascontiguousarray(out.transpose(0, 2, 1)).reshape(b_, cout, oh, ow)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b_, oh * ow, cout)
        if wants(weight):
            gw = g2.reshape(-1, cout).T @ cols.reshape(-1, cin * kh * kw)
            weight._accum(gw.reshape(weight.shape))
        if bias is not None:
            bias._accum(g.sum(axis=(0, 2, 3)))
        if not wants(x):
            return
        if stride == 1:
            # grad wrt input is a full correlation with the flipped kernel
            pg = dilation * (kh - 1) - padding
            gp = np.pad(g, ((0, 0), (0, 0), (pg, pg), (pg, pg))) if pg > 0 else g
            if pg < 0:
                gp = gp[:, :, -pg:pg, -pg:pg]
            gwin = _sliding(gp, kh, kw, 1, dilation)
            gcols = gwin.transpose(0, 2, 3, 1, 4, 5).reshape(b_, h * w, cout * kh * kw)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = gcols @ wflip.reshape(cin, cout * kh * kw).T
            x._accum(np.ascontiguousarray(gx.transpose(0, 2, 1)).reshape(x.shape))
            return
        gcols = (g2 @ wmat).reshape(b_, oh, ow, cin, kh, kw)
        gxp = np.zeros_like(xp)
        # scatter per kernel tap: for fixed (i,j) the targets are a plain
        # strided slice, so += is safe
        for i in range(kh):
            for j in range(kw):
                gxp[:, :,
                    i * dilation: i * dilation + stride * (oh - 1) + 1: stride,
                    j * dilation: j * dilation + stride * (ow - 1) + 1: stride] \
                    += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if padding:
            gxp = gxp[:, :, padding: padding + h, padding: padding + w]
        x._accum(gxp)

    return _make(out, parents, "conv2d", bw)


def reflect_pad2d(x: Tensor, pad: int) -> Tensor:
    """Reflection padding (border sample not repeated) on H and W."""
    x = _as_tensor(x)
    if pad == 0:
        return x
    b_, c, h, w = x.shape
    if pad >= h or pad >= w:
        raise ValueError("reflection pad must be smaller than the image")
    iy = np.abs(np.arange(-pad, h + pad))
    iy = np.where(iy >= h, 2 * (h - 1) - iy, iy)
    ix = np.abs(np.arange(-pad, w + pad))
    ix = np.where(ix >= w, 2 * (w - 1) - ix, ix)
    out = x.data[:, :, iy][:, :, :, ix]

    def bw(g):
        # fold each padded axis back onto its source rows, one axis at a time
        tmp = np.zeros((w, b_, c, h + 2 * pad), dtype=g.dtype)
        np.add.at(tmp, ix, g.transpose(3, 0, 1, 2))
        gx = np.zeros((h, b_, c, w), dtype=g.dtype)
        np.add.at(gx, iy, tmp.transpose(3, 1, 2, 0))
        x._accum(gx.transpose(1, 2, 0, 3))

    return _make(out, (x,), "reflect_pad", bw)


def pixel_unshuffle_r2(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,4C,H/2,W/2]; lossless space-to-channel move."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("pixel_unshuffle_r2 needs even H and W")
    out = (x.data.reshape(b, c, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 3, 5, 2, 4)
           .reshape(b, 4 * c, h // 2, w // 2))

    def bw(g):
        x._accum(g.reshape(b, c, 2, 2, h // 2, w // 2)
                 .transpose(0, 1, 4, 2, 5, 3)
                 .reshape(b, c, h, w))

    return _make(np.ascontiguousarray(out), (x,), "pixel_unshuffle", bw)


def pixel_shuffle_r2(x: Tensor) -> Tensor:
    """[B,C,H,W] -> [B,C/4,2H,2W]; inverse of pixel_unshuffle_r2."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if c % 4:
        raise ValueError("pixel_shuffle_r2 needs channels divisible by 4")
    out = (x.data.reshape(b, c // 4, 2, 2, h, w)
           .transpose(0, 1, 4, 2, 5, 3)
           .reshape(b, c // 4, 2 * h, 2 * w))

    def bw(g):
        x._accum(g.reshape(b, c // 4, h, 2, w, 2)
                 .transpose(0, 1, 3, 5, 2, 4)
                 .reshape(b, c, h, w))

    return _make(np.ascontiguousarray(out), (x,), "pixel_shuffle", bw)


def _linear_coeffs(n_in: int, n_out: int):
    """Half-pixel-center source indices and weights for one axis."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    i1 = np.clip(i0 + 1, 0, n_in - 1)
    i0 = np.clip(i0, 0, n_in - 1)
    return i0, i1, t


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resampling with half-pixel centers."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    y0, y1, ty = _linear_coeffs(h, out_h)
    x0, x1, tx = _linear_coeffs(w, out_w)
    ty_col = ty.astype(x.dtype)[:, None]
    tx_row = tx.astype(x.dtype)

    xd = x.data
    rows = xd[:, :, y0, :] * (1.0 - ty_col) + xd[:, :, y1, :] * ty_col
    out = rows[:, :, :, x0] * (1.0 - tx_row) + rows[:, :, :, x1] * tx_row

    def bw(g):
        grows = np.zeros((w, b, c, out_h), dtype=g.dtype)
        gm = g.transpose(3, 0, 1, 2)  # [out_w,B,C,out_h]
        np.add.at(grows, x0, gm * (1.0 - tx_row)[:, None, None, None])
        np.add.at(grows, x1, gm * tx_row[:, None, None, None])
        grows = grows.transpose(3, 1, 2, 0)  # [out_h,B,C,W]
        gx = np.zeros((h, b, c, w), dtype=g.dtype)
        np.add.at(gx, y0, grows * (1.0 - ty)[:, None, None, None].astype(g.dtype))
        np.add.at(gx, y1, grows * ty[:, None, None, None].astype(g.dtype))
        x._accum(gx.transpose(1, 2, 0, 3))

    return _make(np.ascontiguousarray(out), (x,), "bilinear", bw)


def avg_pool2x(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2."""
    x = _as_tensor(x)
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError("avg_pool2x needs even H and W")
    out = x.data.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        gx = np.broadcast_to(g[:, :, :, None, :, None] * 0.25,
                             (b, c, h // 2, 2, w // 2, 2))
        x._accum(gx.reshape(b, c, h, w))

    return _make(out, (x,), "avg_pool2x", bw)


_RESAMPLE_MODES = ("bilinear_down_2x", "bilinear_down_4x", "bilinear_up_2x",
                   "pixel_shuffle_r2", "pixel_unshuffle_r2")


def resample(x: Tensor, mode: str) -> Tensor:
    """Dispatch over the supported rescaling modes."""
    b, c, h, w = x.shape
    if mode == "bilinear_down_2x":
        return bilinear_resize(x, h // 2, w // 2)
    if mode == "bilinear_down_4x":
        return bilinear_resize(x, h // 4, w // 4)
    if mode == "bilinear_up_2x":
        return bilinear_resize(x, 2 * h, 2 * w)
    if mode == "pixel_shuffle_r2":
        return pixel_shuffle_r2(x)
    if mode == "pixel_unshuffle_r2":
        return pixel_unshuffle_r2(x)
    raise ValueError(f"unknown resample mode {mode!r}; expected one of {_RESAMPLE_MODES}")
