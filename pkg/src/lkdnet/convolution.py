"""2-D convolution: spec, forward, backward, and a naive reference.

Three execution strategies, picked from the spec:
  * depth-wise: shift-and-accumulate over kernel taps. Accumulation order
    is (ky, kx) row-major, identical to the reference loop nest, so the
    depth-wise path is bitwise equal to the reference in either dtype.
  * 1x1 stride-1: a single matmul over flattened pixels.
  * dense / grouped: im2col + matmul per group.
The matmul paths delegate accumulation to BLAS, whose summation order is
not the reference loop order; they agree with the reference to tight
tolerance but not bit-for-bit.

Weights are [out_ch, in_ch // groups, kh, kw]; bias is [1, out_ch, 1, 1].
Padding is zero-fill; "same" resolves to extent // 2 per side and needs an
odd effective extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor


def _pair(v):
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return (int(v[0]), int(v[1]))
    return (int(v), int(v))


@dataclass(frozen=True)
class ConvSpec:
    """Static description of a conv layer; validated on construction."""

    in_ch: int
    out_ch: int
    kernel: tuple
    stride: tuple = (1, 1)
    dilation: tuple = (1, 1)
    groups: int = 1
    padding: object = "same"
    has_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "dilation", _pair(self.dilation))
        if self.in_ch < 1 or self.out_ch < 1:
            raise ValueError(f"channel counts must be positive, got {self.in_ch}, {self.out_ch}")
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.dilation) < 1:
            raise ValueError(
                f"kernel/stride/dilation must be positive, got "
                f"{self.kernel}/{self.stride}/{self.dilation}"
            )
        if self.groups < 1 or self.in_ch % self.groups or self.out_ch % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_ch={self.in_ch} and out_ch={self.out_ch}"
            )
        if self.padding == "same":
            eh, ew = self.extent
            if eh % 2 == 0 or ew % 2 == 0:
                raise ValueError(f"'same' padding needs odd extents, got {self.extent}")
            object.__setattr__(self, "padding", (eh // 2, ew // 2))
        else:
            object.__setattr__(self, "padding", _pair(self.padding))
            if min(self.padding) < 0:
                raise ValueError(f"padding must be non-negative, got {self.padding}")

    @property
    def extent(self) -> tuple:
        """Span of the dilated kernel: dilation * (k - 1) + 1 per axis."""
        return (
            self.dilation[0] * (self.kernel[0] - 1) + 1,
            self.dilation[1] * (self.kernel[1] - 1) + 1,
        )

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_ch == self.out_ch

    @property
    def weight_shape(self) -> tuple:
        return (self.out_ch, self.in_ch // self.groups, *self.kernel)

    def out_size(self, h: int, w: int) -> tuple:
        eh, ew = self.extent
        ph, pw = self.padding
        oh = (h + 2 * ph - eh) // self.stride[0] + 1
        ow = (w + 2 * pw - ew) // self.stride[1] + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv input {h}x{w} too small for extent {self.extent} pad {self.padding}")
        return (oh, ow)

    def param_count(self) -> int:
        n = self.out_ch * (self.in_ch // self.groups) * self.kernel[0] * self.kernel[1]
        if self.has_bias:
            n += self.out_ch
        return n

    def macs(self, h: int, w: int) -> int:
        """Multiply-accumulates for one sample at input h x w; bias excluded."""
        oh, ow = self.out_size(h, w)
        return oh * ow * self.out_ch * (self.in_ch // self.groups) * self.kernel[0] * self.kernel[1]


def _check_operands(x: Tensor, spec: ConvSpec, weight: Tensor, bias):
    if x.shape[1] != spec.in_ch:
        raise ShapeError(f"conv expects {spec.in_ch} input channels, got tensor shape {x.shape}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"conv weight shape {weight.shape} does not match spec {spec.weight_shape}")
    if spec.has_bias:
        if bias is None or bias.shape != (1, spec.out_ch, 1, 1):
            raise ShapeError(
                f"conv bias shape {(None if bias is None else bias.shape)} "
                f"must be {(1, spec.out_ch, 1, 1)}"
            )
    elif bias is not None:
        raise ShapeError("conv spec has no bias but one was supplied")


def _padded(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    ph, pw = spec.padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _tap_slice(spec: ConvSpec, ky: int, kx: int, oh: int, ow: int) -> tuple:
    """Padded-input window feeding output tap (ky, kx), stride applied."""
    sh, sw = spec.stride
    dh, dw = spec.dilation
    y0, x0 = ky * dh, kx * dw
    return (
        slice(y0, y0 + sh * (oh - 1) + 1, sh),
        slice(x0, x0 + sw * (ow - 1) + 1, sw),
    )


def _depthwise_forward(x: np.ndarray, spec: ConvSpec, w: np.ndarray) -> np.ndarray:
    n, c, h, wd = x.shape
    oh, ow = spec.out_size(h, wd)
    xp = _padded(x, spec)
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    kh, kw = spec.kernel
    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _tap_slice(spec, ky, kx, oh, ow)
            out += w[:, 0, ky, kx].reshape(1, c, 1, 1) * xp[:, :, sy, sx]
    return out


def _depthwise_backward(x: np.ndarray, spec: ConvSpec, w: np.ndarray, go: np.ndarray):
    n, c, h, wd = x.shape
    oh, ow = go.shape[2], go.shape[3]
    xp = _padded(x, spec)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    kh, kw = spec.kernel
    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _tap_slice(spec, ky, kx, oh, ow)
            patch = xp[:, :, sy, sx]
            gxp[:, :, sy, sx] += w[:, 0, ky, kx].reshape(1, c, 1, 1) * go
            gw[:, 0, ky, kx] = np.einsum("nchw,nchw->c", go, patch, optimize=True)
    ph, pw = spec.padding
    gx = gxp[:, :, ph : ph + h, pw : pw + wd]
    return np.ascontiguousarray(gx), gw


def _im2col(xp: np.ndarray, spec: ConvSpec, oh: int, ow: int) -> np.ndarray:
    """[N, C, Hp, Wp] -> [N, C * kh * kw, oh * ow] patch matrix."""
    n, c = xp.shape[0], xp.shape[1]
    kh, kw = spec.kernel
    col = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _tap_slice(spec, ky, kx, oh, ow)
            col[:, :, ky, kx] = xp[:, :, sy, sx]
    return col.reshape(n, c * kh * kw, oh * ow)


def _col2im(gcol: np.ndarray, spec: ConvSpec, xp_shape, oh: int, ow: int) -> np.ndarray:
    n, c = xp_shape[0], xp_shape[1]
    kh, kw = spec.kernel
    g6 = gcol.reshape(n, c, kh, kw, oh, ow)
    gxp = np.zeros(xp_shape, dtype=gcol.dtype)
    for ky in range(kh):
        for kx in range(kw):
            sy, sx = _tap_slice(spec, ky, kx, oh, ow)
            gxp[:, :, sy, sx] += g6[:, :, ky, kx]
    return gxp


def _dense_forward(x: np.ndarray, spec: ConvSpec, w: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    oh, ow = spec.out_size(h, wd)
    if spec.kernel == (1, 1) and spec.stride == (1, 1) and spec.padding == (0, 0):
        xr = x.reshape(n, spec.in_ch, h * wd)
        out = np.matmul(w.reshape(spec.out_ch, spec.in_ch)[None], xr)
        return out.reshape(n, spec.out_ch, h, wd)
    xp = _padded(x, spec)
    col = _im2col(xp, spec, oh, ow)
    w2 = w.reshape(spec.out_ch, -1)
    out = np.matmul(w2[None], col)
    return out.reshape(n, spec.out_ch, oh, ow)


def _dense_backward(x: np.ndarray, spec: ConvSpec, w: np.ndarray, go: np.ndarray):
    n, _, h, wd = x.shape
    oh, ow = go.shape[2], go.shape[3]
    gom = go.reshape(n, spec.out_ch, oh * ow)
    if spec.kernel == (1, 1) and spec.stride == (1, 1) and spec.padding == (0, 0):
        w2 = w.reshape(spec.out_ch, spec.in_ch)
        xr = x.reshape(n, spec.in_ch, h * wd)
        gw = np.einsum("nop,ncp->oc", gom, xr, optimize=True).reshape(w.shape)
        gx = np.matmul(w2.T[None], gom).reshape(x.shape)
        return np.ascontiguousarray(gx), gw
    xp = _padded(x, spec)
    col = _im2col(xp, spec, oh, ow)
    w2 = w.reshape(spec.out_ch, -1)
    gw = np.einsum("nop,nfp->of", gom, col, optimize=True).reshape(w.shape)
    gcol = np.matmul(w2.T[None], gom)
    gxp = _col2im(gcol, spec, xp.shape, oh, ow)
    ph, pw = spec.padding
    gx = gxp[:, :, ph : ph + h, pw : pw + wd]
    return np.ascontiguousarray(gx), gw


def conv2d_forward(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor = None) -> Tensor:
    """Run the conv with the strategy the spec selects."""
    _check_operands(x, spec, weight, bias)
    xd, wd = x.data, weight.data
    if spec.is_depthwise:
        out = _depthwise_forward(xd, spec, wd)
    elif spec.groups == 1:
        out = _dense_forward(xd, spec, wd)
    else:
        cg_in = spec.in_ch // spec.groups
        cg_out = spec.out_ch // spec.groups
        sub = ConvSpec(
            cg_in, cg_out, spec.kernel, spec.stride, spec.dilation, 1, spec.padding, False
        )
        parts = []
        for g in range(spec.groups):
            parts.append(
                _dense_forward(
                    np.ascontiguousarray(xd[:, g * cg_in : (g + 1) * cg_in]),
                    sub,
                    wd[g * cg_out : (g + 1) * cg_out],
                )
            )
        out = np.concatenate(parts, axis=1)
    if bias is not None:
        out = out + bias.data
    return Tensor(out, dtype=xd.dtype)


def conv2d_backward(x: Tensor, spec: ConvSpec, weight: Tensor, grad_out: Tensor):
    """Gradients wrt input, weight, and bias (None when the spec has none)."""
    _check_operands(x, spec, weight, None if not spec.has_bias else Tensor.zeros((1, spec.out_ch, 1, 1), dtype=x.data.dtype))
    oh, ow = spec.out_size(x.shape[2], x.shape[3])
    if grad_out.shape != (x.shape[0], spec.out_ch, oh, ow):
        raise ShapeError(
            f"conv grad_out shape {grad_out.shape} does not match output "
            f"{(x.shape[0], spec.out_ch, oh, ow)}"
        )
    xd, wd, god = x.data, weight.data, grad_out.data
    if spec.is_depthwise:
        gx, gw = _depthwise_backward(xd, spec, wd, god)
    elif spec.groups == 1:
        gx, gw = _dense_backward(xd, spec, wd, god)
    else:
        cg_in = spec.in_ch // spec.groups
        cg_out = spec.out_ch // spec.groups
        sub = ConvSpec(
            cg_in, cg_out, spec.kernel, spec.stride, spec.dilation, 1, spec.padding, False
        )
        gx = np.empty_like(xd)
        gw = np.empty_like(wd)
        for g in range(spec.groups):
            gxg, gwg = _dense_backward(
                np.ascontiguousarray(xd[:, g * cg_in : (g + 1) * cg_in]),
                sub,
                wd[g * cg_out : (g + 1) * cg_out],
                np.ascontiguousarray(god[:, g * cg_out : (g + 1) * cg_out]),
            )
            gx[:, g * cg_in : (g + 1) * cg_in] = gxg
            gw[g * cg_out : (g + 1) * cg_out] = gwg
    gb = None
    if spec.has_bias:
        gb = Tensor(god.sum(axis=(0, 2, 3)).reshape(1, spec.out_ch, 1, 1), dtype=xd.dtype)
    return Tensor(gx, dtype=xd.dtype), Tensor(gw, dtype=xd.dtype), gb


def conv2d_reference(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor = None) -> Tensor:
    """Naive loop-nest conv; the correctness anchor for the fast paths.

    Accumulation runs ci -> ky -> kx with every intermediate rounded to the
    working dtype, which is the order the depth-wise fast path reproduces
    exactly.
    """
    _check_operands(x, spec, weight, bias)
    dt = x.data.dtype.type
    n, _, h, wdim = x.shape
    oh, ow = spec.out_size(h, wdim)
    sh, sw = spec.stride
    dh, dw = spec.dilation
    ph, pw = spec.padding
    cg_in = spec.in_ch // spec.groups
    cg_out = spec.out_ch // spec.groups
    xd, wd = x.data, weight.data
    out = np.zeros((n, spec.out_ch, oh, ow), dtype=x.data.dtype)
    for ni in range(n):
        for co in range(spec.out_ch):
            g = co // cg_out
            for oy in range(oh):
                for ox in range(ow):
                    acc = dt(0)
                    for ci in range(cg_in):
                        xin = g * cg_in + ci
                        for ky in range(spec.kernel[0]):
                            iy = oy * sh + ky * dh - ph
                            if iy < 0 or iy >= h:
                                continue
                            for kx in range(spec.kernel[1]):
                                ix = ox * sw + kx * dw - pw
                                if ix < 0 or ix >= wdim:
                                    continue
                                acc = dt(acc + dt(wd[co, ci, ky, kx] * xd[ni, xin, iy, ix]))
                    if bias is not None:
                        acc = dt(acc + bias.data[0, co, 0, 0])
                    out[ni, co, oy, ox] = acc
    return Tensor(out, dtype=x.data.dtype)
