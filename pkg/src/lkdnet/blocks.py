"""Network blocks: large-kernel spatial mixing and channel-enhanced feed-forward.

The residual block is
    x + scale * branch(BN(x))
where branch is either the decomposed large-kernel stack (1x1 in, small
depth-wise, dilated depth-wise, 1x1 out) or its ablation variants, and the
channel mixer is either the channel-enhanced feed-forward (inverted
bottleneck modulated by channel attention) or a plain feed-forward.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .layers import (
    GELU,
    BatchNorm2d,
    Linear,
    Module,
    ReLU,
    Scale,
    Sigmoid,
    depthwise,
    pointwise,
)
from .tensor import Tensor, gap


@dataclass(frozen=True)
class Decomposition:
    """Factorization of a K x K depth-wise kernel into two depth-wise legs.

    The small leg has kernel (2d - 1); the dilated leg has kernel
    ceil(K / d) at dilation d. Their composition spans at least K.
    """

    kernel: int = 21
    dilation: int = 3

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"target kernel must be odd and positive, got {self.kernel}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.composed_extent < self.kernel:
            raise ValueError(
                f"decomposition ({self.kernel}, {self.dilation}) spans only "
                f"{self.composed_extent}, less than the target kernel"
            )

    @property
    def k_small(self) -> int:
        return 2 * self.dilation - 1

    @property
    def k_dilated(self) -> int:
        return math.ceil(self.kernel / self.dilation)

    @property
    def composed_extent(self) -> int:
        """Span of the two legs composed: k_small + d * (k_dilated - 1)."""
        return self.k_small + self.dilation * (self.k_dilated - 1)


class ChannelAttention(Module):
    """Squeeze-excite gate: sigmoid(W2 relu(W1 GAP(x))) as [N, C, 1, 1]."""

    def __init__(self, ch: int, reduction: int = 8, rng=None):
        super().__init__()
        hidden = max(ch // reduction, 1)
        self.fc1 = Linear(ch, hidden, rng)
        self.act = ReLU()
        self.fc2 = Linear(hidden, ch, rng)
        self.gate = Sigmoid()
        self._hw = None

    def forward(self, x: Tensor) -> Tensor:
        self._hw = (x.shape[2], x.shape[3])
        p = gap(x)
        return self.gate.forward(self.fc2.forward(self.act.forward(self.fc1.forward(p))))

    def backward(self, grad_out: Tensor) -> Tensor:
        gp = self.fc1.backward(self.act.backward(self.fc2.backward(self.gate.backward(grad_out))))
        h, w = self._hw
        n, c = gp.shape[0], gp.shape[1]
        g = np.broadcast_to(gp.data / (h * w), (n, c, h, w))
        return Tensor(np.ascontiguousarray(g), dtype=gp.data.dtype)


class DLKCB(Module):
    """Residual spatial-mixing block around a (decomposed) large kernel.

    spatial selects the receptive field: a Decomposition runs the two-leg
    depth-wise stack, an int runs a single depth-wise conv of that kernel.
    gating "residual" adds the scaled branch to x; "multiply" modulates x
    by the branch before the residual add. paired_pointwise toggles the
    1x1 conv in front of the depth-wise stack.
    """

    def __init__(
        self,
        ch: int,
        spatial,
        rng,
        gating: str = "residual",
        paired_pointwise: bool = True,
    ):
        super().__init__()
        if gating not in ("residual", "multiply"):
            raise ValueError(f"unknown gating {gating!r}")
        self.gating = gating
        self.norm = BatchNorm2d(ch)
        self.pw_in = pointwise(ch, ch, rng) if paired_pointwise else None
        if isinstance(spatial, Decomposition):
            self.dw_small = depthwise(ch, spatial.k_small, rng)
            self.dw_dilated = depthwise(ch, spatial.k_dilated, rng, dilation=spatial.dilation)
        else:
            k = int(spatial)
            if k < 1 or k % 2 == 0:
                raise ValueError(f"plain spatial kernel must be odd, got {k}")
            self.dw_small = depthwise(ch, k, rng)
            self.dw_dilated = None
        self.pw_out = pointwise(ch, ch, rng)
        self.scale = Scale(ch)
        self._cache = None

    def forward(self, x: Tensor) -> Tensor:
        z = self.norm.forward(x)
        t = self.pw_in.forward(z) if self.pw_in is not None else z
        t = self.dw_small.forward(t)
        if self.dw_dilated is not None:
            t = self.dw_dilated.forward(t)
        t = self.pw_out.forward(t)
        if self.gating == "multiply":
            self._cache = (x.data, t.data)
            branch = Tensor(t.data * x.data, dtype=x.data.dtype)
        else:
            self._cache = None
            branch = t
        return x + self.scale.forward(branch)

    def backward(self, grad_out: Tensor) -> Tensor:
        gbranch = self.scale.backward(grad_out)
        gx_extra = None
        if self.gating == "multiply":
            xd, td = self._cache
            gx_extra = gbranch.data * td
            gt = Tensor(gbranch.data * xd, dtype=gbranch.data.dtype)
        else:
            gt = gbranch
        gt = self.pw_out.backward(gt)
        if self.dw_dilated is not None:
            gt = self.dw_dilated.backward(gt)
        gt = self.dw_small.backward(gt)
        if self.pw_in is not None:
            gt = self.pw_in.backward(gt)
        gx = grad_out.data + self.norm.backward(gt).data
        if gx_extra is not None:
            gx = gx + gx_extra
        return Tensor(gx, dtype=grad_out.data.dtype)


class FeedForward(Module):
    """Plain channel mixer: x + scale * reduce(relu(expand(BN(x))))."""

    def __init__(self, ch: int, ratio: int, rng):
        super().__init__()
        hidden = ch * ratio
        self.norm = BatchNorm2d(ch)
        self.expand = pointwise(ch, hidden, rng)
        self.act = ReLU()
        self.reduce = pointwise(hidden, ch, rng)
        self.scale = Scale(ch)

    def forward(self, x: Tensor) -> Tensor:
        z = self.norm.forward(x)
        f = self.reduce.forward(self.act.forward(self.expand.forward(z)))
        return x + self.scale.forward(f)

    def backward(self, grad_out: Tensor) -> Tensor:
        gf = self.scale.backward(grad_out)
        gz = self.expand.backward(self.act.backward(self.reduce.backward(gf)))
        return grad_out + self.norm.backward(gz)


class CEFN(Module):
    """Channel-enhanced feed-forward block.

    The feed-forward path expands 1x1 to ratio * C, mixes locally with a
    3x3 depth-wise conv, applies GELU, and reduces 1x1 back to C. A
    channel-attention gate computed from the same normalized input
    modulates the result per channel.

    form "standard" (default) is pre-norm:
        y = x + scale * BN_out(FN(BN_in(x)) * CA(BN_in(x)))
    form "literal" keeps the printed nesting, with both norms stacked on
    the gated product and the scale inside:
        y = x + BN_out(BN_in(FN(x) * CA(x) * scale))
    """

    def __init__(self, ch: int, ratio: int, rng, ca_reduction: int = 8, form: str = "standard"):
        super().__init__()
        if form not in ("standard", "literal"):
            raise ValueError(f"unknown cefn form {form!r}")
        self.form = form
        hidden = ch * ratio
        self.norm_in = BatchNorm2d(ch)
        self.expand = pointwise(ch, hidden, rng)
        self.dw = depthwise(hidden, 3, rng)
        self.act = GELU()
        self.reduce = pointwise(hidden, ch, rng)
        self.attn = ChannelAttention(ch, ca_reduction, rng)
        self.norm_out = BatchNorm2d(ch)
        self.scale = Scale(ch)
        self._cache = None

    def _fn(self, z: Tensor) -> Tensor:
        return self.reduce.forward(self.act.forward(self.dw.forward(self.expand.forward(z))))

    def _fn_backward(self, gf: Tensor) -> Tensor:
        return self.expand.backward(self.dw.backward(self.act.backward(self.reduce.backward(gf))))

    def forward(self, x: Tensor) -> Tensor:
        if self.form == "standard":
            z = self.norm_in.forward(x)
            f = self._fn(z)
            a = self.attn.forward(z)
            self._cache = (f.data, a.data)
            m = f * a
            return x + self.scale.forward(self.norm_out.forward(m))
        f = self._fn(x)
        a = self.attn.forward(x)
        self._cache = (f.data, a.data)
        m = self.scale.forward(f * a)
        return x + self.norm_out.forward(self.norm_in.forward(m))

    def backward(self, grad_out: Tensor) -> Tensor:
        fd, ad = self._cache
        if self.form == "standard":
            gm = self.norm_out.backward(self.scale.backward(grad_out))
            gf = Tensor(gm.data * ad, dtype=gm.data.dtype)
            ga = Tensor((gm.data * fd).sum(axis=(2, 3), keepdims=True), dtype=gm.data.dtype)
            gz = self._fn_backward(gf) + self.attn.backward(ga)
            return grad_out + self.norm_in.backward(gz)
        gm = self.scale.backward(self.norm_in.backward(self.norm_out.backward(grad_out)))
        gf = Tensor(gm.data * ad, dtype=gm.data.dtype)
        ga = Tensor((gm.data * fd).sum(axis=(2, 3), keepdims=True), dtype=gm.data.dtype)
        gx = grad_out.data + self._fn_backward(gf).data + self.attn.backward(ga).data
        return Tensor(gx, dtype=grad_out.data.dtype)


class LKDBlock(Module):
    """Spatial mixer followed by channel mixer, each its own residual."""

    def __init__(self, spatial: Module, channel: Module):
        super().__init__()
        self.spatial = spatial
        self.channel = channel

    def forward(self, x: Tensor) -> Tensor:
        return self.channel.forward(self.spatial.forward(x))

    def backward(self, grad_out: Tensor) -> Tensor:
        return self.spatial.backward(self.channel.backward(grad_out))
