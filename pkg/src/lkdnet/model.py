"""Five-stage U-Net assembly, configuration presets, and checkpoint IO.

Stage layout over input H x W (both divisible by 4):
    stem 3x3      3 -> dims[0]           @ H,   W
    stage0        dims[0]                @ H,   W      encoder
    down0 2x2/2   dims[0] -> dims[1]     @ H/2, W/2
    stage1        dims[1]                @ H/2, W/2    encoder
    down1 2x2/2   dims[1] -> dims[2]     @ H/4, W/4
    stage2        dims[2]                @ H/4, W/4    bottleneck
    up1           dims[2] -> dims[3]     @ H/2, W/2
    fuse1         with encoder stage1    @ H/2, W/2
    stage3        dims[3]                @ H/2, W/2    decoder
    up0           dims[3] -> dims[4]     @ H,   W
    fuse0         with encoder stage0    @ H,   W
    stage4        dims[4]                @ H,   W      decoder
    head 3x3      dims[4] -> 4 (soft reconstruction) or 3 (plain residual)

Fusion is selective-kernel: a 1x1 projection on the encoder branch, then a
softmax gate over the two branches from a squeeze MLP. With fusion
disabled the branches are added. Soft reconstruction splits the head into
a gain map K and a bias map B and emits K * I + B; disabled, the head's 3
channels are added to the input.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .blocks import CEFN, DLKCB, Decomposition, FeedForward, LKDBlock
from .layers import (
    Conv2d,
    Linear,
    Module,
    PixelShuffle,
    ReLU,
    Sequential,
    pointwise,
)
from .convolution import ConvSpec
from .tensor import (
    ShapeError,
    Tensor,
    gap,
    read_tensor,
    write_tensor,
)


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


_GATINGS = ("residual", "multiply")
_CEFN_FORMS = ("standard", "literal")


@dataclass(frozen=True)
class LkdConfig:
    """Full architecture description; every field has a JSON-stable value."""

    blocks: tuple = (4, 4, 8, 4, 4)
    dims: tuple = (24, 48, 96, 48, 24)
    mlp_ratio: tuple = (4, 4, 4, 4, 4)
    kernel: int = 21
    dilation: int = 3
    use_dlk: bool = True
    use_cefn: bool = True
    use_sk_fusion: bool = True
    use_soft_recon: bool = True
    lk_kernel: int = 7
    ca_reduction: int = 8
    fusion_reduction: int = 8
    dlkcb_gating: str = "residual"
    cefn_form: str = "standard"
    dlkcb_paired_pointwise: bool = True

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "mlp_ratio", tuple(int(r) for r in self.mlp_ratio))
        for name, tup in (("blocks", self.blocks), ("dims", self.dims), ("mlp_ratio", self.mlp_ratio)):
            if len(tup) != 5:
                raise ConfigError(f"{name} must have 5 entries, got {tup}")
            if min(tup) < 1:
                raise ConfigError(f"{name} entries must be positive, got {tup}")
        if self.dims[0] != self.dims[4] or self.dims[1] != self.dims[3]:
            raise ConfigError(f"dims must be symmetric (d0==d4, d1==d3), got {self.dims}")
        if self.use_dlk:
            Decomposition(self.kernel, self.dilation)
        if self.lk_kernel < 1 or self.lk_kernel % 2 == 0:
            raise ConfigError(f"lk_kernel must be odd, got {self.lk_kernel}")
        if self.ca_reduction < 1 or self.fusion_reduction < 1:
            raise ConfigError("reduction factors must be positive")
        if self.dlkcb_gating not in _GATINGS:
            raise ConfigError(f"dlkcb_gating must be one of {_GATINGS}, got {self.dlkcb_gating!r}")
        if self.cefn_form not in _CEFN_FORMS:
            raise ConfigError(f"cefn_form must be one of {_CEFN_FORMS}, got {self.cefn_form!r}")

    @property
    def decomposition(self) -> Decomposition:
        return Decomposition(self.kernel, self.dilation)

    def to_dict(self) -> dict:
        return {
            "blocks": list(self.blocks),
            "dims": list(self.dims),
            "mlp_ratio": list(self.mlp_ratio),
            "kernel": self.kernel,
            "dilation": self.dilation,
            "use_dlk": self.use_dlk,
            "use_cefn": self.use_cefn,
            "use_sk_fusion": self.use_sk_fusion,
            "use_soft_recon": self.use_soft_recon,
            "lk_kernel": self.lk_kernel,
            "ca_reduction": self.ca_reduction,
            "fusion_reduction": self.fusion_reduction,
            "dlkcb_gating": self.dlkcb_gating,
            "cefn_form": self.cefn_form,
            "dlkcb_paired_pointwise": self.dlkcb_paired_pointwise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LkdConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


VARIANTS = {
    "t": LkdConfig(blocks=(1, 1, 2, 1, 1)),
    "s": LkdConfig(blocks=(2, 2, 4, 2, 2)),
    "b": LkdConfig(blocks=(4, 4, 8, 4, 4)),
    "l": LkdConfig(blocks=(8, 8, 16, 8, 8)),
    "tiny": LkdConfig(blocks=(1, 1, 1, 1, 1), dims=(8, 16, 32, 16, 8), mlp_ratio=(2, 2, 2, 2, 2)),
}

# Ablation ladder: each step enables one more component on the T-scale
# skeleton, with the plain spatial mixer at lk_kernel=7 until the
# decomposed large kernel comes in.
ABLATIONS = {
    "base": dict(use_sk_fusion=False, use_soft_recon=False, use_dlk=False, use_cefn=False),
    "sf": dict(use_sk_fusion=True, use_soft_recon=False, use_dlk=False, use_cefn=False),
    "sf_sr": dict(use_sk_fusion=True, use_soft_recon=True, use_dlk=False, use_cefn=False),
    "sf_sr_dlk": dict(use_sk_fusion=True, use_soft_recon=True, use_dlk=True, use_cefn=False),
    "sf_sr_cefn": dict(use_sk_fusion=True, use_soft_recon=True, use_dlk=False, use_cefn=True),
    "full": dict(use_sk_fusion=True, use_soft_recon=True, use_dlk=True, use_cefn=True),
}


def variant_config(name: str) -> LkdConfig:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}, expected one of {sorted(VARIANTS)}")


def ablation_config(name: str) -> LkdConfig:
    try:
        flags = ABLATIONS[name]
    except KeyError:
        raise ConfigError(f"unknown ablation {name!r}, expected one of {sorted(ABLATIONS)}")
    return replace(VARIANTS["t"], **flags)


class SKFusion(Module):
    """Selective-kernel fusion of two same-shape feature maps.

    A squeeze MLP on GAP(a + b) emits 2C logits, softmaxed across the two
    branches per channel; the output is the weighted sum. Both MLP layers
    are bias-free.
    """

    def __init__(self, ch: int, rng, reduction: int = 8):
        super().__init__()
        self.ch = ch
        hidden = max(ch // reduction, 4)
        self.fc1 = Linear(ch, hidden, rng, has_bias=False)
        self.act = ReLU()
        self.fc2 = Linear(hidden, 2 * ch, rng, has_bias=False)
        self._cache = None

    def forward(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeError(f"fusion branches must match, got {a.shape} and {b.shape}")
        s = a + b
        logits = self.fc2.forward(self.act.forward(self.fc1.forward(gap(s))))
        n = a.shape[0]
        l2 = logits.data.reshape(n, 2, self.ch)
        l2 = l2 - l2.max(axis=1, keepdims=True)
        e = np.exp(l2)
        w = e / e.sum(axis=1, keepdims=True)
        wa = w[:, 0].reshape(n, self.ch, 1, 1)
        wb = w[:, 1].reshape(n, self.ch, 1, 1)
        self._cache = (a.data, b.data, wa, wb, (a.shape[2], a.shape[3]))
        out = a.data * wa + b.data * wb
        return Tensor(out, dtype=a.data.dtype)

    def branch_weights(self) -> tuple:
        """Gate weights (wa, wb) from the last forward; they sum to one."""
        _, _, wa, wb, _ = self._cache
        return wa, wb

    def backward(self, grad_out: Tensor):
        ad, bd, wa, wb, (h, w) = self._cache
        god = grad_out.data
        ga = god * wa
        gb = god * wb
        # Gate gradients: dL/dw_a = sum_hw go * a, likewise for b, then
        # back through the per-channel two-way softmax and the MLP.
        gwa = (god * ad).sum(axis=(2, 3), keepdims=True)
        gwb = (god * bd).sum(axis=(2, 3), keepdims=True)
        n = god.shape[0]
        gw = np.stack([gwa.reshape(n, self.ch), gwb.reshape(n, self.ch)], axis=1)
        wmat = np.stack([wa.reshape(n, self.ch), wb.reshape(n, self.ch)], axis=1)
        glogit = wmat * (gw - (gw * wmat).sum(axis=1, keepdims=True))
        glogits = Tensor(glogit.reshape(n, 2 * self.ch, 1, 1), dtype=god.dtype)
        gpool = self.fc1.backward(self.act.backward(self.fc2.backward(glogits)))
        gs = np.broadcast_to(gpool.data / (h * w), god.shape)
        ga = ga + gs
        gb = gb + gs
        return Tensor(ga, dtype=god.dtype), Tensor(gb, dtype=god.dtype)


class Downsample(Module):
    """Halve the grid with a 2x2 stride-2 conv (non-overlapping patches)."""

    def __init__(self, in_ch: int, out_ch: int, rng):
        super().__init__()
        self.conv = Conv2d(ConvSpec(in_ch, out_ch, 2, stride=2, padding=(0, 0)), rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv.forward(x)

    def backward(self, grad_out: Tensor) -> Tensor:
        return self.conv.backward(grad_out)


class Upsample(Module):
    """Double the grid: 1x1 conv to 4x target channels, then pixel shuffle."""

    def __init__(self, in_ch: int, out_ch: int, rng):
        super().__init__()
        self.conv = pointwise(in_ch, 4 * out_ch, rng)
        self.shuffle = PixelShuffle(2)

    def forward(self, x: Tensor) -> Tensor:
        return self.shuffle.forward(self.conv.forward(x))

    def backward(self, grad_out: Tensor) -> Tensor:
        return self.conv.backward(self.shuffle.backward(grad_out))


class SoftReconstruction(Module):
    """Split the head output into gain and bias: J = K * I + B.

    K is channel 0 broadcast over RGB, B is channels 1:4. The gradient wrt
    the input image is grad_out * K, which is what lets effective
    receptive field probes reach the input.
    """

    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, head_out: Tensor, image: Tensor) -> Tensor:
        if head_out.shape[1] != 4:
            raise ShapeError(f"soft reconstruction expects a 4-channel head, got {head_out.shape}")
        if head_out.shape[0] != image.shape[0] or head_out.shape[2:] != image.shape[2:]:
            raise ShapeError(f"head {head_out.shape} does not match image {image.shape}")
        k = head_out.data[:, :1]
        b = head_out.data[:, 1:]
        self._cache = (k, image.data)
        return Tensor(k * image.data + b, dtype=image.data.dtype)

    def backward(self, grad_out: Tensor):
        k, img = self._cache
        god = grad_out.data
        gk = (god * img).sum(axis=1, keepdims=True)
        ghead = np.concatenate([gk, god], axis=1)
        gimg = god * k
        return Tensor(ghead, dtype=god.dtype), Tensor(gimg, dtype=god.dtype)


def _make_block(cfg: LkdConfig, ch: int, ratio: int, rng) -> LKDBlock:
    spatial_arg = cfg.decomposition if cfg.use_dlk else cfg.lk_kernel
    spatial = DLKCB(
        ch,
        spatial_arg,
        rng,
        gating=cfg.dlkcb_gating,
        paired_pointwise=cfg.dlkcb_paired_pointwise,
    )
    if cfg.use_cefn:
        channel = CEFN(ch, ratio, rng, ca_reduction=cfg.ca_reduction, form=cfg.cefn_form)
    else:
        channel = FeedForward(ch, ratio, rng)
    return LKDBlock(spatial, channel)


class LkdNet(Module):
    """The dehazing network; built deterministically from (config, seed)."""

    def __init__(self, config: LkdConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6B64]))
        d = config.dims
        self.stem = Conv2d(ConvSpec(3, d[0], 3, padding="same"), rng)
        self.stage0 = Sequential(
            [_make_block(config, d[0], config.mlp_ratio[0], rng) for _ in range(config.blocks[0])]
        )
        self.down0 = Downsample(d[0], d[1], rng)
        self.stage1 = Sequential(
            [_make_block(config, d[1], config.mlp_ratio[1], rng) for _ in range(config.blocks[1])]
        )
        self.down1 = Downsample(d[1], d[2], rng)
        self.stage2 = Sequential(
            [_make_block(config, d[2], config.mlp_ratio[2], rng) for _ in range(config.blocks[2])]
        )
        self.up1 = Upsample(d[2], d[3], rng)
        if config.use_sk_fusion:
            self.skip1 = pointwise(d[1], d[3], rng)
            self.fuse1 = SKFusion(d[3], rng, config.fusion_reduction)
        else:
            self.skip1 = None
            self.fuse1 = None
        self.stage3 = Sequential(
            [_make_block(config, d[3], config.mlp_ratio[3], rng) for _ in range(config.blocks[3])]
        )
        self.up0 = Upsample(d[3], d[4], rng)
        if config.use_sk_fusion:
            self.skip0 = pointwise(d[0], d[4], rng)
            self.fuse0 = SKFusion(d[4], rng, config.fusion_reduction)
        else:
            self.skip0 = None
            self.fuse0 = None
        self.stage4 = Sequential(
            [_make_block(config, d[4], config.mlp_ratio[4], rng) for _ in range(config.blocks[4])]
        )
        out_ch = 4 if config.use_soft_recon else 3
        self.head = Conv2d(ConvSpec(d[4], out_ch, 3, padding="same"), rng)
        self.soft = SoftReconstruction() if config.use_soft_recon else None
        self._image = None
        self._taps = {}
        self.finalize_names()

    def _check_input(self, x: Tensor):
        if x.shape[1] != 3:
            raise ShapeError(f"model expects 3 input channels, got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4:
            raise ShapeError(f"input spatial sizes must be divisible by 4, got {x.shape}")

    def _forward_core(self, x: Tensor) -> Tensor:
        """Everything up to the pre-head feature map (stage4 output)."""
        self._check_input(x)
        self._image = x
        e0 = self.stage0.forward(self.stem.forward(x))
        e1 = self.stage1.forward(self.down0.forward(e0))
        z = self.stage2.forward(self.down1.forward(e1))
        self._taps["bottleneck"] = z
        u1 = self.up1.forward(z)
        f1 = self.fuse1.forward(u1, self.skip1.forward(e1)) if self.fuse1 else u1 + e1
        d3 = self.stage3.forward(f1)
        u0 = self.up0.forward(d3)
        f0 = self.fuse0.forward(u0, self.skip0.forward(e0)) if self.fuse0 else u0 + e0
        d4 = self.stage4.forward(f0)
        self._taps["output"] = d4
        return d4

    def forward(self, x: Tensor) -> Tensor:
        d4 = self._forward_core(x)
        h = self.head.forward(d4)
        out = self.soft.forward(h, x) if self.soft else h + x
        if not self.training:
            out = Tensor(np.clip(out.data, 0.0, 1.0), dtype=out.data.dtype)
        return out

    def backward(self, grad_out: Tensor) -> Tensor:
        """Full reverse pass; valid after a train-mode forward (no clamp)."""
        if self.training:
            if self.soft:
                ghead, gimg_extra = self.soft.backward(grad_out)
            else:
                ghead, gimg_extra = grad_out, grad_out
        else:
            raise ValueError("backward after an eval-mode forward would ignore the output clamp")
        gd4 = self.head.backward(ghead)
        gimg = self._backward_from_prehead(gd4)
        return gimg + gimg_extra

    def _backward_from_prehead(self, gd4: Tensor) -> Tensor:
        gf0 = self.stage4.backward(gd4)
        if self.fuse0:
            gu0, gs0 = self.fuse0.backward(gf0)
            ge0_skip = self.skip0.backward(gs0)
        else:
            gu0, ge0_skip = gf0, gf0
        gd3 = self.up0.backward(gu0)
        gf1 = self.stage3.backward(gd3)
        if self.fuse1:
            gu1, gs1 = self.fuse1.backward(gf1)
            ge1_skip = self.skip1.backward(gs1)
        else:
            gu1, ge1_skip = gf1, gf1
        gz = self.up1.backward(gu1)
        return self._backward_from_bottleneck(gz, ge0_skip, ge1_skip)

    def _backward_from_bottleneck(self, gz: Tensor, ge0_extra=None, ge1_extra=None) -> Tensor:
        ge1 = self.down1.backward(self.stage2.backward(gz))
        if ge1_extra is not None:
            ge1 = ge1 + ge1_extra
        ge0 = self.down0.backward(self.stage1.backward(ge1))
        if ge0_extra is not None:
            ge0 = ge0 + ge0_extra
        return self.stem.backward(self.stage0.backward(ge0))

    def input_gradient_from_tap(self, x: Tensor, tap: str = "output") -> Tensor:
        """Gradient of the tap feature's center pixel (summed over channels)
        wrt the input image. Runs in the model's current mode; the clamp is
        never crossed because both taps sit before the head."""
        if tap not in ("output", "bottleneck"):
            raise ValueError(f"unknown tap {tap!r}, expected 'output' or 'bottleneck'")
        feat = self._forward_core(x)
        if tap == "bottleneck":
            feat = self._taps["bottleneck"]
        n, c, h, w = feat.shape
        seed = Tensor.zeros((n, c, h, w), dtype=feat.data.dtype)
        seed.data[:, :, h // 2, w // 2] = 1.0
        if tap == "output":
            gx = self._backward_from_prehead(seed)
        else:
            gx = self._backward_from_bottleneck(seed)
        # The synthetic objective is not a training signal; do not let its
        # parameter gradients leak into a subsequent optimizer step.
        self.zero_grad()
        return gx

    # --- cost model -------------------------------------------------------

    def iter_cost_nodes(self, h: int, w: int):
        """Yield (path, layer, (h_in, w_in)) for every conv and linear.

        The resolution walk mirrors forward exactly; analysis code turns
        these into parameter and MAC counts without running data through
        the network.
        """
        if h % 4 or w % 4:
            raise ShapeError(f"cost walk needs spatial sizes divisible by 4, got {(h, w)}")

        def visit(prefix, module, res):
            if isinstance(module, (Conv2d, Linear)):
                yield (prefix, module, res)
                return
            for name, child in module._children.items():
                yield from visit(f"{prefix}.{name}" if prefix else name, child, res)

        res_full, res_half, res_quarter = (h, w), (h // 2, w // 2), (h // 4, w // 4)
        yield from visit("stem", self.stem, res_full)
        yield from visit("stage0", self.stage0, res_full)
        yield from visit("down0", self.down0, res_full)
        yield from visit("stage1", self.stage1, res_half)
        yield from visit("down1", self.down1, res_half)
        yield from visit("stage2", self.stage2, res_quarter)
        yield from visit("up1", self.up1, res_quarter)
        if self.fuse1:
            yield from visit("skip1", self.skip1, res_half)
            yield from visit("fuse1", self.fuse1, res_half)
        yield from visit("stage3", self.stage3, res_half)
        yield from visit("up0", self.up0, res_half)
        if self.fuse0:
            yield from visit("skip0", self.skip0, res_full)
            yield from visit("fuse0", self.fuse0, res_full)
        yield from visit("stage4", self.stage4, res_full)
        yield from visit("head", self.head, res_full)

    # --- checkpoint IO ----------------------------------------------------

    _CKPT_MAGIC = b"LKDNET 1\n"

    def state_items(self):
        """(name, Tensor) pairs: parameters then buffers, fixed order."""
        for name, p in self.named_parameters():
            yield (name, p.value)
        for name, arr in self.named_buffers():
            yield (name, Tensor(arr.reshape(1, arr.size, 1, 1), dtype=arr.dtype))

    def save(self, path_or_file) -> None:
        if hasattr(path_or_file, "write"):
            self._save_to(path_or_file)
        else:
            with open(path_or_file, "wb") as f:
                self._save_to(f)

    def _save_to(self, f) -> None:
        items = list(self.state_items())
        f.write(self._CKPT_MAGIC)
        header = {"config": self.config.to_dict(), "seed": self.seed, "tensors": len(items)}
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for name, t in items:
            f.write(name.encode() + b"\n")
            write_tensor(f, t)

    @classmethod
    def load(cls, path_or_file) -> "LkdNet":
        if hasattr(path_or_file, "read"):
            return cls._load_from(path_or_file)
        with open(path_or_file, "rb") as f:
            return cls._load_from(f)

    @classmethod
    def _load_from(cls, f) -> "LkdNet":
        magic = f.readline()
        if magic != cls._CKPT_MAGIC:
            raise ValueError(f"not a checkpoint: bad magic {magic!r}")
        header = json.loads(f.readline().decode())
        model = cls(LkdConfig.from_dict(header["config"]), seed=header.get("seed", 0))
        params = dict(model.named_parameters())
        buffer_owners = {}
        for mod_path, mod in model.modules():
            for bname, _ in mod.buffers():
                full = f"{mod_path}.{bname}" if mod_path else bname
                buffer_owners[full] = (mod, bname)
        seen = set()
        for _ in range(header["tensors"]):
            name = f.readline().decode().rstrip("\n")
            t = read_tensor(f)
            if name in params:
                p = params[name]
                if p.value.shape != t.shape:
                    raise ShapeError(f"checkpoint tensor {name} shape {t.shape} != {p.value.shape}")
                p.value.data[...] = t.data.astype(p.value.data.dtype)
            elif name in buffer_owners:
                mod, bname = buffer_owners[name]
                mod.set_buffer(bname, t.data.reshape(-1))
            else:
                raise ValueError(f"checkpoint tensor {name} does not exist in the model")
            seen.add(name)
        missing = (set(params) | set(buffer_owners)) - seen
        if missing:
            raise ValueError(f"checkpoint is missing tensors: {sorted(missing)[:5]}")
        return model

    def snapshot(self) -> bytes:
        buf = io.BytesIO()
        self.save(buf)
        return buf.getvalue()

    @classmethod
    def from_snapshot(cls, blob: bytes) -> "LkdNet":
        return cls.load(io.BytesIO(blob))
