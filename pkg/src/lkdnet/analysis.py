"""Cost model and structural analysis: parameter/MAC counters, the
published parameter formula, and the decomposition footprint oracle.

The published per-block parameter formula is

    P(K, d) = C * (ceil(K / d)^2 * C + (2d - 1)^2)            (as printed)

while the exact bias-free weight count of the two depth-wise legs plus
one pointwise conv is C * ceil(K/d)^2 + C * (2d - 1)^2 + C^2. The two
disagree (the printed formula squares C on the dilated leg instead of the
pointwise term); reports show both values side by side without
reconciling them.

MAC counting covers convs and linears only (bias, norm, activation, and
elementwise work excluded). Reports carry both `macs` and `flops_2x =
2 * macs`; the convention that matches the published cost table is MACs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .blocks import Decomposition
from .convolution import ConvSpec, conv2d_forward
from .layers import Conv2d
from .model import LkdNet
from .tensor import Tensor


def eval_eq3(kernel: int, dilation: int, ch: int) -> int:
    """The printed per-block parameter formula P(K, d)."""
    return ch * (math.ceil(kernel / dilation) ** 2 * ch + (2 * dilation - 1) ** 2)


def eval_eq4(kernel: int, dilation: int, ch: int, h: int, w: int) -> int:
    """The printed FLOPs formula: P(K, d) * H * W."""
    return eval_eq3(kernel, dilation, ch) * h * w


def exact_decomposed_params(kernel: int, dilation: int, ch: int) -> dict:
    """Bias-free weight counts of the decomposition stack (legs + 1x1)."""
    d = Decomposition(kernel, dilation)
    legs = ch * d.k_small ** 2 + ch * d.k_dilated ** 2
    return {
        "small_leg": ch * d.k_small ** 2,
        "dilated_leg": ch * d.k_dilated ** 2,
        "pointwise": ch * ch,
        "legs": legs,
        "total": legs + ch * ch,
    }


def direct_params(kernel: int, ch: int) -> int:
    """Bias-free weights of one K x K depth-wise conv."""
    return ch * kernel ** 2


def compare_direct_vs_decomposed(kernels, dilation: int, ch: int) -> list:
    """Rows of {K, d, C, direct, decomposed legs/total, eq3} per kernel."""
    rows = []
    for k in kernels:
        ex = exact_decomposed_params(k, dilation, ch)
        rows.append(
            {
                "K": int(k),
                "d": int(dilation),
                "C": int(ch),
                "direct_dw": direct_params(k, ch),
                "decomposed_legs": ex["legs"],
                "decomposed_total": ex["total"],
                "eq3": eval_eq3(k, dilation, ch),
            }
        )
    return rows


COMPARE_HEADER = "K,d,C,direct_dw,decomposed_legs,decomposed_total,eq3"


def compare_rows_to_csv(rows) -> str:
    lines = [COMPARE_HEADER]
    for r in rows:
        lines.append(
            f"{r['K']},{r['d']},{r['C']},{r['direct_dw']},"
            f"{r['decomposed_legs']},{r['decomposed_total']},{r['eq3']}"
        )
    return "\n".join(lines) + "\n"


@dataclass
class CostRow:
    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    """Per-layer cost rows plus totals and formula cross-reference notes."""

    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    h: int = 0
    w: int = 0
    convention: str = "macs"

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_csv(self) -> str:
        lines = ["name,params,macs,flops_2x"]
        for r in self.rows:
            lines.append(f"{r.name},{r.params},{r.macs},{2 * r.macs}")
        lines.append(f"TOTAL,{self.total_params},{self.total_macs},{2 * self.total_macs}")
        for note in self.notes:
            lines.append(f"# {note}")
        return "\n".join(lines) + "\n"


def _formula_notes(model: LkdNet) -> list:
    cfg = model.config
    if not cfg.use_dlk:
        return []
    notes = []
    for ch in sorted(set(cfg.dims)):
        eq3 = eval_eq3(cfg.kernel, cfg.dilation, ch)
        exact = exact_decomposed_params(cfg.kernel, cfg.dilation, ch)["total"]
        notes.append(
            f"formula check C={ch}: printed P({cfg.kernel},{cfg.dilation})={eq3}, "
            f"exact decomposed (legs + pointwise, bias-free)={exact}; "
            "values differ by construction and are reported unreconciled"
        )
    return notes


def count_params(model: LkdNet) -> CostReport:
    """Exact trainable parameter count per layer path."""
    report = CostReport(notes=_formula_notes(model))
    for path, mod in model.modules():
        own = sum(p.value.size for p in mod._params.values())
        if own:
            report.rows.append(CostRow(path or "<root>", own, 0))
    return report


def count_flops(model: LkdNet, h: int = 256, w: int = 256) -> CostReport:
    """Static MAC walk at input h x w.

    MACs come from convs and linears only; parameter-only layers (norm
    affines, residual scales) are appended with zero MACs so the totals
    row carries the exact trainable parameter count.
    """
    report = CostReport(notes=_formula_notes(model), h=h, w=w)
    counted = set()
    for path, layer, (hin, win) in model.iter_cost_nodes(h, w):
        counted.add(id(layer))
        if isinstance(layer, Conv2d):
            params = layer.spec.param_count()
            macs = layer.spec.macs(hin, win)
        else:
            params = layer.param_count()
            macs = layer.in_features * layer.out_features
        report.rows.append(CostRow(path, params, macs))
    for path, mod in model.modules():
        if id(mod) in counted:
            continue
        own = sum(p.value.size for p in mod._params.values())
        if own:
            report.rows.append(CostRow(path or "<root>", own, 0))
    return report


@dataclass
class Footprint:
    """Support of the composed decomposition within its bounding box."""

    kernel: int
    dilation: int
    offsets: frozenset
    extent: int
    holes: int
    covers_target: bool

    def report_text(self) -> str:
        d = Decomposition(self.kernel, self.dilation)
        return (
            f"legs {d.k_small}x{d.k_small} + {d.k_dilated}x{d.k_dilated}(d={d.dilation}), "
            f"extent {self.extent}, holes {self.holes}, "
            f"covers {self.kernel}: {'yes' if self.covers_target else 'no'}"
        )


def footprint(decomp: Decomposition) -> Footprint:
    """Minkowski sum of the two legs' tap offsets, centered at zero."""
    rs = decomp.k_small // 2
    rd = decomp.k_dilated // 2
    offsets = set()
    for ay in range(-rs, rs + 1):
        for ax in range(-rs, rs + 1):
            for by in range(-rd, rd + 1):
                for bx in range(-rd, rd + 1):
                    offsets.add((ay + decomp.dilation * by, ax + decomp.dilation * bx))
    ys = [o[0] for o in offsets]
    xs = [o[1] for o in offsets]
    extent_y = max(ys) - min(ys) + 1
    extent_x = max(xs) - min(xs) + 1
    extent = max(extent_y, extent_x)
    holes = extent_y * extent_x - len(offsets)
    r_target = decomp.kernel // 2
    covers = all(
        (y, x) in offsets for y in range(-r_target, r_target + 1) for x in range(-r_target, r_target + 1)
    )
    return Footprint(decomp.kernel, decomp.dilation, frozenset(offsets), extent, holes, covers)


def footprint_by_convolution(decomp: Decomposition) -> Footprint:
    """Independent oracle: convolve all-ones indicator kernels and read the
    support off the response to a centered impulse."""
    pad = decomp.k_small + decomp.dilation * decomp.k_dilated + 2
    size = 2 * pad + 1
    x = Tensor.zeros((1, 1, size, size), dtype=np.float64)
    x.data[0, 0, pad, pad] = 1.0
    spec_s = ConvSpec(1, 1, decomp.k_small, groups=1, padding="same", has_bias=False)
    spec_d = ConvSpec(
        1, 1, decomp.k_dilated, dilation=decomp.dilation, groups=1, padding="same", has_bias=False
    )
    ones_s = Tensor(np.ones(spec_s.weight_shape), dtype=np.float64)
    ones_d = Tensor(np.ones(spec_d.weight_shape), dtype=np.float64)
    y = conv2d_forward(conv2d_forward(x, spec_s, ones_s), spec_d, ones_d)
    support = np.argwhere(y.data[0, 0] > 0.5)
    offsets = frozenset((int(r - pad), int(c - pad)) for r, c in support)
    ys = [o[0] for o in offsets]
    xs = [o[1] for o in offsets]
    extent_y = max(ys) - min(ys) + 1
    extent_x = max(xs) - min(xs) + 1
    extent = max(extent_y, extent_x)
    holes = extent_y * extent_x - len(offsets)
    r_target = decomp.kernel // 2
    covers = all(
        (y, x) in offsets for y in range(-r_target, r_target + 1) for x in range(-r_target, r_target + 1)
    )
    return Footprint(decomp.kernel, decomp.dilation, offsets, extent, holes, covers)
