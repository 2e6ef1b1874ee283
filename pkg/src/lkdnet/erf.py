"""Effective receptive field probe.

For each probe sample, backpropagate from the center pixel of a tap
feature map (summed over channels) to the input image, and accumulate the
absolute input gradient. The aggregated map is summarized by the
high-contribution area ratio r(t): the smallest fraction of pixels, taken
in descending contribution order, holding fraction t of the total mass.

Taps: "output" is the last decoder stage's feature map (before the head),
"bottleneck" is the innermost stage's output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import precision
from .imageio import write_ppm
from .model import LkdNet
from .tensor import NumericError, Tensor

DEFAULT_THRESHOLDS = (0.20, 0.30, 0.50, 0.99)

_ERF_STREAM = 0x65


def contribution_ratio(contribution: np.ndarray, t: float) -> float:
    """r(t) over a non-negative 2-D contribution map."""
    if not 0 < t <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {t}")
    flat = np.sort(contribution.astype(np.float64).ravel())[::-1]
    total = flat.sum()
    if not np.isfinite(total) or total <= 0:
        raise NumericError("contribution map has no positive mass")
    k = int(np.searchsorted(np.cumsum(flat), t * total) + 1)
    k = min(k, flat.size)
    return k / flat.size


@dataclass
class ErfReport:
    contribution: np.ndarray
    r_table: dict
    tap: str
    n_samples: int
    input_size: int
    seed: int
    rows: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"tap {self.tap}, samples {self.n_samples}, input {self.input_size}"]
        for t in sorted(self.r_table):
            lines.append(f"r({t:.2f}) = {self.r_table[t]:.6f}")
        return "\n".join(lines) + "\n"


def erf_probe(
    model: LkdNet,
    n_samples: int = 16,
    input_size: int = 64,
    seed: int = 0,
    tap: str = "output",
    thresholds=DEFAULT_THRESHOLDS,
) -> ErfReport:
    """Aggregate |d tap_center / d input| over random uniform inputs."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    if input_size < 4 or input_size % 4:
        raise ValueError(f"input size must be a positive multiple of 4, got {input_size}")
    model.eval()
    dt = precision.dtype()
    contribution = np.zeros((input_size, input_size), dtype=np.float64)
    for s in range(n_samples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, _ERF_STREAM, s]))
        x = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, input_size, input_size)).astype(dt))
        g = model.input_gradient_from_tap(x, tap)
        contribution += np.abs(g.data.astype(np.float64)).sum(axis=(0, 1))
    if not np.all(np.isfinite(contribution)):
        raise NumericError("non-finite values in the contribution map")
    r_table = {float(t): contribution_ratio(contribution, float(t)) for t in thresholds}
    report = ErfReport(contribution, r_table, tap, n_samples, input_size, seed)
    return report


def save_heat_map(path, contribution: np.ndarray) -> None:
    """Log-scaled rendering of the contribution map as a grayscale PPM."""
    peak = float(contribution.max())
    if peak <= 0:
        raise NumericError("contribution map has no positive mass")
    scale = 1e4
    m = np.log1p(contribution / peak * scale) / np.log1p(scale)
    rgb = np.repeat(m[None, None].astype(np.float64), 3, axis=1)
    write_ppm(path, Tensor(rgb))
