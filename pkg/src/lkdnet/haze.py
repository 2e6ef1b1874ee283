"""Haze synthesis from the atmosphere scattering model.

    I = J * t + A * (1 - t),    t = exp(-beta * depth)

J is the clean image, A the global airlight, beta the scattering
coefficient, and depth a synthetic per-pixel depth field. Inversion
recovers J from (I, A, t) with the transmission floored at t_min.

Datasets are lists of hazy/clean pairs. Item k of a dataset draws every
random choice from a generator seeded with SeedSequence([seed, k]), so
items are independent of dataset size and order of generation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .imageio import read_ppm, write_ppm
from .tensor import ShapeError, Tensor


@dataclass
class DepthField:
    """Synthetic depth in [0, 1] as [1, 1, H, W]."""

    kind: str
    values: Tensor

    def __post_init__(self):
        if self.values.shape[0] != 1 or self.values.shape[1] != 1:
            raise ShapeError(f"depth field must be [1, 1, H, W], got {self.values.shape}")
        if np.any(self.values.data < 0):
            raise ValueError("depth values must be non-negative")


def _normalize01(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi - lo < 1e-12:
        return np.zeros_like(a)
    return (a - lo) / (hi - lo)


def linear_ramp_depth(h: int, w: int, direction) -> DepthField:
    """Depth increasing along a direction vector (dy, dx)."""
    dy, dx = float(direction[0]), float(direction[1])
    norm = (dy * dy + dx * dx) ** 0.5
    if norm < 1e-12:
        raise ValueError("ramp direction must be non-zero")
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    proj = (yy * dy + xx * dx) / norm
    return DepthField("ramp", Tensor(_normalize01(proj)[None, None]))


def radial_depth(h: int, w: int, center) -> DepthField:
    """Depth increasing with distance from a center (cy, cx) in pixels."""
    cy, cx = float(center[0]), float(center[1])
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return DepthField("radial", Tensor(_normalize01(dist)[None, None]))


def noise_depth(h: int, w: int, length_scale: int, rng: np.random.Generator) -> DepthField:
    """Smoothed white noise: box-blurred three times at the length scale."""
    if length_scale < 1:
        raise ValueError(f"length scale must be positive, got {length_scale}")
    a = rng.standard_normal((h, w))
    k = min(length_scale, h, w)
    if k > 1:
        kernel = np.ones(k) / k
        for _ in range(3):
            a = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="same"), 1, a)
            a = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="same"), 0, a)
    return DepthField("noise", Tensor(_normalize01(a)[None, None]))


def random_depth(h: int, w: int, rng: np.random.Generator) -> DepthField:
    kind = rng.integers(0, 3)
    if kind == 0:
        angle = rng.uniform(0, 2 * np.pi)
        return linear_ramp_depth(h, w, (np.sin(angle), np.cos(angle)))
    if kind == 1:
        return radial_depth(h, w, (rng.uniform(0, h - 1), rng.uniform(0, w - 1)))
    return noise_depth(h, w, int(rng.integers(max(2, min(h, w) // 8), max(3, min(h, w) // 3))), rng)


@dataclass
class HazeParams:
    """Airlight (RGB in [0, 1]), scattering coefficient, and depth."""

    airlight: np.ndarray
    beta: float
    depth: DepthField

    def __post_init__(self):
        self.airlight = np.asarray(self.airlight, dtype=np.float64).reshape(3)
        if np.any(self.airlight < 0) or np.any(self.airlight > 1):
            raise ValueError(f"airlight must lie in [0, 1], got {self.airlight}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")


def transmission(depth: DepthField, beta: float) -> Tensor:
    """t = exp(-beta * depth); beta = 0 gives the haze-free limit t = 1."""
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    return Tensor(np.exp(-beta * depth.values.data), dtype=depth.values.data.dtype)


def apply_haze(clean: Tensor, params: HazeParams) -> Tensor:
    """Run the scattering model forward; clean must match the depth grid."""
    if clean.shape[1] != 3:
        raise ShapeError(f"clean image must have 3 channels, got {clean.shape}")
    if clean.shape[2:] != params.depth.values.shape[2:]:
        raise ShapeError(
            f"clean image grid {clean.shape[2:]} does not match depth "
            f"{params.depth.values.shape[2:]}"
        )
    t = transmission(params.depth, params.beta).data
    a = params.airlight.reshape(1, 3, 1, 1).astype(clean.data.dtype)
    hazy = clean.data * t + a * (1.0 - t)
    return Tensor(hazy, dtype=clean.data.dtype)


def invert_haze(hazy: Tensor, airlight, t: Tensor, t_min: float = 1e-3) -> Tensor:
    """Recover J = (I - A * (1 - t)) / max(t, t_min)."""
    if t_min <= 0:
        raise ValueError(f"t_min must be positive, got {t_min}")
    a = np.asarray(airlight, dtype=np.float64).reshape(1, 3, 1, 1).astype(hazy.data.dtype)
    td = np.maximum(t.data, hazy.data.dtype.type(t_min))
    return Tensor((hazy.data - a * (1.0 - td)) / td, dtype=hazy.data.dtype)


def make_clean_image(size: int, rng: np.random.Generator) -> Tensor:
    """Procedural clean image: corner-color gradient plus random shapes."""
    h = w = int(size)
    corners = rng.uniform(0.05, 0.95, size=(2, 2, 3))
    fy = np.linspace(0.0, 1.0, h)[:, None, None]
    fx = np.linspace(0.0, 1.0, w)[None, :, None]
    img = (
        corners[0, 0] * (1 - fy) * (1 - fx)
        + corners[0, 1] * (1 - fy) * fx
        + corners[1, 0] * fy * (1 - fx)
        + corners[1, 1] * fy * fx
    )
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for _ in range(int(rng.integers(3, 9))):
        color = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        r = rng.uniform(size / 16, size / 4)
        if rng.integers(0, 2) == 0:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        img = np.where(mask[:, :, None], color, img)
    return Tensor(img.transpose(2, 0, 1)[None].astype(np.float64))


@dataclass
class HazePair:
    """One dataset item; depth is None after a disk round trip."""

    hazy: Tensor
    clean: Tensor
    airlight: np.ndarray
    beta: float
    depth: object = None


def _crop_center(img: Tensor, size: int) -> Tensor:
    h, w = img.shape[2], img.shape[3]
    if h < size or w < size:
        raise ShapeError(f"source image {h}x{w} smaller than requested size {size}")
    y0, x0 = (h - size) // 2, (w - size) // 2
    return Tensor(np.ascontiguousarray(img.data[:, :, y0 : y0 + size, x0 : x0 + size]))


def make_dataset(
    n: int,
    size: int,
    seed: int = 0,
    clean_source: str = "procedural",
    source_dir=None,
) -> list:
    """Generate n hazy/clean pairs at size x size.

    clean_source "procedural" draws synthetic images; "directory" center-
    crops the sorted *.ppm files under source_dir, cycling if fewer than n.
    Haze parameters: airlight uniform [0.7, 1]^3, beta uniform [0.4, 2.0],
    random depth kind.
    """
    if n < 1:
        raise ValueError(f"dataset size must be positive, got {n}")
    if size < 4 or size % 4:
        raise ValueError(f"image size must be a positive multiple of 4, got {size}")
    if clean_source not in ("procedural", "directory"):
        raise ValueError(f"unknown clean source {clean_source!r}")
    files = None
    if clean_source == "directory":
        if source_dir is None or not os.path.isdir(source_dir):
            raise ValueError(f"clean source directory {source_dir!r} is not readable")
        files = sorted(
            os.path.join(source_dir, f) for f in os.listdir(source_dir) if f.endswith(".ppm")
        )
        if not files:
            raise ValueError(f"no .ppm files under {source_dir!r}")
    pairs = []
    for k in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        if files is None:
            clean = make_clean_image(size, rng)
        else:
            clean = _crop_center(read_ppm(files[k % len(files)]), size)
        depth = random_depth(size, size, rng)
        params = HazeParams(rng.uniform(0.7, 1.0, size=3), float(rng.uniform(0.4, 2.0)), depth)
        hazy = apply_haze(clean, params)
        pairs.append(HazePair(hazy, clean, params.airlight, params.beta, depth))
    return pairs


MANIFEST_NAME = "manifest.txt"


def write_dataset(pairs, out_dir) -> None:
    """Write hazy_NNNN.ppm / clean_NNNN.ppm plus a manifest of parameters."""
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for k, p in enumerate(pairs):
        hazy_name, clean_name = f"hazy_{k:04d}.ppm", f"clean_{k:04d}.ppm"
        write_ppm(os.path.join(out_dir, hazy_name), p.hazy)
        write_ppm(os.path.join(out_dir, clean_name), p.clean)
        a = [float(v) for v in p.airlight]
        lines.append(
            f"{hazy_name} {clean_name} {a[0]!r} {a[1]!r} {a[2]!r} {float(p.beta)!r}\n"
        )
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        f.writelines(lines)


def load_dataset(in_dir) -> list:
    """Read a dataset written by write_dataset; depth fields are not persisted."""
    manifest = os.path.join(in_dir, MANIFEST_NAME)
    if not os.path.isfile(manifest):
        raise ValueError(f"no {MANIFEST_NAME} under {in_dir!r}")
    pairs = []
    with open(manifest) as f:
        for line_no, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{manifest}:{line_no}: expected 6 fields, got {len(parts)}")
            hazy = read_ppm(os.path.join(in_dir, parts[0]))
            clean = read_ppm(os.path.join(in_dir, parts[1]))
            airlight = np.array([float(parts[2]), float(parts[3]), float(parts[4])])
            pairs.append(HazePair(hazy, clean, airlight, float(parts[5])))
    if not pairs:
        raise ValueError(f"manifest {manifest} lists no pairs")
    return pairs
