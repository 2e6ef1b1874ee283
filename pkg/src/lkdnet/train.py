"""Desk-scale trainer: L1 loss, AdamW, cosine learning-rate schedule.

The loop is deterministic end to end: batch sampling and crop offsets for
step s come from a generator seeded with SeedSequence([seed, stream, s]),
so a rerun with the same config reproduces the metrics log and final
checkpoint bitwise (given the same thread count).

A non-finite loss or gradient aborts the run; the checkpoint from the
last completed evaluation point (or initialization) is retained.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, fields

import numpy as np

from . import precision
from .metrics import psnr, ssim
from .model import ConfigError, LkdNet
from .tensor import NumericError, Tensor

_SAMPLING_STREAM = 0x5A


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    patch: int = 64
    lr0: float = 2e-4
    lr_min: float = 0.0
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        if self.batch < 1:
            raise ConfigError(f"batch must be positive, got {self.batch}")
        if self.patch < 4 or self.patch % 4:
            raise ConfigError(f"patch must be a positive multiple of 4, got {self.patch}")
        if not (0 < self.lr0) or self.lr_min < 0 or self.lr_min > self.lr0:
            raise ConfigError(f"need 0 < lr0 and 0 <= lr_min <= lr0, got {self.lr0}, {self.lr_min}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("weight_decay must be >= 0 and eps > 0")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be positive, got {self.eval_every}")

    def to_dict(self) -> dict:
        return {"steps": self.steps, "batch": self.batch, "patch": self.patch,
                "lr0": self.lr0, "lr_min": self.lr_min, "betas": list(self.betas),
                "weight_decay": self.weight_decay, "eps": self.eps,
                "eval_every": self.eval_every, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return cls(**d)


def l1_loss(pred: Tensor, target: Tensor) -> float:
    if pred.shape != target.shape:
        raise ValueError(f"l1 shapes differ: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred.data - target.data)))


def l1_loss_grad(pred: Tensor, target: Tensor) -> Tensor:
    """d mean|pred - target| / d pred; sign convention sign(0) = 0."""
    d = pred.data - target.data
    g = np.sign(d) / d.size
    return Tensor(g.astype(pred.data.dtype), dtype=pred.data.dtype)


def cosine_lr(step: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine anneal from lr0 (step 0) to lr_min (step total)."""
    if total < 1:
        raise ValueError(f"total steps must be positive, got {total}")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    return lr_min + (lr0 - lr_min) * 0.5 * (1.0 + math.cos(math.pi * step / total))


class AdamW:
    """Decoupled-weight-decay Adam; decay is applied before the update.

    State is keyed by parameter name. Gradients are zeroed after each
    step, so callers accumulate into .grad and never reset it themselves.
    """

    def __init__(self, params, betas=(0.9, 0.999), weight_decay: float = 0.01, eps: float = 1e-8):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names) or "" in names:
            raise ValueError("optimizer needs uniquely named parameters")
        self.betas = (float(betas[0]), float(betas[1]))
        self.weight_decay = float(weight_decay)
        self.eps = float(eps)
        self.m = {p.name: np.zeros_like(p.value.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.value.data) for p in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad.data
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in parameter {p.name}")
            w = p.value.data
            dt = w.dtype.type
            if self.weight_decay:
                w *= dt(1.0 - lr * self.weight_decay)
            m = self.m[p.name]
            v = self.v[p.name]
            m *= dt(b1)
            m += dt(1.0 - b1) * g
            v *= dt(b2)
            v += dt(1.0 - b2) * g * g
            mhat = m / dt(bc1)
            vhat = v / dt(bc2)
            w -= dt(lr) * mhat / (np.sqrt(vhat) + dt(self.eps))
            p.zero_grad()


@dataclass
class TrainResult:
    model: LkdNet
    records: list = field(default_factory=list)
    final_loss: float = math.nan
    aborted: bool = False


METRICS_HEADER = "step,lr,loss,psnr,ssim"


def _format_record(r) -> str:
    return f"{r[0]},{r[1]:.10g},{r[2]:.10g},{r[3]:.10g},{r[4]:.10g}"


def write_metrics_csv(path, records) -> None:
    with open(path, "w") as f:
        f.write(METRICS_HEADER + "\n")
        for r in records:
            f.write(_format_record(r) + "\n")


def sample_batch(pairs, cfg: TrainConfig, step: int):
    """Deterministic batch of (hazy, clean) crops for one step."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SAMPLING_STREAM, step]))
    dt = precision.dtype()
    hazy = np.empty((cfg.batch, 3, cfg.patch, cfg.patch), dtype=dt)
    clean = np.empty_like(hazy)
    idx = rng.integers(0, len(pairs), size=cfg.batch)
    for j, i in enumerate(idx):
        p = pairs[int(i)]
        h, w = p.hazy.shape[2], p.hazy.shape[3]
        if h < cfg.patch or w < cfg.patch:
            raise ValueError(f"dataset image {h}x{w} smaller than patch {cfg.patch}")
        y0 = int(rng.integers(0, h - cfg.patch + 1))
        x0 = int(rng.integers(0, w - cfg.patch + 1))
        hazy[j] = p.hazy.data[0, :, y0 : y0 + cfg.patch, x0 : x0 + cfg.patch]
        clean[j] = p.clean.data[0, :, y0 : y0 + cfg.patch, x0 : x0 + cfg.patch]
    return Tensor(hazy, dtype=dt), Tensor(clean, dtype=dt)


def train(model: LkdNet, pairs, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Run the training loop; optionally write checkpoint + metrics.csv.

    On a numeric failure the last-good checkpoint (most recent eval point)
    is written to out_dir before the error propagates.
    """
    if not pairs:
        raise ValueError("training needs a non-empty dataset")
    model.train(True)
    model.zero_grad()
    opt = AdamW(model.parameters(), cfg.betas, cfg.weight_decay, cfg.eps)
    result = TrainResult(model)
    last_good = model.snapshot()

    def finish(aborted: bool):
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            write_metrics_csv(os.path.join(out_dir, "metrics.csv"), result.records)
            if aborted:
                with open(os.path.join(out_dir, "model.ckpt"), "wb") as f:
                    f.write(last_good)
            else:
                model.save(os.path.join(out_dir, "model.ckpt"))

    for step in range(cfg.steps):
        hazy, clean = sample_batch(pairs, cfg, step)
        pred = model.forward(hazy)
        loss = l1_loss(pred, clean)
        if not math.isfinite(loss):
            result.aborted = True
            finish(True)
            raise NumericError(f"non-finite loss at step {step}")
        lr = cosine_lr(step, cfg.steps, cfg.lr0, cfg.lr_min)
        model.backward(l1_loss_grad(pred, clean))
        try:
            opt.step(lr)
        except NumericError:
            result.aborted = True
            finish(True)
            raise
        result.final_loss = loss
        if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
            clamped = Tensor(np.clip(pred.data, 0.0, 1.0), dtype=pred.data.dtype)
            result.records.append(
                (step + 1, lr, loss, psnr(clamped, clean), ssim(clamped, clean))
            )
            last_good = model.snapshot()
    finish(False)
    return result


def evaluate(model: LkdNet, pairs):
    """Eval-mode full-image metrics; returns per-pair rows and means.

    The model's train/eval mode is restored on exit.
    """
    was_training = model.training
    model.eval()
    try:
        rows = []
        for p in pairs:
            x = Tensor(p.hazy.data.astype(precision.dtype()))
            ref = Tensor(p.clean.data.astype(precision.dtype()))
            pred = model.forward(x)
            rows.append((psnr(pred, ref), ssim(pred, ref)))
    finally:
        model.train(was_training)
    mean_psnr = sum(r[0] for r in rows) / len(rows)
    mean_ssim = sum(r[1] for r in rows) / len(rows)
    return rows, mean_psnr, mean_ssim
