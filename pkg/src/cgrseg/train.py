"""Toy training: cross-entropy, SGD with momentum, poly schedule, mIoU.

Everything is seeded through one root stream (parameter init, batch
sampling, held-out evaluation), so a (seed, config) pair fully determines
the metrics log and the final weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ToySample, gen_toy_sample
from .model import ModelConfig, ModelParams, init_model_params, model_forward, named_tensors
from .tensor import (
    NumericsError,
    Rng,
    Tape,
    Tensor,
    backward,
    concat_batch,
    record,
    upsample_bilinear,
)

__all__ = [
    "TrainConfig",
    "DivergenceError",
    "cross_entropy",
    "poly_lr",
    "sgd_step",
    "miou",
    "predict_mask",
    "evaluate_miou",
    "attention_focus_ratio",
    "train_toy",
]


@dataclass
class TrainConfig:
    steps: int = 1200
    batch_size: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    poly_power: float = 1.0
    seed: int = 0
    eval_interval: int = 100
    eval_samples: int = 8

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.eval_samples < 1:
            raise ValueError("steps must be >= 0; batch/eval sizes >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.momentum < 0 or self.weight_decay < 0 or self.poly_power <= 0:
            raise ValueError("momentum/weight_decay >= 0 and poly_power > 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


def cross_entropy(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean per-pixel negative log-likelihood of the labeled class."""
    n, c, h, w = logits.dims
    mask = np.asarray(mask)
    if mask.shape == (h, w):
        mask = mask[None]
    if mask.shape != (n, h, w):
        raise ValueError(f"mask shape {mask.shape} does not match logits {logits.dims}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise ValueError("mask must be integer-typed")
    if mask.min() < 0 or mask.max() >= c:
        raise ValueError(f"labels must lie in [0, {c})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    logsm = (z - zmax) - np.log(denom)
    picked = np.take_along_axis(logsm, mask[:, None], axis=1)[:, 0]
    npix = n * h * w
    out = Tensor.scalar(-float(picked.sum()) / npix)

    sm = ez / denom
    ni, hi, wi = np.ogrid[:n, :h, :w]

    def bwd(g):
        grad = sm.copy()
        grad[ni, mask, hi, wi] -= 1.0
        grad *= g[0, 0, 0, 0] / npix
        return (grad,)

    return record(out, (logits,), bwd)


def poly_lr(base_lr: float, step: int, total: int, power: float) -> float:
    if total < 1:
        raise ValueError("total must be >= 1")
    frac = min(max(step / total, 0.0), 1.0)
    return base_lr * (1.0 - frac) ** power


def sgd_step(
    named_params: list[tuple[str, Tensor]],
    state: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """v <- momentum*v + grad + wd*theta;  theta <- theta - lr*v."""
    for name, t in named_params:
        if t.grad is None:
            raise ValueError(f"parameter {name} has no gradient")
        v = state[name]
        v *= momentum
        v += t.grad
        if weight_decay:
            v += weight_decay * t.data
        t.data -= lr * v


def miou(pred: np.ndarray, true: np.ndarray, c_cls: int):
    """Per-class intersection-over-union and its mean.

    Classes absent from both masks are excluded (reported as None).
    """
    if pred.shape != true.shape:
        raise ValueError("mask shapes differ")
    ious: list[float | None] = []
    kept = []
    for c in range(c_cls):
        p, t = pred == c, true == c
        union = int(np.logical_or(p, t).sum())
        if union == 0:
            ious.append(None)
            continue
        iou = int(np.logical_and(p, t).sum()) / union
        ious.append(iou)
        kept.append(iou)
    return ious, float(np.mean(kept))


def predict_mask(img: Tensor, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    logits = model_forward(img, params, cfg, mode="eval")
    return logits.data.argmax(axis=1)[0]


def evaluate_miou(params, cfg: ModelConfig, samples: list[ToySample]) -> float:
    vals = []
    for s in samples:
        _, mean = miou(predict_mask(s.image, params, cfg), s.mask, cfg.num_classes)
        vals.append(mean)
    return float(np.mean(vals))


def attention_focus_ratio(
    params, cfg: ModelConfig, samples: list[ToySample], stage: str = "sfr.8"
) -> float:
    """Mean gate value inside the true foreground over the mean outside,
    averaged per-sample.  The raw (un-normalized) gate is used."""
    ratios = []
    for s in samples:
        taps: dict = {}
        model_forward(s.image, params, cfg, mode="eval", taps=taps)
        a = taps[stage].data.mean(axis=1, keepdims=True)
        h, w = s.mask.shape
        up = upsample_bilinear(Tensor(a), h, w).data[0, 0]
        fg = s.mask > 0
        if not fg.any() or fg.all():
            continue
        ratios.append(float(up[fg].mean() / up[~fg].mean()))
    if not ratios:
        raise ValueError("no sample with both foreground and background")
    return float(np.mean(ratios))


def held_out_samples(cfg: ModelConfig, seed: int, count: int) -> list[ToySample]:
    """Evaluation samples from a stream never touched by training."""
    rng = Rng(seed).spawn(3)
    h, w = cfg.input_size
    return [gen_toy_sample(rng, h, w, cfg.num_classes) for _ in range(count)]


def train_toy(tcfg: TrainConfig, mcfg: ModelConfig):
    """Run the seeded loop; returns (params, metrics-log lines)."""
    root = Rng(tcfg.seed)
    params = init_model_params(root.spawn(1), mcfg)
    data_rng = root.spawn(2)
    named = [(n, t) for n, kind, t in named_tensors(params) if kind == "param"]
    state = {n: np.zeros_like(t.data) for n, t in named}
    h, w = mcfg.input_size
    eval_set = held_out_samples(mcfg, tcfg.seed, tcfg.eval_samples)

    lines: list[str] = []
    for step in range(tcfg.steps):
        lr = poly_lr(tcfg.lr, step, tcfg.steps, tcfg.poly_power)
        batch = [gen_toy_sample(data_rng, h, w, mcfg.num_classes)
                 for _ in range(tcfg.batch_size)]
        img = concat_batch([s.image for s in batch])
        masks = np.stack([s.mask for s in batch])
        try:
            with Tape() as tape:
                logits = model_forward(img, params, mcfg, mode="train")
                loss = cross_entropy(logits, masks)
            loss_val = loss.item()
            backward(tape, loss)
        except NumericsError as exc:
            raise DivergenceError(step, float("nan")) from exc
        if not math.isfinite(loss_val):
            raise DivergenceError(step, loss_val)
        sgd_step(named, state, lr, tcfg.momentum, tcfg.weight_decay)

        line = f"step={step} lr={lr:.8g} loss={loss_val:.8g}"
        if (step + 1) % tcfg.eval_interval == 0 or step + 1 == tcfg.steps:
            line += f" miou={evaluate_miou(params, mcfg, eval_set):.6f}"
        lines.append(line)
    return params, lines
