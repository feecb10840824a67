"""Training loop: tonemapped-L2 loss, Adam updates, checkpointing, gradient check.

The loss is computed on mu-law tonemapped radiance, which weights dark regions
far more than a plain HDR-domain L2 and is what makes the merge learnable.
Determinism contract: (seed, data, config) fully determine the parameter
trajectory; batches are drawn by a counter-based RNG keyed on (seed,
iteration), so resuming from a checkpoint replays the identical schedule.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import math
import os
import time

import numpy as np
import torch

from . import net as netmod
from .radiance import DEFAULT_GAMMA, DEFAULT_MU, RadianceImage, ShapeError, TonemapParams, mu_law

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

_REDUCTIONS = ("norm", "rms")


@dataclasses.dataclass
class TrainConfig:
    """Hyperparameters for one training run (JSON-serializable)."""

    variant: str = "resnet"
    k: int = 3
    learning_rate: float = 1e-4
    batch_size: int = 4
    iterations: int = 10000
    seed: int = 0
    mu: float = DEFAULT_MU
    gamma: float = DEFAULT_GAMMA
    oversample_threshold: float = 0.2
    oversample_factor: int = 2
    checkpoint_interval: int = 1000
    patch_size: int = 256
    base_channels: int = 64
    loss_reduction: str = "norm"  # "norm": L2 as written; "rms": per-pixel-mean variant
    lr_schedule: str = "constant"  # "constant" | "cosine"
    lr_min: float = 1e-4

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss_reduction not in _REDUCTIONS:
            raise ValueError(f"loss_reduction must be one of {_REDUCTIONS}")

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls(**json.load(f))

    def to_json(self, path):
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=2)
            f.write("\n")


def loss(predicted, target, params=TonemapParams(), reduction="norm"):
    """Distance between tonemapped radiance images.

    "norm" is the L2 norm of the difference (root of the summed squares);
    "rms" roots the per-component mean instead, which is independent of image
    and batch size.
    """
    p = predicted.pixels if isinstance(predicted, RadianceImage) else np.asarray(predicted)
    t = target.pixels if isinstance(target, RadianceImage) else np.asarray(target)
    if p.shape != t.shape:
        raise ShapeError(f"shape mismatch: {p.shape} vs {t.shape}")
    d = mu_law(p, params.mu) - mu_law(t, params.mu)
    if reduction == "rms":
        return float(np.sqrt(np.mean(d * d)))
    return float(np.sqrt(np.sum(d * d)))


def tonemapped_l2(pred, target, mu=DEFAULT_MU, reduction="norm"):
    """Differentiable torch twin of loss(); batches average per-example norms."""
    scale = math.log1p(mu)
    d = (torch.log1p(mu * pred) - torch.log1p(mu * target)) / scale
    if reduction == "rms":
        return torch.sqrt(torch.mean(d * d))
    return torch.mean(torch.sqrt(torch.sum(d * d, dim=tuple(range(1, d.ndim)))))


def batch_indices(seed, iteration, n_records, batch_size):
    """Deterministic batch sampling, stateless in the iteration counter."""
    rng = np.random.default_rng([seed, iteration])
    return rng.integers(0, n_records, size=batch_size)


def learning_rate_at(config, iteration):
    if config.lr_schedule == "cosine" and config.iterations > 0:
        frac = min(iteration / config.iterations, 1.0)
        return config.lr_min + 0.5 * (config.learning_rate - config.lr_min) * \
            (1.0 + math.cos(math.pi * frac))
    return config.learning_rate


def make_optimizer(network, config):
    return torch.optim.Adam(network.parameters(), lr=config.learning_rate,
                            betas=ADAM_BETAS, eps=ADAM_EPS)


def train_step(network, optimizer, inputs, targets, config):
    """One forward/backward/update; returns the pre-update loss.

    inputs: (B, k, s, s, 6) float32, targets: (B, s, s, 3) float32.
    """
    x = netmod.to_torch_input(inputs)
    y = torch.from_numpy(np.ascontiguousarray(targets, dtype=np.float32)).permute(0, 3, 1, 2)
    network.train(True)
    optimizer.zero_grad(set_to_none=True)
    out = network(x)
    value = tonemapped_l2(out, y, config.mu, config.loss_reduction)
    if not torch.isfinite(value):
        raise netmod.NumericError(
            f"non-finite loss {value.item()!r} (lr={optimizer.param_groups[0]['lr']}, "
            f"batch shape {tuple(x.shape)})")
    value.backward()
    optimizer.step()
    return float(value.item())


def _fetch_batch(records, indices):
    if hasattr(records, "batch"):
        return records.batch(indices)
    recs = [records[int(i)] for i in indices]
    return (np.stack([r.inputs for r in recs]),
            np.stack([r.target for r in recs]))


def train(records, config, out_dir, resume=None):
    """Run the training loop over a PatchStore (or record list).

    Writes periodic checkpoints (with optimizer state, so runs are resumable)
    plus `latest.hdrw` and a CSV log of (iteration, loss, wall-clock seconds).
    Returns the path of the final checkpoint.
    """
    os.makedirs(out_dir, exist_ok=True)
    if resume is not None:
        network, meta = netmod.load_checkpoint(resume)
        start = meta["iteration"]
        optimizer = make_optimizer(network, config)
        if "optimizer" in meta:
            netmod.restore_optimizer(optimizer, network, meta["optimizer"])
    else:
        network = netmod.MergeNetwork(config.variant, k=config.k, patch=config.patch_size,
                                      base_channels=config.base_channels, seed=config.seed)
        optimizer = make_optimizer(network, config)
        start = 0

    log_path = os.path.join(out_dir, "train_log.csv")
    new_log = not os.path.exists(log_path)
    n = len(records)
    if n == 0:
        raise ValueError("no training records")
    t0 = time.monotonic()
    with open(log_path, "a", newline="") as logf:
        writer = csv.writer(logf)
        if new_log:
            writer.writerow(["iteration", "loss", "seconds"])
        for it in range(start, config.iterations):
            lr = learning_rate_at(config, it)
            for group in optimizer.param_groups:
                group["lr"] = lr
            idx = batch_indices(config.seed, it, n, config.batch_size)
            inputs, targets = _fetch_batch(records, idx)
            value = train_step(network, optimizer, inputs, targets, config)
            writer.writerow([it, f"{value:.8e}", f"{time.monotonic() - t0:.3f}"])
            done = it + 1
            if config.checkpoint_interval and done % config.checkpoint_interval == 0 \
                    and done != config.iterations:
                netmod.save_checkpoint(os.path.join(out_dir, f"ckpt_{done:07d}.hdrw"),
                                       network, iteration=done, optimizer=optimizer)
    final = os.path.join(out_dir, "latest.hdrw")
    netmod.save_checkpoint(final, network, iteration=config.iterations, optimizer=optimizer)
    return final


@dataclasses.dataclass(frozen=True)
class GradientCheckResult:
    """Outcome of an analytic-vs-finite-difference comparison."""

    max_rel_error: float
    checked: int
    excluded: tuple  # (parameter name, flat index) pairs skipped at kinks

    @property
    def n_excluded(self):
        return len(self.excluded)


def gradient_check(network, inputs, targets, params=TonemapParams(),
                   n_samples=500, step=1e-4, seed=0, reduction="norm"):
    """Compare autograd gradients of the loss against central differences.

    Runs a float64 copy in eval mode (batchnorm statistics frozen, so the loss
    is a side-effect-free function of the parameters). Coordinates sitting on
    an activation kink, where the one-sided differences disagree, are reported
    as excluded rather than failed. Relative errors use an absolute floor of
    1e-6 times the dominant gradient magnitude: far below that scale the
    difference quotient is resolution-limited, not wrong. Intended for tiny
    networks; cost is two forward passes per sampled coordinate.
    """
    work = copy.deepcopy(network).double()
    work.train(False)
    x = netmod.to_torch_input(inputs).double()
    y = torch.from_numpy(np.ascontiguousarray(targets, dtype=np.float64))
    if y.ndim == 3:
        y = y[None]
    y = y.permute(0, 3, 1, 2)

    def eval_loss():
        with torch.no_grad():
            return float(tonemapped_l2(work(x), y, params.mu, reduction).item())

    for p in work.parameters():
        p.grad = None
    value = tonemapped_l2(work(x), y, params.mu, reduction)
    value.backward()

    named = [(name, p) for name, p in work.named_parameters()]
    sizes = np.array([p.numel() for _, p in named])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    coords = np.arange(total) if total <= n_samples else \
        np.sort(rng.choice(total, size=n_samples, replace=False))
    bounds = np.cumsum(sizes)
    grad_scale = max(float(p.grad.abs().max().item()) for _, p in named)
    floor = max(1e-6 * grad_scale, 1e-12)

    f0 = eval_loss()
    max_rel = 0.0
    excluded = []
    checked = 0
    for flat in coords:
        pi = int(np.searchsorted(bounds, flat, side="right"))
        local = int(flat - (bounds[pi - 1] if pi else 0))
        name, p = named[pi]
        analytic = float(p.grad.reshape(-1)[local].item())
        with torch.no_grad():
            flat_p = p.reshape(-1)
            orig = float(flat_p[local].item())
            flat_p[local] = orig + step
            f_plus = eval_loss()
            flat_p[local] = orig - step
            f_minus = eval_loss()
            flat_p[local] = orig
        d_plus = (f_plus - f0) / step
        d_minus = (f0 - f_minus) / step
        if abs(d_plus - d_minus) > 0.1 * max(abs(d_plus), abs(d_minus), 1e-8):
            excluded.append((name, local))
            continue
        central = 0.5 * (d_plus + d_minus)
        rel = abs(analytic - central) / max(abs(analytic), abs(central), floor)
        max_rel = max(max_rel, rel)
        checked += 1
    return GradientCheckResult(max_rel, checked, tuple(excluded))
