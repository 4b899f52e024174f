"""Losses, the combined deeply-supervised objective, and SGD training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import layers as L
from . import network as net
from .errors import InputError, NumericalError, ShapeError
from .tensor import make_rng

log = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class LossBreakdown:
    branch_losses: list[float]
    fusion_loss: float
    combined: float


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 2000
    momentum: float = 0.9
    weight_decay: float = 0.0
    max_iters: int = 1000
    seed: int = 0
    validate_every: int = 100
    # "sum" steps on the pixel-summed objective (lr = 1e-4 is quoted for it);
    # reported losses are per-pixel means either way.
    loss_reduction: str = "sum"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr_decay_every < 1 or self.validate_every < 1:
            raise ValueError("lr_decay_every and validate_every must be >= 1")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")


def cross_entropy(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """Per-pixel mean binary cross-entropy with soft targets, and d loss / d pred."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if gt.size and (gt.min() < 0 or gt.max() > 1):
        raise InputError("ground truth must lie in [0, 1]")
    p = np.clip(pred, EPS, 1 - EPS)
    loss = -np.mean(gt * np.log(p) + (1 - gt) * np.log(1 - p))
    inside = (pred > EPS) & (pred < 1 - EPS)
    L.log_switch(inside)
    d = (-gt / p + (1 - gt) / (1 - p)) * inside / pred.size
    return float(loss), d


def combined_objective(trace: net.ForwardTrace, gt: np.ndarray, deep_supervision: bool = True):
    """``mean(branch losses) + fusion loss`` and the gradients w.r.t. every map.

    Returns ``(LossBreakdown, d_branch_list, d_fused)``.  With deep supervision
    off the branch terms (and their gradients) are zero.
    """
    F = trace.fused_map
    if gt.ndim == 2:
        gt = gt[None, None]
    if gt.shape != F.shape:
        raise ShapeError(f"ground truth {gt.shape} does not match predictions {F.shape}")
    M = len(trace.branch_maps)
    fusion_loss, d_fused = cross_entropy(F, gt)
    branch_losses, d_branch = [], []
    for s in trace.branch_maps:
        if deep_supervision:
            l, d = cross_entropy(s, gt)
            branch_losses.append(l)
            d_branch.append(d / M)
        else:
            branch_losses.append(0.0)
            d_branch.append(np.zeros_like(s))
    combined = sum(branch_losses) / M + fusion_loss
    return LossBreakdown(branch_losses, fusion_loss, combined), d_branch, d_fused


def lr_at(config: TrainConfig, iteration: int) -> float:
    return config.lr * config.lr_decay_factor ** (iteration // config.lr_decay_every)


def sgd_step(state: net.NetworkState, grads, velocity, config: TrainConfig, iteration: int):
    """One momentum step: ``v <- mu v - lr g``, ``theta <- theta + v``."""
    lr = lr_at(config, iteration)
    new_params, new_vel = {}, {}
    for name, theta in state.params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {theta.shape}")
        if config.weight_decay:
            g = g + config.weight_decay * theta
        v = velocity.get(name) if velocity else None
        v = -lr * g if v is None else config.momentum * v - lr * g
        new_vel[name] = v
        new_params[name] = theta + v
    return net.NetworkState(state.spec, new_params), new_vel


# ---------------------------------------------------------------------------
# training loop


def batch_indices(n: int, batch_size: int, seed: int, iteration: int) -> np.ndarray:
    """Sorted sample ids for ``iteration``; a function of (seed, iteration) only."""
    if batch_size >= n:
        return np.arange(n)
    rng = make_rng(seed, 1, iteration)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def _stack(samples):
    images = np.concatenate([s.image for s in samples], axis=0)
    gts = np.stack([s.gt for s in samples])[:, None]
    return images, gts


def _groups(samples, ids):
    """Batch ids grouped by spatial dims, in order of first appearance."""
    groups: dict[tuple, list[int]] = {}
    for i in ids:
        groups.setdefault(samples[i].image.shape[2:], []).append(int(i))
    return list(groups.values())


def batch_loss_and_grads(state: net.NetworkState, samples, ids, reduction: str = "mean"):
    """Mean loss over the listed samples and the matching parameter gradients.

    With ``reduction="sum"`` the gradients are those of the per-image loss
    summed over pixels (then averaged over the batch).
    """
    B = len(ids)
    grads = state.zeros_like()
    M = state.spec.M
    branch = np.zeros(M)
    fusion = combined = 0.0
    for group in _groups(samples, ids):
        images, gts = _stack([samples[i] for i in group])
        trace = net.forward(state, images)
        lb, d_branch, d_fused = combined_objective(trace, gts, state.spec.deep_supervision)
        wgt = len(group) / B
        gscale = wgt * (images.shape[2] * images.shape[3] if reduction == "sum" else 1)
        g = net.backward(state, trace, [d * gscale for d in d_branch], d_fused * gscale)
        for k in grads:
            grads[k] += g[k]
        branch += wgt * np.asarray(lb.branch_losses)
        fusion += wgt * lb.fusion_loss
        combined += wgt * lb.combined
    return LossBreakdown([float(b) for b in branch], float(fusion), float(combined)), grads


def evaluate_loss(state: net.NetworkState, samples) -> LossBreakdown:
    ids = list(range(len(samples)))
    B = len(ids)
    branch = np.zeros(state.spec.M)
    fusion = combined = 0.0
    for group in _groups(samples, ids):
        images, gts = _stack([samples[i] for i in group])
        lb, _, _ = combined_objective(net.forward(state, images), gts, state.spec.deep_supervision)
        wgt = len(group) / B
        branch += wgt * np.asarray(lb.branch_losses)
        fusion += wgt * lb.fusion_loss
        combined += wgt * lb.combined
    return LossBreakdown([float(b) for b in branch], float(fusion), float(combined))


def validation_metrics(state: net.NetworkState, samples) -> dict[str, float]:
    from . import metrics

    lb = evaluate_loss(state, samples)
    cc, nss = [], []
    for s in samples:
        F = net.forward(state, s.image).fused_map[0, 0]
        cc.append(metrics.cc(F, s.gt))
        nss.append(metrics.nss(F, s.fixation))
    return {"val_loss": lb.combined, "val_cc": float(np.mean(cc)), "val_nss": float(np.mean(nss))}


@dataclass
class TrainResult:
    state: net.NetworkState
    velocity: dict
    loss_curve: list[dict] = field(default_factory=list)
    validation_curve: list[dict] = field(default_factory=list)


def loss_columns(M: int) -> list[str]:
    return ["iter", "lr"] + [f"branch_{m}" for m in range(1, M + 1)] + ["fusion", "combined"]


VAL_COLUMNS = ["val_loss", "val_cc", "val_nss"]


class CurveWriter:
    """Appends loss / validation rows to a CSV file as training proceeds."""

    def __init__(self, path, M: int):
        self.path = Path(path)
        self.columns = loss_columns(M) + VAL_COLUMNS
        if not self.path.exists() or self.path.stat().st_size == 0:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    def __call__(self, row: dict) -> None:
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([_fmt(row.get(c, "")) for c in self.columns])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def train(
    spec: net.NetworkSpec,
    dataset: Sequence,
    config: TrainConfig,
    *,
    state: net.NetworkState | None = None,
    velocity: dict | None = None,
    start_iter: int = 0,
    validation: Sequence | None = None,
    pretrained=None,
    on_row: Callable[[dict], None] | None = None,
    on_checkpoint: Callable[[int, net.NetworkState, dict], None] | None = None,
    checkpoint_every: int = 0,
) -> TrainResult:
    """Minimise the combined objective with momentum SGD.

    ``dataset`` holds prepared samples (``image`` of shape (1, 3, h, w), ``gt``
    and ``fixation`` of shape (h, w)).  Everything random derives from
    ``config.seed``; passing the state, velocity and iteration of a checkpoint
    resumes a run exactly.
    """
    if not dataset:
        raise InputError("empty training dataset")
    if state is None:
        state = net.build(spec, config.seed, pretrained)
    velocity = dict(velocity or {})
    result = TrainResult(state, velocity)
    M = spec.M
    for it in range(start_iter, config.max_iters):
        ids = batch_indices(len(dataset), config.batch_size, config.seed, it)
        lb, grads = batch_loss_and_grads(state, dataset, ids, config.loss_reduction)
        if not math.isfinite(lb.combined) or not all(np.isfinite(g).all() for g in grads.values()):
            raise NumericalError(f"non-finite loss at iteration {it} (batch ids {ids.tolist()})")
        lr = lr_at(config, it)
        state, velocity = sgd_step(state, grads, velocity, config, it)
        row = {"iter": it, "lr": lr, "fusion": lb.fusion_loss, "combined": lb.combined}
        row.update({f"branch_{m + 1}": lb.branch_losses[m] for m in range(M)})
        if validation and (it + 1) % config.validate_every == 0:
            vm = validation_metrics(state, validation)
            row.update(vm)
            result.validation_curve.append({"iter": it, **vm})
            log.info("iter %d val %s", it, vm)
        result.loss_curve.append(row)
        if on_row:
            on_row(row)
        if on_checkpoint and checkpoint_every and (it + 1) % checkpoint_every == 0:
            on_checkpoint(it + 1, state, velocity)
    result.state, result.velocity = state, velocity
    return result
