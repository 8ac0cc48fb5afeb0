"""Loss, SGD with momentum and per-group learning rates, and the two-stage
schedule: train the first glance until the loss converges, freeze it, then
train the second glance on the fused score."""

from __future__ import annotations

import logging
import time
from collections import namedtuple
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, save_checkpoint
from .data.labels import COARSE_LABELS, FINE_LABELS, fine_to_coarse, label_index
from .data.pisc import PairDataset
from .data.sampling import stratified_batches
from .geometry import NormalizerStats, fit_normalizer, geometry_feature
from .model import (
    DualGlanceParams,
    ModelConfig,
    context_inputs,
    first_glance_batch,
    fuse,
    init_params,
    pair_inputs,
    second_glance_batch,
    select_bag,
)

__all__ = [
    "TrainSchedule",
    "TrainResult",
    "SGDMomentum",
    "cross_entropy",
    "PreparedPairs",
    "train_stage1",
    "train_stage2",
]

logger = logging.getLogger(__name__)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean -log softmax(logits)[label], fused from logits for stability."""
    return dc.softmax_cross_entropy(logits, labels)


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.001
    lr_finetune: float = 0.0001
    momentum: float = 0.9
    patience: int = 5
    min_delta: float = 1e-3
    clip_norm: float = 10.0
    seed: int = 0
    checkpoint_every: int = 0  # epochs between snapshots; 0 keeps only the final one
    finetune_prefixes: tuple[str, ...] = ()

    def __post_init__(self):
        if self.lr <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0,1), got {self.momentum}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


class SGDMomentum:
    """v <- mu*v + g; theta <- theta - lr(theta)*v, lr resolved per name
    prefix so designated fine-tune groups step at the lower rate."""

    def __init__(self, params: dict[str, Tensor], schedule: TrainSchedule):
        self.params = dict(params)
        self.schedule = schedule
        self.velocity = {name: np.zeros_like(t.values) for name, t in self.params.items()}
        self.lr_map = {
            name: (schedule.lr_finetune
                   if any(name.startswith(p) for p in schedule.finetune_prefixes)
                   else schedule.lr)
            for name in self.params
        }

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            total += float(np.sum(t.grad.astype(np.float64) ** 2))
        return float(np.sqrt(total))

    def step(self, batch_id="") -> bool:
        """Apply one update; returns False (and skips it) on non-finite grads."""
        for name, t in self.params.items():
            if not np.isfinite(t.grad).all():
                logger.warning("non-finite gradient in %s; step aborted (batch %s)", name, batch_id)
                return False
        mu = self.schedule.momentum
        clip = self.schedule.clip_norm
        scale = 1.0
        if clip > 0:
            norm = self.grad_norm()
            if norm > clip:
                scale = clip / norm
        for name, t in self.params.items():
            v = self.velocity[name]
            v *= mu
            v += t.grad * scale
            t.values -= self.lr_map[name] * v
        return True


@dataclass
class TrainResult:
    params: DualGlanceParams
    normalizer: NormalizerStats | None
    loss_curve: list
    epochs_run: int
    checkpoint: Path | None = None


_IndexedSample = namedtuple("_IndexedSample", ["label", "pos"])


class PreparedPairs:
    """Patch/geometry/context arrays materialized once for a sample list, so
    the training loop is pure tensor math."""

    def __init__(self, dataset: PairDataset, proposals, normalizer, config: ModelConfig,
                 with_context=None):
        samples = dataset.samples
        images = [dataset.load_image(s) for s in samples]
        pairs = [(s.b1, s.b2) for s in samples]
        self.samples = samples
        self.config = config
        self.inputs = pair_inputs(images, pairs, normalizer, config) if config.blocks else {}
        self.labels = np.array([label_index(s.label, config.num_classes) for s in samples])
        self.ctx = self.scales = None
        self.bags = None
        self.bag_ids = None
        if with_context is None:
            with_context = config.has_second_glance
        if with_context:
            self.ctx, self.scales = context_inputs(images, config)
            self.bags, self.bag_ids = [], []
            for s in samples:
                boxes, ids = select_bag(proposals[s.image_id], s.b1, s.b2, config)
                self.bags.append(boxes)
                self.bag_ids.append(ids)

    def __len__(self):
        return len(self.samples)

    def batch_inputs(self, idx) -> dict:
        return {key: arr[idx] for key, arr in self.inputs.items()}

    def class_universe(self):
        return FINE_LABELS if self.config.num_classes == 6 else COARSE_LABELS

    def indexed(self):
        if self.config.num_classes == 6:
            return [_IndexedSample(s.label, i) for i, s in enumerate(self.samples)]
        return [_IndexedSample(fine_to_coarse(s.label), i) for i, s in enumerate(self.samples)]


def fit_pair_normalizer(dataset: PairDataset) -> NormalizerStats:
    """Geometry-feature stats over every person box of the training split."""
    feats = []
    for s in dataset.samples:
        w, h = dataset.dims[s.image_id]
        feats.append(geometry_feature(s.b1, w, h))
        feats.append(geometry_feature(s.b2, w, h))
    return fit_normalizer(feats)


class _LossTracker:
    def __init__(self, schedule: TrainSchedule):
        self.schedule = schedule
        self.curve = []
        self.best = np.inf
        self.stale = 0

    def update(self, epoch_loss: float) -> bool:
        """Record an epoch mean; True when the convergence rule fires."""
        self.curve.append(float(epoch_loss))
        if self.curve[0] > 0 and epoch_loss > 10.0 * self.curve[0] + 1.0:
            raise dc.NumericalError(
                f"training diverged: epoch loss {epoch_loss:.4f} vs initial {self.curve[0]:.4f}; "
                f"curve tail {self.curve[-5:]}")
        if epoch_loss < self.best - self.schedule.min_delta:
            self.best = epoch_loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.schedule.patience


class _TrainLog:
    def __init__(self, out_dir, stage):
        self.fh = None
        if out_dir is not None:
            path = Path(out_dir) / f"stage{stage}.train.log"
            path.parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w")
        self.t0 = time.monotonic()

    def write(self, step, stage, loss, lr):
        if self.fh:
            wall = time.monotonic() - self.t0
            self.fh.write(f"step={step} stage={stage} loss={loss:.6f} lr={lr:g} wall={wall:.2f}\n")

    def close(self):
        if self.fh:
            self.fh.close()


def _checkpoint_meta(config, schedule, stage, epoch, curve, normalizer):
    meta = {
        "config_hash": config.config_hash(),
        "seed": schedule.seed,
        "stage": stage,
        "epoch": epoch,
        "loss_curve": [round(v, 6) for v in curve],
    }
    if normalizer is not None:
        meta["normalizer_mean"] = normalizer.mean.tolist()
        meta["normalizer_std"] = normalizer.std.tolist()
    return meta


def train_stage1(dataset: PairDataset, config: ModelConfig, schedule: TrainSchedule,
                 out_dir=None) -> TrainResult:
    """Optimize cross-entropy on softmax(S1) until the epoch-mean loss stops
    improving (no gain > min_delta for `patience` epochs)."""
    if not config.blocks:
        raise ValueError(f"variant {config.variant!r} has no first glance to train")
    rng = np.random.default_rng([schedule.seed, 1])
    params = init_params(config, rng)
    normalizer = fit_pair_normalizer(dataset) if "bbox" in config.blocks else _unit_normalizer()
    prepared = PreparedPairs(dataset, None, normalizer, config, with_context=False)
    opt = SGDMomentum(params.first.named(), schedule)
    log = _TrainLog(out_dir, stage=1)
    tracker = _LossTracker(schedule)
    step = 0
    epoch = 0
    try:
        for epoch in range(1, schedule.epochs + 1):
            batches = stratified_batches(prepared.indexed(), schedule.batch_size,
                                         seed=[schedule.seed, 1, epoch],
                                         classes=prepared.class_universe())
            losses = []
            for batch in batches:
                idx = np.array([b.pos for b in batch])
                opt.zero_grad()
                with dc.Tape() as tape:
                    s1, _ = first_glance_batch(prepared.batch_inputs(idx), params.first, config)
                    loss = cross_entropy(s1, prepared.labels[idx])
                tape.backward(loss)
                opt.step(batch_id=f"e{epoch}s{step}")
                losses.append(loss.item())
                log.write(step, 1, losses[-1], schedule.lr)
                step += 1
            stop = tracker.update(np.mean(losses))
            if out_dir and schedule.checkpoint_every and epoch % schedule.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"stage1.epoch{epoch:03d}.ckpt", params.named(),
                                _checkpoint_meta(config, schedule, 1, epoch, tracker.curve, normalizer))
            if stop:
                break
    finally:
        log.close()
    ckpt = None
    if out_dir:
        ckpt = Path(out_dir) / "stage1.ckpt"
        save_checkpoint(ckpt, params.named(),
                        _checkpoint_meta(config, schedule, 1, epoch, tracker.curve, normalizer))
    return TrainResult(params, normalizer, tracker.curve, epoch, ckpt)


def _unit_normalizer() -> NormalizerStats:
    return NormalizerStats(mean=np.zeros(5), std=np.ones(5))


def _freeze(params_dict):
    for t in params_dict.values():
        t.requires_grad = False
        t.grad = None


def train_stage2(stage1: TrainResult | None, dataset: PairDataset, proposals,
                 config: ModelConfig, schedule: TrainSchedule, out_dir=None) -> TrainResult:
    """Optimize cross-entropy on softmax(S1 + alpha*S2) with the first glance
    frozen; only second-glance parameters enter the update set."""
    if not config.has_second_glance:
        raise ValueError(f"variant {config.variant!r} has no second glance to train")
    rng = np.random.default_rng([schedule.seed, 2])
    fresh = init_params(config, rng)
    if config.blocks:
        if stage1 is None:
            raise ValueError("stage 2 needs a frozen stage-1 result for this variant")
        params = DualGlanceParams(first=stage1.params.first, second=fresh.second)
        normalizer = stage1.normalizer
        _freeze(params.first.named())
    else:  # rcnn: second glance only
        params = DualGlanceParams(first=None, second=fresh.second)
        normalizer = stage1.normalizer if stage1 else _unit_normalizer()

    prepared = PreparedPairs(dataset, proposals, normalizer, config, with_context=True)
    # frozen first glance: S1 and v_top are constants, computed once
    n = len(prepared)
    if config.blocks:
        s1_all = np.empty((n, config.num_classes), dtype=config.np_dtype)
        vtop_all = np.empty((n, config.k), dtype=config.np_dtype)
        for lo in range(0, n, 256):
            idx = np.arange(lo, min(lo + 256, n))
            s1, vtop = first_glance_batch(prepared.batch_inputs(idx), params.first, config)
            s1_all[idx] = s1.values
            vtop_all[idx] = vtop.values
    else:
        s1_all = np.zeros((n, config.num_classes), dtype=config.np_dtype)
        vtop_all = np.zeros((n, config.k), dtype=config.np_dtype)

    opt = SGDMomentum(params.second.named(), schedule)
    log = _TrainLog(out_dir, stage=2)
    tracker = _LossTracker(schedule)
    step = 0
    epoch = 0
    rcnn = config.variant == "rcnn"
    try:
        for epoch in range(1, schedule.epochs + 1):
            batches = stratified_batches(prepared.indexed(), schedule.batch_size,
                                         seed=[schedule.seed, 2, epoch],
                                         classes=prepared.class_universe())
            losses = []
            for batch in batches:
                idx = np.array([b.pos for b in batch])
                bags = [prepared.bags[i] for i in idx]
                opt.zero_grad()
                with dc.Tape() as tape:
                    s2, _, _ = second_glance_batch(prepared.ctx[idx], prepared.scales[idx],
                                                   bags, vtop_all[idx], params.second, config)
                    if rcnn:
                        logits = s2
                    else:
                        logits = fuse(dc.tensor(s1_all[idx]), s2, config.alpha)
                    loss = cross_entropy(logits, prepared.labels[idx])
                tape.backward(loss)
                opt.step(batch_id=f"e{epoch}s{step}")
                losses.append(loss.item())
                log.write(step, 2, losses[-1], schedule.lr)
                step += 1
            stop = tracker.update(np.mean(losses))
            if out_dir and schedule.checkpoint_every and epoch % schedule.checkpoint_every == 0:
                save_checkpoint(Path(out_dir) / f"stage2.epoch{epoch:03d}.ckpt", params.named(),
                                _checkpoint_meta(config, schedule, 2, epoch, tracker.curve, normalizer))
            if stop:
                break
    finally:
        log.close()
    ckpt = None
    if out_dir:
        ckpt = Path(out_dir) / "stage2.ckpt"
        save_checkpoint(ckpt, params.named(),
                        _checkpoint_meta(config, schedule, 2, epoch, tracker.curve, normalizer))
    return TrainResult(params, normalizer, tracker.curve, epoch, ckpt)
