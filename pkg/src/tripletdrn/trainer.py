"""SGD training loop over label-balanced mini-batches with online mining."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .layers import GEM_P_MAX, GEM_P_MIN
from .miner import MiningStrategy, mined_loss
from .model import MiniDRN, save_checkpoint
from .tensor import ConfigError, ShapeError, Tensor

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 32
    margin: float = 0.7
    epochs: int = 20
    seed: int = 0
    strategy: str = MiningStrategy.HARDEST_NEG_ALL_POS.value
    classes_per_batch: int = 8
    samples_per_class: int = 4
    resize: int | None = None
    crop: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> None:
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr, momentum and weight_decay must be non-negative")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.epochs < 1:
            raise ConfigError("epochs must be positive")
        if self.classes_per_batch < 2 or self.samples_per_class < 2:
            raise ConfigError("need at least 2 classes per batch and 2 samples per class")
        if self.classes_per_batch * self.samples_per_class != self.batch_size:
            raise ConfigError(
                f"classes_per_batch * samples_per_class = {self.classes_per_batch * self.samples_per_class} "
                f"differs from batch_size {self.batch_size}"
            )
        MiningStrategy.parse(self.strategy)


PRESETS = {
    # hyperparameters of the full-scale setup, images resized to 240 and center-cropped to 228
    "paper": TrainConfig(
        lr=1e-4,
        momentum=0.9,
        weight_decay=5e-5,
        batch_size=55,
        margin=0.7,
        epochs=20,
        classes_per_batch=11,
        samples_per_class=5,
        resize=240,
        crop=228,
    ),
    # CPU scale: from-scratch weights need a far larger step than fine-tuning
    "desk": TrainConfig(lr=0.05, momentum=0.9, weight_decay=5e-5, batch_size=32, margin=0.7, epochs=20),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class OptimState:
    velocity: list[np.ndarray]

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor]) -> "OptimState":
        return cls([np.zeros_like(p.data) for p in params])


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: OptimState, cfg: TrainConfig, gem: Tensor | None = None) -> None:
    """In-place momentum SGD with L2 weight decay folded into the gradient."""
    if len(params) != len(grads) or len(params) != len(state.velocity):
        raise ShapeError("params, grads and optimizer state have different lengths")
    for p, g, v in zip(params, grads, state.velocity):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or v.shape != p.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.name or ''} {p.data.shape}")
        g = g + cfg.weight_decay * p.data
        v *= cfg.momentum
        v += g
        p.data -= cfg.lr * v
    if gem is not None:
        np.clip(gem.data, GEM_P_MIN, GEM_P_MAX, out=gem.data)


def make_batches(labels: Sequence[int], p: int, q: int, seed: int, epoch: int) -> list[np.ndarray]:
    """P distinct classes x Q images per batch, deterministic in (seed, epoch).

    Classes are visited in a shuffled cycle so every class appears; classes
    with fewer than Q images are sampled with replacement (see ``undersized``).
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < p:
        raise ConfigError(f"dataset has {len(classes)} classes, fewer than P={p}")
    rng = np.random.default_rng([int(seed), int(epoch), 0xBA7C])
    members = {c: np.flatnonzero(labels == c) for c in classes}
    n_batches = max(1, len(labels) // (p * q))
    queue: list = []
    batches = []
    for _ in range(n_batches):
        chosen: list = []
        while len(chosen) < p:
            if not queue:
                queue = list(rng.permutation(classes))
            c = queue.pop(0)
            # a class repeated across a reshuffle boundary is skipped
            if c not in chosen:
                chosen.append(c)
        idx = []
        for c in chosen:
            pool = members[c]
            idx.extend(rng.choice(pool, size=q, replace=len(pool) < q))
        batches.append(np.array(idx))
    return batches


def undersized(labels: Sequence[int], q: int) -> list[int]:
    labels = np.asarray(labels)
    return [int(c) for c in np.unique(labels) if (labels == c).sum() < q]


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    active_fraction: float
    gem_p: float


def train(model: MiniDRN, images: np.ndarray, labels: Sequence[int], cfg: TrainConfig, checkpoint_dir=None, log_path=None) -> list[EpochStats]:
    """Train ``model`` in place; returns per-epoch statistics."""
    cfg.validate()
    labels = np.asarray(labels)
    short = undersized(labels, cfg.samples_per_class)
    if short:
        logger.warning("classes with fewer than %d images are sampled with replacement: %s", cfg.samples_per_class, short[:10])
    named = model.named_parameters()
    params = [t for _, t in named]
    state = OptimState.zeros_like(params)
    stats: list[EpochStats] = []
    for epoch in range(1, cfg.epochs + 1):
        losses, active, total = [], 0, 0
        for b, idx in enumerate(make_batches(labels, cfg.classes_per_batch, cfg.samples_per_class, cfg.seed, epoch)):
            for t in params:
                t.grad = None
            emb = model.forward(Tensor(images[idx]))
            loss, res = mined_loss(emb, labels[idx], cfg.margin, cfg.strategy)
            if not np.isfinite(res.loss) or not np.all(np.isfinite(emb.data)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}")
            if loss.requires_grad and res.active_triplets:
                loss.backward()
            grads = [t.grad for t in params]
            for (name, _), g in zip(named, grads):
                if g is not None and not np.all(np.isfinite(g)):
                    raise TrainingDiverged(f"non-finite gradient in {name} at epoch {epoch}, batch {b}")
            sgd_step(params, grads, state, cfg, gem=model.gem_p)
            for name, t in named:
                if not np.all(np.isfinite(t.data)):
                    raise TrainingDiverged(f"non-finite value in {name} after epoch {epoch}, batch {b}")
            losses.append(res.loss)
            active += res.active_triplets
            total += res.total_triplets
        st = EpochStats(epoch, float(np.mean(losses)), active / total if total else 0.0, float(model.gem_p.data[0]))
        stats.append(st)
        logger.info("epoch %d loss %.4f active %.3f p %.3f", st.epoch, st.mean_loss, st.active_fraction, st.gem_p)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, Path(checkpoint_dir) / f"epoch{epoch:03d}.drck")
    if log_path is not None:
        write_stats(stats, log_path)
    return stats


def write_stats(stats: Sequence[EpochStats], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "active_fraction", "gem_p"])
        for s in stats:
            w.writerow([s.epoch, repr(s.mean_loss), repr(s.active_fraction), repr(s.gem_p)])
