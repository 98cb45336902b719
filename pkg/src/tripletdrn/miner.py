"""Online triplet mining inside a mini-batch and the triplet hinge loss."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError, Tensor, _result

logger = logging.getLogger(__name__)

# bumped whenever a batch yields no valid triplet
EMPTY_BATCHES = {"count": 0}


class MiningStrategy(str, enum.Enum):
    HARDEST_NEG_ALL_POS = "hardest_neg_all_pos"
    HARDEST_NEG_HARDEST_POS = "hardest_neg_hardest_pos"
    HARDEST_NEG_EASIEST_POS = "hardest_neg_easiest_pos"
    EASIEST_NEG_ALL_POS = "easiest_neg_all_pos"

    @classmethod
    def parse(cls, value) -> "MiningStrategy":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(f"unknown mining strategy {value!r}; choose from {[s.value for s in cls]}") from None


@dataclass
class PairMasks:
    ap: np.ndarray
    an: np.ndarray


@dataclass
class MiningResult:
    loss: float
    active_triplets: int
    total_triplets: int
    anchor_loss: np.ndarray = field(repr=False)
    hardest_negative_dist: np.ndarray = field(repr=False)
    contributing: np.ndarray = field(repr=False)

    @property
    def empty(self) -> bool:
        return self.total_triplets == 0


def pairwise_sq_dist(emb: np.ndarray) -> np.ndarray:
    """Squared Euclidean distance matrix, symmetric with a zero diagonal."""
    emb = np.asarray(emb, dtype=np.float64)
    sq = (emb * emb).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * emb @ emb.T
    d = np.maximum(d, 0.0)
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


def valid_pair_masks(labels) -> PairMasks:
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    ap = same & ~np.eye(len(labels), dtype=bool)
    return PairMasks(ap=ap, an=~same)


def triplet_loss(d_ap: float, d_an: float, margin: float) -> float:
    if margin <= 0:
        raise ConfigError(f"margin must be positive, got {margin}")
    return max(d_ap - d_an + margin, 0.0)


def _select(dist: np.ndarray, labels, margin: float, strategy: MiningStrategy):
    """Per-anchor selection; returns the coefficient matrix and the result.

    The loss equals ``sum(coef * dist)`` + constant for the chosen triplets,
    which is what the backward pass needs.
    """
    strategy = MiningStrategy.parse(strategy)
    if margin <= 0:
        raise ConfigError(f"margin must be positive, got {margin}")
    b = dist.shape[0]
    masks = valid_pair_masks(labels)
    has_pos = masks.ap.any(axis=1)
    has_neg = masks.an.any(axis=1)
    contributing = has_pos & has_neg
    anchors = np.flatnonzero(contributing)

    hardest_neg = np.full(b, np.nan)
    anchor_loss = np.full(b, np.nan)
    coef = np.zeros((b, b))
    if anchors.size == 0:
        EMPTY_BATCHES["count"] += 1
        logger.warning("batch has no valid (anchor, positive, negative) triplet")
        return coef, MiningResult(0.0, 0, 0, anchor_loss, hardest_neg, contributing)

    neg_d = np.where(masks.an, dist, np.inf)
    hardest_neg[has_neg] = neg_d[has_neg].min(axis=1)
    if strategy is MiningStrategy.EASIEST_NEG_ALL_POS:
        neg_idx = np.argmax(np.where(masks.an, dist, -np.inf), axis=1)
    else:
        neg_idx = np.argmin(neg_d, axis=1)  # argmin returns the lowest index on ties

    rows = np.arange(b)
    d_an = dist[rows, neg_idx]
    hinge = dist - d_an[:, None] + margin  # hinge[i, p] for positive p

    if strategy in (MiningStrategy.HARDEST_NEG_ALL_POS, MiningStrategy.EASIEST_NEG_ALL_POS):
        pos_sel = masks.ap
    else:
        if strategy is MiningStrategy.HARDEST_NEG_HARDEST_POS:
            pos_idx = np.argmax(np.where(masks.ap, dist, -np.inf), axis=1)
        else:
            pos_idx = np.argmin(np.where(masks.ap, dist, np.inf), axis=1)
        pos_sel = np.zeros((b, b), dtype=bool)
        pos_sel[rows, pos_idx] = True
        pos_sel &= masks.ap
    pos_sel = pos_sel & contributing[:, None]

    n_pos = pos_sel.sum(axis=1)
    active = pos_sel & (hinge > 0)
    per_triplet = np.where(active, hinge, 0.0)
    anchor_loss[anchors] = per_triplet[anchors].sum(axis=1) / n_pos[anchors]
    loss = float(anchor_loss[anchors].mean())

    # d loss / d dist: +w on (i, p) and -w on (i, n_i) for every active triplet
    w = np.zeros(b)
    w[anchors] = 1.0 / (n_pos[anchors] * anchors.size)
    coef += active * w[:, None]
    np.add.at(coef, (rows, neg_idx), -active.sum(axis=1) * w)

    result = MiningResult(
        loss=loss,
        active_triplets=int(active.sum()),
        total_triplets=int(pos_sel.sum()),
        anchor_loss=anchor_loss,
        hardest_negative_dist=hardest_neg,
        contributing=contributing,
    )
    return coef, result


def mine_and_loss(embeddings, labels, margin: float = 0.7, strategy=MiningStrategy.HARDEST_NEG_ALL_POS) -> MiningResult:
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError(f"mini-batch needs a (B>=2, D) embedding matrix, got shape {emb.shape}")
    _, result = _select(pairwise_sq_dist(emb), labels, margin, strategy)
    return result


def mined_loss(embeddings: Tensor, labels, margin: float = 0.7, strategy=MiningStrategy.HARDEST_NEG_ALL_POS):
    """Differentiable mined loss; returns (scalar tensor, MiningResult)."""
    emb = embeddings.data
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ValueError(f"mini-batch needs a (B>=2, D) embedding matrix, got shape {emb.shape}")
    coef, result = _select(pairwise_sq_dist(emb), labels, margin, strategy)

    def backward(g):
        # loss = sum_ij coef_ij ||e_i - e_j||^2 with the selection held fixed
        sym = coef + coef.T
        grad = 2.0 * (sym.sum(axis=1)[:, None] * emb - sym @ emb)
        return (grad * g,)

    return _result(np.array(result.loss), (embeddings,), backward), result


def brute_force_oracle(embeddings, labels, margin: float = 0.7, strategy=MiningStrategy.HARDEST_NEG_ALL_POS) -> MiningResult:
    """Reference miner over every (a, p, n) index triple, written with loops."""
    strategy = MiningStrategy.parse(strategy)
    emb = np.asarray(embeddings.data if isinstance(embeddings, Tensor) else embeddings, dtype=np.float64)
    labels = list(np.asarray(labels).tolist())
    b = len(labels)

    def dist(i, j):
        if i == j:
            return 0.0
        diff = emb[i] - emb[j]
        return float(np.dot(diff, diff))

    by_anchor: dict[int, list[tuple[int, int]]] = {}
    for a in range(b):
        for p in range(b):
            for n in range(b):
                if p != a and labels[p] == labels[a] and labels[n] != labels[a]:
                    by_anchor.setdefault(a, []).append((p, n))

    anchor_loss = np.full(b, np.nan)
    hardest = np.full(b, np.nan)
    contributing = np.zeros(b, dtype=bool)
    total = active = 0
    for a, triples in by_anchor.items():
        contributing[a] = True
        negs = sorted({n for _, n in triples})
        poss = sorted({p for p, _ in triples})
        best_n = negs[0]
        worst_n = negs[0]
        for n in negs[1:]:
            if dist(a, n) < dist(a, best_n):
                best_n = n
            if dist(a, n) > dist(a, worst_n):
                worst_n = n
        hardest[a] = dist(a, best_n)
        if strategy is MiningStrategy.EASIEST_NEG_ALL_POS:
            chosen = [(p, worst_n) for p in poss]
        elif strategy is MiningStrategy.HARDEST_NEG_ALL_POS:
            chosen = [(p, best_n) for p in poss]
        else:
            pick = poss[0]
            for p in poss[1:]:
                if strategy is MiningStrategy.HARDEST_NEG_HARDEST_POS and dist(a, p) > dist(a, pick):
                    pick = p
                if strategy is MiningStrategy.HARDEST_NEG_EASIEST_POS and dist(a, p) < dist(a, pick):
                    pick = p
            chosen = [(pick, best_n)]
        losses = [triplet_loss(dist(a, p), dist(a, n), margin) for p, n in chosen]
        total += len(losses)
        active += sum(1 for v in losses if v > 0)
        anchor_loss[a] = sum(losses) / len(losses)

    loss = float(np.mean([anchor_loss[a] for a in by_anchor])) if by_anchor else 0.0
    return MiningResult(loss, active, total, anchor_loss, hardest, contributing)
