"""Exact cosine-distance search over an embedding index, plus evaluation metrics."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

INDEX_MAGIC = b"DRTI"
INDEX_VERSION = 1

# Published full-scale results, echoed next to recomputed ones.
FULL_SCALE_REFERENCE = {
    "rpar_medium_mp@10": 94.54,
    "rpar_hard_mp@10": 80.23,
    "ukb_recall@4": 3.86,
    "accuracy_density_medium": 3.412e-6,
    "accuracy_density_hard": 2.895e-6,
}


class IndexFormatError(ValueError):
    pass


def cosine_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 1e-12 or nb <= 1e-12:
        raise ValueError("cosine distance is undefined for a zero-norm vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


@dataclass
class EmbeddingIndex:
    dim: int
    ids: list[str] = field(default_factory=list)
    vectors: np.ndarray = None  # (n, dim) float32, unit rows

    def __post_init__(self):
        if self.vectors is None:
            self.vectors = np.zeros((0, self.dim), dtype=np.float32)

    def __len__(self) -> int:
        return len(self.ids)

    def to_bytes(self) -> bytes:
        parts = [INDEX_MAGIC, struct.pack("<IIQ", INDEX_VERSION, self.dim, len(self.ids))]
        for i, vid in enumerate(self.ids):
            raw = vid.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(np.ascontiguousarray(self.vectors[i], dtype="<f4").tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EmbeddingIndex":
        if raw[:4] != INDEX_MAGIC:
            raise IndexFormatError("not an index file (bad magic)")
        if len(raw) < 20:
            raise IndexFormatError("index header truncated")
        version, dim, count = struct.unpack_from("<IIQ", raw, 4)
        if version != INDEX_VERSION:
            raise IndexFormatError(f"unsupported index version {version}")
        pos = 20
        ids = []
        vecs = np.empty((count, dim), dtype=np.float32)
        for i in range(count):
            if pos + 2 > len(raw):
                raise IndexFormatError(f"entry {i} truncated at byte {pos}")
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            if pos + n + 4 * dim > len(raw):
                raise IndexFormatError(f"entry {i} truncated at byte {pos}")
            ids.append(raw[pos : pos + n].decode("utf-8"))
            pos += n
            vecs[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
        if pos != len(raw):
            raise IndexFormatError(f"{len(raw) - pos} trailing bytes after last entry")
        return cls(dim, ids, vecs)

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        return cls.from_bytes(Path(path).read_bytes())


def build_index(embeddings: Iterable, dim: int | None = None) -> EmbeddingIndex:
    """Normalize and collect (id, vector) items; accepts EmbeddingVector objects or pairs."""
    ids: list[str] = []
    rows: list[np.ndarray] = []
    for item in embeddings:
        vid, vec = (item.id, item.values) if hasattr(item, "values") else item
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if dim is None:
            dim = vec.size
        if vec.size != dim:
            raise ValueError(f"embedding {vid!r} has dimension {vec.size}, expected {dim}")
        if len(vid.encode("utf-8")) > 0xFFFF:
            raise ValueError(f"id {vid[:32]!r}... too long for the index format")
        norm = np.linalg.norm(vec)
        if norm <= 1e-12:
            raise ValueError(f"embedding {vid!r} has zero norm")
        ids.append(vid)
        rows.append(vec / norm)
    if len(set(ids)) != len(ids):
        seen, dup = set(), None
        for vid in ids:
            if vid in seen:
                dup = vid
                break
            seen.add(vid)
        raise ValueError(f"duplicate id {dup!r}")
    dim = dim or 0
    vecs = np.array(rows, dtype=np.float32).reshape(len(rows), dim)
    return EmbeddingIndex(dim, ids, vecs)


@dataclass
class QueryResult:
    ids: list[str]
    distances: np.ndarray
    truncated: bool = False  # k exceeded the index size

    def __iter__(self):
        return iter(zip(self.ids, self.distances.tolist()))


def _rank(index: EmbeddingIndex, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    vecs = index.vectors.astype(np.float64)
    norms = np.linalg.norm(vecs, axis=1)
    dist = 1.0 - (vecs @ q) / (norms * np.linalg.norm(q))
    dist = np.clip(dist, 0.0, 2.0)
    order = np.lexsort((np.array(index.ids, dtype=object), dist)) if len(index) else np.zeros(0, dtype=int)
    return order, dist


def query_topk(index: EmbeddingIndex, q, k: int) -> QueryResult:
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.size != index.dim:
        raise ValueError(f"query dimension {q.size} does not match index dimension {index.dim}")
    if np.linalg.norm(q) <= 1e-12:
        raise ValueError("query vector has zero norm")
    order, dist = _rank(index, q)
    top = order[:k]
    return QueryResult([index.ids[i] for i in top], dist[top], truncated=k > len(index))


def precision_at_k(ranked: Sequence[str], relevant, k: int) -> tuple[float, bool]:
    """Precision over the first k results; flags queries with fewer than k."""
    top = list(ranked)[:k]
    if not top:
        return 0.0, True
    hits = sum(1 for r in top if r in relevant)
    return hits / len(top), len(top) < k


def mp_at_k(rankings: Mapping[str, Sequence[str]], relevance: Mapping[str, set], k: int) -> float:
    if not rankings:
        raise ValueError("mp@k needs at least one query")
    return float(np.mean([precision_at_k(rankings[q], relevance[q], k)[0] for q in rankings]))


def recall_at_4(rankings: Mapping[str, Sequence[str]], groups: Mapping[str, set]) -> float:
    """Mean number of the query's 4 group members (itself included) in the top 4."""
    if not rankings:
        raise ValueError("recall@4 needs at least one query")
    counts = []
    for q, ranked in rankings.items():
        members = groups[q]
        if len(members) != 4 or q not in members:
            raise ValueError(f"group of query {q!r} must hold exactly 4 images including the query")
        counts.append(sum(1 for r in list(ranked)[:4] if r in members))
    return float(np.mean(counts))


def accuracy_density(accuracy: float, params: int) -> float:
    if params <= 0:
        raise ValueError("parameter count must be positive")
    return accuracy / params


@dataclass
class EvalReport:
    per_query: list[dict]
    mp: dict[int, float]
    recall4: float | None
    accuracy_density: float | None
    param_count: int | None
    config: dict
    timings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mp": {f"mp@{k}": v for k, v in self.mp.items()},
            "recall@4": self.recall4,
            "accuracy_density": self.accuracy_density,
            "param_count": self.param_count,
            "per_query": self.per_query,
            "config": self.config,
            "full_scale_reference": FULL_SCALE_REFERENCE,
            "log": {"timings": self.timings},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self) -> str:
        lines = []
        if self.mp:
            lines.append("  ".join(f"mp@{k}" for k in self.mp))
            lines.append("  ".join(f"{100 * v:.3f}" for v in self.mp.values()))
        if self.recall4 is not None:
            lines.append(f"recall@4  {self.recall4:.3f}  (reference at full scale: {FULL_SCALE_REFERENCE['ukb_recall@4']})")
        if self.accuracy_density is not None:
            lines.append(
                f"accuracy density  {self.accuracy_density:.4e}  over {self.param_count} parameters"
                f"  (reference medium/hard: {FULL_SCALE_REFERENCE['accuracy_density_medium']:.3e}"
                f" / {FULL_SCALE_REFERENCE['accuracy_density_hard']:.3e};"
                f" 98.1/44.5e6 recomputes to {98.1 / 44.5e6:.3e})"
            )
        return "\n".join(lines) + "\n"


def evaluate_retrieval(
    gallery: EmbeddingIndex,
    gallery_labels: Mapping[str, int],
    queries: Sequence[tuple[str, np.ndarray, int]],
    ks: Sequence[int] = (1, 5, 10),
    params: int | None = None,
    config: dict | None = None,
) -> EvalReport:
    """mP@K for held-out queries; relevant = gallery items with the query's label."""
    kmax = max(ks)
    rankings, relevance, rows = {}, {}, []
    for qid, vec, label in queries:
        res = query_topk(gallery, vec, kmax)
        rankings[qid] = res.ids
        relevance[qid] = {gid for gid, lab in gallery_labels.items() if lab == label}
        row = {"query": qid, "top": res.ids}
        for k in ks:
            row[f"p@{k}"] = precision_at_k(res.ids, relevance[qid], k)[0]
        rows.append(row)
    mp = {k: mp_at_k(rankings, relevance, k) for k in ks}
    density = accuracy_density(100 * mp[kmax], params) if params else None
    return EvalReport(rows, mp, None, density, params, config or {})


def evaluate_groups(
    index: EmbeddingIndex, labels: Mapping[str, int], query_ids: Sequence[str], params: int | None = None, config: dict | None = None
) -> EvalReport:
    """recall@4 where queries sit in the index and each label is a group of four."""
    pos = {vid: i for i, vid in enumerate(index.ids)}
    rankings, groups, rows = {}, {}, []
    for qid in query_ids:
        res = query_topk(index, index.vectors[pos[qid]], 4)
        rankings[qid] = res.ids
        groups[qid] = {vid for vid, lab in labels.items() if lab == labels[qid]}
        rows.append({"query": qid, "top": res.ids, "hits": sum(1 for r in res.ids if r in groups[qid])})
    r4 = recall_at_4(rankings, groups)
    density = accuracy_density(r4, params) if params else None
    return EvalReport(rows, {}, r4, density, params, config or {})
