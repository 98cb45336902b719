import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from tripletdrn.model import EmbeddingVector
from tripletdrn.retrieval import (
    EmbeddingIndex,
    IndexFormatError,
    accuracy_density,
    build_index,
    cosine_distance,
    evaluate_groups,
    evaluate_retrieval,
    mp_at_k,
    precision_at_k,
    query_topk,
    recall_at_4,
)


def random_index(rng, n, d=8):
    return build_index([(f"v{i:03d}", rng.standard_normal(d)) for i in range(n)])


def naive_topk(index, q, k):
    q = np.asarray(q, dtype=np.float64)
    scored = []
    for vid, v in zip(index.ids, index.vectors.astype(np.float64)):
        d = 1.0 - float(np.dot(v, q) / (np.linalg.norm(v) * np.linalg.norm(q)))
        scored.append((min(max(d, 0.0), 2.0), vid))
    scored.sort()
    return [vid for _, vid in scored[:k]]


class TestCosine:
    def test_same(self):
        assert cosine_distance([1.0, 2.0], [1.0, 2.0]) == pytest.approx(0.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_distance([1.0, 0.0], [0.0, 1.0]) == 1.0

    def test_opposite(self):
        assert cosine_distance([1.0, -3.0], [-1.0, 3.0]) == pytest.approx(2.0, abs=1e-15)

    def test_zero_norm(self):
        with pytest.raises(ValueError):
            cosine_distance([0.0, 0.0], [1.0, 0.0])

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, ca, cb):
        a, b = np.random.default_rng(seed).standard_normal((2, 6))
        assert abs(cosine_distance(ca * a, cb * b) - cosine_distance(a, b)) <= 1e-12

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1))
    def test_unit_vector_identity(self, seed):
        a, b = np.random.default_rng(seed).standard_normal((2, 6))
        a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
        assert abs(2 * cosine_distance(a, b) - np.sum((a - b) ** 2)) <= 1e-12


class TestIndex:
    def test_empty(self):
        idx = build_index([], dim=4)
        again = EmbeddingIndex.from_bytes(idx.to_bytes())
        assert len(again) == 0 and again.dim == 4

    def test_round_trip_bitwise(self, tmp_path):
        idx = random_index(np.random.default_rng(0), 20)
        idx.save(tmp_path / "a.drti")
        again = EmbeddingIndex.load(tmp_path / "a.drti")
        assert again.ids == idx.ids
        assert again.to_bytes() == (tmp_path / "a.drti").read_bytes()

    def test_stored_norms(self):
        idx = random_index(np.random.default_rng(1), 100, d=16)
        assert_allclose(np.linalg.norm(idx.vectors.astype(np.float64), axis=1), 1.0, atol=1e-5)

    def test_accepts_embedding_vectors(self):
        idx = build_index([EmbeddingVector(np.array([0.0, 2.0]), "a")])
        assert idx.ids == ["a"]
        assert_allclose(idx.vectors, [[0.0, 1.0]])

    def test_layout(self):
        raw = build_index([("ab", np.array([1.0, 0.0]))]).to_bytes()
        assert raw[:4] == b"DRTI"
        # version, dim, count, then one entry: u16 id length, id, two float32 values
        assert raw[4:20] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little") + (1).to_bytes(8, "little")
        assert raw[20:24] == b"\x02\x00ab" and len(raw) == 24 + 8

    @pytest.mark.parametrize(
        "items",
        [
            [("a", [1.0, 0.0]), ("a", [0.0, 1.0])],
            [("a", [1.0, 0.0]), ("b", [0.0, 1.0, 0.0])],
            [("a", [0.0, 0.0])],
        ],
    )
    def test_rejects_bad_items(self, items):
        with pytest.raises(ValueError):
            build_index(items)

    def test_truncated_and_trailing(self):
        raw = random_index(np.random.default_rng(2), 3).to_bytes()
        for cut in range(len(raw)):
            with pytest.raises(IndexFormatError):
                EmbeddingIndex.from_bytes(raw[:cut])
        with pytest.raises(IndexFormatError):
            EmbeddingIndex.from_bytes(raw + b"x")


class TestQuery:
    def test_self_query_first(self):
        idx = random_index(np.random.default_rng(3), 30)
        res = query_topk(idx, idx.vectors[7], 1)
        assert res.ids == ["v007"]
        assert res.distances[0] == pytest.approx(0.0, abs=1e-6)

    def test_scale_invariant_ranking(self):
        rng = np.random.default_rng(4)
        idx = random_index(rng, 40)
        q = rng.standard_normal(8)
        assert query_topk(idx, q, 40).ids == query_topk(idx, 7.5 * q, 40).ids

    def test_matches_naive_sort(self):
        rng = np.random.default_rng(5)
        for trial in range(100):
            idx = random_index(rng, int(rng.integers(1, 60)), d=int(rng.integers(2, 9)))
            q = rng.standard_normal(idx.dim)
            k = int(rng.integers(1, len(idx) + 3))
            assert query_topk(idx, q, k).ids == naive_topk(idx, q, k), trial

    def test_ties_break_by_id(self):
        idx = build_index([("b", [1.0, 0.0]), ("a", [2.0, 0.0]), ("c", [0.0, 1.0])])
        assert query_topk(idx, [1.0, 0.0], 3).ids == ["a", "b", "c"]

    def test_k_beyond_size(self):
        idx = random_index(np.random.default_rng(6), 3)
        res = query_topk(idx, np.ones(8), 10)
        assert len(res.ids) == 3 and res.truncated

    @pytest.mark.parametrize("q,k", [([1.0, 0.0], 0), ([0.0, 0.0], 1), ([1.0, 0.0, 0.0], 1)])
    def test_bad_queries(self, q, k):
        idx = build_index([("a", [1.0, 0.0])])
        with pytest.raises(ValueError):
            query_topk(idx, q, k)


class TestMetrics:
    def test_mixed_pattern(self):
        ranked = ["r0", "r1", "x2", "r3", "x4"]
        assert precision_at_k(ranked, {"r0", "r1", "r3"}, 5) == (0.6, False)
        assert mp_at_k({"q": ranked}, {"q": {"r0", "r1", "r3"}}, 5) == pytest.approx(0.6, abs=1e-15)

    def test_all_and_none(self):
        ranked = ["a", "b", "c"]
        assert mp_at_k({"q": ranked}, {"q": {"a", "b", "c"}}, 3) == 1.0
        assert mp_at_k({"q": ranked}, {"q": set()}, 3) == 0.0

    def test_mean_over_queries(self):
        rankings = {"q1": ["a", "b"], "q2": ["c", "d"]}
        assert mp_at_k(rankings, {"q1": {"a", "b"}, "q2": {"d"}}, 2) == 0.75

    def test_short_list_flagged(self):
        assert precision_at_k(["a"], {"a"}, 5) == (1.0, True)

    def test_recall4_values(self):
        groups = {"q": {"q", "a", "b", "c"}}
        assert recall_at_4({"q": ["q", "a", "x", "b"]}, groups) == 3
        perfect = {f"q{i}": [f"q{i}", f"a{i}", f"b{i}", f"c{i}"] for i in range(3)}
        pgroups = {q: set(r) for q, r in perfect.items()}
        assert recall_at_4(perfect, pgroups) == 4.0

    def test_recall4_needs_groups_of_four(self):
        with pytest.raises(ValueError):
            recall_at_4({"q": ["q"]}, {"q": {"q", "a", "b"}})

    def test_accuracy_density(self):
        assert accuracy_density(50, 1_000_000) == 5e-5
        assert accuracy_density(0, 123) == 0
        with pytest.raises(ValueError):
            accuracy_density(1.0, 0)


class TestReports:
    def test_evaluate_retrieval(self):
        gallery = build_index([("g0", [1.0, 0.0]), ("g1", [0.9, 0.1]), ("g2", [0.0, 1.0])])
        labels = {"g0": 0, "g1": 0, "g2": 1}
        rep = evaluate_retrieval(gallery, labels, [("q0", np.array([1.0, 0.05]), 0)], ks=(1, 2), params=10)
        assert rep.mp == {1: 1.0, 2: 1.0}
        assert rep.accuracy_density == pytest.approx(100.0 / 10)
        d = json.loads(rep.to_json())
        assert d["mp"] == {"mp@1": 1.0, "mp@2": 1.0} and "timings" in d["log"]
        assert rep.to_text().splitlines()[0] == "mp@1  mp@2"

    def test_evaluate_groups(self):
        rng = np.random.default_rng(7)
        centers = rng.standard_normal((3, 5)) * 10
        items, labels = [], {}
        for g in range(3):
            for i in range(4):
                vid = f"g{g}_{i}"
                items.append((vid, centers[g] + rng.standard_normal(5) * 0.01))
                labels[vid] = g
        rep = evaluate_groups(build_index(items), labels, ["g0_0", "g1_0", "g2_0"])
        assert rep.recall4 == 4.0
        assert "recall@4  4.000" in rep.to_text()

    def test_text_has_no_timings(self):
        rep = evaluate_groups(build_index([(f"{i}", [1.0, i]) for i in range(4)]), {f"{i}": 0 for i in range(4)}, ["0"])
        rep.timings["search"] = 1.234
        assert "1.234" not in rep.to_text()
