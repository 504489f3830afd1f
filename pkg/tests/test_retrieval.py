import json

import numpy as np
import pytest

from prodembed.retrieval import (
    EmbeddingIndex,
    EmbeddingTriple,
    QueryResult,
    RetrievalRun,
    acc_at_k,
    build_index,
    format_table,
    fused_scores,
    l2_normalize,
    load_index,
    map_at_k,
    mar_at_k,
    metrics_report,
    pair_score,
    save_index,
    topk,
)


def _random_index(rng, n=200, d=16, prefix="i"):
    ids = [f"{prefix}{j:05d}" for j in range(n)]
    mats = [l2_normalize(rng.normal(size=(n, d))) for _ in range(3)]
    return build_index(ids, *mats)


def _random_triple(rng, d=16):
    g, t, v = (l2_normalize(rng.normal(size=(1, d)))[0] for _ in range(3))
    return EmbeddingTriple(global_vec=g, text_vec=t, vision_vec=v)


class TestNormalize:
    def test_unit_rows(self):
        rng = np.random.default_rng(0)
        out = l2_normalize(rng.normal(0, 10, size=(40, 8)))
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_zero_row_stays_finite(self):
        out = l2_normalize(np.zeros((2, 4)))
        assert np.isfinite(out).all()
        np.testing.assert_array_equal(out, 0.0)


class TestPairScore:
    def test_max_of_three(self):
        d = 4
        q = EmbeddingTriple(*(np.eye(d)[i] for i in range(3)))
        item = EmbeddingTriple(
            global_vec=0.2 * np.eye(d)[0],
            text_vec=0.9 * np.eye(d)[1],
            vision_vec=-0.5 * np.eye(d)[2])
        assert pair_score(q, item) == pytest.approx(0.9)

    def test_bounded_by_one_for_unit_vectors(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            s = pair_score(_random_triple(rng), _random_triple(rng))
            assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9

    def test_identical_triple_scores_one(self):
        rng = np.random.default_rng(2)
        t = _random_triple(rng)
        assert pair_score(t, t) == pytest.approx(1.0, abs=1e-6)

    def test_fused_scores_matches_pair_score(self):
        rng = np.random.default_rng(3)
        index = _random_index(rng, n=37)
        q = _random_triple(rng)
        fused = fused_scores(q, index)
        for row in range(len(index.ids)):
            assert fused[row] == pytest.approx(pair_score(q, index.triple(row)),
                                               abs=1e-7)

    def test_max_fusion_dominates_global_only(self):
        rng = np.random.default_rng(4)
        index = _random_index(rng, n=100)
        q = _random_triple(rng)
        fused = fused_scores(q, index)
        global_only = index.globals @ q.global_vec
        assert (fused >= global_only - 1e-12).all()


class TestTopK:
    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(5)
        index = _random_index(rng, n=200)
        for trial in range(10):
            q = _random_triple(rng)
            ids, scores = topk(q, index, 10)
            fused = fused_scores(q, index)
            oracle = sorted(zip(index.ids, fused), key=lambda p: (-p[1], p[0]))[:10]
            assert ids == [i for i, _ in oracle]
            np.testing.assert_allclose(scores, [s for _, s in oracle], atol=1e-12)

    def test_scores_non_increasing(self):
        rng = np.random.default_rng(6)
        index = _random_index(rng)
        _, scores = topk(_random_triple(rng), index, 25)
        assert all(a >= b for a, b in zip(scores, scores[1:]))

    def test_ties_break_by_id(self):
        d = 4
        vec = np.eye(d)[0]
        n = 6
        same = np.tile(vec, (n, 1))
        ids = ["i05", "i01", "i03", "i00", "i04", "i02"]
        index = build_index(ids, same.copy(), same.copy(), same.copy())
        q = EmbeddingTriple(vec, vec, vec)
        got, scores = topk(q, index, 4)
        assert got == ["i00", "i01", "i02", "i03"]
        assert scores == [pytest.approx(1.0)] * 4

    def test_k_larger_than_index(self):
        rng = np.random.default_rng(7)
        index = _random_index(rng, n=5)
        ids, scores = topk(_random_triple(rng), index, 50)
        assert len(ids) == 5


class TestIndexValidation:
    def test_misaligned_rejected(self):
        rng = np.random.default_rng(8)
        g = l2_normalize(rng.normal(size=(4, 8)))
        with pytest.raises(ValueError):
            build_index(["a", "b", "c"], g, g.copy(), g.copy())

    def test_nonfinite_rejected(self):
        g = np.ones((2, 4))
        bad = g.copy()
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            build_index(["a", "b"], g, bad, g.copy())

    def test_rows_are_read_only(self):
        rng = np.random.default_rng(9)
        index = _random_index(rng, n=3)
        with pytest.raises(ValueError):
            index.globals[0, 0] = 5.0


def _run_from_rankings(rankings, relevance):
    results = [QueryResult(query_id=qid, ranked_ids=ids,
                           scores=[0.0] * len(ids),
                           relevant=frozenset(relevance[qid]))
               for qid, ids in rankings.items()]
    return RetrievalRun(results)


class TestMetrics:
    def test_mar_simple(self):
        run = _run_from_rankings(
            {"q0": ["a", "b", "c"], "q1": ["x", "y", "z"]},
            {"q0": {"a", "d"}, "q1": {"x", "y", "z"}})
        # recalls: 1/2 and 3/3 -> mean 0.75
        assert mar_at_k(run, 3) == pytest.approx(0.75)

    def test_map_worked_example(self):
        # Relevant at ranks 1 and 3 of 2 relevant items:
        # AP = (1/1 + 2/3) / 2 = 0.8333...
        run = _run_from_rankings({"q": ["r1", "x", "r2", "y"]},
                                 {"q": {"r1", "r2"}})
        assert map_at_k(run, 10) == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_map_denominator_truncates_at_k(self):
        # 5 relevant, k=2, both retrieved slots relevant: AP = (1 + 1)/2 = 1.
        run = _run_from_rankings({"q": ["a", "b"]},
                                 {"q": {"a", "b", "c", "d", "e"}})
        assert map_at_k(run, 2) == pytest.approx(1.0)

    def test_perfect_and_empty_rankings(self):
        run = _run_from_rankings({"q": ["a", "b"]}, {"q": {"a", "b"}})
        assert mar_at_k(run, 2) == 1.0
        assert map_at_k(run, 2) == 1.0
        miss = _run_from_rankings({"q": ["x", "y"]}, {"q": {"a"}})
        assert mar_at_k(miss, 2) == 0.0
        assert map_at_k(miss, 2) == 0.0

    def test_monotone_in_k(self):
        run = _run_from_rankings({"q": ["x", "a", "y", "b"]},
                                 {"q": {"a", "b"}})
        recalls = [mar_at_k(run, k) for k in (1, 2, 3, 4)]
        assert recalls == sorted(recalls)
        assert recalls == [0.0, 0.5, 0.5, 1.0]

    def test_empty_relevance_raises(self):
        run = _run_from_rankings({"q": ["x"]}, {"q": set()})
        with pytest.raises(ValueError):
            mar_at_k(run, 1)
        with pytest.raises(ValueError):
            map_at_k(run, 1)

    def test_acc_at_k(self):
        logits = np.array([[0.1, 0.9, 0.0],
                           [0.8, 0.1, 0.1],
                           [0.2, 0.3, 0.5]])
        labels = [1, 2, 2]
        assert acc_at_k(logits, labels, 1) == pytest.approx(2 / 3)
        assert acc_at_k(logits, labels, 2) == pytest.approx(2 / 3)
        assert acc_at_k(logits, labels, 3) == 1.0


class TestStore:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        index = _random_index(rng, n=23, d=8)
        path = tmp_path / "emb.bin"
        save_index(path, index)
        back = load_index(path)
        assert back.ids == index.ids
        assert back.dim == 8
        np.testing.assert_array_equal(back.globals, index.globals)
        np.testing.assert_array_equal(back.texts, index.texts)
        np.testing.assert_array_equal(back.visions, index.visions)

    def test_no_partial_left_behind(self, tmp_path):
        rng = np.random.default_rng(11)
        save_index(tmp_path / "e.bin", _random_index(rng, n=3))
        assert list(tmp_path.glob("*.partial")) == []

    def test_header_salted(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"vec-v2 3 8\n")
        with pytest.raises(ValueError):
            load_index(path)

    def test_truncated_block(self, tmp_path):
        rng = np.random.default_rng(12)
        index = _random_index(rng, n=4, d=4)
        path = tmp_path / "e.bin"
        save_index(path, index)
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError):
            load_index(path)


class TestReports:
    def test_format_table_alignment(self):
        table = format_table(["metric", "dev"], [["mar@10", "0.5000"],
                                                 ["map@10", "0.2500"]])
        lines = table.splitlines()
        assert len(lines) == 4
        assert lines[0].endswith("dev")
        assert all(len(l) == len(lines[0]) for l in lines[1:])

    def test_metrics_report_json(self):
        payload, table = metrics_report(
            {"dev": {"mar@10": 0.5, "map@10": 0.25}}, 10)
        rec = json.loads(payload)
        assert rec["k"] == 10
        assert rec["metrics"]["dev"]["mar@10"] == 0.5
        assert "mar@10" in table
