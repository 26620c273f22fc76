import json
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from setdist.data import SyntheticConfig, generate
from setdist.evaluate import (
    CSV_COLUMNS,
    RankingResult,
    average_precisions,
    cmc,
    evaluate,
    mean_average_precision,
    rank_gallery,
    reports_to_csv,
    reports_to_json,
    sweep_lambda,
    sweep_window,
)
from setdist.measures import Tracklet
from setdist.ot import DistanceParams, cost_matrix


def point(x, identity, camera, tid):
    return Tracklet(np.array([[float(x)]]), identity, camera, tid)


def ranking(query, ids):
    return RankingResult(query, tuple(ids), np.arange(len(ids), dtype=float))


@pytest.fixture(scope="module")
def small():
    return generate(SyntheticConfig(num_identities=6, raw_dim=8, seed=4)).tracklets


class TestRankGallery:
    def test_copy_ranked_first(self, rng):
        q = Tracklet(rng.normal(size=(4, 3)), 0, 0, "q")
        gallery = [Tracklet(rng.normal(size=(3, 3)), 1, 1, "a"),
                   Tracklet(q.frames.copy(), 0, 1, "copy"),
                   Tracklet(rng.normal(size=(5, 3)), 2, 1, "b")]
        r = rank_gallery(q, gallery, method="exact")
        assert r.gallery_ids[0] == "copy"
        assert r.distances[0] == pytest.approx(0.0, abs=1e-12)

    def test_singleton_gallery(self):
        r = rank_gallery(point(0, 0, 0, "q"), [point(1, 1, 1, "g")], method="exact")
        assert r.gallery_ids == ("g",)

    def test_hand_built_order(self):
        gallery = [point(0.5, 1, 1, "first"), point(0.1, 2, 1, "second"), point(0.9, 3, 1, "third")]
        r = rank_gallery(point(0.0, 0, 0, "q"), gallery, method="mean_euclid")
        assert r.gallery_ids == ("second", "first", "third")
        np.testing.assert_allclose(r.distances, [0.1, 0.5, 0.9])

    def test_ties_keep_gallery_order(self):
        gallery = [point(1, 1, 1, "b"), point(-1, 2, 1, "a"), point(1, 3, 1, "c")]
        r = rank_gallery(point(0, 0, 0, "q"), gallery, method="exact")
        assert r.gallery_ids == ("b", "a", "c")

    def test_exclusions(self):
        q = point(0, 0, 0, "q")
        gallery = [q, point(0, 0, 0, "same-cam"), point(1, 0, 1, "other-cam"), point(2, 1, 0, "neg")]
        assert rank_gallery(q, gallery, method="exact").gallery_ids == ("other-cam", "neg")
        r = rank_gallery(q, gallery, method="exact", cross_camera=False)
        assert r.gallery_ids == ("same-cam", "other-cam", "neg")

    def test_empty_gallery(self):
        with pytest.raises(ValueError):
            rank_gallery(point(0, 0, 0, "q"), [])

    def test_distances_nondecreasing(self, small):
        r = rank_gallery(small[0], small[1:], method="sinkhorn")
        assert np.all(np.diff(r.distances) >= 0)
        assert len(set(r.gallery_ids)) == len(r.gallery_ids)

    def test_exact_and_sharp_sinkhorn_agree_when_separated(self, rng):
        centers = np.arange(6)[:, None] * 10.0
        q = Tracklet(rng.normal(size=(3, 1)) * 0.1, 0, 0, "q")
        gallery = [Tracklet(c + rng.normal(size=(3, 1)) * 0.1, k + 1, 1, f"g{k}")
                   for k, c in enumerate(centers[rng.permutation(6)])]
        a = rank_gallery(q, gallery, method="exact")
        b = rank_gallery(q, gallery, method="sinkhorn", params=DistanceParams(lam=100))
        assert a.gallery_ids == b.gallery_ids


class TestMetrics:
    def test_second_position(self):
        res = cmc([ranking("q", ["x", "y", "z"])], {"q": 0, "x": 1, "y": 0, "z": 2}, ranks=(1, 5))
        assert res == {1: 0.0, 5: 1.0}

    def test_all_first(self):
        ids = {"q1": 0, "a": 0, "b": 1, "q2": 1}
        res = cmc([ranking("q1", ["a", "b"]), ranking("q2", ["b", "a"])], ids)
        assert res[1] == 1.0

    def test_two_queries(self):
        ids = {"q1": 0, "q2": 1, "a": 0, "b": 1, "c": 2}
        rs = [ranking("q1", ["a", "b", "c"]), ranking("q2", ["a", "c", "b"])]
        assert cmc(rs, ids, ranks=(1, 5)) == {1: 0.5, 5: 1.0}

    def test_no_valid_match(self):
        with pytest.raises(ValueError, match="q"):
            cmc([ranking("q", ["x"])], {"q": 0, "x": 1})
        with pytest.raises(ValueError):
            mean_average_precision([ranking("q", ["x"])], {"q": 0, "x": 1})

    def test_ap_examples(self):
        ids = {"q": 0, "a": 1, "b": 0, "c": 2, "d": 0}
        assert average_precisions([ranking("q", ["a", "b", "c"])], ids)["q"] == pytest.approx(0.5)
        assert average_precisions([ranking("q", ["b", "d", "a"])], ids)["q"] == 1.0
        assert average_precisions([ranking("q", ["b", "a", "d"])], ids)["q"] == pytest.approx(5 / 6)

    def test_map_is_mean(self):
        ids = {"q1": 0, "q2": 0, "a": 1, "b": 0}
        rs = [ranking("q1", ["a", "b"]), ranking("q2", ["b", "a"])]
        assert mean_average_precision(rs, ids) == pytest.approx(0.75)

    @given(st.integers(0, 2**32 - 1))
    def test_rank_metrics_invariant_under_monotone_map(self, seed):
        rng = np.random.default_rng(seed)
        ts = [point(x, int(i), int(c), f"t{k}") for k, (x, i, c) in
              enumerate(zip(rng.normal(size=10), rng.integers(0, 3, 10), rng.integers(0, 2, 10)))]
        # mean_euclid = |dx|; exact = dx^2 is a strictly increasing transform of it
        a = evaluate(ts, method="mean_euclid", cross_camera=False)
        b = evaluate(ts, method="exact", cross_camera=False)
        assert a.cmc == b.cmc and a.map_score == b.map_score


class TestEvaluate:
    def test_report(self, small):
        rep = evaluate(small, method="gaussian")
        assert set(rep.cmc) == {1, 5, 20}
        assert rep.cmc[1] <= rep.cmc[5] <= rep.cmc[20] <= 1
        assert 0 <= rep.map_score <= 1
        assert len(rep.per_query_ap) == len(small)
        assert rep.lam is None

    def test_threads_do_not_change_results(self, small):
        a = evaluate(small, method="sinkhorn")
        b = evaluate(small, method="sinkhorn", threads=3)
        assert a.row() == b.row() and a.per_query_ap == b.per_query_ap

    def test_skips_queries_without_match(self, caplog):
        ts = [point(0, 0, 0, "a"), point(1, 0, 1, "b"), point(5, 1, 0, "lonely")]
        with caplog.at_level(logging.WARNING):
            rep = evaluate(ts, method="exact")
        assert set(rep.per_query_ap) == {"a", "b"}
        assert "lonely" in caplog.text


class TestSweeps:
    def test_lambda_rows(self, small):
        reps = sweep_lambda(small, None, [20.0])
        assert len(reps) == 1 and reps[0].lam == 20.0

    def test_duplicate_lambdas(self, small):
        a, b = sweep_lambda(small, None, [5.0, 5.0])
        assert a.row() == b.row()

    def test_lambda_zero_row_is_mean_cost(self, small):
        rep = sweep_lambda(small, None, [0.0])[0]
        q = small[0]
        gallery = [t for t in small if not (t.identity == q.identity and t.camera == q.camera)]
        means = np.array([cost_matrix(q.frames, g.frames).mean() for g in gallery])
        r = rank_gallery(q, small, method="sinkhorn", params=DistanceParams(lam=0.0))
        np.testing.assert_array_equal(np.sort(means), r.distances)
        assert rep.per_query_ap[q.tracklet_id] == pytest.approx(
            average_precisions([r], {t.tracklet_id: t.identity for t in small})[q.tracklet_id])

    def test_window_one_equals_plain(self, small):
        rep = sweep_window(small, None, [1], method="sinkhorn")[0]
        plain = evaluate(small, method="sinkhorn")
        assert rep.row() == plain.row() and rep.per_query_ap == plain.per_query_ap

    def test_window_clamp_warns(self, small, caplog):
        with caplog.at_level(logging.WARNING):
            reps = sweep_window(small, None, [100], method="mean_euclid")
        assert "clamped" in caplog.text
        assert reps[0].window == 100

    def test_csv(self, small):
        reps = sweep_window(small, None, [1, 2], method="gaussian")
        text = reports_to_csv(reps)
        lines = text.splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert lines[1].startswith("gaussian,,1,") and lines[2].startswith("gaussian,,2,")
        assert text == reports_to_csv(sweep_window(small, None, [1, 2], method="gaussian"))

    def test_json(self, small):
        reps = sweep_lambda(small, None, [0.0, 10.0], window=2)
        payload = json.loads(reports_to_json(reps))
        assert [p["lambda"] for p in payload] == ["0", "10"]
        assert all(p["K"] == "2" for p in payload)
        assert set(payload[0]) == set(CSV_COLUMNS) | {"per_query_ap"}
