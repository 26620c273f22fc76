"""Retrieval evaluation: gallery ranking, CMC, mAP and sensitivity sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from setdist.linalg import psd_sqrt
from setdist.measures import Tracklet, estimate_gaussian
from setdist.ot import (
    DistanceParams,
    Embedder,
    _gaussian_w2,
    distance_between,
    normalize_method,
    prepare,
)

log = logging.getLogger(__name__)

DEFAULT_RANKS = (1, 5, 20)
CSV_COLUMNS = ("method", "lambda", "K", "top1", "top5", "top20", "mAP")


@dataclass(frozen=True)
class RankingResult:
    query_id: str
    gallery_ids: tuple[str, ...]
    distances: np.ndarray


@dataclass
class EvalReport:
    method: str
    lam: float | None
    window: int
    cmc: dict[int, float]
    map_score: float
    per_query_ap: dict[str, float] = field(default_factory=dict)

    def row(self) -> dict[str, str]:
        return {
            "method": self.method,
            "lambda": "" if self.lam is None else f"{self.lam:g}",
            "K": str(self.window),
            "top1": f"{self.cmc.get(1, float('nan')):.6f}",
            "top5": f"{self.cmc.get(5, float('nan')):.6f}",
            "top20": f"{self.cmc.get(20, float('nan')):.6f}",
            "mAP": f"{self.map_score:.6f}",
        }

    def to_json(self) -> dict:
        out: dict = dict(self.row())
        out["per_query_ap"] = {k: round(v, 12) for k, v in self.per_query_ap.items()}
        return out


class _PairwiseEngine:
    """Prepares each tracklet once and memoises symmetric pair distances."""

    def __init__(self, tracklets: Sequence[Tracklet], model: Embedder | None, method: str,
                 params: DistanceParams):
        self.method = normalize_method(method)
        self.params = params
        self.feats = [prepare(t.frames, model, params.window) for t in tracklets]
        self._gauss = None
        if self.method == "gaussian":
            self._gauss = []
            for f in self.feats:
                g = estimate_gaussian(f, params.eps)
                self._gauss.append((g.mean, g.covariance, psd_sqrt(g.covariance)))
        self._cache: dict[tuple[int, int], float] = {}

    def distance(self, i: int, j: int) -> float:
        key = (i, j) if i <= j else (j, i)
        if key not in self._cache:
            a, b = key
            if self._gauss is not None:
                ma, ca, sa = self._gauss[a]
                mb, cb, _ = self._gauss[b]
                value = _gaussian_w2(ma, ca, sa, mb, cb)
            else:
                value = distance_between(self.feats[a], self.feats[b], self.method, self.params).value
            self._cache[key] = value
        return self._cache[key]


def _rank(query_idx: int, candidates: list[int], engine: _PairwiseEngine,
          tracklets: Sequence[Tracklet]) -> RankingResult:
    dists = np.array([engine.distance(query_idx, g) for g in candidates])
    order = np.argsort(dists, kind="stable")
    return RankingResult(
        tracklets[query_idx].tracklet_id,
        tuple(tracklets[candidates[k]].tracklet_id for k in order),
        dists[order],
    )


def _candidates(query: Tracklet, gallery: Sequence[Tracklet], cross_camera: bool) -> list[int]:
    out = []
    for k, g in enumerate(gallery):
        if g.tracklet_id == query.tracklet_id:
            continue
        if cross_camera and g.identity == query.identity and g.camera == query.camera:
            continue
        out.append(k)
    return out


def rank_gallery(query: Tracklet, gallery: Sequence[Tracklet], model: Embedder | None = None,
                 method: str = "sinkhorn", params: DistanceParams | None = None,
                 cross_camera: bool = True) -> RankingResult:
    """Gallery ids sorted by ascending set distance to the query.

    Entries with the query's own id are dropped; with ``cross_camera``,
    entries of the query's identity seen by the query's camera are dropped
    too.  Ties keep gallery order.
    """
    if not gallery:
        raise ValueError("gallery is empty")
    params = params or DistanceParams()
    pool = [query, *gallery]
    engine = _PairwiseEngine(pool, model, method, params)
    cands = [k + 1 for k in _candidates(query, gallery, cross_camera)]
    return _rank(0, cands, engine, pool)


def _first_hits(rankings: Iterable[RankingResult], identities: dict[str, int]):
    for r in rankings:
        qid = identities[r.query_id]
        hits = np.array([identities[g] == qid for g in r.gallery_ids], dtype=bool)
        if not hits.any():
            raise ValueError(f"query {r.query_id} has no valid gallery match")
        yield r.query_id, hits


def cmc(rankings: Sequence[RankingResult], identities: dict[str, int],
        ranks: Iterable[int] = DEFAULT_RANKS) -> dict[int, float]:
    """Fraction of queries whose first correct match is within the top k."""
    ranks = sorted(set(int(k) for k in ranks))
    firsts = [int(np.argmax(h)) + 1 for _, h in _first_hits(rankings, identities)]
    if not firsts:
        return {k: float("nan") for k in ranks}
    firsts_arr = np.array(firsts)
    return {k: float(np.mean(firsts_arr <= k)) for k in ranks}


def average_precisions(rankings: Sequence[RankingResult], identities: dict[str, int]) -> dict[str, float]:
    out = {}
    for qid, hits in _first_hits(rankings, identities):
        positions = np.flatnonzero(hits) + 1
        precision = np.arange(1, len(positions) + 1) / positions
        out[qid] = float(precision.mean())
    return out


def mean_average_precision(rankings: Sequence[RankingResult], identities: dict[str, int]) -> float:
    aps = average_precisions(rankings, identities)
    return float(np.mean(list(aps.values()))) if aps else float("nan")


def evaluate(tracklets: Sequence[Tracklet], model: Embedder | None = None,
             method: str = "sinkhorn", params: DistanceParams | None = None,
             ranks: Iterable[int] = DEFAULT_RANKS, cross_camera: bool = True,
             threads: int = 1) -> EvalReport:
    """Every tracklet queries all the others.

    Queries left without a valid match after the exclusions are skipped
    (and logged).
    """
    params = params or DistanceParams()
    method = normalize_method(method)
    engine = _PairwiseEngine(tracklets, model, method, params)
    identities = {t.tracklet_id: t.identity for t in tracklets}
    jobs = []
    for q, t in enumerate(tracklets):
        cands = _candidates(t, tracklets, cross_camera)
        if not any(tracklets[g].identity == t.identity for g in cands):
            log.warning("query %s has no valid match; skipped", t.tracklet_id)
            continue
        jobs.append((q, cands))
    if threads > 1:
        # pair values are deterministic, so a duplicated computation under a race is harmless
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rankings = list(pool.map(lambda job: _rank(job[0], job[1], engine, tracklets), jobs))
    else:
        rankings = [_rank(q, cands, engine, tracklets) for q, cands in jobs]
    aps = average_precisions(rankings, identities)
    return EvalReport(
        method=method,
        lam=params.lam if method == "sinkhorn" else None,
        window=params.window,
        cmc=cmc(rankings, identities, ranks),
        map_score=float(np.mean(list(aps.values()))) if aps else float("nan"),
        per_query_ap=aps,
    )


def sweep_lambda(tracklets: Sequence[Tracklet], model: Embedder | None,
                 lambdas: Iterable[float], window: int = 1,
                 params: DistanceParams | None = None, **kwargs) -> list[EvalReport]:
    base = params or DistanceParams()
    return [
        evaluate(tracklets, model, "sinkhorn", replace(base, lam=float(lam), window=window), **kwargs)
        for lam in lambdas
    ]


def sweep_window(tracklets: Sequence[Tracklet], model: Embedder | None,
                 windows: Iterable[int], method: str = "sinkhorn",
                 params: DistanceParams | None = None, **kwargs) -> list[EvalReport]:
    base = params or DistanceParams()
    shortest = min(t.num_frames for t in tracklets)
    reports = []
    for k in windows:
        if k > shortest:
            log.warning("window %d exceeds shortest tracklet (%d frames); clamped per tracklet",
                        k, shortest)
        reports.append(evaluate(tracklets, model, method, replace(base, window=int(k)), **kwargs))
    return reports


def reports_to_csv(reports: Iterable[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def reports_to_json(reports: Iterable[EvalReport]) -> str:
    return json.dumps([r.to_json() for r in reports], indent=2, sort_keys=True) + "\n"
