"""Gallery ranking, CMC and mAP.

Conventions:

* Gallery entries are sorted by ascending Euclidean distance; ties keep the
  lower gallery index first.
* With same-camera exclusion enabled, gallery entries that share *both* the
  identity and the camera of the query are dropped before ranking.
* A query whose filtered gallery is empty is skipped entirely. A query with a
  non-empty gallery but no true match still counts in the CMC denominator
  (as a miss) but is left out of mAP.
* AP is the non-interpolated mean over relevant items of precision at that
  item's rank.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ShapeError

DEFAULT_RANKS = (1, 5, 10)


@dataclass
class QueryResult:
    query_index: int
    query_id: int
    order: np.ndarray
    matches: np.ndarray
    average_precision: Optional[float]

    @property
    def first_match_rank(self) -> Optional[int]:
        hits = np.flatnonzero(self.matches)
        return int(hits[0]) + 1 if hits.size else None


@dataclass
class RankingReport:
    per_query: List[QueryResult]
    cmc: Dict[int, float]
    map_score: float
    num_queries: int
    skipped_empty_gallery: List[int] = field(default_factory=list)
    skipped_no_match: List[int] = field(default_factory=list)
    protocol: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "mAP": self.map_score,
            "cmc": {str(k): v for k, v in sorted(self.cmc.items())},
            "num_queries": self.num_queries,
            "skipped_empty_gallery": len(self.skipped_empty_gallery),
            "skipped_no_match": len(self.skipped_no_match),
            "protocol": self.protocol,
        }

    def table(self) -> str:
        ranks = sorted(self.cmc)
        head = "| mAP(%) | " + " | ".join(f"CMC@{k}(%)" for k in ranks) + " |"
        sep = "|" + "---|" * (len(ranks) + 1)
        row = f"| {100 * self.map_score:.1f} | " + " | ".join(
            f"{100 * self.cmc[k]:.1f}" for k in ranks) + " |"
        return "\n".join([head, sep, row])

    def write(self, out_dir, dump_rankings=False):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(self.to_record(), indent=2))
        (out / "metrics.md").write_text(self.table() + "\n")
        if dump_rankings:
            with (out / "rankings.jsonl").open("w") as fh:
                for q in self.per_query:
                    fh.write(json.dumps({
                        "query_index": q.query_index, "query_id": q.query_id,
                        "order": q.order.tolist(), "matches": q.matches.astype(int).tolist(),
                        "ap": q.average_precision}) + "\n")


def pairwise_distances(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if query.ndim != 2 or gallery.ndim != 2 or query.shape[1] != gallery.shape[1]:
        raise ShapeError(f"feature dims differ: {query.shape} vs {gallery.shape}")
    return cdist(query, gallery, metric="euclidean")


def rank_gallery(distances: np.ndarray, gallery_ids, gallery_cams, query_id, query_cam,
                 exclude_same_camera: bool = True):
    """Ordered gallery indices and match flags for one query.

    Returns ``(order, matches)``; both are empty when exclusion leaves nothing.
    """
    gallery_ids = np.asarray(gallery_ids)
    gallery_cams = np.asarray(gallery_cams) if gallery_cams is not None else None
    keep = np.ones(len(gallery_ids), dtype=bool)
    if exclude_same_camera and gallery_cams is not None and query_cam is not None:
        keep &= ~((gallery_ids == query_id) & (gallery_cams == query_cam))
    candidates = np.flatnonzero(keep)
    order = candidates[np.argsort(np.asarray(distances)[candidates], kind="stable")]
    return order, gallery_ids[order] == query_id


def average_precision(matches: np.ndarray) -> Optional[float]:
    hits = np.flatnonzero(matches)
    if hits.size == 0:
        return None
    ranks = hits + 1
    return float(np.mean(np.arange(1, hits.size + 1) / ranks))


def cmc_at_k(results: Sequence[QueryResult], k: int) -> float:
    if k < 1:
        raise ValueError(f"CMC rank must be >= 1, got {k}")
    if not results:
        return 0.0
    hits = sum(1 for r in results if r.first_match_rank is not None and r.first_match_rank <= k)
    return hits / len(results)


def mean_average_precision(results: Sequence[QueryResult]) -> float:
    aps = [r.average_precision for r in results if r.average_precision is not None]
    return float(np.mean(aps)) if aps else 0.0


def rank_all(query_feats, gallery_feats, query_ids, gallery_ids, query_cams=None,
             gallery_cams=None, exclude_same_camera=None, ranks=DEFAULT_RANKS) -> RankingReport:
    """Rank every query against the gallery and assemble a report.

    ``exclude_same_camera=None`` turns exclusion on iff camera ids are given.
    """
    if exclude_same_camera is None:
        exclude_same_camera = query_cams is not None and gallery_cams is not None
    dist = pairwise_distances(query_feats, gallery_feats)
    query_ids = np.asarray(query_ids)
    results, skipped_empty, skipped_nomatch = [], [], []
    for qi in range(len(query_ids)):
        qcam = None if query_cams is None else query_cams[qi]
        order, matches = rank_gallery(dist[qi], gallery_ids, gallery_cams, query_ids[qi], qcam,
                                      exclude_same_camera)
        if order.size == 0:
            skipped_empty.append(qi)
            continue
        ap = average_precision(matches)
        if ap is None:
            skipped_nomatch.append(qi)
        results.append(QueryResult(qi, int(query_ids[qi]), order, matches, ap))
    cmc = {int(k): cmc_at_k(results, k) for k in ranks}
    return RankingReport(results, cmc, mean_average_precision(results), len(results),
                         skipped_empty, skipped_nomatch,
                         {"distance": "euclidean", "exclude_same_camera": bool(exclude_same_camera),
                          "ties": "lower gallery index first"})


def evaluate(model, dataset, exclude_same_camera="auto", ranks=DEFAULT_RANKS,
             batch_size=64) -> RankingReport:
    """Rank the query split against the gallery split with post-neck features.

    ``model`` is a :class:`~residual_reid.pipeline.ReidPipeline` or a path to
    a pipeline checkpoint. Features are computed in evaluation mode with the
    latent mean (no sampling). ``"auto"`` exclusion is on iff every query and
    gallery entry has a camera id.
    """
    if not hasattr(model, "features"):
        from .trainer import load_pipeline
        model, _ = load_pipeline(model)
    q_idx, g_idx = dataset.splits["query"], dataset.splits["gallery"]
    if not q_idx or not g_idx:
        raise ShapeError("evaluation needs non-empty query and gallery splits")
    if exclude_same_camera == "auto":
        exclude_same_camera = dataset.has_cameras()
    elif isinstance(exclude_same_camera, str):
        exclude_same_camera = exclude_same_camera.lower() in ("1", "true", "yes", "on")
    qf = model.features(dataset.stack(q_idx), batch_size)
    gf = model.features(dataset.stack(g_idx), batch_size)
    cams = dataset.has_cameras()
    report = rank_all(qf, gf, dataset.labels(q_idx), dataset.labels(g_idx),
                      dataset.cameras(q_idx) if cams else None,
                      dataset.cameras(g_idx) if cams else None,
                      exclude_same_camera=bool(exclude_same_camera), ranks=ranks)
    report.protocol["mode"] = getattr(model, "mode", None)
    report.protocol["alpha"] = getattr(model, "alpha_value", None)
    return report
