"""Organ scoring from text queries, retrieval metrics, and embedding-space analyses."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import OrganAnchorPair, TextHead, embed_text
from .core.io import atomic_write_bytes, save_tensor
from .core.tensor import Tensor, no_grad
from .corpus import SymptomRecord
from .errors import ContractError, DegenerateVectorError, DimensionError

NORM_FLOOR = 1e-12
POSITIVE_WEIGHT = 0.5   # planted weight at or above which an organ counts as a positive label


# -- scoring -------------------------------------------------------------------


def _unit_rows(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(n < NORM_FLOOR):
        raise DegenerateVectorError(f"vector norm below {NORM_FLOOR:g}")
    return x / n


def build_gallery(fused_by_case: np.ndarray) -> np.ndarray:
    """``(n_cases, N, D, d)`` fused features -> per-organ rows ``(N, n_cases * D, d)``."""
    c, n, D, d = fused_by_case.shape
    return fused_by_case.transpose(1, 0, 2, 3).reshape(n, c * D, d)


def project_queries(head: TextHead, proj, embeddings) -> np.ndarray:
    """Text embeddings ``(..., d_txt)`` -> image-space query features ``(..., d_img)``."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if np.any(np.linalg.norm(emb, axis=-1) < NORM_FLOOR):
        raise DegenerateVectorError("query embedding has (near) zero norm")
    with no_grad():
        return proj(Tensor(embed_text(head, emb))).data


def gallery_scores(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """``(q, d)`` projected queries vs ``(N, R, d)`` gallery -> ``(q, N)`` scores in [0, 1].

    score = (mean cosine between the query and the organ's rows + 1) / 2.
    """
    if queries.shape[-1] != gallery.shape[-1]:
        raise DimensionError(f"query width {queries.shape[-1]} vs gallery width {gallery.shape[-1]}")
    q = _unit_rows(np.atleast_2d(queries))
    g = _unit_rows(gallery)
    sims = np.einsum("qd,nrd->qn", q, g) / g.shape[1]
    return np.clip((sims + 1.0) / 2.0, 0.0, 1.0)


def infer_organ_scores(query_embedding, head: TextHead, proj, gallery: np.ndarray, n_organs: int | None = None,
                       anchors: list[OrganAnchorPair] | None = None, use_anchors: bool = False) -> np.ndarray:
    """Per-organ scores in [0, 1] (not a distribution) for one text embedding.

    With ``use_anchors`` the organ's positive anchor, sent through the same text
    path, replaces the query and is compared with the organ's mean fused feature.
    That variant does not depend on the query.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    if n_organs is not None and gallery.shape[0] != n_organs:
        raise ContractError(f"gallery has {gallery.shape[0]} organs, expected {n_organs}")
    if use_anchors:
        if anchors is None or len(anchors) != gallery.shape[0]:
            raise ContractError("anchor scoring needs one anchor pair per gallery organ")
        # The query is still validated so that a degenerate input fails the same way.
        project_queries(head, proj, query_embedding)
        a = _unit_rows(project_queries(head, proj, np.stack([p.v_plus for p in anchors])))
        centroids = _unit_rows(gallery.mean(axis=1))
        return np.clip((np.sum(a * centroids, axis=-1) + 1.0) / 2.0, 0.0, 1.0)
    return gallery_scores(project_queries(head, proj, query_embedding), gallery)[0]


def score_text_features(features, proj, gallery: np.ndarray) -> np.ndarray:
    """Scores for queries given directly as text-head features ``(q, d_feat)``."""
    with no_grad():
        queries = proj(Tensor(np.atleast_2d(features))).data
    return gallery_scores(queries, gallery)


def out_of_domain_features(train_features, train_organs, n: int, rng: np.random.Generator) -> np.ndarray:
    """Random text-head features orthogonal to every organ's mean train feature.

    Draws are Gaussian, projected off the span of the per-organ centroids, and
    rescaled to the mean norm of the train features.
    """
    f = np.asarray(train_features, dtype=np.float64)
    organs = np.asarray(train_organs)
    centroids = np.stack([f[organs == i].mean(axis=0) for i in np.unique(organs)])
    basis, _ = np.linalg.qr(centroids.T)
    z = rng.normal(size=(n, f.shape[1]))
    z = z - (z @ basis) @ basis.T
    return z / np.linalg.norm(z, axis=1, keepdims=True) * np.linalg.norm(f, axis=1).mean()


# -- retrieval metrics ---------------------------------------------------------


def rank_organs(scores) -> np.ndarray:
    """Organ ids by descending score, ties broken by ascending organ id."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


@dataclass
class RetrievalResult:
    scores: np.ndarray       # (N,)
    ranking: np.ndarray      # permutation of range(N)
    primary: int             # ground-truth organ
    positives: frozenset     # multi-label ground truth (contains ``primary``)


def make_results(score_matrix, primary, positives=None) -> list[RetrievalResult]:
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    out = []
    for i, row in enumerate(score_matrix):
        pos = {int(primary[i])} if positives is None else {int(primary[i]), *map(int, positives[i])}
        out.append(RetrievalResult(row, rank_organs(row), int(primary[i]), frozenset(pos)))
    return out


def positive_labels(record: SymptomRecord, threshold: float = POSITIVE_WEIGHT) -> set[int]:
    pos = {record.organ_id}
    if record.planted_weights is not None:
        pos.update(int(k) for k in np.flatnonzero(record.planted_weights >= threshold))
    return pos


def rank_k_accuracy(results: list[RetrievalResult], k: int) -> float:
    if not results:
        raise ContractError("rank_k_accuracy needs at least one query")
    n = results[0].scores.size
    if not 1 <= k <= n:
        raise ContractError(f"k must lie in [1, {n}], got {k}")
    return float(np.mean([r.primary in r.ranking[:k] for r in results]))


def average_precision(relevant_in_rank_order) -> float:
    rel = np.asarray(relevant_in_rank_order, dtype=bool)
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise ContractError("average precision needs at least one positive")
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


def mean_average_precision(results: list[RetrievalResult], per: str = "class") -> float:
    """Macro class-wise AP (``per="class"``) or mean per-query AP (``per="query"``).

    Class-wise: for each organ, queries are ranked by that organ's score
    (ties by query order) and AP is taken over the queries labelled with it.
    Classes without any positive query are skipped with a warning.
    """
    if not results:
        raise ContractError("mean_average_precision needs at least one query")
    if per == "query":
        return float(np.mean([average_precision([o in r.positives for o in r.ranking]) for r in results]))
    if per != "class":
        raise ContractError(f"per must be 'class' or 'query', got {per!r}")
    scores = np.stack([r.scores for r in results])
    n_q, n = scores.shape
    aps, skipped = [], []
    for c in range(n):
        order = np.lexsort((np.arange(n_q), -scores[:, c]))
        rel = [c in results[q].positives for q in order]
        if not any(rel):
            skipped.append(c)
            continue
        aps.append(average_precision(rel))
    if skipped:
        warnings.warn(f"organ classes without positive queries excluded from mAP: {skipped}", stacklevel=2)
    if not aps:
        raise ContractError("no organ class has a positive query")
    return float(np.mean(aps))


def metrics_report(results: list[RetrievalResult], config_hash: str) -> dict:
    return {
        "rank1": rank_k_accuracy(results, 1),
        "rank2": rank_k_accuracy(results, min(2, results[0].scores.size)),
        "rank3": rank_k_accuracy(results, min(3, results[0].scores.size)),
        "map": mean_average_precision(results),
        "n_queries": len(results),
        "config_hash": config_hash,
    }


def metrics_to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


# -- embedding-space analyses ----------------------------------------------------


def closest_farthest(anchor, records: list[SymptomRecord], n: int) -> tuple[list[SymptomRecord], list[SymptomRecord]]:
    """The ``n`` nearest and ``n`` farthest records by Euclidean distance (ties by id)."""
    if n < 0:
        raise ContractError(f"n must be >= 0, got {n}")
    if n > len(records):
        warnings.warn(f"n={n} exceeds corpus size {len(records)}; clamping", stacklevel=2)
        n = len(records)
    anchor = np.asarray(anchor, dtype=np.float64)
    dist = np.array([np.linalg.norm(r.embedding - anchor) for r in records])
    ids = [r.id for r in records]
    near = sorted(range(len(records)), key=lambda i: (dist[i], ids[i]))
    far = sorted(range(len(records)), key=lambda i: (-dist[i], ids[i]))
    return [records[i] for i in near[:n]], [records[i] for i in far[:n]]


def organ_correlation_matrix(labels) -> np.ndarray:
    """Pearson correlation between organ columns; zero-variance entries are 0, diagonal 1."""
    y = np.asarray(labels, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] < 2:
        raise ContractError(f"need a (records >= 2, organs) matrix, got shape {y.shape}")
    yc = y - y.mean(axis=0)
    sd = np.sqrt((yc * yc).sum(axis=0))
    # A constant column leaves rounding residue after centring, so compare to a scale-aware floor.
    flat = sd <= 1e-12 * np.sqrt(y.shape[0]) * max(1.0, float(np.abs(y).max()))
    if flat.any():
        warnings.warn(f"zero-variance organ columns {np.flatnonzero(flat).tolist()}; correlations set to 0", stacklevel=2)
    safe = np.where(flat, 1.0, sd)
    corr = (yc.T @ yc) / np.outer(safe, safe)
    corr[flat, :] = 0.0
    corr[:, flat] = 0.0
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def heatmap_csv(matrix: np.ndarray) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(matrix))


def heatmap_pgm(matrix: np.ndarray, cell: int = 16) -> bytes:
    """Binary PGM render mapping [-1, 1] to [0, 255], each entry a ``cell``-pixel square."""
    m = np.asarray(matrix, dtype=np.float64)
    gray = np.round((np.clip(m, -1, 1) + 1.0) / 2.0 * 255).astype(np.uint8)
    img = np.kron(gray, np.ones((cell, cell), dtype=np.uint8))
    return f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode() + img.tobytes()


# -- probability overlay -----------------------------------------------------------


def probability_overlay(masks, scores) -> np.ndarray:
    """Each voxel inside organ i's mask holds score_i; overlaps take the largest score."""
    masks = [np.asarray(m, dtype=np.float64) for m in masks]
    scores = np.asarray(scores, dtype=np.float64)
    if len(masks) != scores.size:
        raise ContractError(f"{len(masks)} masks for {scores.size} scores")
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise DimensionError(f"organ masks disagree in shape: {sorted(shapes)}")
    out = np.zeros(masks[0].shape)
    for m, s in zip(masks, scores):
        out = np.where(m > 0, np.maximum(out, s), out)
    return out


def export_probability_overlay(volumes, scores, path) -> np.ndarray:
    """Write the overlay tensor to ``path`` and the scores to ``path`` + ``.json``."""
    overlay = probability_overlay([v.mask for v in volumes], scores)
    path = Path(path)
    save_tensor(path, overlay)
    sidecar = {"organ_ids": [int(v.organ_id) for v in volumes], "scores": [float(s) for s in np.asarray(scores)]}
    atomic_write_bytes(path.with_name(path.name + ".json"), (json.dumps(sidecar, indent=2) + "\n").encode())
    return overlay
