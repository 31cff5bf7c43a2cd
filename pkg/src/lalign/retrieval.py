"""Retrieval metrics (CMC-Top-k, mAP) and backward-compatibility checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embeddings import EmbeddingSet
from .errors import EmptyGalleryError, InvalidSpecError, MisalignedError, MissingLabelsError, TooLargeError

DISTANCES = ("l2", "cosine")
DEF1_MAX_COUNT = 2000
# queries per distance block; keeps the (q, g, d) temporary small
_BLOCK_ELEMS = 1 << 22


@dataclass
class RetrievalReport:
    cmc_top_k: dict[int, float]
    map_score: float
    query_tag: str = ""
    gallery_tag: str = ""
    distance: str = "l2"
    leave_one_out: bool = False
    num_queries: int = 0
    excluded_queries: int = 0
    per_query_ap: np.ndarray | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "query_tag": self.query_tag,
            "gallery_tag": self.gallery_tag,
            "distance": self.distance,
            "leave_one_out": self.leave_one_out,
            "cmc_top_k": {str(k): v for k, v in sorted(self.cmc_top_k.items())},
            "map": self.map_score,
            "num_queries": self.num_queries,
            "excluded_queries": self.excluded_queries,
        }


@dataclass
class CompatibilityVerdict:
    cross_model: RetrievalReport
    self_old: RetrievalReport

    @property
    def satisfied(self) -> dict[str, bool]:
        return {
            "cmc_top1": self.cross_model.cmc_top_k[1] > self.self_old.cmc_top_k[1],
            "map": self.cross_model.map_score > self.self_old.map_score,
        }

    def to_dict(self) -> dict:
        return {
            "cross_model": self.cross_model.to_dict(),
            "self_old": self.self_old.to_dict(),
            "satisfied": self.satisfied,
        }


@dataclass
class Definition1Report:
    same_class_pairs: int
    same_class_violations: int
    diff_class_pairs: int
    diff_class_violations: int

    @property
    def same_class_fraction(self) -> float:
        return self.same_class_violations / self.same_class_pairs if self.same_class_pairs else 0.0

    @property
    def diff_class_fraction(self) -> float:
        return self.diff_class_violations / self.diff_class_pairs if self.diff_class_pairs else 0.0

    def to_dict(self) -> dict:
        return {
            "same_class_pairs": self.same_class_pairs,
            "same_class_violations": self.same_class_violations,
            "same_class_fraction": self.same_class_fraction,
            "diff_class_pairs": self.diff_class_pairs,
            "diff_class_violations": self.diff_class_violations,
            "diff_class_fraction": self.diff_class_fraction,
        }


def pairwise_distances(a, b, distance: str = "l2") -> np.ndarray:
    """Distance matrix between rows of ``a`` and rows of ``b``.

    ``l2`` is computed from explicit differences (no Gram expansion) so equal
    inputs give exactly equal distances.
    """
    if distance not in DISTANCES:
        raise InvalidSpecError(f"distance must be one of {DISTANCES}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise MisalignedError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if distance == "cosine":
        an = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-300)
        bn = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-300)
        return 1.0 - an @ bn.T
    out = np.empty((a.shape[0], b.shape[0]))
    step = max(1, _BLOCK_ELEMS // max(1, b.shape[0] * a.shape[1]))
    for lo in range(0, a.shape[0], step):
        diff = a[lo : lo + step, None, :] - b[None, :, :]
        out[lo : lo + step] = np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))
    return out


def _check_sets(query: EmbeddingSet, gallery: EmbeddingSet, leave_one_out: bool) -> None:
    if not (query.has_labels and gallery.has_labels):
        raise MissingLabelsError("retrieval metrics need labels on query and gallery")
    if gallery.count == 0 or (leave_one_out and gallery.count < 2):
        raise EmptyGalleryError("gallery is empty")
    if leave_one_out and query.count != gallery.count:
        raise MisalignedError("leave-one-out needs row-aligned query and gallery")


def _rank_stats(query: EmbeddingSet, gallery: EmbeddingSet, distance: str, leave_one_out: bool):
    """Per query: 0-based rank of the first relevant item (-1 if none) and AP (nan if none)."""
    _check_sets(query, gallery, leave_one_out)
    nq, ng = query.count, gallery.count
    first = np.full(nq, -1, dtype=np.int64)
    ap = np.full(nq, np.nan)
    step = max(1, _BLOCK_ELEMS // max(1, ng * query.dim))
    glab = gallery.labels
    for lo in range(0, nq, step):
        hi = min(nq, lo + step)
        dist = pairwise_distances(query.vectors[lo:hi], gallery.vectors, distance)
        # stable sort: equal distances keep ascending gallery index
        order = np.argsort(dist, axis=1, kind="stable")
        rel = glab[order] == query.labels[lo:hi, None]
        if leave_one_out:
            keep = order != np.arange(lo, hi)[:, None]
            rel = rel[keep].reshape(hi - lo, ng - 1)
        hits = np.cumsum(rel, axis=1)
        n_rel = hits[:, -1]
        ranks = np.arange(1, rel.shape[1] + 1)
        has = n_rel > 0
        first[lo:hi] = np.where(has, np.argmax(rel, axis=1), -1)
        prec_sum = np.sum(np.where(rel, hits / ranks, 0.0), axis=1)
        ap[lo:hi] = np.where(has, prec_sum / np.maximum(n_rel, 1), np.nan)
    return first, ap


def cmc(query: EmbeddingSet, gallery: EmbeddingSet, k: int = 1, distance: str = "l2", leave_one_out: bool = False) -> float:
    """Fraction of queries with a same-label item among their ``k`` nearest gallery items."""
    if k < 1:
        raise InvalidSpecError("k must be >= 1")
    first, _ = _rank_stats(query, gallery, distance, leave_one_out)
    return float(np.mean((first >= 0) & (first < k)))


def mean_average_precision(query: EmbeddingSet, gallery: EmbeddingSet, distance: str = "l2", leave_one_out: bool = False) -> float:
    """Mean AP over queries that have at least one relevant gallery item."""
    _, ap = _rank_stats(query, gallery, distance, leave_one_out)
    valid = ~np.isnan(ap)
    return float(np.mean(ap[valid])) if valid.any() else 0.0


def evaluate(
    query: EmbeddingSet,
    gallery: EmbeddingSet,
    ks=(1, 5, 10),
    distance: str = "l2",
    leave_one_out: bool = False,
    query_tag: str = "",
    gallery_tag: str = "",
) -> RetrievalReport:
    """CMC at every ``k`` in ``ks`` plus mAP, from a single ranking pass."""
    ks = sorted({int(k) for k in ks} | {1})
    if ks[0] < 1:
        raise InvalidSpecError("k must be >= 1")
    first, ap = _rank_stats(query, gallery, distance, leave_one_out)
    valid = ~np.isnan(ap)
    return RetrievalReport(
        cmc_top_k={k: float(np.mean((first >= 0) & (first < k))) for k in ks},
        map_score=float(np.mean(ap[valid])) if valid.any() else 0.0,
        query_tag=query_tag or query.model_tag,
        gallery_tag=gallery_tag or gallery.model_tag,
        distance=distance,
        leave_one_out=leave_one_out,
        num_queries=query.count,
        excluded_queries=int(np.sum(~valid)),
        per_query_ap=ap,
    )


def compatibility_verdict(
    query_new: EmbeddingSet,
    gallery_old: EmbeddingSet,
    query_old: EmbeddingSet,
    distance: str = "l2",
    leave_one_out: bool = False,
) -> CompatibilityVerdict:
    """Strict comparison of cross-model retrieval against old/old retrieval."""
    cross = evaluate(query_new, gallery_old, (1,), distance, leave_one_out)
    base = evaluate(query_old, gallery_old, (1,), distance, leave_one_out)
    return CompatibilityVerdict(cross_model=cross, self_old=base)


def check_definition1(old_set: EmbeddingSet, new_set: EmbeddingSet, max_count: int = DEF1_MAX_COUNT) -> Definition1Report:
    """Count violations of both pairwise compatibility inequalities (Euclidean).

    Over ordered pairs ``i != j``:
    same label needs ``d(old_i, new_j) <= d(old_i, old_j)``;
    different labels need ``d(old_i, new_j) >= d(new_i, new_j)``.
    """
    if old_set.count != new_set.count:
        raise MisalignedError("old and new sets are not row aligned")
    if old_set.count > max_count:
        raise TooLargeError(f"{old_set.count} rows exceeds the pair cap of {max_count}")
    if not (old_set.has_labels and new_set.has_labels):
        raise MissingLabelsError("definition check needs labels")
    if not np.array_equal(old_set.labels, new_set.labels):
        raise MisalignedError("old and new labels differ")
    cross = pairwise_distances(old_set.vectors, new_set.vectors)
    d_old = pairwise_distances(old_set.vectors, old_set.vectors)
    d_new = pairwise_distances(new_set.vectors, new_set.vectors)
    lab = old_set.labels
    same = lab[:, None] == lab[None, :]
    np.fill_diagonal(same, False)
    diff = lab[:, None] != lab[None, :]
    return Definition1Report(
        same_class_pairs=int(same.sum()),
        same_class_violations=int(np.sum(same & (cross > d_old))),
        diff_class_pairs=int(diff.sum()),
        diff_class_violations=int(np.sum(diff & (cross < d_new))),
    )
