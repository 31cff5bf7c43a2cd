"""Partial backfilling: gallery orderings, hybrid galleries and the M-tilde curve metric."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingSet
from .errors import InvalidSpecError, MisalignedError, MissingLabelsError
from .retrieval import evaluate

ORDERING_KINDS = ("ours_mse", "ours_cosine", "random")
DEFAULT_GRID = tuple(np.round(np.linspace(0.0, 1.0, 11), 10))


@dataclass(frozen=True)
class BackfillOrdering:
    kind: str
    permutation: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ORDERING_KINDS:
            raise InvalidSpecError(f"ordering kind must be one of {ORDERING_KINDS}")
        perm = np.asarray(self.permutation, dtype=np.int64)
        if not np.array_equal(np.sort(perm), np.arange(perm.size)):
            raise InvalidSpecError("ordering is not a permutation")
        object.__setattr__(self, "permutation", perm)


@dataclass
class BackfillCurve:
    beta_grid: list[float]
    cmc_top1: list[float]
    map_values: list[float]
    ordering: str = ""

    @property
    def m_tilde(self) -> dict[str, float]:
        return {"cmc_top1": m_tilde(self.beta_grid, self.cmc_top1), "map": m_tilde(self.beta_grid, self.map_values)}

    def to_dict(self) -> dict:
        return {
            "ordering": self.ordering,
            "beta": list(self.beta_grid),
            "cmc_top1": list(self.cmc_top1),
            "map": list(self.map_values),
            "m_tilde": self.m_tilde,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["beta", "cmc_top1", "map"])
        for row in zip(self.beta_grid, self.cmc_top1, self.map_values):
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()


def m_tilde(beta_grid, values) -> float:
    """Trapezoidal mean of ``values`` over ``beta_grid`` (normalized by its span).

    Integrates ``values - values[0]`` so a constant curve returns its value exactly.
    """
    b = np.asarray(beta_grid, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    if b.shape != v.shape or b.size < 2:
        raise InvalidSpecError("need matching grid and values with at least two points")
    span = b[-1] - b[0]
    if span <= 0:
        raise InvalidSpecError("grid must be ascending")
    dv = v - v[0]
    area = np.sum(np.diff(b) * (dv[1:] + dv[:-1])) / 2.0
    return float(v[0] + area / span)


def order_by_class_mean_distance(gallery_adapted: EmbeddingSet, distance: str = "l2") -> BackfillOrdering:
    """Farthest-from-class-mean first; ties by ascending index."""
    if not gallery_adapted.has_labels:
        raise MissingLabelsError("ordering by class mean needs labels")
    x = gallery_adapted.vectors
    lab = gallery_adapted.labels
    d = np.empty(x.shape[0])
    for c in np.unique(lab):
        rows = lab == c
        mu = x[rows].mean(axis=0)
        if distance == "l2":
            d[rows] = np.linalg.norm(x[rows] - mu, axis=1)
        elif distance == "cosine":
            xn = np.linalg.norm(x[rows], axis=1) * np.linalg.norm(mu)
            d[rows] = 1.0 - (x[rows] @ mu) / np.maximum(xn, 1e-300)
        else:
            raise InvalidSpecError("distance must be l2 or cosine")
    perm = np.lexsort((np.arange(x.shape[0]), -d))
    return BackfillOrdering("ours_mse" if distance == "l2" else "ours_cosine", perm)


def random_ordering(n: int, seed: int) -> BackfillOrdering:
    return BackfillOrdering("random", np.random.default_rng(seed).permutation(n), seed)


def make_ordering(kind: str, gallery_adapted: EmbeddingSet, seed: int = 0) -> BackfillOrdering:
    if kind == "ours_mse":
        return order_by_class_mean_distance(gallery_adapted, "l2")
    if kind == "ours_cosine":
        return order_by_class_mean_distance(gallery_adapted, "cosine")
    if kind == "random":
        return random_ordering(gallery_adapted.count, seed)
    raise InvalidSpecError(f"ordering kind must be one of {ORDERING_KINDS}")


def backfilled_count(n: int, beta: float) -> int:
    # floor(beta * n), guarded against products like 0.29 * 100 = 28.999...
    return min(n, int(math.floor(beta * n + 1e-9)))


def hybrid_gallery(old_adapted: EmbeddingSet, new_adapted: EmbeddingSet, ordering, beta: float) -> EmbeddingSet:
    """Gallery whose first ``floor(beta * N)`` rows in ``ordering`` come from ``new_adapted``."""
    if old_adapted.count != new_adapted.count or old_adapted.dim != new_adapted.dim:
        raise MisalignedError("old and new galleries are not row aligned")
    if old_adapted.has_labels and new_adapted.has_labels and not np.array_equal(old_adapted.labels, new_adapted.labels):
        raise MisalignedError("gallery labels differ")
    if not 0.0 <= beta <= 1.0:
        raise InvalidSpecError("beta must lie in [0, 1]")
    perm = ordering.permutation if isinstance(ordering, BackfillOrdering) else np.asarray(ordering)
    if perm.size != old_adapted.count:
        raise MisalignedError("ordering length differs from gallery size")
    rows = perm[: backfilled_count(old_adapted.count, beta)]
    vec = np.array(old_adapted.vectors)
    vec[rows] = new_adapted.vectors[rows]
    return old_adapted.with_vectors(vec, "hybrid")


def backfill_curve(
    query: EmbeddingSet,
    old_adapted: EmbeddingSet,
    new_adapted: EmbeddingSet,
    ordering: BackfillOrdering,
    beta_grid=DEFAULT_GRID,
    distance: str = "l2",
    leave_one_out: bool = False,
) -> BackfillCurve:
    grid = [float(b) for b in beta_grid]
    if len(grid) < 2 or grid[0] != 0.0 or grid[-1] != 1.0 or any(b >= c for b, c in zip(grid, grid[1:])):
        raise InvalidSpecError("beta grid must ascend from 0 to 1")
    cmc1, maps = [], []
    for beta in grid:
        rep = evaluate(query, hybrid_gallery(old_adapted, new_adapted, ordering, beta), (1,), distance, leave_one_out)
        cmc1.append(rep.cmc_top_k[1])
        maps.append(rep.map_score)
    return BackfillCurve(grid, cmc1, maps, ordering.kind)
