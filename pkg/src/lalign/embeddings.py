"""Embedding sets: containers, on-disk bundles, CSV import, synthesis."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimMismatchError,
    InvalidSpecError,
    IoFailure,
    ManifestMismatchError,
    MissingFileError,
    MisalignedError,
    NonFiniteError,
    SingletonClassError,
)

MANIFEST = "manifest.json"
VECTORS = "vectors.bin"
LABELS = "labels.txt"
DTYPE_TAG = "f32le"


@dataclass(frozen=True)
class EmbeddingSet:
    """``count x dim`` embedding matrix with optional integer class labels."""

    vectors: np.ndarray
    labels: np.ndarray | None = None
    model_tag: str = ""

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float64)
        if vec.ndim != 2 or vec.shape[0] < 1 or vec.shape[1] < 1:
            raise DimMismatchError(f"vectors must be a non-empty 2-D array, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise NonFiniteError("embedding vectors contain NaN or Inf")
        vec.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != vec.shape[0]:
                raise DimMismatchError(f"{lab.shape[0]} labels for {vec.shape[0]} vectors")
            if np.any(lab < 0):
                raise DimMismatchError("labels must be non-negative")
            lab.setflags(write=False)
            object.__setattr__(self, "labels", lab)

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def subset(self, index) -> "EmbeddingSet":
        idx = np.asarray(index, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return EmbeddingSet(self.vectors[idx], labels, self.model_tag)

    def with_vectors(self, vectors, model_tag: str | None = None) -> "EmbeddingSet":
        """Same labels, new vectors (row count must match)."""
        tag = self.model_tag if model_tag is None else model_tag
        return EmbeddingSet(vectors, self.labels, tag)


@dataclass(frozen=True)
class PairedEmbeddings:
    """Row-aligned old/new embeddings of the same samples."""

    old: EmbeddingSet
    new: EmbeddingSet

    def __post_init__(self):
        if self.old.count != self.new.count:
            raise MisalignedError(f"old has {self.old.count} rows, new has {self.new.count}")
        if (self.old.labels is None) != (self.new.labels is None):
            raise MisalignedError("labels present on only one side")
        if self.old.labels is not None and not np.array_equal(self.old.labels, self.new.labels):
            raise MisalignedError("old and new labels differ row-wise")

    @property
    def count(self) -> int:
        return self.old.count

    @property
    def labels(self) -> np.ndarray | None:
        return self.old.labels

    def subset(self, index) -> "PairedEmbeddings":
        return PairedEmbeddings(self.old.subset(index), self.new.subset(index))


# --------------------------------------------------------------------------
# bundles


def save_bundle(emb: EmbeddingSet, path) -> None:
    """Write ``emb`` as a bundle directory (manifest, f32 payload, labels)."""
    root = Path(path)
    try:
        root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "dim": emb.dim,
            "count": emb.count,
            "dtype": DTYPE_TAG,
            "model_tag": emb.model_tag,
            "has_labels": emb.has_labels,
        }
        (root / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        (root / VECTORS).write_bytes(emb.vectors.astype("<f4").tobytes(order="C"))
        labels_path = root / LABELS
        if emb.has_labels:
            labels_path.write_text("".join(f"{int(v)}\n" for v in emb.labels), encoding="utf-8")
        elif labels_path.exists():
            labels_path.unlink()
    except OSError as exc:
        raise IoFailure(f"cannot write bundle {root}: {exc}") from exc


def load_bundle(path) -> EmbeddingSet:
    root = Path(path)
    mpath = root / MANIFEST
    vpath = root / VECTORS
    for p in (mpath, vpath):
        if not p.is_file():
            raise MissingFileError(f"bundle file missing: {p}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestMismatchError(f"invalid manifest JSON in {mpath}: {exc}") from exc
    try:
        dim = int(manifest["dim"])
        count = int(manifest["count"])
        has_labels = bool(manifest["has_labels"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestMismatchError(f"manifest lacks required keys: {exc}") from exc
    if manifest.get("dtype", DTYPE_TAG) != DTYPE_TAG:
        raise ManifestMismatchError(f"unsupported dtype {manifest.get('dtype')!r}")
    if dim < 1 or count < 1:
        raise ManifestMismatchError("dim and count must be positive")

    payload = vpath.read_bytes()
    expected = dim * count * 4
    if len(payload) != expected:
        raise ManifestMismatchError(
            f"payload is {len(payload)} bytes, manifest implies {expected} ({count}x{dim} f32)"
        )
    vectors = np.frombuffer(payload, dtype="<f4").reshape(count, dim).astype(np.float64)
    if not np.all(np.isfinite(vectors)):
        raise NonFiniteError(f"non-finite values in {vpath}")

    labels = None
    if has_labels:
        lpath = root / LABELS
        if not lpath.is_file():
            raise MissingFileError(f"bundle file missing: {lpath}")
        lines = [ln for ln in lpath.read_text(encoding="utf-8").splitlines() if ln.strip()]
        if len(lines) != count:
            raise ManifestMismatchError(f"{len(lines)} labels but count is {count}")
        labels = np.array([int(ln) for ln in lines], dtype=np.int64)
    return EmbeddingSet(vectors, labels, str(manifest.get("model_tag", "")))


def load_csv(path, model_tag: str = "") -> EmbeddingSet:
    """Read ``label,x0,x1,...`` rows. An empty label column means unlabeled."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError as exc:
        raise MissingFileError(str(exc)) from exc
    if not rows or not rows[0] or rows[0][0].strip() != "label":
        raise ManifestMismatchError("CSV header must start with 'label'")
    dim = len(rows[0]) - 1
    body = [r for r in rows[1:] if r]
    if any(len(r) != dim + 1 for r in body):
        raise ManifestMismatchError("ragged CSV rows")
    raw_labels = [r[0].strip() for r in body]
    vectors = np.array([[float(x) for x in r[1:]] for r in body], dtype=np.float64)
    labels = None if all(v == "" for v in raw_labels) else np.array([int(v) for v in raw_labels])
    return EmbeddingSet(vectors, labels, model_tag)


# --------------------------------------------------------------------------
# synthesis

DISTORTIONS = ("orthogonal", "affine", "affine+noise")


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 10
    per_class: int = 40
    dim_old: int = 8
    dim_new: int = 8
    class_spread: float | tuple[float, ...] = 0.5
    inter_class_separation: float = 3.0
    new_model_distortion: str = "orthogonal"
    noise: float = 0.0
    condition_number: float = 5.0
    new_spread_factor: float = 1.0
    new_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2 or self.per_class < 2:
            raise InvalidSpecError("need num_classes >= 2 and per_class >= 2")
        if self.dim_old < 2 or self.dim_new < 2:
            raise InvalidSpecError("dims must be >= 2")
        spreads = self.spreads()
        if spreads.shape[0] != self.num_classes or np.any(spreads <= 0):
            raise InvalidSpecError("class_spread must be positive (one value or one per class)")
        if self.inter_class_separation <= 0:
            raise InvalidSpecError("inter_class_separation must be positive")
        if self.new_model_distortion not in DISTORTIONS:
            raise InvalidSpecError(f"distortion must be one of {DISTORTIONS}")
        if self.noise < 0 or self.condition_number < 1:
            raise InvalidSpecError("noise >= 0 and condition_number >= 1 required")
        if self.new_spread_factor <= 0 or self.new_scale <= 0:
            raise InvalidSpecError("new_spread_factor and new_scale must be positive")

    def spreads(self) -> np.ndarray:
        s = np.atleast_1d(np.asarray(self.class_spread, dtype=np.float64))
        return np.full(self.num_classes, s[0]) if s.size == 1 else s


def random_rotation(rng: np.random.Generator, n: int) -> np.ndarray:
    """Haar-random element of SO(n) (determinant +1)."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_affine(rng: np.random.Generator, rows: int, cols: int, condition_number: float) -> np.ndarray:
    """Random ``rows x cols`` matrix with singular values log-spaced in [1, condition_number]."""
    k = min(rows, cols)
    u = random_rotation(rng, rows)[:, :k]
    v = random_rotation(rng, cols)[:, :k]
    sv = np.geomspace(condition_number, 1.0, k) if k > 1 else np.ones(1)
    return (u * sv) @ v.T


def class_means(rng: np.random.Generator, num_classes: int, dim: int, separation: float) -> np.ndarray:
    means = rng.standard_normal((num_classes, dim))
    diff = means[:, None, :] - means[None, :, :]
    dist = np.sqrt((diff**2).sum(-1))
    min_dist = dist[np.triu_indices(num_classes, 1)].min()
    return means * (separation / min_dist)


def synth_pair(spec: SynthSpec) -> PairedEmbeddings:
    """Gaussian class blobs in the old space, pushed through a distortion into the new space.

    Each sample is ``mean_c + spread_c * z``. In the new space the same ``z``
    is reused with spread scaled by ``new_spread_factor`` before applying the
    distortion, so ``new_spread_factor < 1`` models a better-clustered model.
    The old space is zero-padded/truncated to ``dim_new`` before the
    distortion when dimensions differ.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    k, m = spec.num_classes, spec.per_class
    means = class_means(rng, k, spec.dim_old, spec.inter_class_separation)
    spreads = spec.spreads()
    labels = np.repeat(np.arange(k), m)
    z = rng.standard_normal((k * m, spec.dim_old))
    old = means[labels] + spreads[labels, None] * z
    new_pre = means[labels] + (spec.new_spread_factor * spreads[labels])[:, None] * z

    if spec.new_model_distortion == "orthogonal":
        lift = random_rotation(rng, spec.dim_new)
        if spec.dim_old != spec.dim_new:
            lift = lift @ np.eye(spec.dim_new, spec.dim_old)
        offset = np.zeros(spec.dim_new)
    else:
        lift = random_affine(rng, spec.dim_new, spec.dim_old, spec.condition_number)
        offset = rng.standard_normal(spec.dim_new)
    new = spec.new_scale * (new_pre @ lift.T) + offset
    if spec.new_model_distortion == "affine+noise" or spec.noise > 0:
        new = new + spec.noise * rng.standard_normal(new.shape)

    return PairedEmbeddings(
        EmbeddingSet(old, labels, "old"),
        EmbeddingSet(new, labels, "new"),
    )


def split_rows(pair: PairedEmbeddings, fraction: float, seed: int) -> tuple[PairedEmbeddings, PairedEmbeddings]:
    """Random row split; the first part holds ``fraction`` of the rows."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(pair.count)
    cut = int(round(fraction * pair.count))
    return pair.subset(np.sort(perm[:cut])), pair.subset(np.sort(perm[cut:]))


@dataclass(frozen=True)
class LeaveOneOut:
    """Leave-one-out bookkeeping: every row is a query against all other rows."""

    query_order: np.ndarray
    count: int

    def gallery_for(self, query_index: int) -> np.ndarray:
        idx = np.arange(self.count)
        return idx[idx != query_index]


def split_gallery_query(emb: EmbeddingSet, seed: int = 0) -> LeaveOneOut:
    """Leave-one-out query/gallery views. Every class needs >= 2 samples."""
    if emb.labels is not None:
        _, counts = np.unique(emb.labels, return_counts=True)
        if np.any(counts < 2):
            raise SingletonClassError("a class has a single sample; it has no gallery match")
    rng = np.random.default_rng(seed)
    return LeaveOneOut(rng.permutation(emb.count), emb.count)


def content_hash(path) -> str:
    """sha256 over a file, or over the sorted files of a directory."""
    import hashlib

    h = hashlib.sha256()
    p = Path(path)
    files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for f in files:
        if p.is_dir():
            h.update(os.fsencode(str(f.relative_to(p))))
        h.update(f.read_bytes())
    return h.hexdigest()
