"""Learnable maps between embedding spaces.

Every map exposes the same small surface:

* ``params`` - dict of live float64 arrays (the optimizer edits them in place)
* ``refresh()`` - must be called after in-place parameter edits
* ``forward(x) -> (y, cache)`` and ``backward(cache, dy) -> (grads, dx)``
  for a batch ``x`` of shape ``(N, in_dim)``
* ``apply(x)`` for a single vector or a batch

Backward maps truncate wider inputs to their input dimension (leading
coordinates are kept); forward maps require an exact input dimension.
"""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateInputWarning,
    DimMismatchError,
    FormatVersionError,
    IoFailure,
    MissingFileError,
    ShapeMismatchError,
    TargetTooLargeError,
)
from .linalg import expm, expm_frechet, svd

MAGIC = b"LALNMAP1"
FORMAT_VERSION = 1


def truncate_to(x, target_dim: int) -> np.ndarray:
    """Keep the first ``target_dim`` coordinates of a vector or of every row of a batch."""
    a = np.asarray(x, dtype=np.float64)
    if target_dim > a.shape[-1]:
        raise TargetTooLargeError(f"cannot truncate dim {a.shape[-1]} to {target_dim}")
    return a[..., :target_dim]


def common_dim(d_old: int, d_new: int) -> int:
    return min(d_old, d_new)


class Map:
    in_dim: int
    out_dim: int
    truncate_input: bool = False
    kind: str = ""

    def refresh(self) -> None:
        pass

    def _prepare(self, x) -> tuple[np.ndarray, bool]:
        a = np.asarray(x, dtype=np.float64)
        single = a.ndim == 1
        batch = a[None, :] if single else a
        if batch.ndim != 2:
            raise DimMismatchError(f"expected vector or batch, got shape {a.shape}")
        d = batch.shape[1]
        if d != self.in_dim:
            if self.truncate_input and d > self.in_dim:
                batch = batch[:, : self.in_dim]
            else:
                raise DimMismatchError(f"{self.kind} map expects dim {self.in_dim}, got {d}")
        return batch, single

    def apply(self, x) -> np.ndarray:
        batch, single = self._prepare(x)
        y, _ = self.forward(batch)
        return y[0] if single else y

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self):
        raise NotImplementedError


class AffineMap(Map):
    """``y = W x + b`` with ``W`` of shape ``(out_dim, in_dim)``."""

    kind = "affine"

    def __init__(self, weight, bias=None, truncate_input: bool = False):
        w = np.array(weight, dtype=np.float64)
        if w.ndim != 2:
            raise ShapeMismatchError("weight must be 2-D")
        b = np.zeros(w.shape[0]) if bias is None else np.array(bias, dtype=np.float64).reshape(-1)
        if b.shape[0] != w.shape[0]:
            raise ShapeMismatchError(f"bias length {b.shape[0]} != out_dim {w.shape[0]}")
        self.params = {"W": w, "b": b}
        self.truncate_input = truncate_input

    @classmethod
    def identity(cls, n: int, truncate_input: bool = False) -> "AffineMap":
        return cls(np.eye(n), None, truncate_input)

    @classmethod
    def random(cls, rng, in_dim: int, out_dim: int, std: float | None = None, truncate_input: bool = False):
        std = np.sqrt(1.0 / in_dim) if std is None else std
        return cls(rng.normal(0.0, std, size=(out_dim, in_dim)), None, truncate_input)

    @property
    def weight(self) -> np.ndarray:
        return self.params["W"]

    @property
    def bias(self) -> np.ndarray:
        return self.params["b"]

    @property
    def in_dim(self) -> int:
        return self.params["W"].shape[1]

    @property
    def out_dim(self) -> int:
        return self.params["W"].shape[0]

    def forward(self, x):
        return x @ self.weight.T + self.bias, x

    def backward(self, cache, dy):
        x = cache
        grads = {"W": dy.T @ x, "b": dy.sum(axis=0)}
        return grads, dy @ self.weight

    def copy(self) -> "AffineMap":
        return AffineMap(self.weight.copy(), self.bias.copy(), self.truncate_input)


def skew_from_params(theta, n: int) -> np.ndarray:
    p = np.zeros((n, n))
    iu = np.triu_indices(n, k=1)
    p[iu] = theta
    return p - p.T


class OrthogonalMap(Map):
    """``y = exp(P) x`` with ``P`` skew-symmetric, parameterized by its strict upper triangle."""

    kind = "orthogonal"
    truncate_input = True

    def __init__(self, n: int, skew_params=None):
        if n < 1:
            raise ShapeMismatchError("dimension must be positive")
        size = n * (n - 1) // 2
        theta = np.zeros(size) if skew_params is None else np.array(skew_params, dtype=np.float64).reshape(-1)
        if theta.shape[0] != size:
            raise ShapeMismatchError(f"expected {size} skew parameters for n={n}, got {theta.shape[0]}")
        self.n = n
        self.params = {"skew": theta}
        self._iu = np.triu_indices(n, k=1)
        self.refresh()

    @classmethod
    def random(cls, rng, n: int, std: float = 1e-2) -> "OrthogonalMap":
        # N(0, 1e-4) variance, i.e. std 1e-2, gives a near-identity start.
        return cls(n, rng.normal(0.0, std, size=n * (n - 1) // 2))

    @property
    def in_dim(self) -> int:
        return self.n

    @property
    def out_dim(self) -> int:
        return self.n

    @property
    def skew(self) -> np.ndarray:
        return skew_from_params(self.params["skew"], self.n)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    def refresh(self) -> None:
        self._matrix = expm(self.skew)

    def forward(self, x):
        return x @ self._matrix.T, x

    def backward(self, cache, dy):
        x = cache
        g_b = dy.T @ x
        # adjoint of the Frechet derivative of exp at P is the derivative at P^T
        g_p = expm_frechet(self.skew.T, g_b)
        g_theta = g_p[self._iu] - g_p.T[self._iu]
        return {"skew": g_theta}, dy @ self._matrix

    def copy(self) -> "OrthogonalMap":
        return OrthogonalMap(self.n, self.params["skew"].copy())


ACTIVATIONS = ("relu", "none")


class MlpMap(Map):
    """Stack of affine layers with ReLU between them; the last layer is linear."""

    kind = "mlp"

    def __init__(self, layers: list[AffineMap], activations: list[str]):
        if len(layers) != len(activations) or not layers:
            raise ShapeMismatchError("need one activation per layer")
        if activations[-1] != "none":
            raise ShapeMismatchError("final activation must be 'none'")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ShapeMismatchError(f"unknown activation {a!r}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ShapeMismatchError("layer dimensions do not chain")
        self.layers = layers
        self.activations = list(activations)
        self.params = {}
        for i, layer in enumerate(layers):
            for k, v in layer.params.items():
                self.params[f"{i}.{k}"] = v

    @classmethod
    def random(cls, rng, in_dim: int, out_dim: int, hidden: int | None = None) -> "MlpMap":
        hidden = max(in_dim, out_dim) if hidden is None else hidden
        return cls(
            [AffineMap.random(rng, in_dim, hidden), AffineMap.random(rng, hidden, out_dim)],
            ["relu", "none"],
        )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x):
        caches = []
        h = x
        for layer, act in zip(self.layers, self.activations):
            z, c = layer.forward(h)
            caches.append((c, z))
            h = np.maximum(z, 0.0) if act == "relu" else z
        return h, caches

    def backward(self, cache, dy):
        grads = {}
        g = dy
        for i in range(len(self.layers) - 1, -1, -1):
            c, z = cache[i]
            if self.activations[i] == "relu":
                g = g * (z > 0)
            lg, g = self.layers[i].backward(c, g)
            for k, v in lg.items():
                grads[f"{i}.{k}"] = v
        return grads, g

    def copy(self) -> "MlpMap":
        return MlpMap([layer.copy() for layer in self.layers], self.activations)


def apply(m: Map, x) -> np.ndarray:
    return m.apply(x)


def procrustes_fit(source, target, rotation_only: bool = False) -> np.ndarray:
    """Orthogonal ``R`` minimizing ``||source @ R.T - target||_F``.

    ``R = U @ V.T`` from the SVD of ``target.T @ source``. With
    ``rotation_only`` the solution is restricted to ``det(R) = +1``.
    """
    s = np.asarray(source, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if s.shape != t.shape:
        raise DimMismatchError(f"source {s.shape} and target {t.shape} differ")
    u, sing, v = svd(t.T @ s)
    if sing.size and sing[-1] <= max(sing[0], 1.0) * 1e-10:
        warnings.warn("cross-covariance is rank deficient", DegenerateInputWarning, stacklevel=2)
    if rotation_only and np.linalg.det(u @ v.T) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
    return u @ v.T


# --------------------------------------------------------------------------
# map files


def _header(m: Map) -> dict:
    if isinstance(m, OrthogonalMap):
        layers = []
    elif isinstance(m, AffineMap):
        layers = [{"in_dim": m.in_dim, "out_dim": m.out_dim, "activation": "none"}]
    elif isinstance(m, MlpMap):
        layers = [
            {"in_dim": layer.in_dim, "out_dim": layer.out_dim, "activation": act}
            for layer, act in zip(m.layers, m.activations)
        ]
    else:
        raise TypeError(f"cannot serialize {type(m).__name__}")
    return {
        "version": FORMAT_VERSION,
        "kind": m.kind,
        "in_dim": m.in_dim,
        "out_dim": m.out_dim,
        "truncate_input": bool(m.truncate_input),
        "layers": layers,
        "params": [[k, list(v.shape)] for k, v in m.params.items()],
    }


def map_to_bytes(m: Map) -> bytes:
    header = json.dumps(_header(m), sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in m.params.values())
    return MAGIC + header + b"\n" + body


def map_from_bytes(blob: bytes) -> Map:
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatVersionError("not a map file (bad magic bytes)")
    nl = blob.find(b"\n", len(MAGIC))
    if nl < 0:
        raise FormatVersionError("map header is not newline terminated")
    header = json.loads(blob[len(MAGIC) : nl].decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise FormatVersionError(f"unsupported map format version {header.get('version')}")
    body = memoryview(blob)[nl + 1 :]
    values = {}
    offset = 0
    for name, shape in header["params"]:
        size = int(np.prod(shape)) if shape else 1
        nbytes = 8 * size
        if offset + nbytes > len(body):
            raise FormatVersionError("map file truncated")
        values[name] = np.frombuffer(body[offset : offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        offset += nbytes
    if offset != len(body):
        raise FormatVersionError("trailing bytes after map parameters")

    kind = header["kind"]
    if kind == "orthogonal":
        return OrthogonalMap(header["in_dim"], values["skew"])
    if kind == "affine":
        return AffineMap(values["W"], values["b"], header.get("truncate_input", False))
    if kind == "mlp":
        layers = [AffineMap(values[f"{i}.W"], values[f"{i}.b"]) for i in range(len(header["layers"]))]
        return MlpMap(layers, [spec["activation"] for spec in header["layers"]])
    raise FormatVersionError(f"unknown map kind {kind!r}")


def serialize_map(m: Map, path) -> None:
    try:
        Path(path).write_bytes(map_to_bytes(m))
    except OSError as exc:
        raise IoFailure(f"cannot write map {path}: {exc}") from exc


def deserialize_map(path) -> Map:
    p = Path(path)
    if not p.is_file():
        raise MissingFileError(f"map file missing: {p}")
    try:
        blob = p.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read map {p}: {exc}") from exc
    return map_from_bytes(blob)


save_map = serialize_map
load_map = deserialize_map
