"""Training objectives with analytic gradients.

Map-parameter gradients are returned as ``{"F": {...}, "B": {...}}`` dicts
keyed like ``Map.params``. MSE terms are batch means.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import DimMismatchError, NoPositiveError
from .transforms import AffineMap, Map, OrthogonalMap, truncate_to

NORM_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective.

    ``lam=None`` switches the threshold regularizer off (an unconstrained
    affine backward map). ``labeled=False`` uses row-aligned counterparts as
    the only contrastive positives.
    """

    w1: float = 1.0  # forward alignment
    w2: float = 1.0  # backward alignment
    w3: float = 1.0  # contrastive
    lam: float | None = 12.0
    alpha: float = 10.0
    temperature: float = 0.1
    labeled: bool = True
    freeze_backward_in_contrastive: bool = False

    def __post_init__(self):
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.alpha <= 0 or self.temperature <= 0:
            raise ValueError("alpha and temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    total: float = 0.0
    l_f: float = 0.0
    l_b: float = 0.0
    l_c: float = 0.0
    l_lambda: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _batch(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def _add(acc: dict, grads: dict, scale: float = 1.0) -> None:
    for k, v in grads.items():
        if k in acc:
            acc[k] = acc[k] + scale * v
        else:
            acc[k] = scale * v


def zero_grads(m: Map) -> dict:
    return {k: np.zeros_like(v) for k, v in m.params.items()}


# --------------------------------------------------------------------------
# alignment terms


def loss_backward_mse(B: Map, h_new, h_old):
    """Mean of ``||B(h_new) - h_old||^2``; both sides truncated to B's dimension."""
    x, _ = B._prepare(_batch(h_new))
    target = _batch(h_old)
    if target.shape[0] != x.shape[0]:
        raise DimMismatchError("batches are not row aligned")
    target = truncate_to(target, B.out_dim)
    y, cache = B.forward(x)
    diff = y - target
    n = x.shape[0]
    value = float(np.sum(diff * diff) / n)
    grads, _ = B.backward(cache, 2.0 * diff / n)
    return value, grads


def loss_forward(F: Map, B: Map, h_old, h_new):
    """Mean of ``||F(h_old) - B(h_new)||^2`` with gradients for both maps."""
    xo = _batch(h_old)
    xn, _ = B._prepare(_batch(h_new))
    if xo.shape[0] != xn.shape[0]:
        raise DimMismatchError("batches are not row aligned")
    if F.out_dim != B.out_dim:
        raise DimMismatchError(f"F outputs dim {F.out_dim} but B outputs {B.out_dim}")
    fx, fc = F.forward(F._prepare(xo)[0])
    bx, bc = B.forward(xn)
    diff = fx - bx
    n = xo.shape[0]
    value = float(np.sum(diff * diff) / n)
    g = 2.0 * diff / n
    gf, _ = F.backward(fc, g)
    gb, _ = B.backward(bc, -g)
    return value, {"F": gf, "B": gb}


# --------------------------------------------------------------------------
# orthogonality terms


def gram_deviation(w, transpose: bool = False) -> float:
    """``||W W^T - I||_F`` (or ``||W^T W - I||_F`` with ``transpose``)."""
    w = np.asarray(w, dtype=np.float64)
    g = w.T @ w if transpose else w @ w.T
    return float(np.linalg.norm(g - np.eye(g.shape[0])))


def loss_orth(w):
    """Soft orthogonality ``||W^T W - I||_F`` and its gradient."""
    w = np.asarray(w, dtype=np.float64)
    m = w.T @ w - np.eye(w.shape[1])
    value = float(np.linalg.norm(m))
    if value < NORM_EPS:
        return value, np.zeros_like(w)
    return value, 2.0 * (w @ m) / value


def _row_gram(w):
    w = np.asarray(w, dtype=np.float64)
    m = w @ w.T - np.eye(w.shape[0])
    g = float(np.linalg.norm(m))
    dg = np.zeros_like(w) if g < NORM_EPS else 2.0 * (m @ w) / g
    return g, dg


def loss_lambda_heaviside(w, lam: float) -> float:
    """Hard-gated ``H(g - lam) * g`` with ``g = ||W W^T - I||_F``. Value only."""
    g, _ = _row_gram(w)
    return g if g >= lam else 0.0


def loss_lambda_sigmoid(w, lam: float, alpha: float):
    """Smooth gate ``sigmoid(alpha (g - lam)) * g`` with ``g = ||W W^T - I||_F``."""
    g, dg = _row_gram(w)
    s = sigmoid(alpha * (g - lam))
    value = s * g
    dvalue_dg = s + g * alpha * s * (1.0 - s)
    return value, dvalue_dg * dg


# --------------------------------------------------------------------------
# contrastive terms


def _normalize(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms = np.maximum(norms, NORM_EPS)
    return x / norms, norms


def _normalize_backward(unit: np.ndarray, norms: np.ndarray, dunit: np.ndarray) -> np.ndarray:
    return (dunit - unit * np.sum(unit * dunit, axis=1, keepdims=True)) / norms


def loss_contrastive(anchors, candidates, labels_a, labels_c, temperature: float):
    """Soft-target cross-entropy between cosine-similarity softmax and same-label targets.

    Returns ``(value, (d_anchors, d_candidates))``; the value is the mean over
    anchors.
    """
    a = _batch(anchors)
    c = _batch(candidates)
    if a.shape[1] != c.shape[1]:
        raise DimMismatchError(f"anchor dim {a.shape[1]} != candidate dim {c.shape[1]}")
    la = np.asarray(labels_a).reshape(-1)
    lc = np.asarray(labels_c).reshape(-1)
    if la.shape[0] != a.shape[0] or lc.shape[0] != c.shape[0]:
        raise DimMismatchError("label count does not match batch size")
    pos = la[:, None] == lc[None, :]
    npos = pos.sum(axis=1)
    if np.any(npos == 0):
        raise NoPositiveError(f"anchor {int(np.argmin(npos))} has no same-label candidate")

    au, an = _normalize(a)
    cu, cn = _normalize(c)
    logits = (au @ cu.T) / temperature
    logits = logits - logits.max(axis=1, keepdims=True)
    log_q = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    p = pos / npos[:, None]
    n = a.shape[0]
    value = float(-np.sum(p * log_q) / n)

    q = np.exp(log_q)
    dlogits = (q - p) / (n * temperature)
    da = _normalize_backward(au, an, dlogits @ cu)
    dc = _normalize_backward(cu, cn, dlogits.T @ au)
    return value, (da, dc)


def loss_combined_contrastive(F: Map, B: Map, h_old, h_new, labels=None, temperature: float = 0.1,
                              labeled: bool = True, freeze_backward: bool = False):
    """``contr(F(h_old), B(h_new)) + contr(F(h_old), h_old)``.

    Unlabeled mode (or ``labels=None``) treats only the row-aligned
    counterpart as positive. ``h_old`` is truncated to F's output dimension
    when used as candidates.
    """
    xo = _batch(h_old)
    xn, _ = B._prepare(_batch(h_new))
    if xo.shape[0] != xn.shape[0]:
        raise DimMismatchError("batches are not row aligned")
    if labels is None or not labeled:
        lab = np.arange(xo.shape[0])
    else:
        lab = np.asarray(labels).reshape(-1)
    fx, fc = F.forward(F._prepare(xo)[0])
    bx, bc = B.forward(xn)
    v1, (da1, dc1) = loss_contrastive(fx, bx, lab, lab, temperature)
    v2, (da2, _) = loss_contrastive(fx, truncate_to(xo, F.out_dim), lab, lab, temperature)
    gf, _ = F.backward(fc, da1 + da2)
    gb = zero_grads(B) if freeze_backward else B.backward(bc, dc1)[0]
    return v1 + v2, {"F": gf, "B": gb}


# --------------------------------------------------------------------------
# total


def lambda_active(B: Map, weights: LossWeights) -> bool:
    return isinstance(B, AffineMap) and weights.lam is not None


def loss_total(F: Map, B: Map, h_old, h_new, labels, weights: LossWeights):
    """``w1 L_F + w2 L_B + w3 L_C + L_lambda``; returns ``(LossBreakdown, grads)``.

    Terms with zero weight are skipped. The threshold regularizer applies
    only to an affine backward map.
    """
    grads = {"F": zero_grads(F), "B": zero_grads(B)}
    out = LossBreakdown()
    if weights.w1 > 0:
        out.l_f, g = loss_forward(F, B, h_old, h_new)
        _add(grads["F"], g["F"], weights.w1)
        _add(grads["B"], g["B"], weights.w1)
    if weights.w2 > 0:
        out.l_b, g = loss_backward_mse(B, h_new, h_old)
        _add(grads["B"], g, weights.w2)
    if weights.w3 > 0:
        out.l_c, g = loss_combined_contrastive(
            F, B, h_old, h_new, labels, weights.temperature, weights.labeled,
            weights.freeze_backward_in_contrastive,
        )
        _add(grads["F"], g["F"], weights.w3)
        _add(grads["B"], g["B"], weights.w3)
    if lambda_active(B, weights):
        out.l_lambda, g = loss_lambda_sigmoid(B.weight, weights.lam, weights.alpha)
        _add(grads["B"], {"W": g})
    out.total = weights.w1 * out.l_f + weights.w2 * out.l_b + weights.w3 * out.l_c + out.l_lambda
    return out, grads


def _contr_value(a, c, labels, temperature):
    au, _ = _normalize(a)
    cu, _ = _normalize(c)
    logits = au @ cu.T / temperature
    lse = np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1)) + logits.max(axis=1)
    pos = labels[:, None] == labels[None, :]
    p = pos / pos.sum(axis=1, keepdims=True)
    return float(-np.sum(p * (logits - lse[:, None])) / a.shape[0])


def loss_values(F: Map, B: Map, h_old, h_new, labels, weights: LossWeights) -> LossBreakdown:
    """Forward-only evaluation of :func:`loss_total` (no gradients)."""
    xo = _batch(h_old)
    fx = F.apply(xo)
    bx = B.apply(_batch(h_new))
    out = LossBreakdown()
    if weights.w1 > 0:
        out.l_f = float(np.mean(np.sum((fx - bx) ** 2, axis=1)))
    if weights.w2 > 0:
        out.l_b = float(np.mean(np.sum((bx - truncate_to(xo, B.out_dim)) ** 2, axis=1)))
    if weights.w3 > 0:
        lab = np.arange(xo.shape[0]) if labels is None or not weights.labeled else np.asarray(labels)
        out.l_c = _contr_value(fx, bx, lab, weights.temperature) + _contr_value(
            fx, truncate_to(xo, F.out_dim), lab, weights.temperature
        )
    if lambda_active(B, weights):
        g = gram_deviation(B.weight)
        out.l_lambda = sigmoid(weights.alpha * (g - weights.lam)) * g
    out.total = weights.w1 * out.l_f + weights.w2 * out.l_b + weights.w3 * out.l_c + out.l_lambda
    return out


# --------------------------------------------------------------------------
# finite-difference checking


def numeric_gradient(value_fn: Callable[[np.ndarray], float], x, delta: float = 1e-6, stencil: int = 2) -> np.ndarray:
    """Central differences per coordinate; ``stencil=4`` uses the fourth-order five-point rule."""
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    x = np.array(x, dtype=np.float64).reshape(-1)
    out = np.empty_like(x)
    for i in range(x.size):
        def at(step):
            xs = x.copy()
            xs[i] += step
            return value_fn(xs)

        if stencil == 2:
            out[i] = (at(delta) - at(-delta)) / (2.0 * delta)
        else:
            out[i] = (8.0 * (at(delta) - at(-delta)) - (at(2 * delta) - at(-2 * delta))) / (12.0 * delta)
    return out


def grad_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], params, delta: float = 1e-6,
               value_fn: Callable[[np.ndarray], float] | None = None, stencil: int = 2) -> float:
    """Max relative error of ``loss_fn``'s analytic gradient vs central differences.

    ``loss_fn(x)`` returns ``(value, gradient)`` for a flat parameter vector;
    ``value_fn``, if given, is used for the difference quotients instead.
    ``stencil=4`` trades two extra evaluations for O(delta^4) truncation.
    The denominator is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    x = np.array(params, dtype=np.float64).reshape(-1)
    _, analytic = loss_fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if value_fn is None:
        value_fn = lambda z: loss_fn(z)[0]  # noqa: E731
    numeric = numeric_gradient(value_fn, x, delta, stencil)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0


def flatten_params(maps: dict[str, Map]) -> np.ndarray:
    parts = [v.reshape(-1) for m in maps.values() for v in m.params.values()]
    return np.concatenate(parts) if parts else np.zeros(0)


def flatten_grads(maps: dict[str, Map], grads: dict[str, dict]) -> np.ndarray:
    parts = [np.asarray(grads[name][k]).reshape(-1) for name, m in maps.items() for k in m.params]
    return np.concatenate(parts) if parts else np.zeros(0)


def load_flat(maps: dict[str, Map], x: np.ndarray) -> None:
    """Write a flat vector back into the maps' parameters (in place) and refresh."""
    offset = 0
    for m in maps.values():
        for v in m.params.values():
            v[...] = x[offset : offset + v.size].reshape(v.shape)
            offset += v.size
        m.refresh()


def map_loss_fn(maps: dict[str, Map], objective: Callable[[], tuple[float, dict]],
                value: Callable[[], float] | None = None):
    """Adapt ``objective() -> (value, {name: grads})`` to the flat form :func:`grad_check` takes.

    Returns ``(loss_fn, value_fn)``; ``value_fn`` is ``None`` unless a
    forward-only ``value()`` is supplied. The maps are mutated during
    checking, so callers pass copies.
    """

    def fn(x):
        load_flat(maps, x)
        v, grads = objective()
        return v, flatten_grads(maps, grads)

    if value is None:
        return fn, None

    def vfn(x):
        load_flat(maps, x)
        return value()

    return fn, vfn
