"""Self-checks: finite-difference gradient suite, expm invariants, metric oracles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingSet
from .linalg import expm, expm_frechet
from .losses import (
    LossWeights,
    gram_deviation,
    grad_check,
    loss_backward_mse,
    loss_combined_contrastive,
    loss_contrastive,
    loss_forward,
    loss_lambda_sigmoid,
    loss_orth,
    loss_total,
    loss_values,
    flatten_params,
    map_loss_fn,
)
from .retrieval import evaluate
from .transforms import AffineMap, MlpMap, OrthogonalMap, skew_from_params

GRAD_TOL = 1e-5
GRAD_TOL_THRESHOLD = 1e-4  # within 0.1 of the sigmoid threshold
THRESHOLD_BAND = 0.1
# five-point central differences: truncation and round-off both stay far
# below the tolerance, which the two-point rule at loss scale ~10 cannot do
FD_DELTA = 1e-4
FD_STENCIL = 4
FAMILIES = (("affine", "orthogonal"), ("affine", "lambda_affine"), ("mlp", "orthogonal"), ("mlp", "lambda_affine"))
GRAD_TERMS = ("L_B", "L_orth", "L_lambda", "L_F", "L_contr", "L_C", "total")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": bool(self.passed), "value": float(self.value), "threshold": float(self.threshold), "detail": self.detail}


# --------------------------------------------------------------------------
# gradient suite


def _random_affine(rng, in_dim, out_dim, truncate_input=False) -> AffineMap:
    m = AffineMap.random(rng, in_dim, out_dim, truncate_input=truncate_input)
    m.params["b"][...] = rng.normal(0.0, 0.5, out_dim)
    return m


def _random_mlp(rng, in_dim, out_dim) -> MlpMap:
    m = MlpMap.random(rng, in_dim, out_dim)
    for layer in m.layers:
        layer.params["b"][...] = rng.normal(0.0, 0.5, layer.out_dim)
    return m


def _well_posed(F, x) -> bool:
    """Reject draws where a difference step could cross a ReLU kink or hit a zero output row."""
    if isinstance(F, MlpMap):
        h = x
        for layer, act in zip(F.layers, F.activations):
            z = h @ layer.weight.T + layer.bias
            if act == "relu":
                if np.min(np.abs(z)) < 1e-3:
                    return False
                z = np.maximum(z, 0.0)
            h = z
    return bool(np.min(np.linalg.norm(F.apply(x), axis=1)) > 0.1)


def gradient_trial(rng, forward_kind: str, backward_kind: str, batch: int = 6):
    """Random maps and data with every parameter drawn at random (biases included)."""
    while True:
        d_old = int(rng.integers(2, 9))
        d_new = int(rng.integers(2, 9))
        m = min(d_old, d_new)
        h_old = rng.normal(size=(batch, d_old))
        h_new = rng.normal(size=(batch, d_new))
        labels = rng.integers(0, 3, batch)
        F = _random_affine(rng, d_old, m) if forward_kind == "affine" else _random_mlp(rng, d_old, m)
        if backward_kind == "orthogonal":
            B = OrthogonalMap.random(rng, m, std=0.5)
        else:
            B = _random_affine(rng, m, m, truncate_input=True)
        if _well_posed(F, h_old):
            return F, B, h_old, h_new, labels


def _wrap(fn, inject: bool):
    if not inject:
        return fn

    def bad(x):
        v, g = fn(x)
        return v, np.asarray(g) * (1.0 + 1e-3)

    return bad


def _check_maps(maps, objective, value, delta, inject):
    fn, vfn = map_loss_fn(maps, objective, value)
    return grad_check(_wrap(fn, inject), flatten_params(maps).copy(), delta, vfn, FD_STENCIL)


def _check_array(shape, fn, x0, delta, inject):
    def flat(x):
        v, g = fn(x.reshape(shape))
        return v, np.asarray(g).reshape(-1)

    return grad_check(_wrap(flat, inject), x0.reshape(-1), delta, stencil=FD_STENCIL)


def gradient_suite(trials: int = 100, seed: int = 0, delta: float = FD_DELTA, inject_bad_gradient: bool = False) -> dict:
    """Max relative gradient error per loss term over ``trials`` random instances.

    Trials cycle through the four (forward, backward) map family pairs.
    Returns ``{term: {"max_error", "max_error_near_threshold", "trials"}}``.
    """
    rng = np.random.default_rng(seed)
    out = {t: {"max_error": 0.0, "max_error_near_threshold": 0.0, "trials": 0} for t in GRAD_TERMS}

    def record(term, err, near=False):
        key = "max_error_near_threshold" if near else "max_error"
        out[term][key] = max(out[term][key], err)
        out[term]["trials"] += 1

    for t in range(trials):
        fk, bk = FAMILIES[t % len(FAMILIES)]
        F, B, ho, hn, lab = gradient_trial(rng, fk, bk)
        tau = float(rng.uniform(0.1, 1.0))

        f, b = F.copy(), B.copy()
        only_b = LossWeights(w1=0.0, w2=1.0, w3=0.0, lam=None)
        record(
            "L_B",
            _check_maps(
                {"B": b}, lambda: (lambda v, g: (v, {"B": g}))(*loss_backward_mse(b, hn, ho)),
                lambda: loss_values(f, b, ho, hn, lab, only_b).l_b, delta, inject_bad_gradient,
            ),
        )

        f, b = F.copy(), B.copy()
        only_f = LossWeights(w1=1.0, w2=0.0, w3=0.0, lam=None)
        record(
            "L_F",
            _check_maps(
                {"F": f, "B": b}, lambda: loss_forward(f, b, ho, hn),
                lambda: loss_values(f, b, ho, hn, lab, only_f).l_f, delta, inject_bad_gradient,
            ),
        )

        f, b = F.copy(), B.copy()
        only_c = LossWeights(w1=0.0, w2=0.0, w3=1.0, lam=None, temperature=tau)
        record(
            "L_C",
            _check_maps(
                {"F": f, "B": b}, lambda: loss_combined_contrastive(f, b, ho, hn, lab, tau),
                lambda: loss_values(f, b, ho, hn, lab, only_c).l_c, delta, inject_bad_gradient,
            ),
        )

        n = int(rng.integers(2, 9))
        w0 = rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, n + int(rng.integers(0, 3))))
        record("L_orth", _check_array(w0.shape, loss_orth, w0, delta, inject_bad_gradient))

        w0 = rng.normal(0.0, 1.0, size=(n, n))
        g = gram_deviation(w0)
        # a third of the trials sit inside the threshold band
        lam = g + (rng.uniform(-THRESHOLD_BAND, THRESHOLD_BAND) if t % 3 == 0 else rng.uniform(-3.0, 3.0))
        lam = max(lam, 0.0)
        alpha = float(rng.uniform(1.0, 20.0))
        err = _check_array(w0.shape, lambda w: loss_lambda_sigmoid(w, lam, alpha), w0, delta, inject_bad_gradient)
        record("L_lambda", err, abs(g - lam) <= THRESHOLD_BAND)

        a0 = rng.normal(size=(5, n))
        c0 = rng.normal(size=(5, n))
        la = rng.integers(0, 2, 5)
        la[:2] = [0, 1]

        def contr(x):
            v, (da, dc) = loss_contrastive(x[:5], x[5:], la, la, tau)
            return v, np.vstack([da, dc])

        record("L_contr", _check_array((10, n), contr, np.vstack([a0, c0]), delta, inject_bad_gradient))

        f, b = F.copy(), B.copy()
        w = LossWeights(
            w1=float(rng.uniform(0.1, 2.0)), w2=float(rng.uniform(0.1, 2.0)), w3=float(rng.uniform(0.1, 2.0)),
            lam=None, alpha=float(rng.uniform(1.0, 20.0)), temperature=tau,
        )
        near = False
        if bk == "lambda_affine":
            g = gram_deviation(b.weight)
            lam = max(0.0, g + (rng.uniform(-THRESHOLD_BAND, THRESHOLD_BAND) if t % 3 == 0 else rng.uniform(-3.0, 3.0)))
            near = abs(g - lam) <= THRESHOLD_BAND
            w = LossWeights(w1=w.w1, w2=w.w2, w3=w.w3, lam=lam, alpha=w.alpha, temperature=tau)

        def total():
            br, gr = loss_total(f, b, ho, hn, lab, w)
            return br.total, gr

        err = _check_maps({"F": f, "B": b}, total, lambda: loss_values(f, b, ho, hn, lab, w).total, delta, inject_bad_gradient)
        record("total", err, near)
    return out


def gradient_checks(trials: int = 100, seed: int = 0, inject_bad_gradient: bool = False) -> list[CheckResult]:
    res = gradient_suite(trials, seed, inject_bad_gradient=inject_bad_gradient)
    checks = []
    for term, r in res.items():
        checks.append(CheckResult(f"grad:{term}", r["max_error"] <= GRAD_TOL, r["max_error"], GRAD_TOL, f"{r['trials']} trials"))
        if r["max_error_near_threshold"] > 0:
            checks.append(
                CheckResult(f"grad:{term}:near_threshold", r["max_error_near_threshold"] <= GRAD_TOL_THRESHOLD,
                            r["max_error_near_threshold"], GRAD_TOL_THRESHOLD)
            )
    return checks


# --------------------------------------------------------------------------
# expm / orthogonality invariants


def expm_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_orth = 0.0
    worst_iso = 0.0
    for n in (2, 8, 32, 64):
        p = skew_from_params(rng.normal(0.0, 1.0, n * (n - 1) // 2), n)
        q = expm(p)
        worst_orth = max(worst_orth, float(np.linalg.norm(q.T @ q - np.eye(n))))
        x, y = rng.normal(size=(2, n))
        worst_iso = max(worst_iso, abs(np.linalg.norm(q @ x - q @ y) - np.linalg.norm(x - y)))
    worst_fd = 0.0
    for _ in range(20):
        n = int(rng.integers(1, 9))
        p = rng.normal(size=(n, n))
        e = rng.normal(size=(n, n))
        d = 1e-6
        fd = (expm(p + d * e) - expm(p - d * e)) / (2 * d)
        an = expm_frechet(p, e)
        worst_fd = max(worst_fd, float(np.linalg.norm(an - fd) / max(np.linalg.norm(an), 1e-8)))
    return [
        CheckResult("expm:orthogonality", worst_orth <= 1e-8, worst_orth, 1e-8),
        CheckResult("expm:isometry", worst_iso <= 1e-8, worst_iso, 1e-8),
        CheckResult("expm:frechet_vs_fd", worst_fd <= 1e-5, worst_fd, 1e-5),
    ]


# --------------------------------------------------------------------------
# retrieval metric oracle


def brute_force_metrics(q, ql, g, gl, k: int, leave_one_out: bool) -> tuple[float, float]:
    """Full-sort CMC-Top-k and mAP, one query at a time."""
    hits = 0
    aps = []
    for i in range(q.shape[0]):
        cand = [j for j in range(g.shape[0]) if not (leave_one_out and j == i)]
        dist = [float(np.sqrt(np.sum((q[i] - g[j]) ** 2))) for j in cand]
        ranked = [cand[j] for j in sorted(range(len(cand)), key=lambda j: (dist[j], cand[j]))]
        rel = [gl[j] == ql[i] for j in ranked]
        hits += any(rel[:k])
        pos = [r for r, v in enumerate(rel) if v]
        if pos:
            aps.append(sum((m + 1) / (r + 1) for m, r in enumerate(pos)) / len(pos))
    return hits / q.shape[0], (sum(aps) / len(aps) if aps else 0.0)


def metric_checks(seed: int = 0, instances: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(instances):
        n = int(rng.integers(5, 80))
        dim = int(rng.integers(1, 6))
        classes = int(rng.integers(1, 11))
        x = rng.normal(size=(n, dim))
        lab = rng.integers(0, classes, n)
        k = int(rng.integers(1, 6))
        loo = bool(t % 2)
        if loo:
            q, ql = x, lab
        else:
            m = int(rng.integers(1, 40))
            q, ql = rng.normal(size=(m, dim)), rng.integers(0, classes, m)
        rep = evaluate(EmbeddingSet(q, ql), EmbeddingSet(x, lab), (k,), leave_one_out=loo)
        c, a = brute_force_metrics(q, ql, x, lab, k, loo)
        worst = max(worst, abs(rep.cmc_top_k[k] - c), abs(rep.map_score - a))
    return [CheckResult("retrieval:brute_force", worst <= 1e-12, worst, 1e-12, f"{instances} instances")]


def run_diagnostics(seed: int = 0, trials: int = 100, inject_bad_gradient: bool = False) -> dict:
    checks = gradient_checks(trials, seed, inject_bad_gradient) + expm_checks(seed) + metric_checks(seed)
    return {"passed": all(c.passed for c in checks), "checks": [c.to_dict() for c in checks]}
