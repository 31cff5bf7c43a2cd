"""Synthetic study protocols shared by the CLI and the acceptance suite.

Every function is deterministic given its seed and returns plain dicts of
floats so results can be serialized directly.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .backfill import DEFAULT_GRID, backfill_curve, make_ordering
from .embeddings import EmbeddingSet, PairedEmbeddings, SynthSpec, split_rows, synth_pair
from .linalg import column_angle_kde
from .losses import LossWeights, gram_deviation, loss_backward_mse
from .retrieval import check_definition1, compatibility_verdict, evaluate
from .trainer import TrainConfig, train
from .transforms import AffineMap, Map, OrthogonalMap

# Isotropic single-cluster data with the new model at 1/20 scale: L_B keeps
# pulling the Gram deviation upward, L_lambda holds it near the threshold.
LAMBDA_SPEC = SynthSpec(num_classes=2, per_class=200, inter_class_separation=0.5, class_spread=4.75, new_scale=0.05)
ANGLE_GRID = np.linspace(0.0, 180.0, 361)

# subsets of (L_F, L_B, L_C) in the row order of the loss ablation table
ABLATION_CONFIGS = (
    (1, 0, 0),
    (0, 1, 0),
    (0, 0, 1),
    (1, 1, 0),
    (1, 0, 1),
    (0, 1, 1),
    (1, 1, 1),
)


def _mapped(emb: EmbeddingSet, m: Map, tag: str) -> EmbeddingSet:
    return emb.with_vectors(m.apply(emb.vectors), tag)


def backward_gram(B: Map) -> float:
    w = B.matrix if isinstance(B, OrthogonalMap) else B.weight
    return gram_deviation(w)


def angle_mode(w) -> float:
    dens = column_angle_kde(w, ANGLE_GRID)
    return float(ANGLE_GRID[int(np.argmax(dens))])


def lambda_study(lam: float, seed: int = 0, epochs: int = 300) -> dict:
    """Train an 8x8 lambda-regularized affine B and report where its Gram deviation settles.

    For ``lam > 0`` B is fit against L_B on :data:`LAMBDA_SPEC` from a random
    rotation. For ``lam == 0`` L_lambda runs alone from a Gaussian init, which
    reduces to plain soft orthogonality.
    """
    pair = synth_pair(SynthSpec(**{**LAMBDA_SPEC.__dict__, "seed": seed}))
    if lam > 0:
        w = LossWeights(w1=0.0, w2=1.0, w3=0.0, lam=float(lam))
        cfg = TrainConfig(epochs=epochs, batch_size=64, seed=seed, weights=w, backward_kind="lambda_affine", backward_init="orthogonal")
    else:
        w = LossWeights(w1=0.0, w2=0.0, w3=0.0, lam=0.0)
        cfg = TrainConfig(epochs=epochs, batch_size=64, seed=seed, weights=w, backward_kind="lambda_affine")
    _, B, rep = train(pair, cfg)
    return {"lambda": float(lam), "seed": seed, "gram_deviation": rep.final_gram_deviation, "angle_mode": angle_mode(B.weight)}


def toy_alignment_study(seed: int = 0, epochs: int = 300, learning_rate: float = 0.01) -> dict:
    """2-D analog of the affine / lambda-orthogonal / orthogonal comparison.

    The new model separates 10 classes, the old one only the first 5; the
    backward map is fit by L_B on the 5 shared classes.
    """
    spec = SynthSpec(
        num_classes=10, per_class=40, dim_old=2, dim_new=2, class_spread=0.12, inter_class_separation=0.6,
        new_model_distortion="affine", condition_number=2.0, new_scale=0.4, seed=seed,
    )
    full = synth_pair(spec)
    shared = full.subset(np.flatnonzero(full.labels < 5))
    # center each space on the shared classes; one common factor brings the
    # old space to unit RMS norm, which keeps the relation between the spaces
    old = shared.old.vectors - shared.old.vectors.mean(axis=0)
    new = shared.new.vectors - shared.new.vectors.mean(axis=0)
    scale = np.sqrt(np.mean(np.sum(old * old, axis=1)))
    shared = PairedEmbeddings(shared.old.with_vectors(old / scale), shared.new.with_vectors(new / scale))
    w_b = dict(w1=0.0, w2=1.0, w3=0.0)
    base = TrainConfig(epochs=epochs, batch_size=32, seed=seed, learning_rate=learning_rate)
    runs = {
        "affine": replace(base, weights=LossWeights(lam=None, **w_b), backward_kind="lambda_affine"),
        "lambda": replace(base, weights=LossWeights(lam=1.0, **w_b), backward_kind="lambda_affine", backward_init="orthogonal"),
        "orthogonal": replace(base, weights=LossWeights(lam=None, **w_b)),
    }
    out = {"seed": seed}
    for name, cfg in runs.items():
        _, B, _ = train(shared, cfg)
        mse, _ = loss_backward_mse(B, shared.new.vectors, shared.old.vectors)
        out[name] = {"mse": mse, "gram_deviation": backward_gram(B)}
    return out


def _fit_dims(query: EmbeddingSet, gallery: EmbeddingSet):
    d = min(query.dim, gallery.dim)
    q = query if query.dim == d else query.with_vectors(query.vectors[:, :d])
    g = gallery if gallery.dim == d else gallery.with_vectors(gallery.vectors[:, :d])
    return q, g


def adapted_views(F: Map, B: Map, pair: PairedEmbeddings) -> dict[str, EmbeddingSet]:
    return {
        "old": pair.old,
        "new": pair.new,
        "F(old)": _mapped(pair.old, F, "F(old)"),
        "B(new)": _mapped(pair.new, B, "B(new)"),
    }


# query/gallery columns of the loss ablation table, plus the old/old baseline
TABLE_COLUMNS = (
    ("old", "old"),
    ("F(old)", "old"),
    ("F(old)", "F(old)"),
    ("B(new)", "old"),
    ("B(new)", "F(old)"),
    ("B(new)", "B(new)"),
)
CROSS_COLUMNS = (("F(old)", "old"), ("B(new)", "old"), ("B(new)", "F(old)"))


def table_row(F: Map, B: Map, pair: PairedEmbeddings, distance: str = "l2") -> dict:
    """Leave-one-out CMC-Top1 / mAP for every query/gallery column."""
    views = adapted_views(F, B, pair)
    out = {}
    for q, g in TABLE_COLUMNS:
        qs, gs = _fit_dims(views[q], views[g])
        rep = evaluate(qs, gs, (1,), distance, leave_one_out=True, query_tag=q, gallery_tag=g)
        out[f"{q}/{g}"] = {"cmc_top1": rep.cmc_top_k[1], "map": rep.map_score}
    out["cross_model_cmc_top1"] = float(np.mean([out[f"{q}/{g}"]["cmc_top1"] for q, g in CROSS_COLUMNS]))
    return out


COMPAT_SPEC = SynthSpec(num_classes=10, per_class=40, class_spread=1.5, inter_class_separation=3.0, new_spread_factor=0.5)


def compat_config(seed: int, weights: LossWeights | None = None, epochs: int = 100) -> TrainConfig:
    return TrainConfig(
        learning_rate=0.01, batch_size=32, epochs=epochs, seed=seed,
        weights=weights if weights is not None else LossWeights(lam=None),
    )


def compatibility_study(seed: int = 0, epochs: int = 100) -> dict:
    """Train on half of a better-clustered new model's pairs, evaluate on the other half."""
    pair = synth_pair(replace(COMPAT_SPEC, seed=seed))
    fit, held = split_rows(pair, 0.5, seed)
    F, B, _ = train(fit, compat_config(seed, epochs=epochs))
    views = adapted_views(F, B, held)
    verdict = compatibility_verdict(views["B(new)"], held.old, held.old, leave_one_out=True)
    return {
        "seed": seed,
        "verdict": verdict.to_dict(),
        "def1_backward": check_definition1(held.old, views["B(new)"]).to_dict(),
        "def1_raw": check_definition1(held.old, held.new).to_dict(),
    }


def loss_ablation(seed: int = 0, epochs: int = 100) -> dict:
    """All seven (L_F, L_B, L_C) subsets on one synthetic pair."""
    pair = synth_pair(replace(COMPAT_SPEC, seed=seed))
    fit, held = split_rows(pair, 0.5, seed)
    rows = {}
    for w1, w2, w3 in ABLATION_CONFIGS:
        cfg = compat_config(seed, LossWeights(w1=w1, w2=w2, w3=w3, lam=None), epochs)
        F, B, _ = train(fit, cfg)
        rows[f"{w1}{w2}{w3}"] = table_row(F, B, held)
    return {"seed": seed, "rows": rows}


BACKFILL_SPEC = replace(COMPAT_SPEC, per_class=160, class_spread=tuple(np.round(np.geomspace(0.5, 2.5, 10), 6)))


def backfill_study(seed: int = 0, epochs: int = 100, kinds=("ours_mse", "ours_cosine", "random"), beta_grid=DEFAULT_GRID) -> dict:
    """Backfill curves with B(new) queries against a gallery that migrates from F(old) to B(new)."""
    pair = synth_pair(replace(BACKFILL_SPEC, seed=seed))
    fit, held = split_rows(pair, 0.5, seed)
    query, gallery = split_rows(held, 0.5, seed + 1)
    F, B, _ = train(fit, compat_config(seed, epochs=epochs))
    q = _mapped(query.new, B, "B(new)")
    old_ad = _mapped(gallery.old, F, "F(old)")
    new_ad = _mapped(gallery.new, B, "B(new)")
    curves = {}
    for kind in kinds:
        ordering = make_ordering(kind, old_ad, seed)
        curves[kind] = backfill_curve(q, old_ad, new_ad, ordering, beta_grid).to_dict()
    return {"seed": seed, "curves": curves}
