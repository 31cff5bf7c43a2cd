"""Command-line interface: ``lalign synth | train | transform | eval | backfill | angles | diagnose``.

Option values resolve as built-in defaults < ``--config`` JSON < explicit
flags. Every JSON report embeds the tool version, the resolved config and
the sha256 of each input. Exit codes: 0 ok, 1 usage, 2 data, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .backfill import ORDERING_KINDS, backfill_curve, make_ordering
from .diagnostics import run_diagnostics
from .embeddings import EmbeddingSet, PairedEmbeddings, SynthSpec, content_hash, load_bundle, save_bundle, synth_pair
from .errors import InvalidSpecError, LalignError
from .experiments import backward_gram
from .linalg import column_angle_kde
from .losses import LossWeights
from .retrieval import DISTANCES, compatibility_verdict, evaluate
from .trainer import TrainConfig, train
from .transforms import AffineMap, Map, OrthogonalMap, load_map, save_map, truncate_to

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3
VIEWS = ("old", "new", "F(old)", "B(new)")
DEFAULT_PAIRS = "old/old,B(new)/old,B(new)/F(old),F(old)/F(old)"

DEFAULTS = {
    "synth": {
        "num_classes": 10, "per_class": 40, "dim_old": 8, "dim_new": 8, "class_spread": "0.5",
        "separation": 3.0, "distortion": "orthogonal", "noise": 0.0, "condition_number": 5.0,
        "new_spread_factor": 1.0, "new_scale": 1.0,
    },
    "train": {
        "epochs": 100, "batch_size": 256, "learning_rate": 0.001, "backward_kind": "orthogonal",
        "forward_kind": "affine", "backward_init": "gaussian", "affine_init_std": None, "skew_init_std": 0.01,
        "w1": 1.0, "w2": 1.0, "w3": 1.0, "lam": 12.0, "alpha": 10.0, "temperature": 0.1,
        "unlabeled": False, "freeze_backward": False,
    },
    "transform": {},
    "eval": {"F": None, "B": None, "pairs": DEFAULT_PAIRS, "ks": "1,5,10", "distance": "l2",
             "leave_one_out": True, "verdict": False, "ap_csv": None},
    "backfill": {"orderings": "ours_mse,ours_cosine,random", "grid_points": 11, "query_fraction": 0.5, "distance": "l2"},
    "angles": {"grid_step": 0.5, "bandwidth": None},
    "diagnose": {"trials": 100, "inject_bad_gradient": False, "out": None},
}
COMMON = {"seed": 0, "threads": 1}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _bool_flag(p, name, help_text):
    p.add_argument(f"--{name.replace('_', '-')}", dest=name, action=argparse.BooleanOptionalAction, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="seed for all randomness in the command")
    common.add_argument("--threads", type=int, help="BLAS/OpenMP threads (1 = bit-reproducible)")
    common.add_argument("--config", help="JSON file of option values; flags override it")

    parser = _Parser(prog="lalign", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"lalign {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    kw = dict(parents=[common], argument_default=argparse.SUPPRESS)

    p = sub.add_parser("synth", help="write a synthetic old/new bundle pair", **kw)
    p.add_argument("--out", required=True, help="output directory (gets old/ and new/)")
    p.add_argument("--num-classes", dest="num_classes", type=int)
    p.add_argument("--per-class", dest="per_class", type=int)
    p.add_argument("--dim-old", dest="dim_old", type=int)
    p.add_argument("--dim-new", dest="dim_new", type=int)
    p.add_argument("--class-spread", dest="class_spread", help="one value or a comma list, one per class")
    p.add_argument("--separation", type=float)
    p.add_argument("--distortion", choices=("orthogonal", "affine", "affine+noise"))
    p.add_argument("--noise", type=float)
    p.add_argument("--condition-number", dest="condition_number", type=float)
    p.add_argument("--new-spread-factor", dest="new_spread_factor", type=float)
    p.add_argument("--new-scale", dest="new_scale", type=float)

    p = sub.add_parser("train", help="fit forward and backward maps", **kw)
    p.add_argument("--old", required=True)
    p.add_argument("--new", required=True)
    p.add_argument("--out", required=True, help="output directory for F.map, B.map, train.json")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--backward-kind", dest="backward_kind", choices=("orthogonal", "lambda_affine"))
    p.add_argument("--forward-kind", dest="forward_kind", choices=("affine", "mlp"))
    p.add_argument("--backward-init", dest="backward_init", choices=("gaussian", "orthogonal"))
    p.add_argument("--affine-init-std", dest="affine_init_std", type=float)
    p.add_argument("--skew-init-std", dest="skew_init_std", type=float)
    p.add_argument("--w1", type=float, help="forward alignment weight")
    p.add_argument("--w2", type=float, help="backward alignment weight")
    p.add_argument("--w3", type=float, help="contrastive weight")
    p.add_argument("--lam", type=_lam, help="threshold for the regularizer, or 'none'")
    p.add_argument("--alpha", type=float)
    p.add_argument("--temperature", type=float)
    _bool_flag(p, "unlabeled", "use row-aligned counterparts as the only positives")
    _bool_flag(p, "freeze_backward", "no contrastive gradient into the backward map")

    p = sub.add_parser("transform", help="apply a map file to a bundle", **kw)
    p.add_argument("--map", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True, help="output bundle directory")

    p = sub.add_parser("eval", help="retrieval metrics for query/gallery combinations", **kw)
    p.add_argument("--old", required=True)
    p.add_argument("--new", required=True)
    p.add_argument("--F", dest="F", help="forward map file")
    p.add_argument("--B", dest="B", help="backward map file")
    p.add_argument("--pairs", help=f"comma list of query/gallery among {VIEWS}")
    p.add_argument("--ks", help="comma list of CMC ranks")
    p.add_argument("--distance", choices=DISTANCES)
    _bool_flag(p, "leave_one_out", "exclude row i of the gallery for query i")
    _bool_flag(p, "verdict", "also report the B(new)/old vs old/old compatibility verdict")
    p.add_argument("--ap-csv", dest="ap_csv", help="write per-query AP of every pair to this CSV")
    p.add_argument("--out", required=True, help="report JSON path")

    p = sub.add_parser("backfill", help="partial backfilling curves", **kw)
    p.add_argument("--old", required=True)
    p.add_argument("--new", required=True)
    p.add_argument("--F", dest="F", required=True)
    p.add_argument("--B", dest="B", required=True)
    p.add_argument("--orderings", help=f"comma list among {ORDERING_KINDS}")
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--query-fraction", dest="query_fraction", type=float)
    p.add_argument("--distance", choices=DISTANCES)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("angles", help="KDE of pairwise column angles of a map", **kw)
    p.add_argument("--map", required=True)
    p.add_argument("--grid-step", dest="grid_step", type=float)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("diagnose", help="gradient, expm and metric self-checks", **kw)
    p.add_argument("--trials", type=int)
    _bool_flag(p, "inject_bad_gradient", "perturb analytic gradients (checks that failures surface)")
    p.add_argument("--out", help="optional report JSON path")
    return parser


def _lam(text: str):
    if text.strip().lower() in ("none", "null", "off"):
        return None
    return float(text)


def resolve(args: argparse.Namespace) -> dict:
    cmd = args.command
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    cfg = {**COMMON, **DEFAULTS[cmd]}
    if getattr(args, "config", None):
        try:
            file_cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
        allowed = set(cfg) | {"out", "old", "new", "map", "bundle", "F", "B"}
        unknown = set(file_cfg) - allowed
        if unknown:
            raise UsageError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        cfg.update(file_cfg)
    cfg.update(flags)
    if cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n", encoding="utf-8")


def envelope(cmd: str, cfg: dict, inputs: dict, result) -> dict:
    return {
        "tool": "lalign",
        "version": __version__,
        "command": cmd,
        "config": cfg,
        "inputs": {k: {"path": str(v), "sha256": content_hash(v)} for k, v in sorted(inputs.items())},
        "result": result,
    }


# --------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict) -> int:
    spread = [float(v) for v in str(cfg["class_spread"]).split(",")]
    spec = SynthSpec(
        num_classes=cfg["num_classes"], per_class=cfg["per_class"], dim_old=cfg["dim_old"], dim_new=cfg["dim_new"],
        class_spread=spread[0] if len(spread) == 1 else tuple(spread), inter_class_separation=cfg["separation"],
        new_model_distortion=cfg["distortion"], noise=cfg["noise"], condition_number=cfg["condition_number"],
        new_spread_factor=cfg["new_spread_factor"], new_scale=cfg["new_scale"], seed=cfg["seed"],
    )
    pair = synth_pair(spec)
    out = Path(cfg["out"])
    save_bundle(pair.old, out / "old")
    save_bundle(pair.new, out / "new")
    result = {"count": pair.count, "dim_old": pair.old.dim, "dim_new": pair.new.dim, "num_classes": spec.num_classes}
    write_json(out / "synth.json", envelope("synth", cfg, {"old": out / "old", "new": out / "new"}, result))
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def train_config(cfg: dict) -> TrainConfig:
    weights = LossWeights(
        w1=cfg["w1"], w2=cfg["w2"], w3=cfg["w3"], lam=cfg["lam"], alpha=cfg["alpha"],
        temperature=cfg["temperature"], labeled=not cfg["unlabeled"], freeze_backward_in_contrastive=cfg["freeze_backward"],
    )
    return TrainConfig(
        learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"], epochs=cfg["epochs"], seed=cfg["seed"],
        weights=weights, backward_kind=cfg["backward_kind"], forward_kind=cfg["forward_kind"],
        affine_init_std=cfg["affine_init_std"], skew_init_std=cfg["skew_init_std"], backward_init=cfg["backward_init"],
    )


def cmd_train(cfg: dict) -> int:
    try:
        tc = train_config(cfg)
    except ValueError as exc:
        raise InvalidSpecError(str(exc)) from exc
    pair = PairedEmbeddings(load_bundle(cfg["old"]), load_bundle(cfg["new"]))
    F, B, report = train(pair, tc)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_map(F, out / "F.map")
    save_map(B, out / "B.map")
    result = report.to_dict()
    result["final_loss"] = report.history[-1].to_dict() if report.history else None
    result["backward_gram_deviation"] = backward_gram(B)
    result["train_config"] = tc.to_dict()
    write_json(out / "train.json", envelope("train", cfg, {"old": cfg["old"], "new": cfg["new"]}, result))
    print(json.dumps({"steps": report.steps, "backward_gram_deviation": result["backward_gram_deviation"]}, sort_keys=True))
    return EXIT_OK


def _apply(m: Map, emb: EmbeddingSet, tag: str) -> EmbeddingSet:
    return emb.with_vectors(m.apply(emb.vectors), tag)


def cmd_transform(cfg: dict) -> int:
    m = load_map(cfg["map"])
    emb = load_bundle(cfg["bundle"])
    out = _apply(m, emb, f"{m.kind}({emb.model_tag})")
    save_bundle(out, cfg["out"])
    result = {"count": out.count, "dim": out.dim, "map_kind": m.kind}
    write_json(Path(cfg["out"]) / "transform.json", envelope("transform", cfg, {"map": cfg["map"], "bundle": cfg["bundle"]}, result))
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def _views(cfg: dict) -> tuple[dict, dict]:
    old = load_bundle(cfg["old"])
    new = load_bundle(cfg["new"])
    views = {"old": old, "new": new}
    inputs = {"old": cfg["old"], "new": cfg["new"]}
    for key, src, tag in (("F", old, "F(old)"), ("B", new, "B(new)")):
        if cfg.get(key):
            views[tag] = _apply(load_map(cfg[key]), src, tag)
            inputs[key] = cfg[key]
    return views, inputs


def _pair_views(views: dict, q: str, g: str):
    for t in (q, g):
        if t not in VIEWS:
            raise UsageError(f"unknown view {t!r}; choose from {VIEWS}")
        if t not in views:
            raise UsageError(f"view {t!r} needs its map file (--F/--B)")
    qs, gs = views[q], views[g]
    d = min(qs.dim, gs.dim)
    if qs.dim != d:
        qs = qs.with_vectors(truncate_to(qs.vectors, d))
    if gs.dim != d:
        gs = gs.with_vectors(truncate_to(gs.vectors, d))
    return qs, gs


def cmd_eval(cfg: dict) -> int:
    views, inputs = _views(cfg)
    ks = [int(k) for k in str(cfg["ks"]).split(",")]
    pairs = [p.strip().split("/") for p in str(cfg["pairs"]).split(",") if p.strip()]
    reports = []
    ap_rows = []
    for pq in pairs:
        if len(pq) != 2:
            raise UsageError(f"pair must be query/gallery, got {'/'.join(pq)!r}")
        qs, gs = _pair_views(views, *pq)
        rep = evaluate(qs, gs, ks, cfg["distance"], cfg["leave_one_out"], pq[0], pq[1])
        reports.append(rep.to_dict())
        ap_rows += [(f"{pq[0]}/{pq[1]}", i, a) for i, a in enumerate(rep.per_query_ap)]
    result = {"reports": reports}
    if cfg["verdict"]:
        qs, gs = _pair_views(views, "B(new)", "old")
        verdict = compatibility_verdict(qs, gs, views["old"], cfg["distance"], cfg["leave_one_out"])
        result["verdict"] = verdict.to_dict()
    if cfg["ap_csv"]:
        lines = ["pair,query_index,ap"] + [f"{p},{i},{'' if np.isnan(a) else repr(float(a))}" for p, i, a in ap_rows]
        Path(cfg["ap_csv"]).write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_json(cfg["out"], envelope("eval", cfg, inputs, result))
    print(json.dumps({f"{r['query_tag']}/{r['gallery_tag']}": r["cmc_top_k"]["1"] for r in reports}, sort_keys=True))
    return EXIT_OK


def cmd_backfill(cfg: dict) -> int:
    views, inputs = _views(cfg)
    n = views["old"].count
    frac = cfg["query_fraction"]
    if not 0.0 < frac < 1.0:
        raise InvalidSpecError("query_fraction must lie in (0, 1)")
    perm = np.random.default_rng(cfg["seed"]).permutation(n)
    cut = int(round(frac * n))
    q_rows, g_rows = np.sort(perm[:cut]), np.sort(perm[cut:])
    query = views["B(new)"].subset(q_rows)
    old_ad = views["F(old)"].subset(g_rows)
    new_ad = views["B(new)"].subset(g_rows)
    if cfg["grid_points"] < 2:
        raise InvalidSpecError("grid_points must be >= 2")
    grid = np.round(np.linspace(0.0, 1.0, cfg["grid_points"]), 12)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    curves = {}
    for kind in [k.strip() for k in str(cfg["orderings"]).split(",") if k.strip()]:
        ordering = make_ordering(kind, old_ad, cfg["seed"])
        curve = backfill_curve(query, old_ad, new_ad, ordering, grid, cfg["distance"])
        (out / f"backfill_{kind}.csv").write_text(curve.to_csv(), encoding="utf-8")
        curves[kind] = curve.to_dict()
    result = {"num_queries": query.count, "gallery_size": old_ad.count, "curves": curves}
    write_json(out / "backfill.json", envelope("backfill", cfg, inputs, result))
    print(json.dumps({k: v["m_tilde"] for k, v in curves.items()}, sort_keys=True))
    return EXIT_OK


def cmd_angles(cfg: dict) -> int:
    m = load_map(cfg["map"])
    if isinstance(m, OrthogonalMap):
        w = m.matrix
    elif isinstance(m, AffineMap):
        w = m.weight
    else:
        raise InvalidSpecError("angles needs an affine or orthogonal map")
    if cfg["grid_step"] <= 0:
        raise InvalidSpecError("grid_step must be positive")
    grid = np.round(np.arange(0.0, 180.0 + 0.5 * cfg["grid_step"], cfg["grid_step"]), 9)
    dens = column_angle_kde(w, grid, cfg["bandwidth"])
    lines = ["angle_deg,density"] + [f"{g!r},{d!r}" for g, d in zip(grid.tolist(), dens.tolist())]
    Path(cfg["out"]).write_text("\n".join(lines) + "\n", encoding="utf-8")
    mode = float(grid[int(np.argmax(dens))])
    print(json.dumps({"mode_deg": mode}))
    return EXIT_OK


def cmd_diagnose(cfg: dict) -> int:
    rep = run_diagnostics(cfg["seed"], cfg["trials"], cfg["inject_bad_gradient"])
    if cfg.get("out"):
        write_json(cfg["out"], envelope("diagnose", cfg, {}, rep))
    for c in rep["checks"]:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']} {c['value']:.3g} (<= {c['threshold']:.0e})")
    return EXIT_OK if rep["passed"] else EXIT_CHECK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "transform": cmd_transform,
    "eval": cmd_eval,
    "backfill": cmd_backfill,
    "angles": cmd_angles,
    "diagnose": cmd_diagnose,
}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args)
        with threadpool_limits(limits=cfg["threads"]):
            return COMMANDS[args.command](cfg)
    except UsageError as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (LalignError, ValueError, OSError) as exc:
        return _fail("data", exc, EXIT_DATA)


if __name__ == "__main__":
    sys.exit(main())
