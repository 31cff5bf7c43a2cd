"""Adam training of the forward/backward map pair on paired embeddings.

Only the map parameters are ever updated; the embeddings are read-only.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .embeddings import PairedEmbeddings, random_rotation
from .errors import InvalidSpecError, MissingLabelsError, ShapeMismatchError
from .losses import LossBreakdown, LossWeights, gram_deviation, loss_total
from .transforms import AffineMap, Map, MlpMap, OrthogonalMap, common_dim

BACKWARD_KINDS = ("orthogonal", "lambda_affine")
BACKWARD_INITS = ("gaussian", "orthogonal")
FORWARD_KINDS = ("affine", "mlp")
_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 100
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    backward_kind: str = "orthogonal"
    forward_kind: str = "affine"
    # None -> N(0, 1/in_dim)
    affine_init_std: float | None = None
    skew_init_std: float = 1e-2
    # lambda_affine only: "orthogonal" starts W at a Haar-random rotation
    backward_init: str = "gaussian"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidSpecError("learning_rate must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise InvalidSpecError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise InvalidSpecError("adam_eps > 0, batch_size >= 1, epochs >= 0 required")
        if self.backward_kind not in BACKWARD_KINDS:
            raise InvalidSpecError(f"backward_kind must be one of {BACKWARD_KINDS}")
        if self.backward_init not in BACKWARD_INITS:
            raise InvalidSpecError(f"backward_init must be one of {BACKWARD_INITS}")
        if self.forward_kind not in FORWARD_KINDS:
            raise InvalidSpecError(f"forward_kind must be one of {FORWARD_KINDS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidSpecError(f"unknown TrainConfig keys: {sorted(unknown)}")
        data = dict(data)
        if isinstance(data.get("weights"), dict):
            wknown = {f.name for f in fields(LossWeights)}
            bad = set(data["weights"]) - wknown
            if bad:
                raise InvalidSpecError(f"unknown LossWeights keys: {sorted(bad)}")
            data["weights"] = LossWeights(**data["weights"])
        return cls(**data)

    def with_weights(self, **kw) -> "TrainConfig":
        return replace(self, weights=replace(self.weights, **kw))


@dataclass
class TrainReport:
    history: list[LossBreakdown]
    final_gram_deviation: float | None
    final_orthogonality_error: float | None
    steps: int
    seed: int
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "history": [h.to_dict() for h in self.history],
            "final_gram_deviation": self.final_gram_deviation,
            "final_orthogonality_error": self.final_orthogonality_error,
            "steps": self.steps,
            "seed": self.seed,
        }
        if include_timing:
            out["wall_clock_seconds"] = self.wall_clock_seconds
        return out


class AdamState:
    def __init__(self):
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for k in params:
        if k not in grads or np.shape(grads[k]) != np.shape(params[k]):
            raise ShapeMismatchError(f"gradient for {k!r} missing or misshapen")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for k, p in params.items():
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * (g * g)
        m_hat = state.m[k] / bc1
        v_hat = state.v[k] / bc2
        p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def epoch_shuffle(n: int, seed: int, epoch: int) -> np.ndarray:
    """Permutation of ``range(n)`` from a Philox stream keyed by ``(seed, epoch)``."""
    key = np.array([int(seed) & _U64, int(epoch) & _U64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).permutation(n)


def init_maps(dim_old: int, dim_new: int, config: TrainConfig) -> tuple[Map, Map]:
    """Initial ``(F, B)``; both operate in the common (smaller) dimension on the output side."""
    rng = np.random.default_rng(config.seed)
    m = common_dim(dim_old, dim_new)
    if config.backward_kind == "orthogonal":
        B: Map = OrthogonalMap.random(rng, m, config.skew_init_std)
    elif config.backward_init == "orthogonal":
        B = AffineMap(random_rotation(rng, m), None, truncate_input=True)
    else:
        B = AffineMap.random(rng, m, m, config.affine_init_std, truncate_input=True)
    if config.forward_kind == "affine":
        F: Map = AffineMap.random(rng, dim_old, m, config.affine_init_std)
    else:
        F = MlpMap.random(rng, dim_old, m)
    return F, B


def _orth_error(B: Map) -> float | None:
    if isinstance(B, OrthogonalMap):
        q = B.matrix
        return float(np.linalg.norm(q.T @ q - np.eye(q.shape[0])))
    return None


def train(pair: PairedEmbeddings, config: TrainConfig, callback=None, init: tuple[Map, Map] | None = None):
    """Jointly optimize ``F`` (old -> common space) and ``B`` (new -> old space).

    ``callback(step, F, B, breakdown)`` runs after every optimizer step.
    Returns ``(F, B, TrainReport)``.
    """
    w = config.weights
    if w.w3 > 0 and w.labeled and pair.labels is None:
        raise MissingLabelsError("labeled contrastive loss needs labels; set labeled=false")
    start = time.perf_counter()
    F, B = init if init is not None else init_maps(pair.old.dim, pair.new.dim, config)
    h_old = pair.old.vectors
    h_new = pair.new.vectors
    labels = pair.labels
    n = pair.count
    bs = min(config.batch_size, n)
    states = {"F": AdamState(), "B": AdamState()}
    history = []
    step = 0
    for epoch in range(config.epochs):
        perm = epoch_shuffle(n, config.seed, epoch)
        acc = LossBreakdown()
        for lo in range(0, n, bs):
            idx = perm[lo : lo + bs]
            lab = None if labels is None else labels[idx]
            br, grads = loss_total(F, B, h_old[idx], h_new[idx], lab, w)
            adam_step(F.params, grads["F"], states["F"], config)
            adam_step(B.params, grads["B"], states["B"], config)
            F.refresh()
            B.refresh()
            step += 1
            frac = idx.size / n
            for name in ("total", "l_f", "l_b", "l_c", "l_lambda"):
                setattr(acc, name, getattr(acc, name) + frac * getattr(br, name))
            if callback is not None:
                callback(step, F, B, br)
        history.append(acc)
    report = TrainReport(
        history=history,
        final_gram_deviation=gram_deviation(B.weight) if isinstance(B, AffineMap) else None,
        final_orthogonality_error=_orth_error(B),
        steps=step,
        seed=config.seed,
        wall_clock_seconds=time.perf_counter() - start,
    )
    return F, B, report
