"""Synthetic few-shot episodes with a controllable support/query shift.

An episode draws ``n_way`` fresh class means, then ``k_shot`` support and
``q_target`` query rows per class. Each side gets its own affine transform
and additive Gaussian noise, which is how the two sets drift apart.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from pgada.core import DomainError, RngStream, ShapeError, UsageError, as_matrix, pairwise_sq_dist
from pgada.transport import (
    DEFAULT_MAX_ITER,
    DEFAULT_TOL,
    barycentric_map,
    sinkhorn,
)

CLASSIFIERS = ("proto", "matching")
NORMALIZATIONS = ("transductive", "conventional", "none")
VAR_FLOOR = 1e-8


@dataclass
class AffineShift:
    """``x -> R (scale * x) + offset``.

    ``scale`` and ``offset`` are scalars or per-dimension sequences;
    ``rotation`` is an angle applied in every consecutive coordinate plane
    ``(0, 1), (2, 3), ...``.
    """

    scale: float | Sequence[float] = 1.0
    offset: float | Sequence[float] = 0.0
    rotation: float = 0.0

    def __post_init__(self):
        if np.any(np.asarray(self.scale, dtype=np.float64) <= 0):
            raise DomainError("scale entries must be positive")

    def apply(self, x: np.ndarray) -> np.ndarray:
        p = x.shape[1]
        scale = np.broadcast_to(np.asarray(self.scale, dtype=np.float64), (p,))
        offset = np.broadcast_to(np.asarray(self.offset, dtype=np.float64), (p,))
        out = x * scale
        if self.rotation:
            c, s = np.cos(self.rotation), np.sin(self.rotation)
            rot = out.copy()
            for i in range(0, p - 1, 2):
                rot[:, i] = c * out[:, i] - s * out[:, i + 1]
                rot[:, i + 1] = s * out[:, i] + c * out[:, i + 1]
            out = rot
        return out + offset

    @property
    def is_identity(self) -> bool:
        return (np.all(np.asarray(self.scale) == 1.0) and np.all(np.asarray(self.offset) == 0.0)
                and self.rotation == 0.0)


@dataclass
class ShiftSpec:
    support_noise: float = 0.0
    query_noise: float = 0.0
    support_transform: AffineShift = field(default_factory=AffineShift)
    query_transform: AffineShift = field(default_factory=AffineShift)

    def __post_init__(self):
        if self.support_noise < 0 or self.query_noise < 0:
            raise DomainError("noise levels must be non-negative")
        if isinstance(self.support_transform, dict):
            self.support_transform = AffineShift(**self.support_transform)
        if isinstance(self.query_transform, dict):
            self.query_transform = AffineShift(**self.query_transform)

    def to_dict(self) -> dict:
        def tr(t):
            d = asdict(t)
            for k in ("scale", "offset"):
                if not np.isscalar(d[k]):
                    d[k] = [float(v) for v in d[k]]
            return d

        return {"support_noise": self.support_noise, "query_noise": self.query_noise,
                "support_transform": tr(self.support_transform),
                "query_transform": tr(self.query_transform)}

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftSpec":
        return cls(**d)


@dataclass
class Episode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    shift: ShiftSpec
    seed: int

    @property
    def n_way(self) -> int:
        return int(self.support_y.max()) + 1

    def to_dict(self) -> dict:
        return {
            "support_x": {"shape": list(self.support_x.shape), "data": self.support_x.ravel().tolist()},
            "support_y": self.support_y.tolist(),
            "query_x": {"shape": list(self.query_x.shape), "data": self.query_x.ravel().tolist()},
            "query_y": self.query_y.tolist(),
            "shift": self.shift.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        def mat(m):
            return np.array(m["data"], dtype=np.float64).reshape(m["shape"])

        return cls(mat(d["support_x"]), np.array(d["support_y"], dtype=np.int64),
                   mat(d["query_x"]), np.array(d["query_y"], dtype=np.int64),
                   ShiftSpec.from_dict(d["shift"]), int(d["seed"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Episode":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def class_means(n_way: int, p: int, class_sep: float, gen: np.random.Generator,
                signal_dim: int | None = None, fragile_dim: int = 0,
                fragile_sep: float = 0.5) -> np.ndarray:
    """Class centres drawn uniformly on the sphere of radius ``class_sep``.

    With ``signal_dim < p`` the centres live in the first ``signal_dim``
    coordinates and the remaining ones carry only within-class noise. The
    last ``fragile_dim`` coordinates, if any, hold a second, much smaller
    sphere of radius ``fragile_sep``.
    """
    k = p - fragile_dim if signal_dim is None else signal_dim
    if not 1 <= k <= p - fragile_dim:
        raise DomainError(f"signal_dim must lie in [1, {p - fragile_dim}]")
    dirs = gen.standard_normal((n_way, k))
    dirs *= class_sep / np.linalg.norm(dirs, axis=1, keepdims=True)
    means = np.zeros((n_way, p))
    means[:, :k] = dirs
    if fragile_dim:
        fr = gen.standard_normal((n_way, fragile_dim))
        means[:, p - fragile_dim:] = fr * fragile_sep / np.linalg.norm(fr, axis=1, keepdims=True)
    return means


def spread_vector(p: int, spread: float, fragile_dim: int = 0,
                  fragile_spread: float = 0.05) -> np.ndarray:
    out = np.full(p, float(spread))
    if fragile_dim:
        out[p - fragile_dim:] = fragile_spread
    return out


def gen_task(n_way: int, k_shot: int, q_target: int, p: int, class_sep: float = 4.0,
             shift: ShiftSpec | None = None, rng=None, spread: float = 1.0,
             signal_dim: int | None = None, fragile_dim: int = 0, fragile_sep: float = 0.5,
             fragile_spread: float = 0.05) -> Episode:
    """Draw one ``n_way``-way ``k_shot``-shot episode with ``q_target`` queries per class.

    ``fragile_dim`` trailing coordinates can carry tightly clustered but
    weakly separated class structure: perfectly informative on clean data,
    swamped by modest input noise.
    """
    if n_way < 2 or k_shot < 1 or q_target < 1 or p < 1:
        raise DomainError("need n_way >= 2 and k_shot, q_target, p >= 1")
    if class_sep <= 0:
        raise DomainError("class_sep must be positive")
    if spread < 0 or fragile_spread < 0:
        raise DomainError("spread must be non-negative")
    if not 0 <= fragile_dim < p:
        raise DomainError(f"fragile_dim must lie in [0, {p})")
    shift = shift or ShiftSpec()
    stream = rng if isinstance(rng, RngStream) else RngStream(0 if rng is None else int(rng))
    gen = stream.generator()
    means = class_means(n_way, p, class_sep, gen, signal_dim, fragile_dim, fragile_sep)
    scale = spread_vector(p, spread, fragile_dim, fragile_spread)
    sy = np.repeat(np.arange(n_way), k_shot)
    qy = np.repeat(np.arange(n_way), q_target)
    sx = means[sy] + scale * gen.standard_normal((sy.size, p))
    qx = means[qy] + scale * gen.standard_normal((qy.size, p))
    sx = shift.support_transform.apply(sx)
    qx = shift.query_transform.apply(qx)
    # noise draws come last so the clean part of an episode is shared across noise levels
    zs = gen.standard_normal(sx.shape)
    zq = gen.standard_normal(qx.shape)
    sx = sx + shift.support_noise * zs
    qx = qx + shift.query_noise * zq
    return Episode(sx, sy, qx, qy, shift, stream.seed)


# -- classifiers --------------------------------------------------------------

def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _labels(s_y, n_rows: int) -> tuple[np.ndarray, int]:
    y = np.asarray(s_y, dtype=np.int64).reshape(-1)
    if y.shape[0] != n_rows:
        raise ShapeError(f"{n_rows} support rows but {y.shape[0]} labels")
    if np.any(y < 0):
        raise DomainError("labels must be non-negative class indices")
    n_cls = int(y.max()) + 1
    missing = np.setdiff1d(np.arange(n_cls), y)
    if missing.size:
        raise DomainError(f"classes {missing.tolist()} have no support rows")
    return y, n_cls


def prototypes(s_emb, s_y) -> np.ndarray:
    s = as_matrix(s_emb, "s_emb")
    y, n_cls = _labels(s_y, s.shape[0])
    counts = np.bincount(y, minlength=n_cls)
    protos = np.zeros((n_cls, s.shape[1]))
    np.add.at(protos, y, s)
    return protos / counts[:, None]


def proto_classify(s_emb, s_y, q_emb) -> tuple[np.ndarray, np.ndarray]:
    """Nearest class mean under squared Euclidean distance.

    Probabilities are a softmax over negative squared distances; ties go to
    the lowest class index.
    """
    protos = prototypes(s_emb, s_y)
    q = as_matrix(q_emb, "q_emb")
    if q.shape[1] != protos.shape[1]:
        raise ShapeError("support and query embeddings differ in width")
    prob = _softmax_rows(-pairwise_sq_dist(q, protos))
    return np.argmax(prob, axis=1), prob


def _unit_rows(x: np.ndarray, name: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DomainError(f"{name} has zero-norm rows; cosine similarity is undefined")
    return x / norms[:, None]


def matching_classify(s_emb, s_y, q_emb) -> tuple[np.ndarray, np.ndarray]:
    """Cosine-similarity matching; a class scores its best-matching support row."""
    s = as_matrix(s_emb, "s_emb")
    q = as_matrix(q_emb, "q_emb")
    if q.shape[1] != s.shape[1]:
        raise ShapeError("support and query embeddings differ in width")
    y, n_cls = _labels(s_y, s.shape[0])
    cos = _unit_rows(q, "q_emb") @ _unit_rows(s, "s_emb").T
    scores = np.full((q.shape[0], n_cls), -np.inf)
    for c in range(n_cls):
        scores[:, c] = cos[:, y == c].max(axis=1)
    prob = _softmax_rows(scores)
    return np.argmax(prob, axis=1), prob


def normalize_features(s_emb, q_emb, mode: str = "transductive") -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension standardisation of support and query embeddings.

    ``transductive`` pools support and query rows for the statistics,
    ``conventional`` uses the support rows only, ``none`` is a no-op.
    """
    s = as_matrix(s_emb, "s_emb")
    q = as_matrix(q_emb, "q_emb")
    if s.shape[1] != q.shape[1]:
        raise ShapeError("support and query embeddings differ in width")
    if mode == "none":
        return s, q
    if mode == "transductive":
        ref = np.vstack([s, q])
    elif mode == "conventional":
        ref = s
    else:
        raise UsageError(f"unknown normalization {mode!r}; expected one of {NORMALIZATIONS}")
    mean = ref.mean(axis=0)
    std = np.sqrt(np.maximum(ref.var(axis=0), VAR_FLOOR))
    return (s - mean) / std, (q - mean) / std


# -- evaluation ----------------------------------------------------------------

@dataclass
class EvalConfig:
    classifier: str = "proto"
    use_ot: bool = True
    beta: float = 0.5
    normalization: str = "transductive"
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.classifier not in CLASSIFIERS:
            raise UsageError(f"unknown classifier {self.classifier!r}")
        if self.normalization not in NORMALIZATIONS:
            raise UsageError(f"unknown normalization {self.normalization!r}")
        if self.use_ot and not (0.0 < self.beta < 1.0):
            raise DomainError("beta must lie in (0, 1) when transport is enabled")


def _embed(model, x: np.ndarray) -> np.ndarray:
    if model is None:
        return x
    if hasattr(model, "phi"):
        from pgada.diffnet import forward_embed

        return forward_embed(model, x)
    if hasattr(model, "transform"):
        return np.asarray(model.transform(x), dtype=np.float64)
    return np.asarray(model(x), dtype=np.float64)


def evaluate_episode(ep: Episode, model, cfg: EvalConfig | None = None) -> tuple[float, dict]:
    """Accuracy on one episode's query set.

    Embeds both sets with ``model`` (a ``ModelStack``, a fitted transformer, a
    callable, or ``None`` for the raw inputs), normalises, optionally moves
    the support embeddings onto the query cloud by barycentric transport,
    then classifies the queries.
    """
    cfg = cfg or EvalConfig()
    s = _embed(model, ep.support_x)
    q = _embed(model, ep.query_x)
    s, q = normalize_features(s, q, cfg.normalization)
    diag = {}
    if cfg.use_ot:
        plan = sinkhorn(pairwise_sq_dist(s, q), beta=cfg.beta, tol=cfg.tol, max_iter=cfg.max_iter)
        s = barycentric_map(plan, q)
        diag = {"transport_cost": plan.transport_cost,
                "marginal_violation": plan.marginal_violation,
                "plan_entropy": plan.entropy(),
                "iterations": plan.iterations,
                "converged": plan.converged}
    classify = proto_classify if cfg.classifier == "proto" else matching_classify
    pred, _ = classify(s, ep.support_y, q)
    return float(np.mean(pred == ep.query_y)), diag


# -- estimator wrappers ----------------------------------------------------------

class PrototypeClassifier(ClassifierMixin, BaseEstimator):
    """Nearest-prototype classifier over precomputed embeddings."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, idx = np.unique(y, return_inverse=True)
        self.prototypes_ = prototypes(X, idx)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "prototypes_")
        X = check_array(X, dtype=np.float64)
        return _softmax_rows(-pairwise_sq_dist(X, self.prototypes_))

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class MatchingClassifier(ClassifierMixin, BaseEstimator):
    """Cosine matching against the stored support rows."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, self.support_y_ = np.unique(y, return_inverse=True)
        self.support_ = _unit_rows(X, "X")
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "support_")
        X = check_array(X, dtype=np.float64)
        return matching_classify(self.support_, self.support_y_, X)[1]

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]


class FeatureNormalizer(TransformerMixin, BaseEstimator):
    """Standardise features with support-only or pooled support+query statistics.

    ``fit(X_support, X_query)``; the query set is only consulted in
    ``transductive`` mode.
    """

    def __init__(self, mode="transductive"):
        self.mode = mode

    def fit(self, X, X_query=None):
        X = check_array(X, dtype=np.float64)
        if self.mode not in NORMALIZATIONS:
            raise UsageError(f"unknown normalization {self.mode!r}")
        ref = X
        if self.mode == "transductive" and X_query is not None:
            ref = np.vstack([X, check_array(X_query, dtype=np.float64)])
        self.mean_ = ref.mean(axis=0)
        self.scale_ = np.sqrt(np.maximum(ref.var(axis=0), VAR_FLOOR))
        if self.mode == "none":
            self.mean_[:] = 0.0
            self.scale_[:] = 1.0
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) / self.scale_
