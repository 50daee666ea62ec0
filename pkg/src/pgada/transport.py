"""Entropic optimal transport between empirical point clouds.

The smoothed objective weighs transport cost against plan entropy,

    min_P  beta * <P, C> + (1 - beta) * sum P log P   over couplings of (a, b),

which after dividing by ``beta`` is standard entropic OT with regularisation
``reg = (1 - beta) / beta``. It is solved with log-domain Sinkhorn updates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from pgada.core import (
    DegeneratePlanError,
    DomainError,
    ShapeError,
    UsageError,
    as_matrix,
    pairwise_sq_dist,
)

DEFAULT_TOL = 1e-9
DEFAULT_MAX_ITER = 10_000
MAX_EXACT_SIZE = 64
# instances up to this many rows + cols get a Newton polish after scaling stalls
NEWTON_MAX_SIZE = 2000
SCALING_BUDGET = 300


@dataclass
class TransportPlan:
    plan: np.ndarray
    a: np.ndarray
    b: np.ndarray
    transport_cost: float
    beta: float
    iterations: int
    converged: bool
    marginal_violation: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.plan.shape

    @property
    def T(self) -> "TransportPlan":
        return TransportPlan(self.plan.T.copy(), self.b, self.a, self.transport_cost,
                             self.beta, self.iterations, self.converged,
                             self.marginal_violation)

    def entropy(self) -> float:
        return plan_entropy(self.plan)

    def to_csv(self, path) -> None:
        """Write ``row,col,mass`` triples for every non-zero entry."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "col", "mass"])
            for i, j in zip(*np.nonzero(self.plan)):
                w.writerow([int(i), int(j), f"{self.plan[i, j]:.10g}"])


def plan_entropy(plan: np.ndarray) -> float:
    """Shannon entropy ``-sum P log P`` with ``0 log 0 = 0``."""
    p = np.asarray(plan, dtype=np.float64)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def reg_from_beta(beta: float) -> float:
    return (1.0 - beta) / beta


def beta_from_reg(reg: float) -> float:
    return 1.0 / (1.0 + reg)


def uniform(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


def _check_marginal(w, n: int, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise ShapeError(f"{name} has length {w.shape[0]}, cost matrix needs {n}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DomainError(f"{name} must be finite and non-negative")
    if abs(w.sum() - 1.0) > 1e-12 * max(1, n) ** 0.5 + 1e-12:
        raise DomainError(f"{name} must sum to 1 (got {w.sum()!r})")
    return w


def _gibbs(c, f, g, reg) -> np.ndarray:
    """``exp((f_i + g_j - c_ij) / reg)`` without forming an underflowing kernel."""
    k = f[:, None] + g[None, :]
    k -= c
    k /= reg
    return np.exp(k, out=k)


def _sinkhorn_stabilized(c, a, b, reg, f, g, tol, max_iter, omega=1.8, absorb=1e30):
    """Over-relaxed Sinkhorn scaling with log-domain absorption.

    The iterate is ``exp((f_i + g_j - c_ij) / reg) * u_i * v_j``: large
    magnitudes live in the dual potentials ``f``, ``g`` while ``u``, ``v``
    stay near one and are folded back into the potentials whenever they
    drift past ``absorb``. Returns updated ``(f, g, iterations, converged)``.
    """
    f0, g0 = f, g
    k = _gibbs(c, f, g, reg)
    u = np.ones_like(a)
    v = np.ones_like(b)
    lim = np.log(absorb)
    w = omega
    it = 0
    converged = False
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        while it < max_iter:
            v_hat = b / (u @ k)
            v = v_hat if w == 1.0 else v ** (1.0 - w) * v_hat ** w
            kv = k @ v
            it += 1
            err = np.max(np.abs(u * kv - a))
            if not np.isfinite(err):
                # over-relaxation overshot: restart plain Sinkhorn from the entry point
                f, g = f0, g0
                k = _gibbs(c, f, g, reg)
                u[:] = 1.0
                v[:] = 1.0
                w = 1.0
                continue
            if err < tol and np.max(np.abs(v * (u @ k) - b)) < tol:
                converged = True
                break
            u_hat = a / kv
            u = u_hat if w == 1.0 else u ** (1.0 - w) * u_hat ** w
            lu, lv = np.log(u), np.log(v)
            if w != 1.0 and not (np.all(np.isfinite(lu)) and np.all(np.isfinite(lv))):
                f, g = f0, g0
                k = _gibbs(c, f, g, reg)
                u[:] = 1.0
                v[:] = 1.0
                w = 1.0
                continue
            if np.max(np.abs(lu)) > lim or np.max(np.abs(lv)) > lim:
                f = f + reg * lu
                g = g + reg * lv
                k = _gibbs(c, f, g, reg)
                u[:] = 1.0
                v[:] = 1.0
    return f + reg * np.log(u), g + reg * np.log(v), it, converged


def _dual_value(c, a, b, reg, f, g) -> float:
    with np.errstate(over="ignore"):
        return float(f @ a + g @ b - reg * _gibbs(c, f, g, reg).sum())


def _newton_polish(c, a, b, reg, f, g, tol, max_steps):
    """Damped Newton ascent on the entropic dual, for small instances.

    The last column potential is pinned to remove the additive gauge freedom.
    """
    n, m = c.shape
    value = _dual_value(c, a, b, reg, f, g)
    steps = 0
    converged = False
    while steps < max_steps:
        p = _gibbs(c, f, g, reg)
        r, s = p.sum(axis=1), p.sum(axis=0)
        if max(np.max(np.abs(r - a)), np.max(np.abs(s - b))) < tol:
            converged = True
            break
        steps += 1
        grad = np.concatenate([a - r, (b - s)[:-1]])
        h = np.zeros((n + m - 1, n + m - 1))
        h[np.arange(n), np.arange(n)] = r
        h[n:, n:][np.diag_indices(m - 1)] = s[:-1]
        h[:n, n:] = p[:, :-1]
        h[n:, :n] = p[:, :-1].T
        h /= reg
        h[np.diag_indices_from(h)] += 1e-300 + 1e-14 * np.max(np.diag(h))
        try:
            step = np.linalg.solve(h, grad)
        except np.linalg.LinAlgError:
            break
        df, dg = step[:n], np.append(step[n:], 0.0)
        slope = float(grad @ step)
        t = 1.0
        while t > 1e-12:
            fn, gn = f + t * df, g + t * dg
            vn = _dual_value(c, a, b, reg, fn, gn)
            if np.isfinite(vn) and vn >= value + 1e-4 * t * slope - 1e-15 * abs(value):
                break
            t *= 0.5
        else:
            break
        f, g, value = fn, gn, vn
    return f, g, steps, converged


def sinkhorn(c, a=None, b=None, beta: float = 0.5, tol: float = DEFAULT_TOL,
             max_iter: int = DEFAULT_MAX_ITER) -> TransportPlan:
    """Solve the beta-weighted entropic OT problem.

    Parameters
    ----------
    c : (n, m) array
        Ground cost.
    a, b : arrays, optional
        Source and target marginals; uniform when omitted.
    beta : float in (0, 1)
        Cost weight. ``beta -> 1`` approaches exact OT, ``beta -> 0`` the
        independent coupling ``a b^T``.
    tol : float
        Stop once the largest absolute marginal violation drops below this.
    max_iter : int
        Iteration cap; ``converged`` is False if it is hit first.
    """
    c = as_matrix(c, "c")
    n, m = c.shape
    if not (0.0 < beta < 1.0):
        raise DomainError(f"beta must lie in (0, 1), got {beta}")
    a = uniform(n) if a is None else _check_marginal(a, n, "a")
    b = uniform(m) if b is None else _check_marginal(b, m, "b")
    reg = reg_from_beta(beta)

    # rows/cols with zero mass stay empty; solve on the support only
    rows, cols = np.flatnonzero(a > 0), np.flatnonzero(b > 0)
    cs = c[np.ix_(rows, cols)]
    ar, bc = a[rows], b[cols]
    # c-transform start: every kernel row and column holds an entry equal to 1
    g = cs.min(axis=0)
    f = (cs - g[None, :]).min(axis=1)
    it = 0
    # anneal from a coarse regularisation; the fixed point at `reg` is unique,
    # so warm-started potentials only change the iteration count
    stage = float(cs.max() - cs.min())
    while stage > 4.0 * reg and it < max_iter:
        f, g, used, _ = _sinkhorn_stabilized(cs, ar, bc, stage, f, g, 1e-3 / max(n, m), max_iter - it)
        it += used
        stage *= 0.25
    small = rows.size + cols.size <= NEWTON_MAX_SIZE
    budget = min(SCALING_BUDGET, max_iter - it) if small else max_iter - it
    f, g, used, converged = _sinkhorn_stabilized(cs, ar, bc, reg, f, g, tol, budget)
    it += used
    if not converged and small and it < max_iter:
        f, g, used, converged = _newton_polish(cs, ar, bc, reg, f, g, tol, max_iter - it)
        it += used
    ps = _gibbs(cs, f, g, reg)
    plan = np.zeros((n, m))
    plan[np.ix_(rows, cols)] = ps
    viol = max(np.max(np.abs(plan.sum(axis=1) - a)), np.max(np.abs(plan.sum(axis=0) - b)))
    converged = converged and viol < tol
    return TransportPlan(plan, a, b, float(np.sum(plan * c)), beta, it, converged, float(viol))


def exact_ot_small(c, a=None, b=None) -> tuple[float, np.ndarray]:
    """Unregularised OT by linear programming, for instances with ``n*m <= 64``."""
    c = as_matrix(c, "c")
    n, m = c.shape
    if n * m > MAX_EXACT_SIZE:
        raise UsageError(f"exact solver is limited to n*m <= {MAX_EXACT_SIZE}, got {n * m}")
    a = uniform(n) if a is None else _check_marginal(a, n, "a")
    b = uniform(m) if b is None else _check_marginal(b, m, "b")
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(c.reshape(-1), A_eq=a_eq, b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs")
    if res.status != 0:
        raise DomainError(f"LP solver failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    return float(np.sum(plan * c)), plan


def barycentric_map(plan, q_emb) -> np.ndarray:
    """Move each source point to the plan-weighted mean of the target points."""
    p = plan.plan if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    q = as_matrix(q_emb, "q_emb")
    if p.shape[1] != q.shape[0]:
        raise ShapeError(f"plan has {p.shape[1]} columns but q_emb has {q.shape[0]} rows")
    mass = p.sum(axis=1)
    if np.any(mass <= 0):
        raise DegeneratePlanError(f"plan rows {np.flatnonzero(mass <= 0).tolist()} carry no mass")
    return (p @ q) / mass[:, None]


def wasserstein_estimate(x, y, beta: float = 0.99, tol: float = DEFAULT_TOL,
                         max_iter: int = DEFAULT_MAX_ITER) -> float:
    """Plug-in W2 between two empirical clouds (square root of the entropic cost)."""
    tp = sinkhorn(pairwise_sq_dist(x, y), beta=beta, tol=tol, max_iter=max_iter)
    return float(np.sqrt(max(tp.transport_cost, 0.0)))


class SinkhornTransport(TransformerMixin, BaseEstimator):
    """Entropic OT mapping from a source cloud onto a target cloud.

    ``fit(Xs, Xt)`` solves for the coupling; ``transform(Xs)`` returns the
    barycentric images. Points not seen during ``fit`` are moved by the
    displacement of their nearest fitted source point.

    Parameters
    ----------
    beta : float, default=0.5
    tol : float, default=1e-9
    max_iter : int, default=10000
    """

    def __init__(self, beta=0.5, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
        self.beta = beta
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, Xs, Xt):
        Xs = check_array(Xs, dtype=np.float64)
        Xt = check_array(Xt, dtype=np.float64)
        if Xs.shape[1] != Xt.shape[1]:
            raise ShapeError("source and target must share a feature dimension")
        self.xs_ = Xs
        self.xt_ = Xt
        self.plan_ = sinkhorn(pairwise_sq_dist(Xs, Xt), beta=self.beta, tol=self.tol,
                              max_iter=self.max_iter)
        self.coupling_ = self.plan_.plan
        self.mapped_ = barycentric_map(self.plan_, Xt)
        self.n_features_in_ = Xs.shape[1]
        return self

    def transform(self, Xs):
        check_is_fitted(self, "plan_")
        Xs = check_array(Xs, dtype=np.float64)
        if Xs.shape == self.xs_.shape and np.array_equal(Xs, self.xs_):
            return self.mapped_.copy()
        nearest = np.argmin(pairwise_sq_dist(Xs, self.xs_), axis=1)
        return Xs + (self.mapped_ - self.xs_)[nearest]
