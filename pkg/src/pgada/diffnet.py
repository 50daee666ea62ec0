"""A small differentiable model stack with hand-written gradients.

The stack holds four parts:

* ``phi``   - embedding network, input dim ``p`` to embedding dim ``d``
* ``theta`` - linear classifier head, ``d`` to ``n_classes`` logits
* ``gen``   - perturbation generator; proposes a displacement of the input
  that is then projected onto the ``epsilon`` ball around it
* ``proj``  - projection matrix ``d -> d'`` feeding the contrastive loss

Gradients are derived by hand layer by layer. Parameters are addressed by
flat names (``"phi.0.W"``, ``"theta.b"``, ``"proj"``...) and a gradient set is
an ordinary dict keyed the same way.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from pgada.core import (
    DomainError,
    NumericError,
    RngStream,
    ShapeError,
    UsageError,
    as_matrix,
)

ACTIVATIONS = ("tanh", "identity")
GROUPS = ("phi", "theta", "gen", "proj")
SELECTORS = ("ori", "adv", "self", "dist", "gen", "combined")

CHECKPOINT_FORMAT = "pgada-checkpoint"


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    act: str = "identity"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.W.ndim != 2 or self.b.shape[0] != self.W.shape[1]:
            raise ShapeError(f"bias of length {self.b.shape[0]} does not fit weight {self.W.shape}")
        if self.act not in ACTIVATIONS:
            raise DomainError(f"unknown activation {self.act!r}")

    @property
    def n_in(self) -> int:
        return self.W.shape[0]

    @property
    def n_out(self) -> int:
        return self.W.shape[1]


def _check_chain(layers: list[Layer], name: str) -> None:
    for i in range(1, len(layers)):
        if layers[i - 1].n_out != layers[i].n_in:
            raise ShapeError(f"{name}: layer {i - 1} emits {layers[i - 1].n_out} "
                             f"but layer {i} expects {layers[i].n_in}")


@dataclass
class ModelStack:
    phi: list[Layer]
    theta: Layer
    gen: list[Layer]
    proj: np.ndarray
    rho: float = 0.1
    epsilon: float = 1.0
    tau: float = 0.5
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.proj = np.asarray(self.proj, dtype=np.float64)
        _check_chain(self.phi, "phi")
        _check_chain(self.gen, "gen")
        d = self.phi[-1].n_out
        if self.theta.n_in != d:
            raise ShapeError(f"theta expects {self.theta.n_in} inputs, phi emits {d}")
        if self.proj.shape[0] != d:
            raise ShapeError(f"proj expects {self.proj.shape[0]} inputs, phi emits {d}")
        if self.gen and (self.gen[0].n_in != self.n_input or self.gen[-1].n_out != self.n_input):
            raise ShapeError("generator must map the input space onto itself")
        if self.epsilon <= 0:
            raise DomainError("epsilon must be positive")
        if self.rho < 0:
            raise DomainError("rho must be non-negative")
        if self.tau <= 0:
            raise DomainError("tau must be positive")

    @property
    def n_input(self) -> int:
        return self.phi[0].n_in

    @property
    def n_embed(self) -> int:
        return self.phi[-1].n_out

    @property
    def n_classes(self) -> int:
        return self.theta.n_out

    @classmethod
    def init(cls, n_input: int, n_embed: int, n_classes: int, hidden: int = 16,
             proj_dim: int | None = None, gen_hidden: int | None = None,
             rho: float = 0.1, epsilon: float = 1.0, tau: float = 0.5,
             rng=None, gen_identity: bool = False) -> "ModelStack":
        """Randomly initialised stack.

        ``phi`` is ``p -> hidden (tanh) -> d``, ``theta`` a single affine map,
        ``gen`` a two-layer residual network ``p -> gen_hidden (tanh) -> p``.
        With ``gen_identity`` the generator's output layer starts at zero so
        that it returns its input unchanged.
        """
        gen_rng = (rng if rng is not None else RngStream(0)).generator() \
            if not isinstance(rng, np.random.Generator) else rng
        proj_dim = proj_dim or n_embed
        gen_hidden = gen_hidden or n_input

        def dense(n_in, n_out, act, scale=1.0):
            w = gen_rng.standard_normal((n_in, n_out)) * scale / np.sqrt(n_in)
            return Layer(w, np.zeros(n_out), act)

        phi = [dense(n_input, hidden, "tanh"), dense(hidden, n_embed, "identity")]
        theta = dense(n_embed, n_classes, "identity")
        gen = [dense(n_input, gen_hidden, "tanh"), dense(gen_hidden, n_input, "identity")]
        if gen_identity:
            gen[1].W[:] = 0.0
        proj = gen_rng.standard_normal((n_embed, proj_dim)) / np.sqrt(n_embed)
        return cls(phi, theta, gen, proj, rho=rho, epsilon=epsilon, tau=tau)

    # -- parameter access -------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        """Live references to every parameter array, keyed by flat name."""
        out = {}
        for i, layer in enumerate(self.phi):
            out[f"phi.{i}.W"] = layer.W
            out[f"phi.{i}.b"] = layer.b
        out["theta.W"] = self.theta.W
        out["theta.b"] = self.theta.b
        for i, layer in enumerate(self.gen):
            out[f"gen.{i}.W"] = layer.W
            out[f"gen.{i}.b"] = layer.b
        out["proj"] = self.proj
        return out

    def group_names(self, groups) -> list[str]:
        groups = set(groups)
        unknown = groups - set(GROUPS)
        if unknown:
            raise UsageError(f"unknown parameter groups {sorted(unknown)}")
        return [k for k in self.params() if k.split(".")[0] in groups]

    def get_flat(self, groups=GROUPS) -> np.ndarray:
        p = self.params()
        return np.concatenate([p[k].ravel() for k in self.group_names(groups)])

    def set_flat(self, vec, groups=GROUPS) -> None:
        p = self.params()
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        for k in self.group_names(groups):
            n = p[k].size
            p[k][...] = vec[pos:pos + n].reshape(p[k].shape)
            pos += n
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, parameters need {pos}")

    def copy(self) -> "ModelStack":
        return copy.deepcopy(self)

    # -- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        def layer(lay):
            return {"shape": list(lay.W.shape), "W": lay.W.ravel().tolist(),
                    "b": lay.b.tolist(), "act": lay.act}

        return {
            "format": CHECKPOINT_FORMAT,
            "version": 1,
            "hyper": {"rho": self.rho, "epsilon": self.epsilon, "tau": self.tau},
            "phi": [layer(l) for l in self.phi],
            "theta": layer(self.theta),
            "gen": [layer(l) for l in self.gen],
            "proj": {"shape": list(self.proj.shape), "data": self.proj.ravel().tolist()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelStack":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise UsageError("not a model checkpoint")

        def layer(d):
            return Layer(np.array(d["W"], dtype=np.float64).reshape(d["shape"]),
                         np.array(d["b"], dtype=np.float64), d["act"])

        try:
            proj = np.array(doc["proj"]["data"], dtype=np.float64).reshape(doc["proj"]["shape"])
            return cls([layer(l) for l in doc["phi"]], layer(doc["theta"]),
                       [layer(l) for l in doc["gen"]], proj,
                       meta=doc.get("meta", {}), **doc["hyper"])
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, (ShapeError, DomainError)):
                raise
            raise UsageError(f"malformed checkpoint: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ModelStack":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# -- layer arithmetic -------------------------------------------------------

def _mlp_forward(layers: list[Layer], x: np.ndarray, masks=None):
    """Forward pass keeping what the backward pass needs.

    ``masks[i]``, when given, multiplies the activated output of layer ``i``.
    """
    caches = []
    h = x
    for i, layer in enumerate(layers):
        pre = h @ layer.W + layer.b
        out = np.tanh(pre) if layer.act == "tanh" else pre
        mask = None if masks is None else masks[i]
        caches.append((h, out, mask))
        h = out if mask is None else out * mask
    return h, caches


def _mlp_backward(layers: list[Layer], caches, dout: np.ndarray):
    grads = [None] * len(layers)
    g = dout
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        h_in, out, mask = caches[i]
        if mask is not None:
            g = g * mask
        if layer.act == "tanh":
            g = g * (1.0 - out * out)
        grads[i] = (h_in.T @ g, g.sum(axis=0))
        g = g @ layer.W.T
    return g, grads


def forward_embed(m: ModelStack, x) -> np.ndarray:
    """Embed the rows of ``x`` with ``phi``."""
    x = as_matrix(x)
    if x.shape[1] != m.n_input:
        raise ShapeError(f"model expects {m.n_input} input columns, got {x.shape[1]}")
    return _mlp_forward(m.phi, x)[0]


def logits(m: ModelStack, x) -> np.ndarray:
    emb = forward_embed(m, x)
    return emb @ m.theta.W + m.theta.b


# -- losses -----------------------------------------------------------------

def cross_entropy(logit_rows, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    z = as_matrix(logit_rows, "logits")
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = z.shape
    if y.shape[0] != n:
        raise ShapeError(f"{n} logit rows but {y.shape[0]} labels")
    if y.min(initial=0) < 0 or y.max(initial=0) >= c:
        raise DomainError(f"labels must lie in [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_norm[:, None]
    loss = -float(np.mean(logp[np.arange(n), y]))
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def ntxent_loss(z, tau: float = 0.5) -> tuple[float, np.ndarray]:
    """NT-Xent contrastive loss over consecutive row pairs ``(0,1), (2,3), ...``.

    Each row is pulled towards its partner and pushed away from the other
    ``2N - 2`` rows, using cosine similarity scaled by ``1 / tau``.
    """
    z = as_matrix(z, "z")
    rows = z.shape[0]
    if rows < 2 or rows % 2:
        raise ShapeError(f"need an even number (>= 2) of rows, got {rows}")
    if tau <= 0:
        raise DomainError("tau must be positive")
    norms = np.linalg.norm(z, axis=1)
    if not norms.all():
        raise DomainError("cosine similarity is undefined for zero-norm rows")
    zn = z / norms[:, None]
    s = (zn @ zn.T) / tau
    partner = np.arange(rows) ^ 1
    masked = s.copy()
    np.fill_diagonal(masked, -np.inf)
    mx = masked.max(axis=1, keepdims=True)
    e = np.exp(masked - mx)
    denom = e.sum(axis=1)
    per_row = -(s[np.arange(rows), partner] - mx[:, 0] - np.log(denom))
    loss = float(per_row.mean())

    # dL/dS, then through the symmetric similarity and the row normalisation
    gs = e / denom[:, None]
    gs[np.arange(rows), partner] -= 1.0
    gs /= rows
    dzn = ((gs + gs.T) @ zn) / tau
    dz = (dzn - zn * np.sum(zn * dzn, axis=1, keepdims=True)) / norms[:, None]
    return loss, dz


def project_to_ball(x: np.ndarray, raw: np.ndarray, epsilon: float):
    """Pull each row of ``raw`` back onto the ``epsilon`` ball around ``x``.

    The ball is in squared L2, ``|xp - x|^2 <= epsilon``. Returns the projected
    rows and the per-row scale applied to the displacement.
    """
    delta = raw - x
    sq = np.einsum("ij,ij->i", delta, delta)
    scale = np.ones_like(sq)
    over = sq > epsilon
    scale[over] = np.sqrt(epsilon / sq[over])
    return x + delta * scale[:, None], scale


def _project_backward(delta: np.ndarray, scale: np.ndarray, dxp: np.ndarray) -> np.ndarray:
    """Gradient with respect to the raw displacement."""
    out = dxp.copy()
    over = scale < 1.0
    if np.any(over):
        d = delta[over]
        sq = np.einsum("ij,ij->i", d, d)
        radial = np.einsum("ij,ij->i", d, dxp[over]) / sq
        out[over] = scale[over, None] * (dxp[over] - d * radial[:, None])
    return out


def _gen_masks(m: ModelStack, noise):
    if noise is None or m.rho == 0:
        return None
    return [1.0 + m.rho * noise] + [None] * (len(m.gen) - 1)


def draw_gen_noise(m: ModelStack, n: int, rng) -> np.ndarray | None:
    """Standard-normal noise for the generator's hidden units (None if rho=0)."""
    if m.rho == 0 or not m.gen:
        return None
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    return gen.standard_normal((n, m.gen[0].n_out))


def _gen_forward(m: ModelStack, x: np.ndarray, noise):
    if not m.gen:
        return x.copy(), None
    disp, caches = _mlp_forward(m.gen, x, _gen_masks(m, noise))
    xp, scale = project_to_ball(x, x + disp, m.epsilon)
    return xp, (caches, disp, scale)


def generator_forward(m: ModelStack, x, rng=None, noise=None) -> np.ndarray:
    """Perturbed copy of ``x`` inside the ``epsilon`` ball.

    Hidden units are scaled by ``1 + rho * N(0, 1)``; the noise comes from
    ``rng`` unless an explicit ``noise`` array is passed.
    """
    x = as_matrix(x)
    if x.shape[1] != m.n_input:
        raise ShapeError(f"generator expects {m.n_input} columns, got {x.shape[1]}")
    if noise is None and rng is not None:
        noise = draw_gen_noise(m, x.shape[0], rng)
    return _gen_forward(m, x, noise)[0]


def embed_distance_loss(m: ModelStack, x, xp) -> tuple[float, dict]:
    """Mean squared embedding displacement ``|phi(xp) - phi(x)|^2``.

    Returns the loss and gradients with respect to ``xp`` (key ``"xp"``) and
    the ``phi`` parameters.
    """
    x = as_matrix(x, "x")
    xp = as_matrix(xp, "xp")
    if x.shape != xp.shape:
        raise ShapeError(f"x {x.shape} and xp {xp.shape} differ")
    if x.shape[1] != m.n_input:
        raise ShapeError(f"model expects {m.n_input} input columns, got {x.shape[1]}")
    n = x.shape[0]
    e, ce = _mlp_forward(m.phi, x)
    ep, cp = _mlp_forward(m.phi, xp)
    diff = ep - e
    loss = float(np.sum(diff * diff) / n)
    g = 2.0 * diff / n
    dxp, gp = _mlp_backward(m.phi, cp, g)
    _, gc = _mlp_backward(m.phi, ce, -g)
    grads = {"xp": dxp}
    for i in range(len(m.phi)):
        grads[f"phi.{i}.W"] = gp[i][0] + gc[i][0]
        grads[f"phi.{i}.b"] = gp[i][1] + gc[i][1]
    return loss, grads


def sgd_step(params: dict, grads: dict, eta: float) -> dict:
    """In-place ``p <- p - eta * g`` for every parameter named in ``grads``."""
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"no parameter named {name!r}")
        p = params[name]
        g = np.asarray(g)
        if p.shape != g.shape:
            raise ShapeError(f"{name}: parameter {p.shape} vs gradient {g.shape}")
        p -= eta * g
    return params


# -- gradients of the training objectives ------------------------------------

@dataclass
class Batch:
    """Inputs for one loss evaluation.

    ``gen_noise`` drives the generator's hidden-unit noise (None means none);
    ``views`` holds ``2N`` rows of paired augmentations for the contrastive
    term, partners in consecutive rows.
    """

    x: np.ndarray
    y: np.ndarray | None = None
    gen_noise: np.ndarray | None = None
    views: np.ndarray | None = None


@dataclass
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    kl_weight: float = 1.0


def _zero_grads(m: ModelStack) -> dict:
    return {k: np.zeros_like(v) for k, v in m.params().items()}


def _add_layer_grads(acc, prefix, grads, scale=1.0):
    for i, (dw, db) in enumerate(grads):
        acc[f"{prefix}.{i}.W"] += scale * dw
        acc[f"{prefix}.{i}.b"] += scale * db


def _ce_through(m: ModelStack, x, y, acc, weight):
    """Cross-entropy of ``theta(phi(x))``; accumulates grads, returns (loss, dx)."""
    emb, caches = _mlp_forward(m.phi, x)
    z = emb @ m.theta.W + m.theta.b
    loss, dz = cross_entropy(z, y)
    if weight == 0:
        return loss, np.zeros_like(x)
    dz = weight * dz
    acc["theta.W"] += emb.T @ dz
    acc["theta.b"] += dz.sum(axis=0)
    dx, gphi = _mlp_backward(m.phi, caches, dz @ m.theta.W.T)
    _add_layer_grads(acc, "phi", gphi)
    return loss, dx


def _gen_backward(m: ModelStack, x, gen_cache, dxp, acc):
    caches, disp, scale = gen_cache
    ddisp = _project_backward(disp, scale, dxp)
    _, ggen = _mlp_backward(m.gen, caches, ddisp)
    _add_layer_grads(acc, "gen", ggen)


def _ssl_term(m: ModelStack, views, acc, weight):
    emb, caches = _mlp_forward(m.phi, views)
    z = emb @ m.proj
    loss, dz = ntxent_loss(z, m.tau)
    if weight == 0:
        return loss
    dz = weight * dz
    acc["proj"] += emb.T @ dz
    _, gphi = _mlp_backward(m.phi, caches, dz @ m.proj.T)
    _add_layer_grads(acc, "phi", gphi)
    return loss


def loss_and_grads(m: ModelStack, selector: str, batch: Batch,
                   weights: LossWeights | None = None, wrt=None) -> tuple[float, dict, dict]:
    """Value and analytic gradient of one training objective.

    Selectors:

    ``ori``       cross-entropy on clean inputs
    ``adv``       cross-entropy on generator outputs
    ``self``      contrastive loss on ``batch.views``
    ``dist``      mean squared embedding displacement caused by the generator
    ``gen``       generator objective to *minimise*: ``kl_weight * adv - dist``
    ``combined``  ``ori + lambda1 * adv + lambda2 * self``

    Gradients cover every parameter on the loss's computational path; ``wrt``
    restricts the returned dict to some parameter groups. The third return
    value carries the individual loss terms that were evaluated.
    """
    if selector not in SELECTORS:
        raise UsageError(f"unknown loss selector {selector!r}; expected one of {SELECTORS}")
    w = weights or LossWeights()
    x = as_matrix(batch.x, "x")
    if x.shape[1] != m.n_input:
        raise ShapeError(f"model expects {m.n_input} input columns, got {x.shape[1]}")
    acc = _zero_grads(m)
    parts = {}

    need_gen = selector in ("adv", "dist", "gen") or (selector == "combined" and w.lambda1 != 0)
    if need_gen:
        xp, gcache = _gen_forward(m, x, batch.gen_noise)

    if selector in ("ori", "combined"):
        parts["ori"], _ = _ce_through(m, x, batch.y, acc, 1.0)

    if selector == "adv" or (selector == "combined" and w.lambda1 != 0):
        scale = 1.0 if selector == "adv" else w.lambda1
        parts["adv"], dxp = _ce_through(m, xp, batch.y, acc, scale)
        if gcache is not None:
            _gen_backward(m, x, gcache, dxp, acc)
    elif selector == "combined":
        parts["adv"] = 0.0

    if selector == "self" or (selector == "combined" and w.lambda2 != 0):
        if batch.views is None:
            raise UsageError("contrastive term needs batch.views")
        scale = 1.0 if selector == "self" else w.lambda2
        parts["self"] = _ssl_term(m, as_matrix(batch.views, "views"), acc, scale)
    elif selector == "combined":
        parts["self"] = 0.0

    if selector in ("dist", "gen"):
        sign = 1.0 if selector == "dist" else -1.0
        dist, g = embed_distance_loss(m, x, xp)
        parts["dist"] = dist
        for k, v in g.items():
            if k != "xp":
                acc[k] += sign * v
        dxp = sign * g["xp"]
        if selector == "gen" and w.kl_weight != 0:
            # the classifier sits on the path but stays frozen during this step
            parts["adv"], dce = _ce_through(m, xp, batch.y, acc, w.kl_weight)
            dxp = dxp + dce
        if gcache is not None:
            _gen_backward(m, x, gcache, dxp, acc)

    if selector == "combined":
        value = parts["ori"] + w.lambda1 * parts["adv"] + w.lambda2 * parts["self"]
    elif selector == "gen":
        value = w.kl_weight * parts.get("adv", 0.0) - parts["dist"]
    else:
        value = parts[selector]

    if wrt is not None:
        keep = set(m.group_names(wrt))
        acc = {k: v for k, v in acc.items() if k in keep}
    for k, v in acc.items():
        if not np.all(np.isfinite(v)):
            raise NumericError(f"non-finite gradient for {k}")
    return float(value), acc, parts


def backward(m: ModelStack, selector: str, batch: Batch, weights: LossWeights | None = None,
             wrt=None) -> dict:
    """Gradient set of the selected objective (see :func:`loss_and_grads`)."""
    return loss_and_grads(m, selector, batch, weights, wrt)[1]
