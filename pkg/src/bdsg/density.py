"""Density models: the closed-form Gaussian mixture and the invertible
residual flow.

Both expose ``log_density(x)`` for a batch ``(n, d)``; when ``x`` is a tape
:class:`~bdsg.autodiff.Var` the result is differentiable with respect to it,
which is what the boundary-generator loss needs.
"""

import json
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .errors import ConfigurationError, InversionError, ShapeError, TrainingAborted
from .nn import (MlpModel, build_mlp, dumps_checkpoint, init_adam, adam_step,
                 loads_checkpoint, mlp_from_dict, mlp_to_dict, spectral_normalize)

LOG_DENSITY_FLOOR = -745.0
LOG_2PI = np.log(2.0 * np.pi)


class DensityModel(Protocol):
    dim: int

    def log_density(self, x): ...


def _as_batch(x, dim):
    xv = ad.value_of(x)
    if xv.ndim == 1:
        xv = xv[None, :]
    if xv.ndim != 2 or xv.shape[1] != dim:
        raise ShapeError(f"expected points of dimension {dim}, got shape {np.shape(xv)}")
    return xv


# --------------------------------------------------------------------------
# Gaussian mixture
# --------------------------------------------------------------------------

class GaussianMixture:
    """Weighted sum of full-covariance Gaussians with a closed-form log density."""

    def __init__(self, weights, means, covariances):
        w = np.atleast_1d(np.asarray(weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(means, dtype=np.float64))
        cov = np.asarray(covariances, dtype=np.float64)
        if cov.ndim == 2:
            cov = cov[None]
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise ConfigurationError(
                f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, covariances {cov.shape}")
        if np.any(w <= 0) or np.any(w > 1) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"weights must lie in (0, 1] and sum to 1, got {w.tolist()}")
        if not np.allclose(cov, np.swapaxes(cov, 1, 2), rtol=0, atol=1e-12):
            raise ConfigurationError("covariances must be symmetric")
        try:
            chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("covariance is not positive definite") from exc
        self.weights, self.means, self.covariances = w, mu, cov
        self.dim = d
        self._precision = np.linalg.inv(cov)
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        self._log_norm = np.log(w) - 0.5 * (d * LOG_2PI + logdet)

    def __repr__(self):
        return f"GaussianMixture(K={len(self.weights)}, d={self.dim})"

    @property
    def n_components(self):
        return len(self.weights)

    def _component_terms(self, x):
        diff = x[:, None, :] - self.means[None, :, :]             # (n, K, d)
        pdiff = np.einsum("kij,nkj->nki", self._precision, diff)  # P_k (x - mu_k)
        quad = np.einsum("nki,nki->nk", diff, pdiff)
        return self._log_norm[None, :] - 0.5 * quad, pdiff

    def log_density(self, x):
        xv = _as_batch(x, self.dim)
        terms, pdiff = self._component_terms(xv)
        out = logsumexp(terms, axis=1)
        if not isinstance(x, ad.Var):
            return out if np.ndim(ad.value_of(x)) == 2 else out[0]
        resp = np.exp(terms - out[:, None])
        score = -(resp[:, :, None] * pdiff).sum(axis=1)
        shape = x.value.shape

        def vjp(g):
            return ((g[:, None] * score).reshape(shape),)

        return ad.custom(out, (x,), vjp)

    def density(self, x):
        return np.exp(self.log_density(x))

    def modes(self, iters=200):
        """Local maxima reached by mean-shift started at every component mean."""
        x = self.means.copy()
        for _ in range(iters):
            terms, _ = self._component_terms(x)
            resp = np.exp(terms - logsumexp(terms, axis=1, keepdims=True))   # (n, K)
            a = np.einsum("nk,kij->nij", resp, self._precision)
            b = np.einsum("nk,kij,kj->ni", resp, self._precision, self.means)
            x = np.linalg.solve(a, b[..., None])[..., 0]
        return x

    def peak_log_density(self):
        candidates = np.vstack([self.means, self.modes()])
        return float(np.max(self.log_density(candidates)))

    def sample(self, n, rng, return_labels=False):
        """``n`` i.i.d. draws; per-component counts are multinomial in the weights."""
        counts = rng.multinomial(n, self.weights)
        chol = np.linalg.cholesky(self.covariances)
        parts, labels = [], []
        for k, c in enumerate(counts):
            eps = rng.standard_normal((c, self.dim))
            parts.append(self.means[k] + eps @ chol[k].T)
            labels.append(np.full(c, k))
        x = np.vstack(parts)
        lab = np.concatenate(labels)
        order = rng.permutation(n)
        if return_labels:
            return x[order], lab[order]
        return x[order]

    def to_dict(self):
        return {"components": [
            {"weight": float(w), "mean": m.tolist(), "covariance": c.tolist()}
            for w, m, c in zip(self.weights, self.means, self.covariances)]}

    @classmethod
    def from_dict(cls, doc):
        try:
            comps = doc["components"]
            return cls([c["weight"] for c in comps], [c["mean"] for c in comps],
                       [c["covariance"] for c in comps])
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed mixture document: {exc}") from exc

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def mixture_log_density(m, x):
    return m.log_density(x)


def standard_normal(d):
    return GaussianMixture([1.0], np.zeros((1, d)), np.eye(d)[None])


# --------------------------------------------------------------------------
# invertible residual flow
# --------------------------------------------------------------------------

@dataclass
class ResidualBlock:
    sub_network: MlpModel
    lipschitz_bound: float = 0.9


@dataclass
class FlowModel:
    """``x = loc + scale * (blocks applied to z)`` with each block ``u + f(u)``.

    ``loc``/``scale`` hold a fixed per-axis standardization fitted from the
    training data (zeros/ones when unused).
    """

    blocks: list
    dim: int
    loc: np.ndarray = None
    scale: np.ndarray = None
    tol: float = 1e-8
    max_iter: int = 200
    seed: int = None

    def __post_init__(self):
        if self.loc is None:
            self.loc = np.zeros(self.dim)
        if self.scale is None:
            self.scale = np.ones(self.dim)
        self.loc = np.asarray(self.loc, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        if np.any(self.scale <= 0):
            raise ConfigurationError("standardization scale must be positive")
        for k, blk in enumerate(self.blocks):
            net = blk.sub_network
            if net.in_dim != self.dim or net.out_dim != self.dim:
                raise ConfigurationError(f"block {k}: sub-network widths {net.layer_widths} != d={self.dim}")
            if not 0.0 < blk.lipschitz_bound < 1.0:
                raise ConfigurationError(f"block {k}: Lipschitz bound must lie in (0, 1)")
        lips = self.lipschitz_constants()
        if lips and max(lips) >= 1.0:
            raise ConfigurationError(f"block Lipschitz constants {lips} not below 1; flow not invertible")

    def lipschitz_constants(self):
        """Upper bound per block: product of exact layer spectral norms."""
        return [float(np.prod([np.linalg.norm(w, 2) for w in blk.sub_network.weights]))
                for blk in self.blocks]

    def parameters(self):
        return [blk.sub_network.parameters() for blk in self.blocks]

    def with_parameters(self, params):
        blocks = [ResidualBlock(blk.sub_network.with_parameters(p), blk.lipschitz_bound)
                  for blk, p in zip(self.blocks, params)]
        return FlowModel(blocks, self.dim, self.loc.copy(), self.scale.copy(),
                         self.tol, self.max_iter, self.seed)

    def log_density(self, x):
        return flow_log_density(self, x)

    def sample(self, n, rng):
        return flow_forward(self, rng.standard_normal((n, self.dim)))[0]

    def to_dict(self):
        return {
            "dim": self.dim, "loc": self.loc.tolist(), "scale": self.scale.tolist(),
            "tol": self.tol, "max_iter": self.max_iter, "seed": self.seed,
            "blocks": [{"lipschitz_bound": b.lipschitz_bound, "network": mlp_to_dict(b.sub_network)}
                       for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, doc):
        blocks = [ResidualBlock(mlp_from_dict(b["network"]), b["lipschitz_bound"]) for b in doc["blocks"]]
        return cls(blocks, doc["dim"], np.asarray(doc["loc"]), np.asarray(doc["scale"]),
                   doc["tol"], doc["max_iter"], doc.get("seed"))

    def dumps(self):
        return dumps_checkpoint("flow", {"flow": self.to_dict()})

    @classmethod
    def loads(cls, text):
        return cls.from_dict(loads_checkpoint(text, "flow")["flow"])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())


def build_flow(dim, n_blocks=8, hidden=(32, 32), activation="elu",
               lipschitz=0.9, seed=0, output_gain=1.0):
    """Random residual flow with every layer spectrally normalized to ``lipschitz``.

    ``output_gain`` shrinks the last layer of each block so the flow starts
    close to the identity.
    """
    ss = np.random.SeedSequence(seed)
    blocks = []
    for k, child in enumerate(ss.spawn(n_blocks)):
        block_seed = int(child.generate_state(1)[0])
        net = build_mlp([dim, *hidden, dim], activation, seed=block_seed)
        weights = [spectral_normalize(w, lipschitz, iters=50, seed=block_seed + j)[0]
                   for j, w in enumerate(net.weights)]
        weights[-1] = weights[-1] * output_gain
        net = MlpModel(net.layer_widths, weights, net.biases, activation, block_seed)
        blocks.append(ResidualBlock(net, lipschitz))
    return FlowModel(blocks, dim, seed=seed)


def _block_logdet(net, u, params=None):
    jac = net.jacobian(u, params)
    return ad.logabsdet(jac + np.eye(net.in_dim))


def flow_forward(G, z, params=None):
    """Map latent points to data space; returns ``(x, log|det J_G|)`` per point."""
    zv = np.asarray(ad.value_of(z), dtype=np.float64)
    single = zv.ndim == 1
    u = _as_batch(z, G.dim) if not isinstance(z, ad.Var) else z
    params = params or [None] * len(G.blocks)
    log_det = np.zeros(ad.value_of(u).shape[0])
    for blk, p in zip(G.blocks, params):
        log_det = log_det + _block_logdet(blk.sub_network, u, p)
        u = u + blk.sub_network(u, p)
    x = G.loc + G.scale * u
    log_det = log_det + np.log(G.scale).sum()
    if single:
        return ad.value_of(x)[0], float(ad.value_of(log_det)[0])
    return x, log_det


def invert_block(net, y, tol=1e-8, max_iter=200, params=None):
    """Solve ``u + f(u) = y`` row-wise by fixed-point iteration from ``u = y``.

    Returns ``(u, residuals)``; ``residuals[k]`` is the largest step size over
    still-active rows at iteration ``k``.
    """
    y = np.asarray(y, dtype=np.float64)
    u = y.copy()
    active = np.arange(y.shape[0])
    residuals = []
    for _ in range(max_iter):
        ua = u[active]
        new = y[active] - net(ua, params)
        step = np.sqrt(((new - ua) ** 2).sum(axis=1))
        u[active] = new
        residuals.append(float(step.max()) if step.size else 0.0)
        active = active[step >= tol]
        if active.size == 0:
            return u, residuals
    worst = int(active[0])
    raise InversionError(
        f"fixed-point inverse did not converge in {max_iter} iterations "
        f"(residual {residuals[-1]:.3e}, sample {worst})",
        residual=residuals[-1], index=worst)


def _inverse_op(net, y, params, tol, max_iter):
    """Tape node for one block inverse; gradients via the implicit function theorem."""
    pvals = None if params is None else [ad.value_of(p) for p in params]
    u, _ = invert_block(net, ad.value_of(y), tol, max_iter, pvals)
    parents = (y,) + (tuple(params) if params is not None else ())
    if not any(isinstance(p, ad.Var) for p in parents):
        return u
    track_params = params is not None and any(isinstance(p, ad.Var) for p in params)

    def vjp(g):
        a = net.jacobian(u, pvals) + np.eye(net.in_dim)
        w = np.linalg.solve(np.swapaxes(a, 1, 2), g[..., None])[..., 0]
        out = [w]
        if track_params:
            local = [ad.Var(p) for p in pvals]
            fu = net(u, local)
            pg = ad.grad(ad.sum_(fu * w), local)
            out.extend(-gp for gp in pg)
        elif params is not None:
            out.extend([None] * len(params))
        return out

    return ad.custom(u, parents, vjp)


def flow_inverse(G, x, tol=None, max_iter=None, params=None, return_trace=False):
    """Latent preimage of ``x``; blocks are inverted in reverse order."""
    tol = G.tol if tol is None else tol
    max_iter = G.max_iter if max_iter is None else max_iter
    xv = ad.value_of(x)
    single = xv.ndim == 1
    y = (_as_batch(x, G.dim) if not isinstance(x, ad.Var) else x)
    y = (y - G.loc) / G.scale
    params = params or [None] * len(G.blocks)
    trace = []
    for blk, p in zip(reversed(G.blocks), reversed(params)):
        y = _inverse_op(blk.sub_network, y, p, tol, max_iter)
        trace.append(y)
    trace.reverse()
    if return_trace:
        return y, trace
    return ad.value_of(y)[0] if single else y


def flow_log_density(G, x, params=None):
    """``log p_z(G^-1(x)) - log|det J_G(G^-1(x))|`` with a standard normal base."""
    xv = ad.value_of(x)
    single = xv.ndim == 1
    params = params or [None] * len(G.blocks)
    z, inputs = flow_inverse(G, x, params=params, return_trace=True)
    log_pz = -0.5 * ad.sum_(ad.square(z), axis=1) - 0.5 * G.dim * LOG_2PI
    log_det = np.log(G.scale).sum()
    for blk, p, u in zip(G.blocks, params, inputs):
        log_det = log_det + _block_logdet(blk.sub_network, u, p)
    out = log_pz - log_det
    if single and not isinstance(out, ad.Var):
        return float(out[0])
    return out


@dataclass
class FlowTrainOptions:
    learning_rate: float = 1e-3
    seed: int = 0
    standardize: bool = True
    power_iters: int = 1
    final_power_iters: int = 50
    log_every: int = 0
    schedule: str = "cosine"   # or "constant"

    def __post_init__(self):
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown learning-rate schedule {self.schedule!r}")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")


def train_flow(G, data, epochs, batch_size, opts=None, callback=None):
    """Maximum-likelihood fit of ``G`` to ``data``; returns ``(flow, history)``.

    Each step is an adaptive-moment update on the minibatch negative mean
    log-likelihood followed by spectral normalization of every weight matrix.
    ``history`` holds the mean training NLL per epoch.
    """
    opts = opts or FlowTrainOptions()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != G.dim:
        raise ShapeError(f"data must be (M, {G.dim}), got {data.shape}")
    m = data.shape[0]
    if not 1 <= batch_size <= m:
        raise ConfigurationError(f"need 1 <= batch_size <= M, got {batch_size} with M={m}")
    if epochs == 0:
        return G, []
    if opts.standardize:
        G = FlowModel(G.blocks, G.dim, data.mean(axis=0), data.std(axis=0) + 1e-12,
                      G.tol, G.max_iter, G.seed)
    rng = np.random.default_rng(opts.seed)
    shapes = [[p.shape for p in blk] for blk in G.parameters()]
    flat = [p for blk in G.parameters() for p in blk]
    state = init_adam(flat, opts.learning_rate)
    bounds = [blk.lipschitz_bound for blk in G.blocks]
    # warm-start vectors, one per weight matrix (weights sit at even positions)
    u_vecs = {}
    history = []
    good = G
    per_epoch = m // batch_size
    total_steps, step = epochs * per_epoch, 0
    for epoch in range(epochs):
        order = rng.permutation(m)
        losses = []
        for start in range(0, m - batch_size + 1, batch_size):
            batch = data[order[start:start + batch_size]]
            leaves = [ad.Var(p) for p in flat]
            nested, pos = [], 0
            for blk_shapes in shapes:
                nested.append(leaves[pos:pos + len(blk_shapes)])
                pos += len(blk_shapes)
            ll = flow_log_density(G, batch, params=nested)
            loss = -ad.mean(ll)
            loss.name = "nll"
            if not np.isfinite(loss.value):
                raise TrainingAborted(f"non-finite flow loss at epoch {epoch}", term="nll",
                                      model=good, history=history)
            grads = ad.grad(loss, leaves)
            if opts.schedule == "cosine":
                state.learning_rate = opts.learning_rate * 0.5 * (1 + np.cos(np.pi * step / total_steps))
            step += 1
            flat, state = adam_step(flat, grads, state)
            flat = _project(flat, shapes, bounds, u_vecs, opts.power_iters)
            losses.append(float(loss.value))
        history.append(float(np.mean(losses)))
        good = _assemble(G, flat, shapes)
        if callback is not None:
            callback(epoch, history[-1], good)
    u_vecs.clear()
    flat = _project(flat, shapes, bounds, u_vecs, opts.final_power_iters)
    return _assemble(G, flat, shapes), history


def _project(flat, shapes, bounds, u_vecs, iters):
    out, pos = list(flat), 0
    for b, blk_shapes in enumerate(shapes):
        for j in range(0, len(blk_shapes), 2):
            k = pos + j
            out[k], _, u_vecs[k] = spectral_normalize(out[k], bounds[b], iters, seed=k, u=u_vecs.get(k))
        pos += len(blk_shapes)
    return out


def _assemble(G, flat, shapes):
    nested, pos = [], 0
    for blk_shapes in shapes:
        nested.append(flat[pos:pos + len(blk_shapes)])
        pos += len(blk_shapes)
    return G.with_parameters(nested)
