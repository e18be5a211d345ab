"""Boundary generator: a dense network pushed onto the support boundary of a
frozen density by the compound loss

    L = L0 + lambda1 * L1 + lambda2 * L2

where L0 is the mean density of the generated points, L1 their mean distance
to the nearest data point and L2 the mean ratio of latent to output pairwise
distances (large under mode collapse).
"""

import csv
from dataclasses import dataclass, field, asdict

import numpy as np

from . import _kernels
from . import autodiff as ad
from .density import LOG_DENSITY_FLOOR
from .errors import ConfigurationError, NumericError, TrainingAborted
from .nn import (MlpModel, adam_step, build_mlp, dumps_checkpoint, init_adam,
                 loads_checkpoint, mlp_from_dict, mlp_to_dict)


@dataclass
class BdsgHyperparams:
    lambda1: float = 0.3
    lambda2: float = 0.025
    M: int = 1024
    N: int = 256
    epochs: int = 3000
    seed: int = 0
    eps_div: float = 1e-8
    learning_rate: float = 1e-3

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("lambda1 and lambda2 must be non-negative")
        if self.eps_div <= 0:
            raise ConfigurationError("eps_div must be positive")
        if self.N < 2:
            raise ConfigurationError(f"batch size N must be at least 2, got {self.N}")
        if self.N > self.M:
            raise ConfigurationError(f"batch size N={self.N} exceeds sample size M={self.M}")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be non-negative")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")


@dataclass
class LossBreakdown:
    total: float
    l0: float
    l1: float
    l2: float
    epoch: int = -1

    def recombined(self, hp):
        return self.l0 + hp.lambda1 * self.l1 + hp.lambda2 * self.l2


@dataclass
class BoundaryModel:
    network: MlpModel
    latent_dim: int
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.network.in_dim != self.latent_dim:
            raise ConfigurationError(
                f"network input width {self.network.in_dim} != latent dimension {self.latent_dim}")

    @property
    def data_dim(self):
        return self.network.out_dim

    def __call__(self, z, params=None):
        return self.network(z, params)

    def dumps(self):
        return dumps_checkpoint("boundary", {
            "latent_dim": self.latent_dim,
            "network": mlp_to_dict(self.network),
            "history": [asdict(h) for h in self.history],
        })

    @classmethod
    def loads(cls, text):
        doc = loads_checkpoint(text, "boundary")
        return cls(mlp_from_dict(doc["network"]), doc["latent_dim"],
                   [LossBreakdown(**h) for h in doc["history"]])

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.loads(fh.read())


def _net(B):
    return B.network if isinstance(B, BoundaryModel) else B


def _apply(B, z, params):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ConfigurationError(f"latent batch must be a non-empty (N, d) array, got shape {z.shape}")
    return _net(B)(z, params)


# --------------------------------------------------------------------------
# loss terms; each accepts either generator outputs computed on the tape or
# evaluates B itself
# --------------------------------------------------------------------------

def boundary_density_term(density, x):
    """Mean of ``exp(max(log p(x), floor))``."""
    logp = density.log_density(x)
    return ad.mean(ad.exp(ad.maximum(logp, LOG_DENSITY_FLOOR)))


def nearest_data_term(x, data):
    """Mean distance from each row of ``x`` to the closest row of ``data``.

    The gradient flows through the selected pair only (lowest index on ties).
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigurationError("data set for the distance term must be non-empty")
    xv = ad.value_of(x)
    dist, idx = _kernels.nearest(xv, data)
    n = xv.shape[0]

    def vjp(g):
        diff = xv - data[idx]
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(dist[:, None] > 0, diff / dist[:, None], 0.0)
        return (g * unit / n,)

    return ad.custom(dist.mean(), (x,), vjp)


def dispersion_term(x, z, eps_div):
    """Mean over ordered pairs of ``|z_i - z_j| / (|x_i - x_j| + eps_div)``."""
    xv = ad.value_of(x)
    if xv.shape[0] < 2:
        raise ConfigurationError("dispersion term needs at least two samples")
    value, gx = _kernels.pair_ratio(z, xv, eps_div)
    return ad.custom(value, (x,), lambda g: (g * gx,))


def loss_l0(density, B, z_batch, params=None):
    return boundary_density_term(density, _apply(B, z_batch, params))


def loss_l1(B, z_batch, data, params=None):
    return nearest_data_term(_apply(B, z_batch, params), data)


def loss_l2(B, z_batch, eps_div=1e-8, params=None):
    return dispersion_term(_apply(B, z_batch, params), np.asarray(z_batch, dtype=np.float64), eps_div)


def bdsg_objective(density, B, z_batch, data, hp, params=None):
    """Differentiable total plus the three unweighted terms."""
    x = _apply(B, z_batch, params)
    l0 = boundary_density_term(density, x)
    l1 = nearest_data_term(x, data)
    l2 = dispersion_term(x, np.asarray(z_batch, dtype=np.float64), hp.eps_div)
    for name, term in (("l0", l0), ("l1", l1), ("l2", l2)):
        if not np.isfinite(ad.value_of(term)):
            raise NumericError(f"non-finite {name}: {float(ad.value_of(term))}", term=name)
    total = l0 + hp.lambda1 * l1 + hp.lambda2 * l2
    if isinstance(total, ad.Var):
        total.name = "total"
    return total, (l0, l1, l2)


def bdsg_loss(density, B, z_batch, data, hp, epoch=-1):
    total, (l0, l1, l2) = bdsg_objective(density, B, z_batch, data, hp)
    return LossBreakdown(float(ad.value_of(total)), float(ad.value_of(l0)),
                         float(ad.value_of(l1)), float(ad.value_of(l2)), epoch)


def train_boundary(density, data, spec, hp, activation="tanh", callback=None):
    """Fit a boundary generator against a frozen density and data set.

    ``spec`` lists the layer widths (latent width first). Every epoch draws a
    fresh latent batch of size ``hp.N`` and takes one optimizer step.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] == 0:
        raise ConfigurationError("training data must be a non-empty (M, d) array")
    if data.shape[0] < hp.N:
        raise ConfigurationError(f"batch size N={hp.N} exceeds the {data.shape[0]} data points")
    if spec[-1] != data.shape[1]:
        raise ConfigurationError(f"generator output width {spec[-1]} != data dimension {data.shape[1]}")
    init_seq, z_seq = np.random.SeedSequence(hp.seed).spawn(2)
    net = build_mlp(spec, activation, seed=int(init_seq.generate_state(1)[0]))
    B = BoundaryModel(net, spec[0])
    rng = np.random.default_rng(z_seq)
    params = net.parameters()
    state = init_adam(params, hp.learning_rate)
    history = []
    for epoch in range(hp.epochs):
        z = rng.standard_normal((hp.N, B.latent_dim))
        leaves = [ad.Var(p) for p in params]
        try:
            total, (l0, l1, l2) = bdsg_objective(density, net, z, data, hp, params=leaves)
            grads = ad.grad(total, leaves)
            params, state = adam_step(params, grads, state)
        except NumericError as exc:
            last = BoundaryModel(net.with_parameters(params), B.latent_dim, history)
            raise TrainingAborted(f"boundary training aborted at epoch {epoch}: {exc}",
                                  term=exc.term, model=last, history=history) from exc
        record = LossBreakdown(float(total.value), float(ad.value_of(l0)),
                               float(ad.value_of(l1)), float(ad.value_of(l2)), epoch)
        history.append(record)
        if callback is not None:
            callback(record)
    return BoundaryModel(net.with_parameters(params), B.latent_dim, history)


def sample_boundary(B, n, seed):
    if n < 1:
        raise ConfigurationError(f"sample count must be at least 1, got {n}")
    z = np.random.default_rng(seed).standard_normal((n, B.latent_dim))
    return B(z)


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "total", "l0", "l1", "l2"])
        for h in history:
            w.writerow([h.epoch, repr(h.total), repr(h.l0), repr(h.l1), repr(h.l2)])
