"""Dense networks, spectral normalization, the adaptive-moment optimizer and
the JSON checkpoint container they share."""

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, NumericError, ShapeError

CHECKPOINT_VERSION = 1

# activation -> (f, f') with f' written in tape ops so the tangent path is
# itself differentiable
ACTIVATIONS = {
    "tanh": (ad.tanh, lambda a, h: 1.0 - h * h),
    "softplus": (ad.softplus, lambda a, h: ad.sigmoid(a)),
    "elu": (ad.elu, lambda a, h: ad.exp(ad.minimum(a, 0.0))),
    "identity": (lambda a: a, lambda a, h: np.ones(ad.value_of(a).shape)),
}


@dataclass
class MlpModel:
    """Fully-connected network; hidden layers share one activation, output is linear.

    ``weights[k]`` has shape ``(layer_widths[k+1], layer_widths[k])``.
    """

    layer_widths: list
    weights: list
    biases: list
    activation: str = "tanh"
    seed: int = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        widths = list(self.layer_widths)
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ConfigurationError("layer count does not match layer_widths")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[k + 1], widths[k]) or b.shape != (widths[k + 1],):
                raise ConfigurationError(
                    f"layer {k}: weight {w.shape} / bias {b.shape} do not match widths {widths}")

    @property
    def in_dim(self):
        return self.layer_widths[0]

    @property
    def out_dim(self):
        return self.layer_widths[-1]

    def parameters(self):
        """Flat ``[W0, b0, W1, b1, ...]`` list."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_parameters(self, params):
        params = [np.asarray(ad.value_of(p), dtype=np.float64) for p in params]
        return MlpModel(list(self.layer_widths), params[0::2], params[1::2],
                        self.activation, self.seed)

    def _layers(self, params):
        if params is None:
            return list(zip(self.weights, self.biases))
        return list(zip(params[0::2], params[1::2]))

    def __call__(self, x, params=None):
        act, _ = ACTIVATIONS[self.activation]
        layers = self._layers(params)
        h = x
        for k, (w, b) in enumerate(layers):
            h = ad.matmul(h, ad.transpose(w)) + b
            if k < len(layers) - 1:
                h = act(h)
        return h

    def jvp(self, x, v, params=None):
        """Return ``(f(x), J_f(x) v)`` by pushing the tangent through each layer.

        ``x`` is ``(n, d_in)``; ``v`` is ``(d_in,)`` or ``(n, d_in)``.
        """
        act, dact = ACTIVATIONS[self.activation]
        layers = self._layers(params)
        h, t = x, v
        if ad.value_of(t).ndim == 1:
            t = np.broadcast_to(ad.value_of(t), ad.value_of(x).shape)
        for k, (w, b) in enumerate(layers):
            wt = ad.transpose(w)
            a = ad.matmul(h, wt) + b
            t = ad.matmul(t, wt)
            if k < len(layers) - 1:
                h = act(a)
                t = dact(a, h) * t
            else:
                h = a
        return h, t

    def jacobian(self, x, params=None):
        """Stacked Jacobians ``(n, d_out, d_in)`` from one jvp per input axis."""
        d = self.in_dim
        cols = [self.jvp(x, np.eye(d)[j], params)[1] for j in range(d)]
        return ad.stack(cols, axis=2)


def build_mlp(layer_widths, activation="tanh", seed=0):
    """Fresh network: weights ~ N(0, 1/fan_in), zero biases."""
    widths = list(layer_widths) if layer_widths is not None else []
    if len(widths) < 2:
        raise ConfigurationError(f"need at least two layer widths, got {widths}")
    if any(int(w) != w or w < 1 for w in widths):
        raise ConfigurationError(f"layer widths must be positive integers, got {widths}")
    widths = [int(w) for w in widths]
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(widths, weights, biases, activation, seed)


def forward(model, inputs):
    """Evaluate ``model`` on a batch ``(n, d_in)`` (a single point is promoted)."""
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"expected input width {model.in_dim}, got shape {np.shape(inputs)}")
    out = model(x)
    return out[0] if single else out


# --------------------------------------------------------------------------
# spectral normalization
# --------------------------------------------------------------------------

def power_iteration(weight, iters, u=None, seed=0):
    """Estimate the top singular value; returns ``(sigma, u)`` for warm starts."""
    if iters < 1:
        raise ConfigurationError("power iteration needs iters >= 1")
    w = np.asarray(weight, dtype=np.float64)
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    if peak == 0.0:
        return 0.0, u
    w = w / peak   # keeps tiny or huge entries from under/overflowing
    if u is None:
        u = np.random.default_rng(seed).normal(size=w.shape[0])
    u = u / np.linalg.norm(u)
    sigma = 0.0
    for k in range(iters):
        v = w.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:  # u orthogonal to the range; restart deterministically
            u = np.random.default_rng(seed + 1 + k).normal(size=w.shape[0])
            u /= np.linalg.norm(u)
            continue
        v /= nv
        wv = w @ v
        sigma = np.linalg.norm(wv)
        u = wv / sigma
    return float(sigma * peak), u


def spectral_normalize(weight, target_lipschitz=0.9, iters=50, seed=0, u=None):
    """Scale ``weight`` by ``min(1, target / sigma_hat)``.

    Returns ``(scaled, sigma_hat, u)`` where ``u`` is the left singular-vector
    estimate, reusable as a warm start.
    """
    if not 0.0 < target_lipschitz < 1.0:
        raise ConfigurationError(f"target Lipschitz must lie in (0, 1), got {target_lipschitz}")
    w = np.asarray(weight, dtype=np.float64)
    sigma, u = power_iteration(w, iters, u=u, seed=seed)
    if sigma == 0.0:
        return w.copy(), 0.0, u
    scaled = w * min(1.0, target_lipschitz / sigma)
    # power iteration underestimates on near-degenerate spectra; the exact
    # norm of these small matrices is cheap and keeps the cap strict
    exact = float(np.linalg.norm(scaled, 2))
    if exact > target_lipschitz:
        scaled = scaled * (target_lipschitz / exact)
    return scaled, sigma, u


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    first_moment: list
    second_moment: list
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8


def init_adam(params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps_stab=1e-8):
    if isinstance(params, MlpModel):
        params = params.parameters()
    if learning_rate <= 0:
        raise ConfigurationError("learning rate must be positive")
    return OptimizerState([np.zeros_like(p) for p in params],
                          [np.zeros_like(p) for p in params],
                          0, learning_rate, beta1, beta2, eps_stab)


def adam_step(model, grads, state):
    """One bias-corrected adaptive-moment update.

    ``model`` is an :class:`MlpModel` or a list of arrays; the same kind is
    returned together with the new :class:`OptimizerState`. Inputs are not
    mutated.
    """
    params = model.parameters() if isinstance(model, MlpModel) else list(model)
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    for k, (p, g) in enumerate(zip(params, grads)):
        if np.shape(g) != p.shape:
            raise ShapeError(f"gradient {k} has shape {np.shape(g)}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {k}", term=k)
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    m_new, v_new, p_new = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p_new.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps_stab))
        m_new.append(m)
        v_new.append(v)
    new_state = OptimizerState(m_new, v_new, t, state.learning_rate, b1, b2, state.eps_stab)
    if isinstance(model, MlpModel):
        return model.with_parameters(p_new), new_state
    return p_new, new_state


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def mlp_to_dict(model):
    return {
        "layer_widths": list(model.layer_widths),
        "activation": model.activation,
        "seed": model.seed,
        "weights": [{"shape": list(w.shape), "data": w.ravel(order="C").tolist()}
                    for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }


def mlp_from_dict(doc):
    weights = [np.asarray(w["data"], dtype=np.float64).reshape(w["shape"]) for w in doc["weights"]]
    biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
    return MlpModel(list(doc["layer_widths"]), weights, biases, doc["activation"], doc.get("seed"))


def dumps_checkpoint(kind, payload):
    doc = {"format": f"bdsg.{kind}", "version": CHECKPOINT_VERSION, **payload}
    return json.dumps(doc, sort_keys=True, indent=1)


def loads_checkpoint(text, kind):
    doc = json.loads(text)
    if doc.get("format") != f"bdsg.{kind}":
        raise ConfigurationError(f"expected a bdsg.{kind} checkpoint, found {doc.get('format')!r}")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {doc.get('version')!r}")
    return doc


def save_mlp(model, path):
    with open(path, "w") as fh:
        fh.write(dumps_checkpoint("mlp", {"model": mlp_to_dict(model)}))


def load_mlp(path):
    with open(path) as fh:
        return mlp_from_dict(loads_checkpoint(fh.read(), "mlp")["model"])
