"""Minimal differentiable network stack with manual reverse-mode gradients.

Fully-connected nets (softplus hidden units, linear output), tanh-squashed
Gaussian policies, a state-action critic, the Adam optimizer, and the weight
file format.  No autodiff graph: each class implements exactly the backward
pass it needs.
"""

from __future__ import annotations

import base64
import json

import numpy as np


LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_SQUASH_EPS = 1e-9


def softplus(z):
    return np.logaddexp(0.0, z)


def softplus_grad(z):
    return 1.0 / (1.0 + np.exp(-z))


_ACTIVATIONS = {
    "softplus": (softplus, softplus_grad),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


class MlpNet:
    """Fully-connected net; forward returns (output, cache) for backward."""

    def __init__(self, sizes, activation="softplus", rng=None):
        if rng is None:
            rng = np.random.default_rng(0)
        self.sizes = list(sizes)
        self.activation = activation
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_layers(self):
        return len(self.weights)

    def parameter_count(self):
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, x, need_cache=False):
        """x: (B, in) or (in,).  Hidden layers use the smooth rectifier."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        act, _ = _ACTIVATIONS[self.activation]
        pre_acts = []
        inputs = [h]
        for li in range(self.n_layers):
            z = h @ self.weights[li].T + self.biases[li]
            pre_acts.append(z)
            h = act(z) if li < self.n_layers - 1 else z
            inputs.append(h)
        out = inputs[-1][0] if single else inputs[-1]
        if need_cache:
            return out, {"pre": pre_acts, "inputs": inputs, "single": single}
        return out

    def backward(self, cache, grad_out):
        """Reverse pass.  Returns (input_grad, [(dW, db), ...])."""
        _, dact = _ACTIVATIONS[self.activation]
        g = np.atleast_2d(np.asarray(grad_out, dtype=float))
        grads = [None] * self.n_layers
        for li in reversed(range(self.n_layers)):
            if li < self.n_layers - 1:
                g = g * dact(cache["pre"][li])
            h_in = cache["inputs"][li]
            dW = g.T @ h_in
            db = g.sum(axis=0)
            grads[li] = (dW, db)
            g = g @ self.weights[li]
        input_grad = g[0] if cache["single"] else g
        return input_grad, grads

    def zero_grads(self):
        return [(np.zeros_like(w), np.zeros_like(b))
                for w, b in zip(self.weights, self.biases)]

    def copy(self):
        net = MlpNet.__new__(MlpNet)
        net.sizes = list(self.sizes)
        net.activation = self.activation
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]
        return net


def accumulate_grads(total, grads, scale=1.0):
    for (tw, tb), (gw, gb) in zip(total, grads):
        tw += scale * gw
        tb += scale * gb
    return total


def soft_update(target: MlpNet, source: MlpNet, tau):
    """target <- tau * source + (1 - tau) * target, elementwise."""
    if target.sizes != source.sizes:
        raise ValueError("architecture mismatch in soft_update")
    for tw, sw in zip(target.weights, source.weights):
        tw *= 1.0 - tau
        tw += tau * sw
    for tb, sb in zip(target.biases, source.biases):
        tb *= 1.0 - tau
        tb += tau * sb


class Adam:
    """Adaptive moment estimation over a net's parameter list."""

    def __init__(self, net: MlpNet, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = net.zero_grads()
        self.v = net.zero_grads()

    def step(self, net: MlpNet, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        params = []
        for li in range(net.n_layers):
            params.append((net.weights[li], grads[li][0], self.m[li][0], self.v[li][0]))
            params.append((net.biases[li], grads[li][1], self.m[li][1], self.v[li][1]))
        for p, g, m, v in params:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class StochasticPolicy:
    """Tanh-squashed Gaussian policy over a box of actions.

    The backbone emits (mean, log_std) per action dimension; log_std is
    clamped to [-20, 2]; actions are squashed with tanh then affinely mapped
    into [lo, hi], so they always lie strictly inside the bounds.
    """

    def __init__(self, net: MlpNet, lo, hi):
        self.net = net
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.center = 0.5 * (self.lo + self.hi)
        self.scale = 0.5 * (self.hi - self.lo)
        self.na = len(self.lo)
        if net.sizes[-1] != 2 * self.na:
            raise ValueError("backbone output must be 2 * action dim")

    def _split(self, out):
        mean = out[..., : self.na]
        log_std_raw = out[..., self.na:]
        log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, log_std_raw

    def sample(self, x, rng=None, need_cache=False, eps=None):
        """Reparameterized sample.  Returns (action, log_prob[, cache]).

        eps overrides the Gaussian draw (finite-difference checks need a
        frozen noise realization).
        """
        out, net_cache = self.net.forward(x, need_cache=True)
        mean, log_std, log_std_raw = self._split(out)
        std = np.exp(log_std)
        if eps is None:
            eps = rng.standard_normal(mean.shape)
        pre = mean + std * eps
        t = np.tanh(pre)
        action = self.center + self.scale * t
        jac = self.scale * (1.0 - t ** 2) + _SQUASH_EPS
        logp = np.sum(
            -0.5 * eps ** 2 - 0.5 * np.log(2 * np.pi) - log_std - np.log(jac),
            axis=-1,
        )
        if need_cache:
            cache = {
                "net": net_cache, "eps": eps, "std": std, "t": t, "jac": jac,
                "log_std_raw": log_std_raw,
            }
            return action, logp, cache
        return action, logp

    def backward(self, cache, d_action, d_logp):
        """Gradients of a scalar loss through the reparameterized sample.

        d_action: dL/da, d_logp: dL/dlogp (per sample).  Returns backbone
        parameter grads; also returns the input gradient.
        """
        t, jac, std, eps = cache["t"], cache["jac"], cache["std"], cache["eps"]
        d_action = np.atleast_2d(d_action)
        d_logp = np.atleast_1d(d_logp)
        da_dpre = self.scale * (1.0 - t ** 2)
        # d logp / d pre through the squash correction only
        dlogp_dpre = 2.0 * self.scale * t * (1.0 - t ** 2) / jac
        d_pre = d_action * da_dpre + d_logp[..., None] * dlogp_dpre
        d_mean = d_pre
        d_log_std = d_pre * (std * eps) - d_logp[..., None]
        # gate the clamp
        raw = cache["log_std_raw"]
        inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
        d_log_std = np.where(inside, d_log_std, 0.0)
        grad_out = np.concatenate([np.atleast_2d(d_mean), np.atleast_2d(d_log_std)], axis=-1)
        if cache["net"]["single"]:
            grad_out = grad_out[0]
        return self.net.backward(cache["net"], grad_out)

    def mode(self, x):
        """Deterministic action: the squashed mean."""
        out = self.net.forward(x)
        mean, _, _ = self._split(out)
        return self.center + self.scale * np.tanh(mean)

    def log_prob(self, x, action):
        """Density of a given in-bounds action (numerical utility)."""
        out = self.net.forward(x)
        mean, log_std, _ = self._split(out)
        std = np.exp(log_std)
        t = np.clip((np.asarray(action) - self.center) / self.scale,
                    -1 + 1e-12, 1 - 1e-12)
        pre = np.arctanh(t)
        jac = self.scale * (1.0 - t ** 2) + _SQUASH_EPS
        z = (pre - mean) / std
        return np.sum(
            -0.5 * z ** 2 - 0.5 * np.log(2 * np.pi) - log_std - np.log(jac),
            axis=-1,
        )


class Critic:
    """Scalar state-action value over concatenated (x, u, d)."""

    def __init__(self, net: MlpNet, nx, nu, nd):
        if net.sizes[0] != nx + nu + nd or net.sizes[-1] != 1:
            raise ValueError("critic net shape mismatch")
        self.net = net
        self.nx, self.nu, self.nd = nx, nu, nd

    def value(self, x, u, d, need_cache=False):
        inp = np.concatenate(
            [np.atleast_2d(x), np.atleast_2d(u), np.atleast_2d(d)], axis=-1
        )
        if need_cache:
            out, cache = self.net.forward(inp, need_cache=True)
            return out[..., 0], cache
        return self.net.forward(inp)[..., 0]

    def backward(self, cache, d_value):
        """Returns (grads, (dx, du, dd)) for per-sample dL/dQ."""
        grad_out = np.atleast_1d(d_value)[..., None]
        input_grad, grads = self.net.backward(cache, grad_out)
        input_grad = np.atleast_2d(input_grad)
        dx = input_grad[..., : self.nx]
        du = input_grad[..., self.nx: self.nx + self.nu]
        dd = input_grad[..., self.nx + self.nu:]
        return grads, (dx, du, dd)


# -- weight files -----------------------------------------------------------

WEIGHT_FORMAT_VERSION = 1


def _encode(arr):
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode()


def _decode(blob, shape):
    arr = np.frombuffer(base64.b64decode(blob), dtype="<f8").copy()
    return arr.reshape(shape)


def save_weights(net: MlpNet, path, bounds=None, extra=None):
    """JSON file: header (architecture, activation, bounds) + base64 blobs.

    Parameters are stored as little-endian float64 so the round trip is
    bit-exact (the artifact trains in float64 end to end).
    """
    doc = {
        "format_version": WEIGHT_FORMAT_VERSION,
        "kind": "mlp",
        "sizes": net.sizes,
        "activation": net.activation,
        "dtype": "float64",
        "layers": [
            {"W": _encode(w), "b": _encode(b)}
            for w, b in zip(net.weights, net.biases)
        ],
    }
    if bounds is not None:
        doc["bounds"] = [list(np.asarray(bounds[0], dtype=float)),
                         list(np.asarray(bounds[1], dtype=float))]
    if extra:
        doc["extra"] = extra
    with open(path, "w") as f:
        json.dump(doc, f)


def load_weights(path):
    """Returns (MlpNet, header dict).  Rejects corrupt or mismatched files."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValueError(f"corrupt weight file {path}: {exc}") from exc
    if doc.get("format_version") != WEIGHT_FORMAT_VERSION:
        raise ValueError(f"unsupported weight format {doc.get('format_version')!r}")
    if doc.get("kind") != "mlp" or "sizes" not in doc:
        raise ValueError("malformed weight header")
    net = MlpNet(doc["sizes"], activation=doc["activation"])
    if len(doc["layers"]) != net.n_layers:
        raise ValueError("layer count mismatch")
    for li, layer in enumerate(doc["layers"]):
        W = _decode(layer["W"], net.weights[li].shape)
        b = _decode(layer["b"], net.biases[li].shape)
        net.weights[li] = W
        net.biases[li] = b
    return net, doc


def make_policy(nx, na, lo, hi, hidden=(256, 256, 256), rng=None):
    net = MlpNet([nx] + list(hidden) + [2 * na], rng=rng)
    return StochasticPolicy(net, lo, hi)


def make_critic(nx, nu, nd, hidden=(128, 128, 128), rng=None):
    net = MlpNet([nx + nu + nd] + list(hidden) + [1], rng=rng)
    return Critic(net, nx, nu, nd)
