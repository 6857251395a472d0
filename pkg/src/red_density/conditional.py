"""Autoregressive GMM conditionals driven by a GRU.

The GRU reads the latent coordinates one at a time; before reading ``z_i`` its
state is mapped by a small fully connected head to the means, log-stds and
mixture logits of a 1-d Gaussian mixture for ``z_i``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError
from .numerics import LOG_2PI, log_sum_exp, sigmoid

LOG_STD_MIN = float(np.log(1e-3))
LOG_STD_MAX = float(np.log(1e3))

_GATES = ("update", "reset", "cand")


def _activation(name):
    if name == "sigmoid":
        return sigmoid, lambda out: out * (1.0 - out)
    if name == "tanh":
        return np.tanh, lambda out: 1.0 - out**2
    raise ContractError(f"unknown candidate activation {name!r}")


@dataclass
class GRUCell:
    """Scalar-input GRU.

    Weights are stored per gate: ``<gate>_in`` (H,), ``<gate>_rec`` (H, H)
    and ``<gate>_bias`` (H,), for gates ``update``, ``reset`` and ``cand``.
    ``h0`` is the learned initial state.
    """

    params: dict
    activation: str = "sigmoid"

    @classmethod
    def init(cls, hidden_size, rng=None, scale=0.01, activation="sigmoid"):
        H = hidden_size
        p = {}
        for g in _GATES:
            if rng is None:
                p[f"{g}_in"] = np.zeros(H)
                p[f"{g}_rec"] = np.zeros((H, H))
            else:
                p[f"{g}_in"] = scale * rng.standard_normal(H)
                p[f"{g}_rec"] = scale * rng.standard_normal((H, H))
            p[f"{g}_bias"] = np.zeros(H)
        p["h0"] = np.zeros(H)
        return cls(p, activation)

    @property
    def hidden_size(self):
        return self.params["h0"].shape[0]

    def step(self, x, h):
        """Advance a batch of states ``h`` (B, H) with scalar inputs ``x`` (B,)."""
        return self._step(x, h)[0]

    def _step(self, x, h):
        p = self.params
        act, _ = _activation(self.activation)
        u = sigmoid(np.outer(x, p["update_in"]) + h @ p["update_rec"].T + p["update_bias"])
        r = sigmoid(np.outer(x, p["reset_in"]) + h @ p["reset_rec"].T + p["reset_bias"])
        rh = r * h
        c = act(np.outer(x, p["cand_in"]) + rh @ p["cand_rec"].T + p["cand_bias"])
        h_new = u * h + (1.0 - u) * c
        return h_new, (x, h, u, r, rh, c)

    def step_vjp(self, cache, grad_h_new, grads):
        """Backprop one step; accumulates parameter grads into ``grads``.

        Returns ``(grad_x, grad_h_prev)``.
        """
        x, h, u, r, rh, c = cache
        p = self.params
        _, dact = _activation(self.activation)
        g = grad_h_new
        gu = g * (h - c)
        gc = g * (1.0 - u)
        gh = g * u

        ga_c = gc * dact(c)
        grads["cand_in"] += x @ ga_c
        grads["cand_rec"] += ga_c.T @ rh
        grads["cand_bias"] += ga_c.sum(axis=0)
        gx = ga_c @ p["cand_in"]
        grh = ga_c @ p["cand_rec"]
        gr = grh * h
        gh = gh + grh * r

        for gate, gpre in (("reset", gr * r * (1.0 - r)), ("update", gu * u * (1.0 - u))):
            grads[f"{gate}_in"] += x @ gpre
            grads[f"{gate}_rec"] += gpre.T @ h
            grads[f"{gate}_bias"] += gpre.sum(axis=0)
            gx = gx + gpre @ p[f"{gate}_in"]
            gh = gh + gpre @ p[f"{gate}_rec"]
        return gx, gh


@dataclass
class Mixture:
    """Batch of 1-d Gaussian mixtures, each array shaped (B, K).

    ``log_stds`` holds the raw head output; clamping happens on use.
    """

    means: np.ndarray
    log_stds: np.ndarray
    logits: np.ndarray

    @property
    def stds(self):
        return np.exp(np.clip(self.log_stds, LOG_STD_MIN, LOG_STD_MAX))

    @property
    def weights(self):
        w = np.exp(self.logits - log_sum_exp(self.logits, axis=-1)[..., None])
        return w

    def log_density(self, z):
        return self._log_density(z)[0]

    def _log_density(self, z):
        z = np.asarray(z, dtype=np.float64)[..., None]
        ls = np.clip(self.log_stds, LOG_STD_MIN, LOG_STD_MAX)
        log_w = self.logits - log_sum_exp(self.logits, axis=-1)[..., None]
        diff = (z - self.means) * np.exp(-ls)
        comp = log_w - 0.5 * LOG_2PI - ls - 0.5 * diff**2
        ll = log_sum_exp(comp, axis=-1)
        return ll, (ls, log_w, diff, comp, ll)

    def log_density_vjp(self, cache, grad_ll):
        """Gradients of ``grad_ll * ll`` w.r.t. means, raw log-stds, logits and z."""
        ls, log_w, diff, comp, ll = cache
        resp = np.exp(comp - ll[..., None])
        g = grad_ll[..., None]
        scaled = diff * np.exp(-ls)
        g_means = g * resp * scaled
        in_range = (self.log_stds > LOG_STD_MIN) & (self.log_stds < LOG_STD_MAX)
        g_ls = g * resp * (diff**2 - 1.0) * in_range
        g_logits = g * (resp - np.exp(log_w))
        g_z = -np.sum(g * resp * scaled, axis=-1)
        return g_means, g_ls, g_logits, g_z


def gmm_log_density(means, log_stds, logits, z):
    """Log-density of a single 1-d mixture at scalar or array ``z``."""
    m = Mixture(
        np.atleast_1d(np.asarray(means, float)),
        np.atleast_1d(np.asarray(log_stds, float)),
        np.atleast_1d(np.asarray(logits, float)),
    )
    out = m.log_density(z)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class MixtureHead:
    """Stack of fully connected layers from GRU state to ``3K`` mixture outputs.

    All layers but the last use tanh; the last is linear. Output columns are
    ``[means | log_stds | logits]``.
    """

    weights: list
    biases: list
    n_components: int

    @classmethod
    def init(cls, hidden_size, n_components, num_fcs=2, width=None, rng=None, scale=0.01):
        if num_fcs < 1:
            raise ContractError("num_fcs must be at least 1")
        width = hidden_size if width is None else width
        sizes = [hidden_size] + [width] * (num_fcs - 1) + [3 * n_components]
        ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            ws.append(np.zeros((n_in, n_out)) if rng is None else scale * rng.standard_normal((n_in, n_out)))
            bs.append(np.zeros(n_out))
        return cls(ws, bs, n_components)

    def __call__(self, h) -> Mixture:
        return self._forward(h)[0]

    def _forward(self, h):
        acts = [h]
        a = h
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.tanh(a @ W + b)
            acts.append(a)
        out = a @ self.weights[-1] + self.biases[-1]
        K = self.n_components
        return Mixture(out[:, :K], out[:, K : 2 * K], out[:, 2 * K :]), acts

    def vjp(self, acts, g_out, grads):
        """Backprop ``g_out`` (B, 3K) to the state; accumulates into ``grads``."""
        n = len(self.weights)
        g = g_out
        for li in range(n - 1, -1, -1):
            a_in = acts[li]
            grads[f"W{li}"] += a_in.T @ g
            grads[f"b{li}"] += g.sum(axis=0)
            g = g @ self.weights[li].T
            if li > 0:
                g = g * (1.0 - acts[li] ** 2)
        return g

    def named_parameters(self):
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out


def mixture_from_state(head: MixtureHead, h) -> Mixture:
    return head(np.atleast_2d(np.asarray(h, dtype=np.float64)))


@dataclass
class ConditionalModel:
    gru: GRUCell
    head: MixtureHead
    d: int

    @classmethod
    def init(cls, d, hidden_size, n_components, num_fcs=2, rng=None, scale=0.01, activation="sigmoid"):
        gru = GRUCell.init(hidden_size, rng, scale=scale, activation=activation)
        head = MixtureHead.init(hidden_size, n_components, num_fcs=num_fcs, rng=rng, scale=scale)
        return cls(gru, head, d)

    @property
    def n_components(self):
        return self.head.n_components

    def log_likelihood(self, z, cache=False):
        """Per-dimension conditional log-likelihoods.

        Returns ``(total, per_dim)`` with shapes (B,) and (B, d), or scalars and
        a (d,) vector for 1-d input.
        """
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z = np.atleast_2d(z)
        if z.shape[1] != self.d:
            raise ContractError(f"expected {self.d} columns, got {z.shape[1]}")
        B, d = z.shape
        per_dim = np.empty((B, d))
        steps = []
        h = np.broadcast_to(self.gru.params["h0"], (B, self.gru.hidden_size))
        for i in range(d):
            mix, acts = self.head._forward(h)
            per_dim[:, i], mcache = mix._log_density(z[:, i])
            gcache = None
            if i < d - 1:
                h, gcache = self.gru._step(z[:, i], h)
            steps.append((mix, acts, mcache, gcache))
        total = per_dim.sum(axis=1)
        if single:
            total, per_dim = total[0], per_dim[0]
        if cache:
            return total, per_dim, steps
        return total, per_dim

    def vjp(self, steps, grad_per_dim):
        """Gradients of ``sum(grad_per_dim * per_dim)`` w.r.t. ``z`` and all params."""
        B, d = grad_per_dim.shape
        g_gru = {k: np.zeros_like(v) for k, v in self.gru.params.items()}
        g_head = {k: np.zeros_like(v) for k, v in self.head.named_parameters().items()}
        gz = np.zeros((B, d))
        gh = np.zeros((B, self.gru.hidden_size))
        for i in range(d - 1, -1, -1):
            mix, acts, mcache, gcache = steps[i]
            if gcache is not None:
                gx, gh = self.gru.step_vjp(gcache, gh, g_gru)
                gz[:, i] += gx
            else:
                gh = np.zeros_like(gh)
            g_mu, g_ls, g_lg, g_zi = mix.log_density_vjp(mcache, grad_per_dim[:, i])
            gz[:, i] += g_zi
            gh = gh + self.head.vjp(acts, np.concatenate([g_mu, g_ls, g_lg], axis=1), g_head)
        g_gru["h0"] += gh.sum(axis=0)
        grads = {f"gru.{k}": v for k, v in g_gru.items()}
        grads.update({f"head.{k}": v for k, v in g_head.items()})
        return gz, grads

    def sample(self, rng, n=1):
        """Draw ``n`` latent vectors by ancestral sampling, shape (n, d).

        Per dimension: ``n`` uniforms pick components by inverse CDF, then ``n``
        standard normals are scaled and shifted.
        """
        z = np.empty((n, self.d))
        h = np.broadcast_to(self.gru.params["h0"], (n, self.gru.hidden_size))
        for i in range(self.d):
            mix = self.head(h)
            cdf = np.cumsum(mix.weights, axis=1)
            u = rng.random(n)
            k = np.minimum((u[:, None] > cdf).sum(axis=1), self.n_components - 1)
            eps = rng.standard_normal(n)
            rows = np.arange(n)
            z[:, i] = mix.means[rows, k] + mix.stds[rows, k] * eps
            if i < self.d - 1:
                h = self.gru.step(z[:, i], h)
        return z

    def named_parameters(self):
        out = {f"gru.{k}": v for k, v in self.gru.params.items()}
        out.update({f"head.{k}": v for k, v in self.head.named_parameters().items()})
        return out
