"""Invertible change-of-variables stack.

``x -> linear (LU) -> forward recurrent pass -> backward recurrent pass -> z``

Each stage works on a batch ``(B, d)`` and returns its outputs together with a
per-row log|det J|. ``forward(..., cache=True)`` additionally returns the
activations that ``vjp`` needs to push gradients back through the stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .exceptions import ContractError, SingularTransformError

#: magnitude floor for the LU diagonal and the recurrent input gain
SINGULAR_FLOOR = 1e-8


def leaky_relu(s, alpha):
    return np.where(s >= 0, s, alpha * s)


def leaky_relu_grad(s, alpha):
    # derivative at exactly 0 taken as 1
    return np.where(s >= 0, 1.0, alpha)


def leaky_relu_inv(z, alpha):
    return np.where(z >= 0, z, z / alpha)


def project_magnitude(a: np.ndarray, floor: float = SINGULAR_FLOOR) -> None:
    """Clamp ``|a|`` to at least ``floor`` in place, keeping the sign (0 -> +floor)."""
    sign = np.where(a < 0, -1.0, 1.0)
    np.copyto(a, np.where(np.abs(a) < floor, sign * floor, a))


def _as_batch(x, d):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != d:
        raise ContractError(f"expected input with {d} columns, got shape {x.shape}")
    return x, single


@dataclass
class LinearLU:
    """Affine map ``z = L U x + offset`` kept in factored form.

    ``lower`` packs the strictly-lower entries of the unit-diagonal ``L``;
    ``diag`` and ``upper`` pack the diagonal and strictly-upper part of ``U``.
    """

    lower: np.ndarray
    diag: np.ndarray
    upper: np.ndarray
    offset: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "LinearLU":
        m = d * (d - 1) // 2
        return cls(np.zeros(m), np.ones(d), np.zeros(m), np.zeros(d))

    @classmethod
    def from_matrices(cls, L, U, offset=None) -> "LinearLU":
        L = np.asarray(L, dtype=np.float64)
        U = np.asarray(U, dtype=np.float64)
        d = L.shape[0]
        lo = np.tril_indices(d, -1)
        up = np.triu_indices(d, 1)
        b = np.zeros(d) if offset is None else np.array(offset, dtype=np.float64)
        return cls(L[lo].copy(), np.diag(U).copy(), U[up].copy(), b)

    @property
    def d(self) -> int:
        return self.diag.shape[0]

    def L(self) -> np.ndarray:
        d = self.d
        out = np.eye(d)
        out[np.tril_indices(d, -1)] = self.lower
        return out

    def U(self) -> np.ndarray:
        d = self.d
        out = np.diag(self.diag)
        out[np.triu_indices(d, 1)] = self.upper
        return out

    def _check(self):
        bad = np.flatnonzero(np.abs(self.diag) < SINGULAR_FLOOR)
        if bad.size:
            raise SingularTransformError(
                f"LU diagonal entry {int(bad[0])} has magnitude below {SINGULAR_FLOOR}"
            )

    def logdet(self) -> float:
        self._check()
        return float(np.sum(np.log(np.abs(self.diag))))

    def forward(self, x, cache=False):
        x, single = _as_batch(x, self.d)
        ld = self.logdet()
        t = x @ self.U().T
        z = t @ self.L().T + self.offset
        logdet = np.full(x.shape[0], ld)
        if single:
            z, logdet = z[0], logdet[0]
        if cache:
            return z, logdet, {"x": x, "t": t}
        return z, logdet

    def inverse(self, z):
        z, single = _as_batch(z, self.d)
        self._check()
        t = solve_triangular(self.L(), (z - self.offset).T, lower=True, unit_diagonal=True)
        x = solve_triangular(self.U(), t, lower=False).T
        return x[0] if single else x

    def vjp(self, cache, grad_z, grad_logdet):
        """Pull ``grad_z`` (B, d) and per-row ``grad_logdet`` (B,) back to inputs/params."""
        x, t = cache["x"], cache["t"]
        d = self.d
        lo = np.tril_indices(d, -1)
        up = np.triu_indices(d, 1)
        g_t = grad_z @ self.L()
        gL = grad_z.T @ t
        gU = g_t.T @ x
        grads = {
            "lower": gL[lo],
            "diag": np.diag(gU) + np.sum(grad_logdet) / self.diag,
            "upper": gU[up],
            "offset": grad_z.sum(axis=0),
        }
        return g_t @ self.U(), grads

    def named_parameters(self):
        return {"lower": self.lower, "diag": self.diag, "upper": self.upper, "offset": self.offset}

    def project(self):
        project_magnitude(self.diag)


@dataclass
class RecurrentTransform:
    """Invertible recurrent map scanning the dimensions one at a time.

    ``z_i = leaky(gain * x_i + out_weights . h + offset)`` and the state
    advances with ``h = relu(in_weights * x_i + hidden_weights @ h + hidden_bias)``.
    ``reverse=True`` scans from the last dimension to the first while keeping
    outputs index-aligned. The initial state is a fixed zero vector.
    """

    gain: np.ndarray
    offset: np.ndarray
    out_weights: np.ndarray
    in_weights: np.ndarray
    hidden_weights: np.ndarray
    hidden_bias: np.ndarray
    alpha: float = 0.1
    reverse: bool = False
    h0: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.gain = np.asarray(self.gain, dtype=np.float64).reshape(())
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(())
        self.out_weights = np.asarray(self.out_weights, dtype=np.float64)
        self.in_weights = np.asarray(self.in_weights, dtype=np.float64)
        self.hidden_weights = np.asarray(self.hidden_weights, dtype=np.float64)
        self.hidden_bias = np.asarray(self.hidden_bias, dtype=np.float64)
        if self.alpha <= 0:
            raise ContractError("leaky slope alpha must be positive")
        if self.h0 is None:
            self.h0 = np.zeros(self.hidden_size)

    @classmethod
    def init(cls, hidden_size, rng=None, alpha=0.1, reverse=False, scale=0.01):
        H = hidden_size
        if rng is None:
            w, V = np.zeros(H), np.zeros((H, H))
        else:
            w = scale * rng.standard_normal(H)
            V = scale * rng.standard_normal((H, H))
        return cls(1.0, 0.0, w, np.ones(H), V, np.zeros(H), alpha=alpha, reverse=reverse)

    @property
    def hidden_size(self) -> int:
        return self.out_weights.shape[0]

    def _order(self, d):
        return range(d - 1, -1, -1) if self.reverse else range(d)

    def _check(self):
        if abs(float(self.gain)) < SINGULAR_FLOOR:
            raise SingularTransformError(f"recurrent gain has magnitude below {SINGULAR_FLOOR}")

    def forward(self, x, cache=False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        self._check()
        B, d = x.shape
        H = self.hidden_size
        s = np.empty((B, d))
        states = np.empty((B, d, H))
        pre = np.zeros((B, d, H))
        h = np.broadcast_to(self.h0, (B, H))
        for step, i in enumerate(self._order(d)):
            states[:, i] = h
            s[:, i] = self.gain * x[:, i] + h @ self.out_weights + self.offset
            if step < d - 1:
                pre[:, i] = (
                    np.outer(x[:, i], self.in_weights) + h @ self.hidden_weights.T + self.hidden_bias
                )
                h = np.maximum(pre[:, i], 0.0)
        z = leaky_relu(s, self.alpha)
        logdet = d * np.log(abs(float(self.gain))) + np.sum(
            np.log(leaky_relu_grad(s, self.alpha)), axis=1
        )
        if single:
            z, logdet = z[0], logdet[0]
        if cache:
            return z, logdet, {"x": x, "s": s, "states": states, "pre": pre}
        return z, logdet

    def inverse(self, z):
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        z = np.atleast_2d(z)
        self._check()
        B, d = z.shape
        u = leaky_relu_inv(z, self.alpha)
        x = np.empty_like(z)
        h = np.broadcast_to(self.h0, (B, self.hidden_size))
        for step, i in enumerate(self._order(d)):
            x[:, i] = (u[:, i] - h @ self.out_weights - self.offset) / self.gain
            if step < d - 1:
                h = np.maximum(
                    np.outer(x[:, i], self.in_weights) + h @ self.hidden_weights.T + self.hidden_bias,
                    0.0,
                )
        return x[0] if single else x

    def vjp(self, cache, grad_z, grad_logdet):
        x, s, states, pre = cache["x"], cache["s"], cache["states"], cache["pre"]
        B, d = x.shape
        H = self.hidden_size
        gx = np.zeros_like(x)
        g_gain = 0.0
        g_off = 0.0
        g_out = np.zeros(H)
        g_in = np.zeros(H)
        g_hw = np.zeros((H, H))
        g_hb = np.zeros(H)
        gh = np.zeros((B, H))  # gradient w.r.t. the state produced at this step
        order = list(self._order(d))
        for step in range(d - 1, -1, -1):
            i = order[step]
            h_prev = states[:, i]
            gh_prev = np.zeros((B, H))
            if step < d - 1:
                gpre = gh * (pre[:, i] > 0)
                g_in += x[:, i] @ gpre
                g_hw += gpre.T @ h_prev
                g_hb += gpre.sum(axis=0)
                gx[:, i] += gpre @ self.in_weights
                gh_prev += gpre @ self.hidden_weights
            gs = grad_z[:, i] * leaky_relu_grad(s[:, i], self.alpha)
            g_gain += gs @ x[:, i]
            g_off += gs.sum()
            g_out += gs @ h_prev
            gx[:, i] += gs * self.gain
            gh = gh_prev + np.outer(gs, self.out_weights)
        g_gain += d * np.sum(grad_logdet) / float(self.gain)
        grads = {
            "gain": np.asarray(g_gain),
            "offset": np.asarray(g_off),
            "out_weights": g_out,
            "in_weights": g_in,
            "hidden_weights": g_hw,
            "hidden_bias": g_hb,
        }
        return gx, grads

    def named_parameters(self):
        return {
            "gain": self.gain,
            "offset": self.offset,
            "out_weights": self.out_weights,
            "in_weights": self.in_weights,
            "hidden_weights": self.hidden_weights,
            "hidden_bias": self.hidden_bias,
        }

    def project(self):
        project_magnitude(self.gain)


@dataclass
class TransformStack:
    linear: LinearLU
    fwd: RecurrentTransform
    bwd: RecurrentTransform

    def __post_init__(self):
        if self.fwd.reverse or not self.bwd.reverse:
            raise ContractError("stack needs a forward-scanning then a backward-scanning stage")

    @classmethod
    def init(cls, d, hidden_size, rng=None, alpha=0.1):
        return cls(
            LinearLU.identity(d),
            RecurrentTransform.init(hidden_size, rng, alpha=alpha, reverse=False),
            RecurrentTransform.init(hidden_size, rng, alpha=alpha, reverse=True),
        )

    @property
    def d(self):
        return self.linear.d

    def stages(self):
        return (("linear", self.linear), ("fwd", self.fwd), ("bwd", self.bwd))

    def forward(self, x, cache=False):
        x, single = _as_batch(x, self.d)
        total = np.zeros(x.shape[0])
        caches = []
        z = x
        for _, stage in self.stages():
            z, ld, c = stage.forward(z, cache=True)
            total = total + ld
            caches.append(c)
        if single:
            z, total = z[0], total[0]
        if cache:
            return z, total, caches
        return z, total

    def inverse(self, z):
        z, single = _as_batch(z, self.d)
        x = z
        for _, stage in reversed(self.stages()):
            x = stage.inverse(x)
        return x[0] if single else x

    def vjp(self, caches, grad_z, grad_logdet):
        grads = {}
        g = grad_z
        for (name, stage), c in reversed(list(zip(self.stages(), caches))):
            g, sg = stage.vjp(c, g, grad_logdet)
            grads.update({f"{name}.{k}": v for k, v in sg.items()})
        return g, grads

    def named_parameters(self):
        out = {}
        for name, stage in self.stages():
            out.update({f"{name}.{k}": v for k, v in stage.named_parameters().items()})
        return out

    def project(self):
        for _, stage in self.stages():
            stage.project()
