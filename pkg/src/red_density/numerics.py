"""Shared numeric helpers: seeded RNG, stable reductions, finite differences.

Random numbers come from NumPy's ``Generator`` backed by the PCG64 bit
generator; normal variates use NumPy's ziggurat sampler. Both algorithms are
fixed by name here rather than left to ``np.random.default_rng`` so that a
seed always means the same stream.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .exceptions import ContractError, NonFiniteError

LOG_2PI = float(np.log(2.0 * np.pi))

Rng = np.random.Generator


def make_rng(seed: int | None) -> Rng:
    """Return a PCG64-backed generator for ``seed``."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent child seed from ``seed`` and integer ``keys``.

    Used whenever work is split (grid runs, noise, shuffling) so that each
    consumer owns its own generator.
    """
    ss = np.random.SeedSequence([int(seed), *map(int, keys)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def check_random_state(random_state) -> Rng:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return make_rng(random_state)


def log_sum_exp(v, axis=None):
    """Stable ``log(sum(exp(v)))`` via max-shift.

    Returns exactly ``-inf`` when every entry is ``-inf``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ContractError("log_sum_exp of an empty array")
    m = np.max(v, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - m_safe), axis=axis, keepdims=True)) + m_safe
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def gaussian_logpdf(z, mu, sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ContractError("gaussian_logpdf requires sigma > 0")
    z = np.asarray(z, dtype=np.float64)
    out = -0.5 * LOG_2PI - np.log(sigma) - (z - mu) ** 2 / (2.0 * sigma**2)
    return float(out) if out.ndim == 0 else out


def draw_standard_normal(rng: Rng, n: int) -> np.ndarray:
    if n < 1:
        raise ContractError(f"need at least one draw, got n={n}")
    return rng.standard_normal(n)


def finite_diff_gradient(
    f: Callable[[np.ndarray], float], x, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"f is not finite around coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)


def sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a, dtype=np.float64)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out
