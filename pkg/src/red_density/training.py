"""Gradients, optimizer and training loop."""

from __future__ import annotations

import csv
import itertools
import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .data import add_noise
from .exceptions import ContractError, NonFiniteError, REDError, ShapeMismatchError
from .model import ModelConfig, RedModel, init_model
from .numerics import derive_seed, make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    init_lr: float = 1e-3
    decay_factor: float = 0.97
    min_lr: float = 1e-5
    batch_size: int = 128
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    noise_std: float = 0.01
    noise_per_epoch: bool = False
    grad_clip_norm: float = 5.0

    def __post_init__(self):
        if self.init_lr <= 0:
            raise ContractError("init_lr must be positive")
        if not 0 < self.decay_factor <= 1:
            raise ContractError("decay_factor must lie in (0, 1]")
        if self.min_lr > self.init_lr:
            raise ContractError("min_lr may not exceed init_lr")
        if self.batch_size < 1:
            raise ContractError("batch_size must be at least 1")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    return max(cfg.min_lr, cfg.init_lr * cfg.decay_factor**epoch)


# -- gradients ----------------------------------------------------------------


def loss_and_gradients(m: RedModel, batch):
    """Mean NLL over ``batch`` and its gradient for every named parameter."""
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if X.shape[0] == 0:
        raise ContractError("empty batch")
    if X.shape[1] != m.d:
        raise ShapeMismatchError(f"batch has {X.shape[1]} columns, model expects {m.d}")
    B = X.shape[0]
    z, logdet, tcache = m.stack.forward(X, cache=True)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite latent vector after the transform stack")
    total, per_dim, ccache = m.cond.log_likelihood(z, cache=True)
    if not np.all(np.isfinite(per_dim)):
        raise NonFiniteError("non-finite conditional log-likelihood")
    loss = float(-np.mean(logdet + total))
    if not np.isfinite(loss):
        raise NonFiniteError("non-finite log-determinant")

    w = np.full(B, -1.0 / B)
    gz, grads = m.cond.vjp(ccache, np.broadcast_to(w[:, None], per_dim.shape))
    _, tgrads = m.stack.vjp(tcache, gz, w)
    grads.update(tgrads)
    return loss, grads


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale ``grads`` in place to global norm ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float, project=None):
    """Bias-corrected Adam update of ``params`` in place, then ``project()``."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if project is not None:
        project()


# -- training loop ------------------------------------------------------------


@dataclass
class TrainHistory:
    epoch: list = field(default_factory=list)
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def append(self, epoch, train_nll, val_nll, lr, seconds):
        self.epoch.append(epoch)
        self.train_nll.append(train_nll)
        self.val_nll.append(val_nll)
        self.lr.append(lr)
        self.seconds.append(seconds)

    def __len__(self):
        return len(self.epoch)

    @property
    def best_epoch(self) -> int:
        return self.epoch[int(np.argmin(self.val_nll))]

    def to_csv(self, path, include_timing=True):
        cols = ["epoch", "train_nll", "val_nll", "lr"] + (["seconds"] if include_timing else [])
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(cols)
            for row in zip(*(getattr(self, c) for c in cols)):
                w.writerow([repr(v) for v in row])


def train(m: RedModel, train_X, val_X, cfg: TrainConfig, callback=None):
    """Fit ``m`` in place and return ``(best_model, history)``.

    Row 0 of the history is the untrained model. Each later row is one epoch
    of seeded-shuffle minibatch Adam; ``train_nll`` is the mean minibatch loss
    seen during the epoch. Training stops after ``patience`` epochs without a
    validation improvement and the best-validation snapshot is returned.
    """
    train_X = np.asarray(train_X, dtype=np.float64)
    val_X = np.asarray(val_X, dtype=np.float64)
    for name, X in (("train", train_X), ("val", val_X)):
        if X.ndim != 2 or X.shape[1] != m.d or X.shape[0] == 0:
            raise ShapeMismatchError(f"{name} matrix must be non-empty with {m.d} columns, got {X.shape}")

    shuffle_rng = make_rng(derive_seed(cfg.seed, 1))
    noise_rng = make_rng(derive_seed(cfg.seed, 2))
    noisy = add_noise(train_X, cfg.noise_std, noise_rng)

    history = TrainHistory()
    start = time.perf_counter()
    best_val = m.nll(val_X)
    history.append(0, m.nll(noisy), best_val, lr_schedule(cfg, 0), 0.0)
    best = m.copy()
    adam = AdamState()
    lr_scale = 1.0
    stale = 0
    N = train_X.shape[0]

    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.noise_per_epoch and epoch > 1:
            noisy = add_noise(train_X, cfg.noise_std, noise_rng)
        lr = lr_schedule(cfg, epoch - 1)
        perm = shuffle_rng.permutation(N)
        for attempt in range(2):
            snapshot = m.copy()
            adam_snapshot = AdamState(step=adam.step, m={k: v.copy() for k, v in adam.m.items()},
                                      v={k: v.copy() for k, v in adam.v.items()})
            try:
                losses = []
                for s in range(0, N, cfg.batch_size):
                    loss, grads = loss_and_gradients(m, noisy[perm[s : s + cfg.batch_size]])
                    clip_gradients(grads, cfg.grad_clip_norm)
                    adam_step(adam, m.named_parameters(), grads, lr * lr_scale, m.project)
                    losses.append(loss)
                val = m.nll(val_X)
                if not np.isfinite(val):
                    raise NonFiniteError("validation NLL is not finite")
                break
            except (NonFiniteError, FloatingPointError) as e:
                _restore(m, snapshot)
                adam = adam_snapshot
                if attempt == 1:
                    raise NonFiniteError(f"epoch {epoch}: {e} (also after halving the learning rate)") from e
                lr_scale *= 0.5
                logger.warning("epoch %d: %s; retrying with halved learning rate", epoch, e)
        history.append(epoch, float(np.mean(losses)), val, lr * lr_scale, time.perf_counter() - start)
        if callback is not None:
            callback(epoch, history)
        if val < best_val:
            best_val = val
            best = m.copy()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(m, best)
    return m, history


def _restore(m: RedModel, src: RedModel):
    src_params = src.named_parameters()
    for k, v in m.named_parameters().items():
        v[...] = src_params[k]


# -- grid search --------------------------------------------------------------

MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
TRAIN_FIELDS = {f.name for f in fields(TrainConfig)}

DEFAULT_GRID = {
    "num_units": [32, 64, 128],
    "init_lr": [1e-2, 3e-3, 1e-3],
    "decay_factor": [1.0, 0.97],
    "num_fcs": [1, 2],
    "num_components": [5, 10, 20],
}


@dataclass
class GridResult:
    config: dict
    val_nll: float
    n_parameters: int
    error: str | None = None
    model: RedModel | None = field(default=None, repr=False)
    history: TrainHistory | None = field(default=None, repr=False)


def expand_grid(space: dict):
    if not space or any(len(v) == 0 for v in space.values()):
        raise ContractError("grid space must be a non-empty Cartesian product")
    unknown = set(space) - MODEL_FIELDS - TRAIN_FIELDS
    if unknown:
        raise ContractError(f"unknown grid keys: {sorted(unknown)}")
    keys = sorted(space)
    for values in itertools.product(*(space[k] for k in keys)):
        yield dict(zip(keys, values))


def grid_search(space: dict, train_X, val_X, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """Train every combination in ``space``; returns ``(best, leaderboard)``.

    The leaderboard is sorted by validation NLL, then parameter count, then the
    order in which combinations were enumerated. Failed runs stay on the board
    with ``val_nll = inf`` and an error message.
    """
    results = []
    for idx, combo in enumerate(expand_grid(space)):
        mc = replace(model_cfg, **{k: v for k, v in combo.items() if k in MODEL_FIELDS})
        tc = replace(train_cfg, **{k: v for k, v in combo.items() if k in TRAIN_FIELDS})
        try:
            m = init_model(mc)
            m, hist = train(m, train_X, val_X, tc)
            val = min(hist.val_nll)
            results.append((idx, GridResult(combo, val, m.n_parameters(), model=m, history=hist)))
        except (REDError, FloatingPointError) as e:
            logger.warning("grid run %s failed: %s", combo, e)
            results.append((idx, GridResult(combo, float("inf"), 0, error=str(e))))
    results.sort(key=lambda r: (r[1].val_nll, r[1].n_parameters, r[0]))
    board = [r for _, r in results]
    if all(r.error is not None for r in board):
        raise NonFiniteError("every grid run failed")
    return board[0], board


def write_leaderboard(board, path):
    keys = sorted({k for r in board for k in r.config})
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rank", *keys, "val_nll", "n_parameters", "error"])
        for rank, r in enumerate(board, 1):
            w.writerow([rank, *(r.config.get(k, "") for k in keys), repr(r.val_nll), r.n_parameters, r.error or ""])


# -- gradient check -----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    violations: list  # (param name, flat index, analytic, numeric, rel err)
    per_parameter: dict

    @property
    def ok(self):
        return not self.violations


def gradient_check(m: RedModel, batch, eps=1e-5, tol=1e-4, grad_fn=None) -> GradCheckReport:
    """Compare analytic gradients with central differences, entry by entry.

    Relative error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    grad_fn = loss_and_gradients if grad_fn is None else grad_fn
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    _, grads = grad_fn(m, batch)
    violations = []
    per_param = {}
    worst = 0.0
    count = 0
    for name, p in m.named_parameters().items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        errs = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = m.nll(batch)
            flat[i] = orig - eps
            fm = m.nll(batch)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(g[i] - num) / max(1e-8, abs(g[i]) + abs(num))
            errs[i] = err
            if err > tol:
                violations.append((name, i, float(g[i]), float(num), float(err)))
        count += flat.size
        per_param[name] = float(errs.max()) if errs.size else 0.0
        worst = max(worst, per_param[name])
    return GradCheckReport(worst, count, violations, per_param)


__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainHistory",
    "lr_schedule",
    "loss_and_gradients",
    "clip_gradients",
    "adam_step",
    "train",
    "grid_search",
    "expand_grid",
    "write_leaderboard",
    "gradient_check",
    "GradCheckReport",
    "DEFAULT_GRID",
]
