"""The full density model and its checkpoint format.

``log p(x) = log|det dz/dx| + sum_i log p(z_i | z_<i)`` with ``z`` the output
of the transform stack.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes   b"REDCKPT\\0"
    version    uint32
    hlen       uint32
    header     hlen bytes of UTF-8 JSON:
                 config, params (name/shape list, in record order),
                 payload_sha256, probe_sha256
    records    per parameter: uint16 name length, name bytes, uint8 ndim,
               ndim x uint32 shape, float64 '<f8' payload
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .conditional import ConditionalModel
from .exceptions import (
    CheckpointCorruptError,
    CheckpointVersionError,
    ContractError,
    IntegrityError,
    ShapeMismatchError,
)
from .numerics import make_rng
from .transforms import TransformStack

FORMAT_VERSION = 1
MAGIC = b"REDCKPT\x00"


@dataclass(frozen=True)
class ModelConfig:
    d: int
    num_units: int = 32
    transform_hidden: int = 8
    num_components: int = 5
    num_fcs: int = 2
    alpha: float = 0.1
    candidate_activation: str = "sigmoid"
    init_shift: float = 5.0
    seed: int = 0

    def __post_init__(self):
        for name in ("d", "num_units", "transform_hidden", "num_components", "num_fcs"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be a positive count")
        if self.alpha <= 0:
            raise ContractError("alpha must be positive")


@dataclass
class RedModel:
    config: ModelConfig
    stack: TransformStack
    cond: ConditionalModel

    @property
    def d(self):
        return self.config.d

    def named_parameters(self) -> dict:
        """Flat ``name -> array`` view; arrays are the live parameter storage."""
        out = self.stack.named_parameters()
        out.update(self.cond.named_parameters())
        return out

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.named_parameters().values()))

    def project(self):
        self.stack.project()

    def copy(self) -> "RedModel":
        m = build_model(self.config)
        for k, v in m.named_parameters().items():
            v[...] = self.named_parameters()[k]
        return m

    def _check_x(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.ndim != 2 or X.shape[1] != self.d:
            raise ShapeMismatchError(f"model expects {self.d} columns, got shape {X.shape}")
        return X, single

    def log_prob(self, X):
        X, single = self._check_x(X)
        z, logdet = self.stack.forward(X)
        total, _ = self.cond.log_likelihood(z)
        out = logdet + total
        return out[0] if single else out

    def nll(self, X) -> float:
        X, _ = self._check_x(X)
        if X.shape[0] == 0:
            raise ContractError("nll of an empty matrix")
        return float(-np.mean(self.log_prob(X)))

    def sample(self, rng, n=1):
        if n < 1:
            raise ContractError("n must be at least 1")
        z = self.cond.sample(rng, n)
        return self.stack.inverse(z)


def build_model(cfg: ModelConfig, rng=None, scale=0.01) -> RedModel:
    """Assemble a model; with ``rng=None`` all random weights are zero."""
    stack = TransformStack.init(cfg.d, cfg.transform_hidden, rng, alpha=cfg.alpha)
    cond = ConditionalModel.init(
        cfg.d,
        cfg.num_units,
        cfg.num_components,
        num_fcs=cfg.num_fcs,
        rng=rng,
        scale=scale,
        activation=cfg.candidate_activation,
    )
    return RedModel(cfg, stack, cond)


def init_model(cfg: ModelConfig, rng=None) -> RedModel:
    """Random N(0, 0.01^2) weights around an identity-like transform stack.

    The linear offset starts at ``cfg.init_shift`` and the head's mean bias at
    the same value, so for standardized inputs with ``|x| < init_shift`` every
    leaky-ReLU pre-activation sits on its identity branch: the initial density
    is close to a standard normal and the initial log-determinant is ~0.
    """
    if rng is None:
        rng = make_rng(cfg.seed)
    m = build_model(cfg, rng)
    m.stack.linear.offset[:] = cfg.init_shift
    m.cond.head.biases[-1][: cfg.num_components] = cfg.init_shift
    return m


def nll(m: RedModel, X) -> float:
    return m.nll(X)


# -- checkpoints --------------------------------------------------------------


def probe_batch(d: int, n: int = 8) -> np.ndarray:
    return make_rng(20240601).standard_normal((n, d))


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def parameter_digest(m: RedModel) -> str:
    h = hashlib.sha256()
    for name, v in m.named_parameters().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()


def save_checkpoint(m: RedModel, path) -> str:
    """Write ``m`` to ``path``; returns the payload digest."""
    params = m.named_parameters()
    records = bytearray()
    for name, v in params.items():
        nb = name.encode()
        records += struct.pack("<H", len(nb)) + nb
        records += struct.pack("<B", v.ndim)
        records += struct.pack(f"<{v.ndim}I", *v.shape)
        records += np.ascontiguousarray(v, dtype="<f8").tobytes()
    header = {
        "config": asdict(m.config),
        "params": [[k, list(v.shape)] for k, v in params.items()],
        "payload_sha256": hashlib.sha256(bytes(records)).hexdigest(),
        "probe_sha256": _digest(m.log_prob(probe_batch(m.d))),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(hb)) + hb + bytes(records))
    return header["payload_sha256"]


def read_checkpoint_header(path) -> dict:
    return _read(path)[0]


def _read(path):
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a RED checkpoint")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 16 + hlen:
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f"{path}: unreadable header ({e})") from None
    return header, data[16 + hlen :]


def load_checkpoint(path, verify: bool = True) -> RedModel:
    header, payload = _read(path)
    expected = {k: tuple(s) for k, s in header["params"]}
    arrays = {}
    off = 0
    try:
        while off < len(payload):
            (nlen,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", payload, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, off)
            off += 4 * ndim
            size = 8 * math.prod(shape)
            if off + size > len(payload):
                raise CheckpointCorruptError(f"{path}: truncated record {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f8", count=size // 8, offset=off).reshape(shape)
            off += size
    except struct.error:
        raise CheckpointCorruptError(f"{path}: truncated parameter records") from None
    if set(arrays) != set(expected):
        raise CheckpointCorruptError(f"{path}: parameter records do not match header")
    if verify and hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise IntegrityError(f"{path}: payload digest mismatch")

    known = {f.name for f in fields(ModelConfig)}
    cfg = ModelConfig(**{k: v for k, v in header["config"].items() if k in known})
    m = build_model(cfg)
    live = m.named_parameters()
    for name, target in live.items():
        if name not in arrays:
            raise CheckpointCorruptError(f"{path}: missing parameter {name!r}")
        if arrays[name].shape != target.shape:
            raise ShapeMismatchError(
                f"{path}: parameter {name!r} has shape {arrays[name].shape}, config implies {target.shape}"
            )
        target[...] = arrays[name]
    if verify and _digest(m.log_prob(probe_batch(m.d))) != header["probe_sha256"]:
        raise IntegrityError(f"{path}: probe batch log-likelihoods differ from recorded hash")
    return m


__all__ = [
    "ModelConfig",
    "RedModel",
    "build_model",
    "init_model",
    "nll",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint_header",
    "parameter_digest",
]
