"""Small NumPy Q-network: token embedding, pooled, dense layers, k output heads.

Parameters live in an ordered ``dict[str, ndarray]``.  ``forward`` returns the
Q-values plus a cache that ``backward`` consumes; ``adam_step`` applies one
bias-corrected Adam update.  ``save_model``/``load_model`` implement the binary
model file (header, vocabulary, tensors as little-endian float64).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh")
POOLING = ("mean", "concat")

MAGIC = b"LIFTQNET"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    vocab_size: int
    input_length: int
    k_max: int
    embed_dim: int = 32
    hidden: tuple = ((128, "relu"),)
    pooling: str = "mean"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple((int(n), str(a)) for n, a in self.hidden))
        for name in ("vocab_size", "input_length", "k_max", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"NetworkSpec.{name} must be >= 1")
        for n, act in self.hidden:
            if n < 1:
                raise ValueError("hidden layer sizes must be >= 1")
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.pooling not in POOLING:
            raise ValueError(f"unknown pooling {self.pooling!r}")

    @property
    def head_width(self) -> int:
        return 2 * self.k_max + 1

    @property
    def pooled_dim(self) -> int:
        if self.pooling == "concat":
            return self.embed_dim * self.input_length
        return self.embed_dim

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "input_length": self.input_length,
            "k_max": self.k_max,
            "embed_dim": self.embed_dim,
            "hidden": [list(h) for h in self.hidden],
            "pooling": self.pooling,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return cls(**{**data, "hidden": tuple(tuple(h) for h in data.get("hidden", ((128, "relu"),)))})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def param_shapes(spec: NetworkSpec) -> list[tuple[str, tuple]]:
    shapes = [("embedding", (spec.vocab_size, spec.embed_dim))]
    fan_in = spec.pooled_dim
    for i, (n, _) in enumerate(spec.hidden):
        shapes += [(f"dense{i}.w", (fan_in, n)), (f"dense{i}.b", (n,))]
        fan_in = n
    out = spec.k_max * spec.head_width
    shapes += [("heads.w", (fan_in, out)), ("heads.b", (out,))]
    return shapes


def parameter_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(spec))


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> dict:
    params = {}
    for name, shape in param_shapes(spec):
        if name == "embedding":
            params[name] = rng.uniform(-0.05, 0.05, size=shape)
        elif name.endswith(".w"):
            limit = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-limit, limit, size=shape)
        else:
            params[name] = np.zeros(shape)
    return params


def zeros_like(params: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: dict) -> dict:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class ForwardCache:
    tokens: np.ndarray
    mask: np.ndarray
    counts: np.ndarray
    layer_inputs: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    head_input: np.ndarray | None = None


def _as_batch(tokens) -> np.ndarray:
    arr = np.asarray(getattr(tokens, "ids", tokens))
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"tokens must be (batch, length), got shape {arr.shape}")
    return arr.astype(np.int64, copy=False)


def forward(params: dict, spec: NetworkSpec, tokens) -> tuple[np.ndarray, ForwardCache]:
    """Q-values of shape (batch, k_max, 2*k_max+1)."""
    tok = _as_batch(tokens)
    if tok.shape[1] != spec.input_length:
        raise ValueError(f"expected input length {spec.input_length}, got {tok.shape[1]}")
    if tok.min(initial=0) < 0 or tok.max(initial=0) >= spec.vocab_size:
        raise ValueError(f"token id out of range [0, {spec.vocab_size})")

    mask = (tok != 0).astype(np.float64)
    emb = params["embedding"][tok] * mask[..., None]
    counts = np.maximum(mask.sum(axis=1), 1.0)
    if spec.pooling == "mean":
        h = emb.sum(axis=1) / counts[:, None]
    else:
        h = emb.reshape(tok.shape[0], -1)

    cache = ForwardCache(tok, mask, counts)
    for i, (_, act) in enumerate(spec.hidden):
        cache.layer_inputs.append(h)
        z = h @ params[f"dense{i}.w"] + params[f"dense{i}.b"]
        cache.pre_activations.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else np.tanh(z)
    cache.head_input = h
    out = h @ params["heads.w"] + params["heads.b"]
    return out.reshape(tok.shape[0], spec.k_max, spec.head_width), cache


def q_values(params: dict, spec: NetworkSpec, tokens) -> np.ndarray:
    return forward(params, spec, tokens)[0]


def backward(params: dict, spec: NetworkSpec, cache: ForwardCache, dq: np.ndarray) -> dict:
    """Gradients of a scalar loss given its gradient ``dq`` w.r.t. the Q-values."""
    batch = cache.tokens.shape[0]
    expected = (batch, spec.k_max, spec.head_width)
    if dq.shape != expected:
        raise ValueError(f"upstream gradient shape {dq.shape} != {expected}")
    grads = {}
    d_out = dq.reshape(batch, -1)
    grads["heads.w"] = cache.head_input.T @ d_out
    grads["heads.b"] = d_out.sum(axis=0)
    dh = d_out @ params["heads.w"].T
    for i in reversed(range(len(spec.hidden))):
        act = spec.hidden[i][1]
        z = cache.pre_activations[i]
        if act == "relu":
            dz = dh * (z > 0)
        else:
            dz = dh * (1.0 - np.tanh(z) ** 2)
        grads[f"dense{i}.w"] = cache.layer_inputs[i].T @ dz
        grads[f"dense{i}.b"] = dz.sum(axis=0)
        dh = dz @ params[f"dense{i}.w"].T

    if spec.pooling == "mean":
        d_emb = (dh / cache.counts[:, None])[:, None, :] * cache.mask[..., None]
    else:
        d_emb = dh.reshape(batch, spec.input_length, spec.embed_dim) * cache.mask[..., None]
    g_emb = np.zeros_like(params["embedding"])
    np.add.at(g_emb, cache.tokens, d_emb)
    grads["embedding"] = g_emb
    return {name: grads[name] for name, _ in param_shapes(spec)}


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict, lr: float = 5e-4, **kw) -> "AdamState":
        return cls(zeros_like(params), zeros_like(params), lr=lr, **kw)


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    for name, g in grads.items():
        if name not in params or g.shape != params[name].shape:
            raise ValueError(f"gradient {name!r} does not match parameters")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name!r}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


# ---------------------------------------------------------------------------
# Model file
#
# layout: MAGIC | u16 version | 32-byte sha256(spec) | u32 header length |
#         header JSON (spec, vocabulary tokens, meta, tensor table) |
#         tensors in declaration order, row-major float64 LE | 32-byte sha256
#         of everything before it


def save_model(path, params: dict, spec: NetworkSpec, vocab_tokens, meta: dict | None = None) -> None:
    shapes = param_shapes(spec)
    header = {
        "spec": spec.to_dict(),
        "vocabulary": list(vocab_tokens),
        "meta": meta or {},
        "tensors": [[name, list(shape)] for name, shape in shapes],
    }
    hjson = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [
        MAGIC,
        struct.pack("<H", FORMAT_VERSION),
        bytes.fromhex(spec.config_hash()),
        struct.pack("<I", len(hjson)),
        hjson,
    ]
    for name, shape in shapes:
        arr = np.asarray(params[name], dtype="<f8")
        if arr.shape != tuple(shape):
            raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name} has non-finite entries")
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    Path(path).write_bytes(body + hashlib.sha256(body).digest())


def load_model(path, expected_spec: NetworkSpec | None = None):
    """Returns ``(params, spec, vocab_tokens, meta)``."""
    blob = Path(path).read_bytes()
    fixed = len(MAGIC) + 2 + 32 + 4
    if len(blob) < fixed + 32 or blob[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file (bad magic or truncated)")
    body, digest = blob[:-32], blob[-32:]
    (version,) = struct.unpack_from("<H", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if hashlib.sha256(body).digest() != digest:
        raise ModelFormatError(f"{path}: checksum mismatch (corrupt or truncated file)")
    stored_hash = blob[len(MAGIC) + 2 : len(MAGIC) + 34].hex()
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC) + 34)
    try:
        header = json.loads(body[fixed : fixed + hlen])
        spec = NetworkSpec.from_dict(header["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFormatError(f"{path}: unreadable header: {exc}") from exc
    if spec.config_hash() != stored_hash:
        raise ModelFormatError(f"{path}: header spec does not match stored config hash")
    if expected_spec is not None and expected_spec.config_hash() != stored_hash:
        diff = {
            k: (v, spec.to_dict().get(k))
            for k, v in expected_spec.to_dict().items()
            if spec.to_dict().get(k) != v
        }
        raise ModelFormatError(f"{path}: network spec mismatch (expected, stored): {diff}")

    params = {}
    offset = fixed + hlen
    for name, shape in param_shapes(spec):
        n = int(np.prod(shape))
        chunk = body[offset : offset + 8 * n]
        if len(chunk) != 8 * n:
            raise ModelFormatError(f"{path}: truncated tensor {name}")
        params[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        offset += 8 * n
    if offset != len(body):
        raise ModelFormatError(f"{path}: {len(body) - offset} trailing bytes")
    return params, spec, header["vocabulary"], header["meta"]
