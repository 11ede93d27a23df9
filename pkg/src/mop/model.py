"""LLaMA-style decoder: pre-norm RMSNorm, rotary attention, SwiGLU MLP, untied head."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor

PROJECTIONS = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")
INIT_STD = 0.02
NORM_EPS = 1e-5


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int = 256
    d_head: int | None = None
    rope_theta: float = 10000.0

    def __post_init__(self):
        if self.d_head is None and self.n_heads > 0:
            self.d_head = self.d_model // self.n_heads

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "d_ff", "vocab_size", "max_seq_len", "d_head"):
            if getattr(self, name) is None or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        # Pruning needs >= 3 layers; that is checked where pruning starts, so
        # micro models used for oracles may be shallower.
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigError(
                f"d_model ({self.d_model}) != n_heads ({self.n_heads}) * d_head ({self.d_head})"
            )
        if self.d_head % 2:
            raise ConfigError("d_head must be even for rotary encoding")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TransformerLayer:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor
    norm_attn: Tensor
    norm_mlp: Tensor
    d_head: int
    adapters: dict = field(default_factory=dict)

    @property
    def n_heads(self) -> int:
        return self.wq.shape[1] // self.d_head

    @property
    def d_ff(self) -> int:
        return self.w_gate.shape[1]

    def named_tensors(self):
        for name in PROJECTIONS:
            yield name, getattr(self, name)
        yield "norm_attn", self.norm_attn
        yield "norm_mlp", self.norm_mlp

    def project(self, name: str, x: Tensor) -> Tensor:
        w = getattr(self, name)
        adapter = self.adapters.get(name)
        if adapter is not None:
            # W + s*A@B is d_in x d_out, so one full-size GEMM serves both paths;
            # gradients still reach only A and B since W is frozen
            w = w + adapter.a @ (adapter.b * adapter.scaling)
        return x @ w


class TransformerModel:
    def __init__(self, config: ModelConfig, embedding: Tensor, layers: list[TransformerLayer],
                 final_norm: Tensor, lm_head: Tensor):
        self.config = config
        self.embedding = embedding
        self.layers = layers
        self.final_norm = final_norm
        self.lm_head = lm_head

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def dtype(self):
        return self.embedding.dtype

    def named_parameters(self):
        """Base weights in a fixed order (adapters excluded)."""
        yield "embedding", self.embedding
        for i, layer in enumerate(self.layers):
            for name, t in layer.named_tensors():
                yield f"layers.{i}.{name}", t
        yield "final_norm", self.final_norm
        yield "lm_head", self.lm_head

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def copy(self) -> "TransformerModel":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "TransformerModel":
        out = self.copy()
        for _, t in out.named_parameters():
            t.data = t.data.astype(dtype)
        for layer in out.layers:
            for ad in layer.adapters.values():
                ad.a.data = ad.a.data.astype(dtype)
                ad.b.data = ad.b.data.astype(dtype)
        return out

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None

    def __call__(self, tokens, capture=None) -> Tensor:
        return forward(self, tokens, capture=capture)


def init_model(config: ModelConfig, seed: int) -> TransformerModel:
    config.validate()
    rng = np.random.default_rng(seed)
    dtype = T.get_default_dtype()
    d, hd, f = config.d_model, config.n_heads * config.d_head, config.d_ff

    def normal(*shape):
        return Tensor(rng.normal(0.0, INIT_STD, size=shape).astype(dtype))

    def ones(n):
        return Tensor(np.ones(n, dtype=dtype))

    embedding = normal(config.vocab_size, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(TransformerLayer(
            wq=normal(d, hd), wk=normal(d, hd), wv=normal(d, hd), wo=normal(hd, d),
            w_gate=normal(d, f), w_up=normal(d, f), w_down=normal(f, d),
            norm_attn=ones(d), norm_mlp=ones(d), d_head=config.d_head,
        ))
    return TransformerModel(config, embedding, layers, ones(d), normal(d, config.vocab_size))


@lru_cache(maxsize=64)
def _rope_tables(n: int, d_head: int, theta: float, dtype_str: str):
    inv = 1.0 / theta ** (np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    ang = np.outer(np.arange(n, dtype=np.float64), inv)
    ang = np.concatenate([ang, ang], axis=-1)
    return np.cos(ang).astype(dtype_str), np.sin(ang).astype(dtype_str)


@lru_cache(maxsize=64)
def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def _check_tokens(model: TransformerModel, tokens) -> np.ndarray:
    ids = np.asarray(tokens)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("token ids must be integers")
    if ids.ndim not in (1, 2) or ids.shape[-1] == 0:
        raise InputError(f"expected tokens of shape [T] or [B, T], got {ids.shape}")
    if ids.shape[-1] > model.config.max_seq_len:
        raise InputError(f"sequence length {ids.shape[-1]} exceeds max_seq_len {model.config.max_seq_len}")
    if ids.min() < 0 or ids.max() >= model.config.vocab_size:
        raise InputError(f"token id out of range [0, {model.config.vocab_size})")
    return ids


def attention(layer: TransformerLayer, x: Tensor, cos, sin, mask, capture=None) -> Tensor:
    b, n, _ = x.shape
    h, dh = layer.n_heads, layer.d_head

    def heads(t):
        return t.reshape(b, n, h, dh).transpose(0, 2, 1, 3)

    q = T.rope(heads(layer.project("wq", x)), cos, sin)
    k = T.rope(heads(layer.project("wk", x)), cos, sin)
    v = heads(layer.project("wv", x))
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
    probs = T.softmax_rows(scores, mask)
    out = probs @ v  # [b, h, n, dh]
    if capture is not None:
        capture["heads"] = out.data
    merged = out.transpose(0, 2, 1, 3).reshape(b, n, h * dh)
    return layer.project("wo", merged)


def mlp(layer: TransformerLayer, x: Tensor, capture=None) -> Tensor:
    act = T.silu(layer.project("w_gate", x)) * layer.project("w_up", x)
    if capture is not None:
        capture["neurons"] = act.data
    return layer.project("w_down", act)


def forward(model: TransformerModel, tokens, capture: list | None = None) -> Tensor:
    """Logits of shape [T, V] for 1-D tokens, [B, T, V] for a batch.

    When ``capture`` is a list, one dict per layer is appended holding the
    per-head attention outputs before ``wo`` and the gated MLP activations.
    """
    ids = _check_tokens(model, tokens)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
    n = ids.shape[1]
    cos, sin = _rope_tables(n, model.config.d_head, float(model.config.rope_theta), model.dtype.str)
    mask = _causal_mask(n)
    x = T.embedding(model.embedding, ids)
    for layer in model.layers:
        rec = {} if capture is not None else None
        x = x + attention(layer, T.rmsnorm(x, layer.norm_attn, NORM_EPS), cos, sin, mask, rec)
        x = x + mlp(layer, T.rmsnorm(x, layer.norm_mlp, NORM_EPS), rec)
        if capture is not None:
            capture.append(rec)
    logits = T.rmsnorm(x, model.final_norm, NORM_EPS) @ model.lm_head
    if single:
        logits = logits.reshape(n, model.config.vocab_size)
    return logits


def logits_numpy(model: TransformerModel, tokens) -> np.ndarray:
    with T.no_grad():
        return forward(model, tokens).data


def generate(model: TransformerModel, prompt, n_new: int) -> list[int]:
    """Greedy decoding with full recompute per step; ties go to the lowest id."""
    ids = [int(t) for t in prompt]
    if not ids:
        raise InputError("prompt must be non-empty")
    if n_new < 0 or len(ids) + n_new > model.config.max_seq_len:
        raise InputError(
            f"prompt ({len(ids)}) + n_new ({n_new}) exceeds max_seq_len {model.config.max_seq_len}"
        )
    with T.no_grad():
        for _ in range(n_new):
            logits = forward(model, np.asarray(ids, dtype=np.int64)).data
            ids.append(int(np.argmax(logits[-1])))
    return ids


def weights_digest(model: TransformerModel) -> str:
    """SHA-256 over parameter names, shapes and raw bytes."""
    h = hashlib.sha256()
    for name, t in model.named_parameters():
        h.update(name.encode())
        h.update(str(t.shape).encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
