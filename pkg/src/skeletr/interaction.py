"""Inter-sequence modeling: Mix Pooling, spatial-temporal embedding and a masked Transformer.

Tokens of one clip are laid out sequence-major: ``(B, M, L, C)`` reshaped to
``(B, M*L, C)``.  A boolean token mask marks the tokens of real sequences;
masked tokens carry zeros, receive zero attention weight and are zeroed on
output.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .data import COCO_PARTS
from .nn import LayerNorm, Linear, Module

DEFAULT_PARTS = tuple(tuple(v) for v in COCO_PARTS.values())
STREAM_KINDS = ("1x1", "Tx1", "1xP", "TxP", "1xV", "TxV")
DEFAULT_STREAMS = ("1x1", "Tx1", "1xP")
BASELINE_MODES = ("na", "add_global", "concat_global", "nonlocal")
MODES = ("transformer",) + BASELINE_MODES


@dataclass(frozen=True)
class PoolingStreamSet:
    """Ordered pooling streams; ``"AxB"`` reduces time to A and joints to B."""

    streams: tuple[str, ...] = DEFAULT_STREAMS
    parts: tuple[tuple[int, ...], ...] = DEFAULT_PARTS
    num_joints: int = 17

    def __post_init__(self):
        object.__setattr__(self, "streams", tuple(self.streams))
        object.__setattr__(self, "parts", tuple(tuple(p) for p in self.parts))
        if not self.streams:
            raise ValueError("at least one pooling stream is required")
        for s in self.streams:
            if s not in STREAM_KINDS:
                raise ValueError(f"unknown pooling stream {s!r}; expected one of {STREAM_KINDS}")
        flat = [j for p in self.parts for j in p]
        missing = sorted(set(range(self.num_joints)) - set(flat))
        if missing:
            raise ValueError(f"joints {missing} are missing from the part map")
        if len(flat) != len(set(flat)) or max(flat) >= self.num_joints or min(flat) < 0:
            raise ValueError("every joint must belong to exactly one part")

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    def stream_size(self, stream: str, t_f: int) -> int:
        a, b = stream.split("x")
        a = t_f if a == "T" else 1
        b = {"1": 1, "P": self.num_parts, "V": self.num_joints}[b]
        return a * b

    def token_count(self, t_f: int) -> int:
        return sum(self.stream_size(s, t_f) for s in self.streams)


def mix_pool(x, streams: PoolingStreamSet = PoolingStreamSet()) -> T.Tensor:
    """Mean-pool ``(M, T_f, V, C)`` features into ``(M, L, C)`` tokens, streams in order."""
    x = T.as_tensor(x)
    m, t_f, v, c = x.shape
    if v != streams.num_joints:
        raise ValueError(f"features have {v} joints but the part map covers {streams.num_joints}")
    out = []
    for s in streams.streams:
        a, b = s.split("x")
        if b == "P":
            parts = [T.mean(x[:, :, list(p), :], axis=2, keepdims=True) for p in streams.parts]
            y = T.concat(parts, axis=2)  # (M, T_f, P, C)
        elif b == "1":
            y = T.mean(x, axis=2, keepdims=True)
        else:
            y = x
        if a == "1":
            y = T.mean(y, axis=1, keepdims=True)
        out.append(T.reshape(y, (m, y.shape[1] * y.shape[2], c)))
    return T.concat(out, axis=1)


class STEmbedding(Module):
    """Affine map of (x_min, y_min, x_max, y_max, norm_time) to a C-vector."""

    def __init__(self, dim: int, rng: np.random.Generator, scale: float = 1e-2):
        super().__init__()
        self.proj = Linear(5, dim, rng, scale=scale)

    def forward(self, bbox, norm_time):
        bbox = np.asarray(bbox, dtype=T.get_default_dtype()).reshape(-1, 4)
        t = np.asarray(norm_time, dtype=bbox.dtype).reshape(-1, 1)
        return self.proj(np.concatenate([bbox, t], axis=1))


@dataclass
class EncoderConfig:
    depth: int = 2
    heads: int = 8
    head_dim: int | None = None  # defaults to C // 2
    ffn_mult: int = 2
    eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 0 or self.heads < 1 or self.ffn_mult < 1:
            raise ValueError("encoder depth must be >= 0 and heads, ffn_mult >= 1")

    def resolve_head_dim(self, dim: int) -> int:
        if self.head_dim is not None:
            return self.head_dim
        if dim % 2:
            raise ValueError(f"model width must be even, got {dim}")
        return dim // 2

    def to_dict(self) -> dict:
        return asdict(self)


def _key_mask(token_mask: np.ndarray) -> np.ndarray:
    """(B, N) token mask -> (B, 1, 1, N) mask over attention keys."""
    return token_mask[:, None, None, :]


class EncoderBlock(Module):
    """Post-layernorm block: masked multi-head attention, add, norm, FFN, add, norm."""

    def __init__(self, dim: int, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.dim, self.heads = dim, config.heads
        self.head_dim = config.resolve_head_dim(dim)
        width = self.heads * self.head_dim
        self.q = Linear(dim, width, rng)
        self.k = Linear(dim, width, rng)
        self.v = Linear(dim, width, rng)
        self.out = Linear(width, dim, rng)
        self.norm1 = LayerNorm(dim, config.eps)
        self.ffn1 = Linear(dim, config.ffn_mult * dim, rng)
        self.ffn2 = Linear(config.ffn_mult * dim, dim, rng)
        self.norm2 = LayerNorm(dim, config.eps)

    def _split(self, y, b, n):
        return T.transpose(T.reshape(y, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def attention(self, x, token_mask):
        """Return (attended values (B, N, C), attention weights (B, H, N, N))."""
        b, n, _ = x.shape
        q, k, v = (self._split(lin(x), b, n) for lin in (self.q, self.k, self.v))
        with T.flop_scope("attention"):
            scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
            attn = T.softmax(T.mul(scores, 1.0 / np.sqrt(self.head_dim)), mask=_key_mask(token_mask))
            ctx = T.matmul(attn, v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, n, self.heads * self.head_dim))
        return self.out(ctx), attn

    def forward(self, x, token_mask, return_attention: bool = False):
        keep = token_mask[..., None].astype(x.data.dtype)
        a, attn = self.attention(x, token_mask)
        x = T.mul(self.norm1(x + a), keep)
        x = T.mul(self.norm2(x + self.ffn2(T.relu(self.ffn1(x)))), keep)
        return (x, attn) if return_attention else x


class Encoder(Module):
    def __init__(self, dim: int, config: EncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.blocks = [EncoderBlock(dim, config, rng) for _ in range(config.depth)]

    def forward(self, x, token_mask, return_attention: bool = False):
        """``x`` (B, N, C) tokens, ``token_mask`` (B, N) True for real tokens."""
        token_mask = np.asarray(token_mask, dtype=bool)
        if token_mask.shape != x.shape[:2]:
            raise ValueError(f"token mask {token_mask.shape} does not match tokens {x.shape[:2]}")
        if not token_mask.any(axis=1).all():
            raise ValueError("every clip needs at least one unmasked token")
        x = T.mul(x, token_mask[..., None].astype(x.data.dtype))
        maps = []
        for block in self.blocks:
            x, attn = block(x, token_mask, return_attention=True)
            maps.append(attn)
        return (x, maps) if return_attention else x


def aggregate_sequence(tokens, pad_mask=None) -> T.Tensor:
    """Mean over the L tokens of each sequence: ``(..., M, L, C)`` -> ``(..., M, C)``."""
    out = T.mean(tokens, axis=-2)
    if pad_mask is not None:
        keep = (~np.asarray(pad_mask, dtype=bool))[..., None].astype(out.data.dtype)
        out = T.mul(out, keep)
    return out


def masked_mean(x, pad_mask) -> T.Tensor:
    """Mean over the real sequences of ``(B, M, C)``; returns ``(B, C)``."""
    real = (~np.asarray(pad_mask, dtype=bool)).astype(x.data.dtype)
    counts = real.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every clip needs at least one unmasked sequence")
    weights = (real / counts[:, None])[..., None]
    return T.sum_(T.mul(x, weights), axis=1)


class MLP(Module):
    def __init__(self, din: int, dhidden: int, dout: int, rng, zero_out: bool = False):
        super().__init__()
        self.fc1 = Linear(din, dhidden, rng)
        self.fc2 = Linear(dhidden, dout, rng)
        if zero_out:
            self.fc2.weight.data[...] = 0
            self.fc2.bias.data[...] = 0

    def forward(self, x):
        return self.fc2(T.relu(self.fc1(x)))


class BaselineInteraction(Module):
    """Interaction baselines over globally pooled sequence features ``(B, M, C)``."""

    def __init__(self, mode: str, dim: int, rng: np.random.Generator, zero_out: bool = True):
        super().__init__()
        if mode not in BASELINE_MODES:
            raise ValueError(f"unknown interaction mode {mode!r}; expected one of {BASELINE_MODES}")
        self.mode = mode
        self.mlp = None
        if mode == "add_global":
            self.mlp = MLP(dim, dim, dim, rng, zero_out=zero_out)
        elif mode == "concat_global":
            self.mlp = MLP(2 * dim, dim, dim, rng)
        elif mode == "nonlocal":
            self.q, self.k, self.v = Linear(dim, dim, rng), Linear(dim, dim, rng), Linear(dim, dim, rng)
            self.mlp = MLP(dim, dim, dim, rng, zero_out=zero_out)
            self.scale = 1.0 / np.sqrt(dim)

    def forward(self, x, pad_mask):
        pad_mask = np.asarray(pad_mask, dtype=bool)
        keep = (~pad_mask)[..., None].astype(x.data.dtype)
        if self.mode == "na":
            return x
        if self.mode == "add_global":
            g = self.mlp(masked_mean(x, pad_mask))
            out = x + T.reshape(g, (g.shape[0], 1, g.shape[1]))
        elif self.mode == "concat_global":
            g = masked_mean(x, pad_mask)
            g = T.mul(T.reshape(g, (g.shape[0], 1, g.shape[1])), np.ones((1, x.shape[1], 1)))
            out = self.mlp(T.concat([x, g], axis=-1))
        else:
            scores = T.matmul(self.q(x), T.transpose(self.k(x), (0, 2, 1)))
            attn = T.softmax(T.mul(scores, self.scale), mask=(~pad_mask)[:, None, :])
            y = x + T.matmul(attn, self.v(x))
            out = y + self.mlp(y)
        return T.mul(out, keep)


def attention_flops(m: int, length: int, dim: int, config: EncoderConfig) -> int:
    """Multiply-accumulates of the score and weighted-sum matmuls over all blocks."""
    n = m * length
    width = config.heads * config.resolve_head_dim(dim)
    return config.depth * 2 * n * n * width


def head_flops(m: int, t_f: int, dim: int, config: EncoderConfig,
               streams: PoolingStreamSet = PoolingStreamSet()) -> dict:
    """Closed-form head multiply-accumulates for one clip of M sequences."""
    length = streams.token_count(t_f)
    n = m * length
    width = config.heads * config.resolve_head_dim(dim)
    hidden = config.ffn_mult * dim
    embed = m * 5 * dim
    proj = config.depth * (3 * n * dim * width + n * width * dim)
    ffn = config.depth * 2 * n * dim * hidden
    attn = attention_flops(m, length, dim, config)
    return {"embedding": embed, "projections": proj, "ffn": ffn, "attention": attn,
            "pooling": 0, "total": embed + proj + ffn + attn, "tokens": length}
