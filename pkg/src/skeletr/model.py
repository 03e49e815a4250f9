"""End-to-end model: per-sequence GCN backbone, inter-sequence interaction, task heads."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import GcnBackbone, GcnConfig, VARIANTS
from .heads import Head, predict_scores
from .interaction import (
    MODES, BaselineInteraction, Encoder, EncoderConfig, PoolingStreamSet, STEmbedding,
    aggregate_sequence, mix_pool,
)
from .nn import LayerNorm, Module
from .sequencing import ClipSample


@dataclass
class ModelConfig:
    backbone: GcnConfig = field(default_factory=lambda: GcnConfig(**VARIANTS["s"].to_dict()))
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    streams: tuple[str, ...] = ("1x1", "Tx1", "1xP")
    mode: str = "transformer"
    embedding: bool = True
    embed_scale: float = 1e-2  # init bound of the box/time embedding map (near zero by default)
    heads: dict = field(default_factory=lambda: {"video": ["video", 60]})  # name -> [kind, K]
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = GcnConfig(**self.backbone)
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        self.streams = tuple(self.streams)
        self.heads = {k: list(v) for k, v in self.heads.items()}
        if self.mode not in MODES:
            raise ValueError(f"unknown interaction mode {self.mode!r}; expected one of {MODES}")
        if not self.heads:
            raise ValueError("at least one head is required")

    def to_dict(self) -> dict:
        return asdict(self)


def canonical_order(clip: ClipSample) -> list[int]:
    """Real slots sorted by (time, box, content), so results ignore input slot order."""
    real = np.flatnonzero(~clip.pad_mask)
    return sorted(real.tolist(), key=lambda i: (float(clip.norm_time[i]), tuple(clip.bbox[i].tolist()),
                                                clip.data[i].tobytes()))


@dataclass
class Encoded:
    features: T.Tensor  # (B, M, C), real sequences first in canonical order
    pad_mask: np.ndarray  # (B, M)
    order: list[list[int]]  # per clip: original slot of each canonical position
    attention: list | None = None  # per encoder block: (B, H, N, N)
    num_tokens: int = 1


class SkeleTR(Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = GcnBackbone(config.backbone, rng)
        dim = config.backbone.out_channels
        self.dim = dim
        self.streams = PoolingStreamSet(config.streams, num_joints=config.backbone.num_joints)
        self.embed = self.embed_norm = self.encoder = self.baseline = None
        if config.mode == "transformer":
            if config.embedding:
                self.embed = STEmbedding(dim, rng, scale=config.embed_scale)
                self.embed_norm = LayerNorm(dim, config.encoder.eps)
            self.encoder = Encoder(dim, config.encoder, rng)
        else:
            self.baseline = BaselineInteraction(config.mode, dim, rng)
        self.heads = {name: Head(kind, dim, int(k), rng) for name, (kind, k) in config.heads.items()}

    def encode(self, clips: Sequence[ClipSample], return_attention: bool = False) -> Encoded:
        if not clips:
            raise ValueError("encode needs at least one clip")
        order = [canonical_order(c) for c in clips]
        if any(len(o) == 0 for o in order):
            raise ValueError("every clip needs at least one real sequence")
        dtype = T.get_default_dtype()
        x = np.concatenate([c.data[o] for c, o in zip(clips, order)]).astype(dtype, copy=False)
        feats = self.backbone(x)  # (N, T_f, V, C)
        n = feats.shape[0]
        m = max(c.M for c in clips)
        pad = np.ones((len(clips), m), dtype=bool)
        index = np.full((len(clips), m), n)  # row n is the zero row used for padding
        start = 0
        for b, o in enumerate(order):
            pad[b, :len(o)] = False
            index[b, :len(o)] = np.arange(start, start + len(o))
            start += len(o)
        attention = None
        if self.config.mode == "transformer":
            tokens = mix_pool(feats, self.streams)  # (N, L, C)
            length = tokens.shape[1]
            if self.embed is not None:
                bbox = np.concatenate([c.bbox[o] for c, o in zip(clips, order)])
                ntime = np.concatenate([c.norm_time[o] for c, o in zip(clips, order)])
                e = self.embed(bbox, ntime)
                tokens = self.embed_norm(tokens + T.reshape(e, (n, 1, self.dim)))
            tokens = T.concat([tokens, np.zeros((1, length, self.dim), dtype=dtype)], axis=0)
            grid = T.reshape(tokens[index.reshape(-1)], (len(clips), m * length, self.dim))
            token_mask = np.repeat(~pad, length, axis=1)
            out, attention = self.encoder(grid, token_mask, return_attention=True)
            seq = aggregate_sequence(T.reshape(out, (len(clips), m, length, self.dim)), pad)
        else:
            length = 1
            pooled = T.reshape(mix_pool(feats, PoolingStreamSet(("1x1",), num_joints=feats.shape[2])),
                               (n, self.dim))
            pooled = T.concat([pooled, np.zeros((1, self.dim), dtype=dtype)], axis=0)
            seq = self.baseline(T.reshape(pooled[index.reshape(-1)], (len(clips), m, self.dim)), pad)
        return Encoded(seq, pad, order, attention if return_attention else None, length)

    def head(self, name: str | None) -> Head:
        name = name or next(iter(self.heads))
        try:
            return self.heads[name]
        except KeyError:
            raise ValueError(f"unknown head {name!r}; model has {sorted(self.heads)}") from None

    def score(self, enc: Encoded, clips: Sequence[ClipSample], rows: Sequence[int], head: str | None) -> T.Tensor:
        """Logits of ``head`` for the encoded clips at ``rows``: ``(len(rows), K)``."""
        h = self.head(head)
        rows = np.asarray(rows, dtype=int)
        feats = enc.features if len(rows) == enc.features.shape[0] and np.all(rows == np.arange(len(rows))) \
            else enc.features[rows]
        pad = enc.pad_mask[rows]
        if h.kind != "instance":
            return predict_scores(feats, pad, h)
        query = []
        for r in rows:
            c = clips[r]
            if c.query is None:
                raise ValueError(f"clip {c.video_id!r} has no query sequence for the instance head")
            query.append(enc.order[r].index(c.query))
        return predict_scores(feats, pad, h, query)

    def forward(self, clips: Sequence[ClipSample], head: str | None = None) -> T.Tensor:
        """Logits of ``head`` for each clip: ``(B, K)``.  Instance heads score each clip's query."""
        self.head(head)
        return self.score(self.encode(clips), clips, range(len(clips)), head)

    def sequence_scores(self, clip: ClipSample, head: str) -> np.ndarray:
        """Per-real-sequence logits of an instance head, in the clip's own slot order."""
        h = self.heads[head]
        enc = self.encode([clip])
        rows = predict_scores(enc.features, enc.pad_mask, h).data
        out = np.zeros((clip.M, h.num_classes))
        out[enc.order[0]] = rows
        return out[~clip.pad_mask]


def attention_export(model: SkeleTR, clip: ClipSample) -> dict:
    """Row-stochastic attention maps over the real tokens, per encoder block and head."""
    if model.encoder is None:
        raise ValueError("attention export needs the transformer interaction mode")
    enc = model.encode([clip], return_attention=True)
    length = enc.num_tokens
    order = enc.order[0]
    labels = [{"slot": int(s), "key_frame": int(clip.key_frame[s]), "token": j}
              for s in order for j in range(length)]
    keep = np.repeat(~enc.pad_mask[0], length)
    layers = [[a.data[0, h][np.ix_(keep, keep)] for h in range(a.shape[1])] for a in enc.attention]
    return {"labels": labels, "layers": layers}
