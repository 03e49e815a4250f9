"""Task heads, classification losses and late fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .interaction import masked_mean
from .nn import Linear, Module

HEAD_KINDS = ("video", "instance", "group")
LOSS_KINDS = ("ce", "bce")


class Head(Module):
    """Affine classifier over sequence features ``(B, M, C)``.

    Video and group heads average the real sequences first; the instance head
    scores sequences individually.
    """

    def __init__(self, kind: str, dim: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head {kind!r}; expected one of {HEAD_KINDS}")
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.kind, self.num_classes = kind, num_classes
        self.fc = Linear(dim, num_classes, rng)

    def forward(self, features, pad_mask, query=None):
        return predict_scores(features, pad_mask, self, query)


def predict_scores(features, pad_mask, head: Head, query=None) -> T.Tensor:
    """Video/group: ``(B, K)``.  Instance: ``(B, K)`` for the query slots when
    ``query`` is given, else one row per real sequence, batch-major."""
    features = T.as_tensor(features)
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if head.kind in ("video", "group"):
        return head.fc(masked_mean(features, pad_mask))
    b, m, c = features.shape
    flat = T.reshape(features, (b * m, c))
    if query is not None:
        query = np.asarray(query, dtype=int).reshape(b)
        if np.any(pad_mask[np.arange(b), query]):
            raise ValueError("query slot points at a padded sequence")
        rows = np.arange(b) * m + query
    else:
        rows = np.flatnonzero(~pad_mask.reshape(-1))
    return head.fc(flat[rows])


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")
        if not self.weight > 0:
            raise ValueError("loss weight must be > 0")


def cross_entropy(logits, labels) -> T.Tensor:
    """Mean of ``-log softmax(logits)[label]`` over rows."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = -1.0 / n
    return T.sum_(T.mul(T.log_softmax(logits, axis=-1), onehot))


def binary_cross_entropy(logits, targets) -> T.Tensor:
    """Per-class sigmoid cross entropy averaged over classes and rows."""
    logits = T.as_tensor(logits)
    targets = np.asarray(targets, dtype=logits.data.dtype)
    if targets.shape != logits.shape:
        raise ValueError(f"targets {targets.shape} do not match logits {logits.shape}")
    if np.any((targets < 0) | (targets > 1)):
        raise ValueError("binary targets must lie in [0, 1]")
    # softplus(z) - y z == -(y log s(z) + (1 - y) log(1 - s(z)))
    per = T.softplus(logits) - T.mul(logits, targets)
    return T.mean(per)


def compute_loss(scores, labels, spec: LossSpec = LossSpec()) -> T.Tensor:
    loss = cross_entropy(scores, labels) if spec.kind == "ce" else binary_cross_entropy(scores, labels)
    return loss if spec.weight == 1.0 else T.mul(loss, spec.weight)


def joint_loss(ce_part, bce_part, lam: float = 100.0) -> T.Tensor:
    """Mixed-batch objective: CE over CE samples plus ``lam`` times BCE over BCE samples."""
    if not lam > 0:
        raise ValueError("lambda must be > 0")
    return T.add(ce_part, T.mul(bce_part, lam))


def to_probabilities(scores: np.ndarray, multilabel: bool = False) -> np.ndarray:
    scores = np.asarray(scores, dtype=float)
    return T.sigmoid_np(scores) if multilabel else T.softmax_np(scores, axis=-1)


def late_fuse(scores_a, scores_b, ratio: tuple[float, float] = (2.0, 1.0)) -> np.ndarray:
    """Weighted average ``(a s_a + b s_b) / (a + b)`` of probability-space scores."""
    sa, sb = np.asarray(scores_a, dtype=float), np.asarray(scores_b, dtype=float)
    if sa.shape[-1] != sb.shape[-1]:
        raise ValueError(f"class counts differ: {sa.shape[-1]} vs {sb.shape[-1]}")
    a, b = ratio
    if a < 0 or b < 0 or a + b <= 0:
        raise ValueError("fusion weights must be non-negative with a positive sum")
    return (a * sa + b * sb) / (a + b)
