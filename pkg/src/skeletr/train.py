"""Training loop, evaluation metrics, sliding-window inference, statistics and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .backbone import count_macs as backbone_macs, count_parameters
from .data import Proposal, VideoRecord
from .heads import LossSpec, compute_loss
from .interaction import EncoderConfig, PoolingStreamSet, head_flops
from .model import ModelConfig, SkeleTR
from .sequencing import ClipSample, MPolicy, SkeletonSequence, iou, sample_sequences, select_m

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
REDUCTIONS = ("dataset", "item")


class TrainingDiverged(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    """One training/evaluation item: a video's sequences plus its target."""
    sequences: list[SkeletonSequence]
    label: object  # class id (single-label) or multi-hot vector (multi-label)
    query: int | None = None
    video_id: str = ""

    def clip(self, policy: MPolicy, rng=None, mode: str = "test", m: int | None = None) -> ClipSample:
        return select_m(self.sequences, policy, rng, mode=mode, m=m, label=self.label, keep=self.query,
                        video_id=self.video_id)


def find_query(seqs: Sequence[SkeletonSequence], frame: int, bbox) -> int:
    """Sequence anchored nearest to ``frame`` whose key-frame box best overlaps ``bbox``."""
    if not seqs:
        raise ValueError("no sequences to anchor the proposal")
    gap = min(abs(s.key_frame - frame) for s in seqs)
    cands = [i for i, s in enumerate(seqs) if abs(s.key_frame - frame) == gap]
    best = max(cands, key=lambda i: (iou(seqs[i].center_bbox, bbox), -i))
    if iou(seqs[best].center_bbox, bbox) <= 0:
        raise ValueError(f"no sequence near frame {frame} overlaps the proposal box")
    return best


def prepare_samples(records: Sequence[VideoRecord], T_len: int, iou_threshold: float = 0.3) -> list[Sample]:
    """Video/group records give one sample each; instance records one per proposal."""
    out = []
    for rec in records:
        seqs = sample_sequences(rec, T_len, iou_threshold)
        if not seqs:
            log.warning("video %s has no skeletons; skipped", rec.video_id)
            continue
        if rec.task == "instance":
            for p in rec.proposals:
                out.append(Sample(seqs, rec.multilabel(p), find_query(seqs, p.frame_index, p.bbox),
                                  f"{rec.video_id}@{p.frame_index}"))
        else:
            out.append(Sample(seqs, int(rec.label), None, rec.video_id))
    return out


@dataclass
class TaskData:
    """A named dataset bound to a model head and a loss."""
    name: str
    train: list[Sample]
    val: list[Sample] = field(default_factory=list)
    head: str = "video"
    loss: LossSpec = field(default_factory=LossSpec)

    def __post_init__(self):
        if not self.train:
            raise ValueError(f"dataset {self.name!r} has no training samples")


# ---------------------------------------------------------------------------
# optimization


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    base_lr: float = 0.1
    lr_decay: float = 0.1
    milestones: tuple[int, ...] = (60, 80)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float | None = 40.0
    seed: int = 0
    T: int = 16
    m_min: int = 2
    m_max: int = 20
    iou_threshold: float = 0.3
    # mixed batches: "dataset" sums each dataset's weighted mean loss (CE + lambda * BCE);
    # "item" averages weighted per-item losses over the whole batch
    reduction: str = "dataset"

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}; expected one of {REDUCTIONS}")
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError("milestones must be strictly increasing")
        if any(m >= self.epochs or m < 1 for m in self.milestones):
            raise ValueError("milestones must lie in [1, epochs)")
        if self.base_lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ValueError("base_lr must be > 0 and lr_decay in (0, 1]")

    @property
    def policy(self) -> MPolicy:
        return MPolicy(self.m_min, self.m_max)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch."""
        return self.base_lr * self.lr_decay ** sum(epoch >= m for m in self.milestones)

    def to_dict(self) -> dict:
        return asdict(self)


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _grad_norm(params) -> float:
    return math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))


def interleave(sizes: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[tuple[int, int]]]:
    """Mixed batches with each dataset's share fixed in proportion to its size.

    Returns batches of (dataset, item) pairs; every item appears once per epoch.
    """
    total = sum(sizes)
    n_batches = max(1, math.ceil(total / batch_size))
    orders = [rng.permutation(n) for n in sizes]
    batches = []
    for j in range(n_batches):
        batch = []
        for d, n in enumerate(sizes):
            lo, hi = (j * n) // n_batches, ((j + 1) * n) // n_batches
            batch.extend((d, int(i)) for i in orders[d][lo:hi])
        if batch:
            batches.append(batch)
    return batches


def batch_loss(model: SkeleTR, tasks: Sequence[TaskData], items: Sequence[tuple[int, Sample]],
               clips: Sequence[ClipSample], reduction: str = "dataset") -> tuple[T.Tensor, dict[str, float]]:
    """Loss of a mixed batch; ``parts`` holds each dataset's weighted mean loss on its own items.

    ``dataset``: sum of the parts.  ``item``: each part scaled by its share of the
    batch, so a dataset's gradient per epoch does not depend on what it is mixed with.
    """
    enc = model.encode(clips)
    total, parts = None, {}
    for d, task in enumerate(tasks):
        rows = [i for i, (dd, _) in enumerate(items) if dd == d]
        if not rows:
            continue
        scores = model.score(enc, clips, rows, task.head)
        labels = np.stack([np.asarray(items[r][1].label) for r in rows])
        loss = compute_loss(scores, labels, task.loss)
        parts[task.name] = loss.item()
        if reduction == "item" and len(rows) < len(items):
            loss = loss * (len(rows) / len(items))
        total = loss if total is None else total + loss
    return total, parts


def evaluate_loss(model: SkeleTR, task: TaskData, samples: Sequence[Sample], policy: MPolicy) -> float:
    """Unweighted mean loss of ``task`` over ``samples`` in eval mode."""
    scores = predict(model, samples, task.head, policy)
    return _loss_from_scores(scores, samples, task)


def _loss_from_scores(scores: np.ndarray, samples: Sequence[Sample], task: TaskData) -> float:
    labels = np.stack([np.asarray(s.label) for s in samples])
    return compute_loss(scores, labels, LossSpec(task.loss.kind)).item()


@dataclass
class TrainResult:
    curves: list[dict]
    final_lr: float

    def losses(self, split: str) -> list[float]:
        return [r["loss"] for r in self.curves if r["split"] == split]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["epoch", "split", "loss", "metric"])
            w.writeheader()
            for r in self.curves:
                w.writerow(r)


def train(config: TrainConfig, model: SkeleTR, tasks: Sequence[TaskData],
          on_epoch: Callable[[int, list[dict]], None] | None = None) -> TrainResult:
    """Train ``model`` in place on one or more datasets with mixed batches.

    Per-epoch rows: ``train:<name>`` (mean batch loss, weighted as trained) and
    ``val:<name>`` (unweighted loss, top-1 or mAP as metric) for each dataset.
    """
    if not tasks:
        raise ValueError("train needs at least one dataset")
    rng = np.random.default_rng(config.seed)
    policy = config.policy
    opt = SGD(model.parameters(), config.base_lr, config.momentum, config.weight_decay)
    curves: list[dict] = []
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        model.train()
        sums = {t.name: [0.0, 0] for t in tasks}
        batches = interleave([len(t.train) for t in tasks], config.batch_size, rng)
        for step, batch in enumerate(batches):
            m = policy.draw(rng)
            items = [(d, tasks[d].train[i]) for d, i in batch]
            clips = [s.clip(policy, rng, mode="train", m=m) for _, s in items]
            with T.Tape() as tape:
                loss, parts = batch_loss(model, tasks, items, clips, config.reduction)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step} (lr {opt.lr:g}): "
                                       f"parts {parts}")
            opt.zero_grad()
            tape.backward(loss)
            norm = _grad_norm(opt.params)
            if not np.isfinite(norm):
                raise TrainingDiverged(f"non-finite gradient at epoch {epoch} step {step}: parts {parts}")
            if config.grad_clip is not None and norm > config.grad_clip:
                for p in opt.params:
                    if p.grad is not None:
                        p.grad *= config.grad_clip / norm
            opt.step()
            for name, v in parts.items():
                n = sum(1 for d, _ in batch if tasks[d].name == name)
                sums[name][0] += v * n
                sums[name][1] += n
        rows = []
        for t in tasks:
            s, n = sums[t.name]
            rows.append({"epoch": epoch, "split": f"train:{t.name}", "loss": s / max(n, 1), "metric": ""})
            if t.val:
                multilabel = t.loss.kind == "bce"
                scores = predict(model, t.val, t.head, policy)
                report = report_from_scores(scores, np.stack([np.asarray(s.label) for s in t.val]), multilabel)
                vloss = _loss_from_scores(scores, t.val, t)
                metric = report.mAP if t.loss.kind == "bce" else report.top1
                rows.append({"epoch": epoch, "split": f"val:{t.name}", "loss": vloss, "metric": metric})
        curves.extend(rows)
        log.info("epoch %d lr %g %s", epoch, opt.lr,
                 " ".join(f"{r['split']}={r['loss']:.4f}" for r in rows))
        if on_epoch is not None:
            on_epoch(epoch, rows)
    model.eval()
    return TrainResult(curves, opt.lr)


# ---------------------------------------------------------------------------
# metrics


def rank_classes(scores: np.ndarray) -> np.ndarray:
    """Class indices by descending score; ties go to the lower class index."""
    return np.argsort(-np.asarray(scores), axis=-1, kind="stable")


def topk_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    ranks = rank_classes(scores)[:, :k]
    return float(np.mean([labels[i] in ranks[i] for i in range(len(labels))]))


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the precision-recall curve with all-points interpolation."""
    scores, positives = np.asarray(scores, float), np.asarray(positives, bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, len(hits) + 1)
    recall = tp / n_pos
    # precision envelope: best precision at any recall >= the current one
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


@dataclass
class EvalReport:
    top1: float = float("nan")
    top5: float = float("nan")
    per_class_ap: list[float] = field(default_factory=list)
    mAP: float = float("nan")
    category_mAP: dict[str, float] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def report_from_scores(scores: np.ndarray, labels, multilabel: bool = False,
                       categories: dict[str, Sequence[int]] | None = None) -> EvalReport:
    scores = np.asarray(scores, float)
    k = scores.shape[1]
    if multilabel:
        targets = np.asarray(labels, bool)
    else:
        labels = np.asarray(labels, int)
        targets = np.zeros_like(scores, dtype=bool)
        targets[np.arange(len(labels)), labels] = True
    aps = [average_precision(scores[:, c], targets[:, c]) for c in range(k)]
    valid = [a for a in aps if not math.isnan(a)]
    rep = EvalReport(per_class_ap=aps, mAP=float(np.mean(valid)) if valid else float("nan"))
    for name, cls in (categories or {}).items():
        vals = [aps[c] for c in cls if not math.isnan(aps[c])]
        rep.category_mAP[name] = float(np.mean(vals)) if vals else float("nan")
    if not multilabel:
        rep.top1 = topk_accuracy(scores, labels, 1)
        rep.top5 = topk_accuracy(scores, labels, min(5, k))
        pred = rank_classes(scores)[:, 0]
        conf = np.zeros((k, k), int)
        np.add.at(conf, (labels, pred), 1)
        rep.confusion = conf.tolist()
    return rep


def predict(model: SkeleTR, samples: Sequence[Sample], head: str, policy: MPolicy,
            batch_size: int = 32) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        out = []
        for i in range(0, len(samples), batch_size):
            out.append(model([s.clip(policy) for s in samples[i:i + batch_size]], head=head).data)
        return np.concatenate(out)
    finally:
        model.train(was)


def evaluate(model: SkeleTR, samples: Sequence[Sample], head: str, policy: MPolicy,
             multilabel: bool = False, categories=None) -> EvalReport:
    """Side-effect-free evaluation in eval mode (running statistics are left untouched)."""
    scores = predict(model, samples, head, policy)
    labels = np.stack([np.asarray(s.label) for s in samples])
    return report_from_scores(scores, labels, multilabel, categories)


# ---------------------------------------------------------------------------
# sliding-window inference


def window_starts(num_frames: int, fps: float, window_len: float, step: float = 1.0) -> tuple[list[int], int]:
    """Start frames of windows fully inside the video, ``step`` seconds apart."""
    w = int(round(window_len * fps))
    s = int(round(step * fps))
    if w < 1 or s < 1:
        raise ValueError("window length and step must each span at least one frame")
    if w > num_frames:
        return [], w
    return list(range(0, num_frames - w + 1, s)), w


def crop_video(video: VideoRecord, start: int, stop: int) -> VideoRecord:
    frames = [[dataclasses.replace(sk, frame_index=t - start) for sk in video.frames[t]]
              for t in range(start, stop)]
    props = [dataclasses.replace(p, frame_index=p.frame_index - start) for p in video.proposals
             if start <= p.frame_index < stop]
    return dataclasses.replace(video, num_frames=stop - start, frames=frames, proposals=props)


def sliding_window_infer(score_fn: Callable[[VideoRecord, Proposal], np.ndarray], video: VideoRecord,
                         window_len: float, step: float = 1.0,
                         proposals: Sequence[Proposal] | None = None) -> list[dict]:
    """Average each proposal's scores over every window that contains its key frame.

    ``score_fn(window_video, local_proposal)`` scores one proposal inside a
    cropped window whose frames are re-indexed from zero.
    """
    starts, w = window_starts(video.num_frames, video.fps, window_len, step)
    out = []
    for p in (video.proposals if proposals is None else proposals):
        covering = [s for s in starts if s <= p.frame_index < s + w]
        if not covering:
            raise ValueError(f"proposal at frame {p.frame_index} lies outside every window")
        scores = [np.asarray(score_fn(crop_video(video, s, s + w),
                                      dataclasses.replace(p, frame_index=p.frame_index - s)))
                  for s in covering]
        out.append({"proposal": p, "scores": np.mean(scores, axis=0), "windows": covering})
    return out


def instance_scorer(model: SkeleTR, head: str, T_len: int, policy: MPolicy,
                    iou_threshold: float = 0.3) -> Callable[[VideoRecord, Proposal], np.ndarray]:
    def score(window: VideoRecord, proposal: Proposal) -> np.ndarray:
        seqs = sample_sequences(window, T_len, iou_threshold)
        q = find_query(seqs, proposal.frame_index, proposal.bbox)
        clip = select_m(seqs, policy, mode="test", keep=q, video_id=window.video_id)
        was = model.training
        model.eval()
        try:
            return model([clip], head=head).data[0]
        finally:
            model.train(was)
    return score


# ---------------------------------------------------------------------------
# statistics


def run_stats(config: ModelConfig, T_len: int, M: int) -> dict:
    """Parameters and FLOPs (multiply-accumulates) of backbone and head for one clip."""
    bb = config.backbone
    t_f = bb.out_length(T_len)
    dim = bb.out_channels
    streams = PoolingStreamSet(config.streams, num_joints=bb.num_joints)
    model = SkeleTR(config)
    bb_params = count_parameters(bb)
    total_params = model.num_parameters()
    classifier = sum(h.num_parameters() for h in model.heads.values())
    if config.mode == "transformer":
        hf = head_flops(M, t_f, dim, config.encoder, streams)
        if not config.embedding:
            hf["total"] -= hf["embedding"]
            hf["embedding"] = 0
        head = hf["total"]
        detail = hf
    else:
        feats = np.zeros((1, M, dim))
        with T.count_macs() as c:
            model.baseline(T.Tensor(feats), np.zeros((1, M), bool))
        head = int(sum(c.values()))
        detail = {"total": head, "tokens": 1}
    bb_flops = backbone_macs(bb, T_len, M)
    return {
        "T": T_len, "M": M, "T_f": t_f, "C": dim, "tokens_per_sequence": detail["tokens"],
        "backbone_params": bb_params, "head_params": total_params - bb_params - classifier,
        "classifier_params": classifier, "total_params": total_params,
        "backbone_flops": bb_flops, "head_flops": head, "total_flops": bb_flops + head,
        "head_detail": detail,
    }


# ---------------------------------------------------------------------------
# checkpoints


def transfer_backbone(src: SkeleTR, dst: SkeleTR) -> None:
    """Copy backbone weights and normalization statistics from ``src`` into ``dst``."""
    if src.config.backbone != dst.config.backbone:
        raise ValueError("backbone configurations differ")
    dst.backbone.load_state_dict(src.backbone.state_dict())


def save_checkpoint(path, model: SkeleTR, extra: dict | None = None) -> None:
    meta = {"version": CHECKPOINT_VERSION, "model": model.config.to_dict(), "extra": extra or {}}
    arrays = {f"t/{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> tuple[SkeleTR, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        state = {k[2:]: z[k] for k in z.files if k.startswith("t/")}
    model = SkeleTR(ModelConfig(**meta["model"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta.get("extra", {})
