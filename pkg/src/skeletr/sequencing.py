"""Short skeleton sequences from per-frame detections.

Key frames are placed every ``T/2`` frames.  Each key-frame skeleton is
linked to neighbours inside the centered window ``[t - T/2, t + T/2)`` with a
greedy IoU tracker; frames without a linked skeleton are zero-filled and
masked.  The long-sequence score-rank linking of earlier work is provided for
comparison.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Skeleton, VideoRecord


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"empty bbox {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


def _box(b) -> tuple:
    if isinstance(b, BBox):
        return (b.x_min, b.y_min, b.x_max, b.y_max)
    if isinstance(b, Skeleton):
        return b.bbox
    return tuple(b)


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = _box(a)
    bx0, by0, bx1, by1 = _box(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return float(inter / union)


def greedy_match(prev_boxes: Sequence, boxes: Sequence, iou_threshold: float) -> dict[int, int]:
    """Detection index -> tracklet index, assigned in descending IoU order.

    Ties break on (tracklet index, detection index); pairs below the
    threshold are never matched.
    """
    pairs = []
    for i, pb in enumerate(prev_boxes):
        for j, b in enumerate(boxes):
            v = iou(pb, b)
            if v >= iou_threshold and v > 0:
                pairs.append((-v, i, j))
    pairs.sort()
    used_t, out = set(), {}
    for _, i, j in pairs:
        if i in used_t or j in out:
            continue
        used_t.add(i)
        out[j] = i
    return out


def build_tracklets(frames: Sequence[Sequence], start: int, stop: int,
                    iou_threshold: float = 0.3) -> list[dict[int, object]]:
    """Link detections frame to frame inside ``[start, stop)``.

    ``frames[t]`` is a list of detections (skeletons or boxes).  Each tracklet
    is a ``{frame: detection}`` dict; a tracklet is matched through its most
    recent box, so short gaps are bridged when the IoU allows it.
    """
    start, stop = max(start, 0), min(stop, len(frames))
    tracklets: list[dict[int, object]] = []
    last: list[object] = []
    for t in range(start, stop):
        dets = list(frames[t])
        if not dets:
            continue
        assignment = greedy_match(last, dets, iou_threshold)
        for j, det in enumerate(dets):
            i = assignment.get(j)
            if i is None:
                tracklets.append({t: det})
                last.append(det)
            else:
                tracklets[i][t] = det
                last[i] = det
    return tracklets


@dataclass
class SkeletonSequence:
    data: np.ndarray  # (T, V, C) coordinates, zero where invalid
    conf: np.ndarray  # (T, V) joint confidences
    valid_mask: np.ndarray  # (T,) bool
    center_bbox: BBox
    norm_time: float
    key_frame: int
    person_ids: np.ndarray = field(default=None)  # (T,) ground truth ids, -1 if unknown

    def __post_init__(self):
        # key_frame -1 marks an empty filler slot of the score-rank baseline
        if self.key_frame >= 0 and not self.valid_mask.any():
            raise ValueError("a sequence needs at least one valid frame")
        if self.person_ids is None:
            self.person_ids = np.full(len(self.valid_mask), -1)

    @property
    def length(self) -> int:
        return len(self.valid_mask)

    def features(self) -> np.ndarray:
        """Model input ``(T, V, C + 1)``: coordinates followed by confidence."""
        return np.concatenate([self.data, self.conf[..., None]], axis=-1)


def identity_purity(seq: SkeletonSequence) -> float:
    """Share of valid frames whose skeleton has the majority ground-truth id."""
    ids = seq.person_ids[seq.valid_mask]
    ids = ids[ids >= 0]
    if ids.size == 0:
        return float("nan")
    return Counter(ids.tolist()).most_common(1)[0][1] / ids.size


def _fill(track: dict[int, Skeleton], first: int, length: int, v: int, c: int):
    data = np.zeros((length, v, c))
    conf = np.zeros((length, v))
    valid = np.zeros(length, bool)
    ids = np.full(length, -1)
    for t, s in track.items():
        i = t - first
        if 0 <= i < length:
            data[i] = s.joints
            conf[i] = s.joint_conf
            valid[i] = True
            ids[i] = -1 if s.person_id is None else s.person_id
    return data, conf, valid, ids


def key_frames(num_frames: int, T: int) -> list[int]:
    if T < 2 or T % 2:
        raise ValueError(f"T must be even and >= 2, got {T}")
    return list(range(0, num_frames, T // 2))


def _joint_shape(video: VideoRecord) -> tuple[int, int]:
    for s in video.skeletons:
        return s.joints.shape
    return (17, 2)


def sample_sequences(video: VideoRecord, T: int, iou_threshold: float = 0.3) -> list[SkeletonSequence]:
    """All short sequences of a video, ordered by key frame then detection order."""
    v, c = _joint_shape(video)
    out = []
    half = T // 2
    for t in key_frames(video.num_frames, T):
        if not video.frames[t]:
            continue
        first = t - half
        tracks = build_tracklets(video.frames, first, first + T, iou_threshold)
        for skel in video.frames[t]:
            track = next(tr for tr in tracks if tr.get(t) is skel)
            data, conf, valid, ids = _fill(track, first, T, v, c)
            out.append(SkeletonSequence(
                data=data, conf=conf, valid_mask=valid, center_bbox=BBox(*skel.bbox),
                norm_time=t / video.num_frames, key_frame=t, person_ids=ids,
            ))
    return out


def score_based_baseline(video: VideoRecord, m_hat: int = 2, T_full: int | None = None) -> list[SkeletonSequence]:
    """Rank-k skeleton of every frame (by detector score) forms sequence k."""
    if m_hat < 1:
        raise ValueError("m_hat must be >= 1")
    v, c = _joint_shape(video)
    length = video.num_frames if T_full is None else T_full
    ranked = [sorted(skels, key=lambda s: -s.detector_score)[:m_hat] for skels in video.frames]
    mid = video.num_frames // 2
    out = []
    for k in range(m_hat):
        track = {t: r[k] for t, r in enumerate(ranked) if len(r) > k}
        data, conf, valid, ids = _fill(track, 0, length, v, c)
        if track:
            anchor = track.get(mid) or track[min(track, key=lambda t: abs(t - mid))]
            bbox, kf = BBox(*anchor.bbox), anchor.frame_index
        else:
            bbox, kf = BBox(0.0, 0.0, 1.0, 1.0), -1
        out.append(SkeletonSequence(data, conf, valid, bbox, max(kf, 0) / video.num_frames, kf, ids))
    return out


@dataclass(frozen=True)
class MPolicy:
    m_min: int
    m_max: int

    def __post_init__(self):
        if not 1 <= self.m_min <= self.m_max:
            raise ValueError(f"need 1 <= m_min <= m_max, got [{self.m_min}, {self.m_max}]")

    @classmethod
    def fixed(cls, m: int) -> "MPolicy":
        return cls(m, m)

    def draw(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.m_min, self.m_max + 1))


@dataclass
class ClipSample:
    data: np.ndarray  # (M, T, V, C+1)
    valid: np.ndarray  # (M, T) frame masks
    bbox: np.ndarray  # (M, 4)
    norm_time: np.ndarray  # (M,)
    key_frame: np.ndarray  # (M,)
    pad_mask: np.ndarray  # (M,) True for zero-padded slots
    label: object = None  # class id, multi-hot vector, or None
    query: int | None = None  # sequence slot an instance label refers to
    video_id: str = ""

    @property
    def M(self) -> int:
        return len(self.pad_mask)

    @property
    def num_real(self) -> int:
        return int((~self.pad_mask).sum())


def _priority(seqs: Sequence[SkeletonSequence]) -> list[int]:
    # larger (more salient) people first, earlier key frames on ties
    return sorted(range(len(seqs)), key=lambda i: (-seqs[i].center_bbox.area, seqs[i].key_frame, i))


def _temporal(seqs, idx) -> list[int]:
    return sorted(idx, key=lambda i: (seqs[i].key_frame, -seqs[i].center_bbox.area, i))


def pack(seqs: Sequence[SkeletonSequence], m: int, label=None, query=None, video_id="") -> ClipSample:
    """Stack sequences into ``m`` slots, zero-padding the rest."""
    if m < len(seqs):
        raise ValueError(f"{len(seqs)} sequences do not fit {m} slots")
    if not seqs:
        raise ValueError("cannot pack an empty sequence list")
    t, v, c1 = seqs[0].features().shape
    data = np.zeros((m, t, v, c1))
    valid = np.zeros((m, t), bool)
    bbox = np.zeros((m, 4))
    norm_time = np.zeros(m)
    key = np.full(m, -1)
    pad = np.ones(m, bool)
    for i, s in enumerate(seqs):
        data[i] = s.features()
        valid[i] = s.valid_mask
        bbox[i] = s.center_bbox.as_array()
        norm_time[i] = s.norm_time
        key[i] = s.key_frame
        pad[i] = False
    return ClipSample(data, valid, bbox, norm_time, key, pad, label, query, video_id)


def select_m(sequences: Sequence[SkeletonSequence], policy: MPolicy, rng: np.random.Generator | None = None,
             mode: str = "test", m: int | None = None, label=None, keep: int | None = None,
             video_id: str = "") -> ClipSample:
    """Subsample or pad sequences to the clip size.

    Train mode uses ``m`` (drawn once per batch by the caller) or draws it
    from the policy, and keeps a uniform random subset.  Test mode uses
    ``clamp(M', m_min, m_max)`` and keeps the highest-priority sequences.
    ``keep`` forces one sequence index to survive (the instance query).
    """
    n = len(sequences)
    if mode == "train":
        if rng is None:
            raise ValueError("train mode needs an rng")
        m = policy.draw(rng) if m is None else m
        if n > m:
            if keep is None:
                idx = sorted(rng.choice(n, size=m, replace=False).tolist())
            else:
                others = [i for i in range(n) if i != keep]
                idx = sorted(rng.choice(others, size=m - 1, replace=False).tolist() + [keep])
        else:
            idx = list(range(n))
    elif mode == "test":
        m = min(max(n, policy.m_min), policy.m_max)
        if n > m:
            order = _priority(sequences)
            if keep is not None:
                order = [keep] + [i for i in order if i != keep]
            idx = _temporal(sequences, order[:m])
        else:
            idx = list(range(n))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    chosen = [sequences[i] for i in idx]
    query = None if keep is None else idx.index(keep)
    return pack(chosen, m, label=label, query=query, video_id=video_id)
