"""Skeleton dataset schema, JSON-lines serialization and synthetic generation.

One video per line, UTF-8, with an explicit ``schema_version``.  Coordinates
are normalized to [0, 1] by frame width/height.  Joints follow the 17-point
COCO order below; the parent map used for bones is a fixed convention of this
package (root = nose).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1
TASKS = ("video", "instance", "group")

COCO_JOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)
# parent of each joint; the root points at itself
COCO_PARENTS = (0, 0, 0, 1, 2, 0, 0, 5, 6, 7, 8, 5, 6, 11, 12, 13, 14)
COCO_EDGES = tuple((j, p) for j, p in enumerate(COCO_PARENTS) if j != p)
COCO_PARTS = {
    "head": (0, 1, 2, 3, 4),
    "left_arm": (5, 7, 9),
    "right_arm": (6, 8, 10),
    "left_leg": (11, 13, 15),
    "right_leg": (12, 14, 16),
}


class DatasetFormatError(ValueError):
    pass


@dataclass
class Skeleton:
    frame_index: int
    joints: np.ndarray  # (V, C)
    joint_conf: np.ndarray  # (V,)
    bbox: tuple[float, float, float, float]
    detector_score: float = 1.0
    person_id: int | None = None  # ground truth, synthetic data only

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64)
        self.joint_conf = np.asarray(self.joint_conf, dtype=np.float64)
        self.bbox = tuple(float(b) for b in self.bbox)
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"degenerate bbox {self.bbox}")
        if self.joints.ndim != 2 or self.joints.shape[1] not in (2, 3):
            raise ValueError(f"joints must be V x 2 or V x 3, got {self.joints.shape}")
        if self.joint_conf.shape != (self.joints.shape[0],):
            raise ValueError("joint_conf length must equal the joint count")
        if np.any((self.joint_conf < 0) | (self.joint_conf > 1)):
            raise ValueError("joint confidences must lie in [0, 1]")
        if not 0.0 <= self.detector_score <= 1.0:
            raise ValueError(f"detector_score {self.detector_score} outside [0, 1]")

    def to_dict(self) -> dict:
        d = {
            "frame_index": int(self.frame_index),
            "joints": self.joints.tolist(),
            "joint_conf": self.joint_conf.tolist(),
            "bbox": list(self.bbox),
            "detector_score": float(self.detector_score),
        }
        if self.person_id is not None:
            d["person_id"] = int(self.person_id)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        return cls(
            frame_index=int(d["frame_index"]),
            joints=d["joints"],
            joint_conf=d["joint_conf"],
            bbox=d["bbox"],
            detector_score=float(d.get("detector_score", 1.0)),
            person_id=d.get("person_id"),
        )


@dataclass
class Proposal:
    """An instance-level annotation anchored at a key frame."""
    frame_index: int
    bbox: tuple[float, float, float, float]
    classes: list[int]
    person_id: int | None = None

    def to_dict(self) -> dict:
        d = {"frame_index": int(self.frame_index), "bbox": [float(b) for b in self.bbox],
             "classes": [int(c) for c in self.classes]}
        if self.person_id is not None:
            d["person_id"] = int(self.person_id)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Proposal":
        return cls(int(d["frame_index"]), tuple(d["bbox"]), list(d["classes"]), d.get("person_id"))


@dataclass
class VideoRecord:
    video_id: str
    fps: float
    num_frames: int
    frames: list[list[Skeleton]]
    task: str = "video"
    num_classes: int = 1
    label: int | None = None
    proposals: list[Proposal] = field(default_factory=list)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if len(self.frames) != self.num_frames:
            raise ValueError(f"{len(self.frames)} frame lists for {self.num_frames} frames")
        for t, skels in enumerate(self.frames):
            for s in skels:
                if s.frame_index != t:
                    raise ValueError(f"skeleton frame_index {s.frame_index} filed under frame {t}")
        k = self.num_classes
        if self.task in ("video", "group"):
            if self.label is None or not 0 <= self.label < k:
                raise ValueError(f"label {self.label} outside [0, {k})")
        else:
            for p in self.proposals:
                if not 0 <= p.frame_index < self.num_frames:
                    raise ValueError(f"proposal frame {p.frame_index} outside the video")
                if any(not 0 <= c < k for c in p.classes):
                    raise ValueError(f"proposal classes {p.classes} outside [0, {k})")

    @property
    def skeletons(self) -> Iterable[Skeleton]:
        for skels in self.frames:
            yield from skels

    def multilabel(self, proposal: Proposal) -> np.ndarray:
        y = np.zeros(self.num_classes)
        y[list(proposal.classes)] = 1.0
        return y

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "video_id": self.video_id,
            "fps": float(self.fps),
            "num_frames": int(self.num_frames),
            "task": self.task,
            "num_classes": int(self.num_classes),
            "label": None if self.label is None else int(self.label),
            "proposals": [p.to_dict() for p in self.proposals],
            "skeletons": [s.to_dict() for s in self.skeletons],
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VideoRecord":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DatasetFormatError(f"unknown schema_version {version!r}")
        n = int(d["num_frames"])
        frames: list[list[Skeleton]] = [[] for _ in range(n)]
        for sd in d["skeletons"]:
            s = Skeleton.from_dict(sd)
            if not 0 <= s.frame_index < n:
                raise ValueError(f"skeleton frame_index {s.frame_index} outside [0, {n})")
            frames[s.frame_index].append(s)
        return cls(
            video_id=str(d["video_id"]), fps=float(d["fps"]), num_frames=n, frames=frames,
            task=d.get("task", "video"), num_classes=int(d["num_classes"]), label=d.get("label"),
            proposals=[Proposal.from_dict(p) for p in d.get("proposals", [])],
        )


def dumps(records: Sequence[VideoRecord]) -> str:
    return "".join(json.dumps(r.to_dict(), separators=(",", ":")) + "\n" for r in records)


def loads(text: str) -> list[VideoRecord]:
    records = []
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), start=1):
        start = offset
        offset += len(line.encode("utf-8"))
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            byte = start + len(line[: e.pos].encode("utf-8"))
            raise DatasetFormatError(f"line {lineno} (byte offset {byte}): {e.msg}") from None
        try:
            records.append(VideoRecord.from_dict(obj))
        except DatasetFormatError as e:
            raise DatasetFormatError(f"line {lineno}: {e}") from None
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetFormatError(f"line {lineno}: malformed record ({e!r})") from None
    return records


def save_dataset(records: Sequence[VideoRecord], path) -> None:
    Path(path).write_text(dumps(records), encoding="utf-8")


def load_dataset(path) -> list[VideoRecord]:
    return loads(Path(path).read_text(encoding="utf-8"))


def bone_transform(seq: np.ndarray, parents: Sequence[int] = COCO_PARENTS) -> np.ndarray:
    """Per-joint difference to the parent joint over a ``(T, V, C)`` sequence."""
    seq = np.asarray(seq)
    v = seq.shape[-2]
    parents = np.asarray(parents)
    if parents.shape != (v,) or np.any((parents < 0) | (parents >= v)):
        raise ValueError(f"parent map of length {parents.shape} does not cover {v} joints")
    return seq - seq[..., parents, :]


# ---------------------------------------------------------------------------
# synthetic data

MOTIONS = ("stationary", "walk", "walk_left", "walk_right", "approach", "cross", "follow", "parallel", "same_way", "opposite_way")
PAIR_MOTIONS = {"approach", "cross", "follow", "parallel", "same_way", "opposite_way"}
INSTANCE_ACTIONS = ("walk", "stand", "close_to_other", "approaching")

# standing pose, pelvis at the origin, body height ~1 (image y points down)
_POSE = np.array([
    [0.00, -0.52], [0.03, -0.55], [-0.03, -0.55], [0.06, -0.53], [-0.06, -0.53],
    [0.12, -0.40], [-0.12, -0.40], [0.15, -0.22], [-0.15, -0.22], [0.16, -0.05], [-0.16, -0.05],
    [0.08, 0.00], [-0.08, 0.00], [0.09, 0.24], [-0.09, 0.24], [0.09, 0.47], [-0.09, 0.47],
])
_SWING = np.zeros((17, 2))
_SWING[[13, 15], 0] = [0.06, 0.10]
_SWING[[14, 16], 0] = [-0.06, -0.10]
_SWING[[7, 9], 0] = [-0.03, -0.06]
_SWING[[8, 10], 0] = [0.03, 0.06]


@dataclass
class ClassDef:
    name: str
    motion: str


@dataclass
class SynthSpec:
    num_videos: int
    classes: list[ClassDef]
    persons: tuple[int, int] = (1, 2)
    num_frames: int = 64
    fps: float = 16.0
    num_joints: int = 17
    height: float = 0.25
    jitter: float = 0.0
    dropout: float = 0.0
    task: str = "video"
    proposal_stride: int = 8
    walk_distance: float = 0.2

    def __post_init__(self):
        self.persons = tuple(self.persons)
        self.classes = [c if isinstance(c, ClassDef) else ClassDef(**c) for c in self.classes]
        if self.num_joints != 17:
            raise ValueError("the generator only produces 17-joint COCO skeletons")
        if not (0.0 <= self.dropout <= 1.0):
            raise ValueError(f"dropout {self.dropout} outside [0, 1]")
        if self.jitter < 0:
            raise ValueError("jitter must be nonnegative")
        if not 1 <= self.persons[0] <= self.persons[1]:
            raise ValueError(f"bad persons range {self.persons}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not self.classes:
            raise ValueError("at least one class is required")
        names, motions = set(), set()
        for c in self.classes:
            if c.motion not in MOTIONS:
                raise ValueError(f"class {c.name!r}: unknown motion {c.motion!r}")
            if c.name in names:
                raise ValueError(f"duplicate class name {c.name!r}")
            if c.motion in motions:
                raise ValueError(f"motion {c.motion!r} mapped to two classes; labels would be ambiguous")
            if c.motion in PAIR_MOTIONS and self.persons[1] < 2:
                raise ValueError(f"class {c.name!r} needs two persons but persons={self.persons}")
            names.add(c.name)
            motions.add(c.motion)

    @property
    def num_classes(self) -> int:
        return len(INSTANCE_ACTIONS) if self.task == "instance" else len(self.classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["persons"] = list(self.persons)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


@dataclass
class _Track:
    """Noiseless per-frame trajectory of one person."""
    center: np.ndarray  # (F, 2) pelvis position
    moving: np.ndarray  # (F,) bool
    facing: np.ndarray  # (F,) +1 / -1


def _walk_track(start, velocity, frames, active=None) -> _Track:
    active = np.ones(frames, bool) if active is None else active
    steps = np.cumsum(np.concatenate([[0], active[:-1]])).astype(float)
    center = np.asarray(start, float)[None] + steps[:, None] * np.asarray(velocity, float)[None]
    facing = np.full(frames, 1.0 if velocity[0] >= 0 else -1.0)
    return _Track(center, active.copy(), facing)


def _scenario(motion: str, n_persons: int, spec: SynthSpec, rng) -> list[_Track]:
    f = spec.num_frames
    d = spec.walk_distance
    speed = d / max(f - 1, 1)
    lanes = rng.permutation(np.linspace(0.35, 0.75, max(n_persons, 2)))

    def lone(i, walking, sign=None):
        y = lanes[i] + rng.uniform(-0.02, 0.02)
        if not walking:
            return _walk_track((rng.uniform(0.15, 0.85), y), (0.0, 0.0), f, np.zeros(f, bool))
        sign = rng.choice([-1.0, 1.0]) if sign is None else sign
        c = rng.uniform(0.2 + d / 2, 0.8 - d / 2)
        return _walk_track((c - sign * d / 2, y), (sign * speed, 0.0), f)

    if motion in ("stationary", "walk"):
        return [lone(i, motion == "walk") for i in range(n_persons)]
    if motion in ("walk_left", "walk_right"):
        return [lone(i, True, 1.0 if motion == "walk_right" else -1.0) for i in range(n_persons)]

    y = rng.uniform(0.45, 0.65)
    sign = rng.choice([-1.0, 1.0])
    if motion in ("approach", "cross"):
        c = rng.uniform(0.4, 0.6)
        gap = rng.uniform(0.3, 0.4)
        v = gap / (0.6 * f) if motion == "approach" else 2 * gap / f
        stop = int(0.6 * f) if motion == "approach" else f
        active = np.arange(f) < stop
        dy = 0.0 if motion == "approach" else 0.06
        pair = [
            _walk_track((c - sign * (gap / 2 + 0.06), y), (sign * v, 0.0), f, active),
            _walk_track((c + sign * (gap / 2 + 0.06), y + dy), (-sign * v, 0.0), f, active),
        ]
    elif motion == "follow":
        lag = max(f // 6, 2)
        v = 0.35 / f
        x0 = rng.uniform(0.25, 0.35) if sign > 0 else rng.uniform(0.65, 0.75)
        lead = _walk_track((x0 + sign * lag * v, y), (sign * v, 0.0), f)
        pair = [lead, _walk_track((x0, y + 0.04), (sign * v, 0.0), f)]
    elif motion == "parallel":
        x0 = rng.uniform(0.3, 0.4) if sign > 0 else rng.uniform(0.6, 0.7)
        v = 0.3 / f
        pair = [_walk_track((x0, y - 0.1), (sign * v, 0.0), f),
                _walk_track((x0, y + 0.1), (sign * v, 0.0), f)]
    else:  # same_way / opposite_way: independent walkers, only the relative direction is tied
        first = rng.choice([-1.0, 1.0])
        pair = []
        for k, sg in enumerate((first, first if motion == "same_way" else -first)):
            c = rng.uniform(0.2 + d / 2, 0.8 - d / 2)
            yk = (0.38, 0.72)[k] + rng.uniform(-0.02, 0.02)
            pair.append(_walk_track((c - sg * d / 2, yk), (sg * speed, 0.0), f))
    extra = [lone(i, rng.random() < 0.5) for i in range(2, n_persons)]
    return pair + extra


def _pose(track: _Track, t: int, height: float) -> np.ndarray:
    # gait phase advances only while walking
    phase = 2 * math.pi * float(track.moving[:t].sum()) / 16.0
    swing = math.sin(phase) if track.moving[t] else 0.0
    pose = _POSE + swing * _SWING
    pose = pose * np.array([track.facing[t], 1.0])
    return track.center[t][None] + height * pose


def _bbox(joints: np.ndarray, margin: float = 0.02) -> tuple[float, float, float, float]:
    x0, y0 = joints.min(axis=0) - margin
    x1, y1 = joints.max(axis=0) + margin
    x0, y0 = min(max(x0, 0.0), 0.999), min(max(y0, 0.0), 0.999)
    x1, y1 = max(min(x1, 1.0), x0 + 1e-3), max(min(y1, 1.0), y0 + 1e-3)
    return (float(x0), float(y0), float(x1), float(y1))


def _instance_classes(tracks: list[_Track], i: int, t: int) -> list[int]:
    tr = tracks[i]
    out = [0 if tr.moving[t] else 1]
    others = [o for j, o in enumerate(tracks) if j != i]
    if others:
        dist = [np.linalg.norm(o.center[t] - tr.center[t]) for o in others]
        j = int(np.argmin(dist))
        if dist[j] < 0.2:
            out.append(2)
        if t > 0:
            prev = np.linalg.norm(others[j].center[t - 1] - tr.center[t - 1])
            if dist[j] < prev - 1e-9:
                out.append(3)
    return sorted(out)


def synth_video(spec: SynthSpec, class_id: int, rng, video_id: str) -> tuple[VideoRecord, list[_Track]]:
    cdef = spec.classes[class_id]
    lo, hi = spec.persons
    if cdef.motion in PAIR_MOTIONS:
        lo = max(lo, 2)
    n = int(rng.integers(lo, hi + 1))
    tracks = _scenario(cdef.motion, n, spec, rng)
    frames: list[list[Skeleton]] = [[] for _ in range(spec.num_frames)]
    for t in range(spec.num_frames):
        for pid in rng.permutation(len(tracks)):
            if spec.dropout and rng.random() < spec.dropout:
                continue
            joints = _pose(tracks[pid], t, spec.height)
            if spec.jitter:
                joints = joints + rng.normal(0.0, spec.jitter, joints.shape)
            joints = np.round(np.clip(joints, 0.0, 1.0), 5)
            frames[t].append(Skeleton(
                frame_index=t, joints=joints, joint_conf=np.round(rng.uniform(0.7, 1.0, 17), 4),
                bbox=np.round(_bbox(joints), 5), detector_score=round(float(rng.uniform(0.3, 1.0)), 4),
                person_id=int(pid),
            ))
    proposals = []
    if spec.task == "instance":
        for t in range(0, spec.num_frames, spec.proposal_stride):
            for s in frames[t]:
                proposals.append(Proposal(t, s.bbox, _instance_classes(tracks, s.person_id, t), s.person_id))
    rec = VideoRecord(
        video_id=video_id, fps=spec.fps, num_frames=spec.num_frames, frames=frames, task=spec.task,
        num_classes=spec.num_classes, label=None if spec.task == "instance" else class_id,
        proposals=proposals,
    )
    return rec, tracks


def synth_generate(spec: SynthSpec, seed: int) -> list[VideoRecord]:
    """Balanced synthetic dataset; deterministic in ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    out = []
    k = len(spec.classes)
    for i in range(spec.num_videos):
        rec, _ = synth_video(spec, i % k, rng, f"synth-{seed}-{i:05d}")
        out.append(rec)
    return out


def interaction_spec(num_videos: int, **overrides) -> SynthSpec:
    """Two walkers drawn independently per person; the class only ties their directions."""
    kw = dict(num_videos=num_videos, persons=(2, 2), num_frames=64, classes=[
        ClassDef("same_way", "same_way"), ClassDef("opposite_way", "opposite_way")])
    kw.update(overrides)
    return SynthSpec(**kw)


def direction_spec(num_videos: int, **overrides) -> SynthSpec:
    """Everyone walks left or right; an individual-motion task for backbone pretraining."""
    kw = dict(num_videos=num_videos, persons=(1, 2), num_frames=64, classes=[
        ClassDef("walk_left", "walk_left"), ClassDef("walk_right", "walk_right")])
    kw.update(overrides)
    return SynthSpec(**kw)


def motion_spec(num_videos: int, **overrides) -> SynthSpec:
    kw = dict(num_videos=num_videos, persons=(2, 2), num_frames=64, classes=[
        ClassDef("stand", "stationary"), ClassDef("walk", "walk"), ClassDef("meet", "approach"),
        ClassDef("cross", "cross"), ClassDef("follow", "follow"), ClassDef("parallel", "parallel")])
    kw.update(overrides)
    return SynthSpec(**kw)
