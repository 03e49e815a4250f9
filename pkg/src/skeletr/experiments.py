"""Small end-to-end experiments: interaction ablation and joint-training regularization."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import GcnConfig
from .data import INSTANCE_ACTIONS, direction_spec, interaction_spec, motion_spec, synth_generate
from .heads import LossSpec
from .interaction import EncoderConfig
from .model import ModelConfig, SkeleTR
from .train import TaskData, TrainConfig, evaluate, prepare_samples, train, transfer_backbone

log = logging.getLogger(__name__)


@dataclass
class AblationConfig:
    """Desk-scale setting: a 2-block backbone and one encoder block over 1x1 tokens."""
    modes: tuple[str, ...] = ("na", "transformer")
    num_train: int = 200
    num_val: int = 128
    num_frames: int = 48
    T: int = 16
    width: int = 12
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(depth=1, heads=2))
    streams: tuple[str, ...] = ("1x1",)
    embed_scale: float = 1.0
    pretrain_epochs: int = 10
    epochs: int = 12
    batch_size: int = 16
    lr: float = 0.02
    pretrain_lr: float = 0.05

    def model(self, mode: str, seed: int, num_classes: int = 2) -> SkeleTR:
        return SkeleTR(ModelConfig(
            backbone=GcnConfig(2, self.width, (2,), (2,)), encoder=self.encoder, streams=self.streams,
            mode=mode, embed_scale=self.embed_scale, heads={"video": ["video", num_classes]}, seed=seed))

    def train_config(self, epochs: int, seed: int, lr: float | None = None) -> TrainConfig:
        # every sequence of a clip is kept: dropping one can erase the relation the label depends on
        decay = (int(0.7 * epochs),) if epochs > 1 else ()
        return TrainConfig(epochs=epochs, batch_size=self.batch_size, base_lr=lr or self.lr, milestones=decay,
                           T=self.T, m_min=64, m_max=64, seed=seed)


def pretrain_backbone(cfg: AblationConfig, seed: int) -> SkeleTR:
    """Backbone trained on per-person walking direction, shared by every mode of one seed."""
    spec = direction_spec(cfg.num_train, num_frames=cfg.num_frames)
    data = prepare_samples(synth_generate(spec, 10_000 + seed), cfg.T)
    model = cfg.model("na", seed)
    train(cfg.train_config(cfg.pretrain_epochs, seed, cfg.pretrain_lr), model, [TaskData("direction", data)])
    return model


def interaction_ablation(seeds=(0, 1, 2), cfg: AblationConfig | None = None) -> dict:
    """Validation top-1 per mode and seed on the two-person relative-direction task.

    Each person's own motion has the same distribution in both classes, so the
    label is only visible through relations between sequences.
    """
    cfg = cfg or AblationConfig()
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float32)
    t0 = time.perf_counter()
    try:
        top1 = {m: [] for m in cfg.modes}
        for seed in seeds:
            spec = lambda n: interaction_spec(n, num_frames=cfg.num_frames)
            tr = prepare_samples(synth_generate(spec(cfg.num_train), 100 + seed), cfg.T)
            va = prepare_samples(synth_generate(spec(cfg.num_val), 900 + seed), cfg.T)
            base = pretrain_backbone(cfg, seed)
            for mode in cfg.modes:
                model = cfg.model(mode, seed)
                transfer_backbone(base, model)
                train(cfg.train_config(cfg.epochs, seed), model, [TaskData("interaction", tr)])
                acc = evaluate(model, va, "video", cfg.train_config(1, seed).policy).top1
                top1[mode].append(acc)
                log.info("seed %d mode %s top1 %.3f", seed, mode, acc)
    finally:
        T.set_default_dtype(prev)
    return {"top1": top1, "mean": {m: float(np.mean(v)) for m, v in top1.items()},
            "chance": 0.5, "seconds": time.perf_counter() - t0}


@dataclass
class JointConfig:
    """A: video-level CE on many videos.  B: instance-level BCE on a handful of videos."""
    num_a: int = 120
    num_b_train: int = 3
    num_b_val: int = 16
    num_frames: int = 48
    T: int = 16
    width: int = 12
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(depth=1, heads=2))
    streams: tuple[str, ...] = ("1x1",)
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.02
    lam: float = 1.0  # dense 4-label BCE is already on the CE scale

    def model(self, heads: dict, seed: int) -> SkeleTR:
        return SkeleTR(ModelConfig(backbone=GcnConfig(2, self.width, (2,), (2,)), encoder=self.encoder,
                                   streams=self.streams, heads=heads, seed=seed))

    def train_config(self, seed: int) -> TrainConfig:
        # per-item averaging gives B the same gradient per epoch with or without A
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, base_lr=self.lr,
                           milestones=(int(0.7 * self.epochs),), T=self.T, m_min=64, m_max=64, seed=seed,
                           reduction="item")


def joint_training(seeds=(0, 1, 2, 3), cfg: JointConfig | None = None) -> dict:
    """Final B validation loss (unweighted BCE) trained on B alone vs jointly with A."""
    cfg = cfg or JointConfig()
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float32)
    t0 = time.perf_counter()
    k = len(INSTANCE_ACTIONS)
    out = {"scratch": [], "joint": [], "curves": []}
    try:
        for seed in seeds:
            spec_b = lambda n: motion_spec(n, num_frames=cfg.num_frames, task="instance")
            a = prepare_samples(synth_generate(motion_spec(cfg.num_a, num_frames=cfg.num_frames), 200 + seed), cfg.T)
            b_tr = prepare_samples(synth_generate(spec_b(cfg.num_b_train), 300 + seed), cfg.T)
            b_va = prepare_samples(synth_generate(spec_b(cfg.num_b_val), 400 + seed), cfg.T)
            task_b = TaskData("b", b_tr, b_va, head="instance", loss=LossSpec("bce", cfg.lam))
            task_a = TaskData("a", a, head="video", loss=LossSpec("ce", 1.0))
            scratch = cfg.model({"instance": ["instance", k]}, seed)
            r_s = train(cfg.train_config(seed), scratch, [task_b])
            joint = cfg.model({"video": ["video", len(motion_spec(1).classes)], "instance": ["instance", k]}, seed)
            r_j = train(cfg.train_config(seed), joint, [task_a, task_b])
            out["scratch"].append(r_s.losses("val:b")[-1])
            out["joint"].append(r_j.losses("val:b")[-1])
            out["curves"].append({"scratch": r_s.losses("val:b"), "joint": r_j.losses("val:b")})
            log.info("seed %d B val loss scratch %.4f joint %.4f", seed, out["scratch"][-1], out["joint"][-1])
    finally:
        T.set_default_dtype(prev)
    out["wins"] = int(sum(j <= s for s, j in zip(out["scratch"], out["joint"])))
    out["seconds"] = time.perf_counter() - t0
    return out
