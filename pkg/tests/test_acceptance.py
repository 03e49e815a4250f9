"""Primary acceptance criteria, one test each; every test records a PASS/FAIL line.

The two training experiments take several minutes each on one CPU core.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from oracles import oracle_tracklets, random_window
from skeletr import tensor as T
from skeletr.backbone import VARIANTS, GcnConfig, count_macs as backbone_macs, count_parameters
from skeletr.data import interaction_spec, motion_spec, synth_generate
from skeletr.experiments import interaction_ablation, joint_training
from skeletr.gradcheck import run_all
from skeletr.heads import binary_cross_entropy, cross_entropy, joint_loss
from skeletr.interaction import Encoder, EncoderConfig, PoolingStreamSet, head_flops, mix_pool
from skeletr.model import ModelConfig, SkeleTR
from skeletr.sequencing import (
    MPolicy, build_tracklets, identity_purity, sample_sequences, score_based_baseline, select_m,
)
from skeletr.train import sliding_window_infer, window_starts


def record(name: str, ok: bool, detail: str) -> None:
    ACCEPTANCE.append((name, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    assert ok, detail


def test_gradient_integrity():
    t0 = time.perf_counter()
    errs = run_all()
    secs = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    required = {"gcn_2block", "pool_embed_encoder", "loss_ce", "loss_bce"}
    ok = all(e < 1e-4 for e in errs.values()) and required <= set(errs) and secs < 120
    record("gradient integrity", ok, f"{len(errs)} cases, worst {worst}={errs[worst]:.2e}, {secs:.1f}s")


def test_architecture_statistics():
    s = VARIANTS["s"]
    params = count_parameters(s)
    ratio = backbone_macs(s, 300, 1) / backbone_macs(s, 30, 1)
    full = head_flops(20, 15, 128, EncoderConfig())["total"]
    one = head_flops(20, 15, 128, EncoderConfig(), PoolingStreamSet(("1x1",)))["total"]
    ok = (abs(params / 0.181e6 - 1) <= 0.25 and abs(ratio - 10) <= 0.5
          and 0.594e9 / 2 <= full <= 0.594e9 * 2 and full / one >= 10)
    record("architecture statistics", ok,
           f"params {params / 1e6:.4f}M, FLOPs T300/T30 {ratio:.3f}, head {full / 1e9:.3f}G, "
           f"head/1x1-head {full / one:.1f}")


def test_quadratic_attention_scaling():
    dim, cfg, length = 128, EncoderConfig(), 21
    enc = Encoder(dim, cfg, np.random.default_rng(0))
    measured = []
    for m in (10, 20):
        x = T.Tensor(np.zeros((1, m * length, dim)))
        with T.count_macs() as c:
            enc(x, np.ones((1, m * length), bool))
        measured.append(c["attention"])
    ratio = measured[1] / measured[0]
    record("quadratic attention scaling", 3.9 <= ratio <= 4.1, f"attention FLOPs ratio 2M/M = {ratio:.4f}")


def test_token_count_law():
    rows = []
    for t_f, parts in ((15, 5), (8, 5), (75, 3)):
        streams = PoolingStreamSet(parts=[tuple(g) for g in np.array_split(np.arange(17), parts)])
        x = T.Tensor(np.zeros((1, t_f, 17, 4)))
        got = mix_pool(x, streams).shape[1]
        rows.append((t_f, parts, got, got == 1 + t_f + parts == streams.token_count(t_f)))
    record("token-count law", all(r[3] for r in rows),
           ", ".join(f"T_f={a} P={b} L={c}" for a, b, c, _ in rows))


def _permuted(c, perm):
    return dataclasses.replace(c, data=c.data[perm], valid=c.valid[perm], bbox=c.bbox[perm],
                               norm_time=c.norm_time[perm], key_frame=c.key_frame[perm], pad_mask=c.pad_mask[perm])


def _pad(c, k):
    z = lambda a, fill=0: np.concatenate([a, np.full((k,) + a.shape[1:], fill, dtype=a.dtype)])
    return dataclasses.replace(c, data=z(c.data), valid=z(c.valid, False), bbox=z(c.bbox), norm_time=z(c.norm_time),
                               key_frame=z(c.key_frame), pad_mask=z(c.pad_mask, True))


def test_permutation_and_padding_invariance():
    rec = synth_generate(interaction_spec(1, num_frames=48), 0)[0]
    clip = select_m(sample_sequences(rec, 8), MPolicy(2, 8), mode="test")
    model = SkeleTR(ModelConfig(backbone=GcnConfig(2, 12, (2,), (2,)), heads={"video": ["video", 3]})).eval()
    base = model([clip]).data
    perm_exact = all(np.array_equal(model([_permuted(clip, np.random.default_rng(s).permutation(clip.M))]).data,
                                    base) for s in range(5))
    trimmed = _permuted(clip, np.flatnonzero(~clip.pad_mask))
    n = trimmed.num_real
    ref = model.encode([trimmed]).features.data[0, :n]
    dev = max(float(np.abs(model.encode([_pad(trimmed, k)]).features.data[0, :n] - ref).max()) for k in (1, 4))
    dev = max(dev, float(np.abs(model([_pad(trimmed, 4)]).data - model([trimmed]).data).max()))
    record("permutation and padding invariance", perm_exact and dev <= 1e-9,
           f"5 permutations exact={perm_exact}, max deviation with padding {dev:.1e}")


def test_iou_oracle_equivalence():
    rng = np.random.default_rng(2024)
    agree = total = 0
    while total < 1000:
        frames = random_window(rng)
        if frames is None:
            continue
        total += 1
        agree += build_tracklets(frames, 0, len(frames)) == oracle_tracklets(frames, 0.3)
    record("IoU oracle equivalence", agree == total, f"{agree}/{total} windows agree")


def test_interaction_ablation():
    res = interaction_ablation()
    tr, na = res["mean"]["transformer"], res["mean"]["na"]
    ok = tr - na >= 0.10 and abs(na - res["chance"]) <= 0.10 and res["seconds"] < 1800
    record("interaction ablation", ok,
           f"transformer {tr:.3f} vs NA {na:.3f} (chance {res['chance']:.2f}) over 3 seeds, "
           f"per-seed {res['top1']}, {res['seconds']:.0f}s")


def test_joint_training_regularization():
    res = joint_training()
    record("joint-training regularization", res["wins"] >= 3,
           f"joint <= scratch B-val loss on {res['wins']}/4 seeds; scratch {np.round(res['scratch'], 4).tolist()}, "
           f"joint {np.round(res['joint'], 4).tolist()}")


def test_loss_arithmetic():
    rows = []
    for k in (2, 7, 80):
        rows.append(abs(cross_entropy(np.zeros((3, k)), [0, 1, 1]).item() - math.log(k)))
        rows.append(abs(binary_cross_entropy(np.zeros((3, k)), np.eye(3, k)).item() - math.log(2)))
    rng = np.random.default_rng(0)
    ce = cross_entropy(rng.standard_normal((4, 5)), [0, 1, 2, 3])
    bce = binary_cross_entropy(rng.standard_normal((2, 6)), rng.integers(0, 2, (2, 6)))
    exact = joint_loss(ce, bce).item() == ce.item() + 100 * bce.item()
    record("loss arithmetic", max(rows) <= 1e-9 and exact,
           f"max |loss - ln K|, |loss - ln 2| = {max(rows):.1e}; joint == CE + 100*BCE: {exact}")


def test_sliding_window_contract():
    counts = {(160, 5.0, 1.0): 6, (160, 10.0, 1.0): 1, (161, 5.0, 1.0): 6, (150, 2.0, 0.5): 15, (40, 5.0, 1.0): 0}
    count_ok = all(len(window_starts(n, 16.0, w, s)[0]) == c for (n, w, s), c in counts.items())
    rec = synth_generate(motion_spec(1, num_frames=160, task="instance"), 0)[0]
    rng = np.random.default_rng(0)
    table = rng.standard_normal((80, 4))  # score by the proposal's frame inside its window

    def score_fn(window, proposal):
        assert window.num_frames == 80
        return table[proposal.frame_index]

    mean_ok = True
    out = sliding_window_infer(score_fn, rec, 5.0, 1.0)
    for r in out:
        f = r["proposal"].frame_index
        starts = [s for s in range(0, 160 - 80 + 1, 16) if s <= f < s + 80]
        expect = sum(table[f - s] for s in starts) / len(starts)
        mean_ok &= r["windows"] == starts and np.array_equal(r["scores"], expect)
    record("sliding-window contract", count_ok and mean_ok and len(out) > 0,
           f"window counts {counts} match={count_ok}; {len(out)} proposals equal their window mean: {mean_ok}")


def test_short_sequence_purity():
    rows = []
    for seed in range(10):
        recs = synth_generate(motion_spec(6, num_frames=60, jitter=0.003), seed)
        base = np.mean([identity_purity(s) for r in recs for s in score_based_baseline(r) if s.valid_mask.any()])
        short = {t: np.mean([identity_purity(s) for r in recs for s in sample_sequences(r, t) if s.valid_mask.any()])
                 for t in (16, 30)}
        rows.append((min(short.values()), base))
    ok = all(a > b for a, b in rows)
    record("short-sequence purity", ok,
           f"tracklets (T=16 and 30) beat score-rank on {sum(a > b for a, b in rows)}/10 seeds; "
           f"mean {np.mean([a for a, _ in rows]):.3f} vs {np.mean([b for _, b in rows]):.3f}")
