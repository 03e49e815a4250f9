import dataclasses
import math

import numpy as np
import pytest

from skeletr import tensor as T
from skeletr.backbone import GcnConfig
from skeletr.data import Proposal, interaction_spec, motion_spec, synth_generate
from skeletr.heads import LossSpec, compute_loss
from skeletr.interaction import EncoderConfig
from skeletr.model import ModelConfig, SkeleTR
from skeletr.nn import Parameter
from skeletr.train import (
    SGD, TaskData, TrainConfig, TrainingDiverged, average_precision, batch_loss, evaluate, interleave,
    load_checkpoint, predict, prepare_samples, rank_classes, report_from_scores, run_stats, save_checkpoint,
    sliding_window_infer, topk_accuracy, train, transfer_backbone, window_starts,
)

TINY = dict(backbone=GcnConfig(1, 6, (), ()), encoder=EncoderConfig(depth=1, heads=2), streams=("1x1",))


def tiny_model(heads=None, seed=0, mode="transformer"):
    return SkeleTR(ModelConfig(**TINY, mode=mode, heads=heads or {"video": ["video", 2]}, seed=seed))


@pytest.fixture(scope="module")
def video_samples():
    return prepare_samples(synth_generate(interaction_spec(8, num_frames=16), 0), 8)


@pytest.fixture(scope="module")
def instance_samples():
    return prepare_samples(synth_generate(motion_spec(2, num_frames=16, task="instance"), 1), 8)


# ---------------------------------------------------------------------------
# configuration and optimization


def test_lr_schedule_two_decays():
    cfg = TrainConfig(epochs=100, base_lr=0.1, milestones=(60, 80))
    assert cfg.lr_at(0) == 0.1 and cfg.lr_at(59) == 0.1
    assert cfg.lr_at(60) == pytest.approx(0.01, abs=1e-15)
    assert cfg.lr_at(80) == pytest.approx(0.001, abs=1e-15)
    assert cfg.lr_at(99) == pytest.approx(0.001, abs=1e-15)


@pytest.mark.parametrize("bad", [
    dict(milestones=(80, 60)), dict(milestones=(100,)), dict(milestones=(0,)), dict(epochs=0),
    dict(base_lr=0.0), dict(lr_decay=1.5), dict(reduction="sum"),
])
def test_invalid_train_config(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_sgd_step_matches_heavy_ball_formula():
    p = Parameter(np.array([1.0, -2.0]))
    opt = SGD([p], lr=0.1, momentum=0.9, weight_decay=0.01)
    p.grad = np.array([0.5, 0.5])
    opt.step()
    g1 = np.array([0.5, 0.5]) + 0.01 * np.array([1.0, -2.0])
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) - 0.1 * g1)
    before = p.data.copy()
    p.grad = np.array([0.0, 1.0])
    opt.step()
    v2 = 0.9 * g1 + (np.array([0.0, 1.0]) + 0.01 * before)
    np.testing.assert_allclose(p.data, before - 0.1 * v2)


def test_interleave_covers_every_item_once_with_fixed_ratio():
    batches = interleave([90, 30], 16, np.random.default_rng(0))
    seen = [pair for b in batches for pair in b]
    assert sorted(seen) == sorted([(0, i) for i in range(90)] + [(1, i) for i in range(30)])
    for b in batches:
        a = sum(d == 0 for d, _ in b)
        assert abs(a - 3 * (len(b) - a)) <= 4  # 3:1 up to rounding of each share


def test_interleave_single_dataset_is_a_permutation():
    batches = interleave([10], 4, np.random.default_rng(1))
    assert [len(b) for b in batches] == [3, 3, 4]
    assert sorted(i for b in batches for _, i in b) == list(range(10))


def test_dataset_reduction_is_ce_plus_lambda_bce(video_samples, instance_samples):
    model = tiny_model({"video": ["video", 2], "instance": ["instance", 4]})
    tasks = [TaskData("a", video_samples, head="video"),
             TaskData("b", instance_samples, head="instance", loss=LossSpec("bce", 100.0))]
    items = [(0, video_samples[0]), (0, video_samples[1]), (1, instance_samples[0])]
    clips = [s.clip(TrainConfig().policy) for _, s in items]
    model.eval()
    total, parts = batch_loss(model, tasks, items, clips)
    enc = model.encode(clips)
    ce = compute_loss(model.score(enc, clips, [0, 1], "video"), np.array([s.label for _, s in items[:2]]),
                      LossSpec("ce"))
    bce = compute_loss(model.score(enc, clips, [2], "instance"), np.array([items[2][1].label]),
                       LossSpec("bce"))
    assert total.item() == ce.item() + 100.0 * bce.item()
    assert parts == {"a": ce.item(), "b": 100.0 * bce.item()}
    item_total, _ = batch_loss(model, tasks, items, clips, "item")
    assert item_total.item() == pytest.approx(ce.item() * 2 / 3 + 100.0 * bce.item() / 3, rel=1e-12)


# ---------------------------------------------------------------------------
# training loop


class _Stop(Exception):
    pass


def test_overfit_single_class_dataset():
    recs = synth_generate(motion_spec(50, num_frames=16, classes=[{"name": "walk", "motion": "walk"}]), 3)
    samples = prepare_samples(recs, 8)
    assert len(samples) == 50
    model = tiny_model({"video": ["video", 3]}, mode="na")
    cfg = TrainConfig(epochs=200, batch_size=16, base_lr=0.1, milestones=(), T=8, m_min=1, m_max=4)
    losses = []

    def stop(epoch, rows):
        losses.append(rows[0]["loss"])
        if losses[-1] < 0.05:
            raise _Stop

    with pytest.raises(_Stop):
        train(cfg, model, [TaskData("one", samples)], on_epoch=stop)
    assert len(losses) <= 200


def test_same_seed_gives_identical_curves(video_samples):
    cfg = TrainConfig(epochs=2, batch_size=4, base_lr=0.05, milestones=(1,), T=8, m_min=2, m_max=6, seed=5)
    runs = []
    for _ in range(2):
        model = tiny_model(seed=1)
        res = train(cfg, model, [TaskData("v", video_samples, video_samples[:4])])
        runs.append((res.curves, model.state_dict()))
    assert runs[0][0] == runs[1][0]
    for k, v in runs[0][1].items():
        assert np.array_equal(v, runs[1][1][k])
    assert [r["split"] for r in runs[0][0]] == ["train:v", "val:v"] * 2


def test_curves_csv_columns(tmp_path, video_samples):
    cfg = TrainConfig(epochs=1, batch_size=8, milestones=(), T=8)
    res = train(cfg, tiny_model(), [TaskData("v", video_samples, video_samples[:2])])
    path = tmp_path / "c.csv"
    res.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,split,loss,metric"
    assert len(lines) == 3
    assert res.final_lr == cfg.base_lr


def test_nan_parameters_abort_with_diagnostics(video_samples):
    model = tiny_model()
    model.heads["video"].fc.weight.data[...] = np.nan
    with pytest.raises(TrainingDiverged, match="epoch 0 step 0"):
        train(TrainConfig(epochs=1, milestones=(), T=8), model, [TaskData("v", video_samples)])


def test_empty_task_list_or_dataset_rejected():
    with pytest.raises(ValueError):
        train(TrainConfig(epochs=1, milestones=()), tiny_model(), [])
    with pytest.raises(ValueError):
        TaskData("empty", [])


def test_instance_samples_carry_query_and_multilabel(instance_samples):
    s = instance_samples[0]
    assert s.query is not None and len(s.label) == 4
    assert set(np.unique(s.label)) <= {0, 1}


# ---------------------------------------------------------------------------
# metrics


def _oracle_ap(scores, positives):
    # precision at each recall level, made monotone from the right, integrated over recall steps
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(positives)
    pts, tp = [], 0
    for rank, i in enumerate(order, 1):
        tp += positives[i]
        pts.append((tp / n_pos, tp / rank))
    ap, prev = 0.0, 0.0
    for r, _ in pts:
        if r > prev:
            ap += (r - prev) * max(p for rr, p in pts if rr >= r)
            prev = r
    return ap


def test_average_precision_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 15))
        scores = rng.integers(0, 5, n).astype(float)  # many ties
        pos = rng.random(n) < 0.4
        if not pos.any():
            assert math.isnan(average_precision(scores, pos))
            continue
        assert average_precision(scores, pos) == pytest.approx(_oracle_ap(scores.tolist(), pos.tolist()),
                                                               abs=1e-12)


def test_ap_examples():
    assert average_precision([0.9, 0.1, 0.2], [True, False, False]) == 1.0
    assert average_precision([0.1, 0.9], [True, False]) == 0.5


def test_perfect_and_constant_predictors():
    labels = np.repeat(np.arange(4), 5)
    perfect = np.eye(4)[labels]
    rep = report_from_scores(perfect, labels)
    assert rep.top1 == 1.0 and rep.mAP == 1.0
    const = np.zeros((20, 4))
    rep = report_from_scores(const, labels)
    assert rep.top1 == 0.25  # every tie resolves to class 0
    assert rep.confusion[0][0] == 5 and sum(rep.confusion[1]) == 5
    assert 0 <= rep.top1 <= rep.top5 <= 1


def test_rank_tie_break_prefers_lower_index():
    assert rank_classes(np.array([[1.0, 3.0, 3.0, 0.0]]))[0].tolist() == [1, 2, 0, 3]
    assert topk_accuracy(np.array([[1.0, 1.0]]), np.array([1]), 1) == 0.0


def test_multilabel_report_and_categories():
    scores = np.array([[0.9, 0.1, 0.5], [0.2, 0.8, 0.4], [0.1, 0.3, 0.6]])
    labels = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 0]])
    rep = report_from_scores(scores, labels, multilabel=True, categories={"pose": [0, 1], "other": [2]})
    assert rep.per_class_ap[:2] == [1.0, 1.0] and math.isnan(rep.per_class_ap[2])
    assert rep.mAP == 1.0 and rep.category_mAP["pose"] == 1.0 and math.isnan(rep.category_mAP["other"])


def test_evaluate_is_side_effect_free(video_samples):
    model = tiny_model()
    model.train()
    before = model.state_dict()
    a = evaluate(model, video_samples, "video", TrainConfig().policy)
    b = evaluate(model, video_samples, "video", TrainConfig().policy)
    assert a == b and model.training
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)


# ---------------------------------------------------------------------------
# sliding-window inference


def test_window_count_five_seconds_in_ten():
    starts, w = window_starts(160, 16.0, 5.0, 1.0)
    assert len(starts) == 6 and w == 80 and starts[-1] + w == 160
    assert window_starts(40, 16.0, 5.0)[0] == []


def _video_with(proposal_frames, num_frames=160):
    rec = synth_generate(motion_spec(1, num_frames=num_frames, task="instance"), 0)[0]
    props = [Proposal(f, (0.1, 0.1, 0.2, 0.2), [0], 0) for f in proposal_frames]
    return dataclasses.replace(rec, proposals=props)


def test_window_scores_are_averaged():
    video = _video_with([40, 8, 100])

    def score_fn(window, proposal):
        assert window.num_frames == 80 and 0 <= proposal.frame_index < 80
        return np.array([float(proposal.frame_index), 1.0])

    out = sliding_window_infer(score_fn, video, 5.0, 1.0)
    by_frame = {r["proposal"].frame_index: r for r in out}
    # frame 40 lies in the windows starting at 0, 16 and 32, at local frames 40, 24 and 8
    assert by_frame[40]["windows"] == [0, 16, 32]
    assert by_frame[40]["scores"][0] == (40 + 24 + 8) / 3
    # frame 8 lies only in the first window, so its score is unchanged
    assert by_frame[8]["windows"] == [0]
    assert by_frame[8]["scores"].tolist() == [8.0, 1.0]
    assert by_frame[100]["windows"] == [32, 48, 64, 80]


def test_proposal_outside_every_window_errors():
    video = _video_with([150], num_frames=160)
    with pytest.raises(ValueError, match="outside every window"):
        sliding_window_infer(lambda w, p: np.zeros(1), video, 5.0, 4.0)


# ---------------------------------------------------------------------------
# statistics, checkpoints, transfer


def test_head_flops_against_reported_values():
    full = run_stats(ModelConfig(), 30, 20)
    one = run_stats(ModelConfig(streams=("1x1",)), 30, 20)
    assert full["T_f"] == 15 and full["C"] == 128 and full["tokens_per_sequence"] == 21
    assert 0.594e9 / 2 <= full["head_flops"] <= 0.594e9 * 2
    assert full["head_flops"] / one["head_flops"] > 10
    assert full["total_flops"] == full["backbone_flops"] + full["head_flops"]


def test_head_flops_approach_quadratic_growth():
    cfg = ModelConfig()
    ratios = [run_stats(cfg, 30, 2 * m)["head_flops"] / run_stats(cfg, 30, m)["head_flops"]
              for m in (20, 100, 200)]
    assert ratios == sorted(ratios) and all(r < 4 for r in ratios)
    assert 3.8 <= ratios[-1] <= 4.2


def test_baseline_head_stats_and_params():
    s = run_stats(ModelConfig(mode="add_global"), 30, 4)
    assert s["tokens_per_sequence"] == 1 and s["head_flops"] > 0
    assert s["total_params"] == s["backbone_params"] + s["head_params"] + s["classifier_params"]


def test_checkpoint_round_trip(tmp_path, video_samples):
    model = tiny_model({"video": ["video", 2], "inst": ["instance", 4]}, seed=3)
    path = tmp_path / "m.npz"
    save_checkpoint(path, model, {"note": "x"})
    loaded, extra = load_checkpoint(path)
    assert extra == {"note": "x"} and loaded.config.to_dict() == model.config.to_dict()
    model.eval()
    policy = TrainConfig().policy
    np.testing.assert_array_equal(predict(model, video_samples, "video", policy),
                                  predict(loaded, video_samples, "video", policy))


def test_checkpoint_version_is_checked(tmp_path):
    import json
    path = tmp_path / "bad.npz"
    np.savez(path, __meta__=np.array(json.dumps({"version": 99})))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_transfer_backbone_copies_weights_and_statistics():
    src, dst = tiny_model(seed=1), tiny_model(seed=2, mode="na")
    for name, b in src.backbone.named_buffers():
        b += 1.0
    transfer_backbone(src, dst)
    s, d = src.backbone.state_dict(), dst.backbone.state_dict()
    assert all(np.array_equal(s[k], d[k]) for k in s)
    other = SkeleTR(ModelConfig(**{**TINY, "backbone": GcnConfig(1, 8, (), ())}))
    with pytest.raises(ValueError):
        transfer_backbone(src, other)
