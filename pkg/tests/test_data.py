import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from skeletr.data import (
    COCO_EDGES, COCO_PARENTS, ClassDef, DatasetFormatError, SynthSpec, bone_transform, dumps,
    interaction_spec, load_dataset, loads, motion_spec, save_dataset, synth_generate, synth_video,
)

from oracles import distance_trend


@pytest.fixture(scope="module")
def small_ds():
    return synth_generate(motion_spec(3, num_frames=20), seed=3)


def test_round_trip_three_videos(tmp_path, small_ds):
    path = tmp_path / "ds.jsonl"
    save_dataset(small_ds, path)
    back = load_dataset(path)
    assert dumps(back) == dumps(small_ds)
    assert [r.video_id for r in back] == [r.video_id for r in small_ds]
    np.testing.assert_array_equal(back[1].frames[4][0].joints, small_ds[1].frames[4][0].joints)


def test_serialization_is_idempotent(small_ds):
    once = dumps(small_ds)
    assert dumps(loads(once)) == once


def test_truncated_file_reports_byte_offset(small_ds):
    text = dumps(small_ds)
    cut = text[: len(text) - 40]
    with pytest.raises(DatasetFormatError, match=r"line 3 \(byte offset \d+\)"):
        loads(cut)


def test_empty_file_is_empty_dataset(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    assert load_dataset(p) == []


def test_unknown_schema_version_and_malformed_record(small_ds):
    text = dumps(small_ds[:1]).replace('"schema_version":1', '"schema_version":9')
    with pytest.raises(DatasetFormatError, match="line 1.*schema_version"):
        loads(text)
    with pytest.raises(DatasetFormatError, match="line 2: malformed"):
        loads(dumps(small_ds[:1]) + '{"schema_version":1,"video_id":"x"}\n')


def test_synth_is_deterministic():
    spec = motion_spec(6, num_frames=16, jitter=0.01, dropout=0.2)
    assert dumps(synth_generate(spec, 11)) == dumps(synth_generate(spec, 11))
    assert dumps(synth_generate(spec, 11)) != dumps(synth_generate(spec, 12))


def test_zero_dropout_keeps_every_person():
    spec = motion_spec(6, num_frames=16)
    for rec in synth_generate(spec, 0):
        ids = {s.person_id for s in rec.skeletons}
        assert all(len(f) == len(ids) for f in rec.frames)


def test_labels_recoverable_by_distance_trend():
    spec = SynthSpec(num_videos=40, persons=(2, 2), num_frames=48,
                     classes=[ClassDef("meet", "approach"), ClassDef("parallel", "parallel")])
    rng = np.random.default_rng(5)
    correct = 0
    for i in range(spec.num_videos):
        rec, tracks = synth_video(spec, i % 2, rng, str(i))
        pred = distance_trend([tracks[0].center, tracks[1].center])
        correct += (pred == 1) == (rec.label == 0)
    assert correct == spec.num_videos


def test_label_distribution_matches_class_mapping():
    spec = motion_spec(12, num_frames=16)
    labels = [r.label for r in synth_generate(spec, 1)]
    assert labels == [i % 6 for i in range(12)]


@pytest.mark.parametrize("bad", [
    dict(classes=[ClassDef("a", "walk"), ClassDef("b", "walk")]),
    dict(classes=[ClassDef("a", "dance")]),
    dict(classes=[ClassDef("a", "approach")], persons=(1, 1)),
    dict(classes=[ClassDef("a", "walk")], dropout=1.5),
])
def test_inconsistent_spec_rejected(bad):
    with pytest.raises(ValueError):
        SynthSpec(num_videos=2, **bad)


def test_interaction_labels_follow_relative_direction():
    # a hand-written rule on the sign of the velocity product labels every video
    spec = interaction_spec(40)
    rng = np.random.default_rng(0)
    first_right = [0, 0]
    for i in range(40):
        rec, tracks = synth_video(spec, i % 2, rng, str(i))
        vx = [float(np.sign(t.center[-1, 0] - t.center[0, 0])) for t in tracks]
        assert (0 if vx[0] * vx[1] > 0 else 1) == rec.label
        first_right[rec.label] += vx[0] > 0
    # each person's own direction is a fair coin in both classes
    assert all(5 <= n <= 15 for n in first_right)


def test_coco_layout_has_sixteen_edges():
    assert len(COCO_EDGES) == 16
    assert COCO_PARENTS[0] == 0


def test_bone_examples():
    x = np.ones((4, 17, 2))
    assert np.all(bone_transform(x) == 0)
    chain = np.array([0.0, 1.0, 3.0]).reshape(1, 3, 1)
    np.testing.assert_array_equal(bone_transform(chain, parents=[0, 0, 1]).ravel(), [0, 1, 2])
    with pytest.raises(ValueError):
        bone_transform(chain, parents=[0, 0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-5, 5), st.floats(-5, 5))
def test_bones_are_translation_invariant(seed, dx, dy):
    x = np.random.default_rng(seed).uniform(0, 1, (3, 17, 2))
    shifted = x + np.array([dx, dy])
    np.testing.assert_allclose(bone_transform(shifted), bone_transform(x), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(-4096, 4096))
def test_bones_exactly_invariant_when_sums_are_exact(seed, k):
    # dyadic coordinates make every addition exact, so equality is bitwise
    x = np.random.default_rng(seed).integers(0, 1024, (3, 17, 2)) / 1024.0
    c = k / 256.0
    assert np.array_equal(bone_transform(x + c), bone_transform(x))
