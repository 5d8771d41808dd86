import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vltrack import synth
from vltrack.metrics import iou
from vltrack.supernet import DESK_PLAN


def _spec(**kw):
    target = synth.ObjectSpec(**{"shape": "circle", "color": "blue", "size": "small", "x": 80, "y": 80, "motion": "random-walk", "speed": 2, **kw})
    return synth.SceneSpec(target, seed=3)


def rendered_bbox(mask):
    ys, xs = np.nonzero(mask)
    x1, x2, y1, y2 = xs.min(), xs.max() + 1, ys.min(), ys.max() + 1
    return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@pytest.mark.parametrize("shape,size", list(itertools.product(synth.SHAPES, synth.SIZES)))
def test_gt_box_matches_rendered_extent(shape, size):
    spec = synth.SceneSpec(synth.ObjectSpec(shape, "red", size, 70, 90))
    seq = synth.render_sequence(spec)
    frame = seq.frame(0)
    mask = (frame[0] == 1) & (frame[1] == 0) & (frame[2] == 0)
    assert iou(seq.gt[0], rendered_bbox(mask)) >= 0.9


def test_describe_examples():
    assert synth.describe(_spec()) == "the small blue circle"
    s = _spec(motion="linear", direction="left", speed=2, shape="square", color="red", size="large")
    assert synth.describe(s) == "the large red square moving left"
    assert synth.parse_description("the large red square moving left") == ("large", "red", "square", "left")


def test_linear_motion_and_border_clamp():
    spec = _spec(motion="linear", direction="right", speed=3, x=140)
    seq = synth.render_sequence(spec)
    xs = seq.gt[:, 0]
    assert xs[0] == 140 and xs[1] == 143
    assert xs.max() == synth.CANVAS - synth.SIZES["small"] // 2
    assert np.all(np.diff(xs) >= 0)


def test_frames_deterministic_and_in_range():
    spec = synth.sample_spec("distract", np.random.default_rng(4), 4)
    a = synth.render_sequence(spec).frames
    b = synth.render_sequence(synth.SceneSpec.from_dict(spec.to_dict())).frames
    np.testing.assert_array_equal(a, b)
    assert a.shape == (synth.DEFAULT_LENGTH, 3, 160, 160)
    assert a.min() >= 0 and a.max() <= 1


def test_saved_frames_equal_rerendered(tmp_path):
    seq = synth.render_sequence(synth.sample_spec("occlude", np.random.default_rng(5), 5))
    synth.save_frames(tmp_path / "f.ckpt", seq)
    frames, meta = synth.load_frames(tmp_path / "f.ckpt")
    np.testing.assert_array_equal(frames, seq.frames)
    assert meta["spec"] == seq.spec.to_dict()


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["easy", "distract", "occlude", "mixed"]), st.integers(0, 2**31 - 1))
def test_sampled_scenes_respect_invariants(profile, seed):
    spec = synth.sample_spec(profile, np.random.default_rng(seed), seed)
    for d in spec.distractors:
        assert d.attributes() != spec.target.attributes()
    assert sum(b - a for a, b in spec.occlusions) <= spec.length // 4
    seq = synth.render_sequence(spec)
    half = spec.target.pixels / 2
    assert np.all(seq.gt[:, :2] >= half) and np.all(seq.gt[:, :2] <= spec.canvas - half)


def test_distractor_profile_shares_shape():
    spec = synth.sample_spec("distract", np.random.default_rng(6), 6)
    same = [d for d in spec.distractors if d.shape == spec.target.shape and d.color != spec.target.color]
    assert len(spec.distractors) >= 2 and len(same) >= 2


def test_occluder_covers_target():
    spec = synth.SceneSpec(synth.ObjectSpec("square", "red", "small", 80, 80), occlusions=[[5, 9]])
    seq = synth.render_sequence(spec)
    assert seq.occluded(6) and not seq.occluded(9)
    f = seq.frame(6)
    assert np.all(f[:, 72:88, 72:88] == 0.5)


def test_invalid_scenes_rejected():
    t = synth.ObjectSpec("square", "red", "small", 80, 80)
    with pytest.raises(ValueError):
        synth.SceneSpec(t, distractors=[synth.ObjectSpec("square", "red", "small", 20, 20)]).validate()
    with pytest.raises(ValueError):
        synth.SceneSpec(t, occlusions=[[0, 11]]).validate()


def test_manifest_is_deterministic_and_parses_back(tmp_path):
    m1 = synth.build_benchmark("distract", 5, "distract", 7)
    m2 = synth.build_benchmark("distract", 5, "distract", 7)
    assert synth.manifest_dumps(m1) == synth.manifest_dumps(m2)
    synth.save_manifest(tmp_path / "m.json", m1)
    back = synth.load_manifest(tmp_path / "m.json")
    assert back == m1 and len(back["sequences"]) == 5
    seqs = synth.manifest_sequences(back)
    assert [s.description for s in seqs] == [synth.describe(synth.SceneSpec.from_dict(e["spec"])) for e in m1["sequences"]]


def test_missing_language_rate():
    seqs = synth.manifest_sequences(synth.build_benchmark("t", 6, "mixed", 1))
    gen = synth.make_training_pairs(seqs, 0.5, np.random.default_rng(0), DESK_PLAN)
    missing = sum(next(gen).missing for _ in range(10_000))
    assert 0.47 <= missing / 10_000 <= 0.53


def test_training_pair_geometry():
    seqs = synth.manifest_sequences(synth.build_benchmark("t", 3, "easy", 2))
    gen = synth.make_training_pairs(seqs, 0.0, np.random.default_rng(1), DESK_PLAN)
    for _ in range(20):
        p = next(gen)
        assert abs(p.i - p.j) <= synth.MAX_PAIR_GAP
        assert p.template.shape == (3, 64, 64) and p.search.shape == (3, 160, 160)
        x1, y1, x2, y2 = p.search_box
        # target stays inside the jitter range around the window centre
        assert abs((x1 + x2) / 2 - 80) <= 0.2 * 160 + 1e-9
        assert p.description == p.seq.description
