import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vltrack import lang as L
from vltrack import ops, synth
from vltrack.errors import DimensionError
from vltrack.gradcheck import gradcheck
from vltrack.nn import Parameter
from vltrack.supernet import DESK_PLAN, TINY_PLAN, TemplateState, sample_genome
from vltrack.tensor import Tensor
from vltrack.tracker import (
    Box,
    Head,
    ResponseMaps,
    TrackerNet,
    Window,
    build_targets,
    centerness,
    crop,
    decode,
    dw_xcorr,
    read_predictions,
    search_window,
    template_window,
    track_sequence,
    track_sequences,
    tracking_loss,
    write_predictions,
)


def xcorr_oracle(fs, ft):
    n, c, hs, ws = fs.shape
    k = ft.shape[2]
    out = np.zeros((n, c, hs - k + 1, ws - k + 1))
    for b in range(n):
        for ch in range(c):
            for i in range(hs - k + 1):
                for j in range(ws - k + 1):
                    out[b, ch, i, j] = sum(fs[b, ch, i + u, j + v] * ft[b, ch, u, v] for u in range(k) for v in range(k))
    return out


# -- matching ---------------------------------------------------------------

def test_xcorr_delta_kernel_shifts_window():
    fs = np.random.default_rng(0).standard_normal((1, 2, 20, 20))
    ft = np.zeros((1, 2, 8, 8))
    ft[0, 1, 2, 5] = 1.0
    out = dw_xcorr(Tensor(ft), Tensor(fs)).data
    assert out.shape == (1, 2, 13, 13)
    np.testing.assert_array_equal(out[0, 1], fs[0, 1, 2:15, 5:18])
    np.testing.assert_array_equal(out[0, 0], 0)


def test_xcorr_aligned_template_peaks_at_offset():
    rng = np.random.default_rng(1)
    ft = rng.uniform(0.1, 1, (1, 3, 8, 8))
    fs = np.zeros((1, 3, 20, 20))
    fs[:, :, 4:12, 7:15] = ft
    out = dw_xcorr(Tensor(ft), Tensor(fs)).data
    np.testing.assert_allclose(out, xcorr_oracle(fs, ft), rtol=1e-12)
    for ch in range(3):
        assert np.unravel_index(np.argmax(out[0, ch]), (13, 13)) == (4, 7)


def test_xcorr_paper_shape_and_errors():
    out = dw_xcorr(Tensor(np.zeros((1, 256, 8, 8), np.float32)), Tensor(np.zeros((1, 256, 20, 20), np.float32)))
    assert out.shape == (1, 256, 13, 13)
    with pytest.raises(DimensionError):
        dw_xcorr(Tensor(np.zeros((1, 2, 21, 21))), Tensor(np.zeros((1, 2, 20, 20))))
    with pytest.raises(DimensionError):
        dw_xcorr(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((1, 2, 20, 20))))


def test_xcorr_gradcheck():
    rng = np.random.default_rng(2)
    fs = Parameter(rng.uniform(-1, 1, (2, 3, 7, 7)), dtype=np.float64)
    ft = Parameter(rng.uniform(-1, 1, (2, 3, 3, 3)), dtype=np.float64)
    res = gradcheck(lambda: ops.mean(ops.mul(dw_xcorr(ft, fs), dw_xcorr(ft, fs))), [fs, ft], rng=rng)
    assert res.max_rel_error < 1e-4, res


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 11), st.integers(0, 11))
def test_argmax_follows_one_cell_shift(i, j):
    # delta-kernel template on a single bright search cell: shifting the content shifts the argmax
    ft = np.zeros((1, 1, 8, 8))
    ft[0, 0, 0, 0] = 1.0
    fs = np.zeros((1, 1, 20, 20))
    fs[0, 0, i, j] = 1.0
    a = dw_xcorr(Tensor(ft), Tensor(fs)).data[0, 0]
    fs2 = np.roll(fs, 1, axis=3)
    b = dw_xcorr(Tensor(ft), Tensor(fs2)).data[0, 0]
    ia, ja = np.unravel_index(np.argmax(a), a.shape)
    ib, jb = np.unravel_index(np.argmax(b), b.shape)
    assert (ib, jb) == (ia, ja + 1)


# -- head -------------------------------------------------------------------

def test_head_regression_is_positive():
    head = Head(8, 8, rng=np.random.default_rng(3))
    corr = Tensor(np.random.default_rng(4).standard_normal((2, 8, 13, 13)).astype(np.float32) * 100)
    with np.errstate(over="raise"):
        maps = head(corr)
    assert maps.cls.shape == (2, 1, 13, 13) and maps.reg.shape == (2, 4, 13, 13)
    assert np.all(maps.reg.data > 0)


def test_zero_initialised_head_ties_and_picks_first_cell():
    head = Head(4, 4, rng=np.random.default_rng(5))
    head.zero_init_final()
    head.eval()
    maps = head(Tensor(np.random.default_rng(6).standard_normal((1, 4, 13, 13)).astype(np.float32)))
    assert np.all(maps.cls.data == maps.cls.data[0, 0, 0, 0])
    win = Window(100.0, 100.0, 80.0, 160)
    box, score = decode(maps, win, 8)
    # cell (0, 0) sits at crop pixel 32; reg exp(0) = 1 cell on each side
    assert (box.cx, box.cy) == win.to_frame(32, 32)
    assert score == 0.25


def test_head_gradcheck():
    rng = np.random.default_rng(7)
    head = Head(3, 4, rng=rng)
    head.to(np.float64)
    head.eval()
    corr = Parameter(rng.uniform(-1, 1, (1, 3, 5, 5)), dtype=np.float64)

    def fn():
        m = head(corr)
        return ops.add(ops.add(ops.mean(ops.mul(m.cls, m.cls)), ops.mean(m.ctr)), ops.mean(m.reg))

    params = [corr, head.cls_out.weight, head.reg_out.weight, head.cls_tower[0].conv.weight]
    assert gradcheck(fn, params, rng=rng).max_rel_error < 1e-4


# -- decode -------------------------------------------------------------------

def _maps_with_peak(i, j, reg=(4, 4, 4, 4), r=13):
    cls = np.full((1, 1, r, r), -10.0)
    cls[0, 0, i, j] = 10.0
    ctr = np.zeros((1, 1, r, r))
    regm = np.broadcast_to(np.asarray(reg, float)[None, :, None, None], (1, 4, r, r)).copy()
    return ResponseMaps(Tensor(cls), Tensor(ctr), Tensor(regm))


def test_decode_centre_cell_gives_window_centre():
    win = Window(160.0, 160.0, 160.0, 160)  # unit scale
    box, score = decode(_maps_with_peak(6, 6), win, 8)
    assert box.as_tuple() == (160.0, 160.0, 64.0, 64.0)
    p = ops._sigmoid(np.array(10.0)) * 0.5
    assert score == pytest.approx(float(p), rel=1e-12)


def test_decode_maps_offset_cell_through_scale():
    win = Window(50.0, 70.0, 80.0, 160)  # half scale
    box, _ = decode(_maps_with_peak(6, 8, reg=(1, 2, 3, 2)), win, 8)
    # crop centre of the cell: u = 80 + 2*8 = 96, v = 80; box spans u in [88, 120], v in [64, 96]
    assert box.as_tuple() == pytest.approx((50.0 + (104 - 80) * 0.5, 70.0, 16.0, 16.0))


def test_decode_score_is_max_of_p():
    rng = np.random.default_rng(8)
    maps = ResponseMaps(Tensor(rng.standard_normal((1, 1, 13, 13))), Tensor(rng.standard_normal((1, 1, 13, 13))), Tensor(np.ones((1, 4, 13, 13))))
    _, score = decode(maps, Window(0, 0, 160, 160), 8)
    p = ops._sigmoid(maps.cls.data) * ops._sigmoid(maps.ctr.data)
    assert score == p.max()


# -- targets and loss ------------------------------------------------------------

def test_centerness_examples():
    assert centerness(2.0, 2.0, 2.0, 2.0) == 1.0
    assert centerness(1.0, 1.0, 3.0, 3.0) == pytest.approx(1 / 3)


def test_targets_centre_cell_and_region():
    pos, ltrb, ctr = build_targets([(64, 64, 96, 96)], 13, 8, 160)
    assert pos[0, 6, 6] and ctr[0, 6, 6] == 1.0
    np.testing.assert_allclose(ltrb[0, :, 6, 6], 2.0)
    # the central 60% of a 32 px box spans +-9.6 px: cells 5, 6, 7 on each axis
    assert pos[0].sum() == 9


def test_perfect_regression_has_zero_iou_loss():
    pos, ltrb, _ = build_targets([(50, 60, 110, 100)], 13, 8, 160)
    w = pos.astype(np.float64) / pos.sum()
    assert float(ops.iou_loss(Tensor(np.clip(ltrb, 1e-3, None)), np.clip(ltrb, 1e-3, None), w).data) == 0.0


def test_loss_without_positives_is_classification_only(caplog):
    rng = np.random.default_rng(9)
    maps = ResponseMaps(Tensor(rng.standard_normal((1, 1, 13, 13))), Tensor(rng.standard_normal((1, 1, 13, 13))), Tensor(np.ones((1, 4, 13, 13))))
    loss = tracking_loss(maps, [(0, 0, 4, 4)], 8, 160)
    want = ops.bce_with_logits(maps.cls, np.zeros((1, 1, 13, 13)), np.full((1, 1, 13, 13), 1 / 169))
    assert float(loss.data) == pytest.approx(float(want.data))
    assert "no positive cells" in caplog.text


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_loss_is_finite_and_non_negative(seed):
    rng = np.random.default_rng(seed)
    maps = ResponseMaps(
        Tensor(rng.standard_normal((2, 1, 13, 13)) * 5),
        Tensor(rng.standard_normal((2, 1, 13, 13)) * 5),
        Tensor(np.exp(rng.uniform(-3, 3, (2, 4, 13, 13)))),
    )
    c = rng.uniform(40, 120, (2, 2))
    s = rng.uniform(8, 60, (2, 2))
    gt = np.concatenate([c - s / 2, c + s / 2], axis=1)
    v = float(tracking_loss(maps, gt, 8, 160).data)
    assert np.isfinite(v) and v >= 0


# -- crops --------------------------------------------------------------------

def test_crop_identity_window_returns_frame():
    frame = np.random.default_rng(10).random((3, 16, 16))
    np.testing.assert_allclose(crop(frame, Window(8.0, 8.0, 16.0, 16)), frame, atol=1e-12)


def test_crop_pads_outside_frame_with_mean():
    frame = np.random.default_rng(11).random((3, 8, 8))
    out = crop(frame, Window(-100.0, -100.0, 8.0, 8))
    np.testing.assert_allclose(out, np.broadcast_to(frame.mean(axis=(1, 2))[:, None, None], out.shape))


# -- tracking loop ------------------------------------------------------------

class _Stub:
    """Template-matching stand-in for a trained net: cls = -SSD of the target patch at each cell."""

    plan = DESK_PLAN

    class supernet:  # noqa: N801 - attribute namespace mirroring TrackerNet
        class template:  # noqa: N801
            class stem:  # noqa: N801
                class conv:  # noqa: N801
                    weight = np.zeros(1, np.float64)

        last_selectors = {}

        @staticmethod
        def forward_template(x_t, lin, genome):
            return TemplateState(x_t, [], lin, None)

    seen = []

    def eval(self):
        return self

    def match(self, state, x_s, genome):
        _Stub.seen.append(x_s.data.copy())
        tmpl = state.feature.data[:, :, 16:48, 16:48]  # target square in a 64 px template crop
        n = x_s.shape[0]
        cls = np.zeros((n, 1, 13, 13))
        for b in range(n):
            for i in range(13):
                for j in range(13):
                    v, u = 80 + (i - 6) * 8, 80 + (j - 6) * 8
                    patch = x_s.data[b, :, v - 16 : v + 16, u - 16 : u + 16]
                    cls[b, 0, i, j] = -np.sum((patch - tmpl[b]) ** 2)
        reg = np.full((n, 4, 13, 13), 2.0)  # 16 px half side at stride 8
        return ResponseMaps(Tensor(cls), Tensor(np.zeros_like(cls)), Tensor(reg))


def _static_blank_sequence():
    spec = synth.SceneSpec(synth.ObjectSpec("square", "red", "large", 80, 80, "linear", "right", speed=0))
    seq = synth.render_sequence(spec)
    seq.background[:] = 0.2
    return seq


def test_static_target_does_not_drift():
    seq = _static_blank_sequence()
    res = track_sequence(_Stub(), None, seq)
    assert len(res.boxes) == len(seq)
    assert np.abs(np.asarray(res.boxes) - seq.gt).max() <= 1.0


def test_moving_target_is_followed():
    spec = synth.SceneSpec(synth.ObjectSpec("square", "red", "large", 50, 80, "linear", "right", speed=2))
    seq = synth.render_sequence(spec)
    res = track_sequence(_Stub(), None, seq)
    centres = np.asarray(res.boxes)[:, :2]
    # the stub only resolves positions to one cell (7 px at this window scale)
    assert np.abs(centres - seq.gt[:, :2]).max() <= 7.0


def test_tracking_is_causal():
    # frame k is read only after the prediction for frame k-1 has been made
    seq = synth.render_sequence(synth.sample_spec("easy", np.random.default_rng(12), 12))
    _Stub.seen = []
    reads = []
    original = seq.frame

    def frame(k):
        reads.append((k, len(_Stub.seen)))
        return original(k)

    seq.frame = frame
    track_sequence(_Stub(), None, seq)
    assert all(done >= k - 1 for k, done in reads)
    assert max(k for k, _ in reads) == len(seq) - 1


def test_language_changes_response_map():
    rng = np.random.default_rng(13)
    spec = synth.SceneSpec(
        synth.ObjectSpec("circle", "red", "small", 70, 80),
        distractors=[synth.ObjectSpec("circle", "blue", "small", 95, 80)],
    )
    seq = synth.render_sequence(spec)
    net = TrackerNet(TINY_PLAN, seed=1)
    g = sample_genome(rng)
    win = search_window(*seq.gt[0][:2], Box(*seq.gt[0]).scale, TINY_PLAN)
    x_s = Tensor(crop(np.asarray(seq.frame(1)), win)[None].astype(np.float32))
    x_t = Tensor(crop(np.asarray(seq.frame(0)), template_window(Box(*seq.gt[0]), TINY_PLAN))[None].astype(np.float32))
    net.eval()
    maps = {}
    for mode in (L.DESCRIPTION, L.ZERO):
        lin = L.LanguageInput([seq.description], force_mode=None if mode == L.DESCRIPTION else mode)
        maps[mode] = net(x_t, x_s, lin, g).cls.data
    assert not np.array_equal(maps[L.DESCRIPTION], maps[L.ZERO])


def test_lockstep_tracking_equals_one_at_a_time():
    seqs = synth.manifest_sequences(synth.build_benchmark("t", 3, "mixed", 14, length=8))
    net = TrackerNet(TINY_PLAN, seed=2)
    net.to(np.float64)  # keeps BLAS batch-size rounding far below argmax gaps
    g = sample_genome(np.random.default_rng(15))
    together = track_sequences(net, g, seqs)
    for seq, res in zip(seqs, together):
        alone = track_sequence(net, g, seq)
        np.testing.assert_allclose(alone.boxes, res.boxes, rtol=1e-9)


def test_prediction_file_round_trip(tmp_path):
    boxes = [(10.0, 20.5, 16.0, 16.0), (11.25, 20.0, 15.5, 16.25)]
    write_predictions(tmp_path / "p.txt", boxes, [1.0, 0.5])
    lines = (tmp_path / "p.txt").read_text().splitlines()
    assert lines[0] == "0 10.0000 20.5000 16.0000 16.0000 1.000000"
    assert read_predictions(tmp_path / "p.txt") == (boxes, [1.0, 0.5])
