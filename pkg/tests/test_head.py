import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deformdet.head import (
    BBox,
    Detection,
    Head,
    HeadOutput,
    assign_targets,
    cell_of,
    compute_loss,
    decode,
    encode_box,
    iou_matrix,
    nms,
    raw_from_target,
    read_detections,
    select_level,
    write_detections,
)
from deformdet.nn import ParamStore
from deformdet.tensor import finite_diff_grad, grad_error

LEVELS = (3, 4, 5)


def empty_output(size=256, classes=6, batch=1, logit=-20.0):
    cls = {i: np.full((batch, classes, size >> i, size >> i), logit) for i in LEVELS}
    box = {i: np.zeros((batch, 4, size >> i, size >> i)) for i in LEVELS}
    return HeadOutput(cls, box)


boxes = st.builds(
    lambda cx, cy, w, h, c: BBox(cx, cy, w, h, c),
    st.floats(0.0, 0.999), st.floats(0.0, 0.999), st.floats(0.01, 1.0), st.floats(0.01, 1.0),
    st.integers(0, 5))


class TestHeadForward:
    def test_shapes_256(self):
        head = Head(ParamStore(0), LEVELS, 8, 6)
        N = {i: np.zeros((1, 8, 256 >> i, 256 >> i)) for i in LEVELS}
        out = head.forward(N)
        assert out.cls[3].shape == (1, 6, 32, 32)
        assert out.cls[4].shape == (1, 6, 16, 16)
        assert out.cls[5].shape == (1, 6, 8, 8)
        assert out.box[5].shape == (1, 4, 8, 8)

    def test_zero_weights_give_half_scores(self):
        store = ParamStore(0)
        head = Head(store, (4, 5), 4, 6)
        for arr in store.params.values():
            arr.value[...] = 0.0
        N = {i: np.random.default_rng(i).normal(size=(1, 4, 64 >> i, 64 >> i)) for i in (4, 5)}
        out = head.forward(N)
        for i in (4, 5):
            assert not out.cls[i].any()
        dets = decode(out, score_thresh=0.0, iou_thresh=1.0)[0]
        assert dets and all(d.score == 0.5 for d in dets)

    def test_gradient_through_both_branches(self):
        rng = np.random.default_rng(1)
        store = ParamStore(2)
        head = Head(store, (3, 4), 3, 2)
        N = {3: rng.normal(size=(1, 3, 4, 4)), 4: rng.normal(size=(1, 3, 2, 2))}
        targets = assign_targets([[BBox(0.4, 0.6, 0.3, 0.2, 1)]], (3, 4), (32, 32), 2)
        _, _, _, d_cls, d_box = compute_loss(head.forward(N), targets, with_grad=True)
        store.zero_grad()
        dN = head.backward(d_cls, d_box)

        def f(_):
            return compute_loss(head.forward(N), targets)[0]

        for i in (3, 4):
            assert grad_error(dN[i], finite_diff_grad(f, N[i])) < 1e-4
        for name in ("head.l3.cls.pred.weight", "head.l4.box.pred.weight", "head.l3.box.conv.bias"):
            grad = store.grad(name).copy()
            assert grad_error(grad, finite_diff_grad(f, store[name])) < 1e-4


class TestAssignment:
    def test_centre_box_eighth_of_256(self):
        b = BBox(0.5, 0.5, 1 / 8, 1 / 8, 2)
        assert select_level(b, (256, 256), LEVELS) == 4
        t = assign_targets([[b]], LEVELS, (256, 256), 6)
        assert t.pos[4][0, 8, 8] and t.pos[4].sum() == 1
        assert t.cls[4][0, 2, 8, 8] == 1.0
        assert t.pos[3].sum() == 0 and t.pos[5].sum() == 0

    def test_empty_gt(self):
        t = assign_targets([[]], LEVELS, (256, 256), 6)
        for i in LEVELS:
            assert not t.cls[i].any() and not t.pos[i].any()

    def test_larger_box_wins(self):
        small = BBox(0.5, 0.5, 0.12, 0.12, 1)
        large = BBox(0.5, 0.5, 0.13, 0.13, 3)
        for order in ([small, large], [large, small]):
            t = assign_targets([order], LEVELS, (256, 256), 6)
            assert t.cls[4][0, 3, 8, 8] == 1.0 and t.cls[4][0, 1, 8, 8] == 0.0

    @settings(max_examples=60, deadline=None)
    @given(boxes)
    def test_level_clamped_and_cell_in_range(self, b):
        lv = select_level(b, (64, 64), LEVELS)
        assert lv in LEVELS
        r, c = cell_of(b, lv, (64, 64))
        assert 0 <= r < 64 >> lv and 0 <= c < 64 >> lv

    def test_bad_class_rejected(self):
        with pytest.raises(ValueError):
            assign_targets([[BBox(0.5, 0.5, 0.1, 0.1, 6)]], LEVELS, (64, 64), 6)


class TestLoss:
    def test_zero_logits_no_gt(self):
        out = empty_output(64, logit=0.0)
        t = assign_targets([[]], LEVELS, (64, 64), 6)
        total, cls, box = compute_loss(out, t)
        assert cls == pytest.approx(math.log(2), abs=1e-12)
        assert box == 0.0 and total == pytest.approx(math.log(2))

    def test_zero_logits_with_gt_is_still_ln2(self):
        out = empty_output(64, logit=0.0)
        t = assign_targets([[BBox(0.3, 0.3, 0.2, 0.2, 4)]], LEVELS, (64, 64), 6)
        assert compute_loss(out, t)[1] == pytest.approx(math.log(2), abs=1e-12)

    def test_perfect_prediction_limit(self):
        gts = [BBox(0.3, 0.6, 0.25, 0.2, 1), BBox(0.7, 0.2, 0.5, 0.4, 4)]
        t = assign_targets([gts], LEVELS, (64, 64), 6)
        prev = None
        for mag in (5.0, 10.0, 20.0, 40.0):
            out = empty_output(64)
            for i in LEVELS:
                out.cls[i] = np.where(t.cls[i] > 0, mag, -mag)
                for r, c in zip(*np.nonzero(t.pos[i][0])):
                    out.box[i][0, :, r, c] = raw_from_target(t.box[i][0, :, r, c])
            _, cls, box = compute_loss(out, t)
            assert box == pytest.approx(0.0, abs=1e-12)
            if prev is not None:
                assert cls < prev
            prev = cls
        assert prev < 1e-15

    def test_weights_combine(self):
        rng = np.random.default_rng(3)
        out = empty_output(64)
        for i in LEVELS:
            out.cls[i] = rng.normal(size=out.cls[i].shape)
            out.box[i] = rng.normal(size=out.box[i].shape)
        t = assign_targets([[BBox(0.5, 0.5, 0.3, 0.3, 0)]], LEVELS, (64, 64), 6)
        total, cls, box = compute_loss(out, t, cls_weight=1.0, box_weight=5.0)
        assert total == pytest.approx(cls + 5.0 * box)
        assert cls >= 0 and box >= 0

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        out = empty_output(32, classes=2)
        for i in LEVELS:
            out.cls[i] = rng.normal(size=out.cls[i].shape)
            out.box[i] = rng.normal(size=out.box[i].shape)
        t = assign_targets([[BBox(0.45, 0.55, 0.4, 0.3, 1)]], LEVELS, (32, 32), 2)
        _, _, _, d_cls, d_box = compute_loss(out, t, with_grad=True)
        for i in LEVELS:
            f = lambda _: compute_loss(out, t)[0]  # noqa: E731
            assert grad_error(d_cls[i], finite_diff_grad(f, out.cls[i])) < 1e-4
            assert grad_error(d_box[i], finite_diff_grad(f, out.box[i])) < 1e-4


class TestDecode:
    def test_nothing_above_threshold(self):
        assert decode(empty_output(64), 0.5, 0.5) == [[]]

    @settings(max_examples=80, deadline=None)
    @given(boxes)
    def test_encode_decode_round_trip(self, b):
        out = empty_output(64)
        lv = select_level(b, (64, 64), LEVELS)
        r, c = cell_of(b, lv, (64, 64))
        out.cls[lv][0, b.class_id, r, c] = 5.0
        out.box[lv][0, :, r, c] = raw_from_target(encode_box(b, lv, (64, 64)))
        (det,) = decode(out, 0.5, 0.5)[0]
        assert det.class_id == b.class_id
        for got, want in zip((det.bbox.cx, det.bbox.cy, det.bbox.w, det.bbox.h),
                             (b.cx, b.cy, b.w, b.h)):
            assert got == pytest.approx(want, abs=1e-9)

    def test_overlapping_pair_keeps_higher(self):
        out = empty_output(64)
        out.cls[3][0, 0, 2, 2] = 3.0
        out.cls[3][0, 0, 2, 3] = 2.0
        out.box[3][0, 2:, 2, 2:4] = math.log(0.9)  # huge boxes one cell apart overlap heavily
        dets = decode(out, 0.5, 0.5)[0]
        assert len(dets) == 1 and dets[0].score == pytest.approx(1 / (1 + math.exp(-3.0)))

    def test_different_classes_not_suppressed(self):
        out = empty_output(64)
        out.cls[3][0, 0, 2, 2] = 3.0
        out.cls[3][0, 1, 2, 2] = 2.0
        assert len(decode(out, 0.5, 0.5)[0]) == 2

    def test_tie_order_level_row_col_class(self):
        out = empty_output(64)
        for lv, r, c, k in ((4, 1, 1, 0), (3, 5, 0, 2), (3, 0, 7, 1), (3, 0, 7, 0)):
            out.cls[lv][0, k, r, c] = 2.0
            out.box[lv][0, 2:, r, c] = math.log(0.01)
        dets = decode(out, 0.5, 0.5)[0]
        order = [(d.class_id, round(d.bbox.cx * 64), round(d.bbox.cy * 64)) for d in dets]
        assert [o[0] for o in order] == [0, 1, 2, 0]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 0.9))
    def test_nms_subset_sorted_separated(self, seed, thresh):
        rng = np.random.default_rng(seed)
        out = empty_output(64, classes=3)
        for i in LEVELS:
            out.cls[i] = rng.normal(0, 2, out.cls[i].shape)
            out.box[i] = rng.normal(0, 1, out.box[i].shape)
            out.box[i][:, 2:] -= 1.5
        dets = decode(out, 0.3, thresh, max_det=10_000)[0]
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        assert all(s > 0.3 for s in scores)
        for k in range(3):
            same = np.array([d.bbox.corners() for d in dets if d.class_id == k]).reshape(-1, 4)
            if len(same) > 1:
                m = iou_matrix(same, same)
                np.fill_diagonal(m, 0.0)
                assert m.max() < thresh

    def test_nms_pair(self):
        boxes_ = np.array([[0, 0, 1, 1], [0, 0, 1, 0.9]], dtype=float)
        assert nms(boxes_, 0.5) == [0]
        assert nms(boxes_, 0.95) == [0, 1]

    def test_bad_thresholds(self):
        with pytest.raises(ValueError):
            decode(empty_output(64), 1.5, 0.5)


def test_detections_file_round_trip(tmp_path):
    dets = {"000001": [Detection(BBox(0.1, 0.2, 0.3, 0.4, 5), 0.75)],
            "000002": [Detection(BBox(0.5, 0.5, 0.5, 0.5, 0), 0.125),
                       Detection(BBox(0.25, 0.75, 0.1, 0.2, 3), 0.0625)]}
    write_detections(tmp_path / "d.txt", dets)
    assert (tmp_path / "d.txt").read_text().splitlines()[0] == "000001 5 0.75 0.1 0.2 0.3 0.4"
    assert read_detections(tmp_path / "d.txt") == dets


def test_detections_file_malformed(tmp_path):
    (tmp_path / "d.txt").write_text("img 1 0.5 0.5 0.5\n")
    with pytest.raises(ValueError, match=":1:"):
        read_detections(tmp_path / "d.txt")
