import math

import numpy as np
import pytest

import halo3d.aggregation as agg
import halo3d.detection as det
import halo3d.geometry as geo
from halo3d.autodiff import ParamStore, constant, finite_diff_check_store, init_mlp
from halo3d.errors import ContractError
from oracles import mlp_oracle


def random_box(rng):
    return geo.Box3D(
        center=rng.uniform(-10, 10, 3),
        size=rng.uniform(0.5, 5.0, 3),
        yaw=float(rng.uniform(-math.pi, math.pi)),
        class_id=int(rng.integers(0, 3)),
    )


class TestEncodeDecode:
    def test_anchor_at_center_bin_center_yaw(self):
        yaw = -math.pi + 3.5 * det.BIN_WIDTH  # center of bin 3
        box = geo.Box3D(np.array([1.0, 2.0, 3.0]), np.array([1.0, 1.0, 1.0]), yaw, 0)
        enc = det.encode_box(box, box.center)
        assert (enc[0:3] == 0).all()
        np.testing.assert_array_equal(enc[3:6], 0.0)
        assert enc[6:18].tolist() == [0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0]
        assert enc[18:30].tolist() == [0.0] * 12

    def test_round_trip_1000_random_boxes(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            box = random_box(rng)
            anchor = rng.uniform(-10, 10, 3)
            back = det.decode_box(det.encode_box(box, anchor), anchor, box.class_id)
            np.testing.assert_allclose(back.center, box.center, atol=1e-9)
            np.testing.assert_allclose(back.size, box.size, atol=1e-9)
            dyaw = geo.wrap_angle(back.yaw - box.yaw)
            assert abs(dyaw) < 1e-9

    def test_yaw_pi_folds_into_last_bin(self):
        box = geo.Box3D(np.zeros(3), np.ones(3), math.pi, 0)
        enc = det.encode_box(box, np.zeros(3))
        assert enc[6:18].argmax() == 11
        assert enc[18 + 11] == pytest.approx(1.0, abs=1e-12)

    def test_yaw_just_above_minus_pi(self):
        box = geo.Box3D(np.zeros(3), np.ones(3), -math.pi + 1e-9, 0)
        enc = det.encode_box(box, np.zeros(3))
        assert enc[6:18].argmax() == 0
        back = det.decode_box(enc, np.zeros(3))
        assert abs(geo.wrap_angle(back.yaw - box.yaw)) < 1e-12


def tiny_head():
    return det.DetHeadConfig(instance_width=6, shared_width=4, hidden=(8,))


class TestHeadForward:
    def test_zero_weights_zero_outputs(self):
        cfg = tiny_head()
        store = ParamStore(0)
        for branch, out in (("cls", 3), ("reg", det.ENC_WIDTH)):
            store.put(f"head.{branch}.w0", np.zeros((10, 8)))
            store.put(f"head.{branch}.b0", np.zeros(8))
            store.put(f"head.{branch}.w1", np.zeros((8, out)))
            store.put(f"head.{branch}.b1", np.zeros(out))
        rng = np.random.default_rng(1)
        cls, reg = det.head_forward(
            constant(rng.normal(0, 1, (5, 6))), constant(rng.normal(0, 1, (5, 4))),
            cfg, store, "head",
        )
        assert (cls.data == 0).all() and (reg.data == 0).all()

    def test_stage1_zero_fill_matches_explicit_zeros(self):
        rng = np.random.default_rng(2)
        cfg = tiny_head()
        store = ParamStore(7)
        det.init_det_head(store, "head", cfg)
        inst = constant(rng.normal(0, 1, (5, 6)))
        a = det.head_forward(inst, None, cfg, store, "head")
        b = det.head_forward(inst, constant(np.zeros((5, 4))), cfg, store, "head")
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_matches_mlp_oracle(self):
        rng = np.random.default_rng(3)
        cfg = tiny_head()
        store = ParamStore(9)
        det.init_det_head(store, "head", cfg)
        inst = rng.normal(0, 1, (4, 6))
        h = rng.normal(0, 1, (4, 4))
        cls, reg = det.head_forward(constant(inst), constant(h), cfg, store, "head")
        params = {p: t.data for p, t in store.items()}
        x = np.concatenate([inst, h], axis=1)
        np.testing.assert_allclose(
            cls.data, mlp_oracle(params, "head.cls", (10, 8, 3), x, final="none"), atol=1e-12
        )
        np.testing.assert_allclose(
            reg.data, mlp_oracle(params, "head.reg", (10, 8, 30), x, final="none"), atol=1e-12
        )


class TestAssignTargets:
    def test_foreground_iff_offset_indicator(self):
        rng = np.random.default_rng(4)
        boxes = [
            geo.Box3D(np.array([0.0, 0.0, 0.0]), np.array([4.0, 2.0, 1.5]), 0.3, 0),
            geo.Box3D(np.array([6.0, 1.0, 0.0]), np.array([1.8, 0.6, 1.7]), -0.8, 2),
        ]
        pts = rng.uniform(-8, 8, (400, 3))
        assigned = det.assign_targets(pts, boxes)
        offsets = agg.compute_offset_targets(pts, boxes)
        np.testing.assert_array_equal(assigned.fg_mask, offsets.indicator == 1.0)

    def test_class_ids_shift_by_one(self):
        box = geo.Box3D(np.zeros(3), np.ones(3), 0.0, 2)
        t = det.assign_targets(np.zeros((1, 3)), [box])
        assert t.class_targets.tolist() == [3]

    def test_background_rows_zero(self):
        box = geo.Box3D(np.zeros(3), np.ones(3), 0.0, 0)
        t = det.assign_targets(np.array([[9.0, 9.0, 9.0]]), [box])
        assert t.class_targets.tolist() == [0]
        assert (t.reg_targets == 0).all()

    def test_regression_target_decodes_to_box(self):
        box = geo.Box3D(np.array([1.0, -1.0, 0.2]), np.array([4.0, 1.8, 1.6]), 0.7, 1)
        anchor = np.array([0.5, -0.8, 0.0])
        t = det.assign_targets(anchor[None, :], [box])
        back = det.decode_box(t.reg_targets[0], anchor, 1)
        np.testing.assert_allclose(back.center, box.center, atol=1e-12)
        np.testing.assert_allclose(back.size, box.size, atol=1e-12)
        assert abs(geo.wrap_angle(back.yaw - box.yaw)) < 1e-12


class TestDetectionLoss:
    def perfect_case(self):
        box = geo.Box3D(np.array([1.0, 2.0, 0.5]), np.array([4.0, 1.8, 1.6]), 0.3, 0)
        anchors = np.array([[1.2, 2.0, 0.4], [9.0, 9.0, 9.0]])
        targets = det.assign_targets(anchors, [box])
        reg = targets.reg_targets.copy()
        # Saturate the correct yaw bin so its cross-entropy vanishes.
        reg[0, 6:18] = np.where(reg[0, 6:18] > 0, 60.0, 0.0)
        cls = np.where(
            np.arange(1, 4)[None, :] == targets.class_targets[:, None], 60.0, -60.0
        ).astype(np.float64)
        return cls, reg, targets

    def test_perfect_refinement_vanishes(self):
        cls, reg, targets = self.perfect_case()
        _, l_cls, l_ref = det.detection_loss(constant(cls), constant(reg), targets)
        assert l_ref.item() < 1e-12
        assert l_cls.item() < 1e-12  # saturated logits, not exactly zero

    def test_no_foreground_degenerates_to_cls(self):
        rng = np.random.default_rng(6)
        targets = det.assign_targets(rng.uniform(5, 9, (4, 3)), [])
        cls = constant(rng.normal(0, 1, (4, 3)))
        reg = constant(rng.normal(0, 1, (4, 30)))
        total, l_cls, l_ref = det.detection_loss(cls, reg, targets)
        assert l_ref.item() == 0.0
        assert total.item() == pytest.approx(l_cls.item(), abs=1e-15)

    def test_two_point_hand_value(self):
        # One background point, one Car point; every term evaluated on paper:
        # cls: mean of ce([0,.2,-.1,.3] -> 0) and ce([0,1,.5,-.5] -> 1)
        # ref: quadratic smooth-L1 on (-.1,.1,0,.1,-.2,0), bin CE with logit 2
        #      at the true bin, quadratic residual error 0.2 - 0.14591559...
        box = geo.Box3D(
            np.array([1.5, 2.0, 0.5]), np.array([4.0, 1.8, 1.6]), 0.3, 0
        )
        anchors = np.array([[9.0, 9.0, 9.0], [1.0, 2.0, 0.5]])
        targets = det.assign_targets(anchors, [box])
        assert targets.class_targets.tolist() == [0, 1]
        cls = np.array([[0.2, -0.1, 0.3], [1.0, 0.5, -0.5]])
        reg = np.zeros((2, 30))
        reg[1, 0:3] = [0.4, 0.1, 0.0]
        reg[1, 3:6] = np.log(box.size) + [0.1, -0.2, 0.0]
        reg[1, 6 + 6] = 2.0
        reg[1, 18 + 6] = 0.2
        total, l_cls, l_ref = det.detection_loss(constant(cls), constant(reg), targets)
        assert l_cls.item() == pytest.approx(1.1430452881202138, abs=1e-12)
        assert l_ref.item() == pytest.approx(0.948218272121138, abs=1e-12)
        assert total.item() == pytest.approx(2.0912635602413516, abs=1e-12)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(7)
        box = geo.Box3D(np.array([0.0, 0.0, 0.0]), np.array([3.0, 2.0, 1.5]), 0.9, 1)
        anchors = np.vstack([rng.uniform(-1, 1, (3, 3)) * 0.4, [[7.0, 7.0, 7.0]]])
        targets = det.assign_targets(anchors, [box])
        assert targets.fg_mask.sum() >= 2
        cfg = det.DetHeadConfig(instance_width=4, shared_width=3, hidden=(6,))
        store = ParamStore(21)
        det.init_det_head(store, "head", cfg)
        inst = constant(rng.normal(0, 1, (4, 4)))
        h = constant(rng.normal(0, 1, (4, 3)))

        def loss_fn():
            cls, reg = det.head_forward(inst, h, cfg, store, "head")
            total, _, _ = det.detection_loss(cls, reg, targets)
            return total

        worst, _ = finite_diff_check_store(loss_fn, store, ["head.cls.w0", "head.reg.w1"])
        assert worst < 1e-4


class TestSharedHead:
    def test_zero_weight_head_baseline(self):
        # All-zero logits give CE log(4) on classes and log(12) on yaw bins.
        # The box sits at the anchor with yaw at a bin center and unit-free
        # sizes of 2, so the only other term is quadratic on the log sizes.
        cfg = det.DetHeadConfig(instance_width=5, shared_width=0, hidden=(4,))
        store = ParamStore(0)
        for branch, out in (("cls", 3), ("reg", det.ENC_WIDTH)):
            store.put(f"shared.{branch}.w0", np.zeros((5, 4)))
            store.put(f"shared.{branch}.b0", np.zeros(4))
            store.put(f"shared.{branch}.w1", np.zeros((4, out)))
            store.put(f"shared.{branch}.b1", np.zeros(out))
        yaw = -math.pi + 6.5 * det.BIN_WIDTH
        box = geo.Box3D(np.zeros(3), np.array([2.0, 2.0, 2.0]), yaw, 0)
        anchors = np.array([[0.0, 0.0, 0.0], [8.0, 8.0, 8.0]])
        targets = det.assign_targets(anchors, [box])
        h = constant(np.random.default_rng(1).normal(0, 1, (2, 5)))
        loss = det.shared_detection_loss(h, cfg, store, "shared", targets)
        want = math.log(4.0) + math.log(12.0) + 3 * 0.5 * math.log(2.0) ** 2
        assert loss.item() == pytest.approx(want, abs=1e-12)

    def test_rejects_hallucinated_slot(self):
        cfg = det.DetHeadConfig(instance_width=5, shared_width=0, hidden=(4,))
        store = ParamStore(0)
        det.init_det_head(store, "shared", cfg)
        with pytest.raises(ContractError):
            det.head_forward(
                constant(np.ones((2, 5))), constant(np.ones((2, 5))), cfg, store, "shared"
            )


class TestSerialization:
    def test_round_trip(self):
        rng = np.random.default_rng(8)
        d = geo.Detection(box=random_box(rng), score=0.73)
        doc = det.detection_to_doc(d)
        back = det.detection_from_doc(doc)
        np.testing.assert_array_equal(back.box.center, d.box.center)
        np.testing.assert_array_equal(back.box.size, d.box.size)
        assert back.box.yaw == d.box.yaw
        assert back.box.class_id == d.box.class_id
        assert back.score == d.score
