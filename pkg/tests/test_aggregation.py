import numpy as np
import pytest

import halo3d.aggregation as agg
import halo3d.backbone as bb
import halo3d.geometry as geo
import halo3d.synth as synth
from halo3d.autodiff import ParamStore, Tensor, backward, constant, finite_diff_check_store, init_mlp
from halo3d.errors import ShapeMismatchError
from oracles import mlp_oracle, sa_oracle


def make_fg(rng, n=12, d=6):
    feats = constant(rng.normal(0, 1, (n, d)))
    scores = constant(np.full((n, 1), 0.5))
    return bb.ForegroundPoints(
        positions=rng.uniform(-3, 3, (n, 3)),
        features=feats,
        centeredness=scores,
        source_indices=np.arange(n),
    )


class TestPredictOffsets:
    def test_zero_weights_keep_points_in_place(self):
        rng = np.random.default_rng(0)
        fg = make_fg(rng)
        store = ParamStore(0)
        store.put("offset.w0", np.zeros((6, 8)))
        store.put("offset.b0", np.zeros(8))
        store.put("offset.w1", np.zeros((8, 3)))
        store.put("offset.b1", np.zeros(3))
        off = agg.predict_offsets(fg, store, "offset", hidden=8)
        assert (off.data == 0).all()
        c = agg.center_points(fg, off)
        np.testing.assert_array_equal(c.shifted.data, fg.positions)

    def test_constant_bias_shifts_everything(self):
        rng = np.random.default_rng(1)
        fg = make_fg(rng)
        store = ParamStore(0)
        store.put("offset.w0", np.zeros((6, 8)))
        store.put("offset.b0", np.zeros(8))
        store.put("offset.w1", np.zeros((8, 3)))
        store.put("offset.b1", np.array([0.5, -1.0, 2.0]))
        c = agg.center_points(fg, agg.predict_offsets(fg, store, "offset", hidden=8))
        np.testing.assert_allclose(
            c.shifted.data, fg.positions + np.array([0.5, -1.0, 2.0]), atol=1e-15
        )

    def test_matches_mlp_oracle(self):
        rng = np.random.default_rng(2)
        fg = make_fg(rng)
        store = ParamStore(5)
        agg.init_offset_head(store, "offset", 6, hidden=8)
        off = agg.predict_offsets(fg, store, "offset", hidden=8)
        params = {p: t.data for p, t in store.items()}
        want = mlp_oracle(params, "offset", (6, 8, 3), fg.features.data, final="none")
        np.testing.assert_allclose(off.data, want, atol=1e-12)


class TestOffsetTargets:
    def test_center_point(self):
        box = geo.Box3D(np.array([1.0, -2.0, 0.3]), np.array([3.0, 2.0, 1.5]), 0.7, 0)
        t = agg.compute_offset_targets(box.center[None, :], [box])
        np.testing.assert_array_equal(t.targets, [[0.0, 0.0, 0.0]])
        assert t.indicator.tolist() == [1.0]

    def test_background(self):
        box = geo.Box3D(np.zeros(3), np.ones(3), 0.0, 0)
        t = agg.compute_offset_targets(np.array([[9.0, 9.0, 9.0]]), [box])
        assert t.indicator.tolist() == [0.0]
        np.testing.assert_array_equal(t.targets, [[0.0, 0.0, 0.0]])

    def test_overlap_prefers_nearer_center(self):
        a = geo.Box3D(np.array([0.0, 0.0, 0.0]), np.array([4.0, 4.0, 4.0]), 0.0, 0)
        b = geo.Box3D(np.array([1.0, 0.0, 0.0]), np.array([4.0, 4.0, 4.0]), 0.0, 0)
        p = np.array([[0.9, 0.2, 0.0]])
        t = agg.compute_offset_targets(p, [a, b])
        np.testing.assert_allclose(t.targets[0], b.center - p[0], atol=1e-15)

    def test_inside_vector_points_at_center(self):
        rng = np.random.default_rng(3)
        box = geo.Box3D(np.array([2.0, 1.0, 0.0]), np.array([4.0, 3.0, 2.0]), 0.5, 0)
        pts = rng.uniform(-6, 6, (300, 3))
        t = agg.compute_offset_targets(pts, [box])
        inside = t.indicator == 1.0
        np.testing.assert_allclose(pts[inside] + t.targets[inside],
                                   np.broadcast_to(box.center, (inside.sum(), 3)), atol=1e-12)


class TestOffsetLoss:
    def one_point(self, err):
        pred = constant(np.array([err]))
        targets = agg.OffsetTargets(np.zeros((1, 3)), np.ones(1))
        return agg.offset_regression_loss(pred, targets).item()

    def test_perfect_prediction_is_zero(self):
        assert self.one_point([0.0, 0.0, 0.0]) == 0.0

    def test_quadratic_branch(self):
        assert self.one_point([0.5, 0.0, 0.0]) == pytest.approx(0.125, abs=1e-15)

    def test_linear_branch(self):
        assert self.one_point([2.0, 0.0, 0.0]) == pytest.approx(1.5, abs=1e-15)

    def test_no_foreground_is_zero(self):
        pred = constant(np.array([[3.0, 1.0, -2.0]]))
        targets = agg.OffsetTargets(np.zeros((1, 3)), np.zeros(1))
        assert agg.offset_regression_loss(pred, targets).item() == 0.0

    def test_background_gradient_exactly_zero(self):
        rng = np.random.default_rng(4)
        store = ParamStore(0)
        p = store.put("pred", rng.normal(0, 1, (5, 3)))
        indicator = np.array([1.0, 0.0, 1.0, 0.0, 0.0])
        t = np.where(indicator[:, None] > 0, rng.normal(0, 1, (5, 3)), 0.0)
        loss = agg.offset_regression_loss(p, agg.OffsetTargets(t, indicator))
        grads = backward(loss, store)
        assert (grads["pred"][indicator == 0] == 0).all()
        assert (grads["pred"][indicator == 1] != 0).any()

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(5)
        store = ParamStore(0)
        # Errors straddle the smooth-L1 transition on purpose.
        store.put("pred", np.array([[0.3, -0.2, 0.1], [1.4, 0.99, -2.0], [1.0, 0.0, 0.5]]))
        targets = agg.OffsetTargets(np.zeros((3, 3)), np.array([1.0, 1.0, 1.0]))

        def loss_fn():
            return agg.offset_regression_loss(store["pred"], targets)

        worst, _ = finite_diff_check_store(loss_fn, store)
        assert worst < 1e-4


def identity_sa_store(width):
    store = ParamStore(0)
    eye = np.eye(width)
    for b in range(2):
        store.put(f"aggr.branch{b}.w0", eye)
        store.put(f"aggr.branch{b}.b0", np.zeros(width))
    store.put("aggr.fuse.w0", np.vstack([eye, np.zeros((width, width))]))
    store.put("aggr.fuse.b0", np.zeros(width))
    return store


class TestAggregate:
    def test_coincident_points_share_features(self):
        # Two points shifted onto the same location must pool identically.
        d = 2
        width = 3 + d
        store = identity_sa_store(width)
        original = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
        offsets = constant(np.array([[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        feats = constant(np.array([[0.2, 0.8], [0.8, 0.2]]))
        c = agg.CenteredPoints(original, offsets, feats)
        cfg = bb.SALayerConfig(2, (0.5, 1.0), (2, 2), ((width,), (width,)), width, "fps")
        idx, out = agg.aggregate_instances(c, cfg, store, "aggr")
        np.testing.assert_array_equal(out.data[0], out.data[1])

    def test_distant_instances_never_mix(self):
        # Moving instance B (already beyond the outer radius) must not change
        # instance A's pooled features.
        rng = np.random.default_rng(6)
        d = 2
        width = 3 + d
        store = identity_sa_store(width)
        a_pts = rng.uniform(-0.3, 0.3, (4, 3))
        feats = constant(np.vstack([np.tile([1.0, 0.0], (4, 1)), np.tile([0.0, 1.0], (4, 1))]))
        cfg = bb.SALayerConfig(8, (1.0, 2.0), (4, 8), ((width,), (width,)), width, "fps")
        outs = []
        for bx in (10.0, 17.0):
            b_pts = rng.uniform(-0.3, 0.3, (4, 3)) + np.array([bx, 0.0, 0.0])
            pos = np.vstack([a_pts, b_pts])
            c = agg.CenteredPoints(pos, constant(np.zeros((8, 3))), feats)
            idx, out = agg.aggregate_instances(c, cfg, store, "aggr")
            a_rows = out.data[np.isin(idx, np.arange(4))]
            outs.append(a_rows[np.lexsort(a_rows.T)])
        np.testing.assert_array_equal(outs[0], outs[1])

    def test_matches_composition_oracle(self):
        rng = np.random.default_rng(7)
        d = 3
        cfg = bb.SALayerConfig(6, (1.5, 3.0), (4, 8), ((8, 8), (8, 8)), 16, "fps")
        store = ParamStore(11)
        for b in range(2):
            init_mlp(store, f"aggr.branch{b}", cfg.branch_spec(b, d))
        init_mlp(store, "aggr.fuse", cfg.fuse_spec())
        original = rng.uniform(-4, 4, (12, 3))
        offsets = constant(rng.normal(0, 0.5, (12, 3)))
        feats = constant(rng.normal(0, 1, (12, d)))
        c = agg.CenteredPoints(original, offsets, feats)
        idx, out = agg.aggregate_instances(c, cfg, store, "aggr")
        params = {p: t.data for p, t in store.items()}
        want_idx = geo.farthest_point_sampling(c.shifted.data, 6)
        want = sa_oracle(params, c.shifted.data, feats.data, cfg, "aggr", want_idx, geo.ball_query)
        assert idx.tolist() == want_idx.tolist()
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_gt_offsets_collapse_instances(self):
        # With oracle offsets every in-box point lands on its box center, so
        # grouping at the aggregation radius sees one tight cluster per object.
        scene = synth.generate_scene(
            synth.SceneSpec(seed=3, object_classes=(0, 2), clutter=0), *synth.PROFILES["toy"]
        )
        pos = scene.lidar.positions
        t = agg.compute_offset_targets(pos, scene.boxes)
        inside = t.indicator == 1.0
        assert inside.any()
        shifted = pos + t.targets
        centers = np.array([b.center for b in scene.boxes])
        d = np.linalg.norm(shifted[inside][:, None, :] - centers[None, :, :], axis=2)
        np.testing.assert_allclose(d.min(axis=1), 0.0, atol=1e-12)

    def test_gradient_through_shifted_positions(self):
        # Offsets enter the SA layer via relative positions; their gradient
        # must match finite differences.
        rng = np.random.default_rng(8)
        d = 2
        cfg = bb.SALayerConfig(3, (1.0, 2.0), (3, 6), ((4,), (4,)), 6, "fps")
        store = ParamStore(13)
        for b in range(2):
            init_mlp(store, f"aggr.branch{b}", cfg.branch_spec(b, d))
        init_mlp(store, "aggr.fuse", cfg.fuse_spec())
        original = rng.uniform(-1.5, 1.5, (8, 3))
        feats = constant(rng.normal(0, 1, (8, d)))
        store.put("offsets", rng.normal(0, 0.2, (8, 3)))

        def loss_fn():
            c = agg.CenteredPoints(original, store["offsets"], feats)
            _, out = agg.aggregate_instances(c, cfg, store, "aggr")
            return (out * out).sum()

        worst, excluded = finite_diff_check_store(loss_fn, store, ["offsets"])
        assert worst < 1e-4
        assert excluded < 24

    def test_shape_validation(self):
        with pytest.raises(ShapeMismatchError):
            agg.OffsetTargets(np.zeros((2, 3)), np.zeros(3))
        with pytest.raises(ShapeMismatchError):
            agg.OffsetTargets(np.ones((2, 3)), np.zeros(2))
