import math

import numpy as np
import pytest

from halo3d import geometry as geo
from halo3d import model as mod
from halo3d.aggregation import aggregate_instances, center_points, predict_offsets
from halo3d.autodiff import ParamStore
from halo3d.backbone import BackboneConfig, SALayerConfig, backbone_forward
from halo3d.detection import BIN_WIDTH, ENC_WIDTH
from halo3d.errors import ConfigError


def random_cloud(seed, n=60, modality="radar"):
    rng = np.random.default_rng(seed)
    pos = rng.normal(0.0, 3.0, (n, 3))
    attrs = rng.normal(0.0, 1.0, (n, len(geo.MODALITY_ATTRS[modality])))
    return geo.PointCloud(pos, attrs, modality)


def micro_store(seed=0, modality="radar"):
    cfg = mod.model_preset("micro", modality)
    store = ParamStore(seed)
    mod.init_model(store, cfg)
    return cfg, store


def zero_head(store, prefix, in_width, hidden, cls_bias):
    """Overwrite one detection head with zero weights and a fixed class bias."""
    dims_cls = (in_width,) + hidden + (3,)
    dims_reg = (in_width,) + hidden + (ENC_WIDTH,)
    for branch, dims in (("cls", dims_cls), ("reg", dims_reg)):
        for i in range(len(dims) - 1):
            store.put(f"{prefix}.{branch}.w{i}", np.zeros((dims[i], dims[i + 1])))
            store.put(f"{prefix}.{branch}.b{i}", np.zeros(dims[i + 1]))
    store.put(f"{prefix}.cls.b{len(dims_cls) - 2}", np.asarray(cls_bias, dtype=np.float64))


class TestPresets:
    def test_every_preset_round_trips_through_doc(self):
        for name in ("micro", "toy", "paper"):
            for modality in ("lidar", "radar"):
                cfg = mod.model_preset(name, modality)
                assert mod.model_config_from_doc(mod.model_config_to_doc(cfg)) == cfg

    def test_paper_lidar_dimensions(self):
        cfg = mod.model_preset("paper", "lidar")
        assert tuple(l.npoints for l in cfg.backbone.layers) == (4096, 1024, 512)
        assert tuple(l.fuse_dim for l in cfg.backbone.layers) == (64, 128, 256)
        assert cfg.backbone.layers[0].radii == (0.2, 0.8)
        assert cfg.backbone.layers[2].mlp_dims == ((128, 128, 256), (128, 256, 256))
        assert cfg.backbone.layers[0].sampling == "fps"
        assert all(l.sampling == "center_aware" for l in cfg.backbone.layers[1:])
        assert cfg.aggregation.npoints == 256
        assert cfg.aggregation.mlp_dims == ((256, 256, 512), (256, 512, 1024))
        assert cfg.instance_width == 512
        assert cfg.offset_hidden == 128
        assert cfg.shared_width == 512
        assert cfg.det_hidden == (256, 256)

    def test_paper_radar_keeps_fewer_points(self):
        cfg = mod.model_preset("paper", "radar")
        assert tuple(l.npoints for l in cfg.backbone.layers) == (512, 512, 256)
        assert cfg.aggregation.npoints == 256
        assert cfg.instance_width == 512

    def test_unknown_names_rejected(self):
        with pytest.raises(ConfigError):
            mod.model_preset("huge", "lidar")
        with pytest.raises(ConfigError):
            mod.model_preset("toy", "sonar")


class TestConfigValidation:
    def test_aggregation_cannot_want_more_points_than_backbone_keeps(self):
        base = mod.model_preset("micro", "radar")
        with pytest.raises(ConfigError):
            mod.ModelConfig(
                backbone=base.backbone,
                aggregation=SALayerConfig(64, (4.8, 6.4), (3, 5), ((8,), (8,)), 8, "fps"),
                offset_hidden=4,
                shared_width=6,
                det_hidden=(6,),
            )

    def test_aggregation_must_sample_by_fps(self):
        base = mod.model_preset("micro", "radar")
        with pytest.raises(ConfigError):
            mod.ModelConfig(
                backbone=base.backbone,
                aggregation=SALayerConfig(6, (4.8, 6.4), (3, 5), ((8,), (8,)), 8, "center_aware"),
                offset_hidden=4,
                shared_width=6,
                det_hidden=(6,),
            )

    def test_doc_missing_key_names_it(self):
        doc = mod.model_config_to_doc(mod.model_preset("micro", "lidar"))
        del doc["offset_hidden"]
        with pytest.raises(ConfigError, match="offset_hidden"):
            mod.model_config_from_doc(doc)


class TestInit:
    def test_stage1_path_groups(self):
        _, store = micro_store()
        groups = {p.split(".")[1] for p in store.paths()}
        assert groups == {"backbone", "offset", "aggregate", "det1"}

    def test_stage2_adds_projection_and_two_heads(self):
        cfg, store = micro_store()
        before = set(store.paths())
        mod.init_stage2_params(store, cfg, aux_instance_width=11)
        added = set(store.paths()) - before
        assert {p.split(".")[1] for p in added} == {"project", "det2", "shared"}
        assert before <= set(store.paths())
        assert store["model.project.pri.w0"].data.shape == (8, 6)
        assert store["model.project.aux.w0"].data.shape == (11, 6)
        assert store["model.det2.cls.w0"].data.shape == (8 + 6, 6)
        assert store["model.shared.cls.w0"].data.shape == (6, 6)


class TestForward:
    def test_shapes_and_anchor_consistency(self):
        cfg, store = micro_store()
        fr = mod.model_forward(random_cloud(1), cfg, store)
        m = cfg.aggregation.npoints
        assert fr.inst_features.data.shape == (m, cfg.instance_width)
        assert fr.inst_positions.shape == (m, 3)
        np.testing.assert_array_equal(fr.inst_positions, fr.centered.shifted.data[fr.inst_idx])
        assert fr.offsets.data.shape == fr.fg.positions.shape

    def test_forward_is_deterministic(self):
        cfg, store = micro_store()
        cloud = random_cloud(2)
        a = mod.model_forward(cloud, cfg, store)
        b = mod.model_forward(cloud, cfg, store)
        np.testing.assert_array_equal(a.inst_features.data, b.inst_features.data)
        np.testing.assert_array_equal(a.inst_idx, b.inst_idx)
        np.testing.assert_array_equal(a.inst_positions, b.inst_positions)

    def test_forward_matches_manual_stage_chain(self):
        cfg, store = micro_store(seed=3)
        cloud = random_cloud(4)
        fr = mod.model_forward(cloud, cfg, store)
        fg, _ = backbone_forward(cloud, cfg.backbone, store, "model.backbone")
        offsets = predict_offsets(fg, store, "model.offset", cfg.offset_hidden)
        centered = center_points(fg, offsets)
        idx, feats = aggregate_instances(centered, cfg.aggregation, store, "model.aggregate")
        np.testing.assert_array_equal(fr.inst_idx, idx)
        np.testing.assert_array_equal(fr.inst_features.data, feats.data)
        np.testing.assert_array_equal(fr.offsets.data, offsets.data)


class TestInfer:
    def test_empty_cloud_detects_nothing(self):
        cfg, store = micro_store()
        empty = geo.PointCloud(np.zeros((0, 3)), np.zeros((0, 2)), "radar")
        assert mod.infer(empty, cfg, store, stage=1) == []

    def test_uniform_logits_emit_nothing(self):
        # All-zero logits tie every class with background; the filter needs a
        # strict win, so nothing comes out.
        cfg, store = micro_store()
        zero_head(store, "model.det1", 8 + 6, (6,), [0.0, 0.0, 0.0])
        assert mod.infer(random_cloud(5), cfg, store, stage=1) == []

    def test_confident_head_emits_at_anchors(self):
        cfg, store = micro_store()
        zero_head(store, "model.det1", 8 + 6, (6,), [10.0, 0.0, 0.0])
        cloud = random_cloud(6)
        fr = mod.model_forward(cloud, cfg, store)
        dets = mod.infer(cloud, cfg, store, stage=1)
        assert 1 <= len(dets) <= cfg.aggregation.npoints
        want_score = math.exp(10.0) / (math.exp(10.0) + 3.0)
        anchors = {tuple(np.round(p, 9)) for p in fr.inst_positions}
        for d in dets:
            assert d.box.class_id == 0
            assert abs(d.score - want_score) < 1e-12
            assert tuple(np.round(d.box.center, 9)) in anchors
            np.testing.assert_allclose(d.box.size, np.ones(3), atol=1e-12)
            assert abs(d.box.yaw - (-math.pi + BIN_WIDTH / 2.0)) < 1e-12

    def test_stage_selects_head(self):
        cfg, store = micro_store()
        mod.init_stage2_params(store, cfg, aux_instance_width=8)
        zero_head(store, "model.det1", 8 + 6, (6,), [10.0, 0.0, 0.0])
        zero_head(store, "model.det2", 8 + 6, (6,), [0.0, 10.0, 0.0])
        cloud = random_cloud(7)
        first = mod.infer(cloud, cfg, store, stage=1)
        second = mod.infer(cloud, cfg, store, stage=2, aux_instance_width=8)
        assert first and all(d.box.class_id == 0 for d in first)
        assert second and all(d.box.class_id == 1 for d in second)
