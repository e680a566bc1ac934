"""Full detector assembly: backbone, offset head, instance aggregation,
feature projection, and the two detection heads, with named presets.

Parameter layout under one prefix (default "model"):
  backbone.*   SA stack + scoring head
  offset.*     per-point offset MLP
  aggregate.*  instance-pooling SA layer
  det1.*       first-pass detection head (hallucinated slot zero-filled)
  det2.*       second-pass detection head (created for the imitation stage)
  project.*    both projection MLPs (created for the imitation stage)
  shared.*     shared-space detection head (created for the imitation stage)

A checkpoint carries the config and stage in its meta block, so inference
needs nothing beyond the checkpoint file.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .aggregation import CenteredPoints, aggregate_instances, center_points, init_offset_head, predict_offsets
from .autodiff import ParamStore, Tensor, init_mlp
from .backbone import (
    BackboneAux,
    BackboneConfig,
    ForegroundPoints,
    SALayerConfig,
    backbone_config_from_doc,
    backbone_config_to_doc,
    backbone_forward,
    init_backbone,
)
from .crossmodal import ProjectionConfig, init_projection, project_features
from .detection import DetHeadConfig, decode_box, head_forward, init_det_head
from .errors import ConfigError

INFER_NMS_IOU = 0.01


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig
    aggregation: SALayerConfig
    offset_hidden: int
    shared_width: int
    det_hidden: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "det_hidden", tuple(int(h) for h in self.det_hidden))
        if self.offset_hidden < 1 or self.shared_width < 1:
            raise ConfigError("offset_hidden and shared_width must be positive")
        if self.aggregation.npoints > self.backbone.out_points:
            raise ConfigError(
                f"aggregation wants {self.aggregation.npoints} of the backbone's"
                f" {self.backbone.out_points} points"
            )
        if self.aggregation.sampling != "fps":
            raise ConfigError("aggregation layer samples by fps (no scores at that depth)")

    @property
    def modality(self) -> str:
        return self.backbone.modality

    @property
    def instance_width(self) -> int:
        return self.aggregation.fuse_dim

    def det_head(self) -> DetHeadConfig:
        return DetHeadConfig(self.instance_width, self.shared_width, self.det_hidden)

    def shared_head(self) -> DetHeadConfig:
        return DetHeadConfig(self.shared_width, 0, self.det_hidden)

    def projection(self, aux_instance_width: int) -> ProjectionConfig:
        return ProjectionConfig(self.instance_width, aux_instance_width, self.shared_width)


def _sa_to_doc(layer: SALayerConfig) -> dict:
    return {
        "npoints": layer.npoints,
        "radii": list(layer.radii),
        "num_query": list(layer.num_query),
        "mlps": [list(b) for b in layer.mlp_dims],
        "fuse": layer.fuse_dim,
        "sampling": layer.sampling,
    }


def _sa_from_doc(doc: dict) -> SALayerConfig:
    return SALayerConfig(
        npoints=int(doc["npoints"]),
        radii=tuple(doc["radii"]),
        num_query=tuple(doc["num_query"]),
        mlp_dims=tuple(tuple(b) for b in doc["mlps"]),
        fuse_dim=int(doc["fuse"]),
        sampling=str(doc["sampling"]),
    )


def model_config_to_doc(cfg: ModelConfig) -> dict:
    return {
        "modality": cfg.modality,
        "backbone": backbone_config_to_doc(cfg.backbone),
        "aggregation": _sa_to_doc(cfg.aggregation),
        "offset_hidden": cfg.offset_hidden,
        "shared_width": cfg.shared_width,
        "det_hidden": list(cfg.det_hidden),
    }


def model_config_from_doc(doc: dict) -> ModelConfig:
    for key in ("modality", "backbone", "aggregation", "offset_hidden", "shared_width", "det_hidden"):
        if key not in doc:
            raise ConfigError(f"model config: missing {key!r}")
    return ModelConfig(
        backbone=backbone_config_from_doc(doc["backbone"], doc["modality"]),
        aggregation=_sa_from_doc(doc["aggregation"]),
        offset_hidden=int(doc["offset_hidden"]),
        shared_width=int(doc["shared_width"]),
        det_hidden=tuple(doc["det_hidden"]),
    )


def model_preset(name: str, modality: str) -> ModelConfig:
    """Named architectures. "paper" is the full-scale configuration; "toy" is
    the desk-scale benchmark; "micro" is small enough for finite-difference
    runs."""
    if modality not in geo.MODALITY_ATTRS:
        raise ConfigError(f"unknown modality {modality!r}")
    if name == "paper":
        npoints = (4096, 1024, 512) if modality == "lidar" else (512, 512, 256)
        layers = (
            SALayerConfig(npoints[0], (0.2, 0.8), (16, 32), ((16, 16, 32), (32, 32, 64)), 64, "fps"),
            SALayerConfig(npoints[1], (0.8, 1.6), (16, 32), ((64, 64, 128), (64, 96, 128)), 128, "center_aware"),
            SALayerConfig(npoints[2], (1.6, 4.8), (16, 32), ((128, 128, 256), (128, 256, 256)), 256, "center_aware"),
        )
        return ModelConfig(
            backbone=BackboneConfig(layers, modality),
            aggregation=SALayerConfig(
                min(256, npoints[2]), (4.8, 6.4), (16, 32), ((256, 256, 512), (256, 512, 1024)), 512, "fps"
            ),
            offset_hidden=128,
            shared_width=512,
            det_hidden=(256, 256),
        )
    if name == "toy":
        if modality == "lidar":
            layers = (
                SALayerConfig(256, (0.5, 1.0), (8, 16), ((16, 16), (16, 16)), 32, "fps"),
                SALayerConfig(64, (1.0, 3.0), (8, 16), ((32, 32), (32, 32)), 64, "center_aware"),
            )
        else:
            layers = (
                SALayerConfig(64, (1.0, 2.0), (8, 16), ((16, 16), (16, 16)), 32, "fps"),
                SALayerConfig(32, (2.0, 4.0), (8, 16), ((32, 32), (32, 32)), 64, "center_aware"),
            )
        return ModelConfig(
            backbone=BackboneConfig(layers, modality),
            aggregation=SALayerConfig(
                layers[-1].npoints, (4.8, 6.4), (8, 16), ((64, 64), (64, 128)), 128, "fps"
            ),
            offset_hidden=32,
            shared_width=64,
            det_hidden=(64, 64),
        )
    if name == "micro":
        layers = (
            SALayerConfig(12, (0.8, 1.6), (3, 5), ((4,), (4,)), 8, "fps"),
            SALayerConfig(6, (1.6, 3.2), (3, 5), ((6,), (6,)), 8, "center_aware"),
        )
        return ModelConfig(
            backbone=BackboneConfig(layers, modality),
            aggregation=SALayerConfig(6, (4.8, 6.4), (3, 5), ((8,), (8,)), 8, "fps"),
            offset_hidden=4,
            shared_width=6,
            det_hidden=(6,),
        )
    raise ConfigError(f"unknown preset {name!r}")


def init_model(store: ParamStore, cfg: ModelConfig, prefix: str = "model") -> None:
    """Create the first-stage parameter set (no projection, no shared head)."""
    init_backbone(store, f"{prefix}.backbone", cfg.backbone)
    init_offset_head(store, f"{prefix}.offset", cfg.backbone.out_dim, cfg.offset_hidden)
    for b in range(2):
        init_mlp(
            store, f"{prefix}.aggregate.branch{b}", cfg.aggregation.branch_spec(b, cfg.backbone.out_dim)
        )
    init_mlp(store, f"{prefix}.aggregate.fuse", cfg.aggregation.fuse_spec())
    init_det_head(store, f"{prefix}.det1", cfg.det_head())


def init_stage2_params(
    store: ParamStore, cfg: ModelConfig, aux_instance_width: int, prefix: str = "model"
) -> None:
    """Add the imitation-stage parameters: both projections, the new detection
    head, and the shared-space head."""
    init_projection(store, f"{prefix}.project", cfg.projection(aux_instance_width))
    init_det_head(store, f"{prefix}.det2", cfg.det_head())
    init_det_head(store, f"{prefix}.shared", cfg.shared_head())


@dataclass
class ForwardResult:
    fg: ForegroundPoints
    backbone_aux: BackboneAux
    offsets: Tensor
    centered: CenteredPoints
    inst_idx: np.ndarray  # retained-point indices into the centered set
    inst_features: Tensor  # (M, instance_width)
    inst_positions: np.ndarray  # shifted positions of the retained points


def model_forward(
    cloud: geo.PointCloud, cfg: ModelConfig, store: ParamStore, prefix: str = "model"
) -> ForwardResult:
    fg, backbone_aux = backbone_forward(cloud, cfg.backbone, store, f"{prefix}.backbone")
    offsets = predict_offsets(fg, store, f"{prefix}.offset", cfg.offset_hidden)
    centered = center_points(fg, offsets)
    inst_idx, inst_features = aggregate_instances(
        centered, cfg.aggregation, store, f"{prefix}.aggregate"
    )
    return ForwardResult(
        fg=fg,
        backbone_aux=backbone_aux,
        offsets=offsets,
        centered=centered,
        inst_idx=inst_idx,
        inst_features=inst_features,
        inst_positions=centered.shifted.data[inst_idx],
    )


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def infer(
    cloud: geo.PointCloud,
    cfg: ModelConfig,
    store: ParamStore,
    stage: int,
    prefix: str = "model",
    aux_instance_width: int | None = None,
) -> list[geo.Detection]:
    """Detect with the primary network alone.

    A point emits a candidate only when its best class probability beats the
    background probability; candidates then pass class-wise NMS at IoU 0.01.
    """
    if cloud.n == 0:
        return []
    fr = model_forward(cloud, cfg, store, prefix)
    if stage == 2:
        pcfg = cfg.projection(aux_instance_width if aux_instance_width else cfg.instance_width)
        h = project_features(fr.inst_features, "primary", pcfg, store, f"{prefix}.project")
        cls, reg = head_forward(fr.inst_features, h, cfg.det_head(), store, f"{prefix}.det2")
    else:
        cls, reg = head_forward(fr.inst_features, None, cfg.det_head(), store, f"{prefix}.det1")
    n = cls.data.shape[0]
    probs = _softmax_rows(np.concatenate([np.zeros((n, 1)), cls.data], axis=1))
    best = probs[:, 1:].argmax(axis=1)
    keep = probs[np.arange(n), best + 1] > probs[:, 0]
    dets = []
    for i in np.flatnonzero(keep):
        box = decode_box(reg.data[i], fr.inst_positions[i], int(best[i]))
        dets.append(geo.Detection(box=box, score=float(probs[i, best[i] + 1])))
    return geo.nms(dets, INFER_NMS_IOU)
