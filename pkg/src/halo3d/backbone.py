"""Point-feature backbone: stacked set-abstraction layers with a learned
center-aware sampler.

Each layer picks a subset of the incoming points as group centers (farthest
point sampling for the first layer, top-k by predicted centeredness after
that), gathers neighbors at two radii, lifts (relative position, feature)
pairs through per-branch MLPs, max-pools within each group, and fuses the two
branch outputs. A small scoring head after the first layer predicts per-point
centeredness; the centeredness loss trains it so that later layers keep points
near object centers.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .autodiff import (
    MlpSpec,
    ParamStore,
    Tensor,
    concat,
    constant,
    gather_rows,
    grouped_max_pool,
    init_mlp,
    mlp_forward,
    trace_event,
)
from .errors import ConfigError, ContractError, ShapeMismatchError

SAMPLING_MODES = ("fps", "center_aware")
SCORE_HIDDEN = 64
MASK_MODES = ("centerness", "binary")


@dataclass(frozen=True)
class SALayerConfig:
    """One set-abstraction layer.

    mlp_dims holds the hidden/output widths of the two radius branches; the
    input width (3 + incoming feature width) is derived at parameter-init
    time, so consecutive layers always chain.
    """

    npoints: int
    radii: tuple[float, float]
    num_query: tuple[int, int]
    mlp_dims: tuple[tuple[int, ...], tuple[int, ...]]
    fuse_dim: int
    sampling: str = "fps"

    def __post_init__(self):
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        object.__setattr__(self, "num_query", tuple(int(k) for k in self.num_query))
        object.__setattr__(
            self, "mlp_dims", tuple(tuple(int(w) for w in b) for b in self.mlp_dims)
        )
        if self.npoints < 1:
            raise ConfigError("npoints must be >= 1")
        if len(self.radii) != 2 or not 0 < self.radii[0] < self.radii[1]:
            raise ConfigError(f"radii must be two ascending positive values, got {self.radii}")
        if len(self.num_query) != 2 or min(self.num_query) < 1:
            raise ConfigError(f"num_query must be two counts >= 1, got {self.num_query}")
        if len(self.mlp_dims) != 2 or any(len(b) < 1 for b in self.mlp_dims):
            raise ConfigError("mlp_dims must give widths for both radius branches")
        if any(w < 1 for b in self.mlp_dims for w in b):
            raise ConfigError("branch widths must be positive")
        if self.fuse_dim < 1:
            raise ConfigError("fuse_dim must be >= 1")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")

    def branch_spec(self, branch: int, in_width: int) -> MlpSpec:
        return MlpSpec((3 + in_width,) + self.mlp_dims[branch], final_activation="relu")

    def fuse_spec(self) -> MlpSpec:
        cat = self.mlp_dims[0][-1] + self.mlp_dims[1][-1]
        return MlpSpec((cat, self.fuse_dim), final_activation="relu")


@dataclass(frozen=True)
class BackboneConfig:
    layers: tuple[SALayerConfig, ...]
    modality: str

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ConfigError("backbone needs at least one layer")
        if self.modality not in geo.MODALITY_ATTRS:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.layers[0].sampling != "fps":
            raise ConfigError("first layer must use fps sampling (no scores exist yet)")

    @property
    def attr_width(self) -> int:
        return len(geo.MODALITY_ATTRS[self.modality])

    @property
    def out_dim(self) -> int:
        return self.layers[-1].fuse_dim

    @property
    def out_points(self) -> int:
        return self.layers[-1].npoints


def _require(doc: dict, key: str, where: str):
    if key not in doc:
        raise ConfigError(f"{where}: missing {key!r}")
    return doc[key]


def backbone_config_from_doc(doc: dict, modality: str) -> BackboneConfig:
    """Parse {"layers": [{"npoints", "radii", "num_query", "mlps", "fuse",
    "sampling"}, ...]} into a validated config."""
    rows = _require(doc, "layers", "backbone config")
    layers = []
    for i, row in enumerate(rows):
        where = f"backbone layer {i}"
        layers.append(
            SALayerConfig(
                npoints=int(_require(row, "npoints", where)),
                radii=tuple(_require(row, "radii", where)),
                num_query=tuple(_require(row, "num_query", where)),
                mlp_dims=tuple(tuple(b) for b in _require(row, "mlps", where)),
                fuse_dim=int(_require(row, "fuse", where)),
                sampling=str(_require(row, "sampling", where)),
            )
        )
    return BackboneConfig(layers=tuple(layers), modality=modality)


def backbone_config_to_doc(cfg: BackboneConfig) -> dict:
    return {
        "layers": [
            {
                "npoints": layer.npoints,
                "radii": list(layer.radii),
                "num_query": list(layer.num_query),
                "mlps": [list(b) for b in layer.mlp_dims],
                "fuse": layer.fuse_dim,
                "sampling": layer.sampling,
            }
            for layer in cfg.layers
        ]
    }


@dataclass
class ForegroundPoints:
    """Backbone output: retained points with features and their predicted
    centeredness, plus indices back into the original input cloud."""

    positions: np.ndarray  # (N_f, 3)
    features: Tensor  # (N_f, D)
    centeredness: Tensor  # (N_f, 1) in (0, 1)
    source_indices: np.ndarray  # (N_f,) into the caller's cloud

    def __post_init__(self):
        n = self.positions.shape[0]
        if (
            self.features.data.shape[0] != n
            or self.centeredness.data.shape != (n, 1)
            or self.source_indices.shape != (n,)
        ):
            raise ShapeMismatchError("ForegroundPoints fields disagree on point count")
        if ((self.centeredness.data <= 0) | (self.centeredness.data >= 1)).any():
            raise ContractError("predicted centeredness must lie strictly inside (0, 1)")

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass
class BackboneAux:
    """Training-time extras: every point the scoring head saw (first-layer
    output), so the centeredness loss covers more than the final survivors."""

    score_positions: np.ndarray  # (n1, 3)
    scores: Tensor  # (n1, 1)


@dataclass
class CenterednessTargets:
    y: np.ndarray  # (N,) in [0, 1], 0 for background
    mask: np.ndarray  # (N,) in [0, 1], 0 wherever y == 0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.y.shape != self.mask.shape or self.y.ndim != 1:
            raise ShapeMismatchError("targets and mask must be matching 1-D arrays")
        if ((self.y < 0) | (self.y > 1)).any() or ((self.mask < 0) | (self.mask > 1)).any():
            raise ContractError("centeredness targets and mask must lie in [0, 1]")
        if (self.mask[self.y == 0] != 0).any():
            raise ContractError("mask must be 0 wherever the target is 0")


def center_aware_sample(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, descending, ties to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if not 1 <= k <= n:
        raise ContractError(f"cannot sample {k} of {n} points")
    order = np.lexsort((np.arange(n), -scores))
    return order[:k]


def sa_layer_forward(
    positions,
    features: Tensor,
    cfg: SALayerConfig,
    store: ParamStore,
    prefix: str,
    sampling_scores: np.ndarray | None = None,
) -> tuple[np.ndarray, Tensor]:
    """Run one set-abstraction layer; returns (center indices, fused features).

    positions may be a plain (N, 3) array or a Tensor when gradients should
    flow through the relative-position inputs (shifted points). Grouping and
    center selection always use the numeric values.
    """
    pos_t = positions if isinstance(positions, Tensor) else None
    pos = positions.data if pos_t is not None else np.asarray(positions, dtype=np.float64)
    n = pos.shape[0]
    if features.data.shape[0] != n:
        raise ShapeMismatchError(f"{n} positions but {features.data.shape[0]} feature rows")
    if cfg.npoints > n:
        raise ContractError(f"layer wants {cfg.npoints} centers from {n} points")
    if cfg.sampling == "fps":
        center_idx = geo.farthest_point_sampling(pos, cfg.npoints)
    else:
        if sampling_scores is None:
            raise ContractError("center_aware layer needs sampling scores")
        center_idx = center_aware_sample(sampling_scores, cfg.npoints)
    trace_event(center_idx)

    in_width = features.data.shape[1]
    pooled = []
    for b in range(2):
        k = cfg.num_query[b]
        group = geo.ball_query(pos[center_idx], pos, cfg.radii[b], k)
        trace_event(group.indices)
        trace_event(group.member_mask)
        flat = group.indices.reshape(-1)
        rep = np.repeat(center_idx, k)
        if pos_t is not None:
            rel = gather_rows(pos_t, flat) - gather_rows(pos_t, rep)
        else:
            rel = constant(pos[flat] - pos[rep])
        lifted = mlp_forward(
            store,
            f"{prefix}.branch{b}",
            cfg.branch_spec(b, in_width),
            concat([rel, gather_rows(features, flat)], axis=1),
        )
        pooled.append(
            grouped_max_pool(
                lifted.reshape((cfg.npoints, k, cfg.mlp_dims[b][-1])), group.member_mask
            )
        )
    fused = mlp_forward(store, f"{prefix}.fuse", cfg.fuse_spec(), concat(pooled, axis=1))
    return center_idx, fused


def init_backbone(store: ParamStore, prefix: str, cfg: BackboneConfig) -> None:
    in_width = cfg.attr_width
    for i, layer in enumerate(cfg.layers):
        for b in range(2):
            init_mlp(store, f"{prefix}.sa{i}.branch{b}", layer.branch_spec(b, in_width))
        init_mlp(store, f"{prefix}.sa{i}.fuse", layer.fuse_spec())
        in_width = layer.fuse_dim
    init_mlp(store, f"{prefix}.score", score_head_spec(cfg))


def score_head_spec(cfg: BackboneConfig) -> MlpSpec:
    return MlpSpec((cfg.layers[0].fuse_dim, SCORE_HIDDEN, 1), final_activation="sigmoid")


def backbone_forward(
    cloud: geo.PointCloud, cfg: BackboneConfig, store: ParamStore, prefix: str = "backbone"
) -> tuple[ForegroundPoints, BackboneAux]:
    """Run the SA stack on a cloud; returns retained points plus the scoring
    head's full first-layer output for the centeredness loss.

    Inputs are canonically sorted first so FPS/top-k tie-breaks do not depend
    on the caller's point ordering; source_indices map back to the caller's.
    """
    if cloud.modality != cfg.modality:
        raise ContractError(f"cloud is {cloud.modality!r} but config expects {cfg.modality!r}")
    order = geo.canonical_order(cloud.positions, cloud.attributes)
    pos = cloud.positions[order]
    feat = constant(cloud.attributes[order])

    chain = None
    scores = None
    aux = None
    for i, layer in enumerate(cfg.layers):
        sampling = None if scores is None else scores.data[:, 0]
        center_idx, feat = sa_layer_forward(
            pos, feat, layer, store, f"{prefix}.sa{i}", sampling_scores=sampling
        )
        pos = pos[center_idx]
        chain = center_idx if chain is None else chain[center_idx]
        if i == 0:
            scores = mlp_forward(store, f"{prefix}.score", score_head_spec(cfg), feat)
            aux = BackboneAux(score_positions=pos, scores=scores)
        else:
            scores = gather_rows(scores, center_idx)

    fg = ForegroundPoints(
        positions=pos,
        features=feat,
        centeredness=scores,
        source_indices=order[chain],
    )
    return fg, aux


def compute_centeredness_targets(
    positions: np.ndarray, boxes: list, mask_mode: str = "centerness"
) -> CenterednessTargets:
    """Per-point soft centeredness target: 0 for background, otherwise the
    centeredness inside the containing box (nearest center wins on overlap).

    mask_mode "centerness" weights positives by the target itself (closer to
    the centroid counts more); "binary" weights every positive equally.
    """
    if mask_mode not in MASK_MODES:
        raise ConfigError(f"mask_mode must be one of {MASK_MODES}, got {mask_mode!r}")
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    y = np.zeros(n)
    best = np.full(n, np.inf)
    for box in boxes:
        inside = geo.points_in_box(positions, box)
        if not inside.any():
            continue
        score = geo.points_centeredness(positions, box)
        d2 = ((positions - box.center) ** 2).sum(axis=1)
        take = inside & (d2 < best)
        y[take] = score[take]
        best[take] = d2[take]
    mask = y.copy() if mask_mode == "centerness" else (y > 0).astype(np.float64)
    return CenterednessTargets(y=y, mask=mask)


def centeredness_loss(pred: Tensor, targets: CenterednessTargets) -> Tensor:
    """Summed soft cross-entropy with the positive term mask-weighted:
    -sum_k [mask_k * y_k * log p_k + (1 - y_k) * log(1 - p_k)].

    Predictions are clamped to [1e-7, 1 - 1e-7] before the logs.
    """
    p = pred if pred.data.ndim == 2 else pred.reshape((-1, 1))
    n = targets.y.shape[0]
    if p.data.shape != (n, 1):
        raise ShapeMismatchError(f"expected ({n}, 1) predictions, got {p.data.shape}")
    p = p.clamp(1e-7, 1.0 - 1e-7)
    y = constant(targets.y[:, None])
    mask = constant(targets.mask[:, None])
    neg_w = constant(1.0 - targets.y[:, None])
    return -(mask * y * p.log() + neg_w * (1.0 - p).log()).sum()
