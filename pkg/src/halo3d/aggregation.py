"""Spatial alignment: predict per-point offsets toward object centers, shift
the points, and pool instance-level features with one wide set-abstraction
layer over the shifted positions.

Offsets are unbounded on purpose: badly shifted background points scatter to
arbitrary positions and rely on the downstream radius-bounded matching to be
ignored, while foreground points of one object collapse near its center so a
large grouping radius pools them together.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .autodiff import (
    MlpSpec, ParamStore, Tensor, constant, init_mlp, mlp_forward, smooth_l1, trace_event,
)
from .backbone import ForegroundPoints, SALayerConfig, sa_layer_forward
from .errors import ShapeMismatchError

OFFSET_HIDDEN = 128


@dataclass
class CenteredPoints:
    """Points after the learned shift; shifted is derived as original + offsets
    so the three fields can never disagree."""

    original: np.ndarray  # (N, 3)
    offsets: Tensor  # (N, 3)
    features: Tensor  # (N, D)
    shifted: Tensor = None

    def __post_init__(self):
        n = self.original.shape[0]
        if self.offsets.data.shape != (n, 3) or self.features.data.shape[0] != n:
            raise ShapeMismatchError("CenteredPoints fields disagree on point count")
        self.shifted = constant(self.original) + self.offsets

    @property
    def n(self) -> int:
        return self.original.shape[0]


@dataclass
class OffsetTargets:
    targets: np.ndarray  # (N, 3), box center minus position, zero for background
    indicator: np.ndarray  # (N,) 1.0 inside a box, else 0.0

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)
        self.indicator = np.asarray(self.indicator, dtype=np.float64)
        if self.targets.shape != (self.indicator.shape[0], 3):
            raise ShapeMismatchError("targets must be (N, 3) with (N,) indicator")
        if (self.targets[self.indicator == 0] != 0).any():
            raise ShapeMismatchError("background rows must carry zero targets")


def offset_head_spec(feature_width: int, hidden: int = OFFSET_HIDDEN) -> MlpSpec:
    return MlpSpec((feature_width, hidden, 3), final_activation="none")


def init_offset_head(
    store: ParamStore, prefix: str, feature_width: int, hidden: int = OFFSET_HIDDEN
) -> None:
    init_mlp(store, prefix, offset_head_spec(feature_width, hidden))


def predict_offsets(
    fg: ForegroundPoints, store: ParamStore, prefix: str, hidden: int = OFFSET_HIDDEN
) -> Tensor:
    """Per-point 3-vector from the offset head; no squashing on the output."""
    spec = offset_head_spec(fg.features.data.shape[1], hidden)
    return mlp_forward(store, prefix, spec, fg.features)


def center_points(fg: ForegroundPoints, offsets: Tensor) -> CenteredPoints:
    return CenteredPoints(original=fg.positions, offsets=offsets, features=fg.features)


def compute_offset_targets(positions: np.ndarray, boxes: list) -> OffsetTargets:
    """Vector to the containing box's center per point (nearest center wins
    when boxes overlap); background points get indicator 0 and zero target."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    targets = np.zeros((n, 3))
    indicator = np.zeros(n)
    best = np.full(n, np.inf)
    for box in boxes:
        inside = geo.points_in_box(positions, box)
        if not inside.any():
            continue
        d2 = ((positions - box.center) ** 2).sum(axis=1)
        take = inside & (d2 < best)
        targets[take] = box.center - positions[take]
        indicator[take] = 1.0
        best[take] = d2[take]
    # Same stop-gradient convention as the detection targets.
    trace_event(indicator)
    trace_event(targets)
    return OffsetTargets(targets=targets, indicator=indicator)


def offset_regression_loss(pred: Tensor, targets: OffsetTargets) -> Tensor:
    """Smooth-L1 (transition 1.0, summed over xyz) averaged over indicator-1
    points. Zero, with zero gradients, when nothing is foreground."""
    n = targets.indicator.shape[0]
    if pred.data.shape != (n, 3):
        raise ShapeMismatchError(f"expected ({n}, 3) offsets, got {pred.data.shape}")
    total = targets.indicator.sum()
    if total == 0:
        return constant(0.0)
    per_coord = smooth_l1(pred - constant(targets.targets), delta=1.0)
    weighted = per_coord.sum(axis=1, keepdims=True) * constant(targets.indicator[:, None])
    return weighted.sum() / total


def aggregate_instances(
    c: CenteredPoints, cfg: SALayerConfig, store: ParamStore, prefix: str
) -> tuple[np.ndarray, Tensor]:
    """Pool instance features with one SA layer over the shifted positions;
    radii large enough that co-instance points share groups. Returns the
    retained-point indices into c and their pooled features."""
    return sa_layer_forward(c.shifted, c.features, cfg, store, prefix)
