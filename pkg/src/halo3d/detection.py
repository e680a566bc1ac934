"""Box encoding and the detection heads.

A box is regressed as 30 numbers per emitting point: a 3-vector center
residual relative to that point's (shifted) position, 3 log-sizes, and a
12-bin yaw classification with one normalized residual per bin. Two MLP
branches share the concatenated (instance, hallucinated) input: one scores
the three object classes (background is an implicit zero logit, keeping the
branch width at 3), the other emits the 30 regression numbers.
"""

import math
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
    init_mlp,
    mlp_forward,
    trace_event,
    smooth_l1,
    softmax_cross_entropy,
    take_cols,
)
from .errors import ContractError, ShapeMismatchError

N_YAW_BINS = 12
BIN_WIDTH = 2.0 * math.pi / N_YAW_BINS
ENC_WIDTH = 6 + 2 * N_YAW_BINS  # center residual + log sizes + bin logits + residuals


def encode_box(gt: geo.Box3D, anchor: np.ndarray) -> np.ndarray:
    """Regression target for a box as seen from an anchor position.

    The yaw residual is written only into the target bin's slot, normalized
    by the bin half-width; yaw == pi folds into bin 11 with residual +1.
    """
    anchor = np.asarray(anchor, dtype=np.float64)
    enc = np.zeros(ENC_WIDTH)
    enc[0:3] = gt.center - anchor
    enc[3:6] = np.log(gt.size)
    yaw = geo.wrap_angle(gt.yaw)
    b = min(int(math.floor((yaw + math.pi) / BIN_WIDTH)), N_YAW_BINS - 1)
    center = -math.pi + (b + 0.5) * BIN_WIDTH
    enc[6 + b] = 1.0
    enc[6 + N_YAW_BINS + b] = (yaw - center) / (BIN_WIDTH / 2.0)
    return enc


def decode_box(enc: np.ndarray, anchor: np.ndarray, class_id: int = 0) -> geo.Box3D:
    """Inverse of encode_box via the argmax yaw bin."""
    enc = np.asarray(enc, dtype=np.float64)
    if enc.shape != (ENC_WIDTH,):
        raise ShapeMismatchError(f"expected ({ENC_WIDTH},) encoding, got {enc.shape}")
    anchor = np.asarray(anchor, dtype=np.float64)
    b = int(np.argmax(enc[6 : 6 + N_YAW_BINS]))
    center = -math.pi + (b + 0.5) * BIN_WIDTH
    yaw = geo.wrap_angle(center + enc[6 + N_YAW_BINS + b] * (BIN_WIDTH / 2.0))
    return geo.Box3D(
        center=anchor + enc[0:3],
        size=np.exp(enc[3:6]),
        yaw=yaw,
        class_id=class_id,
    )


@dataclass(frozen=True)
class DetHeadConfig:
    """Two-branch head over (instance, hallucinated) features.

    shared_width 0 means the head takes only its direct input (the extra head
    that keeps the shared space detection-relevant works that way).
    """

    instance_width: int
    shared_width: int
    hidden: tuple[int, ...] = (256, 256)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.instance_width < 1 or self.shared_width < 0:
            raise ContractError("head widths must be positive (shared may be 0)")
        if any(h < 1 for h in self.hidden):
            raise ContractError("hidden widths must be positive")

    @property
    def in_width(self) -> int:
        return self.instance_width + self.shared_width

    def cls_spec(self) -> MlpSpec:
        return MlpSpec((self.in_width,) + self.hidden + (len(geo.CLASS_NAMES),), "none")

    def reg_spec(self) -> MlpSpec:
        return MlpSpec((self.in_width,) + self.hidden + (ENC_WIDTH,), "none")


def init_det_head(store: ParamStore, prefix: str, cfg: DetHeadConfig) -> None:
    init_mlp(store, f"{prefix}.cls", cfg.cls_spec())
    init_mlp(store, f"{prefix}.reg", cfg.reg_spec())


def head_forward(
    instance: Tensor,
    hallucinated: Tensor | None,
    cfg: DetHeadConfig,
    store: ParamStore,
    prefix: str,
) -> tuple[Tensor, Tensor]:
    """Run both branches. hallucinated None zero-fills its slot, so the same
    head runs before the imitation features exist."""
    if cfg.shared_width == 0:
        if hallucinated is not None:
            raise ContractError("this head takes no hallucinated slot")
        x = instance
    else:
        if hallucinated is None:
            hallucinated = constant(np.zeros((instance.data.shape[0], cfg.shared_width)))
        if hallucinated.data.shape != (instance.data.shape[0], cfg.shared_width):
            raise ShapeMismatchError(
                f"hallucinated slot must be (N, {cfg.shared_width}),"
                f" got {hallucinated.data.shape}"
            )
        x = concat([instance, hallucinated], axis=1)
    return (
        mlp_forward(store, f"{prefix}.cls", cfg.cls_spec(), x),
        mlp_forward(store, f"{prefix}.reg", cfg.reg_spec(), x),
    )


@dataclass
class AssignedTargets:
    """Per-point class (0 = background, else class_id + 1) and, for points
    inside a box, the 30-number regression target from that point's anchor."""

    class_targets: np.ndarray  # (N,) int
    reg_targets: np.ndarray  # (N, ENC_WIDTH), zero rows for background

    def __post_init__(self):
        self.class_targets = np.asarray(self.class_targets, dtype=np.int64)
        self.reg_targets = np.asarray(self.reg_targets, dtype=np.float64)
        n = self.class_targets.shape[0]
        if self.reg_targets.shape != (n, ENC_WIDTH):
            raise ShapeMismatchError("reg targets must be (N, 30)")

    @property
    def fg_mask(self) -> np.ndarray:
        return self.class_targets > 0


def assign_targets(anchors: np.ndarray, boxes: list) -> AssignedTargets:
    """A point is foreground iff a box contains it (nearest center wins on
    overlap), mirroring the offset indicator so the two stages agree."""
    anchors = np.asarray(anchors, dtype=np.float64)
    n = anchors.shape[0]
    cls = np.zeros(n, dtype=np.int64)
    reg = np.zeros((n, ENC_WIDTH))
    best = np.full(n, np.inf)
    for box in boxes:
        inside = geo.points_in_box(anchors, box)
        if not inside.any():
            continue
        d2 = ((anchors - box.center) ** 2).sum(axis=1)
        take = inside & (d2 < best)
        for i in np.flatnonzero(take):
            reg[i] = encode_box(box, anchors[i])
        cls[take] = box.class_id + 1
        best[take] = d2[take]
    # Supervision is data, not graph; record it so gradient checks skip
    # coordinates whose perturbation changed what the loss was asked to fit.
    trace_event(cls)
    trace_event(reg)
    return AssignedTargets(class_targets=cls, reg_targets=reg)


def detection_loss(
    cls_logits: Tensor, reg: Tensor, targets: AssignedTargets
) -> tuple[Tensor, Tensor, Tensor]:
    """(total, classification part, refinement part).

    Classification: mean 4-way cross-entropy over all points, the background
    logit pinned at 0. Refinement: mean over foreground of smooth-L1 on the 6
    center/size numbers, cross-entropy over yaw bins, and smooth-L1 on the
    residual in the target bin.
    """
    n = targets.class_targets.shape[0]
    if cls_logits.data.shape != (n, len(geo.CLASS_NAMES)) or reg.data.shape != (n, ENC_WIDTH):
        raise ShapeMismatchError("predictions do not match target count")
    full = concat([constant(np.zeros((n, 1))), cls_logits], axis=1)
    l_cls = softmax_cross_entropy(full, targets.class_targets)

    fg = np.flatnonzero(targets.fg_mask)
    if fg.size == 0:
        l_ref = constant(0.0)
    else:
        pred = gather_rows(reg, fg)
        want = targets.reg_targets[fg]
        geo_part = smooth_l1(take_cols(pred, 0, 6) - constant(want[:, 0:6]))
        bins = take_cols(pred, 6, 6 + N_YAW_BINS)
        bin_targets = want[:, 6 : 6 + N_YAW_BINS].argmax(axis=1)
        l_bins = softmax_cross_entropy(bins, bin_targets)
        onehot = want[:, 6 : 6 + N_YAW_BINS]
        res_pred = (take_cols(pred, 6 + N_YAW_BINS, ENC_WIDTH) * constant(onehot)).sum(
            axis=1, keepdims=True
        )
        res_want = (want[:, 6 + N_YAW_BINS :] * onehot).sum(axis=1, keepdims=True)
        l_res = smooth_l1(res_pred - constant(res_want))
        l_ref = geo_part.sum() / fg.size + l_bins + l_res.sum() / fg.size
    return l_cls + l_ref, l_cls, l_ref


def shared_detection_loss(
    h: Tensor, cfg: DetHeadConfig, store: ParamStore, prefix: str, targets: AssignedTargets
) -> Tensor:
    """Detection loss of the extra head that sees only the shared features;
    it exists to keep the imitated space detection-relevant, so only the
    total matters to callers."""
    if cfg.shared_width != 0:
        raise ContractError("the shared-space head takes a single input")
    cls_logits, reg = head_forward(h, None, cfg, store, prefix)
    total, _, _ = detection_loss(cls_logits, reg, targets)
    return total


def detection_to_doc(det: geo.Detection) -> dict:
    return {
        "class": geo.CLASS_NAMES[det.box.class_id],
        "score": det.score,
        "center": [float(v) for v in det.box.center],
        "size": [float(v) for v in det.box.size],
        "yaw": float(det.box.yaw),
    }


def detection_from_doc(doc: dict) -> geo.Detection:
    box = geo.Box3D(
        center=np.asarray(doc["center"], dtype=np.float64),
        size=np.asarray(doc["size"], dtype=np.float64),
        yaw=float(doc["yaw"]),
        class_id=geo.CLASS_NAMES.index(doc["class"]),
    )
    return geo.Detection(box=box, score=float(doc["score"]))
