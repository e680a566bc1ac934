"""Two-stage training orchestration, checkpoints, and AP evaluation.

Stage 1 trains one modality's detector alone. Stage 2 continues from that
checkpoint while a frozen copy of the other modality's stage-1 network
supplies instance features to imitate; it adds the two projection MLPs, a
fresh detection head fed by the imitated features, and the shared-space
head. The network under training never sees the other sensor's points, only
its instance features.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .aggregation import compute_offset_targets, offset_regression_loss
from .autodiff import ParamStore, Tensor, backward, constant, init_optimizer, optimizer_step
from .backbone import MASK_MODES, centeredness_loss, compute_centeredness_targets
from .crossmodal import feature_matching_loss, project_features, selective_match
from .detection import assign_targets, detection_loss, head_forward, shared_detection_loss
from .errors import ConfigError, NumericsError, ParseError
from .model import (
    ModelConfig,
    infer,
    init_model,
    init_stage2_params,
    model_config_from_doc,
    model_config_to_doc,
    model_forward,
    model_preset,
)
from .synth import PairedScene, augment_scene

STAGE_PEAK_LR = {1: 0.01, 2: 1e-4}
LAMBDA_FM = 1.0 / 3.0
LAMBDA_SDET = 2.0 / 3.0
EVAL_IOU_THRESHOLDS = {"lidar": (0.7, 0.5, 0.5), "radar": (0.5, 0.25, 0.25)}
N_RECALL_POSITIONS = 40
CKPT_MAGIC = b"HALO3DCKPT1\n"


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    modality: str  # the side that detects at inference time
    preset: str = "toy"
    steps: int = 300
    batch_size: int = 4
    seed: int = 0
    peak_lr: float | None = None  # stage default when unset
    weight_decay: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    lambda_fm: float = LAMBDA_FM
    lambda_sdet: float = LAMBDA_SDET
    match_radius: float = 1.0
    augment: bool = True  # stage 1 only; stage 2 always trains unaugmented
    mask_mode: str = "binary"
    snapshot_every: int = 0  # 0 disables intermediate checkpoints

    def __post_init__(self):
        if self.stage not in STAGE_PEAK_LR:
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.modality not in geo.MODALITY_ATTRS:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be positive")
        if self.lambda_fm < 0 or self.lambda_sdet < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.match_radius <= 0:
            raise ConfigError("match_radius must be positive")
        if self.peak_lr is not None and self.peak_lr <= 0:
            raise ConfigError("peak_lr must be positive")
        if self.mask_mode not in MASK_MODES:
            raise ConfigError(f"mask_mode must be one of {MASK_MODES}")
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be nonnegative")

    @property
    def lr(self) -> float:
        return STAGE_PEAK_LR[self.stage] if self.peak_lr is None else self.peak_lr

    @property
    def augment_mode(self) -> str:
        if self.stage == 2 or not self.augment:
            return "none"
        return "lidar_full" if self.modality == "lidar" else "radar_flip_only"


_TRAIN_DOC_KEYS = (
    "stage", "modality", "preset", "steps", "batch_size", "seed", "peak_lr",
    "weight_decay", "beta1", "beta2", "lambda_fm", "lambda_sdet",
    "match_radius", "augment", "mask_mode", "snapshot_every",
)


def train_config_to_doc(cfg: TrainConfig) -> dict:
    return {k: getattr(cfg, k) for k in _TRAIN_DOC_KEYS}


def train_config_from_doc(doc: dict) -> TrainConfig:
    for key in ("stage", "modality"):
        if key not in doc:
            raise ConfigError(f"train config: missing {key!r}")
    unknown = set(doc) - set(_TRAIN_DOC_KEYS)
    if unknown:
        raise ConfigError(f"train config: unknown keys {sorted(unknown)}")
    return TrainConfig(**doc)


# -- checkpoints ----------------------------------------------------------------
# Plain container: magic, big-endian header length, JSON header (meta plus the
# ordered param manifest), then raw little-endian float64 blobs. No timestamps
# anywhere, so identical params and meta give identical bytes.


def save_checkpoint(path: str, store: ParamStore, meta: dict) -> None:
    entries = [{"path": p, "shape": list(t.data.shape)} for p, t in store.items()]
    header = json.dumps({"meta": meta, "params": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack(">I", len(header)))
        fh.write(header)
        for _, t in store.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> tuple[ParamStore, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise ParseError(f"{path}: not a checkpoint file")
    off = len(CKPT_MAGIC)
    (hlen,) = struct.unpack(">I", blob[off : off + 4])
    off += 4
    try:
        header = json.loads(blob[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"{path}: bad checkpoint header: {e}") from None
    off += hlen
    store = ParamStore(0)
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        end = off + 8 * n
        if end > len(blob):
            raise ParseError(f"{path}: truncated checkpoint at {entry['path']!r}")
        arr = np.frombuffer(blob[off:end], dtype="<f8").reshape(shape).astype(np.float64)
        store.put(entry["path"], arr)
        off = end
    if off != len(blob):
        raise ParseError(f"{path}: {len(blob) - off} trailing bytes")
    return store, header["meta"]


# -- per-batch losses ------------------------------------------------------------


def _primary_cloud(scene: PairedScene, modality: str) -> geo.PointCloud:
    return scene.lidar if modality == "lidar" else scene.radar


def stage1_batch_loss(
    batch: list[tuple[geo.PointCloud, list[geo.Box3D]]],
    mcfg: ModelConfig,
    store: ParamStore,
    mask_mode: str = "binary",
) -> tuple[Tensor, dict]:
    """Mean per-scene losses of the lone detector, composed into one graph.

    Returns (total, components); components holds the batch-mean scalar
    Tensors for "l_ctr", "l_oreg", "l_det".
    """
    sums = {}
    for cloud, boxes in batch:
        fr = model_forward(cloud, mcfg, store)
        l_ctr = centeredness_loss(
            fr.backbone_aux.scores,
            compute_centeredness_targets(fr.backbone_aux.score_positions, boxes, mask_mode),
        )
        l_oreg = offset_regression_loss(fr.offsets, compute_offset_targets(fr.fg.positions, boxes))
        targets = assign_targets(fr.inst_positions, boxes)
        cls_logits, reg = head_forward(
            fr.inst_features, None, mcfg.det_head(), store, "model.det1"
        )
        l_det, _, _ = detection_loss(cls_logits, reg, targets)
        for key, term in (("l_ctr", l_ctr), ("l_oreg", l_oreg), ("l_det", l_det)):
            sums[key] = term if key not in sums else sums[key] + term
    inv = 1.0 / len(batch)
    comps = {k: v * inv for k, v in sums.items()}
    total = (comps["l_ctr"] + comps["l_oreg"]) + comps["l_det"]
    return total, comps


def stage2_batch_loss(
    batch: list[tuple[geo.PointCloud, list[geo.Box3D]]],
    aux_cache: list[tuple[np.ndarray, np.ndarray]],
    mcfg: ModelConfig,
    store: ParamStore,
    mask_mode: str = "binary",
    match_radius: float = 1.0,
    lambda_fm: float = LAMBDA_FM,
    lambda_sdet: float = LAMBDA_SDET,
) -> tuple[Tensor, dict, int]:
    """Imitation-stage batch loss.

    aux_cache pairs each batch entry with the frozen other-modality network's
    (instance features, instance positions). The imitation target is used as
    data, not graph, so its parameters can never receive gradient here.
    Returns (total, components, matched pair count).
    """
    if len(aux_cache) != len(batch):
        raise ConfigError("aux_cache must align with the batch")
    sums = {}
    n_pairs = 0
    for (cloud, boxes), (aux_feats, aux_pos) in zip(batch, aux_cache):
        fr = model_forward(cloud, mcfg, store)
        l_ctr = centeredness_loss(
            fr.backbone_aux.scores,
            compute_centeredness_targets(fr.backbone_aux.score_positions, boxes, mask_mode),
        )
        l_oreg = offset_regression_loss(fr.offsets, compute_offset_targets(fr.fg.positions, boxes))
        pcfg = mcfg.projection(aux_feats.shape[1])
        h = project_features(fr.inst_features, "primary", pcfg, store, "model.project")
        targets = assign_targets(fr.inst_positions, boxes)
        cls_logits, reg = head_forward(fr.inst_features, h, mcfg.det_head(), store, "model.det2")
        l_det, _, _ = detection_loss(cls_logits, reg, targets)
        match = selective_match(fr.inst_positions, aux_pos, match_radius)
        h_aux = project_features(constant(aux_feats), "auxiliary", pcfg, store, "model.project")
        l_fm = feature_matching_loss(h, h_aux, match)
        l_sdet = shared_detection_loss(h, mcfg.shared_head(), store, "model.shared", targets)
        n_pairs += match.n_pairs
        for key, term in (
            ("l_ctr", l_ctr), ("l_oreg", l_oreg), ("l_det", l_det),
            ("l_fm", l_fm), ("l_sdet", l_sdet),
        ):
            sums[key] = term if key not in sums else sums[key] + term
    inv = 1.0 / len(batch)
    comps = {k: v * inv for k, v in sums.items()}
    comps["l_s1"] = (comps["l_ctr"] + comps["l_oreg"]) + comps["l_det"]
    total = comps["l_s1"] + lambda_fm * comps["l_fm"] + lambda_sdet * comps["l_sdet"]
    return total, comps, n_pairs


# -- training loops --------------------------------------------------------------


def _batch_seed(cfg: TrainConfig, step: int) -> int:
    return (cfg.seed * 1_000_003 + step) % 2**63


def _pick_batch(scenes: list[PairedScene], cfg: TrainConfig, step: int):
    rng = np.random.default_rng(_batch_seed(cfg, step))
    idx = rng.integers(0, len(scenes), cfg.batch_size)
    picked = []
    for i in idx:
        scene = scenes[int(i)]
        if cfg.augment_mode != "none":
            scene = augment_scene(scene, cfg.augment_mode, rng)
        picked.append(scene)
    return idx, picked


class _StepLog:
    """JSON-lines writer that also keeps the records in memory."""

    def __init__(self, path: str | None):
        self.records = []
        self._fh = open(path, "w") if path else None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _maybe_snapshot(cfg: TrainConfig, step: int, store, meta, snapshot_dir):
    if snapshot_dir and cfg.snapshot_every > 0 and (step + 1) % cfg.snapshot_every == 0:
        os.makedirs(snapshot_dir, exist_ok=True)
        save_checkpoint(os.path.join(snapshot_dir, f"step_{step + 1:06d}.ckpt"), store, meta)


def train_stage1(
    scenes: list[PairedScene],
    cfg: TrainConfig,
    log_path: str | None = None,
    snapshot_dir: str | None = None,
) -> tuple[ParamStore, dict, list[dict]]:
    """Train the lone detector; returns (params, checkpoint meta, step records)."""
    if cfg.stage != 1:
        raise ConfigError("train_stage1 needs a stage-1 config")
    if not scenes:
        raise ConfigError("empty training set")
    mcfg = model_preset(cfg.preset, cfg.modality)
    store = ParamStore(cfg.seed)
    init_model(store, mcfg)
    opt = init_optimizer(
        store, cfg.lr, cfg.steps,
        weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2,
    )
    meta = {"stage": 1, "modality": cfg.modality, "model": model_config_to_doc(mcfg)}
    log = _StepLog(log_path)
    try:
        for step in range(cfg.steps):
            _, picked = _pick_batch(scenes, cfg, step)
            batch = [(_primary_cloud(s, cfg.modality), s.boxes) for s in picked]
            total, comps = stage1_batch_loss(batch, mcfg, store, cfg.mask_mode)
            if not np.isfinite(total.data):
                raise NumericsError(
                    f"non-finite loss at step {step}; batch seed {_batch_seed(cfg, step)}"
                )
            grads = backward(total, store)
            try:
                lr = optimizer_step(store, grads, opt)
            except NumericsError as e:
                raise NumericsError(
                    f"{e}; step {step}, batch seed {_batch_seed(cfg, step)}"
                ) from None
            log.write({
                "step": step,
                "l_s1": float(total.data),
                "l_ctr": float(comps["l_ctr"].data),
                "l_oreg": float(comps["l_oreg"].data),
                "l_det": float(comps["l_det"].data),
                "l_fm": 0.0,
                "l_sdet": 0.0,
                "lr": lr,
                "n_p": 0,
            })
            _maybe_snapshot(cfg, step, store, meta, snapshot_dir)
    finally:
        log.close()
    return store, meta, log.records


def build_aux_cache(
    scenes: list[PairedScene], aux_store: ParamStore, aux_meta: dict
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Frozen other-modality instance features and positions, one entry per
    scene. Valid across the whole run because stage 2 never augments."""
    aux_cfg = model_config_from_doc(aux_meta["model"])
    cache = []
    for scene in scenes:
        fr = model_forward(_primary_cloud(scene, aux_cfg.modality), aux_cfg, aux_store)
        cache.append((fr.inst_features.data.copy(), fr.inst_positions.copy()))
    return cache


def train_stage2(
    scenes: list[PairedScene],
    cfg: TrainConfig,
    pri_ckpt: tuple[ParamStore, dict],
    aux_ckpt: tuple[ParamStore, dict],
    log_path: str | None = None,
    snapshot_dir: str | None = None,
) -> tuple[ParamStore, dict, list[dict]]:
    """Continue the primary detector against the frozen other-modality network.

    The checkpoint metas are authoritative for both architectures. Trains
    only the primary backbone, both projections, the imitation-fed detection
    head, and the shared head; offset and aggregation parameters keep their
    stage-1 values (gradients still flow through them into the backbone).
    """
    if cfg.stage != 2:
        raise ConfigError("train_stage2 needs a stage-2 config")
    if not scenes:
        raise ConfigError("empty training set")
    pri_store, pri_meta = pri_ckpt
    aux_store, aux_meta = aux_ckpt
    for name, meta in (("primary", pri_meta), ("auxiliary", aux_meta)):
        if meta.get("stage") != 1:
            raise ConfigError(f"{name} checkpoint is not a stage-1 checkpoint")
    if pri_meta["modality"] != cfg.modality:
        raise ConfigError(
            f"primary checkpoint is {pri_meta['modality']}, config wants {cfg.modality}"
        )
    if aux_meta["modality"] == cfg.modality:
        raise ConfigError("auxiliary checkpoint must come from the other modality")

    mcfg = model_config_from_doc(pri_meta["model"])
    aux_cfg = model_config_from_doc(aux_meta["model"])
    store = ParamStore(cfg.seed)
    for path, t in pri_store.items():
        store.put(path, t.data.copy())
    init_stage2_params(store, mcfg, aux_cfg.instance_width)
    # The second head continues the first: identical shapes, and the slot fed
    # by the imitated features saw only weight decay in stage 1 (its input
    # was zero-filled), so this starts at stage-1 detection quality.
    for path in store.paths():
        if path.startswith("model.det2."):
            store.put(path, store["model.det1." + path[len("model.det2."):]].data.copy())
    trainable = [
        p for p in store.paths()
        if p.startswith(("model.backbone.", "model.project.", "model.det2.", "model.shared."))
    ]
    opt = init_optimizer(
        store, cfg.lr, cfg.steps, trainable=trainable,
        weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2,
    )
    meta = {
        "stage": 2,
        "modality": cfg.modality,
        "model": model_config_to_doc(mcfg),
        "aux_instance_width": aux_cfg.instance_width,
    }
    cache = build_aux_cache(scenes, aux_store, aux_meta)
    # Clear any gradients the checkpoint's own training left behind, then
    # demand they stay clear: the frozen side must never join the graph.
    aux_store.zero_grad()
    aux_before = {p: t.data.copy() for p, t in aux_store.items()}
    log = _StepLog(log_path)
    try:
        for step in range(cfg.steps):
            idx, picked = _pick_batch(scenes, cfg, step)
            batch = [(_primary_cloud(s, cfg.modality), s.boxes) for s in picked]
            total, comps, n_pairs = stage2_batch_loss(
                batch, [cache[int(i)] for i in idx], mcfg, store,
                cfg.mask_mode, cfg.match_radius, cfg.lambda_fm, cfg.lambda_sdet,
            )
            if not np.isfinite(total.data):
                raise NumericsError(
                    f"non-finite loss at step {step}; batch seed {_batch_seed(cfg, step)}"
                )
            grads = backward(total, store)
            for path, t in aux_store.items():
                if t.grad is not None or not np.array_equal(t.data, aux_before[path]):
                    raise NumericsError(f"frozen auxiliary parameter {path!r} was touched")
            try:
                lr = optimizer_step(store, grads, opt)
            except NumericsError as e:
                raise NumericsError(
                    f"{e}; step {step}, batch seed {_batch_seed(cfg, step)}"
                ) from None
            log.write({
                "step": step,
                "l_s1": float(comps["l_s1"].data),
                "l_ctr": float(comps["l_ctr"].data),
                "l_oreg": float(comps["l_oreg"].data),
                "l_det": float(comps["l_det"].data),
                "l_fm": float(comps["l_fm"].data),
                "l_sdet": float(comps["l_sdet"].data),
                "l_s2": float(total.data),
                "lr": lr,
                "n_p": n_pairs,
            })
            _maybe_snapshot(cfg, step, store, meta, snapshot_dir)
    finally:
        log.close()
    for path, t in aux_store.items():
        if not np.array_equal(t.data, aux_before[path]):
            raise NumericsError(f"frozen auxiliary parameter {path!r} drifted")
    return store, meta, log.records


# -- evaluation -------------------------------------------------------------------


def _class_pr(dets_per_scene, gts_per_scene, class_id: int, iou_threshold: float):
    """Ranked PR arrays for one class, or None when the class has no GT.

    Detections rank globally by (-score, scene index, within-scene index).
    Each detection greedily takes the highest-IoU unmatched GT in its scene
    at or above the threshold (ties to the lowest GT index).
    """
    if len(dets_per_scene) != len(gts_per_scene):
        raise ConfigError("detection and GT scene lists must align")
    gt_lists = [[b for b in boxes if b.class_id == class_id] for boxes in gts_per_scene]
    n_gt = sum(len(g) for g in gt_lists)
    if n_gt == 0:
        return None
    entries = []
    for s, dets in enumerate(dets_per_scene):
        for j, d in enumerate(dets):
            if d.box.class_id == class_id:
                entries.append((-d.score, s, j, d.box))
    entries.sort(key=lambda e: e[:3])
    used = [np.zeros(len(g), dtype=bool) for g in gt_lists]
    tp_flags = np.zeros(len(entries), dtype=bool)
    for rank, (_, s, _, box) in enumerate(entries):
        best, best_iou = -1, -1.0
        for k, g in enumerate(gt_lists[s]):
            if used[s][k]:
                continue
            iou = geo.rotated_iou_3d(box, g)
            if iou >= iou_threshold and iou > best_iou:
                best, best_iou = k, iou
        if best >= 0:
            used[s][best] = True
            tp_flags[rank] = True
    if not entries:
        return np.zeros(0), np.zeros(0), 0, n_gt, 0
    tp_cum = np.cumsum(tp_flags)
    ranks = np.arange(1, len(entries) + 1)
    recall = tp_cum / n_gt
    precision = tp_cum / ranks
    return recall, precision, int(tp_cum[-1]), n_gt, len(entries)


def _ap40(recall: np.ndarray, precision: np.ndarray) -> float:
    """Mean over 40 recall positions of the best precision at recall >= r."""
    ap = 0.0
    for i in range(1, N_RECALL_POSITIONS + 1):
        r = i / N_RECALL_POSITIONS
        at = precision[recall >= r - 1e-12]
        ap += float(at.max()) if at.size else 0.0
    return 100.0 * ap / N_RECALL_POSITIONS


def average_precision(
    dets_per_scene, gts_per_scene, class_id: int, iou_threshold: float
) -> float | None:
    """40-point interpolated AP in percent; None when the class has no GT."""
    pr = _class_pr(dets_per_scene, gts_per_scene, class_id, iou_threshold)
    if pr is None:
        return None
    recall, precision, _, _, n_det = pr
    if n_det == 0:
        return 0.0
    return _ap40(recall, precision)


def evaluate_detections(dets_per_scene, gts_per_scene, modality: str) -> dict:
    """Score prepared detections; JSON-ready report.

    {"classes": {name: {"ap", "iou", "n_gt", "n_det", "n_tp", "pr"}}, "map"}.
    Classes with no GT are absent and excluded from the mean.
    """
    if modality not in EVAL_IOU_THRESHOLDS:
        raise ConfigError(f"unknown modality {modality!r}")
    classes = {}
    aps = []
    for cid, name in enumerate(geo.CLASS_NAMES):
        thr = EVAL_IOU_THRESHOLDS[modality][cid]
        pr = _class_pr(dets_per_scene, gts_per_scene, cid, thr)
        if pr is None:
            continue
        recall, precision, n_tp, n_gt, n_det = pr
        ap = _ap40(recall, precision) if n_det else 0.0
        classes[name] = {
            "ap": ap,
            "iou": thr,
            "n_gt": n_gt,
            "n_det": n_det,
            "n_tp": n_tp,
            "pr": {"recall": recall.tolist(), "precision": precision.tolist()},
        }
        aps.append(ap)
    return {"classes": classes, "map": float(np.mean(aps)) if aps else 0.0}


def evaluate(scenes: list[PairedScene], store: ParamStore, meta: dict) -> dict:
    """Run inference over a split and score it at the modality's thresholds."""
    mcfg = model_config_from_doc(meta["model"])
    modality = meta["modality"]
    dets = [
        infer(
            _primary_cloud(s, modality), mcfg, store,
            stage=meta["stage"], aux_instance_width=meta.get("aux_instance_width"),
        )
        for s in scenes
    ]
    return evaluate_detections(dets, [s.boxes for s in scenes], modality)
