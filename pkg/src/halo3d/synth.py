"""Synthetic paired-scene generator.

Each scene places a handful of class-typed boxes on the ground plane and
renders the same world through two sensing profiles: a dense surface-sampled
"lidar-like" cloud carrying intensity, and a sparse noisy "radar-like" cloud
carrying radar cross-section and radial (Doppler) speed. Generation is a pure
function of the scene seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, GenerationError, ParseError
from .geometry import (
    CLASS_NAMES,
    MODALITY_ATTRS,
    Box3D,
    PointCloud,
    rotated_iou_3d,
    wrap_angle,
)

SCENE_FORMAT = "halo-scene-v1"
MANIFEST_FORMAT = "halo-manifest-v1"

# Mean class dimensions (length, width, height); sampled sizes vary +/-10%.
CLASS_SIZES = {0: (4.0, 1.8, 1.6), 1: (0.6, 0.6, 1.7), 2: (1.8, 0.6, 1.7)}

# Intensity base per class (clutter last); divided by (1 + distance^2).
_INTENSITY_BASE = {0: 0.9, 1: 0.6, 2: 0.75, None: 0.3}
# Radar cross-section lookup per class; constant regardless of range.
_RCS = {0: 10.0, 1: 2.0, 2: 5.0, None: -5.0}

_STATIC_FRACTION = 0.3
_SPEED_RANGE = 10.0
_PLACEMENT_TRIES = 200
_MIN_DENSE_POINTS = 20

# Annotation boxes circumscribe the object with a margin, so returns come off
# a body this fraction smaller than the box. Without the margin, half the
# noisy surface samples would fall outside their own ground-truth box.
_BODY_INSET = 0.18


@dataclass(frozen=True)
class ModalityProfile:
    """How one sensor sees the scene."""

    modality: str  # "lidar" or "radar"
    target_points: int  # total cloud budget
    sigma: float  # isotropic noise on sampled object points (m)
    dropout: float = 0.0  # chance an object returns no points at all
    object_points: tuple[int, int, int] = (12, 5, 7)  # sparse mean count per class

    def __post_init__(self):
        if self.modality not in ("lidar", "radar"):
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.target_points < 1:
            raise ConfigError("target_points must be positive")


@dataclass(frozen=True)
class SceneSpec:
    """Everything that determines a scene besides the sensing profiles."""

    seed: int
    object_classes: tuple[int, ...] = ()
    clutter: int = 256  # clutter budget for the dense cloud
    extent: float = 20.0  # world is [-extent, extent] in x and y
    min_center_distance: float = 3.0


@dataclass
class PairedScene:
    boxes: list[Box3D]
    velocities: np.ndarray  # (K, 3), planar, zero for static objects
    lidar: PointCloud
    radar: PointCloud


PROFILES = {
    "toy": (
        ModalityProfile("lidar", 2048, 0.02),
        ModalityProfile("radar", 128, 0.12, dropout=0.15),
    ),
    "paper": (
        ModalityProfile("lidar", 16384, 0.02),
        ModalityProfile("radar", 512, 0.12, dropout=0.1),
    ),
}


def _place_boxes(spec: SceneSpec, rng: np.random.Generator) -> list[Box3D]:
    boxes: list[Box3D] = []
    for class_id in spec.object_classes:
        base = np.array(CLASS_SIZES[class_id])
        placed = False
        for _ in range(_PLACEMENT_TRIES):
            size = base * (1.0 + rng.uniform(-0.1, 0.1, 3))
            margin = math.hypot(size[0], size[1]) / 2.0
            span = spec.extent - margin
            if span <= 0:
                raise GenerationError("extent too small for object size")
            center = np.array([rng.uniform(-span, span), rng.uniform(-span, span), size[2] / 2.0])
            yaw = rng.uniform(-math.pi, math.pi)
            cand = Box3D(center, size, yaw, class_id)
            far = all(
                np.linalg.norm(cand.center[:2] - b.center[:2]) >= spec.min_center_distance
                for b in boxes
            )
            if far and all(rotated_iou_3d(cand, b) == 0.0 for b in boxes):
                boxes.append(cand)
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place a {CLASS_NAMES[class_id]} after {_PLACEMENT_TRIES} tries"
            )
    return boxes


def _draw_velocities(n: int, rng: np.random.Generator) -> np.ndarray:
    v = np.zeros((n, 3))
    for i in range(n):
        if rng.random() >= _STATIC_FRACTION:
            v[i, 0] = rng.uniform(-_SPEED_RANGE, _SPEED_RANGE)
            v[i, 1] = rng.uniform(-_SPEED_RANGE, _SPEED_RANGE)
    return v


def _box_to_world(box: Box3D, local: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + box.center


def _sample_surface(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform samples over the six faces of the object body, weighted by
    face area. The body sits _BODY_INSET inside the annotation box."""
    l, w, h = box.size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, n)
    v = rng.uniform(-0.5, 0.5, n)
    body = box.size * (1.0 - _BODY_INSET)
    local = np.empty((n, 3))
    for f in range(6):
        m = faces == f
        axis = f // 2
        sign = 1.0 if f % 2 == 0 else -1.0
        pts = np.empty((m.sum(), 3))
        # A hair inside the face so the world-frame round trip cannot round
        # an exact boundary coordinate outside the box.
        pts[:, axis] = sign * body[axis] / 2.0 * (1.0 - 1e-9)
        others = [a for a in range(3) if a != axis]
        pts[:, others[0]] = u[m] * body[others[0]]
        pts[:, others[1]] = v[m] * body[others[1]]
        local[m] = pts
    return _box_to_world(box, local)


def _sample_interior_and_surface(box: Box3D, n: int, rng: np.random.Generator) -> np.ndarray:
    """Half interior-uniform, half surface; the sparse sensor sees both."""
    n_in = n // 2
    local = rng.uniform(-0.5, 0.5, (n_in, 3)) * box.size
    inside = _box_to_world(box, local)
    surface = _sample_surface(box, n - n_in, rng)
    return np.concatenate([inside, surface], axis=0)


def _intensity(class_id: int | None, positions: np.ndarray) -> np.ndarray:
    d2 = (positions**2).sum(axis=1)
    return _INTENSITY_BASE[class_id] / (1.0 + d2)


def _doppler(velocity: np.ndarray, positions: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(positions, axis=1)
    d = np.maximum(d, 1e-9)
    return positions @ velocity / d


def _dense_counts(boxes: list[Box3D], profile: ModalityProfile, clutter: int) -> list[int]:
    """Split the non-clutter budget across objects proportional to surface
    area, flooring at the per-object minimum and landing exactly on budget."""
    budget = profile.target_points - clutter
    if not boxes:
        return []
    l = np.array([b.size[0] for b in boxes])
    w = np.array([b.size[1] for b in boxes])
    h = np.array([b.size[2] for b in boxes])
    area = 2.0 * (l * w + l * h + w * h)
    counts = np.maximum(_MIN_DENSE_POINTS, np.floor(budget * area / area.sum()).astype(int))
    # Settle the rounding remainder on the largest objects, keeping floors.
    order = np.argsort(-area, kind="stable")
    spare = budget - int(counts.sum())
    while spare != 0:
        moved = False
        for i in order:
            if spare > 0:
                counts[i] += 1
                spare -= 1
                moved = True
            elif spare < 0 and counts[i] > _MIN_DENSE_POINTS:
                counts[i] -= 1
                spare += 1
                moved = True
            if spare == 0:
                break
        if not moved:
            raise GenerationError("dense point budget too small for the object list")
    return counts.tolist()


def generate_scene(
    spec: SceneSpec, lidar_profile: ModalityProfile, radar_profile: ModalityProfile
) -> PairedScene:
    """Render one paired scene; bit-identical for identical arguments."""
    if lidar_profile.modality != "lidar" or radar_profile.modality != "radar":
        raise ConfigError("profiles must be (lidar, radar)")
    rng = np.random.default_rng(spec.seed)
    boxes = _place_boxes(spec, rng)
    velocities = _draw_velocities(len(boxes), rng)

    # Dense cloud: surface samples per object, then clutter up to the budget.
    parts, classes = [], []
    for box, n in zip(boxes, _dense_counts(boxes, lidar_profile, spec.clutter)):
        pts = _sample_surface(box, n, rng)
        if lidar_profile.sigma > 0:
            pts = pts + rng.normal(0.0, lidar_profile.sigma, pts.shape)
        parts.append(pts)
        classes.append(np.full(n, box.class_id))
    n_clutter = lidar_profile.target_points - sum(p.shape[0] for p in parts)
    clutter = np.column_stack(
        [
            rng.uniform(-spec.extent, spec.extent, n_clutter),
            rng.uniform(-spec.extent, spec.extent, n_clutter),
            rng.uniform(0.0, 3.0, n_clutter),
        ]
    )
    positions = np.concatenate(parts + [clutter], axis=0) if parts else clutter
    intensity = np.concatenate(
        [_intensity(b.class_id, p) for b, p in zip(boxes, parts)]
        + [_intensity(None, clutter)]
    )
    lidar = PointCloud(positions, intensity[:, None], "lidar")

    # Sparse cloud: few points per object, heavy noise, dropout, clutter fill.
    parts, attrs = [], []
    for i, box in enumerate(boxes):
        mean = radar_profile.object_points[box.class_id]
        n = 0 if rng.random() < radar_profile.dropout else int(rng.poisson(mean))
        if n == 0:
            continue
        pts = _sample_interior_and_surface(box, n, rng)
        if radar_profile.sigma > 0:
            pts = pts + rng.normal(0.0, radar_profile.sigma, pts.shape)
        parts.append(pts)
        attrs.append(
            np.column_stack([np.full(n, _RCS[box.class_id]), _doppler(velocities[i], pts)])
        )
    n_obj = sum(p.shape[0] for p in parts)
    if n_obj > radar_profile.target_points:
        raise GenerationError("radar point budget too small for the object list")
    n_clutter = radar_profile.target_points - n_obj
    clutter = np.column_stack(
        [
            rng.uniform(-spec.extent, spec.extent, n_clutter),
            rng.uniform(-spec.extent, spec.extent, n_clutter),
            rng.uniform(0.0, 3.0, n_clutter),
        ]
    )
    positions = np.concatenate(parts + [clutter], axis=0) if parts else clutter
    attr = np.concatenate(
        attrs + [np.column_stack([np.full(n_clutter, _RCS[None]), np.zeros(n_clutter)])]
    ) if attrs else np.column_stack([np.full(n_clutter, _RCS[None]), np.zeros(n_clutter)])
    radar = PointCloud(positions, attr, "radar")
    return PairedScene(boxes=boxes, velocities=velocities, lidar=lidar, radar=radar)


def random_scene_spec(seed: int, rng: np.random.Generator, clutter: int = 256,
                      extent: float = 20.0) -> SceneSpec:
    """Draw a spec with 1-4 objects; the dataset generator uses this per scene."""
    n = int(rng.integers(1, 5))
    classes = tuple(int(c) for c in rng.integers(0, 3, n))
    return SceneSpec(seed=seed, object_classes=classes, clutter=clutter, extent=extent)


# -- augmentation ---------------------------------------------------------------


def flip_scene(scene: PairedScene) -> PairedScene:
    """Mirror the world about the x axis. Doppler readings are invariant
    because both position and velocity mirror together."""

    def flip_cloud(c: PointCloud) -> PointCloud:
        pos = c.positions.copy()
        pos[:, 1] = -pos[:, 1]
        return PointCloud(pos, c.attributes.copy(), c.modality)

    boxes = [
        Box3D(b.center * np.array([1.0, -1.0, 1.0]), b.size, -b.yaw, b.class_id)
        for b in scene.boxes
    ]
    vel = scene.velocities * np.array([1.0, -1.0, 1.0])
    return PairedScene(boxes, vel, flip_cloud(scene.lidar), flip_cloud(scene.radar))


def rotate_scene(scene: PairedScene, theta: float) -> PairedScene:
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def rot_cloud(cl: PointCloud) -> PointCloud:
        return PointCloud(cl.positions @ rot.T, cl.attributes.copy(), cl.modality)

    boxes = [
        Box3D(rot @ b.center, b.size, wrap_angle(b.yaw + theta), b.class_id)
        for b in scene.boxes
    ]
    return PairedScene(boxes, scene.velocities @ rot.T, rot_cloud(scene.lidar),
                       rot_cloud(scene.radar))


def scale_scene(scene: PairedScene, factor: float) -> PairedScene:
    """Uniform spatial scaling. Attributes are sensor readings and carry over."""
    if factor <= 0:
        raise ConfigError("scale factor must be positive")

    def sc_cloud(cl: PointCloud) -> PointCloud:
        return PointCloud(cl.positions * factor, cl.attributes.copy(), cl.modality)

    boxes = [
        Box3D(b.center * factor, b.size * factor, b.yaw, b.class_id) for b in scene.boxes
    ]
    return PairedScene(boxes, scene.velocities.copy(), sc_cloud(scene.lidar),
                       sc_cloud(scene.radar))


AUGMENT_MODES = ("none", "lidar_full", "radar_flip_only")


def augment_scene(scene: PairedScene, mode: str, rng: np.random.Generator) -> PairedScene:
    """Randomized training augmentation.

    lidar_full: coin-flip mirror, z-rotation in [-pi/4, pi/4], scaling in
    [0.95, 1.05]. radar_flip_only: the mirror only, since rotation and
    scaling would break Doppler semantics. Draw order is fixed per mode.
    """
    if mode not in AUGMENT_MODES:
        raise ConfigError(f"unknown augmentation mode {mode!r}")
    if mode == "none":
        return scene
    if rng.random() < 0.5:
        scene = flip_scene(scene)
    if mode == "lidar_full":
        scene = rotate_scene(scene, rng.uniform(-math.pi / 4, math.pi / 4))
        scene = scale_scene(scene, rng.uniform(0.95, 1.05))
    return scene


# -- serialization ----------------------------------------------------------------


def _box_record(box: Box3D, velocity: np.ndarray) -> dict:
    return {
        "class": CLASS_NAMES[box.class_id],
        "center": box.center.tolist(),
        "size": box.size.tolist(),
        "yaw": box.yaw,
        "velocity": velocity.tolist(),
    }


def scene_to_doc(scene: PairedScene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "gt": [_box_record(b, v) for b, v in zip(scene.boxes, scene.velocities)],
        "lidar": {
            "positions": scene.lidar.positions.tolist(),
            "attrs": scene.lidar.attributes.tolist(),
        },
        "radar": {
            "positions": scene.radar.positions.tolist(),
            "attrs": scene.radar.attributes.tolist(),
        },
    }


def _require(doc: dict, field: str, where: str):
    if field not in doc:
        raise ParseError(f"{where} missing field {field!r}")
    return doc[field]


def scene_from_doc(doc: dict) -> PairedScene:
    if _require(doc, "format", "scene") != SCENE_FORMAT:
        raise ParseError(f"unsupported scene format {doc['format']!r}")
    boxes, vels = [], []
    for i, rec in enumerate(_require(doc, "gt", "scene")):
        where = f"gt[{i}]"
        name = _require(rec, "class", where)
        if name not in CLASS_NAMES:
            raise ParseError(f"{where} has unknown class {name!r}")
        boxes.append(
            Box3D(
                np.array(_require(rec, "center", where)),
                np.array(_require(rec, "size", where)),
                float(_require(rec, "yaw", where)),
                CLASS_NAMES.index(name),
            )
        )
        vels.append(_require(rec, "velocity", where))
    clouds = {}
    for key in ("lidar", "radar"):
        sub = _require(doc, key, "scene")
        width = len(MODALITY_ATTRS[key])
        clouds[key] = PointCloud(
            np.array(_require(sub, "positions", key), dtype=np.float64).reshape(-1, 3),
            np.array(_require(sub, "attrs", key), dtype=np.float64).reshape(-1, width),
            key,
        )
    velocities = np.array(vels, dtype=np.float64).reshape(len(boxes), 3)
    return PairedScene(boxes, velocities, clouds["lidar"], clouds["radar"])


def write_scene(path: str, scene: PairedScene) -> None:
    with open(path, "w") as fh:
        json.dump(scene_to_doc(scene), fh)


def read_scene(path: str) -> PairedScene:
    if not os.path.exists(path):
        raise ParseError(f"scene file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"scene is not valid JSON: {e}") from None
    return scene_from_doc(doc)


def write_dataset(
    out_dir: str,
    n_scenes: int,
    seed: int,
    profile: str = "toy",
    val_frac: float = 0.2,
    clutter: int | None = None,
) -> dict:
    """Generate a scene directory plus a split manifest; returns the manifest."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    lidar_p, radar_p = PROFILES[profile]
    if clutter is None:
        clutter = 256 if profile == "toy" else 2048
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(n_scenes):
        spec = random_scene_spec(int(rng.integers(0, 2**63)), rng, clutter=clutter)
        scene = generate_scene(spec, lidar_p, radar_p)
        name = f"scene_{i:05d}.json"
        write_scene(os.path.join(out_dir, name), scene)
        names.append(name)
    n_val = int(round(n_scenes * val_frac))
    manifest = {
        "format": MANIFEST_FORMAT,
        "profile": profile,
        "splits": {"train": names[: n_scenes - n_val], "val": names[n_scenes - n_val :]},
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_split(data_dir: str, split: str) -> list[PairedScene]:
    mpath = os.path.join(data_dir, "manifest.json")
    if not os.path.exists(mpath):
        raise ParseError(f"manifest not found in {data_dir}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    splits = _require(manifest, "splits", "manifest")
    if split not in splits:
        raise ConfigError(f"split {split!r} not in manifest (has {sorted(splits)})")
    return [read_scene(os.path.join(data_dir, n)) for n in splits[split]]
