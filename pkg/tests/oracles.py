"""Independent reference implementations used to validate the kernels.

These are written against the contracts, not against the package internals:
full recomputation instead of incremental updates, python loops instead of
vectorized shortcuts. Slow and blunt on purpose.
"""

import numpy as np


def fps_oracle(positions: np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min sampling, recomputing all distances from scratch each step."""
    chosen = [seed_index]
    for _ in range(k - 1):
        d2 = ((positions[:, None, :] - positions[chosen][None, :, :]) ** 2).sum(axis=2)
        nearest = d2.min(axis=1)
        chosen.append(int(np.argmax(nearest)))
    return np.array(chosen, dtype=np.int64)


def ball_query_oracle(centers, positions, radius, max_k):
    """Per-center membership lists built by explicit loops."""
    m = centers.shape[0]
    idx = np.zeros((m, max_k), dtype=np.int64)
    mask = np.zeros((m, max_k), dtype=bool)
    valid = np.zeros(m, dtype=bool)
    for i in range(m):
        found = []
        for j in range(positions.shape[0]):
            if ((centers[i] - positions[j]) ** 2).sum() <= radius * radius:
                found.append(j)
        if not found:
            dists = [((centers[i] - positions[j]) ** 2).sum() for j in range(positions.shape[0])]
            idx[i, :] = int(np.argmin(dists))
            continue
        found = found[:max_k]
        for s in range(max_k):
            idx[i, s] = found[s] if s < len(found) else found[0]
            mask[i, s] = s < len(found)
        valid[i] = True
    return idx, mask, valid


def radius_nn_oracle(queries, refs, radius):
    out = np.full(queries.shape[0], -1, dtype=np.int64)
    for i in range(queries.shape[0]):
        best, best_j = None, -1
        for j in range(refs.shape[0]):
            d2 = float(((queries[i] - refs[j]) ** 2).sum())
            if d2 <= radius * radius and (best is None or d2 < best):
                best, best_j = d2, j
        out[i] = best_j
    return out


def selective_match_oracle(pri_pos, aux_pos, radius):
    """Row-per-primary binary match matrix via the nearest-in-radius rule."""
    n, m = pri_pos.shape[0], aux_pos.shape[0]
    pm = np.zeros((n, m), dtype=bool)
    for i in range(n):
        best, best_j = None, -1
        for j in range(m):
            d2 = float(((pri_pos[i] - aux_pos[j]) ** 2).sum())
            if d2 <= radius * radius and (best is None or d2 < best):
                best, best_j = d2, j
        if best_j >= 0:
            pm[i, best_j] = True
    return pm


def nms_oracle(detections, iou_threshold, iou_fn):
    """Greedy keep/drop over the pinned ordering, using a caller-supplied IoU."""
    order = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].score, detections[i].box.center[0], i),
    )
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if detections[j].box.class_id != detections[i].box.class_id:
                continue
            if iou_fn(detections[j].box, detections[i].box) > iou_threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return [detections[i] for i in kept]


def aabb_iou_oracle(a, b):
    """IoU of two axis-aligned boxes by interval arithmetic (yaw must be 0)."""
    lo_a = a.center - a.size / 2.0
    hi_a = a.center + a.size / 2.0
    lo_b = b.center - b.size / 2.0
    hi_b = b.center + b.size / 2.0
    inter = np.prod(np.maximum(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0))
    union = a.volume + b.volume - inter
    return float(inter / union) if union > 0 else 0.0


def mc_iou_oracle(a, b, n_samples, seed):
    """Monte-Carlo IoU: uniform samples over the joint bounding box."""
    from halo3d.geometry import points_in_box

    lo = np.minimum(a.center - a.size, b.center - b.size)
    hi = np.maximum(a.center + a.size, b.center + b.size)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, 3))
    in_a = points_in_box(pts, a)
    in_b = points_in_box(pts, b)
    vol = float(np.prod(hi - lo))
    inter = in_a & in_b
    union = in_a | in_b
    if union.sum() == 0:
        return 0.0
    return float(inter.sum()) / float(union.sum())


def mlp_oracle(params: dict, prefix: str, dims, x: np.ndarray, final: str = "relu") -> np.ndarray:
    """Straight-line MLP recompute: relu between layers, configurable final."""
    h = x
    for i in range(len(dims) - 1):
        h = h @ params[f"{prefix}.w{i}"] + params[f"{prefix}.b{i}"]
        if i < len(dims) - 2 or final == "relu":
            h = np.maximum(h, 0.0)
        elif final == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-h))
    return h


def sa_oracle(params: dict, pos: np.ndarray, feat: np.ndarray, cfg, prefix: str,
              center_idx: np.ndarray, ball_query_fn):
    """Recompose one set-abstraction layer from given centers: two-radius
    grouping, per-branch MLP lift, masked max pool, concat, fused affine+relu."""
    outs = []
    for b in range(2):
        k = cfg.num_query[b]
        grp = ball_query_fn(pos[center_idx], pos, cfg.radii[b], k)
        flat = grp.indices.reshape(-1)
        rel = pos[flat] - pos[np.repeat(center_idx, k)]
        x = np.concatenate([rel, feat[flat]], axis=1)
        dims = (3 + feat.shape[1],) + cfg.mlp_dims[b]
        h = mlp_oracle(params, f"{prefix}.branch{b}", dims, x, final="relu")
        h = h.reshape(cfg.npoints, k, -1)
        h = np.where(grp.member_mask[:, :, None], h, -np.inf)
        outs.append(h.max(axis=1))
    cat = np.concatenate(outs, axis=1)
    f = cat @ params[f"{prefix}.fuse.w0"] + params[f"{prefix}.fuse.b0"]
    return np.maximum(f, 0.0)
