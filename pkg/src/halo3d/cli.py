"""Command-line surface.

Subcommands: gen-data (synthetic paired scenes), train (either stage), eval
(AP report from a checkpoint), report (SVG curves plus a summary table from
report/log files), selfcheck (quick gradient and kernel sanity checks).

Exit codes: 0 ok, 2 configuration or file problem, 3 numeric abort.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import geometry as geo
from . import pipeline as pl
from . import synth
from .autodiff import ParamStore, finite_diff_check_store
from .errors import Halo3dError, NumericsError
from .model import init_model, model_preset


# -- deterministic SVG line plots -------------------------------------------------
# Hand-rolled on purpose: byte-stable output (fixed float formatting, no
# timestamps) so report files can be checksummed.

_PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2")
_W, _H = 640, 400
_ML, _MR, _MT, _MB = 62, 16, 30, 42


def _ticks(lo, hi, n=5):
    return [lo + i * (hi - lo) / (n - 1) for i in range(n)]


def svg_line_plot(series, title, xlabel, ylabel):
    """Minimal line chart; series is a list of (label, xs, ys)."""
    series = [(lab, list(xs), list(ys)) for lab, xs, ys in series if len(xs) > 0]
    xs_all = [x for _, xs, _ in series for x in xs] or [0.0, 1.0]
    ys_all = [y for _, _, ys in series for y in ys] or [0.0, 1.0]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ys_all), max(ys_all)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def px(x):
        return _ML + pw * (x - x0) / (x1 - x0)

    def py(y):
        return _MT + ph * (1.0 - (y - y0) / (y1 - y0))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}" font-family="monospace" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title}</text>',
        f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        x = px(t)
        out.append(f'<line x1="{x:.2f}" y1="{_MT + ph}" x2="{x:.2f}" y2="{_MT + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.2f}" y="{_MT + ph + 16}" text-anchor="middle">{t:.4g}</text>')
    for t in _ticks(y0, y1):
        y = py(t)
        out.append(f'<line x1="{_ML - 4}" y1="{y:.2f}" x2="{_ML}" y2="{y:.2f}" stroke="black"/>')
        out.append(f'<text x="{_ML - 7}" y="{y + 3.5:.2f}" text-anchor="end">{t:.4g}</text>')
    out.append(
        f'<text x="{_ML + pw / 2:.1f}" y="{_H - 8}" text-anchor="middle">{xlabel}</text>'
    )
    out.append(
        f'<text x="14" y="{_MT + ph / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {_MT + ph / 2:.1f})">{ylabel}</text>'
    )
    for i, (label, xs, ys) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = _MT + 14 + 14 * i
        out.append(f'<line x1="{_ML + pw - 120}" y1="{ly}" x2="{_ML + pw - 100}" y2="{ly}" stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{_ML + pw - 94}" y="{ly + 3.5}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_pr_curves(report: dict) -> str:
    series = []
    for name in geo.CLASS_NAMES:
        entry = report["classes"].get(name)
        if entry and entry["pr"]["recall"]:
            series.append((name, entry["pr"]["recall"], entry["pr"]["precision"]))
    return svg_line_plot(series, "precision vs recall", "recall", "precision")


def render_loss_curves(records: list[dict]) -> str:
    steps = [r["step"] for r in records]
    series = [("l_s1", steps, [r["l_s1"] for r in records])]
    if any("l_s2" in r for r in records):
        for key in ("l_fm", "l_sdet", "l_s2"):
            series.append((key, steps, [r[key] for r in records]))
    return svg_line_plot(series, "training loss", "step", "loss")


def render_summary(report: dict) -> str:
    lines = [f"{'class':<12}{'ap':>8}{'iou':>7}{'n_gt':>7}{'n_det':>7}{'n_tp':>7}"]
    for name in geo.CLASS_NAMES:
        e = report["classes"].get(name)
        if e is None:
            continue
        lines.append(
            f"{name:<12}{e['ap']:>8.2f}{e['iou']:>7.2f}{e['n_gt']:>7d}{e['n_det']:>7d}{e['n_tp']:>7d}"
        )
    lines.append(f"mAP {report['map']:.2f}")
    return "\n".join(lines) + "\n"


# -- selfcheck --------------------------------------------------------------------
# Independent tiny oracles, re-coded here so an installed build can verify its
# own kernels without the test suite.


def _fps_oracle(pos, k):
    chosen = [0]
    d2 = ((pos - pos[0]) ** 2).sum(axis=1)
    for _ in range(k - 1):
        best = max(range(pos.shape[0]), key=lambda j: (d2[j], -j))
        chosen.append(best)
        d2 = np.minimum(d2, ((pos - pos[best]) ** 2).sum(axis=1))
    return np.array(chosen)


def _check_fps():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        pos = rng.normal(size=(50, 3))
        got = geo.farthest_point_sampling(pos, 12)
        np.testing.assert_array_equal(got, _fps_oracle(pos, 12))
    return "3 seeds, n=50, k=12"


def _check_ball_query():
    for seed in range(3):
        rng = np.random.default_rng(10 + seed)
        centers = rng.normal(size=(8, 3))
        pos = rng.normal(size=(60, 3))
        group = geo.ball_query(centers, pos, 1.2, 6)
        for i in range(8):
            d2 = ((pos - centers[i]) ** 2).sum(axis=1)
            found = [j for j in range(60) if d2[j] <= 1.2**2][:6]
            assert group.valid[i] == bool(found)
            if found:
                assert list(group.indices[i][: len(found)]) == found
                assert group.member_mask[i].sum() == len(found)
            else:
                assert group.indices[i][0] == int(np.argmin(d2))
    return "3 seeds, 8 centers over 60 points"


def _check_radius_nn():
    for seed in range(3):
        rng = np.random.default_rng(20 + seed)
        q = rng.normal(size=(40, 3))
        r = rng.normal(size=(30, 3))
        got = geo.radius_nn(q, r, 1.0)
        for i in range(40):
            d2 = ((r - q[i]) ** 2).sum(axis=1)
            j = int(np.argmin(d2))
            want = j if d2[j] <= 1.0 else -1
            assert got[i] == want
    return "3 seeds, 40 queries over 30 refs"


def _check_nms():
    for seed in range(3):
        rng = np.random.default_rng(30 + seed)
        dets = []
        for _ in range(25):
            center = np.append(rng.uniform(-2, 2, 2), 0.0)
            size = rng.uniform(0.8, 2.0, 3)
            dets.append(geo.Detection(
                geo.Box3D(center, size, float(rng.uniform(-3, 3)), int(rng.integers(0, 3))),
                float(rng.random()),
            ))
        got = geo.nms(dets, 0.1)
        order = sorted(range(25), key=lambda i: (-dets[i].score, dets[i].box.center[0], i))
        kept = []
        for i in order:
            if not any(
                dets[k].box.class_id == dets[i].box.class_id
                and geo.rotated_iou_3d(dets[k].box, dets[i].box) > 0.1
                for k in kept
            ):
                kept.append(i)
        want = [dets[i] for i in kept]  # nms keeps scan order
        assert len(got) == len(want) and all(a is b for a, b in zip(got, want))
    return "3 seeds, 25 boxes"


def _check_iou():
    a = geo.Box3D(np.zeros(3), np.ones(3), 0.0, 0)
    assert abs(geo.rotated_iou_3d(a, a) - 1.0) < 1e-12
    b = geo.Box3D(np.array([5.0, 0, 0]), np.ones(3), 0.3, 0)
    assert geo.rotated_iou_3d(a, b) == 0.0
    c = geo.Box3D(np.array([0.5, 0, 0]), np.ones(3), 0.0, 0)
    assert abs(geo.rotated_iou_3d(a, c) - 1.0 / 3.0) < 1e-12
    return "identity, disjoint, half-shift"


def _check_gradients():
    lidar_p = synth.ModalityProfile("lidar", 96, 0.02)
    radar_p = synth.ModalityProfile("radar", 48, 0.1)
    spec = synth.SceneSpec(seed=5, object_classes=(0, 2), clutter=24)
    scene = synth.generate_scene(spec, lidar_p, radar_p)
    mcfg = model_preset("micro", "radar")
    store = ParamStore(1)
    init_model(store, mcfg)
    batch = [(scene.radar, scene.boxes)]

    def loss():
        return pl.stage1_batch_loss(batch, mcfg, store)[0]

    worst, excluded = finite_diff_check_store(
        loss, store, ["model.offset.b1", "model.backbone.score.b1"]
    )
    assert worst < 1e-4, f"finite-difference mismatch {worst:.2e}"
    return f"worst rel err {worst:.1e}, {excluded} kink coordinates skipped"


_CHECKS = (
    ("gradients", _check_gradients),
    ("fps", _check_fps),
    ("ball-query", _check_ball_query),
    ("radius-nn", _check_radius_nn),
    ("nms", _check_nms),
    ("rotated-iou", _check_iou),
)


def _cmd_selfcheck(args):
    failed = 0
    for name, fn in _CHECKS:
        try:
            detail = fn()
            print(f"ok   {name}: {detail}")
        except AssertionError as e:
            failed += 1
            print(f"FAIL {name}: {e}")
    if failed:
        print(f"{failed} of {len(_CHECKS)} checks failed")
        return 3
    print(f"all {len(_CHECKS)} checks passed")
    return 0


# -- subcommands -------------------------------------------------------------------


def _cmd_gen_data(args):
    manifest = synth.write_dataset(args.out, args.scenes, args.seed, args.profile, args.val_frac)
    n_train = len(manifest["splits"]["train"])
    n_val = len(manifest["splits"]["val"])
    print(f"wrote {args.scenes} scenes to {args.out} (train {n_train}, val {n_val})")
    return 0


def _cmd_train(args):
    doc = {}
    if args.config:
        with open(args.config) as fh:
            doc = json.load(fh)
    doc["stage"] = args.stage
    doc["modality"] = args.modality
    cfg = pl.train_config_from_doc(doc)
    scenes = synth.load_split(args.data, "train")
    log_path = args.log if args.log else args.out + ".log.jsonl"
    if cfg.stage == 1:
        store, meta, records = pl.train_stage1(scenes, cfg, log_path, args.snapshot_dir)
    else:
        if not args.aux_ckpt:
            raise Halo3dError("train --stage 2 requires --aux-ckpt")
        if not args.pri_ckpt:
            raise Halo3dError("train --stage 2 requires --pri-ckpt")
        pri = pl.load_checkpoint(args.pri_ckpt)
        aux = pl.load_checkpoint(args.aux_ckpt)
        store, meta, records = pl.train_stage2(scenes, cfg, pri, aux, log_path, args.snapshot_dir)
    pl.save_checkpoint(args.out, store, meta)
    final = records[-1]
    total = final.get("l_s2", final["l_s1"])
    print(f"wrote {args.out}; {len(records)} steps, final loss {total:.4f}, log {log_path}")
    return 0


def _cmd_eval(args):
    store, meta = pl.load_checkpoint(args.ckpt)
    scenes = synth.load_split(args.data, args.split)
    report = pl.evaluate(scenes, store, meta)
    with open(args.report, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"map {report['map']:.2f} over {len(report['classes'])} classes -> {args.report}")
    return 0


def _cmd_report(args):
    with open(args.eval) as fh:
        report = json.load(fh)
    os.makedirs(args.out, exist_ok=True)
    written = []
    pr_path = os.path.join(args.out, "pr_curves.svg")
    with open(pr_path, "w") as fh:
        fh.write(render_pr_curves(report))
    written.append(pr_path)
    summary_path = os.path.join(args.out, "summary.txt")
    with open(summary_path, "w") as fh:
        fh.write(render_summary(report))
    written.append(summary_path)
    if args.log:
        records = [json.loads(line) for line in open(args.log)]
        loss_path = os.path.join(args.out, "loss_curves.svg")
        with open(loss_path, "w") as fh:
            fh.write(render_loss_curves(records))
        written.append(loss_path)
    print("wrote " + ", ".join(written))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="halo3d", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired-scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", choices=sorted(synth.PROFILES), default="toy")
    p.add_argument("--val-frac", type=float, default=0.2)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train one stage of one modality")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--modality", choices=sorted(geo.MODALITY_ATTRS), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON file of training settings")
    p.add_argument("--out", required=True, help="checkpoint path to write")
    p.add_argument("--pri-ckpt", help="stage-1 checkpoint of this modality (stage 2)")
    p.add_argument("--aux-ckpt", help="stage-1 checkpoint of the other modality (stage 2)")
    p.add_argument("--log", help="JSONL step log (default: <out>.log.jsonl)")
    p.add_argument("--snapshot-dir", help="directory for periodic checkpoints")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--report", required=True, help="JSON report path to write")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("report", help="render SVG curves and a summary table")
    p.add_argument("--eval", required=True, help="report JSON from the eval command")
    p.add_argument("--log", help="training JSONL for loss curves")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=_cmd_report)

    p = sub.add_parser("selfcheck", help="run quick gradient and kernel checks")
    p.set_defaults(fn=_cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (Halo3dError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
