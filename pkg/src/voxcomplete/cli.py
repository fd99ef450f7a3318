"""Command-line surface tying the pipeline together.

Subcommands: synth, fuse, distill-train, complete-train, complete, eval,
viz-pca, check. Every command exits 0 on success; failures emit a single
machine-readable JSON object on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

import numpy as np

from . import completion as cm
from . import fusion as fu
from . import metrics, synth, train, viz
from .volumes import GridSpec, MaskVolume, TsdfVolume
from .vxl_io import read_raw, read_volume, write_raster, write_volume


class _CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 1):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _CliError("usage", message, code=2)


def _build_parser() -> _Parser:
    p = _Parser(prog="voxcomplete", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--views", type=int, default=20)
    s.add_argument("--edge", type=int, default=32)
    s.add_argument("--truncation", type=float, default=3.0)
    s.add_argument("--feat-dim", type=int, default=16)
    s.add_argument("--patch-size", type=int, default=8)
    s.add_argument("--raster", type=int, default=64)
    s.add_argument("--save-views", action="store_true")

    f = sub.add_parser("fuse", help="re-fuse stored views into feature volumes")
    f.add_argument("--sample", required=True, help="sample dir with views/ and gt.vxl")
    f.add_argument("--out", required=True)
    f.add_argument("--input-view", type=int, default=0)
    f.add_argument("--truncation", type=float, default=3.0)

    d = sub.add_parser("distill-train", help="train the feature student")
    d.add_argument("--data", required=True, help="dataset manifest.json")
    d.add_argument("--config", required=True, help="training config JSON")
    d.add_argument("--out", required=True)

    c = sub.add_parser("complete-train", help="train the completion network")
    c.add_argument("--data", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--student", help="student checkpoint to initialize from")

    r = sub.add_parser("complete", help="run completion over a split")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--split", default="val-unseen")
    r.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True, help="directory of predicted .vxl volumes")
    e.add_argument("--gt", help="directory of ground-truth .vxl volumes")
    e.add_argument("--data", help="dataset manifest (alternative to --gt)")
    e.add_argument("--split", default=None)
    e.add_argument("--out", help="write the JSON report here (default stdout)")
    e.add_argument("--csv", help="also write a flat CSV table")
    e.add_argument("--truncation", type=float, default=3.0)

    v = sub.add_parser("viz-pca", help="project feature volumes to RGB via PCA")
    v.add_argument("--feat", action="append", required=True)
    v.add_argument("--mask", action="append", required=True)
    v.add_argument("--out", required=True)

    k = sub.add_parser("check", help="run oracle and gradient self-checks")
    k.add_argument("--json", action="store_true", help="emit results as JSON")
    return p


def _cmd_synth(args) -> int:
    synth.generate_dataset(
        args.out, args.n, args.seed, n_views=args.views, edge=args.edge,
        truncation=args.truncation, feat_dim=args.feat_dim,
        width=args.raster, height=args.raster, patch_size=args.patch_size,
        save_views=args.save_views,
    )
    print(json.dumps({"out": args.out, "n": args.n, "seed": args.seed}))
    return 0


def _load_views(sample_dir: str):
    vdir = os.path.join(sample_dir, "views")
    cams = sorted(glob.glob(os.path.join(vdir, "view_*.json")))
    if not cams:
        raise _CliError("missing-input", f"no views found under {vdir}")
    views = []
    for cam_path in cams:
        stem = cam_path[: -len(".json")]
        cam, patch_size, _, _ = fu.load_camera(cam_path)
        depth = read_raw(stem + "_depth.vxl")[1][0, 0]
        feats = read_raw(stem + "_feat.vxl")[1][:, 0]
        views.append(fu.ViewObservation(cam, depth, feats, patch_size))
    return views


def _cmd_fuse(args) -> int:
    gt = read_volume(os.path.join(args.sample, "gt.vxl"), truncation=args.truncation)
    views = _load_views(args.sample)
    if not 0 <= args.input_view < len(views):
        raise _CliError("bad-argument", f"input view {args.input_view} of {len(views)}")
    fused, validity, accs = synth.fuse_teacher_views(views, gt)
    cov = fu.coverage_mask(accs[args.input_view])
    inc = fu.incomplete_target(fused, cov)
    os.makedirs(args.out, exist_ok=True)
    write_volume(os.path.join(args.out, "dino_gt.vxl"), fused)
    write_volume(os.path.join(args.out, "dino_inc.vxl"), inc)
    write_volume(os.path.join(args.out, "mask.vxl"), validity)
    write_volume(os.path.join(args.out, "coverage.vxl"), cov)
    print(json.dumps({"out": args.out, "views": len(views)}))
    return 0


def _cmd_distill_train(args) -> int:
    cfg = train.TrainConfig.from_json(args.config)
    _, history = train.train_distill(args.data, cfg, args.out)
    print(json.dumps({"out": args.out, "epoch_loss": history}))
    return 0


def _cmd_complete_train(args) -> int:
    cfg = train.TrainConfig.from_json(args.config)
    _, history = train.train_complete(args.data, cfg, args.out, student_ckpt=args.student)
    print(json.dumps({"out": args.out, "epoch_loss": history}))
    return 0


def _cmd_complete(args) -> int:
    net, cfg = train.load_completion(args.ckpt)
    store = train.SampleStore(args.data, cfg.truncation)
    ids = store.ids(args.split)
    if not ids:
        raise _CliError("bad-argument", f"split {args.split!r} has no samples")
    os.makedirs(args.out, exist_ok=True)
    for sid in ids:
        pred = cm.complete_forward(net, store.volume(sid, "partial"))
        write_volume(os.path.join(args.out, f"{sid}.vxl"), pred)
    print(json.dumps({"out": args.out, "count": len(ids), "split": args.split}))
    return 0


def _eval_pairs(args):
    if args.data:
        store = train.SampleStore(args.data, args.truncation)
        for sid in store.ids(args.split):
            pred_path = os.path.join(args.pred, f"{sid}.vxl")
            if not os.path.exists(pred_path):
                continue
            yield sid, store.split_of(sid), pred_path, store.path(sid, "gt")
    elif args.gt:
        for pred_path in sorted(glob.glob(os.path.join(args.pred, "*.vxl"))):
            name = os.path.basename(pred_path)
            gt_path = os.path.join(args.gt, name)
            if os.path.exists(gt_path):
                yield name[:-4], "all", pred_path, gt_path
    else:
        raise _CliError("bad-argument", "eval needs --gt or --data")


def _cmd_eval(args) -> int:
    report = metrics.EvalReport(config={"pred": args.pred, "truncation": args.truncation})
    n = 0
    for sid, split, pred_path, gt_path in _eval_pairs(args):
        pred = read_volume(pred_path, truncation=args.truncation)
        gt = read_volume(gt_path, truncation=args.truncation)
        report.add(sid, split, metrics.chamfer(pred, gt), metrics.iou(pred, gt),
                   metrics.l1_error(pred, gt))
        n += 1
    if n == 0:
        raise _CliError("missing-input", "no prediction/ground-truth pairs found")
    text = report.to_json()
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        print(text)
    if args.csv:
        with open(args.csv, "w") as f:
            f.write(report.to_csv())
    return 0


def _cmd_viz_pca(args) -> int:
    if len(args.feat) != len(args.mask):
        raise _CliError("bad-argument", "--feat and --mask must pair up")
    pairs = []
    for fpath, mpath in zip(args.feat, args.mask):
        feat = read_volume(fpath)
        mask = read_volume(mpath)
        if not isinstance(mask, MaskVolume):
            raise _CliError("bad-argument", f"{mpath} is not a mask volume")
        pairs.append((feat, mask))
    basis = viz.fit_pca(pairs)
    os.makedirs(args.out, exist_ok=True)
    outs = []
    for (feat, mask), fpath in zip(pairs, args.feat):
        rgb = viz.apply_pca(basis, feat, mask)
        stem = os.path.splitext(os.path.basename(fpath))[0]
        out_path = os.path.join(args.out, f"{stem}_rgb.vxl")
        write_raster(out_path, rgb.astype(np.float32))
        outs.append(out_path)
    print(json.dumps({"out": outs, "rank": basis.rank}))
    return 0


def _cmd_check(args) -> int:
    from .selfcheck import run_self_checks

    results = run_self_checks()
    if args.json:
        print(json.dumps([{"name": n, "ok": ok, "detail": d} for n, ok, d in results]))
    else:
        width = max(len(n) for n, _, _ in results)
        for name, ok, detail in results:
            print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


_COMMANDS = {
    "synth": _cmd_synth,
    "fuse": _cmd_fuse,
    "distill-train": _cmd_distill_train,
    "complete-train": _cmd_complete_train,
    "complete": _cmd_complete,
    "eval": _cmd_eval,
    "viz-pca": _cmd_viz_pca,
    "check": _cmd_check,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _CliError as exc:
        print(json.dumps({"error": exc.kind, "message": str(exc)}), file=sys.stderr)
        return exc.code
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
