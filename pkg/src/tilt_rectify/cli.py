"""Batch command-line front end (``tilt-rectify``).

Exit codes: 0 success, 1 numeric-audit failure (or replay mismatch),
2 input/usage error, 3 optimizer abort.

Every command that writes files also writes a manifest holding its argv,
working directory, parsed configuration, seed, wall time and the SHA-256 of
each output.  ``tilt-rectify replay MANIFEST`` re-runs the command and checks
that the outputs hash identically.
"""
from __future__ import annotations

import argparse
import contextlib
import glob
import hashlib
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict

import numpy as np

from . import __version__, gradcheck
from . import io_formats as fio
from .direction_stats import Binning, fit_gmm, histogram_from_normals
from .errors import AntipodalDrift, BehindCamera, FormatError, TiltRectifyError
from .geometry import homography_from_rotation, rotation_between, slant_tilt_from_normal, tilt_from_direction, unit
from .losses import LOSSES, batch_reduce, satd_loss, slant_tilt_loss
from .metrics import angular_error, summarize
from .plane_refine import RefineConfig, refine_report
from .rectifier import DEFAULT_BANDWIDTH, RectifierConfig, optimize_e
from .synthesis import SceneSpec, render_view, sample_normals, sample_tilt, synthesize_tilted, tilt_rotation
from .warping import invisible_count, warp_image, warp_normal_map

EXIT_OK, EXIT_AUDIT, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3
THREADS_ENV = "TILT_RECTIFY_THREADS"


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 0:
        raise UsageError(f"{THREADS_ENV} must be >= 0")
    return n or (os.cpu_count() or 1)


def parallel_map(fn, items):
    """Ordered map over independent items, capped by ``TILT_RECTIFY_THREADS``."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def parse_vec3(text: str) -> np.ndarray:
    try:
        v = np.array([float(p) for p in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"expected 'x,y,z', got {text!r}") from exc
    if v.shape != (3,) or not np.all(np.isfinite(v)) or not np.any(v):
        raise UsageError(f"expected a nonzero 'x,y,z', got {text!r}")
    return unit(v)


def parse_bins(text: str) -> Binning:
    try:
        t, p = (int(x) for x in text.lower().split("x"))
        return Binning(t, p)
    except ValueError as exc:
        raise UsageError(f"expected bins as TxP (e.g. 19x36), got {text!r}") from exc


def expand_glob(pattern: str, what: str) -> list[str]:
    paths = sorted(glob.glob(pattern))
    if not paths:
        raise UsageError(f"no {what} match {pattern!r}")
    return paths


def ensure_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK | os.X_OK):
        raise UsageError(f"output directory {path} is not writable")
    return path


def sha256(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_manifest(path, args, argv, outputs, items=None, seed=None, started=None):
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    doc = {
        "command": args.command,
        "version": __version__,
        "argv": list(argv),
        "cwd": os.getcwd(),
        "config": config,
        "seed": seed,
        "outputs": {os.path.relpath(p, os.path.dirname(os.path.abspath(path))): sha256(p) for p in outputs},
        "items": items or [],
        "wall_time_s": round(time.perf_counter() - started, 3) if started is not None else None,
    }
    fio.write_json(doc, path)
    return doc


def beside(path: str, suffix: str = ".manifest.json") -> str:
    return path + suffix


# -- commands ------------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    started = time.perf_counter()
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    spec = SceneSpec.from_dict(fio.read_json(args.scene)) if args.scene else SceneSpec()
    roll_range, pitch_range = math.radians(args.roll_deg), math.radians(args.pitch_deg)
    for r in (roll_range, pitch_range):
        if not 0 <= r < math.pi / 2:
            raise UsageError("tilt ranges must lie in [0, 90) degrees")
    out = ensure_dir(args.out)
    Q = histogram_from_normals(render_view(spec).normals.valid_normals()) if args.e_mode == "optimize" else None

    def one(i):
        seed = args.seed + i
        roll, pitch = sample_tilt(roll_range, pitch_range, seed)
        R = tilt_rotation(roll, pitch)
        s = synthesize_tilted(spec, R, e_mode=args.e_mode, Q=Q, cfg=RectifierConfig(seed=seed))
        stem = os.path.join(out, f"sample_{i:04d}")
        files = {"image": stem + "_image.png", "normals": stem + "_normals.png"}
        fio.write_image(s.image, files["image"])
        fio.write_normal_map(s.normals, files["normals"])
        item = {
            "index": i,
            "seed": seed,
            "roll_deg": math.degrees(roll),
            "pitch_deg": math.degrees(pitch),
            "g": s.g,
            "e_gt": s.e_gt,
            "e_source": s.e_source,
            "files": {k: os.path.basename(v) for k, v in files.items()},
        }
        return item, list(files.values())

    results = parallel_map(one, range(args.count))
    k_path = os.path.join(out, "intrinsics.json")
    fio.write_intrinsics(spec.K, k_path)
    scene_path = os.path.join(out, "scene.json")
    fio.write_json(spec.to_dict(), scene_path)
    outputs = [k_path, scene_path] + [p for _, files in results for p in files]
    write_manifest(
        os.path.join(out, "manifest.json"), args, argv, outputs, [it for it, _ in results], args.seed, started
    )
    print(f"wrote {args.count} sample(s) to {out}")
    return EXIT_OK


def cmd_build_q(args, argv) -> int:
    started = time.perf_counter()
    binning = parse_bins(args.bins)
    if args.floor <= 0:
        raise UsageError("--floor must be positive")
    paths = [p for pattern in args.normals for p in expand_glob(pattern, "normal maps")]
    normals = np.concatenate([fio.read_normal_map(p).valid_normals() for p in paths])
    Q = histogram_from_normals(normals, binning, args.floor)
    fio.write_histogram(Q, args.out)
    items = [{"input": p} for p in paths]
    write_manifest(beside(args.out), args, argv, [args.out], items, None, started)
    print(f"histogram of {len(normals)} normals from {len(paths)} map(s) -> {args.out}")
    return EXIT_OK


def cmd_optimize_e(args, argv) -> int:
    started = time.perf_counter()
    g = parse_vec3(args.gravity)
    normals = fio.read_normal_map(args.normals)
    K = fio.read_intrinsics(args.intrinsics)
    if args.image:
        img = fio.read_image(args.image)
        if img.shape[:2] != normals.shape:
            raise FormatError(f"image {img.shape[:2]} and normals {normals.shape} differ in size")
    if normals.shape != K.shape:
        raise FormatError(f"normal map {normals.shape} does not match intrinsics {K.shape}")
    Q = fio.read_histogram(args.q)
    sample = sample_normals(normals, args.sample_size, args.seed)
    if len(sample) < args.k:
        raise UsageError(f"only {len(sample)} valid normals for k={args.k}")
    P = fit_gmm(sample, k=args.k, seed=args.seed)
    cfg = RectifierConfig(
        lambda_e=args.lambda_e,
        step=args.step,
        iters=args.iters,
        tol=args.tol,
        seed=args.seed,
        bandwidth=math.radians(args.bandwidth_deg),
    )
    init = parse_vec3(args.init) if args.init else g
    try:
        result = optimize_e(init, g, P, sample, Q, K, cfg)
    except (AntipodalDrift, BehindCamera) as exc:
        print(f"optimizer aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    fio.write_result(result, args.out)
    write_manifest(beside(args.out), args, argv, [args.out], None, args.seed, started)
    print(f"e* = {', '.join('%.9g' % v for v in result.e_star)} (converged: {result.converged})")
    return EXIT_OK


def cmd_rectify(args, argv) -> int:
    started = time.perf_counter()
    K = fio.read_intrinsics(args.intrinsics)
    g, e = parse_vec3(args.g), parse_vec3(args.e)
    img = fio.read_image(args.image)
    normals = fio.read_normal_map(args.normals)
    if img.shape[:2] != K.shape or normals.shape != K.shape:
        raise FormatError(f"inputs {img.shape[:2]} / {normals.shape} do not match intrinsics {K.shape}")
    out = ensure_dir(args.out)
    R = rotation_between(g, e)
    w_img = warp_image(img, homography_from_rotation(K, R), interp=args.interp)
    w_n = warp_normal_map(normals, R, K, interp=args.interp)
    paths = {
        "image": os.path.join(out, "rectified_image.png"),
        "normals": os.path.join(out, "rectified_normals.png"),
        "visible": os.path.join(out, "visible.png"),
        "stats": os.path.join(out, "stats.json"),
    }
    fio.write_image(w_img.image, paths["image"])
    fio.write_normal_map(w_n.image, paths["normals"])
    fio.write_mask(w_img.visible, paths["visible"])
    stats = {
        "invisible_count": invisible_count(w_img),
        "visible_count": int(np.count_nonzero(w_img.visible)),
        "width": K.width,
        "height": K.height,
        "rotation": R,
    }
    fio.write_json(stats, paths["stats"])
    write_manifest(os.path.join(out, "manifest.json"), args, argv, list(paths.values()), None, None, started)
    print(f"rectified; {stats['invisible_count']} invisible pixel(s)")
    return EXIT_OK


def pair_loss(name: str, pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-pixel loss values for ``(N, 3)`` arrays."""
    if name in LOSSES:
        return LOSSES[name](pred, gt)
    tp, zp = slant_tilt_from_normal(pred)
    tg, zg = slant_tilt_from_normal(gt)
    if name == "slant-tilt":
        return slant_tilt_loss((tp, tilt_from_direction(zp)), (tg, tilt_from_direction(zg)))
    return satd_loss(tp, zp, tg, zg)


def cmd_eval(args, argv) -> int:
    started = time.perf_counter()
    preds = expand_glob(args.pred, "prediction maps")
    gts = expand_glob(args.gt, "ground-truth maps")
    if len(preds) != len(gts):
        raise UsageError(f"{len(preds)} prediction map(s) but {len(gts)} ground-truth map(s)")

    def one(pair):
        p_path, g_path = pair
        rec = {"pred": p_path, "gt": g_path, "error": None, "summary": None, "loss": None}
        try:
            p, g = fio.read_normal_map(p_path), fio.read_normal_map(g_path)
            if p.shape != g.shape:
                raise FormatError(f"dimensions differ: {p.shape} vs {g.shape}")
            valid = p.valid & g.valid
            pv, gv = p.normals[valid], g.normals[valid]
            errs = angular_error(pv, gv)
            rec["summary"] = summarize(errs)
            rec["loss"] = batch_reduce(lambda a, b: pair_loss(args.loss, a, b), pv, gv)
            rec["_errors"], rec["_losses"] = errs, pair_loss(args.loss, pv, gv)
        except TiltRectifyError as exc:
            rec["error"] = f"{type(exc).__name__}: {exc}"
        return rec

    records = parallel_map(one, list(zip(preds, gts)))
    ok = [r for r in records if r["error"] is None]
    if not ok:
        for r in records:
            print(f"{r['pred']}: {r['error']}", file=sys.stderr)
        raise UsageError("no pair could be evaluated")
    summary = summarize(np.concatenate([r["_errors"] for r in ok]))
    loss = float(np.mean(np.concatenate([r["_losses"] for r in ok])))
    report = {
        "loss_name": args.loss,
        "loss": loss,
        "summary": summary.to_dict(),
        "pairs": [
            {
                "pred": r["pred"],
                "gt": r["gt"],
                "error": r["error"],
                "loss": r["loss"],
                "summary": r["summary"].to_dict() if r["summary"] else None,
            }
            for r in records
        ],
    }
    fio.write_json(report, args.report)
    outputs = [args.report]
    if args.csv:
        header = ["pred", "gt", "status", "loss"] + list(fio.SUMMARY_KEYS)
        rows = [
            [r["pred"], r["gt"], r["error"] or "ok", "" if r["loss"] is None else "%.9g" % r["loss"]]
            + fio.summary_row(r["summary"])
            for r in records
        ]
        fio.write_csv(header, rows, args.csv)
        outputs.append(args.csv)
    write_manifest(beside(args.report), args, argv, outputs, None, None, started)
    for r in records:
        if r["error"]:
            print(f"{r['pred']}: {r['error']}", file=sys.stderr)
    print(
        f"{len(ok)}/{len(records)} pair(s): mean {summary.mean:.4f} deg, median {summary.median:.4f} deg, "
        f"{args.loss} {loss:.6g}"
    )
    return EXIT_OK


def cmd_refine_planes(args, argv) -> int:
    started = time.perf_counter()
    mask_paths = expand_glob(args.masks, "masks")
    depth = fio.read_depth_map(args.depth)
    normals = fio.read_normal_map(args.normals)
    K = fio.read_intrinsics(args.intrinsics)
    if depth.shape != K.shape or normals.shape != K.shape:
        raise FormatError(f"depth {depth.shape} / normals {normals.shape} do not match intrinsics {K.shape}")
    masks = [fio.read_mask(p) for p in mask_paths]
    for p, m in zip(mask_paths, masks):
        if m.mask.shape != K.shape:
            raise FormatError(f"{p}: mask {m.mask.shape} does not match intrinsics {K.shape}")
    cfg = RefineConfig(keep_ratio=args.keep_ratio, seed=args.seed)
    out = ensure_dir(args.out)
    records = refine_report(masks, depth, normals, K, cfg)
    outputs, stats = [], []
    for path, rec in zip(mask_paths, records):
        d = rec.to_dict()
        d["source"] = os.path.basename(path)
        if rec.kept:
            target = os.path.join(out, f"refined_{rec.index:03d}.png")
            fio.write_mask(rec.mask, target)
            outputs.append(target)
            d["output"] = os.path.basename(target)
        stats.append(d)
    summary_path = os.path.join(out, "refine.json")
    fio.write_json(
        {
            "kept": [d["source"] for d in stats if d["kept"]],
            "discarded": [d["source"] for d in stats if not d["kept"]],
            "masks": stats,
            "config": asdict(cfg),
        },
        summary_path,
    )
    outputs.append(summary_path)
    write_manifest(os.path.join(out, "manifest.json"), args, argv, outputs, None, args.seed, started)
    print(f"kept {sum(r.kept for r in records)}/{len(records)} mask(s)")
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    started = time.perf_counter()
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    results = gradcheck.run_all(args.trials, args.seed)
    for r in results:
        flag = "PASS" if r.passed else "FAIL"
        print(f"{flag} {r.name:15s} max rel err {r.max_rel_err:.3e} (tol {r.tol:.0e}, n={r.count})")
    if args.report:
        fio.write_json({"suites": [r.to_dict() for r in results]}, args.report)
        write_manifest(beside(args.report), args, argv, [args.report], None, args.seed, started)
    return EXIT_OK if all(r.passed for r in results) else EXIT_AUDIT


@contextlib.contextmanager
def _working_dir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def cmd_replay(args, argv) -> int:
    """Re-run a manifest's command and compare output hashes."""
    doc = fio.read_json(args.manifest)
    for key in ("argv", "cwd", "outputs"):
        if key not in doc:
            raise fio.SchemaError(key, "missing field")
    base = os.path.dirname(os.path.abspath(args.manifest))
    with _working_dir(doc["cwd"]):
        code = main(doc["argv"])
    if code != EXIT_OK:
        return code
    mismatched = []
    for rel, digest in sorted(doc["outputs"].items()):
        path = os.path.join(base, rel)
        if not os.path.exists(path) or sha256(path) != digest:
            mismatched.append(rel)
    for rel in mismatched:
        print(f"MISMATCH {rel}", file=sys.stderr)
    print(f"replayed {doc.get('command')}: {len(doc['outputs']) - len(mismatched)}/{len(doc['outputs'])} identical")
    return EXIT_AUDIT if mismatched else EXIT_OK


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tilt-rectify", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render tilted box-room samples")
    s.add_argument("--scene", help="scene JSON (default: built-in room)")
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--roll-deg", type=float, default=45.0, help="roll drawn from [-R, R]")
    s.add_argument("--pitch-deg", type=float, default=45.0, help="pitch drawn from [-P, P]")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--e-mode", choices=("analytic", "optimize"), default="analytic")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-q", help="spherical histogram of upright normals")
    s.add_argument("--normals", required=True, action="append", help="glob of normal PNGs (repeatable)")
    s.add_argument("--bins", default="19x36")
    s.add_argument("--floor", type=float, default=1e-8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_q)

    s = sub.add_parser("optimize-e", help="solve for the principle direction")
    s.add_argument("--image")
    s.add_argument("--normals", required=True)
    s.add_argument("--gravity", required=True, help="'x,y,z' in the camera frame")
    s.add_argument("--q", required=True, help="histogram JSON")
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--lambda-e", type=float, default=0.1)
    s.add_argument("--step", type=float, default=0.02)
    s.add_argument("--iters", type=int, default=500)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--bandwidth-deg", type=float, default=math.degrees(DEFAULT_BANDWIDTH))
    s.add_argument("--sample-size", type=int, default=3000)
    s.add_argument("--init", help="'x,y,z' start (default: gravity)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_optimize_e)

    s = sub.add_parser("rectify", help="warp an image and its normals from g to e")
    s.add_argument("--image", required=True)
    s.add_argument("--normals", required=True)
    s.add_argument("--g", required=True)
    s.add_argument("--e", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--interp", choices=("bilinear", "nearest"), default="bilinear")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_rectify)

    s = sub.add_parser("eval", help="angular-error statistics and a batch loss")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--loss", choices=("l2", "al", "tal", "slant-tilt", "satd"), default="al")
    s.add_argument("--report", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("refine-planes", help="RANSAC plus region growing on plane masks")
    s.add_argument("--depth", required=True)
    s.add_argument("--normals", required=True)
    s.add_argument("--masks", required=True)
    s.add_argument("--intrinsics", required=True)
    s.add_argument("--keep-ratio", type=float, default=0.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_refine_planes)

    s = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("replay", help="re-run a manifest and verify output hashes")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AntipodalDrift as exc:
        print(f"optimizer aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (TiltRectifyError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
