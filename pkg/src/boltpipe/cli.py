"""Command-line interface: one subcommand per pipeline stage plus an
end-to-end `run` driven by an INI-style config file."""

from __future__ import annotations

import argparse
import configparser
import sys
import time
from pathlib import Path

import numpy as np

from boltpipe import ply
from boltpipe.cloud import PointCloud
from boltpipe.geomfeat import compute_feature_channels
from boltpipe.geomfilter import FilterConfig, geometry_sensitive_filter
from boltpipe.maps import attach_maps, bolt_centroids
from boltpipe.metrics import evaluate
from boltpipe.preprocess import PreprocessConfig, preprocess
from boltpipe.segnet import (
    SegConfig,
    SegModel,
    TrainConfig,
    load_model,
    make_tiles,
    predict,
    save_model,
    train,
)
from boltpipe.synth import SynthConfig, generate_scan, scan_stats

# Row names used in per-stage timing reports.
TIMING_ROWS = (
    ("time_knn_filter", "Pre-processing - k-NN filtering"),
    ("time_components", "Pre-processing - Connected component filtering"),
    ("time_csf", "Pre-processing - Cloth simulation filter"),
    ("time_eigenvalues", "Geometry-sensitive filtering - Eigenvalue calculations"),
    ("time_dbscan", "Geometry-sensitive filtering - DBSCAN"),
    ("time_roi", "Geometry-sensitive filtering - ROI cropping"),
    ("time_segmentation", "Semantic segmentation"),
)


def _write_report(path, values: dict) -> None:
    with open(path, "w") as fh:
        for key, value in values.items():
            fh.write(f"{key}={value}\n")


def _print_timings(stats: dict) -> None:
    for key, label in TIMING_ROWS:
        if key in stats:
            print(f"{label}: {stats[key]:.2f} s")


def _cmd_synth(args):
    cfg = SynthConfig(length=args.length, tunnel_radius=args.radius,
                      point_spacing=args.spacing, bolt_count=args.bolts,
                      bolt_radius=args.bolt_radius,
                      noise_sigma=args.noise,
                      stray_cluster_count=args.clutter,
                      include_floor=not args.no_floor, seed=args.seed)
    cloud = generate_scan(cfg)
    ply.save_ply(cloud, args.out, args.format)
    stats = scan_stats(cloud)
    for key, value in stats.items():
        print(f"{key}={value}")
    _write_report(str(args.out) + ".report", stats)
    return 0


def _cmd_preprocess(args):
    cloud = ply.load_ply(args.infile)
    cfg = PreprocessConfig(knn_k=args.knn_k, knn_sigma_mult=args.knn_sigma,
                           csf_grid=args.csf_grid,
                           csf_iterations=args.csf_iters,
                           csf_threshold=args.csf_thresh,
                           cc_voxel=args.cc_voxel,
                           cc_min_points=args.cc_min)
    clean, stats = preprocess(cloud, cfg, keep_floor=args.keep_floor)
    ply.save_ply(clean, args.out)
    print(f"points in: {len(cloud)}  out: {len(clean)}")
    _print_timings(stats)
    _write_report(str(args.out) + ".report", stats)
    return 0


def _cmd_features(args):
    cloud = ply.load_ply(args.infile)
    out = compute_feature_channels(cloud, workers=args.threads)
    ply.save_ply(out, args.out)
    return 0


def _cmd_filter(args):
    cloud = ply.load_ply(args.infile)
    cfg = FilterConfig(percentile=args.percentile, dbscan_eps=args.eps,
                       dbscan_min_pts=args.min_pts, g_th=args.gth,
                       roi_radius=args.roi)
    filtered, stats = geometry_sensitive_filter(cloud, cfg,
                                                workers=args.threads)
    ply.save_ply(filtered, args.out)
    summary = (f"points in: {int(stats['points_in'])}  "
               f"out: {int(stats['points_out'])}  "
               f"background removed: {stats['background_removed_pct']:.2f}%")
    if "bolt_points_preserved_pct" in stats:
        summary += (f"  bolt points preserved: "
                    f"{stats['bolt_points_preserved_pct']:.2f}%")
    print(summary)
    _print_timings(stats)
    _write_report(str(args.out) + ".report", stats)
    return 0


def _cmd_train(args):
    cloud = ply.load_ply(args.infile)
    if cloud.labels is None:
        print("error: training input has no labels", file=sys.stderr)
        return 1
    tcfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch,
                       max_epochs=args.epochs, seed=args.seed,
                       tile_size=args.tile)
    scfg = SegConfig(k=args.k, edge_widths=tuple(args.widths),
                     agg_width=args.agg,
                     head_widths=tuple(args.head_widths))
    tiles = make_tiles(cloud, tcfg.tile_size, seed=tcfg.seed,
                       tiles_per_block=args.tiles_per_block)
    if args.folds > 1:
        n_val = max(1, len(tiles) // args.folds)
        val_tiles, tiles = tiles[:n_val], tiles[n_val:]
    else:
        val_tiles = None
    model = SegModel(scfg, seed=tcfg.seed)
    model, history = train(model, tiles, tcfg, val_tiles, verbose=True)
    save_model(model, args.model)
    report = {"epochs": tcfg.max_epochs,
              "final_train_loss": history["train"][-1]}
    if val_tiles:
        report["final_val_loss"] = history["val"][-1]
    _write_report(str(args.model) + ".report", report)
    return 0


def _cmd_predict(args):
    cloud = ply.load_ply(args.infile)
    model = load_model(args.model)
    t0 = time.perf_counter()
    pred = predict(model, cloud, n_s=args.tile)
    elapsed = time.perf_counter() - t0
    ply.save_ply(pred, args.out)
    print(f"Semantic segmentation: {elapsed:.2f} s")
    print(f"predicted bolt points: {int(pred.labels.sum())} / {len(pred)}")
    _write_report(str(args.out) + ".report",
                  {"time_segmentation": elapsed,
                   "predicted_bolt_points": int(pred.labels.sum())})
    return 0


def _cmd_eval(args):
    pred = ply.load_ply(args.pred)
    gt = ply.load_ply(args.gt)
    report = evaluate(pred, gt, match_thresh=args.match_thresh)
    values = report.as_dict()
    print(f"{'metric':<16} value")
    for key, value in values.items():
        print(f"{key:<16} {value:.4f}" if isinstance(value, float)
              else f"{key:<16} {value}")
    _write_report(str(args.pred) + ".report", values)
    return 0


def _cmd_maps(args):
    cloud = ply.load_ply(args.infile)
    pred = ply.load_ply(args.pred)
    if pred.labels is None:
        print("error: prediction cloud has no labels", file=sys.stderr)
        return 1
    bolt_points = pred.positions[pred.labels == 1]
    if not len(bolt_points):
        print("error: no bolt points in prediction", file=sys.stderr)
        return 1
    centroids = bolt_centroids(pred, pred.labels)
    out = attach_maps(cloud, bolt_points, centroids, radius=args.radius,
                      rgb=args.rgb)
    ply.save_ply(out, args.out)
    print(f"bolt instances: {len(centroids)}")
    return 0


# --- end-to-end run -------------------------------------------------------


def _stage_fresh(output: Path, inputs: list[Path]) -> bool:
    if not output.exists():
        return False
    return all(inp.exists() and output.stat().st_mtime >= inp.stat().st_mtime
               for inp in inputs)


def _cfg_args(section, defaults: dict) -> dict:
    out = dict(defaults)
    for key, value in section.items():
        if key in out and out[key] is not None:
            out[key] = type(out[key])(value)
        else:
            out[key] = value
    return out


def _cmd_run(args):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(args.config)
    if not read:
        print(f"error: cannot read config {args.config}", file=sys.stderr)
        return 1
    run_sec = parser["run"] if "run" in parser else {}
    stages = run_sec.get("stages", "preprocess filter predict eval maps").split()
    outdir = Path(run_sec.get("outdir", "boltpipe_out"))
    outdir.mkdir(parents=True, exist_ok=True)
    input_path = run_sec.get("input", "")
    if "synth" not in stages and (not input_path or not Path(input_path).exists()):
        print(f"error: run.input missing or not found: {input_path!r}",
              file=sys.stderr)
        return 1
    model_path = Path(run_sec.get("model", outdir / "model.bin"))

    raw = Path(input_path) if input_path else outdir / "scan.ply"
    clean = outdir / "clean.ply"
    filtered = outdir / "filtered.ply"
    pred = outdir / "pred.ply"
    maps_out = outdir / "maps.ply"
    timings: dict[str, float] = {}

    def sub(name):
        return parser[name] if name in parser else {}

    for stage in stages:
        t0 = time.perf_counter()
        try:
            if stage == "synth":
                if _stage_fresh(raw, []):
                    print("synth: up to date, skipped")
                    continue
                cfg_kw = _cfg_args(sub("synth"), {})
                cfg = SynthConfig(**{k: _coerce_synth(k, v)
                                     for k, v in cfg_kw.items()})
                ply.save_ply(generate_scan(cfg), raw)
            elif stage == "preprocess":
                if _stage_fresh(clean, [raw]):
                    print("preprocess: up to date, skipped")
                    continue
                kw = sub("preprocess")
                cfg = PreprocessConfig(
                    knn_k=kw.getint("knn_k", 6),
                    knn_sigma_mult=kw.getfloat("knn_sigma", 1.0),
                    csf_grid=kw.getfloat("csf_grid", 0.4),
                    csf_iterations=kw.getint("csf_iters", 500),
                    csf_threshold=kw.getfloat("csf_thresh", 0.5),
                    cc_voxel=kw.getfloat("cc_voxel", 0.016),
                    cc_min_points=kw.getint("cc_min", 10000),
                ) if kw else PreprocessConfig()
                keep_floor = kw.getboolean("keep_floor", False) if kw else False
                cloud = ply.load_ply(raw)
                out, stats = preprocess(cloud, cfg, keep_floor=keep_floor)
                timings.update({k: v for k, v in stats.items()
                                if k.startswith("time_")})
                ply.save_ply(out, clean)
            elif stage == "filter":
                if _stage_fresh(filtered, [clean]):
                    print("filter: up to date, skipped")
                    continue
                kw = sub("filter")
                cfg = FilterConfig(
                    percentile=kw.getfloat("percentile", 90.0),
                    dbscan_eps=kw.getfloat("eps", 0.1),
                    dbscan_min_pts=kw.getint("min_pts", 50),
                    g_th=kw.getint("gth", 400),
                    roi_radius=kw.getfloat("roi", 0.1),
                ) if kw else FilterConfig()
                cloud = ply.load_ply(clean)
                out, stats = geometry_sensitive_filter(cloud, cfg,
                                                       workers=args.threads)
                timings.update({k: v for k, v in stats.items()
                                if k.startswith("time_")})
                ply.save_ply(out, filtered)
            elif stage == "train":
                kw = sub("train")
                cloud = ply.load_ply(filtered)
                tcfg = TrainConfig(
                    learning_rate=kw.getfloat("lr", 0.001),
                    batch_size=kw.getint("batch", 16),
                    max_epochs=kw.getint("epochs", 32),
                    seed=kw.getint("seed", 7),
                    tile_size=kw.getint("tile", 2048),
                ) if kw else TrainConfig()
                tiles = make_tiles(cloud, tcfg.tile_size, seed=tcfg.seed)
                model = SegModel(SegConfig(), seed=tcfg.seed)
                model, _ = train(model, tiles, tcfg)
                save_model(model, model_path)
            elif stage == "predict":
                if _stage_fresh(pred, [filtered, model_path]):
                    print("predict: up to date, skipped")
                    continue
                cloud = ply.load_ply(filtered)
                model = load_model(model_path)
                out = predict(model, cloud)
                timings["time_segmentation"] = time.perf_counter() - t0
                ply.save_ply(out, pred)
            elif stage == "eval":
                gt = ply.load_ply(run_sec.get("gt", str(filtered)))
                report = evaluate(ply.load_ply(pred), gt)
                _write_report(outdir / "eval.report", report.as_dict())
                for key, value in report.as_dict().items():
                    print(f"{key}={value}")
            elif stage == "maps":
                pc = ply.load_ply(pred)
                if pc.labels is None or not pc.labels.sum():
                    print("maps: no predicted bolts, skipped")
                    continue
                bolt_points = pc.positions[pc.labels == 1]
                centroids = bolt_centroids(pc, pc.labels)
                base = ply.load_ply(clean if clean.exists() else raw)
                out = attach_maps(base, bolt_points, centroids)
                ply.save_ply(out, maps_out)
            else:
                print(f"error: unknown stage {stage!r}", file=sys.stderr)
                return 1
        except Exception as exc:  # noqa: BLE001 - report stage then abort
            print(f"error in stage {stage!r}: {exc}", file=sys.stderr)
            return 1
        print(f"{stage}: done in {time.perf_counter() - t0:.2f} s")

    _print_timings(timings)
    _write_report(outdir / "run.report", timings)
    return 0


def _coerce_synth(key, value):
    cfg = SynthConfig()
    if hasattr(cfg, key):
        current = getattr(cfg, key)
        if isinstance(current, bool):
            return value in ("1", "true", "yes", "on", True)
        return type(current)(value)
    raise ValueError(f"unknown synth option {key!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="boltpipe",
                                     description=__doc__)
    parser.add_argument("--threads", type=int, default=1,
                        help="worker cap for parallel queries (1 = fully "
                             "deterministic)")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a labeled synthetic scan")
    p.add_argument("--out", required=True)
    p.add_argument("--bolts", type=int, default=50)
    p.add_argument("--length", type=float, default=45.0)
    p.add_argument("--radius", type=float, default=2.2)
    p.add_argument("--spacing", type=float, default=0.008)
    p.add_argument("--bolt-radius", type=float, default=0.012)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--clutter", type=int, default=5)
    p.add_argument("--no-floor", action="store_true")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--format", default="binary-little-endian",
                   choices=["ascii", "binary-little-endian"])
    p.set_defaults(func=_cmd_synth)

    p = subs.add_parser("preprocess", help="k-NN + CSF + component filters")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--knn-k", type=int, default=6)
    p.add_argument("--knn-sigma", type=float, default=1.0)
    p.add_argument("--csf-grid", type=float, default=0.4)
    p.add_argument("--csf-iters", type=int, default=500)
    p.add_argument("--csf-thresh", type=float, default=0.5)
    p.add_argument("--cc-voxel", type=float, default=0.016)
    p.add_argument("--cc-min", type=int, default=10000)
    p.add_argument("--keep-floor", action="store_true")
    p.set_defaults(func=_cmd_preprocess)

    p = subs.add_parser("features", help="attach eigenvalue feature channels")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_features)

    p = subs.add_parser("filter", help="geometry-sensitive data filtering")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--percentile", type=float, default=90.0)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--min-pts", type=int, default=50)
    p.add_argument("--gth", type=int, default=400)
    p.add_argument("--roi", type=float, default=0.1)
    p.set_defaults(func=_cmd_filter)

    p = subs.add_parser("train", help="train the segmentation network")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--epochs", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--tile", type=int, default=2048)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--widths", type=int, nargs=3, default=[64, 64, 64])
    p.add_argument("--agg", type=int, default=256)
    p.add_argument("--head-widths", type=int, nargs=2, default=[256, 128])
    p.add_argument("--tiles-per-block", type=int, default=1)
    p.set_defaults(func=_cmd_train)

    p = subs.add_parser("predict", help="label a filtered cloud")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile", type=int, default=2048)
    p.set_defaults(func=_cmd_predict)

    p = subs.add_parser("eval", help="IoU and instance metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--match-thresh", type=float, default=0.5)
    p.set_defaults(func=_cmd_eval)

    p = subs.add_parser("maps", help="bolt distance and distribution maps")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--radius", type=float, default=2.0)
    p.add_argument("--rgb", action="store_true")
    p.set_defaults(func=_cmd_maps)

    p = subs.add_parser("run", help="run the configured pipeline end to end")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
