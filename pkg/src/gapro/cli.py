"""Command-line interface.

Subcommands: ``generate`` (pseudo labels from a scene), ``eval`` (AP of a
label archive against ground truth), ``stats`` (overlap composition),
``synth`` (synthetic scene files) and ``perturb`` (box corruption).

Results go to stdout as JSON; log lines go to stderr.  Exit codes: 0 on
success, 2 for bad arguments, 3 for missing or malformed data, 4 when a
kernel matrix could not be conditioned.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

import gapro
from gapro.errors import ConditioningError, GaproError
from gapro.evaluation import (
    SceneSpec,
    average_precision,
    drop_boxes,
    generate_scene,
    labels_to_predictions,
    load_ground_truth,
    perturb_box_corners,
    write_ground_truth,
)
from gapro.ingest import (
    PointCloud,
    load_boxes,
    load_feature_matrix,
    load_point_cloud,
    load_pseudo_labels,
    load_superpoints,
    write_boxes,
    write_point_cloud,
    write_pseudo_labels,
    write_superpoints,
)
from gapro.labeler import (
    GRANULARITIES,
    MODES,
    LabelerConfig,
    generate_pseudo_labels,
)
from gapro.partition import build_region_table, overlap_statistics

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONDITIONING = 4


def _log(msg):
    print(msg, file=sys.stderr)


def _emit(payload):
    print(json.dumps(payload, indent=2))


def _config_from_args(args):
    return LabelerConfig(
        mode=args.mode.replace("-", "_"),
        granularity=args.granularity,
        length_scale=args.length_scale,
        output_scale=args.output_scale,
        jitter=args.jitter,
        learnable=not args.fixed_params,
        opt_iters=args.opt_iters,
        lr=args.lr,
        threshold=args.threshold,
        point_cap=args.point_cap,
        threads=args.threads,
    )


def _config_dict(config):
    return {
        "mode": config.mode,
        "granularity": config.granularity,
        "length_scale": config.length_scale,
        "output_scale": config.output_scale,
        "jitter": config.jitter,
        "learnable": config.learnable,
        "opt_iters": config.opt_iters,
        "lr": config.lr,
        "threshold": config.threshold,
        "point_cap": config.point_cap,
        "threads": config.effective_threads(),
    }


def _instance_palette(n):
    from gapro.evaluation import _palette

    return np.clip(_palette(max(n, 1), 1.0), 0.0, 1.0)


def _export_ply(path, cloud, labels, color_by):
    colors = np.full((cloud.count, 3), 0.5)
    if color_by == "instance":
        palette = _instance_palette(labels.instance_count)
        for k, inst in enumerate(labels.instances):
            colors[inst.candidate_indices[inst.mask]] = palette[k]
    else:
        var = np.zeros(cloud.count)
        has = np.zeros(cloud.count, dtype=bool)
        for inst in labels.instances:
            idx = inst.candidate_indices
            var[idx] = np.maximum(var[idx], inst.variance.astype(np.float64))
            has[idx] = True
        top = var.max()
        v = var / top if top > 0 else var
        colors[has] = np.stack([v[has], np.full(has.sum(), 0.2), 1.0 - v[has]],
                               axis=1)
    write_point_cloud(path, PointCloud(cloud.positions, colors), binary=True)


def cmd_generate(args):
    cloud = load_point_cloud(args.points)
    boxes = load_boxes(args.boxes)
    superpoints = load_superpoints(args.superpoints) if args.superpoints else None
    features = load_feature_matrix(args.features) if args.features else None
    config = _config_from_args(args)
    diagnostics = []
    _log(f"labeling {cloud.count} points, {len(boxes)} boxes "
         f"({config.mode}, {config.granularity})")
    labels = generate_pseudo_labels(cloud, boxes, config, superpoints,
                                    features, diagnostics)
    write_pseudo_labels(args.out, labels)
    if args.export_ply:
        _export_ply(args.export_ply, cloud, labels, args.ply_color)
    summary = {
        "n_points": labels.n_points,
        "n_instances": labels.instance_count,
        "n_pairs": len(diagnostics),
        "out": str(args.out),
    }
    if args.manifest:
        table = build_region_table(
            cloud, boxes,
            superpoints if config.granularity == "superpoint" else None,
            features)
        manifest = {
            "tool": f"gapro {gapro.__version__}",
            "command": "generate",
            "inputs": {
                "points": str(args.points),
                "boxes": str(args.boxes),
                "superpoints": str(args.superpoints) if args.superpoints else None,
                "features": str(args.features) if args.features else None,
            },
            "config": _config_dict(config),
            "overlap": overlap_statistics(table).to_dict(),
            "pairs": diagnostics,
            "outputs": {"labels": str(args.out)},
        }
        with open(args.manifest, "w", encoding="ascii") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
        summary["manifest"] = str(args.manifest)
    _emit(summary)
    return EXIT_OK


def cmd_eval(args):
    labels = load_pseudo_labels(args.labels)
    gt = load_ground_truth(args.gt)
    if labels.n_points != gt.count:
        raise GaproError("label archive and ground truth disagree on N")
    masks, confs, classes = labels_to_predictions(labels)
    report = average_precision(masks, confs, classes, gt).to_dict()
    if args.report:
        with open(args.report, "w", encoding="ascii") as fh:
            json.dump(report, fh, indent=2)
            fh.write("\n")
    _emit(report)
    return EXIT_OK


def cmd_stats(args):
    cloud = load_point_cloud(args.points)
    boxes = load_boxes(args.boxes)
    superpoints = load_superpoints(args.superpoints) if args.superpoints else None
    table = build_region_table(cloud, boxes, superpoints)
    _emit(overlap_statistics(table).to_dict())
    return EXIT_OK


def cmd_synth(args):
    spec = SceneSpec(
        seed=args.seed,
        n_objects=(args.objects[0], args.objects[1]),
        points_per_object=(args.points_per_object[0], args.points_per_object[1]),
        overlap_factor=args.overlap,
        color_separability=args.separability,
        n_background=args.background,
        primitive=args.primitive,
        class_count=args.classes,
    )
    cloud, boxes, superpoints, gt = generate_scene(spec)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_point_cloud(out / "points.ply", cloud, binary=not args.ascii)
    write_boxes(out / "boxes.json", boxes)
    write_superpoints(out / "superpoints.txt", superpoints)
    write_ground_truth(out / "gt.txt", gt)
    _emit({
        "n_points": cloud.count,
        "n_objects": len(boxes),
        "n_superpoints": superpoints.superpoint_count,
        "out_dir": str(out),
    })
    return EXIT_OK


def cmd_perturb(args):
    boxes = load_boxes(args.boxes)
    rng = np.random.default_rng(args.seed)
    if args.corner_noise is not None:
        boxes = perturb_box_corners(boxes, args.corner_noise, rng,
                                    fractional=args.fractional)
    if args.drop_rate is not None:
        boxes = drop_boxes(boxes, args.drop_rate, rng)
    write_boxes(args.out, boxes)
    _emit({"n_boxes": len(boxes), "out": str(args.out)})
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="gapro",
        description="Pseudo instance labels from 3D boxes via GP inference.")
    parser.add_argument("--version", action="version",
                        version=f"gapro {gapro.__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate pseudo labels for a scene")
    gen.add_argument("--points", required=True, help="input PLY point cloud")
    gen.add_argument("--boxes", required=True, help="input box JSON")
    gen.add_argument("--superpoints", help="superpoint id file")
    gen.add_argument("--features", help="external feature matrix")
    gen.add_argument("--mode", default="gp-classify",
                     choices=[m.replace("_", "-") for m in MODES])
    gen.add_argument("--granularity", default="superpoint",
                     choices=list(GRANULARITIES))
    gen.add_argument("--length-scale", type=float, default=0.5)
    gen.add_argument("--output-scale", type=float, default=1.0)
    gen.add_argument("--jitter", type=float, default=1e-4)
    gen.add_argument("--fixed-params", action="store_true",
                     help="skip hyperparameter optimization")
    gen.add_argument("--opt-iters", type=int, default=50)
    gen.add_argument("--lr", type=float, default=0.1)
    gen.add_argument("--threshold", type=float, default=0.5)
    gen.add_argument("--point-cap", type=int, default=None,
                     help="cap on GP training regions per pair (0 disables)")
    gen.add_argument("--threads", type=int, default=None,
                     help="worker threads over pairs (default GAPRO_THREADS or 1)")
    gen.add_argument("--out", required=True, help="output label archive")
    gen.add_argument("--manifest", help="write a run manifest JSON here")
    gen.add_argument("--export-ply", help="write a colored PLY of the labels")
    gen.add_argument("--ply-color", default="instance",
                     choices=["instance", "uncertainty"])
    gen.set_defaults(func=cmd_generate)

    ev = sub.add_parser("eval", help="score a label archive against ground truth")
    ev.add_argument("--labels", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--report", help="also write the report JSON here")
    ev.set_defaults(func=cmd_eval)

    st = sub.add_parser("stats", help="overlap composition of a scene")
    st.add_argument("--points", required=True)
    st.add_argument("--boxes", required=True)
    st.add_argument("--superpoints")
    st.set_defaults(func=cmd_stats)

    sy = sub.add_parser("synth", help="write a synthetic scene")
    sy.add_argument("--out-dir", required=True, type=Path)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--objects", type=int, nargs=2, default=[8, 15],
                    metavar=("LO", "HI"))
    sy.add_argument("--points-per-object", type=int, nargs=2,
                    default=[500, 2000], metavar=("LO", "HI"))
    sy.add_argument("--overlap", type=float, default=0.5)
    sy.add_argument("--separability", type=float, default=1.0)
    sy.add_argument("--background", type=int, default=500)
    sy.add_argument("--primitive", default="cuboid",
                    choices=["cuboid", "ellipsoid", "mixed"])
    sy.add_argument("--classes", type=int, default=3)
    sy.add_argument("--ascii", action="store_true",
                    help="write the PLY as ascii instead of binary")
    sy.set_defaults(func=cmd_synth)

    pe = sub.add_parser("perturb", help="corrupt a box file")
    pe.add_argument("--boxes", required=True)
    pe.add_argument("--out", required=True)
    pe.add_argument("--corner-noise", type=float,
                    help="uniform corner noise amplitude in meters")
    pe.add_argument("--fractional", action="store_true",
                    help="scale corner noise by the box dimensions")
    pe.add_argument("--drop-rate", type=float,
                    help="probability of dropping each box")
    pe.add_argument("--seed", type=int, default=0)
    pe.set_defaults(func=cmd_perturb)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConditioningError as exc:
        _log(f"error: {exc}")
        return EXIT_CONDITIONING
    except (GaproError, OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
