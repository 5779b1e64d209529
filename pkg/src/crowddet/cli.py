"""Command-line entry point: ``crowddet <subcommand> ...``.

Exit codes: 0 success, 1 invalid arguments or configuration, 2 a
verification failed (cost mismatch, gradient check, retention audit,
statistics check), 3 input/output problems (missing or malformed files).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3
SEED_ENV = "CROWDDET_SEED"
COST_TOLERANCE = 1e-9
GRAD_TOLERANCE = 1e-4


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive(kind=int):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}")
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def _non_negative(kind=int):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"not a number: {text!r}")
        if v < 0:
            raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
        return v

    return parse


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}")


def _emit(doc, path=None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- match-bench


def _instances_from_odgt(path, rng, n_pred: int, max_images: int | None):
    from .bench import detections_around
    from .datasets import load_odgt

    out = []
    for image_id, anns, size in _load_odgt_checked(path, load_odgt, with_sizes=True):
        boxes = np.array([a.fbox.as_array() for a in anns if not a.ignore]).reshape(-1, 4)
        if len(boxes) == 0:
            continue
        if size is None:
            size = (float(max(boxes[:, 2].max(), 1.0)), float(max(boxes[:, 3].max(), 1.0)))
        out.append(detections_around(rng, boxes, max(n_pred, len(boxes)), tuple(float(v) for v in size)))
        if max_images is not None and len(out) >= max_images:
            break
    if not out:
        raise InputError(f"{path}: no image with a non-ignore person")
    return out


def cmd_match_bench(args) -> int:
    from .bench import CSV_FIELDS, bench_instances, clustered_instance, random_instance, summarize, time_instance

    if not args.odgt and args.n_gt > args.n_pred:
        raise UsageError("--n-gt must not exceed --n-pred")
    rng = np.random.default_rng(args.seed)
    if args.odgt:
        instances = _instances_from_odgt(args.odgt, rng, args.n_pred, args.instances)
    else:
        gen = clustered_instance if args.kind == "clustered" else random_instance
        instances = [gen(rng, args.n_pred, args.n_gt) for _ in range(args.instances)]
    time_instance(instances[0], args.k_candidates, repeats=1)  # compile before timing
    rows, worst = bench_instances(instances, args.k_candidates, args.repeats)
    summary = summarize(rows)
    summary["max_cost_difference"] = worst
    mismatches = 0
    if worst > COST_TOLERANCE:
        # count the offending instances only when something went wrong
        from .assignment import build_match_cost, solve_exact, solve_fast_km

        for inst in instances:
            c = build_match_cost((inst.probs, inst.pred_boxes), inst.gt_boxes)
            if abs(solve_exact(c).total_cost - solve_fast_km(c, k_candidates=args.k_candidates).total_cost) > COST_TOLERANCE:
                mismatches += 1
    summary["cost_mismatches"] = mismatches
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
            w.writeheader()
            w.writerows(rows)
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)
        sys.stdout.write(buf.getvalue())
        if args.out:
            _emit(summary, args.out)
    else:
        _emit({"summary": summary, "rows": rows}, args.out)
    if mismatches:
        print(f"error: {mismatches} cost mismatches (max difference {worst:.3g})", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _load_odgt_checked(path, loader, **kw):
    try:
        return loader(path, **kw)
    except ValueError as e:
        raise InputError(str(e))


def cmd_eval(args) -> int:
    from .datasets import load_odgt
    from .evalmetrics import evaluate, load_detections, metrics_report

    try:
        dets = load_detections(args.dets)
    except ValueError as e:
        raise InputError(str(e))
    gts = {i: a for i, a in _load_odgt_checked(args.gts, load_odgt)}
    dets = {i: d for i, d in dets.items()}
    res = evaluate(dets, gts, args.iou)
    if res.n_gt == 0:
        raise UsageError("ground-truth file has no non-ignore person; AP is undefined")
    unknown = sorted(set(map(str, dets)) - set(map(str, gts)))
    report = metrics_report(res)
    report["images_without_annotations"] = len(unknown)
    _emit(report, args.out)
    return EXIT_OK


# ---------------------------------------------------------------- decoder-sim


def _decoder_config(args):
    from .decoder import DecoderConfig

    try:
        return DecoderConfig(
            n_layers=args.layers,
            n_heads=args.heads,
            channels=args.channels,
            n_queries=args.queries,
            k_neighbors=min(args.k_neighbors, args.queries),
            grid_side=args.grid_side,
            n_dq_layers=args.dq_layers,
            n_rf_layers=args.rf_layers,
            sampling_points=args.sampling_points,
            refine=args.refine,
        )
    except ValueError as e:
        raise UsageError(str(e))


def cmd_decoder_sim(args) -> int:
    from .decoder import gradient_check, init_params, perturb_params, random_feature_grid
    from .sim import simulate

    cfg = _decoder_config(args)
    n_people = args.persons if args.persons else max(1, cfg.n_queries // 3)
    if n_people > cfg.n_queries:
        raise UsageError("--persons must not exceed --queries")
    if not 1 <= args.full_layers <= cfg.n_layers:
        raise UsageError(f"--full-layers must lie in [1, {cfg.n_layers}]")
    try:
        sim = simulate(cfg, args.seed, n_people, int(args.overlaps), args.perturb, args.grid_size, args.full_layers)
    except ValueError as e:
        raise UsageError(f"scene: {e}")
    doc = sim.report
    status = EXIT_OK
    if args.grad_check:
        # gradients are checked on fully perturbed parameters so every head is active
        gc_params = perturb_params(init_params(cfg, args.seed), args.perturb, args.seed + 1)
        grid = random_feature_grid(args.grid_size, args.grid_size, cfg.channels, args.seed)
        per = gradient_check(grid, cfg, gc_params)
        worst = max(per.values())
        doc["grad_check"] = {
            "max_relative_error": worst,
            "tolerance": GRAD_TOLERANCE,
            "passed": worst < GRAD_TOLERANCE,
            "n_parameters": int(sum(p.value.size for p in gc_params.values())),
            "per_tensor": per,
        }
        if worst >= GRAD_TOLERANCE:
            status = EXIT_VERIFY
    _emit(doc, args.out)
    return status


# ---------------------------------------------------------------- gen / augment


def _scene_spec(args):
    from .datasets import SceneSpec

    fields = {}
    if args.config:
        try:
            with open(args.config) as fh:
                fields.update(json.load(fh))
        except json.JSONDecodeError as e:
            raise InputError(f"{args.config}: {e}")
    for flag, name in (
        ("width", "width"),
        ("height", "height"),
        ("persons", "persons_per_image"),
        ("overlaps", "overlaps_per_image"),
        ("clusters", "n_clusters"),
        ("spread", "spread"),
    ):
        v = getattr(args, flag)
        if v is not None:
            fields[name] = v
    fields["seed"] = args.seed
    try:
        spec = SceneSpec(**fields)
        spec.validate()
    except (TypeError, ValueError) as e:
        raise UsageError(f"scene spec: {e}")
    return spec


def cmd_gen(args) -> int:
    from .datasets import dataset_statistics, generate_scenes, write_odgt

    spec = _scene_spec(args)
    try:
        data = generate_scenes(spec, args.images)
    except ValueError as e:
        raise UsageError(f"scene spec: {e}")
    write_odgt(args.out, data, sizes={i: (spec.width, spec.height) for i, _ in data})
    stats = dataset_statistics(data)
    report = {"output": str(args.out), "seed": spec.seed, "statistics": stats}
    status = EXIT_OK
    if args.check_stats:
        ok_p = abs(stats["persons_per_image"] - spec.persons_per_image) <= 0.10 * spec.persons_per_image
        ok_o = abs(stats["overlaps_per_image"] - spec.overlaps_per_image) <= 0.15 * max(spec.overlaps_per_image, 1e-12)
        report["statistics_check"] = {"persons_within_10pct": ok_p, "overlaps_within_15pct": ok_o}
        if not (ok_p and ok_o):
            status = EXIT_VERIFY
    _emit(report, args.report)
    return status


def cmd_augment(args) -> int:
    from .datasets import CropSpec, crop_augment, load_odgt, min_retention, write_odgt

    crop = CropSpec(args.min_scale, args.max_scale, args.min_retention, args.max_retries, args.clip_fbox)
    try:
        crop.validate()
    except ValueError as e:
        raise UsageError(str(e))
    data = _load_odgt_checked(args.input, load_odgt, with_sizes=True)
    streams = np.random.SeedSequence(args.seed).spawn(len(data))
    out, sizes = [], {}
    worst, fallbacks, dropped, n_kept = 1.0, 0, 0, 0
    for (image_id, anns, size), ss in zip(data, streams):
        if args.width and args.height:
            size = (args.width, args.height)
        if size is None:
            raise UsageError(f"image {image_id}: no width/height in the file; pass --width and --height")
        res = crop_augment(size, anns, crop, np.random.default_rng(ss))
        worst = min(worst, min_retention(res, anns))
        fallbacks += res.fallback
        dropped += len(anns) - len(res.kept)
        n_kept += len(res.kept)
        out.append((image_id, res.annotations))
        sizes[image_id] = (res.window.width, res.window.height)
    write_odgt(args.output, out, sizes=sizes)
    passed = worst >= crop.min_retention
    _emit(
        {
            "output": str(args.output),
            "seed": args.seed,
            "images": len(data),
            "identity_fallbacks": fallbacks,
            "persons_kept": n_kept,
            "persons_dropped": dropped,
            "retention_audit": {"min_retention": worst, "required": crop.min_retention, "passed": passed},
        },
        args.report,
    )
    return EXIT_OK if passed else EXIT_VERIFY


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help=f"RNG seed (default: ${SEED_ENV} or 0)")

    p = _Parser(prog="crowddet", description="Crowd detection matching, decoder and evaluation tools.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    m = sub.add_parser("match-bench", parents=[common], help="time exact vs Fast-KM matching and verify costs")
    m.add_argument("--instances", type=_positive(), default=20, help="instances (or images from --odgt) to run")
    m.add_argument("--n-pred", type=_positive(), default=400, help="predictions per instance")
    m.add_argument("--n-gt", type=_positive(), default=100, help="ground truths per generated instance")
    m.add_argument("--k-candidates", type=_positive(), default=16, help="nearest predictions kept per GT")
    m.add_argument("--kind", choices=("clustered", "random"), default="clustered", help="instance generator")
    m.add_argument("--odgt", help="take ground truths from this odgt file instead of the generator")
    m.add_argument("--repeats", type=_positive(), default=3, help="timing repeats (best of)")
    m.add_argument("--format", choices=("json", "csv"), default="json", help="stdout report format")
    m.add_argument("--csv", help="also write per-instance rows to this CSV file")
    m.add_argument("--out", help="write the JSON report here instead of stdout")
    m.set_defaults(func=cmd_match_bench)

    e = sub.add_parser("eval", parents=[common], help="AP, MR^-2 and recall of detections against odgt annotations")
    e.add_argument("--dets", required=True, help="detections, JSON lines {image_id, score, box: [x, y, w, h]}")
    e.add_argument("--gts", required=True, help="ground truth odgt file")
    e.add_argument("--iou", type=float, default=0.5, help="match threshold (IoU >= value)")
    e.add_argument("--out", help="write the JSON report here instead of stdout")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("decoder-sim", parents=[common], help="run the toy decoder on a synthetic scene and report diagnostics")
    d.add_argument("--layers", type=_positive(), default=6)
    d.add_argument("--heads", type=_positive(), default=2)
    d.add_argument("--channels", type=_positive(), default=8)
    d.add_argument("--queries", type=_positive(), default=30)
    d.add_argument("--k-neighbors", type=_positive(), default=8, help="DQ neighborhood size (capped at --queries)")
    d.add_argument("--grid-side", type=_positive(), default=2, help="RF grid is side x side points per head")
    d.add_argument("--dq-layers", type=_non_negative(), default=0, help="trailing layers using dense-query self-attention")
    d.add_argument("--rf-layers", type=_non_negative(), default=0, help="trailing layers using the rectified field")
    d.add_argument("--sampling-points", type=_positive(), default=4, help="learned sampling points per head")
    d.add_argument("--refine", choices=("additive", "inverse_sigmoid"), default="additive")
    d.add_argument("--full-layers", type=_positive(), default=2, help="trailing layers supervised with full boxes")
    d.add_argument("--persons", type=_positive(), default=None, help="people in the scene (default queries // 3)")
    d.add_argument("--overlaps", type=_non_negative(), default=1, help="IoU>0.5 pairs in the scene")
    d.add_argument("--grid-size", type=_positive(), default=16, help="feature grid height and width")
    d.add_argument("--perturb", type=_non_negative(float), default=0.3, help="noise added to initial parameters")
    d.add_argument("--grad-check", action="store_true", help="compare reverse-mode and finite-difference gradients")
    d.add_argument("--out", help="write the JSON report here instead of stdout")
    d.set_defaults(func=cmd_decoder_sim)

    g = sub.add_parser("gen", parents=[common], help="generate synthetic crowd scenes as odgt")
    g.add_argument("--images", type=_non_negative(), default=500)
    g.add_argument("--out", required=True, help="output odgt path")
    g.add_argument("--config", help="JSON file of scene settings (flags override it)")
    g.add_argument("--width", type=_positive(), default=None)
    g.add_argument("--height", type=_positive(), default=None)
    g.add_argument("--persons", type=_positive(float), default=None, help="mean persons per image")
    g.add_argument("--overlaps", type=_non_negative(float), default=None, help="mean IoU>0.5 pairs per image")
    g.add_argument("--clusters", type=_positive(), default=None)
    g.add_argument("--spread", type=_positive(float), default=None)
    g.add_argument("--check-stats", action="store_true", help="fail (exit 2) if the means miss their targets")
    g.add_argument("--report", help="write the JSON report here instead of stdout")
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("augment", parents=[common], help="crop every image without cutting visible regions")
    a.add_argument("--in", dest="input", required=True, help="input odgt")
    a.add_argument("--out", dest="output", required=True, help="output odgt")
    a.add_argument("--width", type=_positive(), default=None, help="frame width when the file has none")
    a.add_argument("--height", type=_positive(), default=None, help="frame height when the file has none")
    a.add_argument("--min-scale", type=_positive(float), default=0.5)
    a.add_argument("--max-scale", type=_positive(float), default=1.0)
    a.add_argument("--min-retention", type=_positive(float), default=0.8)
    a.add_argument("--max-retries", type=_positive(), default=50)
    a.add_argument("--clip-fbox", action="store_true", help="clip full boxes to the crop too")
    a.add_argument("--report", help="write the JSON report here instead of stdout")
    a.set_defaults(func=cmd_augment)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is None:
            args.seed = _default_seed()
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as e:
        print(f"input error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
