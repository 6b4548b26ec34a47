"""Command-line pipeline: synth -> prior -> estimate -> eval, plus grid sweeps.

Exit codes: 0 success, 1 usage error, 2 input validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bundle import (
    BundleError,
    Bundle,
    dump_json,
    read_bundle,
    read_json,
    resolve_meshes,
    symmetry,
    write_bundle,
)
from .geometry import GeometryError
from .likelihood import LikelihoodError, LikelihoodWeights
from .metrics import accuracy_curve, object_error
from .particle_filter import EstimateReport, FilterConfig, run_scene
from .plotting import plot_accuracy_curves, plot_weight_traces
from .priors import PRESETS, CorruptionSpec, DetectionPrior, PriorError, load_prior, preset, save_prior, synth_prior
from .synth import CATALOG, SETTINGS, default_intrinsics, generate_scene

logger = logging.getLogger("posefilter")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2, 3
PRIOR_STREAM = 7
CLASS_STREAM = 1000


class UsageError(Exception):
    pass


class InputError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# pipeline steps (also used by sweep and tests)
# ---------------------------------------------------------------------------

def pick_classes(n: int, seed: int) -> list[str]:
    names = list(CATALOG)
    if not 1 <= n <= len(names):
        raise UsageError(f"--objects must be between 1 and {len(names)}")
    order = np.random.default_rng([seed, CLASS_STREAM]).permutation(len(names))
    return [names[i] for i in sorted(order[:n])]


def synth_scene(classes, setting: str, seed: int, width: int = 96, height: int = 96,
                table: bool = True):
    return generate_scene(classes, setting, seed, default_intrinsics(width, height), table)


def make_prior(bundle: Bundle, spec: CorruptionSpec, seed: int) -> DetectionPrior:
    gt = bundle.gt_boxes()
    boxes = {cls: b[0] for cls, b in gt.detections.items()}
    rng = np.random.default_rng([seed, PRIOR_STREAM])
    return synth_prior(boxes, spec, rng, gt.width, gt.height)


def manifest(bundle_path, prior_path, classes, config: FilterConfig) -> dict:
    # worker count is deliberately absent: outputs do not depend on it
    return {
        "tool": "posefilter",
        "version": __version__,
        "command": "estimate",
        "bundle": str(bundle_path),
        "prior": str(prior_path),
        "classes": list(classes),
        "seed": config.rng_seed,
        "config": config.to_dict(),
    }


def estimate(bundle: Bundle, prior: DetectionPrior, config: FilterConfig, classes=None,
             workers: int = 1) -> list[EstimateReport]:
    k = bundle.intrinsics
    if (prior.width, prior.height) != (k.width, k.height):
        raise InputError(f"prior is for a {prior.width}x{prior.height} image, "
                         f"scene is {k.width}x{k.height}")
    classes = sorted(prior.detections) if classes is None else list(classes)
    meshes = resolve_meshes(bundle, classes)
    return run_scene(classes, meshes, prior, bundle.observation, config, workers)


def estimate_document(reports, man: dict) -> dict:
    return {"manifest": man, "reports": [r.to_dict() for r in reports]}


def evaluate(bundle: Bundle, reports: list[EstimateReport], t_max: float = 0.04,
             steps: int = 401) -> dict:
    """Errors for every scene object; reports for classes not in the scene are absent queries."""
    by_class = {r.object_class: r for r in reports}
    missing = [c for c in bundle.classes if c not in by_class]
    if missing:
        raise InputError(f"no estimate for scene class(es): {', '.join(missing)}")
    sym = symmetry(bundle)
    objects, errors = [], []
    for o in bundle.scene.objects:
        rep = by_class[o.name]
        err = object_error(o.mesh, o.pose, rep.best_pose, sym[o.name])
        errors.append(err)
        objects.append({
            "class": o.name,
            "metric": "ADD-S" if sym[o.name] else "ADD",
            "error": err if math.isfinite(err) else None,
            "best_weight": rep.best_weight,
            "converged": rep.converged,
            "present": rep.present,
            "failed": rep.failed,
        })
    absent = [{"class": r.object_class, "best_weight": r.best_weight, "present": r.present}
              for r in reports if r.object_class not in sym]
    curve = accuracy_curve(errors, t_max, steps)
    auc = {"all": curve.auc}
    for o, err in zip(bundle.scene.objects, errors):
        auc[o.name] = accuracy_curve([err], t_max, steps).auc
    return {
        "t_max": t_max,
        "steps": steps,
        "objects": objects,
        "absent_queries": absent,
        "auc": auc,
        "curve": {"thresholds": curve.thresholds.tolist(), "accuracy": curve.accuracy.tolist()},
    }


def write_curve_csv(metrics: dict, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "accuracy"])
        for t, a in zip(metrics["curve"]["thresholds"], metrics["curve"]["accuracy"]):
            w.writerow([repr(t), repr(a)])


def read_curve_csv(path) -> tuple[list[float], list[float]]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return [float(r["threshold"]) for r in rows], [float(r["accuracy"]) for r in rows]


def curve_from_metrics(metrics: dict):
    from .metrics import AccuracyCurve
    return AccuracyCurve(np.array(metrics["curve"]["thresholds"]),
                         np.array(metrics["curve"]["accuracy"]), metrics["auc"]["all"])


# ---------------------------------------------------------------------------
# argument helpers
# ---------------------------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _size(text):
    try:
        w, h = (int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}")
    return w, h


def _seeds(text):
    seeds = []
    for part in text.split(","):
        if "-" in part.strip("-"):
            lo, hi = part.split("-")
            seeds.extend(range(int(lo), int(hi) + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("no seeds given")
    return seeds


def parse_corruption(token: str) -> tuple[str, CorruptionSpec]:
    """'preset' or 'preset:key=value;key=value' (e.g. 'jitter:center_jitter_frac=0.3')."""
    name, _, rest = token.partition(":")
    overrides = {}
    for item in filter(None, rest.split(";")):
        key, _, value = item.partition("=")
        if key not in CorruptionSpec.__dataclass_fields__:
            raise InputError(f"unknown corruption field {key!r} in {token!r}")
        overrides[key] = int(value) if key in ("false_positives", "decoys") else float(value)
    return token, preset(name, **overrides)


def add_filter_args(p):
    g = p.add_argument_group("filter")
    g.add_argument("--samples", type=_positive_int, default=625)
    g.add_argument("--iters", type=int, default=400)
    g.add_argument("--epsilon", type=float, default=0.005, help="inlier distance [m]")
    g.add_argument("--wbar", type=float, default=0.9, help="convergence threshold")
    g.add_argument("--alphas", default="0.1,0.1,0.3,0.25,0.25",
                   help="weights of w_box, I_b, I_r, I_e, I_p (must sum to 1)")
    g.add_argument("--sigma-t", type=float, default=0.07, help="initial translation noise [m]")
    g.add_argument("--sigma-r", type=float, default=0.3, help="initial rotation noise [rad]")
    g.add_argument("--presence", type=float, default=0.5, help="presence threshold on best weight")
    g.add_argument("--render-size", type=_size, default=None, help="score on a WxH grid")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=_positive_int, default=1)


def config_from_args(args) -> FilterConfig:
    if args.iters < 0:
        raise UsageError("--iters must be >= 0")
    try:
        weights = LikelihoodWeights.parse(args.alphas)
    except ValueError as exc:
        raise InputError(f"--alphas: {exc}") from exc
    return FilterConfig(num_samples=args.samples, max_iterations=args.iters,
                        convergence_threshold=args.wbar, sigma_t0=args.sigma_t,
                        sigma_r0=args.sigma_r, epsilon=args.epsilon, weights=weights,
                        rng_seed=args.seed, presence_threshold=args.presence,
                        render_size=args.render_size)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.classes:
        classes = [c.strip() for c in args.classes.split(",") if c.strip()]
        unknown = [c for c in classes if c not in CATALOG]
        if unknown or not classes:
            raise UsageError(f"unknown classes {unknown}; choose from {list(CATALOG)}")
    else:
        classes = pick_classes(args.objects, args.seed)
    if args.setting == "occlusion" and len(classes) < 2:
        raise UsageError("occlusion needs at least 2 objects")
    scene = synth_scene(classes, args.setting, args.seed, args.width, args.height, not args.no_table)
    write_bundle(scene, args.out)
    print(f"wrote {args.out} ({', '.join(classes)})")
    return EXIT_OK


def cmd_prior(args) -> int:
    bundle = read_bundle(args.bundle)
    spec = preset(args.preset, drop_prob=args.drop, center_jitter_frac=args.jitter,
                  false_positives=args.false_positives)
    prior = make_prior(bundle, spec, args.seed)
    save_prior(prior, args.out)
    counts = ", ".join(f"{c}: {len(b)}" for c, b in sorted(prior.detections.items()))
    print(f"wrote {args.out} ({counts})")
    return EXIT_OK


def cmd_estimate(args) -> int:
    if args.replay:
        man = read_json(args.replay)
        man = man.get("manifest", man)
        try:
            config = FilterConfig.from_dict(man["config"])
            bundle_path, prior_path, classes = man["bundle"], man["prior"], man["classes"]
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{args.replay}: not a run manifest ({exc})") from exc
    else:
        if not (args.bundle and args.prior):
            raise UsageError("--bundle and --prior are required unless --replay is given")
        config = config_from_args(args)
        bundle_path, prior_path = args.bundle, args.prior
        classes = [c for c in args.classes.split(",") if c] if args.classes else None
    bundle = read_bundle(bundle_path)
    prior = load_prior(prior_path)
    if classes is None:
        classes = sorted(prior.detections)
    reports = estimate(bundle, prior, config, classes, args.workers)
    dump_json(estimate_document(reports, manifest(bundle_path, prior_path, classes, config)), args.out)
    for r in reports:
        status = f"error: {r.error}" if r.failed else (
            f"weight {r.best_weight:.3f} after {r.iterations_run} iterations"
            f"{' (converged)' if r.converged else ''}")
        print(f"{r.object_class}: {status}")
    if args.trace_plot:
        plot_weight_traces({r.object_class: r.weight_trace for r in reports if not r.failed},
                           args.trace_plot, config.convergence_threshold)
    return EXIT_OK


def _load_reports(path) -> list[EstimateReport]:
    doc = read_json(path)
    try:
        return [EstimateReport.from_dict(d) for d in doc["reports"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: malformed estimate file ({exc})") from exc


def cmd_eval(args) -> int:
    bundle = read_bundle(args.bundle)
    reports = _load_reports(args.estimate)
    metrics = evaluate(bundle, reports, args.t_max)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(metrics, out / "metrics.json")
    write_curve_csv(metrics, out / "curve.csv")
    plot_accuracy_curves({"all objects": curve_from_metrics(metrics)}, out / "accuracy.png")
    for o in metrics["objects"]:
        err = "missing" if o["error"] is None else f"{o['error'] * 1000:.2f} mm"
        print(f"{o['class']}: {o['metric']} {err}")
    print(f"AUC {metrics['auc']['all']:.4f}")
    return EXIT_OK


SWEEP_FIELDS = ["setting", "corruption", "seeds", "runs", "failed", "convergence_rate",
                "median_error", "auc", "status"]


def run_cell(out: Path, setting: str, corruption: str, spec: CorruptionSpec, seeds, classes_for,
             config: FilterConfig, workers: int, table: bool = True):
    """One sweep cell: per seed synth -> prior -> estimate -> eval through files on disk."""
    errors, converged, traces, failed = [], [], {}, 0
    for seed in seeds:
        run_dir = out / "runs" / f"{setting}__{corruption.replace(':', '_').replace(';', '_')}" / f"seed{seed}"
        scene = synth_scene(classes_for(seed), setting, seed, table=table)
        write_bundle(scene, run_dir / "bundle")
        bundle = read_bundle(run_dir / "bundle")
        prior = make_prior(bundle, spec, seed)
        save_prior(prior, run_dir / "prior.json")
        cfg = FilterConfig.from_dict({**config.to_dict(), "rng_seed": seed})
        reports = estimate(bundle, prior, cfg, sorted(prior.detections))
        dump_json(estimate_document(reports, manifest(run_dir / "bundle", run_dir / "prior.json",
                                                      sorted(prior.detections), cfg)),
                  run_dir / "estimate.json")
        metrics = evaluate(bundle, reports, 0.04)
        dump_json(metrics, run_dir / "metrics.json")
        for o in metrics["objects"]:
            errors.append(math.inf if o["error"] is None else o["error"])
            converged.append(o["converged"])
            failed += o["failed"]
        for r in reports:
            if not r.failed:
                traces[f"{r.object_class} s{seed}"] = r.weight_trace
    curve = accuracy_curve(errors)
    row = {
        "setting": setting,
        "corruption": corruption,
        "seeds": len(seeds),
        "runs": len(errors),
        "failed": failed,
        "convergence_rate": float(np.mean(converged)),
        "median_error": float(np.median(errors)),
        "auc": curve.auc,
        "status": "failed" if failed == len(errors) else "ok",
    }
    return row, curve, traces


def cmd_sweep(args) -> int:
    config = config_from_args(args)
    settings = [s for s in args.settings.split(",") if s]
    bad = [s for s in settings if s not in SETTINGS]
    if bad or not settings:
        raise UsageError(f"unknown settings {bad}; choose from {list(SETTINGS)}")
    corruptions = [parse_corruption(t) for t in (args.corruption or ["clean"])]
    if args.classes:
        fixed = [c for c in args.classes.split(",") if c]
        if any(c not in CATALOG for c in fixed):
            raise UsageError(f"unknown classes; choose from {list(CATALOG)}")
        classes_for = lambda seed: fixed  # noqa: E731
    else:
        pick_classes(args.objects, 0)  # validate the count up front
        classes_for = lambda seed: pick_classes(args.objects, seed)  # noqa: E731
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows, curves, all_traces = [], {}, {}
    for setting in settings:
        for token, spec in corruptions:
            if setting == "occlusion" and args.classes is None and args.objects < 2:
                raise UsageError("occlusion needs --objects >= 2")
            try:
                row, curve, traces = run_cell(out, setting, token, spec, args.seeds, classes_for,
                                              config, args.workers, not args.no_table)
                curves[f"{setting}/{token}"] = curve
                all_traces.update({f"{setting}/{token} {k}": v for k, v in traces.items()})
            except Exception as exc:  # a failing cell must not abort the grid
                logger.warning("cell %s/%s failed: %s", setting, token, exc)
                row = dict.fromkeys(SWEEP_FIELDS, "")
                row.update(setting=setting, corruption=token, seeds=len(args.seeds), status="failed")
            rows.append(row)
            print(",".join(str(row[k]) for k in SWEEP_FIELDS))

    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    plot_accuracy_curves(curves, out / "accuracy.png")
    plot_weight_traces(all_traces, out / "traces.png", config.convergence_threshold)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="posefilter", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic scene bundle")
    s.add_argument("--objects", type=int, default=3, help="number of catalog classes to place")
    s.add_argument("--classes", help="comma-separated class names (overrides --objects)")
    s.add_argument("--setting", choices=SETTINGS, default="base")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--width", type=int, default=96)
    s.add_argument("--height", type=int, default=96)
    s.add_argument("--no-table", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prior", help="corrupt ground-truth boxes into a detection prior")
    s.add_argument("--bundle", required=True)
    s.add_argument("--preset", choices=sorted(PRESETS), default="clean")
    s.add_argument("--drop", type=float, default=None, help="override drop probability")
    s.add_argument("--jitter", type=float, default=None, help="override center jitter (fraction of box)")
    s.add_argument("--false-positives", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prior)

    s = sub.add_parser("estimate", help="run the pose filter for each class in the prior")
    s.add_argument("--bundle")
    s.add_argument("--prior")
    s.add_argument("--classes", help="comma-separated subset (default: all prior classes)")
    s.add_argument("--replay", help="re-run from a manifest or an earlier estimate.json")
    s.add_argument("--trace-plot", help="write a weight-trace figure to this path")
    s.add_argument("--out", required=True)
    add_filter_args(s)
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("eval", help="ADD/ADD-S errors, accuracy curve and AUC")
    s.add_argument("--bundle", required=True)
    s.add_argument("--estimate", required=True)
    s.add_argument("--t-max", type=float, default=0.04)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="run a setting x corruption x seed grid")
    s.add_argument("--settings", default="base", help="comma-separated scene settings")
    s.add_argument("--corruption", action="append",
                   help="preset or preset:key=value;... (repeatable)")
    s.add_argument("--seeds", type=_seeds, default=[0], help="seed list or range, e.g. 0-19 or 1,4,9")
    s.add_argument("--objects", type=int, default=1, help="objects per scene")
    s.add_argument("--classes", help="fixed comma-separated classes for every scene")
    s.add_argument("--no-table", action="store_true")
    s.add_argument("--out", required=True)
    add_filter_args(s)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BundleError, PriorError, LikelihoodError, GeometryError, InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:
        logger.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
