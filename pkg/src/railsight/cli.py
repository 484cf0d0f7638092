"""Command line entry point: gen, detect, eval, annotate, compare."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from railsight import evaluate as ev
from railsight import pipeline as pl
from railsight.imaging import draw_rect, read_image, write_image
from railsight.synth_gen import TAGS, CorpusSpec, InvalidPlacement, generate_corpus

log = logging.getLogger("railsight")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE = 0, 1, 2

ROI_COLOR = (0, 255, 255)
BOX_COLORS = {"Red": (255, 0, 0), "Green": (0, 255, 0)}


class UsageError(Exception):
    pass


def _key_values(items: list[str], what: str) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"{what} expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


# -- gen --------------------------------------------------------------------


def cmd_gen(args) -> int:
    quotas = {k: int(v) for k, v in _key_values(args.quota, "--quota").items()}
    cs = CorpusSpec(
        count=args.count,
        seed=args.seed,
        quotas=quotas,
        width=args.width,
        height=args.height,
        frame_count=args.frames,
        unlit_frac=args.unlit_frac,
    )
    print(generate_corpus(cs, args.out))
    return EXIT_OK


# -- detect -----------------------------------------------------------------


def load_config(args) -> pl.PipelineConfig:
    """Preset, then config file keys, then command line flags."""
    file_keys: dict[str, str] = {}
    path = args.config or os.environ.get("RAILSIGHT_CONFIG")
    if path:
        try:
            file_keys = pl.parse_config_text(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    version = args.tss_version or file_keys.get("tss_version", "TSS3")
    cfg = pl.preset(version)
    file_keys.pop("tss_version", None)
    flags = {}
    for key, attr in (
        ("roi_strategy", "roi_strategy"),
        ("track_strategy", "track_strategy"),
        ("classifier", "classifier"),
        ("detector", "detector"),
        ("truth_path", "truth"),
    ):
        value = getattr(args, attr)
        if value is not None:
            flags[key] = value
    flags.update(_key_values(args.set, "--set"))
    flags.pop("tss_version", None)
    return pl.apply_overrides(cfg, {**file_keys, **flags})


def cmd_detect(args) -> int:
    frames = Path(args.frames)
    if not frames.is_dir():
        raise UsageError(f"frames directory not found: {frames}")
    cfg = load_config(args)
    results, assets, summary = pl.run(frames, cfg, args.workers)
    pl.write_outputs(args.out, results, assets, summary)
    counts = summary["status_counts"]
    print(f"{summary['frames']} frames, {summary['assets']} assets, " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return EXIT_OK


# -- eval / compare ---------------------------------------------------------


def _truth_file(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "truth.jsonl"
    if not p.is_file():
        raise UsageError(f"ground truth not found: {p}")
    return p


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    for name in ("results.jsonl", "assets.json"):
        if not (run_dir / name).is_file():
            raise UsageError(f"missing {name} in {run_dir}")
    truth_path = _truth_file(args.truth)
    truth = ev.load_truth(truth_path)
    results = pl.load_results(run_dir / "results.jsonl")
    assets = pl.load_assets(run_dir / "assets.json")
    keys = {(r["scene_id"], int(r["frame_id"])) for r in truth}
    stray = [r for r in results if (r.scene_id, r.frame_id) not in keys and r.scene_id is not None]
    if stray:
        raise UsageError(f"run and ground truth describe different corpora (e.g. {stray[0].scene_id})")
    label = args.label
    if label is None:
        summary = run_dir / "summary.json"
        label = json.loads(summary.read_text())["config"]["tss_version"] if summary.is_file() else run_dir.name
    report = ev.evaluate(
        results, assets, truth, args.frame_tol, args.center_tol, ev.corpus_fingerprint(truth_path), label
    )
    out = Path(args.out or run_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_json())
    text = ev.format_report(report)
    (out / "report.txt").write_text(text, encoding="utf-8")
    if not args.no_plot:
        from railsight.plotting import plot_report

        plot_report(report, out / "report.png")
    print(text, end="")
    return EXIT_OK


def cmd_compare(args) -> int:
    reports = {}
    for item in args.reports:
        label, _, path = item.rpartition("=")
        p = Path(path)
        if p.is_dir():
            p = p / "report.json"
        if not p.is_file():
            raise UsageError(f"report not found: {p}")
        rep = ev.EvalReport.from_json(json.loads(p.read_text(encoding="utf-8")))
        name = label or rep.label or p.parent.name
        if name in reports:
            raise UsageError(f"duplicate report label {name!r}")
        reports[name] = rep
    table = ev.compare_versions(reports)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "comparison.json", table)
    text = ev.format_comparison(table)
    (out / "comparison.txt").write_text(text, encoding="utf-8")
    if not args.no_plot:
        from railsight.plotting import plot_comparison

        plot_comparison(reports, out / "comparison.png")
    print(text, end="")
    return EXIT_OK


# -- annotate ---------------------------------------------------------------


def annotate_frame(frame, result: pl.FrameResult):
    img = frame
    for roi in result.rois:
        img = draw_rect(img, roi.x0, roi.y0, roi.x1, roi.y1, ROI_COLOR)
    for det in result.detections:
        b = det.bbox
        img = draw_rect(img, b.x - 1, b.y - 1, b.x + b.w + 1, b.y + b.h + 1, BOX_COLORS[det.color])
    return img


def cmd_annotate(args) -> int:
    frames = Path(args.frames)
    if not frames.is_dir():
        raise UsageError(f"frames directory not found: {frames}")
    results_path = Path(args.run) / "results.jsonl"
    if not results_path.is_file():
        raise UsageError(f"missing {results_path}")
    by_key = {(r.scene_id, r.frame_id): r for r in pl.load_results(results_path)}
    out = Path(args.out)
    n = 0
    for job in pl.frame_jobs(frames):
        res = by_key.get((job.scene_id, job.frame_id))
        if res is None:
            raise UsageError(f"no result for {job.path}")
        target = out / job.scene_id / Path(job.path).name if job.scene_id else out / Path(job.path).name
        target.parent.mkdir(parents=True, exist_ok=True)
        write_image(target, annotate_frame(read_image(job.path), res))
        n += 1
    print(f"{n} frames annotated in {out}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="railsight", description="Track-aware railway signal detection.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--count", type=int, required=True, help="number of scenes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output corpus directory")
    g.add_argument("--frames", type=int, default=4, help="frames per scene")
    g.add_argument("--width", type=int, default=320)
    g.add_argument("--height", type=int, default=288)
    g.add_argument("--unlit-frac", type=float, default=0.0, help="fraction of signal heads left unlit")
    g.add_argument(
        "--quota", action="append", metavar="TAG=N", help=f"scenes carrying a confuser tag; tags: {', '.join(TAGS)}"
    )
    g.set_defaults(func=cmd_gen)

    d = sub.add_parser("detect", help="run the detection pipeline over frames")
    d.add_argument("--frames", required=True, help="scene directory or corpus root with manifest.json")
    d.add_argument("--out", required=True, help="directory for results.jsonl, assets.json, summary.json")
    d.add_argument("--config", help="flat key = value config file (default: $RAILSIGHT_CONFIG)")
    d.add_argument("--tss-version", choices=["1", "2", "3", "TSS1", "TSS2", "TSS3"], help="pipeline preset")
    d.add_argument("--roi-strategy", choices=sorted(pl.ROI_STRATEGIES), help="signal search region strategy")
    d.add_argument("--track-strategy", choices=["snippet", "edge"])
    d.add_argument("--classifier", choices=["heuristic", "oracle", "constant"], help="snippet classifier")
    d.add_argument("--detector", choices=["blob", "oracle"], help="signal candidate detector")
    d.add_argument("--truth", help="truth.jsonl for the oracle classifier or detector")
    d.add_argument("--workers", type=int, default=1, help="frame-level worker processes")
    d.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="score a detection run against ground truth")
    e.add_argument("--run", required=True, help="directory holding results.jsonl and assets.json")
    e.add_argument("--truth", required=True, help="corpus directory or truth.jsonl")
    e.add_argument("--out", help="report directory (default: the run directory)")
    e.add_argument("--label", help="column label used by compare")
    e.add_argument("--frame-tol", type=int, default=2)
    e.add_argument("--center-tol", type=float, default=20.0)
    e.add_argument("--no-plot", action="store_true", help="skip report.png")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("annotate", help="burn regions and detections into frames")
    a.add_argument("--frames", required=True)
    a.add_argument("--run", required=True, help="directory holding results.jsonl")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_annotate)

    c = sub.add_parser("compare", help="side-by-side table of several reports")
    c.add_argument("reports", nargs="+", metavar="[LABEL=]REPORT", help="report.json files or their directories")
    c.add_argument("--out", required=True)
    c.add_argument("--no-plot", action="store_true", help="skip comparison.png")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError, InvalidPlacement, pl.FrameReadError) as exc:
        print(f"railsight {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything else is a bug
        log.exception("internal error")
        print(f"railsight {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
