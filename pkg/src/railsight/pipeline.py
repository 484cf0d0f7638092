"""Per-frame orchestration and cross-frame asset aggregation."""

from __future__ import annotations

import json
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

from railsight import roi_select as rs
from railsight.imaging import FilterParams, ImageBuffer, detect_edges, normalize_contrast, read_image, to_grayscale
from railsight.roi_select import NoTrackLayout, Roi, RoiParams, RoiStrategy
from railsight.signal_detect import (
    BBox,
    BlobDetector,
    ColorMaskParams,
    DetectorError,
    OracleDetector,
    SignalDetection,
    detect_candidates,
    filter_colorless,
)
from railsight.track_detect import (
    BandSpec,
    ClassifierError,
    ConstantClassifier,
    HeuristicClassifier,
    OracleClassifier,
    TrackLayout,
    TrackParams,
    classify_snippet,
    consolidate_tracks,
    crop_snippet,
    hough_lines,
    layout_from_snippets,
    snippet_proposals,
)

log = logging.getLogger(__name__)

OK = "Ok"
NO_TRACK = "NoTrack"
UNCLASSIFIABLE = "Unclassifiable"
DETECTOR_ERROR = "DetectorError"
STATUSES = (OK, NO_TRACK, UNCLASSIFIABLE, DETECTOR_ERROR)

ROI_STRATEGIES = {"track-specific": rs.TRACK_SPECIFIC, "fixed": rs.FIXED, "left-then-right": rs.LEFT_THEN_RIGHT}

FRAME_RE = re.compile(r"^frame_(\d+)\.ppm$")


@dataclass(frozen=True)
class PipelineConfig:
    """Flat configuration; every field can be set from a ``key = value`` file."""

    tss_version: str = "TSS3"
    interior_top_frac: float = 0.75
    edge_top_frac: float = 0.625
    selective_edge_band: bool = True
    normalize_brightness: bool = True
    track_strategy: str = "snippet"
    classifier: str = "heuristic"
    detector: str = "blob"
    truth_path: str = ""
    roi_strategy: str = "track-specific"
    fixed_rect: str = "0,0,1,0.75"
    fallback_fixed_on_notrack: bool = False
    snippet_width_frac: float = 0.25
    stride_frac: float = 0.125
    decision_threshold: float = 0.5
    classifier_gauge_min_frac: float = 0.10
    classifier_gauge_max_frac: float = 0.20
    log_sigma: float = 1.4
    canny_low: float = 50.0
    canny_high: float = 150.0
    use_log_prefilter: bool = True
    rho_res: float = 1.0
    theta_res_deg: float = 1.0
    vote_frac: float = 0.3
    min_votes: int = 12
    max_rail_angle_deg: float = 60.0
    gauge_min_frac: float = 0.12
    gauge_max_frac: float = 0.60
    main_track_x_frac: float = 0.5
    roi_top_frac: float = 0.0
    horizon_frac: float = 0.75
    min_roi_width: int = 32
    min_saturation: float = 0.4
    min_value: float = 0.3
    min_colored_frac: float = 0.05
    min_blob_area: int = 9
    min_confirm_frames: int = 3
    link_radius: float = 40.0
    gap_frames: int = 5

    def __post_init__(self):
        if not 0 <= self.edge_top_frac <= self.interior_top_frac < 1:
            raise ValueError("need 0 <= edge_top_frac <= interior_top_frac < 1")
        if self.track_strategy not in ("snippet", "edge"):
            raise ValueError(f"unknown track_strategy {self.track_strategy!r}")
        if self.classifier not in ("heuristic", "oracle", "constant"):
            raise ValueError(f"unknown classifier {self.classifier!r}")
        if self.detector not in ("blob", "oracle"):
            raise ValueError(f"unknown detector {self.detector!r}")
        if self.roi_strategy not in ROI_STRATEGIES:
            raise ValueError(f"unknown roi_strategy {self.roi_strategy!r}")
        if (self.classifier == "oracle" or self.detector == "oracle") and not self.truth_path:
            raise ValueError("oracle classifier/detector needs truth_path")
        if self.min_confirm_frames < 1 or self.link_radius <= 0 or self.gap_frames < 0:
            raise ValueError("invalid aggregation parameters")
        FilterParams(self.log_sigma, self.canny_low, self.canny_high)

    # -- derived parameter blocks --

    @property
    def band(self) -> BandSpec:
        edge = self.edge_top_frac if self.selective_edge_band else self.interior_top_frac
        return BandSpec(self.interior_top_frac, edge)

    @property
    def filters(self) -> FilterParams:
        return FilterParams(self.log_sigma, self.canny_low, self.canny_high, self.use_log_prefilter)

    @property
    def track_params(self) -> TrackParams:
        return TrackParams(
            rho_res=self.rho_res,
            theta_res=math.radians(self.theta_res_deg),
            vote_frac=self.vote_frac,
            max_rail_angle=math.radians(self.max_rail_angle_deg),
            gauge_min_frac=self.gauge_min_frac,
            gauge_max_frac=self.gauge_max_frac,
            main_track_x_frac=self.main_track_x_frac,
            min_votes=self.min_votes,
        )

    @property
    def roi_params(self) -> RoiParams:
        return RoiParams(self.roi_top_frac, self.horizon_frac, self.min_roi_width)

    @property
    def color_params(self) -> ColorMaskParams:
        return ColorMaskParams(
            min_saturation=self.min_saturation, min_value=self.min_value, min_colored_frac=self.min_colored_frac
        )

    @property
    def strategy(self) -> RoiStrategy:
        kind = ROI_STRATEGIES[self.roi_strategy]
        rect = None
        if kind == rs.FIXED:
            rect = tuple(float(v) for v in self.fixed_rect.split(","))
        return RoiStrategy(kind, rect)

    def to_json(self) -> dict:
        return asdict(self)


TSS_PRESETS = {
    "TSS1": dict(interior_top_frac=0.75, edge_top_frac=0.75, selective_edge_band=False, normalize_brightness=False),
    "TSS2": dict(interior_top_frac=0.625, edge_top_frac=0.625, selective_edge_band=False, normalize_brightness=False),
    "TSS3": dict(interior_top_frac=0.75, edge_top_frac=0.625, selective_edge_band=True, normalize_brightness=True),
}


def normalize_version(version: str | int) -> str:
    v = str(version).upper().replace("_", "")
    if not v.startswith("TSS"):
        v = "TSS" + v
    if v not in TSS_PRESETS:
        raise ValueError(f"unknown TSS version {version!r}")
    return v


def preset(version: str | int = "TSS3", **overrides) -> PipelineConfig:
    v = normalize_version(version)
    return PipelineConfig(tss_version=v, **{**TSS_PRESETS[v], **overrides})


def _coerce(value: str, typ):
    if typ in (bool, "bool"):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, str]) -> PipelineConfig:
    types = {f.name: f.type for f in fields(PipelineConfig)}
    changes = {}
    for key, raw in overrides.items():
        if key not in types:
            raise ValueError(f"unknown config key {key!r}")
        changes[key] = raw if not isinstance(raw, str) else _coerce(raw, types[key])
    if "tss_version" in changes:
        changes["tss_version"] = normalize_version(changes["tss_version"])
    return replace(cfg, **changes)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


# -- per-frame processing ---------------------------------------------------


@dataclass(frozen=True)
class FrameResult:
    frame_id: int
    status: str
    layout: dict
    rois: tuple[Roi, ...] = ()
    detections: tuple[SignalDetection, ...] = ()
    scene_id: str | None = None
    track_source: str = ""

    def __post_init__(self):
        if self.status != OK and self.detections:
            raise ValueError("only Ok frames carry detections")

    @property
    def roi_rule(self) -> str | None:
        return self.rois[0].origin_rule if self.rois else None

    def to_json(self) -> dict:
        d = {}
        if self.scene_id is not None:
            d["scene_id"] = self.scene_id
        d["frame_id"] = self.frame_id
        d["status"] = self.status
        d["roi"] = self.rois[0].as_list() if self.rois else None
        d["roi_rule"] = self.roi_rule
        d["detections"] = [det.to_json() for det in self.detections]
        d["rois"] = [r.as_list() for r in self.rois]
        d["layout"] = self.layout
        d["track_source"] = self.track_source
        return d

    @classmethod
    def from_json(cls, d: dict) -> "FrameResult":
        rule = d.get("roi_rule")
        rois = tuple(Roi(x0, x1, y0, y1, rule) for x0, y0, x1, y1 in d.get("rois") or ([d["roi"]] if d.get("roi") else []))
        dets = tuple(
            SignalDetection(BBox(*det["bbox"]), det["color"], det["score"], d["frame_id"], rule)
            for det in d.get("detections", [])
        )
        return cls(d["frame_id"], d["status"], d.get("layout", {}), rois, dets, d.get("scene_id"), d.get("track_source", ""))


_RESOURCE_CACHE: dict = {}


def _cached(kind: str, path: str):
    key = (kind, path)
    if key not in _RESOURCE_CACHE:
        _RESOURCE_CACHE[key] = OracleClassifier.from_file(path) if kind == "classifier" else OracleDetector.from_file(path)
    return _RESOURCE_CACHE[key]


def build_classifier(cfg: PipelineConfig):
    if cfg.classifier == "oracle":
        return _cached("classifier", cfg.truth_path)
    if cfg.classifier == "constant":
        return ConstantClassifier(0.0)
    return HeuristicClassifier(cfg.track_params, cfg.filters, cfg.classifier_gauge_min_frac, cfg.classifier_gauge_max_frac)


def build_detector(cfg: PipelineConfig):
    if cfg.detector == "oracle":
        return _cached("detector", cfg.truth_path)
    return BlobDetector(cfg.color_params, cfg.min_blob_area)


def detect_layout(frame: ImageBuffer, cfg: PipelineConfig, frame_key=None) -> tuple[TrackLayout, str, bool]:
    """Track layout for one frame: (layout, source, classifier_failed)."""
    gray = to_grayscale(frame)
    if cfg.normalize_brightness:
        gray = normalize_contrast(gray)
    tp = cfg.track_params
    edges = detect_edges(gray, cfg.filters)
    lines = hough_lines(edges, tp.rho_res, tp.theta_res, tp.vote_frac, tp.min_votes)
    edge_layout = consolidate_tracks(lines, frame.dims, params=tp)
    if cfg.track_strategy == "edge":
        return edge_layout, "edge", False
    classifier = build_classifier(cfg)
    width = frame.width
    rects = snippet_proposals(
        frame.dims,
        cfg.band,
        max(1, int(round(cfg.snippet_width_frac * width))),
        max(1, int(round(cfg.stride_frac * width))),
    )
    verdicts = []
    try:
        for rect in rects:
            snippet = crop_snippet(gray, rect, edges, frame_key)
            verdicts.append((rect, classify_snippet(snippet, classifier, cfg.decision_threshold)))
    except ClassifierError as exc:
        log.debug("classifier failed on %s: %s", frame_key, exc)
        return edge_layout, "edge_fallback", True
    return layout_from_snippets(verdicts, edge_layout, frame.dims, cfg.main_track_x_frac), "snippet", False


def _detect_in(frame, rois, cfg, detector, frame_id, frame_key):
    dets = []
    for roi in rois:
        cands = detect_candidates(frame, roi, detector, frame_key)
        dets.extend(filter_colorless(cands, frame, cfg.color_params, frame_id, roi.origin_rule))
    return dets


def process_frame(
    frame: ImageBuffer, cfg: PipelineConfig, frame_id: int = 0, frame_key=None, scene_id: str | None = None
) -> FrameResult:
    """Track detection, region selection, candidate detection and colour filtering for one frame."""
    dims = frame.dims
    layout = TrackLayout()
    source = ""
    strategy = cfg.strategy
    detector = build_detector(cfg)
    if strategy.kind == rs.TRACK_SPECIFIC:
        layout, source, failed = detect_layout(frame, cfg, frame_key)
        try:
            rois = select_rois_or_fallback(layout, dims, cfg)
        except NoTrackLayout:
            status = UNCLASSIFIABLE if failed else NO_TRACK
            return FrameResult(frame_id, status, layout.summary(), (), (), scene_id, source)
    elif strategy.kind == rs.FIXED:
        rois = [rs.baseline_fixed_roi(dims, strategy)]
    else:
        rois = [rs.baseline_left_then_right(dims, False, cfg.roi_params)]
    try:
        dets = _detect_in(frame, rois, cfg, detector, frame_id, frame_key)
        if strategy.kind == rs.LEFT_THEN_RIGHT and not dets:
            rois = [rs.baseline_left_then_right(dims, True, cfg.roi_params)]
            dets = _detect_in(frame, rois, cfg, detector, frame_id, frame_key)
    except DetectorError as exc:
        log.debug("detector failed on frame %s: %s", frame_id, exc)
        return FrameResult(frame_id, DETECTOR_ERROR, layout.summary(), tuple(rois), (), scene_id, source)
    return FrameResult(frame_id, OK, layout.summary(), tuple(rois), tuple(dets), scene_id, source)


def select_rois_or_fallback(layout: TrackLayout, dims, cfg: PipelineConfig) -> list[Roi]:
    if not layout.tracks and cfg.fallback_fixed_on_notrack:
        return [rs.baseline_fixed_roi(dims, RoiStrategy(rs.FIXED, tuple(float(v) for v in cfg.fixed_rect.split(","))))]
    return rs.select_roi(layout, dims, cfg.roi_params)


# -- aggregation ------------------------------------------------------------


@dataclass(frozen=True)
class AssetRecord:
    asset_id: int
    color: str
    first_frame: int
    last_frame: int
    bbox: BBox
    frame_count: int
    centers: tuple[tuple[int, float, float], ...] = ()
    scene_id: str | None = None

    def to_json(self) -> dict:
        d = {}
        if self.scene_id is not None:
            d["scene_id"] = self.scene_id
        d.update(
            asset_id=self.asset_id,
            color=self.color,
            first_frame=self.first_frame,
            last_frame=self.last_frame,
            bbox=self.bbox.as_list(),
            frame_count=self.frame_count,
            centers=[[f, round(x, 3), round(y, 3)] for f, x, y in self.centers],
        )
        return d

    @classmethod
    def from_json(cls, d: dict) -> "AssetRecord":
        return cls(
            d["asset_id"],
            d["color"],
            d["first_frame"],
            d["last_frame"],
            BBox(*d["bbox"]),
            d["frame_count"],
            tuple((int(f), float(x), float(y)) for f, x, y in d.get("centers", [])),
            d.get("scene_id"),
        )


def aggregate_assets(
    results: Sequence[FrameResult], min_confirm_frames: int = 3, link_radius: float = 40.0, gap_frames: int = 5
) -> list[AssetRecord]:
    """Chain same-colour detections whose centres stay within ``link_radius``.

    A chain survives up to ``gap_frames`` frames without a detection and
    becomes an asset once it has ``min_confirm_frames`` detections.
    """
    chains: list[dict] = []
    open_chains: list[dict] = []
    scene_id = results[0].scene_id if results else None
    for res in results:
        if res.status != OK:
            continue
        f = res.frame_id
        open_chains = [c for c in open_chains if f - c["last"] - 1 <= gap_frames]
        dets = sorted(res.detections, key=lambda d: (d.bbox.x, d.bbox.y, d.color))
        pairs = []
        for i, det in enumerate(dets):
            cx, cy = det.bbox.center
            for j, ch in enumerate(open_chains):
                if ch["color"] != det.color or ch["last"] == f:
                    continue
                d = math.hypot(cx - ch["cx"], cy - ch["cy"])
                if d <= link_radius:
                    pairs.append((d, i, j))
        pairs.sort()
        used_d, used_c = set(), set()
        assigned = {}
        for d, i, j in pairs:
            if i in used_d or j in used_c:
                continue
            used_d.add(i)
            used_c.add(j)
            assigned[i] = j
        for i, det in enumerate(dets):
            cx, cy = det.bbox.center
            if i in assigned:
                ch = open_chains[assigned[i]]
            else:
                ch = {"color": det.color, "members": []}
                chains.append(ch)
                open_chains.append(ch)
            ch["members"].append((f, det))
            ch["last"], ch["cx"], ch["cy"] = f, cx, cy
    assets = []
    confirmed = [c for c in chains if len(c["members"]) >= min_confirm_frames]
    confirmed.sort(key=lambda c: (c["members"][0][0], c["members"][0][1].bbox.x, c["members"][0][1].bbox.y))
    for n, ch in enumerate(confirmed):
        members = ch["members"]
        rep = members[len(members) // 2][1]
        centers = tuple((f, *det.bbox.center) for f, det in members)
        assets.append(
            AssetRecord(n, ch["color"], members[0][0], members[-1][0], rep.bbox, len(members), centers, scene_id)
        )
    return assets


# -- runs -------------------------------------------------------------------


class FrameReadError(RuntimeError):
    pass


@dataclass(frozen=True)
class FrameJob:
    path: str
    frame_id: int
    scene_id: str | None


def list_frames(directory: str | Path) -> list[tuple[int, Path]]:
    d = Path(directory)
    out = []
    for p in sorted(d.iterdir()):
        m = FRAME_RE.match(p.name)
        if m:
            out.append((int(m.group(1)), p))
    return out


def frame_jobs(source: str | Path) -> list[FrameJob]:
    """Jobs for a scene directory, or for every scene of a corpus (manifest.json present)."""
    src = Path(source)
    if not src.is_dir():
        raise FileNotFoundError(f"frames directory not found: {src}")
    manifest = src / "manifest.json"
    if manifest.exists():
        scenes = json.loads(manifest.read_text(encoding="utf-8"))["scenes"]
        return [
            FrameJob(str(p), fid, s["scene_id"]) for s in scenes for fid, p in list_frames(src / s["scene_id"])
        ]
    return [FrameJob(str(p), fid, None) for fid, p in list_frames(src)]


def _run_job(args: tuple[FrameJob, PipelineConfig]) -> FrameResult:
    job, cfg = args
    try:
        frame = read_image(job.path)
    except (OSError, ValueError) as exc:
        raise FrameReadError(f"cannot read frame {job.path}: {exc}") from exc
    key = (job.scene_id or "", job.frame_id)
    return process_frame(frame, cfg, job.frame_id, key, job.scene_id)


def process_jobs(jobs: Sequence[FrameJob], cfg: PipelineConfig, workers: int = 1) -> list[FrameResult]:
    args = [(job, cfg) for job in jobs]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, args, chunksize=max(1, len(args) // (4 * workers))))


def group_by_scene(results: Iterable[FrameResult]) -> dict[str | None, list[FrameResult]]:
    groups: dict = {}
    for r in results:
        groups.setdefault(r.scene_id, []).append(r)
    return groups


def run(source: str | Path, cfg: PipelineConfig, workers: int = 1):
    """Process every frame under ``source``; returns (results, assets, summary)."""
    jobs = frame_jobs(source)
    results = process_jobs(jobs, cfg, workers)
    assets = []
    for _, group in group_by_scene(results).items():
        group.sort(key=lambda r: r.frame_id)
        assets.extend(aggregate_assets(group, cfg.min_confirm_frames, cfg.link_radius, cfg.gap_frames))
    counts = {s: 0 for s in STATUSES}
    for r in results:
        counts[r.status] += 1
    summary = {
        "frames": len(results),
        "scenes": len({r.scene_id for r in results if r.scene_id is not None}),
        "status_counts": counts,
        "detections": sum(len(r.detections) for r in results),
        "assets": len(assets),
        "config": cfg.to_json(),
    }
    return results, assets, summary


def write_outputs(out_dir: str | Path, results, assets, summary) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.jsonl", "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")) + "\n")
    (out / "assets.json").write_text(json.dumps([a.to_json() for a in assets], indent=1) + "\n", encoding="utf-8")
    (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n", encoding="utf-8")


def load_results(path: str | Path) -> list[FrameResult]:
    with open(path, encoding="utf-8") as fh:
        return [FrameResult.from_json(json.loads(line)) for line in fh if line.strip()]


def load_assets(path: str | Path) -> list[AssetRecord]:
    return [AssetRecord.from_json(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]
