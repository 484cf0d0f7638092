"""Asset-level scoring against generated ground truth, and version comparison tables."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from railsight.pipeline import OK, AssetRecord, FrameResult
from railsight.roi_select import rule_for
from railsight.synth_gen import TAGS

TAG_LABELS = {
    "side_obstruction": "Side obstruction",
    "curvy": "Curvy track",
    "station": "Station",
    "double_rail": "Double rail",
    "far_track": "Side track is far",
    "surface_confusion": "Surface confusion",
    "low_visibility": "Low visibility",
}


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fn: int = 0
    fp: int = 0

    def __post_init__(self):
        if min(self.tp, self.fn, self.fp) < 0:
            raise ValueError("counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fn + other.fn, self.fp + other.fp)

    def to_json(self) -> dict:
        # true negatives are undefined for asset detection and left out
        return {"tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": None}


def accuracy(detected: int, total: int) -> float:
    if total <= 0:
        raise EvaluationError("accuracy needs a positive total")
    if not 0 <= detected <= total:
        raise EvaluationError("detected must lie in [0, total]")
    return detected / total


def precision(tp: int, fp: int) -> float:
    if tp < 0 or fp < 0:
        raise EvaluationError("counts must be non-negative")
    if tp + fp == 0:
        raise EvaluationError("precision undefined without predictions")
    return tp / (tp + fp)


def percent(frac: float) -> float:
    """Percentage truncated to one decimal, the way the reference tables print it."""
    # epsilon stops 0.85 * 1000 = 849.999... from losing a tenth
    return math.floor(frac * 1000 + 1e-9) / 10


@dataclass(frozen=True)
class TruthAsset:
    scene_id: str
    signal_id: int
    color: str
    frames: tuple[int, ...]
    centers: tuple[tuple[float, float], ...]
    tags: tuple[str, ...] = ()

    @property
    def first_frame(self) -> int:
        return self.frames[0]

    @property
    def last_frame(self) -> int:
        return self.frames[-1]


def load_truth(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def truth_assets(records: Iterable[dict]) -> list[TruthAsset]:
    """Lit signals that belong to the main track, one asset per (scene, signal_id)."""
    acc: dict = {}
    tags: dict = {}
    for rec in records:
        sid = rec["scene_id"]
        tags[sid] = tuple(rec.get("tags", ()))
        for s in rec["signals"]:
            if not s["lit"] or s["track_index"] != rec["main_index"]:
                continue
            x, y, w, h = s["bbox"]
            entry = acc.setdefault((sid, s["signal_id"]), {"color": s["color"], "frames": [], "centers": []})
            entry["frames"].append(int(rec["frame_id"]))
            entry["centers"].append((x + w / 2.0, y + h / 2.0))
    out = []
    for (sid, sig), e in sorted(acc.items()):
        order = sorted(range(len(e["frames"])), key=e["frames"].__getitem__)
        out.append(
            TruthAsset(
                sid,
                sig,
                e["color"],
                tuple(e["frames"][i] for i in order),
                tuple(e["centers"][i] for i in order),
                tags[sid],
            )
        )
    return out


def _frame_overlap(pred: AssetRecord, truth: TruthAsset, frame_tol: int) -> int:
    lo = max(pred.first_frame, truth.first_frame - frame_tol)
    hi = min(pred.last_frame, truth.last_frame + frame_tol)
    return max(0, hi - lo + 1)


def _center_distance(pred: AssetRecord, truth: TruthAsset) -> float:
    px, py = pred.bbox.center
    best = math.inf
    for (tx, ty) in truth.centers:
        best = min(best, math.hypot(px - tx, py - ty))
    return best


@dataclass(frozen=True)
class MatchResult:
    counts: ConfusionCounts
    pairs: tuple[tuple[int, int], ...]
    missed: tuple[int, ...]
    spurious: tuple[int, ...]


def match_assets(
    predicted: Sequence[AssetRecord], truth: Sequence[TruthAsset], frame_tol: int = 2, center_tol: float = 20.0
) -> MatchResult:
    """Greedy one-to-one matching: most frame overlap first, then nearest centre.

    Returned indices refer to the input sequences. A matched pair with
    different colours counts as one miss and one false detection.
    """
    if frame_tol <= 0 or center_tol <= 0:
        raise EvaluationError("tolerances must be positive")
    cands = []
    for i, p in enumerate(predicted):
        for j, t in enumerate(truth):
            if p.scene_id != t.scene_id:
                continue
            ov = _frame_overlap(p, t, frame_tol)
            if ov <= 0:
                continue
            d = _center_distance(p, t)
            if d <= center_tol:
                cands.append((-ov, d, p.scene_id or "", p.first_frame, t.signal_id, i, j))
    cands.sort()
    used_p, used_t = set(), set()
    pairs = []
    for *_, i, j in cands:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        pairs.append((i, j))
    tp = sum(1 for i, j in pairs if predicted[i].color == truth[j].color)
    wrong_color = [(i, j) for i, j in pairs if predicted[i].color != truth[j].color]
    missed = sorted({j for j in range(len(truth)) if j not in used_t} | {j for _, j in wrong_color})
    spurious = sorted({i for i in range(len(predicted)) if i not in used_p} | {i for i, _ in wrong_color})
    counts = ConfusionCounts(tp, len(missed), len(spurious))
    return MatchResult(counts, tuple(sorted(pairs)), tuple(missed), tuple(spurious))


def error_breakdown(mismatch_tags: Iterable[Sequence[str]]) -> dict[str, int]:
    """Each missed or false asset counts once for every tag of its scene."""
    out = {t: 0 for t in TAGS}
    for tags in mismatch_tags:
        for t in tags:
            if t not in out:
                raise EvaluationError(f"unknown tag {t!r}")
            out[t] += 1
    return out


def wrong_roi_frames(results: Iterable[FrameResult], truth_records: Iterable[dict]) -> int:
    """Frames whose region rule disagrees with the one implied by the true layout."""
    expected = {}
    for rec in truth_records:
        expected[(rec["scene_id"], int(rec["frame_id"]))] = rule_for(len(rec["tracks"]), rec["main_index"])
    n = 0
    for r in results:
        want = expected.get((r.scene_id, r.frame_id))
        if want is None:
            continue
        if r.status != OK or r.roi_rule != want:
            n += 1
    return n


def corpus_fingerprint(truth_path: str | Path) -> str:
    return hashlib.sha256(Path(truth_path).read_bytes()).hexdigest()


@dataclass
class EvalReport:
    counts: ConfusionCounts
    total_truth: int
    accuracy: float
    precision: float | None
    per_tag: dict[str, int]
    wrong_roi_frames: int
    frames: int
    corpus: str = ""
    label: str = ""
    scenes_with_errors: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "corpus": self.corpus,
            "confusion": self.counts.to_json(),
            "total_truth": self.total_truth,
            "accuracy": round(self.accuracy, 6),
            "precision": None if self.precision is None else round(self.precision, 6),
            "per_tag": {TAG_LABELS[t]: self.per_tag[t] for t in TAGS},
            "wrong_roi_frames": self.wrong_roi_frames,
            "frames": self.frames,
            "scenes_with_errors": self.scenes_with_errors,
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        c = d["confusion"]
        by_label = {v: k for k, v in TAG_LABELS.items()}
        return cls(
            ConfusionCounts(c["tp"], c["fn"], c["fp"]),
            d["total_truth"],
            d["accuracy"],
            d["precision"],
            {by_label[k]: v for k, v in d["per_tag"].items()},
            d["wrong_roi_frames"],
            d["frames"],
            d.get("corpus", ""),
            d.get("label", ""),
            list(d.get("scenes_with_errors", [])),
        )


def evaluate(
    results: Sequence[FrameResult],
    assets: Sequence[AssetRecord],
    truth_records: Sequence[dict],
    frame_tol: int = 2,
    center_tol: float = 20.0,
    corpus: str = "",
    label: str = "",
) -> EvalReport:
    truth = truth_assets(truth_records)
    if not truth:
        raise EvaluationError("ground truth holds no signal assets")
    scene_tags = {rec["scene_id"]: tuple(rec.get("tags", ())) for rec in truth_records}
    m = match_assets(assets, truth, frame_tol, center_tol)
    mism = [truth[j].scene_id for j in m.missed] + [assets[i].scene_id for i in m.spurious]
    per_tag = error_breakdown(scene_tags.get(s, ()) for s in mism)
    c = m.counts
    prec = precision(c.tp, c.fp) if c.tp + c.fp else None
    return EvalReport(
        c,
        len(truth),
        accuracy(c.tp, len(truth)),
        prec,
        per_tag,
        wrong_roi_frames(results, truth_records),
        len(results),
        corpus,
        label,
        sorted({s for s in mism if s is not None}),
    )


def _fmt_pct(v: float | None) -> str:
    return "NA" if v is None else f"{percent(v):.1f}%"


def format_report(report: EvalReport) -> str:
    c = report.counts
    rows = [
        ("Total signals", str(report.total_truth)),
        ("Signals detected", str(c.tp)),
        ("Accuracy", _fmt_pct(report.accuracy)),
        ("Precision", _fmt_pct(report.precision)),
        ("Wrong-ROI frames", str(report.wrong_roi_frames)),
    ]
    lines = [f"{'':<22}{'Predicted +':>14}{'Predicted -':>14}"]
    lines.append(f"{'Actual +':<22}{c.tp:>14}{c.fn:>14}")
    lines.append(f"{'Actual -':<22}{c.fp:>14}{'NA':>14}")
    lines.append("")
    lines += [f"{k:<22}{v:>14}" for k, v in rows]
    lines.append("")
    lines.append(f"{'Error category':<22}{'Count':>14}")
    lines += [f"{TAG_LABELS[t]:<22}{report.per_tag[t]:>14}" for t in TAGS]
    return "\n".join(lines) + "\n"


def compare_versions(reports: Mapping[str, EvalReport]) -> dict:
    """Side-by-side rows for reports scored on the same ground truth."""
    if len(reports) < 2:
        raise EvaluationError("comparison needs at least two reports")
    corpora = {r.corpus for r in reports.values()}
    totals = {r.total_truth for r in reports.values()}
    if len(corpora) > 1 or len(totals) > 1:
        raise EvaluationError("reports were scored on different ground truth")
    names = list(reports)
    rows = [[TAG_LABELS[t], *[reports[n].per_tag[t] for n in names]] for t in TAGS]
    rows.append(["Total errors", *[sum(reports[n].per_tag.values()) for n in names]])
    rows.append(["Total signals", *[reports[n].total_truth for n in names]])
    rows.append(["Signals detected", *[reports[n].counts.tp for n in names]])
    rows.append(["Accuracy", *[_fmt_pct(reports[n].accuracy) for n in names]])
    rows.append(["Precision", *[_fmt_pct(reports[n].precision) for n in names]])
    rows.append(["Wrong-ROI frames", *[reports[n].wrong_roi_frames for n in names]])
    return {"columns": names, "rows": rows, "corpus": corpora.pop()}


def format_comparison(table: dict) -> str:
    cols = table["columns"]
    lines = [f"{'':<22}" + "".join(f"{c:>12}" for c in cols)]
    for label, *vals in table["rows"]:
        lines.append(f"{label:<22}" + "".join(f"{str(v):>12}" for v in vals))
    return "\n".join(lines) + "\n"
