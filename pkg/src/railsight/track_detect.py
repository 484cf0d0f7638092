"""Track detection: Hough lines, rail pairing and snippet-band classification."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from railsight.imaging import EdgeMap, FilterParams, ImageBuffer, detect_edges

EDGE_COLUMN = "EdgeColumn"
INTERIOR = "Interior"


@dataclass(frozen=True)
class HoughLine:
    """Line ``x*cos(theta) + y*sin(theta) = rho`` in top-left pixel coordinates."""

    rho: float
    theta: float
    votes: int
    # accumulator cell, kept so symmetry checks can be exact
    theta_index: int = field(default=-1, compare=False)
    rho_bin: int = field(default=0, compare=False)


@dataclass(frozen=True)
class RailLine:
    line: HoughLine
    bottom_x: float
    # signed; positive means the line moves right as it rises
    angle_from_vertical: float

    def x_at(self, y: float, height: int) -> float:
        return self.bottom_x + (height - 1 - y) * math.tan(self.angle_from_vertical)


@dataclass(frozen=True)
class Track:
    left_rail: RailLine
    right_rail: RailLine

    @property
    def bottom_span(self) -> tuple[float, float]:
        return self.left_rail.bottom_x, self.right_rail.bottom_x

    @property
    def bottom_mid(self) -> float:
        return 0.5 * (self.left_rail.bottom_x + self.right_rail.bottom_x)

    @property
    def gauge(self) -> float:
        return self.right_rail.bottom_x - self.left_rail.bottom_x


@dataclass(frozen=True)
class TrackLayout:
    tracks: tuple[Track, ...] = ()
    main_index: int = 0

    def __len__(self):
        return len(self.tracks)

    @property
    def main(self) -> Track | None:
        return self.tracks[self.main_index] if self.tracks else None

    def summary(self) -> dict:
        return {
            "tracks": [[round(t.bottom_span[0], 3), round(t.bottom_span[1], 3)] for t in self.tracks],
            "main_index": self.main_index if self.tracks else None,
        }


@dataclass(frozen=True)
class BandSpec:
    interior_top_frac: float = 0.75
    edge_top_frac: float = 0.625

    def __post_init__(self):
        if not 0 <= self.edge_top_frac <= self.interior_top_frac < 1:
            raise ValueError("need 0 <= edge_top_frac <= interior_top_frac < 1")


@dataclass(frozen=True)
class SnippetRect:
    x0: int
    y0: int
    x1: int
    y1: int
    column_role: str


@dataclass(frozen=True, eq=False)
class Snippet:
    rect: SnippetRect
    image: ImageBuffer
    # optional crop of the frame edge map; saves recomputing edges per snippet
    edges: EdgeMap | None = None
    frame_dims: tuple[int, int] = (0, 0)
    frame_key: tuple[str, int] | None = None

    @property
    def column_role(self) -> str:
        return self.rect.column_role


@dataclass(frozen=True)
class SnippetVerdict:
    is_track: bool
    score: float


@dataclass(frozen=True)
class TrackParams:
    rho_res: float = 1.0
    theta_res: float = math.radians(1.0)
    vote_frac: float = 0.3
    max_rail_angle: float = math.radians(60.0)
    gauge_min_frac: float = 0.12
    gauge_max_frac: float = 0.60
    main_track_x_frac: float = 0.5
    merge_px: float = 6.0
    merge_angle: float = math.radians(4.0)
    min_votes: int = 12

    def gauge_bounds(self, width: int) -> tuple[float, float]:
        return self.gauge_min_frac * width, self.gauge_max_frac * width


class ClassifierError(RuntimeError):
    """Raised by a snippet classifier that cannot judge a snippet."""


# -- Hough transform --------------------------------------------------------


def theta_table(theta_res: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetric theta bins over [-pi/2, pi/2) with exactly mirrored cos/sin.

    The bin count is forced even so that -theta of every bin except -pi/2
    is itself a bin.
    """
    k = int(round(math.pi / theta_res))
    k += k % 2
    half = k // 2
    step = math.pi / k
    idx = np.arange(k) - half
    thetas = idx * step
    pos = np.arange(half + 1) * step
    cos_pos = np.cos(pos)
    sin_pos = np.sin(pos)
    cos_pos[np.abs(cos_pos) < 1e-12] = 0.0
    sin_pos[np.abs(sin_pos) < 1e-12] = 0.0
    mag = np.abs(idx)
    cos_t = cos_pos[mag]
    sin_t = np.where(idx < 0, -sin_pos[mag], sin_pos[mag])
    return thetas, cos_t, sin_t


def hough_accumulator(bits: np.ndarray, rho_res: float, theta_res: float):
    """Vote accumulator in image-centred rho, shape (n_theta, 2*B+1).

    Rho is measured from the image centre internally so that horizontal
    mirroring maps cell (k, b) onto (n_theta - k, -b) exactly.
    """
    h, w = bits.shape
    thetas, cos_t, sin_t = theta_table(theta_res)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    half_range = int(math.ceil(math.hypot(cx, cy) / rho_res)) + 1
    n_rho = 2 * half_range + 1
    acc = np.zeros((len(thetas), n_rho), dtype=np.int64)
    ys, xs = np.nonzero(bits)
    if len(xs) == 0:
        return acc, thetas, cos_t, sin_t, half_range
    dx = xs.astype(np.float64) - cx
    dy = ys.astype(np.float64) - cy
    rho_c = np.multiply.outer(dx, cos_t)
    rho_c += np.multiply.outer(dy, sin_t)
    if rho_res != 1.0:
        rho_c /= rho_res
    rho_c += np.copysign(0.5, rho_c)
    # round half away from zero (odd-symmetric, unlike banker's rounding)
    flat = rho_c.astype(np.int64)
    flat += half_range + np.arange(len(thetas)) * n_rho
    acc = np.bincount(flat.ravel(), minlength=len(thetas) * n_rho).reshape(len(thetas), n_rho)
    return acc, thetas, cos_t, sin_t, half_range


def _wrap_pad(acc: np.ndarray) -> np.ndarray:
    """Pad by 2 cells: zeros along rho, theta wrap-around with rho negated."""
    k, n = acc.shape
    padded = np.zeros((k + 4, n + 4), dtype=acc.dtype)
    padded[2 : k + 2, 2 : n + 2] = acc
    padded[0:2, 2 : n + 2] = acc[k - 2 : k, ::-1]
    padded[k + 2 : k + 4, 2 : n + 2] = acc[0:2, ::-1]
    return padded


_OFFSETS_5X5 = [(i, j) for i in range(5) for j in range(5) if (i, j) != (2, 2)]


def _plateau_key(shape: tuple[int, int]) -> np.ndarray:
    """Tie-break rank per cell: distance to the nearest axis-aligned theta, then |rho|.

    Mirror-invariant, so plateau resolution keeps the flip symmetry.
    """
    k, n = shape
    idx = np.arange(k)
    kd = np.minimum(np.abs(idx - k // 2), np.minimum(idx, k - idx))
    bd = np.abs(np.arange(n) - n // 2)
    return kd[:, None] * n + bd[None, :]


def _local_peaks(acc: np.ndarray, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Cells at or above ``threshold`` that dominate their 5x5 neighbourhood.

    Equal-vote neighbours are resolved by the plateau key, so a flat ridge
    around a vertical or horizontal line yields the axis-aligned cell.
    """
    ks, bs = np.nonzero(acc >= threshold)
    if len(ks) == 0:
        return ks, bs
    padded = _wrap_pad(acc)
    key = _plateau_key(acc.shape)
    pkey = _wrap_pad(key)
    vals = acc[ks, bs]
    own = key[ks, bs]
    keep = np.ones(len(ks), dtype=bool)
    for i, j in _OFFSETS_5X5:
        nb = padded[ks + i, bs + j]
        keep &= (vals > nb) | ((vals == nb) & (own <= pkey[ks + i, bs + j]))
    return ks[keep], bs[keep]


def hough_lines(
    edges: EdgeMap,
    rho_res: float = 1.0,
    theta_res: float = math.radians(1.0),
    vote_frac: float = 0.3,
    min_votes: int = 1,
) -> list[HoughLine]:
    if not (rho_res > 0 and theta_res > 0 and 0 < vote_frac <= 1):
        raise ValueError("invalid Hough parameters")
    bits = edges.bits
    if not bits.any():
        return []
    acc, thetas, cos_t, sin_t, half_range = hough_accumulator(bits, rho_res, theta_res)
    top = acc.max()
    threshold = max(vote_frac * top, min_votes, 1)
    h, w = bits.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    lines = []
    for k, b in zip(*_local_peaks(acc, threshold)):
        rb = int(b) - half_range
        rho = rb * rho_res + cx * cos_t[k] + cy * sin_t[k]
        lines.append(HoughLine(float(rho), float(thetas[k]), int(acc[k, b]), int(k), rb))
    lines.sort(key=lambda ln: (-ln.votes, ln.theta, ln.rho))
    return lines


def mirror_line(line: HoughLine, width: int, n_theta: int) -> HoughLine:
    """Line parameters of ``line`` after flipping a frame of ``width`` horizontally."""
    c = math.cos(line.theta)
    if line.theta_index == 0:
        return line
    rho = (width - 1) * c - line.rho
    return HoughLine(rho, -line.theta, line.votes, n_theta - line.theta_index, -line.rho_bin)


# -- rail pairing -----------------------------------------------------------


def to_rail_line(line: HoughLine, height: int, max_rail_angle: float) -> RailLine | None:
    if abs(line.theta) > max_rail_angle:
        return None
    c = math.cos(line.theta)
    if c <= 1e-9:
        return None
    bottom_x = (line.rho - (height - 1) * math.sin(line.theta)) / c
    return RailLine(line, bottom_x, line.theta)


def merge_rail_lines(rails: Sequence[RailLine], merge_px: float, merge_angle: float) -> list[RailLine]:
    """Collapse near-duplicate lines (both flanks of one rail) into one."""
    rails = sorted(rails, key=lambda r: (r.bottom_x, r.angle_from_vertical))
    clusters: list[list[RailLine]] = []
    for rail in rails:
        if clusters:
            ref = clusters[-1][-1]
            if (
                rail.bottom_x - ref.bottom_x <= merge_px
                and abs(rail.angle_from_vertical - ref.angle_from_vertical) <= merge_angle
            ):
                clusters[-1].append(rail)
                continue
        clusters.append([rail])
    merged = []
    for group in clusters:
        votes = np.array([r.line.votes for r in group], dtype=np.float64)
        bx = float(np.dot(votes, [r.bottom_x for r in group]) / votes.sum())
        ang = float(np.dot(votes, [r.angle_from_vertical for r in group]) / votes.sum())
        best = max(group, key=lambda r: (r.line.votes, -abs(r.bottom_x - bx)))
        merged.append(RailLine(best.line, bx, ang))
    return merged


def converges_upward(left: RailLine, right: RailLine) -> bool:
    return math.tan(left.angle_from_vertical) > math.tan(right.angle_from_vertical)


def pick_main_index(tracks: Sequence[Track], width: int, main_track_x_frac: float = 0.5) -> int:
    center = main_track_x_frac * width
    best = 0
    for i, t in enumerate(tracks):
        if abs(t.bottom_mid - center) < abs(tracks[best].bottom_mid - center):
            best = i
    return best


def pair_rails(rails: Sequence[RailLine], gauge_bounds: tuple[float, float]) -> list[Track]:
    lo, hi = gauge_bounds
    rails = sorted(rails, key=lambda r: r.bottom_x)
    tracks = []
    i = 0
    while i < len(rails) - 1:
        a, b = rails[i], rails[i + 1]
        if lo <= b.bottom_x - a.bottom_x <= hi and converges_upward(a, b):
            tracks.append(Track(a, b))
            i += 2
        else:
            i += 1
    return tracks


def consolidate_tracks(
    lines: Sequence[HoughLine],
    frame_dims: tuple[int, int],
    gauge_bounds: tuple[float, float] | None = None,
    params: TrackParams = TrackParams(),
) -> TrackLayout:
    width, height = frame_dims
    if width <= 0 or height <= 0:
        raise ValueError("frame dims must be positive")
    if gauge_bounds is None:
        gauge_bounds = params.gauge_bounds(width)
    if not gauge_bounds[0] < gauge_bounds[1]:
        raise ValueError("gauge_bounds must satisfy min < max")
    rails = [r for ln in lines if (r := to_rail_line(ln, height, params.max_rail_angle)) is not None]
    rails = merge_rail_lines(rails, params.merge_px, params.merge_angle)
    tracks = pair_rails(rails, gauge_bounds)
    return make_layout(tracks, width, params.main_track_x_frac)


def make_layout(tracks: Sequence[Track], width: int, main_track_x_frac: float = 0.5) -> TrackLayout:
    tracks = sorted(tracks, key=lambda t: t.bottom_mid)
    if not tracks:
        return TrackLayout()
    return TrackLayout(tuple(tracks), pick_main_index(tracks, width, main_track_x_frac))


# -- snippet band -----------------------------------------------------------


def snippet_proposals(
    frame_dims: tuple[int, int], band: BandSpec, snippet_width: int, stride: int
) -> list[SnippetRect]:
    width, height = frame_dims
    if snippet_width <= 0 or stride <= 0:
        raise ValueError("snippet_width and stride must be positive")
    if stride > snippet_width:
        raise ValueError("stride wider than the snippet would leave columns uncovered")
    interior_y0 = int(math.floor(band.interior_top_frac * height))
    edge_y0 = int(math.floor(band.edge_top_frac * height))
    if snippet_width >= width:
        return [SnippetRect(0, edge_y0, width, height, EDGE_COLUMN)]
    starts = list(range(0, width - snippet_width, stride))
    starts.append(width - snippet_width)
    starts = sorted(set(starts))
    rects = []
    for i, x0 in enumerate(starts):
        edge = i == 0 or i == len(starts) - 1
        y0 = edge_y0 if edge else interior_y0
        rects.append(SnippetRect(x0, y0, x0 + snippet_width, height, EDGE_COLUMN if edge else INTERIOR))
    return rects


def crop_snippet(
    frame: ImageBuffer,
    rect: SnippetRect,
    edges: EdgeMap | None = None,
    frame_key: tuple[str, int] | None = None,
) -> Snippet:
    img = ImageBuffer(np.ascontiguousarray(frame.pixels[rect.y0 : rect.y1, rect.x0 : rect.x1]))
    crop = None
    if edges is not None:
        crop = EdgeMap(np.ascontiguousarray(edges.bits[rect.y0 : rect.y1, rect.x0 : rect.x1]))
    return Snippet(rect, img, crop, frame.dims, frame_key)


class SnippetClassifier(Protocol):
    def score(self, snippet: Snippet) -> float: ...


def snippet_rails(snippet: Snippet, params: TrackParams, filters: FilterParams) -> list[RailLine]:
    """Steep lines inside the snippet, expressed in frame coordinates."""
    edges = snippet.edges if snippet.edges is not None else detect_edges(snippet.image, filters)
    lines = hough_lines(edges, params.rho_res, params.theta_res, params.vote_frac, params.min_votes)
    x0, y0 = snippet.rect.x0, snippet.rect.y0
    height = snippet.frame_dims[1] or snippet.rect.y1
    rails = []
    for ln in lines:
        # shift the line from crop coordinates to frame coordinates
        rho = ln.rho + x0 * math.cos(ln.theta) + y0 * math.sin(ln.theta)
        shifted = HoughLine(rho, ln.theta, ln.votes, ln.theta_index, ln.rho_bin)
        rail = to_rail_line(shifted, height, params.max_rail_angle)
        if rail is not None:
            rails.append(rail)
    return merge_rail_lines(rails, params.merge_px, params.merge_angle)


@dataclass(frozen=True)
class HeuristicClassifier:
    """Hough-based track test: a converging pair of steep lines at a plausible gauge.

    Pairs may be any two lines in the snippet, not only neighbours; the gauge
    window is tighter than the frame-level one so the gap between two
    adjacent tracks is not mistaken for a track.
    """

    params: TrackParams = TrackParams()
    filters: FilterParams = FilterParams()
    gauge_min_frac: float = 0.10
    gauge_max_frac: float = 0.20

    def score(self, snippet: Snippet) -> float:
        rails = snippet_rails(snippet, self.params, self.filters)
        width = snippet.frame_dims[0] or snippet.rect.x1
        lo, hi = self.gauge_min_frac * width, self.gauge_max_frac * width
        best = 0.0
        ref = max(snippet.rect.y1 - snippet.rect.y0, 1)
        for i, a in enumerate(rails):
            for b in rails[i + 1 :]:
                if lo <= b.bottom_x - a.bottom_x <= hi and converges_upward(a, b):
                    strength = min(a.line.votes, b.line.votes) / ref
                    best = max(best, min(1.0, 0.5 + 0.5 * strength))
        if best == 0.0 and rails:
            best = 0.25
        return best


@dataclass(frozen=True)
class ConstantClassifier:
    value: float = 0.0

    def score(self, snippet: Snippet) -> float:
        return self.value


def _segment_hits_rect(p, q, rect: SnippetRect) -> bool:
    """Liang-Barsky clip of segment p-q against the half-open rect."""
    x0, y0, x1, y1 = rect.x0, rect.y0, rect.x1 - 1e-9, rect.y1 - 1e-9
    (px, py), (qx, qy) = p, q
    dx, dy = qx - px, qy - py
    t0, t1 = 0.0, 1.0
    for pk, qk in ((-dx, px - x0), (dx, x1 - px), (-dy, py - y0), (dy, y1 - py)):
        if pk == 0:
            if qk < 0:
                return False
            continue
        t = qk / pk
        if pk < 0:
            t0 = max(t0, t)
        else:
            t1 = min(t1, t)
        if t0 > t1:
            return False
    return True


def polyline_hits_rect(points: Sequence[Sequence[float]], rect: SnippetRect) -> bool:
    return any(_segment_hits_rect(points[i], points[i + 1], rect) for i in range(len(points) - 1))


class OracleClassifier:
    """Scores snippets from generator ground truth (rail polylines per frame)."""

    def __init__(self, truth: dict[tuple[str, int], list[list[list[float]]]]):
        self._rails = truth

    @classmethod
    def from_file(cls, path: str | Path) -> "OracleClassifier":
        rails = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                polys = []
                for t in rec["tracks"]:
                    polys.append(t["left"])
                    polys.append(t["right"])
                rails[(rec["scene_id"], int(rec["frame_id"]))] = polys
        return cls(rails)

    def score(self, snippet: Snippet) -> float:
        key = snippet.frame_key
        if key is None or key not in self._rails:
            raise ClassifierError(f"no ground truth for frame {key}")
        hit = any(polyline_hits_rect(poly, snippet.rect) for poly in self._rails[key])
        return 1.0 if hit else 0.0


def classify_snippet(snippet: Snippet, classifier: SnippetClassifier, decision_threshold: float = 0.5) -> SnippetVerdict:
    if snippet.image.width == 0 or snippet.image.height == 0:
        raise ValueError("empty snippet")
    score = float(min(1.0, max(0.0, classifier.score(snippet))))
    return SnippetVerdict(score >= decision_threshold, score)


def _track_hits_rects(track: Track, rects: Sequence[SnippetRect], height: int) -> bool:
    for r in rects:
        for y in (r.y0, r.y1 - 1):
            mid = 0.5 * (track.left_rail.x_at(y, height) + track.right_rail.x_at(y, height))
            if r.x0 <= mid < r.x1:
                return True
        # the midline is straight, so check whether it crosses the rect between the two rows
        top = 0.5 * (track.left_rail.x_at(r.y0, height) + track.right_rail.x_at(r.y0, height))
        bot = 0.5 * (track.left_rail.x_at(r.y1 - 1, height) + track.right_rail.x_at(r.y1 - 1, height))
        if min(top, bot) < r.x0 and max(top, bot) >= r.x1:
            return True
    return False


def positive_runs(verdicts: Sequence[tuple[SnippetRect, SnippetVerdict]]) -> list[list[SnippetRect]]:
    runs: list[list[SnippetRect]] = []
    current: list[SnippetRect] = []
    for rect, verdict in verdicts:
        if verdict.is_track:
            current.append(rect)
        elif current:
            runs.append(current)
            current = []
    if current:
        runs.append(current)
    return runs


def layout_from_snippets(
    verdicts: Sequence[tuple[SnippetRect, SnippetVerdict]],
    edge_layout_hint: TrackLayout,
    frame_dims: tuple[int, int],
    main_track_x_frac: float = 0.5,
) -> TrackLayout:
    """Keep the edge-detected tracks whose centre line passes through a positive run."""
    width, height = frame_dims
    runs = positive_runs(verdicts)
    kept = []
    for track in edge_layout_hint.tracks:
        if any(_track_hits_rects(track, run, height) for run in runs):
            kept.append(track)
    return make_layout(kept, width, main_track_x_frac)
