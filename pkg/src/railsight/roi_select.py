"""Signal search regions derived from the track layout, plus two fixed baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass

from railsight.track_detect import TrackLayout

LEFT_OF_MAIN = "LeftOfMain"
RIGHT_OF_RIGHTMOST = "RightOfRightmost"
BETWEEN_TRACKS = "BetweenTracks"
BOTH_SIDES_SINGLE = "BothSidesSingle"
FIXED_BASELINE = "FixedBaseline"
LEFT_THEN_RIGHT_BASELINE = "LeftThenRightBaseline"

TRACK_SPECIFIC = "TrackSpecific"
FIXED = "Fixed"
LEFT_THEN_RIGHT = "LeftThenRight"


class NoTrackLayout(ValueError):
    pass


@dataclass(frozen=True)
class Roi:
    """Half-open pixel rectangle [x0, x1) x [y0, y1)."""

    x0: int
    x1: int
    y0: int
    y1: int
    origin_rule: str

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate roi {self}")

    def as_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]

    def contains(self, x: float, y: float) -> bool:
        return self.x0 <= x < self.x1 and self.y0 <= y < self.y1

    def width(self) -> int:
        return self.x1 - self.x0


@dataclass(frozen=True)
class RoiParams:
    roi_top_frac: float = 0.0
    horizon_frac: float = 0.75
    min_roi_width: int = 32


@dataclass(frozen=True)
class RoiStrategy:
    kind: str = TRACK_SPECIFIC
    # (x0, y0, x1, y1) as fractions of the frame, only for the Fixed kind
    fixed_rect: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in (TRACK_SPECIFIC, FIXED, LEFT_THEN_RIGHT):
            raise ValueError(f"unknown roi strategy {self.kind!r}")
        if (self.fixed_rect is not None) != (self.kind == FIXED):
            raise ValueError("fixed_rect is required for, and only for, the Fixed strategy")


def _px(x: float) -> int:
    return int(math.floor(x + 0.5))


def _vertical(height: int, params: RoiParams) -> tuple[int, int]:
    y0 = max(0, _px(params.roi_top_frac * height))
    y1 = min(height, _px(params.horizon_frac * height))
    if y1 <= y0:
        y1 = min(height, y0 + 1)
    return y0, y1


def _span(x0: float, x1: float, side: str, main_left: int, main_right: int, width: int, min_w: int):
    """Clamp a horizontal range, widen it to ``min_w`` and keep it off the main track."""
    a, b = max(0, _px(x0)), min(width, _px(x1))
    if b - a < min_w:
        c = 0.5 * (a + b)
        a, b = _px(c - min_w / 2), _px(c - min_w / 2) + min_w
        if side == "left" and b > main_left:
            b = main_left
            a = b - min_w
        elif side == "right" and a < main_right:
            a = main_right
            b = a + min_w
        a, b = max(0, a), min(width, b)
    return (a, b) if a < b else None


def rule_for(n_tracks: int, main_index: int) -> str:
    if n_tracks == 1:
        return BOTH_SIDES_SINGLE
    if main_index == 0:
        return LEFT_OF_MAIN
    if main_index == n_tracks - 1:
        return RIGHT_OF_RIGHTMOST
    return BETWEEN_TRACKS


def select_roi(layout: TrackLayout, frame_dims: tuple[int, int], params: RoiParams = RoiParams()) -> list[Roi]:
    """Track-specific search region(s).

    Main track leftmost: everything left of it. Rightmost: everything right of
    it. Sandwiched: the gap up to the next track on the left. A lone track
    gets both sides.
    """
    if not layout.tracks:
        raise NoTrackLayout("empty track layout")
    width, height = frame_dims
    y0, y1 = _vertical(height, params)
    main = layout.main
    m = layout.main_index
    ml, mr = _px(main.left_rail.bottom_x), _px(main.right_rail.bottom_x)
    rule = rule_for(len(layout.tracks), m)
    if rule == LEFT_OF_MAIN:
        spans = [_span(0, main.left_rail.bottom_x, "left", ml, mr, width, params.min_roi_width)]
    elif rule == RIGHT_OF_RIGHTMOST:
        spans = [_span(main.right_rail.bottom_x, width, "right", ml, mr, width, params.min_roi_width)]
    elif rule == BETWEEN_TRACKS:
        left_track = layout.tracks[m - 1]
        spans = [
            _span(left_track.right_rail.bottom_x, main.left_rail.bottom_x, "left", ml, mr, width, params.min_roi_width)
        ]
    else:
        spans = [
            _span(0, main.left_rail.bottom_x, "left", ml, mr, width, params.min_roi_width),
            _span(main.right_rail.bottom_x, width, "right", ml, mr, width, params.min_roi_width),
        ]
    rois = [Roi(a, b, y0, y1, rule) for s in spans if s is not None for a, b in [s]]
    if not rois:
        raise NoTrackLayout("main track leaves no room for a search region")
    return rois


def baseline_fixed_roi(frame_dims: tuple[int, int], strategy: RoiStrategy) -> Roi:
    if strategy.kind != FIXED or strategy.fixed_rect is None:
        raise ValueError("baseline_fixed_roi needs a Fixed strategy")
    width, height = frame_dims
    fx0, fy0, fx1, fy1 = strategy.fixed_rect
    x0, x1 = max(0, _px(fx0 * width)), min(width, _px(fx1 * width))
    y0, y1 = max(0, _px(fy0 * height)), min(height, _px(fy1 * height))
    return Roi(x0, x1, y0, y1, FIXED_BASELINE)


def baseline_left_then_right(
    frame_dims: tuple[int, int], left_searched: bool = False, params: RoiParams = RoiParams()
) -> Roi:
    """Left half on the first pass; right half once the left pass came up empty."""
    width, height = frame_dims
    y0, y1 = _vertical(height, params)
    half = width // 2
    if left_searched:
        return Roi(half, width, y0, y1, LEFT_THEN_RIGHT_BASELINE)
    return Roi(0, half, y0, y1, LEFT_THEN_RIGHT_BASELINE)
