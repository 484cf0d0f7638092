"""Signal candidates inside a region and red/green lamp colour classification."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from railsight.imaging import ImageBuffer
from railsight.roi_select import Roi

RED = "Red"
GREEN = "Green"
NO_COLOR = "NoColor"


@dataclass(frozen=True)
class BBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"empty bbox {self}")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.w, self.h]

    def clamp(self, width: int, height: int) -> "BBox | None":
        x0, y0 = max(0, self.x), max(0, self.y)
        x1, y1 = min(width, self.x + self.w), min(height, self.y + self.h)
        if x1 <= x0 or y1 <= y0:
            return None
        return BBox(x0, y0, x1 - x0, y1 - y0)

    def intersects(self, roi: Roi) -> bool:
        return self.x < roi.x1 and roi.x0 < self.x + self.w and self.y < roi.y1 and roi.y0 < self.y + self.h


@dataclass(frozen=True)
class SignalDetection:
    bbox: BBox
    color: str
    score: float
    frame_id: int
    roi_rule: str

    def to_json(self) -> dict:
        return {"bbox": self.bbox.as_list(), "color": self.color, "score": round(self.score, 6)}


@dataclass(frozen=True)
class ColorMaskParams:
    red_hue: tuple[tuple[float, float], ...] = ((0.0, 15.0), (345.0, 360.0))
    green_hue: tuple[float, float] = (90.0, 150.0)
    min_saturation: float = 0.4
    min_value: float = 0.3
    min_colored_frac: float = 0.05

    def __post_init__(self):
        for lo, hi in (*self.red_hue, self.green_hue):
            if not 0 <= lo < hi <= 360:
                raise ValueError("hue windows must satisfy 0 <= lo < hi <= 360")
        for f in (self.min_saturation, self.min_value, self.min_colored_frac):
            if not 0 <= f <= 1:
                raise ValueError("fractions must be in [0, 1]")


class DetectorError(RuntimeError):
    pass


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hue in degrees [0, 360), saturation and value in [0, 1]."""
    arr = rgb.astype(np.float64) / 255.0
    r, g, b = arr[..., 0], arr[..., 1], arr[..., 2]
    mx = arr.max(axis=-1)
    mn = arr.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    hue = np.where(delta > 0, hue * 60.0, 0.0) % 360.0
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return hue, sat, mx


def _in_window(hue, window):
    lo, hi = window
    return (hue >= lo) & (hue < hi)


def color_masks(rgb: np.ndarray, params: ColorMaskParams) -> tuple[np.ndarray, np.ndarray]:
    if rgb.ndim == 2:
        empty = np.zeros(rgb.shape, dtype=bool)
        return empty, empty
    hue, sat, val = rgb_to_hsv(rgb)
    vivid = (sat >= params.min_saturation) & (val >= params.min_value)
    red = np.zeros(hue.shape, dtype=bool)
    for window in params.red_hue:
        red |= _in_window(hue, window)
    green = _in_window(hue, params.green_hue)
    return red & vivid, green & vivid


def classify_color(frame: ImageBuffer, bbox: BBox, params: ColorMaskParams = ColorMaskParams()) -> str:
    box = bbox.clamp(frame.width, frame.height)
    if box is None:
        return NO_COLOR
    patch = frame.pixels[box.y : box.y + box.h, box.x : box.x + box.w]
    red, green = color_masks(patch, params)
    n = box.w * box.h
    red_frac, green_frac = red.sum() / n, green.sum() / n
    if max(red_frac, green_frac) < params.min_colored_frac:
        return NO_COLOR
    return RED if red_frac >= green_frac else GREEN


class SignalDetector(Protocol):
    def detect(self, frame: ImageBuffer, roi: Roi, frame_key=None) -> list[tuple[BBox, float]]: ...


_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class BlobDetector:
    """Connected components of the red/green lamp masks inside the region."""

    params: ColorMaskParams = ColorMaskParams()
    min_blob_area: int = 9
    min_aspect: float = 1 / 3
    max_aspect: float = 3.0

    def detect(self, frame: ImageBuffer, roi: Roi, frame_key=None) -> list[tuple[BBox, float]]:
        patch = frame.pixels[roi.y0 : roi.y1, roi.x0 : roi.x1]
        red, green = color_masks(patch, self.params)
        mask = red | green
        if not mask.any():
            return []
        labels, n = ndimage.label(mask, structure=_EIGHT)
        areas = np.bincount(labels.ravel(), minlength=n + 1)
        out = []
        for idx, sl in enumerate(ndimage.find_objects(labels), start=1):
            if sl is None or areas[idx] < self.min_blob_area:
                continue
            h = sl[0].stop - sl[0].start
            w = sl[1].stop - sl[1].start
            if not self.min_aspect <= w / h <= self.max_aspect:
                continue
            score = float(areas[idx]) / (w * h)
            out.append((BBox(roi.x0 + sl[1].start, roi.y0 + sl[0].start, w, h), score))
        out.sort(key=lambda c: (c[0].y, c[0].x))
        return out


class OracleDetector:
    """Emits ground-truth signal boxes (lit or not) that intersect the region."""

    def __init__(self, truth: dict[tuple[str, int], list[list[int]]]):
        self._boxes = truth

    @classmethod
    def from_file(cls, path: str | Path) -> "OracleDetector":
        boxes = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                boxes[(rec["scene_id"], int(rec["frame_id"]))] = [s["bbox"] for s in rec["signals"]]
        return cls(boxes)

    def detect(self, frame: ImageBuffer, roi: Roi, frame_key=None) -> list[tuple[BBox, float]]:
        if frame_key not in self._boxes:
            raise DetectorError(f"no ground truth for frame {frame_key}")
        out = []
        for x, y, w, h in self._boxes[frame_key]:
            box = BBox(x, y, w, h).clamp(frame.width, frame.height)
            if box is not None and box.intersects(roi):
                out.append((box, 1.0))
        return out


def detect_candidates(frame: ImageBuffer, roi: Roi, detector: SignalDetector, frame_key=None) -> list[tuple[BBox, float]]:
    if not (0 <= roi.x0 and roi.x1 <= frame.width and 0 <= roi.y0 and roi.y1 <= frame.height):
        raise ValueError("roi outside frame")
    try:
        cands = detector.detect(frame, roi, frame_key)
    except DetectorError:
        raise
    except Exception as exc:  # any detector fault is reported per frame
        raise DetectorError(str(exc)) from exc
    return [(b, s) for b, s in cands if b.intersects(roi)]


def filter_colorless(
    cands: list[tuple[BBox, float]],
    frame: ImageBuffer,
    params: ColorMaskParams = ColorMaskParams(),
    frame_id: int = 0,
    roi_rule: str = "",
) -> list[SignalDetection]:
    out = []
    for bbox, score in cands:
        color = classify_color(frame, bbox, params)
        if color != NO_COLOR:
            out.append(SignalDetection(bbox, color, float(min(1.0, max(0.0, score))), frame_id, roi_rule))
    return out
