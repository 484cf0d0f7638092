"""Deterministic synthetic rail scenes with ground truth.

Geometry: every rail is a straight ground line converging on a single
vanishing point at the horizon. A ground point at lateral offset ``X``
(measured in bottom-row pixels from the vanishing column) and depth
parameter ``t`` (1 at the bottom row, 0 at the horizon) projects to
``x = vx + X * t + bend(t)``, ``y = horizon + t * (h - 1 - horizon)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from railsight.imaging import ImageBuffer, adjust_brightness, write_image
from railsight.track_detect import BandSpec, polyline_hits_rect, snippet_proposals

TAGS = (
    "side_obstruction",
    "curvy",
    "station",
    "double_rail",
    "far_track",
    "surface_confusion",
    "low_visibility",
)

LEFT = "Left"
RIGHT = "Right"

SKY = (172, 190, 208)
GROUND = (112, 102, 92)
RAIL = (205, 205, 210)
POLE = (78, 78, 80)
HOUSING = (22, 22, 24)
UNLIT = (48, 48, 48)
LAMP = {"Red": (235, 25, 25), "Green": (25, 215, 70)}
PLATFORM = (168, 166, 160)
DITCH = (58, 54, 50)
GRASS = (104, 112, 52)
CEMENT = (150, 148, 142)
OBSTRUCTION = (60, 64, 70)


class InvalidPlacement(ValueError):
    pass


@dataclass(frozen=True)
class Geometry:
    horizon_frac: float = 0.30
    gauge_frac: float = 0.13
    spacing_frac: float = 0.40
    rail_top_frac: float = 0.36
    lamp_radius: int = 5
    mast_height: float = 95.0
    signal_t0: float = 0.60
    signal_dt: float = 0.02
    far_exit_frac: float = 0.74
    noise: int = 6


@dataclass(frozen=True)
class SignalPlacement:
    track_index: int
    side: str = LEFT
    color: str = "Red"
    offset: float = 50.0
    lit: bool = True


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    width: int = 320
    height: int = 288
    track_count: int = 1
    main_index: int = 0
    curvature: float = 0.0
    far_side_track: bool = False
    signals: tuple[SignalPlacement, ...] = ()
    brightness: float = 1.0
    tags: tuple[str, ...] = ()
    frame_count: int = 4
    geometry: Geometry = field(default_factory=Geometry)

    def __post_init__(self):
        if not 1 <= self.track_count <= 5:
            raise ValueError("track_count must be in 1..5")
        if not 0 <= self.main_index < self.track_count:
            raise ValueError("main_index out of range")
        unknown = set(self.tags) - set(TAGS)
        if unknown:
            raise ValueError(f"unknown tags {sorted(unknown)}")
        if self.frame_count < 1 or self.brightness <= 0:
            raise ValueError("frame_count must be >= 1 and brightness > 0")
        for s in self.signals:
            if s.side not in (LEFT, RIGHT) or s.color not in LAMP:
                raise ValueError(f"bad signal placement {s}")
            if not 0 <= s.track_index < self.total_tracks:
                raise ValueError(f"signal on missing track {s.track_index}")

    @property
    def total_tracks(self) -> int:
        return self.track_count + (1 if self.far_side_track else 0)

    def to_json(self) -> dict:
        d = asdict(self)
        d["signals"] = [asdict(s) for s in self.signals]
        d["tags"] = list(self.tags)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["signals"] = tuple(SignalPlacement(**s) for s in d.get("signals", ()))
        d["tags"] = tuple(d.get("tags", ()))
        if "geometry" in d:
            d["geometry"] = Geometry(**d["geometry"])
        return cls(**d)


def default_signal_side(track_index: int, n_tracks: int) -> str:
    """Signals stand left of their track, except for the rightmost track."""
    return RIGHT if track_index == n_tracks - 1 else LEFT


class _Camera:
    def __init__(self, spec: SceneSpec):
        g = spec.geometry
        self.w, self.h = spec.width, spec.height
        self.vx = spec.width / 2.0
        self.horizon = g.horizon_frac * spec.height
        self.depth = (spec.height - 1) - self.horizon
        self.curvature = spec.curvature

    def t_at(self, y):
        return (y - self.horizon) / self.depth

    def y_at(self, t):
        return self.horizon + t * self.depth

    def x(self, X, t):
        return self.vx + X * t + self.curvature * self.w * (1.0 - t) ** 2


def rail_offsets(spec: SceneSpec) -> list[tuple[float, float]]:
    """Ground lateral offsets (left rail, right rail) of every track, left to right."""
    g = spec.geometry
    gauge = g.gauge_frac * spec.width
    spacing = g.spacing_frac * spec.width
    out = []
    for i in range(spec.track_count):
        c = (i - spec.main_index) * spacing
        out.append((c - gauge / 2, c + gauge / 2))
    if spec.far_side_track:
        # left rail leaves the frame just above the lower-quarter band
        t_exit = (g.far_exit_frac * spec.height - g.horizon_frac * spec.height) / (
            spec.height - 1 - g.horizon_frac * spec.height
        )
        xl = (spec.width / 2.0) / t_exit
        xl = max(xl, out[-1][1] + spacing - gauge)
        out.append((xl, xl + gauge))
    return out


def _rail_polyline(cam: _Camera, X: float, top_y: float, step: int = 8) -> list[list[float]]:
    ys = list(np.arange(cam.h - 1, top_y, -step, dtype=np.float64)) + [top_y]
    return [[round(float(cam.x(X, cam.t_at(y))), 3), round(float(y), 3)] for y in ys]


def _paint_band(img, cam, X, half_width_fn, top_y, color, rows_grid, cols_grid):
    t = cam.t_at(rows_grid)
    x = cam.x(X, t)
    hw = half_width_fn(t)
    mask = (np.abs(cols_grid - x) <= hw) & (rows_grid >= top_y)
    img[mask] = color


def _paint_region(img, cam, X0, X1, top_y, color, rows_grid, cols_grid):
    t = cam.t_at(rows_grid)
    a, b = cam.x(X0, t), cam.x(X1, t)
    mask = (cols_grid >= np.minimum(a, b)) & (cols_grid < np.maximum(a, b)) & (rows_grid >= top_y)
    img[mask] = color


def _disc(img, cx, cy, r, color):
    h, w = img.shape[:2]
    y0, y1 = max(0, int(cy - r)), min(h, int(cy + r) + 1)
    x0, x1 = max(0, int(cx - r)), min(w, int(cx + r) + 1)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    m = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r + 0.5
    img[y0:y1, x0:x1][m] = color


def _rect(img, x0, y0, x1, y1, color):
    h, w = img.shape[:2]
    x0, x1 = max(0, int(round(x0))), min(w, int(round(x1)))
    y0, y1 = max(0, int(round(y0))), min(h, int(round(y1)))
    if x0 < x1 and y0 < y1:
        img[y0:y1, x0:x1] = color


def signal_geometry(spec: SceneSpec, placement: SignalPlacement, frame_index: int) -> dict:
    """Lamp centre and ground contact point of a signal in one frame."""
    cam = _Camera(spec)
    g = spec.geometry
    rails = rail_offsets(spec)[placement.track_index]
    if placement.side == LEFT:
        X = rails[0] - placement.offset
    else:
        X = rails[1] + placement.offset
    t = g.signal_t0 + g.signal_dt * frame_index
    x = cam.x(X, t)
    base_y = cam.y_at(t)
    lamp_y = base_y - g.mast_height * t
    cx, cy = int(round(x)), int(round(lamp_y))
    r = g.lamp_radius
    return {"cx": cx, "cy": cy, "base_y": base_y, "bbox": [cx - r, cy - r, 2 * r + 1, 2 * r + 1]}


def _check_placements(spec: SceneSpec):
    for i, s in enumerate(spec.signals):
        for k in range(spec.frame_count):
            x, y, w, h = signal_geometry(spec, s, k)["bbox"]
            if x < 0 or y < 0 or x + w > spec.width or y + h > spec.height:
                raise InvalidPlacement(f"signal {i} leaves the frame in frame {k}")


def generate_scene(spec: SceneSpec, scene_id: str = "s0000") -> tuple[list[ImageBuffer], list[dict]]:
    """Render ``spec.frame_count`` frames and one ground-truth record per frame."""
    _check_placements(spec)
    g = spec.geometry
    cam = _Camera(spec)
    W, H = spec.width, spec.height
    rows, cols = np.mgrid[0:H, 0:W].astype(np.float64)
    rail_top = g.rail_top_frac * H
    offsets = rail_offsets(spec)
    tags = set(spec.tags)
    layout_rng = np.random.default_rng([spec.seed, 0x5EED])

    base = np.empty((H, W, 3), dtype=np.uint8)
    base[:] = GROUND
    base[: int(math.ceil(cam.horizon))] = SKY

    def rail_hw(t):
        return np.maximum(0.6, 1.6 * t)

    # static scenery, drawn below the rails
    if "station" in tags:
        X_edge = offsets[0][0] - 0.28 * W
        _paint_region(base, cam, -4 * W, X_edge, rail_top, PLATFORM, rows, cols)
        _paint_region(base, cam, X_edge, X_edge + g.gauge_frac * W, rail_top, DITCH, rows, cols)
    if "surface_confusion" in tags:
        X_c = offsets[-1][1] + 0.10 * W
        _paint_region(base, cam, X_c, X_c + 0.11 * W, rail_top, CEMENT, rows, cols)
        for _ in range(4):
            gx = layout_rng.uniform(0, W)
            gy = layout_rng.uniform(0.55 * H, H)
            rx, ry = layout_rng.uniform(8, 22), layout_rng.uniform(4, 10)
            m = ((cols - gx) / rx) ** 2 + ((rows - gy) / ry) ** 2 <= 1
            base[m] = GRASS
    for X0, X1 in offsets:
        _paint_band(base, cam, X0, rail_hw, rail_top, RAIL, rows, cols)
        _paint_band(base, cam, X1, rail_hw, rail_top, RAIL, rows, cols)
    if "double_rail" in tags:
        X0, _ = offsets[spec.main_index]
        _paint_band(base, cam, X0 + 0.035 * W, rail_hw, rail_top, RAIL, rows, cols)
    if "side_obstruction" in tags:
        right_side = spec.main_index < spec.track_count - 1 or layout_rng.random() < 0.5
        if right_side:
            _rect(base, 0.74 * W, 0.42 * H, W, H, OBSTRUCTION)
        else:
            _rect(base, 0, 0.42 * H, 0.26 * W, H, OBSTRUCTION)

    track_truth = []
    for X0, X1 in offsets:
        track_truth.append(
            {
                "left": _rail_polyline(cam, X0, rail_top),
                "right": _rail_polyline(cam, X1, rail_top),
                "bottom_span": [round(cam.x(X0, 1.0), 3), round(cam.x(X1, 1.0), 3)],
            }
        )
    default_rects = snippet_proposals((W, H), BandSpec(0.75, 0.625), W // 4, W // 8)
    flags = [
        any(polyline_hits_rect(t[k], r) for t in track_truth for k in ("left", "right")) for r in default_rects
    ]

    frames, truth = [], []
    for k in range(spec.frame_count):
        img = base.copy()
        signals = []
        for i, s in enumerate(spec.signals):
            geo = signal_geometry(spec, s, k)
            r = g.lamp_radius
            cx, cy = geo["cx"], geo["cy"]
            _rect(img, cx - 1, cy + r + 3, cx + 2, geo["base_y"], POLE)
            _rect(img, cx - r - 3, cy - r - 3, cx + r + 4, cy + r + 4, HOUSING)
            _disc(img, cx, cy, r, LAMP[s.color] if s.lit else UNLIT)
            signals.append(
                {
                    "signal_id": i,
                    "bbox": geo["bbox"],
                    "color": s.color,
                    "track_index": s.track_index,
                    "side": s.side,
                    "lit": s.lit,
                }
            )
        noise_rng = np.random.default_rng([spec.seed, k])
        noisy = img.astype(np.int16) + noise_rng.integers(-g.noise, g.noise + 1, size=img.shape, dtype=np.int16)
        frame = ImageBuffer(np.clip(noisy, 0, 255).astype(np.uint8))
        if "low_visibility" in tags:
            # haze: pull toward grey before dimming
            hazy = 0.55 * frame.pixels.astype(np.float64) + 0.45 * 120.0
            frame = ImageBuffer(np.clip(np.floor(hazy + 0.5), 0, 255).astype(np.uint8))
        if spec.brightness != 1.0:
            frame = adjust_brightness(frame, spec.brightness)
        frames.append(frame)
        truth.append(
            {
                "scene_id": scene_id,
                "frame_id": k,
                "width": W,
                "height": H,
                "main_index": spec.main_index,
                "tags": sorted(tags, key=TAGS.index),
                "tracks": track_truth,
                "signals": signals,
                "snippet_flags": flags,
            }
        )
    return frames, truth


def default_signals(rng: np.random.Generator, spec: SceneSpec, other_prob: float, unlit_frac: float) -> tuple:
    out = []
    for i in range(spec.track_count):
        if i != spec.main_index and rng.random() >= other_prob:
            continue
        color = "Red" if rng.random() < 0.5 else "Green"
        lit = not (rng.random() < unlit_frac)
        # the far track, when present, is the rightmost one
        out.append(SignalPlacement(i, default_signal_side(i, spec.total_tracks), color, 50.0, lit))
    return tuple(out)


LAYOUTS = ((1, 0), (2, 0), (2, 1), (3, 1))


def random_scene(
    seed: int,
    tags: tuple[str, ...] = (),
    width: int = 320,
    height: int = 288,
    frame_count: int = 4,
    unlit_frac: float = 0.0,
    other_prob: float = 0.7,
    layouts: tuple[tuple[int, int], ...] = LAYOUTS,
) -> SceneSpec:
    rng = np.random.default_rng(seed)
    n, m = layouts[int(rng.integers(len(layouts)))]
    if "far_track" in tags:
        n, m = 2, 1
    curvature = 0.0
    if "curvy" in tags:
        curvature = float(rng.choice([-1, 1]) * rng.uniform(0.12, 0.28))
    brightness = 0.5 if "low_visibility" in tags else 1.0
    spec = SceneSpec(
        seed=seed,
        width=width,
        height=height,
        track_count=n,
        main_index=m,
        curvature=curvature,
        far_side_track="far_track" in tags,
        brightness=brightness,
        tags=tuple(t for t in TAGS if t in tags),
        frame_count=frame_count,
    )
    return replace(spec, signals=default_signals(rng, spec, other_prob, unlit_frac))


@dataclass(frozen=True)
class CorpusSpec:
    count: int
    seed: int = 0
    quotas: dict = field(default_factory=dict)
    width: int = 320
    height: int = 288
    frame_count: int = 4
    unlit_frac: float = 0.0
    layouts: tuple = LAYOUTS

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("count must be positive")
        for tag, n in self.quotas.items():
            if tag not in TAGS:
                raise ValueError(f"unknown tag {tag!r}")
            if not 0 <= n <= self.count:
                raise ValueError(f"quota for {tag} must be within 0..count")


def scene_id(index: int) -> str:
    return f"s{index + 1:04d}"


def corpus_specs(cs: CorpusSpec) -> list[tuple[str, SceneSpec]]:
    rng = np.random.default_rng([cs.seed, 0xC0])
    scene_tags: list[set] = [set() for _ in range(cs.count)]
    for tag in TAGS:
        n = cs.quotas.get(tag, 0)
        if n:
            for i in rng.permutation(cs.count)[:n]:
                scene_tags[int(i)].add(tag)
    out = []
    for i in range(cs.count):
        spec = random_scene(
            cs.seed + i,
            tuple(t for t in TAGS if t in scene_tags[i]),
            cs.width,
            cs.height,
            cs.frame_count,
            cs.unlit_frac,
            layouts=cs.layouts,
        )
        out.append((scene_id(i), spec))
    return out


def write_scenes(scenes: Sequence[tuple[str, SceneSpec]], out_dir: str | Path, meta: dict | None = None) -> Path:
    """Render explicit scenes into a corpus directory; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = dict(meta or {}, truth="truth.jsonl", scenes=[])
    truth_lines = []
    for sid, spec in scenes:
        frames, truth = generate_scene(spec, sid)
        scene_dir = out / sid
        scene_dir.mkdir(exist_ok=True)
        for k, frame in enumerate(frames):
            write_image(scene_dir / f"frame_{k:06d}.ppm", frame)
        truth_lines.extend(json.dumps(rec, separators=(",", ":")) for rec in truth)
        manifest["scenes"].append({"scene_id": sid, "frames": len(frames), "tags": list(spec.tags), "spec": spec.to_json()})
    (out / "truth.jsonl").write_text("".join(line + "\n" for line in truth_lines), encoding="utf-8")
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def generate_corpus(cs: CorpusSpec, out_dir: str | Path) -> Path:
    """Write scenes, merged truth.jsonl and manifest.json; returns the manifest path."""
    meta = {"count": cs.count, "seed": cs.seed, "quotas": {t: cs.quotas[t] for t in TAGS if t in cs.quotas}}
    return write_scenes(corpus_specs(cs), out_dir, meta)
