"""Pixel-level primitives: image buffers, Netpbm I/O, LoG filtering and Canny."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

GRAY = "gray"
RGB = "rgb"


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Row-major 8-bit raster, shape (h, w) for gray or (h, w, 3) for RGB."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.dtype != np.uint8:
            raise TypeError(f"expected uint8 pixels, got {px.dtype}")
        if px.ndim == 3 and px.shape[2] != 3 or px.ndim not in (2, 3):
            raise ValueError(f"unsupported pixel shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image must be at least 1x1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> str:
        return GRAY if self.pixels.ndim == 2 else RGB

    @property
    def dims(self) -> tuple[int, int]:
        return self.width, self.height

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)


@dataclass(frozen=True, eq=False)
class EdgeMap:
    bits: np.ndarray

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, EdgeMap):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)


@dataclass(frozen=True)
class FilterParams:
    log_sigma: float = 1.4
    canny_low: float = 50.0
    canny_high: float = 150.0
    use_log_prefilter: bool = True

    def __post_init__(self):
        if not self.log_sigma > 0:
            raise ValueError("log_sigma must be positive")
        if not 0 < self.canny_low < self.canny_high <= 255:
            raise ValueError("need 0 < canny_low < canny_high <= 255")


def _round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5)


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    if img.channels == GRAY:
        return img
    rgb = img.pixels.astype(np.float64)
    luma = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return ImageBuffer(np.clip(_round_half_up(luma), 0, 255).astype(np.uint8))


def flip_horizontal(img: ImageBuffer) -> ImageBuffer:
    return ImageBuffer(np.ascontiguousarray(img.pixels[:, ::-1]))


def flip_edges(edges: EdgeMap) -> EdgeMap:
    return EdgeMap(np.ascontiguousarray(edges.bits[:, ::-1]))


def adjust_brightness(img: ImageBuffer, factor: float) -> ImageBuffer:
    if not factor > 0:
        raise ValueError("brightness factor must be positive")
    if factor == 1.0:
        return ImageBuffer(img.pixels.copy())
    scaled = _round_half_up(img.pixels.astype(np.float64) * factor)
    return ImageBuffer(np.clip(scaled, 0, 255).astype(np.uint8))


def log_kernel(sigma: float) -> np.ndarray:
    """Zero-sum Laplacian-of-Gaussian kernel with radius ceil(3*sigma)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    radius = int(math.ceil(3 * sigma))
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    r2 = (xx**2 + yy**2) / (2 * sigma**2)
    kernel = -(1.0 / (math.pi * sigma**4)) * (1.0 - r2) * np.exp(-r2)
    kernel -= kernel.mean()
    # exact mirror symmetry keeps the filter bitwise flip-covariant
    kernel = 0.5 * (kernel + kernel[:, ::-1])
    kernel = 0.5 * (kernel + kernel[::-1, :])
    return kernel


def mexican_hat_filter(img: ImageBuffer, sigma: float) -> np.ndarray:
    """Signed LoG response with edge-replicated borders.

    Horizontal taps are summed as mirrored pairs ``w * (left + right)`` so the
    result of a flipped image is exactly the flipped result.
    """
    gray = to_grayscale(img).pixels.astype(np.float64)
    kernel = log_kernel(sigma)
    r = kernel.shape[0] // 2
    h, w = gray.shape
    padded = np.pad(gray, r, mode="edge")
    out = np.zeros((h, w), dtype=np.float64)
    for dy in range(-r, r + 1):
        rows = padded[r + dy : r + dy + h]
        krow = kernel[dy + r]
        out += krow[r] * rows[:, r : r + w]
        for dx in range(1, r + 1):
            pair = rows[:, r + dx : r + dx + w] + rows[:, r - dx : r - dx + w]
            out += krow[r + dx] * pair
    return out


def rescale_to_gray(response: np.ndarray) -> ImageBuffer:
    lo = response.min()
    hi = response.max()
    if hi <= lo:
        return ImageBuffer(np.zeros(response.shape, dtype=np.uint8))
    scaled = (response - lo) * (255.0 / (hi - lo))
    return ImageBuffer(np.clip(_round_half_up(scaled), 0, 255).astype(np.uint8))


_TAN_22_5 = math.tan(math.radians(22.5))
_TAN_67_5 = math.tan(math.radians(67.5))


def sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(gray.astype(np.int32), 1, mode="edge")
    h, w = gray.shape

    def s(dy, dx):
        return p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]

    gx = (s(-1, 1) + 2 * s(0, 1) + s(1, 1)) - (s(-1, -1) + 2 * s(0, -1) + s(1, -1))
    gy = (s(1, -1) + 2 * s(1, 0) + s(1, 1)) - (s(-1, -1) + 2 * s(-1, 0) + s(-1, 1))
    return gx, gy


def direction_bins(gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Quantize gradient direction into 0/45/90/135 degree bins (codes 0..3).

    Uses only |gx|, |gy| comparisons and the sign of gx*gy, which keeps the
    binning mirror-symmetric.
    """
    ax = np.abs(gx).astype(np.float64)
    ay = np.abs(gy).astype(np.float64)
    bins = np.where(gx * gy > 0, 1, 3)
    bins = np.where(ay <= _TAN_22_5 * ax, 0, bins)
    bins = np.where(ay >= _TAN_67_5 * ax, 2, bins)
    return bins


# neighbour offsets (dy, dx) along the gradient for each direction bin
_NMS_OFFSETS = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}


def non_max_suppression(mag: np.ndarray, bins: np.ndarray) -> np.ndarray:
    h, w = mag.shape
    p = np.pad(mag, 1, mode="edge")
    keep = np.zeros((h, w), dtype=bool)
    for code, (dy, dx) in _NMS_OFFSETS.items():
        fwd = p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w]
        bwd = p[1 - dy : 1 - dy + h, 1 - dx : 1 - dx + w]
        keep |= (bins == code) & (mag >= fwd) & (mag >= bwd)
    return np.where(keep, mag, 0.0)


_EIGHT = np.ones((3, 3), dtype=bool)


def hysteresis(suppressed: np.ndarray, low: float, high: float) -> np.ndarray:
    candidate = suppressed >= low
    strong = suppressed >= high
    if not strong.any():
        return np.zeros_like(candidate)
    labels, n = ndimage.label(candidate, structure=_EIGHT)
    has_strong = np.zeros(n + 1, dtype=bool)
    has_strong[labels[strong]] = True
    has_strong[0] = False
    return has_strong[labels]


def canny(img: ImageBuffer, params: FilterParams) -> EdgeMap:
    """Plain Canny on an 8-bit image: Sobel, L2 magnitude, 4-bin NMS, 8-connected hysteresis."""
    gray = to_grayscale(img).pixels
    gx, gy = sobel(gray)
    mag = np.sqrt((gx * gx + gy * gy).astype(np.float64))
    suppressed = non_max_suppression(mag, direction_bins(gx, gy))
    return EdgeMap(hysteresis(suppressed, params.canny_low, params.canny_high))


def detect_edges(img: ImageBuffer, params: FilterParams) -> EdgeMap:
    """Edge stage used by track detection: optional LoG prefilter, rescale, Canny."""
    gray = to_grayscale(img)
    if params.use_log_prefilter:
        gray = rescale_to_gray(mexican_hat_filter(gray, params.log_sigma))
    return canny(gray, params)


def normalize_contrast(img: ImageBuffer, lo_pct: float = 1.0, hi_pct: float = 99.0) -> ImageBuffer:
    """Percentile contrast stretch of a gray image (brightness-robust preprocessing)."""
    gray = to_grayscale(img).pixels
    lo, hi = np.percentile(gray, [lo_pct, hi_pct])
    if hi <= lo:
        return ImageBuffer(gray.copy())
    scaled = (gray.astype(np.float64) - lo) * (255.0 / (hi - lo))
    return ImageBuffer(np.clip(_round_half_up(scaled), 0, 255).astype(np.uint8))


# -- Netpbm I/O -------------------------------------------------------------


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ValueError("truncated Netpbm header")
    return data[start:pos], pos


def decode_netpbm(data: bytes) -> ImageBuffer:
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported Netpbm magic {magic!r}")
    width, pos = _read_token(data, pos)
    height, pos = _read_token(data, pos)
    maxval, pos = _read_token(data, pos)
    w, h, m = int(width), int(height), int(maxval)
    if m != 255:
        raise ValueError(f"only maxval 255 is supported, got {m}")
    pos += 1  # single whitespace byte after maxval
    nchan = 3 if magic == b"P6" else 1
    size = w * h * nchan
    body = data[pos : pos + size]
    if len(body) != size:
        raise ValueError("truncated Netpbm pixel data")
    arr = np.frombuffer(body, dtype=np.uint8)
    shape = (h, w, 3) if nchan == 3 else (h, w)
    return ImageBuffer(arr.reshape(shape).copy())


def encode_netpbm(img: ImageBuffer) -> bytes:
    magic = b"P5" if img.channels == GRAY else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, img.width, img.height)
    return header + np.ascontiguousarray(img.pixels).tobytes()


def read_image(path: str | Path) -> ImageBuffer:
    return decode_netpbm(Path(path).read_bytes())


def write_image(path: str | Path, img: ImageBuffer) -> None:
    Path(path).write_bytes(encode_netpbm(img))


def draw_rect(img: ImageBuffer, x0: int, y0: int, x1: int, y1: int, color: tuple[int, int, int]) -> ImageBuffer:
    """One-pixel outline of the half-open box [x0, x1) x [y0, y1), clipped to the frame."""
    pix = img.pixels.copy() if img.channels == RGB else np.repeat(img.pixels[..., None], 3, axis=2)
    h, w = pix.shape[:2]
    a, b = max(0, x0), min(w, x1) - 1
    c, d = max(0, y0), min(h, y1) - 1
    if a > b or c > d:
        return ImageBuffer(pix)
    col = np.asarray(color, dtype=np.uint8)
    if y0 >= 0:
        pix[c, a : b + 1] = col
    if y1 <= h:
        pix[d, a : b + 1] = col
    if x0 >= 0:
        pix[c : d + 1, a] = col
    if x1 <= w:
        pix[c : d + 1, b] = col
    return ImageBuffer(pix)
