"""Grayscale raster images: the sample unit shared by every stage of the pipeline.

Images are H x W float arrays with values in [0, 1]; 0 is ink, 1 is paper.
Light-on-dark corpora can be handled by inverting at load time (see the CLI
``--invert`` flag).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as _PilImage
from PIL import UnidentifiedImageError


class FormatError(ValueError):
    """A raster file we refuse to decode (color, deep bit depth, bad header)."""


@dataclass(frozen=True)
class Image:
    """Immutable grayscale raster; ``data`` is a (H, W) float64 array in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"image data must be a nonempty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"image values must lie in [0, 1], got range [{lo}, {hi}]")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def inverted(self) -> "Image":
        return Image(1.0 - self.data)


@dataclass(frozen=True)
class BinaryMask:
    """Boolean foreground mask aligned with a source image (True = stroke pixel).

    ``otsu_fallback`` records that Otsu could not split the histogram and the
    fixed threshold 0.5 was used instead.
    """

    bits: np.ndarray
    otsu_fallback: bool = False

    def __post_init__(self) -> None:
        arr = np.asarray(self.bits, dtype=bool)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"mask bits must be a nonempty 2-D array, got shape {arr.shape}")
        arr.flags.writeable = False
        object.__setattr__(self, "bits", arr)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def foreground_count(self) -> int:
        return int(self.bits.sum())

    @property
    def background_count(self) -> int:
        return self.bits.size - self.foreground_count


def otsu_threshold(values: np.ndarray) -> float | None:
    """Otsu split point over a 256-bin histogram of [0, 1] values.

    Returns the threshold (upper edge of the chosen bin) or None when every
    pixel lands in a single bin and no split exists.
    """
    hist, _ = np.histogram(values, bins=256, range=(0.0, 1.0))
    total = hist.sum()
    w0 = np.cumsum(hist)[:-1].astype(np.float64)
    w1 = total - w0
    centers = (np.arange(256) + 0.5) / 256.0
    mass = np.cumsum(hist * centers)
    mu0 = np.divide(mass[:-1], w0, out=np.zeros(255), where=w0 > 0)
    mu1 = np.divide(mass[-1] - mass[:-1], w1, out=np.zeros(255), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    if not np.any(between > 0):
        return None
    k = int(np.argmax(between))
    return (k + 1) / 256.0


def binarize(img: Image, method: str = "otsu", threshold: float = 0.5) -> BinaryMask:
    """Mark pixels strictly below a threshold as foreground (ink is dark).

    ``method`` is "otsu" (threshold from a 256-bin histogram) or "fixed"
    (explicit ``threshold``). A constant image defeats Otsu; we then fall back
    to fixed 0.5 and set ``otsu_fallback`` on the result.
    """
    fallback = False
    if method == "otsu":
        t = otsu_threshold(img.data)
        if t is None:
            t, fallback = 0.5, True
    elif method == "fixed":
        t = float(threshold)
    else:
        raise ValueError(f"unknown binarization method {method!r}")
    return BinaryMask(img.data < t, otsu_fallback=fallback)


def resize(img: Image, height: int, width: int) -> Image:
    """Bilinear resampling with corner-aligned coordinates."""
    if height < 1 or width < 1:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    src = img.data
    h, w = src.shape
    ys = _axis_coords(h, height)
    xs = _axis_coords(w, width)
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, max(w - 2, 0))
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    out = (
        src[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + src[np.ix_(y0, x1)] * (1 - fy) * fx
        + src[np.ix_(y1, x0)] * fy * (1 - fx)
        + src[np.ix_(y1, x1)] * fy * fx
    )
    return Image(np.clip(out, 0.0, 1.0))


def _axis_coords(n_src: int, n_dst: int) -> np.ndarray:
    if n_dst == 1:
        return np.array([(n_src - 1) / 2.0])
    return np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))


def to_bytes_quantized(img: Image) -> np.ndarray:
    """Stored byte = round(value * 255); shared by both writers."""
    return np.round(img.data * 255.0).astype(np.uint8)


def load_image(path: str | Path) -> Image:
    """Read an 8-bit grayscale PNG or PGM (P5, maxval 255) as an Image."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] in (b"P5", b"P2"):
        return _load_pgm(raw, path)
    return _load_png(raw, path)


def save_image(img: Image, path: str | Path) -> None:
    """Write as 8-bit grayscale; format chosen by suffix (.png or .pgm)."""
    path = Path(path)
    data = to_bytes_quantized(img)
    if path.suffix.lower() == ".pgm":
        header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
        path.write_bytes(header + data.tobytes())
    elif path.suffix.lower() == ".png":
        _PilImage.fromarray(data, mode="L").save(path, format="PNG")
    else:
        raise FormatError(f"unsupported output format: {path.suffix!r} (use .png or .pgm)")


def _load_png(raw: bytes, path: Path) -> Image:
    try:
        pil = _PilImage.open(io.BytesIO(raw))
        pil.load()
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a decodable PNG/PGM file") from exc
    if pil.format not in ("PNG", "PPM"):
        raise FormatError(f"{path}: unsupported: format {pil.format}")
    if pil.mode in ("RGB", "RGBA", "P", "LA", "CMYK", "YCbCr"):
        raise FormatError(f"{path}: unsupported: color image (mode {pil.mode})")
    if pil.mode != "L":
        raise FormatError(f"{path}: unsupported: bit depth (mode {pil.mode})")
    arr = np.asarray(pil, dtype=np.uint8)
    return Image(arr.astype(np.float64) / 255.0)


def _load_pgm(raw: bytes, path: Path) -> Image:
    if raw[:2] != b"P5":
        raise FormatError(f"{path}: unsupported: PGM magic {raw[:2]!r} (only binary P5)")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        token = raw[start:pos]
        if not token.isdigit():
            raise FormatError(f"{path}: malformed PGM header near byte {start}")
        fields.append(int(token))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise FormatError(f"{path}: unsupported: maxval {maxval} (only 255)")
    pixels = raw[pos : pos + width * height]
    if len(pixels) != width * height:
        raise FormatError(f"{path}: truncated PGM pixel data")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
    return Image(arr.astype(np.float64) / 255.0)
