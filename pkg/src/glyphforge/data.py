"""Dataset ingestion and a synthetic glyph corpus generator.

Real corpora are directory-per-class folders of PNG/PGM files. The synthetic
generator renders random stroke glyphs twice: once clean (the dictionary-like
source domain) and once re-jittered with noise, blotches and a paper tone
(the photograph-like target domain). The two sides share glyph topology per
class but are unpaired by construction: every sample is an independent random
instance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imagecore import Image, binarize, load_image, resize, save_image


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TextureProfile:
    """Photograph-side texture: additive Gaussian noise, blotches, paper tone."""

    noise_amplitude: float = 0.08
    blotch_density: float = 3.0     # expected blotch count per image
    brightness_bias: float = 0.18   # how far the paper tone drops below white

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise_amplitude <= 1.0:
            raise ValueError("noise amplitude must be in [0, 1]")
        if self.blotch_density < 0 or not 0.0 <= self.brightness_bias < 1.0:
            raise ValueError("invalid texture profile")


@dataclass(frozen=True)
class SyntheticGlyphSpec:
    """Controls for the random glyph classes and the photo-side texture."""

    num_classes: int = 2
    canvas: int = 64
    strokes_min: int = 3
    strokes_max: int = 6
    stroke_width: tuple[float, float] = (1.6, 3.0)
    texture: TextureProfile = field(default_factory=TextureProfile)

    def __post_init__(self) -> None:
        if self.num_classes < 1 or self.canvas < 8:
            raise ValueError("need at least one class and a canvas of 8+ pixels")
        if not 1 <= self.strokes_min <= self.strokes_max:
            raise ValueError("invalid stroke count range")


@dataclass(frozen=True)
class Stroke:
    """A line or arc, stored as polyline vertices in [0, 1]^2 canvas coordinates."""

    kind: str
    points: np.ndarray
    width: float


@dataclass
class GlyphDataset:
    """In-memory image set; the common currency accepted by the trainer."""

    images: np.ndarray            # (n, S, S) float32 in [0, 1]
    labels: list[str]
    image_size: int
    stroke_counts: dict[str, int] | None = None

    def __len__(self) -> int:
        return self.images.shape[0]

    def image(self, i: int) -> np.ndarray:
        return self.images[i]


# ---------------------------------------------------------------------------
# synthetic glyphs
# ---------------------------------------------------------------------------

_MARGIN = 0.12


def _make_glyph(rng: np.random.Generator, spec: SyntheticGlyphSpec) -> list[Stroke]:
    n_strokes = int(rng.integers(spec.strokes_min, spec.strokes_max + 1))
    strokes: list[Stroke] = []
    lo, hi = _MARGIN, 1.0 - _MARGIN
    for _ in range(n_strokes):
        width = float(rng.uniform(*spec.stroke_width))
        if rng.random() < 0.65:
            p0 = rng.uniform(lo, hi, 2)
            p1 = rng.uniform(lo, hi, 2)
            # avoid degenerate dot strokes
            if np.linalg.norm(p1 - p0) < 0.15:
                p1 = np.clip(p0 + rng.choice([-1.0, 1.0], 2) * rng.uniform(0.18, 0.4, 2), lo, hi)
            strokes.append(Stroke("line", np.stack([p0, p1]), width))
        else:
            center = rng.uniform(0.3, 0.7, 2)
            radius = float(rng.uniform(0.08, 0.26))
            start = float(rng.uniform(0, 2 * np.pi))
            span = float(rng.uniform(0.7 * np.pi, 1.8 * np.pi))
            angles = start + np.linspace(0.0, span, 16)
            pts = center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
            strokes.append(Stroke("arc", np.clip(pts, lo, hi), width))
    return strokes


def _jitter_points(points: np.ndarray, rng: np.random.Generator,
                   rot: float, scale_dev: float, shift: float) -> np.ndarray:
    angle = rng.uniform(-rot, rot)
    scale = 1.0 + rng.uniform(-scale_dev, scale_dev)
    offset = rng.uniform(-shift, shift, 2)
    c, s = np.cos(angle), np.sin(angle)
    rotm = np.array([[c, -s], [s, c]])
    return (points - 0.5) @ rotm.T * scale + 0.5 + offset


def _render_coverage(strokes: list[Stroke], size: int, rng: np.random.Generator,
                     rot: float, scale_dev: float, shift: float,
                     width_jitter: tuple[float, float]) -> np.ndarray:
    """Ink coverage in [0, 1] per pixel, with per-sample affine/width jitter."""
    coords = (np.stack(np.meshgrid(np.arange(size), np.arange(size), indexing="xy"), axis=-1)
              .reshape(-1, 2).astype(np.float64) + 0.5)
    coverage = np.zeros(size * size)
    for stroke in strokes:
        pts = _jitter_points(stroke.points, rng, rot, scale_dev, shift) * size
        width = stroke.width * float(rng.uniform(*width_jitter))
        a, b = pts[:-1], pts[1:]
        ab = b - a
        denom = np.maximum((ab * ab).sum(axis=1), 1e-12)
        ap = coords[:, None, :] - a[None, :, :]
        t = np.clip((ap * ab[None, :, :]).sum(axis=2) / denom[None, :], 0.0, 1.0)
        proj = a[None, :, :] + t[:, :, None] * ab[None, :, :]
        dist = np.linalg.norm(coords[:, None, :] - proj, axis=2).min(axis=1)
        coverage = np.maximum(coverage, np.clip(0.5 + (width / 2.0 - dist), 0.0, 1.0))
    return coverage.reshape(size, size)


def _render_clean(strokes: list[Stroke], size: int, rng: np.random.Generator) -> np.ndarray:
    cov = _render_coverage(strokes, size, rng, rot=0.05, scale_dev=0.03, shift=0.015,
                           width_jitter=(0.92, 1.08))
    return 1.0 - cov * (1.0 - 0.04)


def _render_photo(strokes: list[Stroke], size: int, rng: np.random.Generator,
                  tex: TextureProfile) -> np.ndarray:
    cov = _render_coverage(strokes, size, rng, rot=0.2, scale_dev=0.12, shift=0.055,
                           width_jitter=(0.75, 1.45))
    page = 1.0 - tex.brightness_bias * float(rng.uniform(0.7, 1.3)) if tex.brightness_bias > 0 else 1.0
    ink = 0.08 + 0.1 * float(rng.random())
    img = page - cov * (page - ink)
    if tex.noise_amplitude > 0:
        img = img + rng.normal(0.0, tex.noise_amplitude, img.shape)
    n_blotches = int(rng.poisson(tex.blotch_density)) if tex.blotch_density > 0 else 0
    if n_blotches:
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(n_blotches):
            cx, cy = rng.uniform(0, size, 2)
            ax, ay = rng.uniform(2.0, size / 6.0, 2)
            angle = rng.uniform(0, np.pi)
            depth = rng.uniform(0.08, 0.3)
            sign = -1.0 if rng.random() < 0.75 else 1.0
            ca, sa = np.cos(angle), np.sin(angle)
            dx, dy = xx - cx, yy - cy
            q = ((dx * ca + dy * sa) / ax) ** 2 + ((-dx * sa + dy * ca) / ay) ** 2
            img = img + sign * depth * np.exp(-q)
    return np.clip(img, 0.0, 1.0)


def synth_generate(
    spec: SyntheticGlyphSpec, samples_per_class: int, seed: int
) -> tuple[GlyphDataset, GlyphDataset]:
    """Render unpaired clean/photographic corpora sharing per-class glyphs."""
    if samples_per_class < 1:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    size = spec.canvas
    sc_images, pc_images = [], []
    labels = []
    stroke_counts: dict[str, int] = {}
    for c in range(spec.num_classes):
        label = f"class_{c:02d}"
        strokes = _make_glyph(rng, spec)
        stroke_counts[label] = len(strokes)
        for _ in range(samples_per_class):
            sc_images.append(_render_clean(strokes, size, rng))
            labels.append(label)
        for _ in range(samples_per_class):
            pc_images.append(_render_photo(strokes, size, rng, spec.texture))
    sc = GlyphDataset(np.asarray(sc_images, dtype=np.float32), list(labels), size, dict(stroke_counts))
    pc = GlyphDataset(np.asarray(pc_images, dtype=np.float32), list(labels), size, dict(stroke_counts))
    return sc, pc


def save_dataset(ds: GlyphDataset, root: str | Path) -> None:
    """Write one PNG per sample under root/<label>/NNNN.png."""
    root = Path(root)
    counters: dict[str, int] = {}
    for i in range(len(ds)):
        label = ds.labels[i]
        counters[label] = counters.get(label, 0)
        out_dir = root / label
        out_dir.mkdir(parents=True, exist_ok=True)
        save_image(Image(np.clip(ds.images[i].astype(np.float64), 0, 1)), out_dir / f"{counters[label]:04d}.png")
        counters[label] += 1


# ---------------------------------------------------------------------------
# directory scanning
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Validated listing of a directory-per-class corpus."""

    root: str
    image_size: int
    entries: list[tuple[str, str]]          # (relative path, class label)
    skipped: list[tuple[str, str]] = field(default_factory=list)  # (relative path, reason)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def labels(self) -> list[str]:
        return sorted({label for _, label in self.entries})

    def load(self, i: int) -> Image:
        img = load_image(Path(self.root) / self.entries[i][0])
        if (img.height, img.width) != (self.image_size, self.image_size):
            img = resize(img, self.image_size, self.image_size)
        return img

    def as_dataset(self) -> GlyphDataset:
        images = np.stack([self.load(i).data for i in range(len(self))]).astype(np.float32)
        return GlyphDataset(images, [label for _, label in self.entries], self.image_size)

    def to_json(self) -> str:
        return json.dumps({
            "root": self.root,
            "image_size": self.image_size,
            "entries": self.entries,
            "skipped": self.skipped,
        })

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        d = json.loads(text)
        return cls(
            root=d["root"], image_size=int(d["image_size"]),
            entries=[tuple(e) for e in d["entries"]],
            skipped=[tuple(s) for s in d.get("skipped", [])],
        )


def scan_dataset(root: str | Path, image_size: int) -> DatasetManifest:
    """Enumerate class subdirectories of PNG/PGM files, lexicographically.

    Unreadable files land in the skipped report instead of failing the scan;
    an empty or class-less root is an error.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    entries: list[tuple[str, str]] = []
    skipped: list[tuple[str, str]] = []
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    for class_dir in class_dirs:
        label = class_dir.name
        for path in sorted(class_dir.iterdir()):
            if not path.is_file() or path.suffix.lower() not in (".png", ".pgm"):
                continue
            rel = str(path.relative_to(root))
            try:
                load_image(path)
            except Exception as exc:
                skipped.append((rel, str(exc)))
                continue
            entries.append((rel, label))
    if not class_dirs or not entries:
        raise DatasetError(f"no classes found under {root}")
    return DatasetManifest(root=str(root), image_size=image_size, entries=entries, skipped=skipped)
