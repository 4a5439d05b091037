"""Explicit shape warps: restricted affine + thin-plate-spline grids, bilinear sampling.

Coordinates are normalized to [-1, 1] x [-1, 1] with u along width and v along
height; grids are corner-aligned. A warp is parameterized by a regular N x N
control-point grid of 2-vector offsets plus four affine numbers (rotation,
isotropic scale, u/v shifts), 2N^2 + 4 numbers in total. Grid construction
composes the affine map first (global pose), then the spline displacement
(local stroke detail).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .imagecore import Image


class TpsSolveError(RuntimeError):
    """The spline system was singular (degenerate control layout)."""


@dataclass(frozen=True)
class WarpParams:
    """Control-point offsets (N, N, 2) plus restricted affine parameters."""

    tps_offsets: np.ndarray
    rotation: float = 0.0
    scale: float = 1.0
    shift_x: float = 0.0
    shift_y: float = 0.0

    def __post_init__(self) -> None:
        off = np.asarray(self.tps_offsets, dtype=np.float64)
        if off.ndim != 3 or off.shape[0] != off.shape[1] or off.shape[2] != 2:
            raise ValueError(f"tps_offsets must have shape (N, N, 2), got {off.shape}")
        if off.shape[0] < 2:
            raise ValueError("control grid needs N >= 2")
        vals = [self.rotation, self.scale, self.shift_x, self.shift_y]
        if not (np.all(np.isfinite(off)) and np.all(np.isfinite(vals))):
            raise ValueError("warp parameters must be finite")
        off.flags.writeable = False
        object.__setattr__(self, "tps_offsets", off)

    @property
    def n_ctrl(self) -> int:
        return self.tps_offsets.shape[0]

    def flatten(self) -> np.ndarray:
        """(2N^2 + 4,) vector: offsets row-major, then rotation, scale, shifts."""
        return np.concatenate(
            [self.tps_offsets.ravel(), [self.rotation, self.scale, self.shift_x, self.shift_y]]
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_ctrl: int) -> "WarpParams":
        vec = np.asarray(vec, dtype=np.float64).ravel()
        expect = 2 * n_ctrl * n_ctrl + 4
        if vec.size != expect:
            raise ValueError(f"expected {expect} entries for N={n_ctrl}, got {vec.size}")
        off = vec[: 2 * n_ctrl * n_ctrl].reshape(n_ctrl, n_ctrl, 2)
        rot, scale, sx, sy = vec[-4:]
        return cls(off, float(rot), float(scale), float(sx), float(sy))


@dataclass(frozen=True)
class SamplingGrid:
    """Per-target-pixel source lookup coordinates (H, W, 2) as (u, v).

    ``tps_failed`` marks grids built from the affine part alone after a
    degenerate spline solve.
    """

    coords: np.ndarray
    tps_failed: bool = False

    def __post_init__(self) -> None:
        arr = np.asarray(self.coords, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"grid coords must have shape (H, W, 2), got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("grid coordinates must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "coords", arr)

    @property
    def height(self) -> int:
        return self.coords.shape[0]

    @property
    def width(self) -> int:
        return self.coords.shape[1]


@dataclass(frozen=True)
class TpsCoefficients:
    """Fitted interpolant: per output coordinate, K kernel weights + 3 affine terms."""

    control_src: np.ndarray  # (K, 2)
    weights: np.ndarray      # (K, 2)
    affine: np.ndarray       # (3, 2) rows: constant, u, v


def identity_params(n_ctrl: int) -> WarpParams:
    """Zero offsets and the identity affine (rotation 0, scale 1, shifts 0)."""
    if n_ctrl < 2:
        raise ValueError("control grid needs N >= 2")
    return WarpParams(np.zeros((n_ctrl, n_ctrl, 2)))


def control_points(n_ctrl: int) -> np.ndarray:
    """Regular N x N control grid covering [-1, 1]^2; row-major (u varies fastest)."""
    axis = np.linspace(-1.0, 1.0, n_ctrl)
    uu, vv = np.meshgrid(axis, axis, indexing="xy")
    return np.stack([uu.ravel(), vv.ravel()], axis=1)


def tps_kernel(sq_dist: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log r^2 on squared distances, with U(0) = 0."""
    sq = np.asarray(sq_dist, dtype=np.float64)
    out = np.zeros_like(sq)
    np.log(sq, out=out, where=sq > 0)
    return sq * out


def _squared_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...k,...k->...", diff, diff)


@lru_cache(maxsize=16)
def tps_system_inverse(n_ctrl: int, regularization: float) -> np.ndarray:
    """Inverse of the spline system for the regular control grid (cached)."""
    ctrl = control_points(n_ctrl)
    return np.linalg.inv(_tps_system(ctrl, regularization))


def _tps_system(ctrl: np.ndarray, regularization: float) -> np.ndarray:
    k = ctrl.shape[0]
    kernel = tps_kernel(_squared_dists(ctrl, ctrl)) + regularization * np.eye(k)
    p = np.concatenate([np.ones((k, 1)), ctrl], axis=1)
    top = np.concatenate([kernel, p], axis=1)
    bottom = np.concatenate([p.T, np.zeros((3, 3))], axis=1)
    return np.concatenate([top, bottom], axis=0)


def solve_tps(
    control_src: np.ndarray, control_dst: np.ndarray, regularization: float = 0.0
) -> TpsCoefficients:
    """Fit the thin-plate interpolant mapping control_src onto control_dst.

    Kernel weights come out orthogonal to the constant and linear functions by
    construction; with zero regularization the interpolant passes exactly
    through control_dst.
    """
    src = np.asarray(control_src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(control_dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise ValueError(f"need matching source/target lists of >= 3 points, got {src.shape}")
    if regularization < 0:
        raise ValueError("regularization must be >= 0")
    k = src.shape[0]
    rhs = np.concatenate([dst, np.zeros((3, 2))], axis=0)
    try:
        coef = np.linalg.solve(_tps_system(src, regularization), rhs)
    except np.linalg.LinAlgError as exc:
        raise TpsSolveError(f"singular spline system for {k} control points") from exc
    if not np.all(np.isfinite(coef)):
        raise TpsSolveError("spline solve produced non-finite coefficients")
    return TpsCoefficients(control_src=src, weights=coef[:k], affine=coef[k:])


def tps_apply(coef: TpsCoefficients, points: np.ndarray) -> np.ndarray:
    """Evaluate the fitted interpolant at (M, 2) query points."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    u = tps_kernel(_squared_dists(pts, coef.control_src))
    ones = np.ones((pts.shape[0], 1))
    phi = np.concatenate([u, ones, pts], axis=1)
    return phi @ np.concatenate([coef.weights, coef.affine], axis=0)


def base_grid(height: int, width: int) -> np.ndarray:
    """Corner-aligned normalized target coordinates, shape (H, W, 2) as (u, v)."""
    v = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    u = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    uu, vv = np.meshgrid(u, v, indexing="xy")
    return np.stack([uu, vv], axis=2)


def affine_apply(points: np.ndarray, rotation: float, scale: float,
                 shift_x: float, shift_y: float) -> np.ndarray:
    """Rotate, isotropically scale, then translate (..., 2) points."""
    c, s = np.cos(rotation), np.sin(rotation)
    rot = np.array([[c, -s], [s, c]])
    return scale * (points @ rot.T) + np.array([shift_x, shift_y])


def build_grid(
    params: WarpParams, height: int, width: int, regularization: float = 1e-6
) -> SamplingGrid:
    """Source-lookup grid for a target of the given size.

    Composition: base target coordinates -> restricted affine -> spline
    displacement fitted from the regular control grid to (grid + offsets).
    A degenerate spline solve falls back to the affine grid alone and flags
    the result.
    """
    base = base_grid(height, width)
    q = affine_apply(base, params.rotation, params.scale, params.shift_x, params.shift_y)
    ctrl = control_points(params.n_ctrl)
    dst = ctrl + params.tps_offsets.reshape(-1, 2)
    try:
        coef = solve_tps(ctrl, dst, regularization)
    except TpsSolveError:
        return SamplingGrid(q, tps_failed=True)
    out = tps_apply(coef, q.reshape(-1, 2)).reshape(height, width, 2)
    return SamplingGrid(out)


def bilinear_sample(
    img: Image, grid: SamplingGrid, border: str = "fill", fill_value: float = 1.0
) -> Image:
    """Resample an image at grid coordinates with bilinear interpolation.

    ``border`` is "fill" (out-of-range lookups read ``fill_value``, default
    white background) or "clamp" (edge pixels extend outward).
    """
    out = sample_array(img.data, grid.coords, border=border, fill_value=fill_value)
    return Image(np.clip(out, 0.0, 1.0))


def sample_array(
    src: np.ndarray, coords: np.ndarray, border: str = "fill", fill_value: float = 1.0
) -> np.ndarray:
    """Array-level bilinear sampling; `coords` is (..., 2) normalized (u, v)."""
    if border not in ("fill", "clamp"):
        raise ValueError(f"unknown border policy {border!r}")
    h, w = src.shape
    u = coords[..., 0]
    v = coords[..., 1]
    x = (u + 1.0) * 0.5 * (w - 1)
    y = (v + 1.0) * 0.5 * (h - 1)
    if border == "clamp":
        x = np.clip(x, 0.0, w - 1.0)
        y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    fx = x - x0
    fy = y - y0
    out = np.zeros(coords.shape[:-1], dtype=src.dtype)
    for dy, wy in ((0, (1 - fy)), (1, fy)):
        for dx, wx in ((0, (1 - fx)), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            if border == "fill":
                vals = np.where(valid, vals, fill_value)
            out = out + wy * wx * vals
    return out
