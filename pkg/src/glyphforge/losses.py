"""Objective functions for both GANs.

The shape generator trains against a signal/noise-balanced reconstruction
loss: the two L1 reconstruction errors plus a log-ratio penalty that switches
on only when one error dominates the other by more than a factor M. The
texture cycle uses an area-balanced per-pixel weight so thin strokes are not
sacrificed to the (much larger) background. Adversarial terms are least
squares on both sides, halved for discriminators.

L1 here is always the mean absolute difference, so the log ratio is invariant
to tensor sizes (images and noise vectors have different lengths).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imagecore import BinaryMask

RER_CLAMP = 1e-12


@dataclass(frozen=True)
class SnrConfig:
    """Band half-width M for the log-ratio penalty; the ratio is considered
    balanced while it stays inside [-log M, log M]."""

    m_band: float = 6.0

    def __post_init__(self) -> None:
        if self.m_band <= 1.0:
            raise ValueError(f"M must be > 1, got {self.m_band}")

    @property
    def log_band(self) -> float:
        return math.log(self.m_band)


@dataclass
class WeightMatrix:
    """Per-pixel cycle weights: background 1, every stroke pixel (C/S_fg)*S_bg.

    ``degenerate`` marks an all-background mask, where the weights collapse
    to all ones.
    """

    values: np.ndarray
    foreground_weight: float
    degenerate: bool = False


@dataclass
class LossReport:
    """One training step's scalars, serialized as a JSON line."""

    iteration: int
    gtg_gen: float
    gtg_disc: float
    ttg_gen: float
    ttg_disc: float
    snr: float
    rer: float
    alpha: int
    diversity: float
    cycle: float
    rer_clamped: bool = False

    _KEYS = ("iter", "L_Gg", "L_Dg", "L_GXY_GYX", "L_DY_DX", "L_snr", "RER", "alpha", "L_div", "L_sacyc")

    def to_dict(self) -> dict:
        vals = (self.iteration, self.gtg_gen, self.gtg_disc, self.ttg_gen, self.ttg_disc,
                self.snr, self.rer, self.alpha, self.diversity, self.cycle)
        out = dict(zip(self._KEYS, vals))
        if self.rer_clamped:
            out["rer_clamped"] = True
        return out

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "LossReport":
        return cls(
            iteration=int(d["iter"]), gtg_gen=d["L_Gg"], gtg_disc=d["L_Dg"],
            ttg_gen=d["L_GXY_GYX"], ttg_disc=d["L_DY_DX"], snr=d["L_snr"], rer=d["RER"],
            alpha=int(d["alpha"]), diversity=d["L_div"], cycle=d["L_sacyc"],
            rer_clamped=bool(d.get("rer_clamped", False)),
        )

    def values_finite(self) -> bool:
        vals = (self.gtg_gen, self.gtg_disc, self.ttg_gen, self.ttg_disc,
                self.snr, self.rer, self.diversity, self.cycle)
        return all(math.isfinite(v) for v in vals)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ad.AutodiffError(f"l1 shape mismatch: {a.data.shape} vs {b.data.shape}")
    return ad.mean(ad.abs_(a - b))


def _clamped_log(term: Tensor) -> tuple[Tensor, bool]:
    if float(term.data) < RER_CLAMP:
        return Tensor(np.asarray(RER_CLAMP, dtype=term.data.dtype)), True
    return term, False


def rer(x, x_rec, z, z_rec) -> tuple[Tensor, bool]:
    """log( L1(z, z_rec) / L1(x, x_rec) ), natural log.

    Either error below 1e-12 is clamped to 1e-12 (gradient stops there) and
    the flag in the result is set.
    """
    lx, cx = _clamped_log(l1(x, x_rec))
    lz, cz = _clamped_log(l1(z, z_rec))
    return ad.log(lz) - ad.log(lx), cx or cz


def select_alpha(rer_value: float, cfg: SnrConfig) -> int:
    """+1 above the band (noise reconstruction lagging), -1 below, else 0."""
    if rer_value > cfg.log_band:
        return 1
    if rer_value < -cfg.log_band:
        return -1
    return 0


def snr_loss(x, x_rec, z, z_rec, cfg: SnrConfig) -> tuple[Tensor, int, float, bool]:
    """Signal + noise reconstruction errors plus the banded ratio penalty.

    Returns (loss, alpha, ratio value, clamped flag); alpha is chosen from the
    batch ratio and held constant inside the graph, the ratio itself still
    carries gradients through both L1 terms.
    """
    lx = l1(x, x_rec)
    lz = l1(z, z_rec)
    lx_c, cx = _clamped_log(lx)
    lz_c, cz = _clamped_log(lz)
    ratio = ad.log(lz_c) - ad.log(lx_c)
    ratio_value = float(ratio.data)
    alpha = select_alpha(ratio_value, cfg)
    loss = lx + lz
    if alpha > 0:
        loss = loss + ratio
    elif alpha < 0:
        loss = loss - ratio
    return loss, alpha, ratio_value, cx or cz


def diversity_loss(theta1: Tensor, theta2: Tensor) -> Tensor:
    """Negative mean absolute distance between two parameter predictions."""
    return -l1(theta1, theta2)


def stroke_weight(mask: BinaryMask, c_weight: float = 2.0) -> WeightMatrix:
    """Area-balanced weights from a foreground mask.

    Foreground pixels all share (C / S_fg) * S_bg; background stays at 1.
    An empty foreground yields all ones with the degenerate flag set.
    """
    if c_weight < 1.0:
        raise ValueError(f"C must be >= 1, got {c_weight}")
    s_fg = mask.foreground_count
    s_bg = mask.background_count
    values = np.ones((mask.height, mask.width), dtype=np.float64)
    if s_fg == 0:
        return WeightMatrix(values=values, foreground_weight=1.0, degenerate=True)
    fg_weight = (c_weight / s_fg) * s_bg
    values[mask.bits] = fg_weight
    return WeightMatrix(values=values, foreground_weight=fg_weight)


def weighted_l1(a: Tensor, b: Tensor, weights: np.ndarray) -> Tensor:
    """Mean over all pixels of weights * |a - b| (normalized by count, not weight sum)."""
    a, b = _as_tensor(a), _as_tensor(b)
    w = Tensor(np.broadcast_to(np.asarray(weights, dtype=a.data.dtype), a.data.shape).copy())
    return ad.mean(w * ad.abs_(a - b))


def _call(net, x: Tensor, mode) -> Tensor:
    """Invoke a net or plain callable, passing the forward mode only if given."""
    return net(x) if mode is None else net(x, mode)


def stroke_aware_cycle_loss(gen_photo, gen_clean, x_t, y, weights: np.ndarray,
                            mode=None) -> Tensor:
    """Weighted cycle on the glyph side plus a plain cycle on the photo side.

    ``weights`` must come from the warped glyphs in ``x_t`` (their binarized
    foreground); only that direction is stroke-weighted.
    """
    x_t, y = _as_tensor(x_t), _as_tensor(y)
    rec_x = _call(gen_clean, _call(gen_photo, x_t, mode), mode)
    rec_y = _call(gen_photo, _call(gen_clean, y, mode), mode)
    return weighted_l1(rec_x, x_t, weights) + l1(rec_y, y)


# ---------------------------------------------------------------------------
# least-squares adversarial terms
# ---------------------------------------------------------------------------

def lsgan_toward(scores: Tensor, target: float) -> Tensor:
    return ad.mean((scores - target) ** 2)


def gtg_gen_loss(disc, x_t: Tensor, mode=None) -> Tensor:
    """Generator-side adversarial term; the trainer adds the reconstruction
    and diversity terms on top."""
    return lsgan_toward(_call(disc, _as_tensor(x_t), mode), 1.0)


def gtg_disc_loss(disc, x_t, y_d, mode=None) -> Tensor:
    """Half squared score on warped fakes, half toward 1 on destylized reals.

    Callers pass ``x_t`` and ``y_d`` detached; only the discriminator learns.
    """
    fake = lsgan_toward(_call(disc, _as_tensor(x_t), mode), 0.0)
    real = lsgan_toward(_call(disc, _as_tensor(y_d), mode), 1.0)
    return 0.5 * fake + 0.5 * real


def ttg_gen_loss(ttg, x_t, y, weights: np.ndarray, lam: float = 10.0,
                 gen_mode=None, disc_mode=None):
    """Both generators' adversarial terms plus the weighted cycle, scaled by lambda.

    Returns (loss, parts) where parts carries the cycle value and the fake
    images for reuse by the discriminator update.
    """
    x_t, y = _as_tensor(x_t), _as_tensor(y)
    fake_y = _call(ttg.gen_photo, x_t, gen_mode)
    rec_x = _call(ttg.gen_clean, fake_y, gen_mode)
    fake_x = _call(ttg.gen_clean, y, gen_mode)
    rec_y = _call(ttg.gen_photo, fake_x, gen_mode)
    cycle = weighted_l1(rec_x, x_t, weights) + l1(rec_y, y)
    adv = lsgan_toward(_call(ttg.disc_photo, fake_y, disc_mode), 1.0) + lsgan_toward(
        _call(ttg.disc_clean, fake_x, disc_mode), 1.0
    )
    loss = adv + lam * cycle
    parts = {"cycle": float(cycle.data), "fake_y": fake_y, "fake_x": fake_x}
    return loss, parts


def ttg_disc_loss(ttg, fake_y, fake_x, x, y, mode=None) -> Tensor:
    """Half-weighted least squares for both domain discriminators.

    ``fake_y``/``fake_x`` must be detached generator outputs; the photo
    discriminator judges them against real photos ``y``, the glyph
    discriminator against the source glyphs ``x``.
    """
    terms = [
        lsgan_toward(_call(ttg.disc_photo, _as_tensor(fake_y), mode), 0.0),
        lsgan_toward(_call(ttg.disc_photo, _as_tensor(y), mode), 1.0),
        lsgan_toward(_call(ttg.disc_clean, _as_tensor(fake_x), mode), 0.0),
        lsgan_toward(_call(ttg.disc_clean, _as_tensor(x), mode), 1.0),
    ]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return 0.5 * total
