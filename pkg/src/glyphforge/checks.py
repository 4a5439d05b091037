"""Finite-difference verification suites for every trainable objective.

Each suite builds tiny double-precision nets (8x8 images, 2x2 control grid,
quarter channels), wires up one of the training losses exactly as the trainer
does, and compares analytic gradients against central differences. Forward
passes run with batch statistics but frozen running stats, so repeated
evaluation of the same closure is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as lo
from . import networks as nn
from .autodiff import GradCheckReport, Tensor
from .imagecore import Image, binarize


@dataclass
class SuiteResult:
    name: str
    report: GradCheckReport

    def line(self) -> str:
        return f"[{'PASS' if self.report.passed else 'FAIL'}] {self.name}: {self.report.summary()}"


def _tiny_setup(seed: int):
    cfg = nn.NetConfig(image_size=8, n_ctrl=2, channel_mult=0.25)
    rng = np.random.default_rng(seed)
    gtg, ttg = nn.build_default_nets(cfg, rng, dtype=np.float64)
    # the training-scale init leaves pre-norm activations near zero, which
    # makes the 1e-4 central difference ill-conditioned through batch norm;
    # the oracle wants unit-scale activations, so rescale the kernels
    for bundle in (gtg, ttg):
        for _, p in bundle.named_params():
            if p.data.ndim == 4:
                p.data *= 10.0
    batch = 4
    x = rng.uniform(0.05, 0.95, (batch, 1, cfg.image_size, cfg.image_size))
    y = rng.uniform(0.05, 0.95, (batch, 1, cfg.image_size, cfg.image_size))
    z1 = rng.standard_normal((batch, cfg.noise_dim))
    z2 = rng.standard_normal((batch, cfg.noise_dim))
    return cfg, gtg, ttg, x, y, z1, z2


def _weights_for(x_arr: np.ndarray, c_weight: float = 2.0) -> np.ndarray:
    out = np.ones_like(x_arr)
    for i in range(x_arr.shape[0]):
        mask = binarize(Image(np.clip(x_arr[i, 0], 0, 1)), "fixed", threshold=0.5)
        out[i, 0] = lo.stroke_weight(mask, c_weight).values
    return out


def losses_grad_suite(seed: int = 0, probes: int = 6) -> list[SuiteResult]:
    """Gradient oracle over the full objective set on tiny nets."""
    cfg, gtg, ttg, x, y, z1, z2 = _tiny_setup(seed)
    snr_cfg = lo.SnrConfig(6.0)
    frozen = nn.FROZEN
    results: list[SuiteResult] = []

    def forward_parts():
        feat = gtg.encoder(Tensor(x), frozen)
        raw1 = gtg.predictor(feat + Tensor(z1), frozen)
        theta1 = nn.decode_warp_params(raw1, cfg.n_ctrl)
        raw2 = gtg.predictor(feat + Tensor(z2), frozen)
        theta2 = nn.decode_warp_params(raw2, cfg.n_ctrl)
        grid = ad.warp_grid(theta1, cfg.n_ctrl, cfg.image_size, cfg.image_size, cfg_reg)
        warped = ad.grid_sample(Tensor(x), grid)
        x_rec = gtg.recon_image(theta1, frozen)
        z_rec = gtg.recon_noise(theta1, frozen)
        return theta1, theta2, warped, x_rec, z_rec

    cfg_reg = 1e-6
    gen_params = gtg.generator_params()

    def check(name, f, params):
        results.append(SuiteResult(name, ad.grad_check(
            f, params, step=1e-4, tol=1e-3, max_probes_per_param=probes, seed=seed
        )))

    def f_recon_terms():
        _, _, _, x_rec, z_rec = forward_parts()
        return lo.l1(Tensor(x), x_rec) + lo.l1(Tensor(z1), z_rec)

    check("reconstruction terms", f_recon_terms, gen_params)

    def f_rer():
        _, _, _, x_rec, z_rec = forward_parts()
        value, _ = lo.rer(Tensor(x), x_rec, Tensor(z1), z_rec)
        return value

    check("reconstruction error ratio", f_rer, gen_params)

    def f_snr():
        _, _, _, x_rec, z_rec = forward_parts()
        return lo.snr_loss(Tensor(x), x_rec, Tensor(z1), z_rec, snr_cfg)[0]

    check("balanced reconstruction loss", f_snr, gen_params)

    def f_div():
        theta1, theta2, _, _, _ = forward_parts()
        return lo.diversity_loss(theta1, theta2)

    check("diversity loss", f_div, gen_params)

    x_t_fixed = None

    def f_gtg_gen():
        theta1, theta2, warped, x_rec, z_rec = forward_parts()
        snr, _, _, _ = lo.snr_loss(Tensor(x), x_rec, Tensor(z1), z_rec, snr_cfg)
        div = lo.diversity_loss(theta1, theta2)
        return lo.gtg_gen_loss(gtg.disc, warped, mode=frozen) + snr + div

    check("shape generator objective", f_gtg_gen, gen_params)

    with ad.no_grad():
        _, _, warped0, _, _ = forward_parts()
        destylized0 = ttg.gen_clean(Tensor(y), frozen)
    x_t_fixed = warped0.data.copy()
    y_d_fixed = destylized0.data.copy()

    def f_gtg_disc():
        return lo.gtg_disc_loss(gtg.disc, Tensor(x_t_fixed), Tensor(y_d_fixed), mode=frozen)

    check("shape discriminator objective", f_gtg_disc, gtg.disc_params())

    weights = _weights_for(x_t_fixed)
    ones = np.ones_like(weights)

    def f_cycle():
        return lo.stroke_aware_cycle_loss(
            ttg.gen_photo, ttg.gen_clean, Tensor(x_t_fixed), Tensor(y), weights, mode=frozen
        )

    check("stroke-weighted cycle", f_cycle, ttg.generator_params())

    def f_cycle_plain():
        return lo.stroke_aware_cycle_loss(
            ttg.gen_photo, ttg.gen_clean, Tensor(x_t_fixed), Tensor(y), ones, mode=frozen
        )

    check("unweighted cycle", f_cycle_plain, ttg.generator_params())

    def f_ttg_gen():
        loss, _ = lo.ttg_gen_loss(ttg, Tensor(x_t_fixed), Tensor(y), weights, lam=10.0,
                                  gen_mode=frozen, disc_mode=frozen)
        return loss

    check("texture generators objective", f_ttg_gen, ttg.generator_params())

    with ad.no_grad():
        fake_y0 = ttg.gen_photo(Tensor(x_t_fixed), frozen)
        fake_x0 = ttg.gen_clean(Tensor(y), frozen)

    def f_ttg_disc():
        return lo.ttg_disc_loss(ttg, Tensor(fake_y0.data), Tensor(fake_x0.data),
                                Tensor(x), Tensor(y), mode=frozen)

    check("texture discriminators objective", f_ttg_disc, ttg.disc_params())
    return results


def geometry_grad_suite(seed: int = 0, probes: int = 24) -> list[SuiteResult]:
    """Sampler and grid-builder differentiability against central differences."""
    rng = np.random.default_rng(seed)
    results: list[SuiteResult] = []
    img = Tensor(rng.uniform(0, 1, (2, 1, 9, 9)), requires_grad=True)
    # keep probe points safely inside cells: away from integer lattice crossings
    base = rng.uniform(-0.82, 0.82, (2, 7, 7, 2))
    grid = Tensor(base, requires_grad=True)

    def f_sample():
        return ad.mean(ad.grid_sample(img, grid) ** 2)

    results.append(SuiteResult("bilinear sampler (image and grid)", ad.grad_check(
        f_sample, [("image", img), ("grid", grid)], step=1e-4, tol=1e-3,
        max_probes_per_param=probes, seed=seed,
    )))

    n = 3
    theta = np.concatenate([
        rng.uniform(-0.15, 0.15, (2, 2 * n * n)),
        rng.uniform(-0.3, 0.3, (2, 1)),
        np.exp(rng.uniform(-0.2, 0.2, (2, 1))),
        rng.uniform(-0.2, 0.2, (2, 2)),
    ], axis=1)
    params = Tensor(theta, requires_grad=True)

    def f_warp():
        g = ad.warp_grid(params, n, 9, 9, 1e-6)
        return ad.mean(ad.grid_sample(img, g) ** 2)

    results.append(SuiteResult("warp grid through sampler", ad.grad_check(
        f_warp, [("params", params), ("image", img)], step=1e-4, tol=1e-3,
        max_probes_per_param=probes, seed=seed,
    )))
    return results


def run_suites(which: str = "all", seed: int = 0) -> tuple[list[SuiteResult], bool]:
    results: list[SuiteResult] = []
    if which in ("all", "losses"):
        results.extend(losses_grad_suite(seed))
    if which in ("all", "geometry"):
        results.extend(geometry_grad_suite(seed))
    if not results:
        raise ValueError(f"unknown suite {which!r} (use all, losses, or geometry)")
    return results, all(r.report.passed for r in results)
