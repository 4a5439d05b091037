import numpy as np
import pytest

from glyphforge import autodiff as ad
from glyphforge.geometry import (
    SamplingGrid,
    TpsSolveError,
    WarpParams,
    base_grid,
    bilinear_sample,
    build_grid,
    control_points,
    identity_params,
    solve_tps,
    tps_apply,
)
from glyphforge.imagecore import Image


def test_identity_params_layout():
    params = identity_params(4)
    vec = params.flatten()
    assert vec.shape == (36,)
    assert np.array_equal(vec[:32], np.zeros(32))
    assert np.array_equal(vec[32:], [0.0, 1.0, 0.0, 0.0])


def test_flatten_unflatten_roundtrip():
    rng = np.random.default_rng(0)
    params = WarpParams(rng.uniform(-0.2, 0.2, (3, 3, 2)), 0.3, 1.1, -0.05, 0.2)
    back = WarpParams.from_vector(params.flatten(), 3)
    assert np.array_equal(back.flatten(), params.flatten())


def test_warp_params_validation():
    with pytest.raises(ValueError):
        WarpParams(np.zeros((1, 1, 2)))
    with pytest.raises(ValueError):
        WarpParams(np.full((2, 2, 2), np.nan))
    with pytest.raises(ValueError):
        WarpParams.from_vector(np.zeros(10), 2)


def test_tps_interpolates_identity():
    ctrl = control_points(3)
    coef = solve_tps(ctrl, ctrl, 0.0)
    assert np.abs(coef.weights).max() <= 1e-10
    assert np.allclose(coef.affine, [[0, 0], [1, 0], [0, 1]], atol=1e-10)


def test_tps_uniform_translation_is_affine():
    ctrl = control_points(4)
    coef = solve_tps(ctrl, ctrl + np.array([0.1, 0.0]), 0.0)
    assert np.abs(coef.weights).max() <= 1e-8
    assert np.allclose(coef.affine[0], [0.1, 0.0], atol=1e-9)
    pts = np.random.default_rng(0).uniform(-1, 1, (50, 2))
    assert np.allclose(tps_apply(coef, pts), pts + [0.1, 0.0], atol=1e-8)


def test_tps_exactness_randomized():
    # oracle: direct evaluation of the fitted interpolant at the sources
    rng = np.random.default_rng(7)
    ctrl = control_points(4)
    for _ in range(100):
        dst = ctrl + rng.uniform(-0.2, 0.2, ctrl.shape)
        coef = solve_tps(ctrl, dst, 0.0)
        got = tps_apply(coef, ctrl)
        assert np.abs(got - dst).max() <= 1e-6


def test_tps_side_conditions():
    rng = np.random.default_rng(1)
    ctrl = control_points(3)
    dst = ctrl + rng.uniform(-0.15, 0.15, ctrl.shape)
    coef = solve_tps(ctrl, dst, 0.0)
    for d in range(2):
        w = coef.weights[:, d]
        assert abs(w.sum()) <= 1e-9
        assert abs((w * ctrl[:, 0]).sum()) <= 1e-9
        assert abs((w * ctrl[:, 1]).sum()) <= 1e-9


def test_tps_degenerate_layout_raises():
    src = np.zeros((9, 2))  # all control points coincide
    with pytest.raises(TpsSolveError):
        solve_tps(src, src + 0.1, 0.0)


def test_build_grid_identity():
    grid = build_grid(identity_params(4), 16, 16)
    assert not grid.tps_failed
    assert np.abs(grid.coords - base_grid(16, 16)).max() <= 1e-9


def test_build_grid_pure_shift():
    params = WarpParams(np.zeros((4, 4, 2)), 0.0, 1.0, 0.5, 0.0)
    grid = build_grid(params, 8, 8)
    expect = base_grid(8, 8).copy()
    expect[..., 0] += 0.5
    assert np.abs(grid.coords - expect).max() <= 1e-9


def test_build_grid_rotation_oracle():
    # closed form: rotate every base coordinate by the same matrix
    angle = np.pi / 2
    params = WarpParams(np.zeros((4, 4, 2)), angle, 1.0, 0.0, 0.0)
    grid = build_grid(params, 10, 12)
    base = base_grid(10, 12)
    c, s = np.cos(angle), np.sin(angle)
    expect = np.stack(
        [c * base[..., 0] - s * base[..., 1], s * base[..., 0] + c * base[..., 1]], axis=2
    )
    assert np.abs(grid.coords - expect).max() <= 1e-6


def test_build_grid_zero_offsets_equals_affine_only():
    rng = np.random.default_rng(5)
    params = WarpParams(np.zeros((4, 4, 2)), 0.3, 1.05, 0.1, -0.2)
    grid = build_grid(params, 9, 9)
    base = base_grid(9, 9)
    c, s = np.cos(0.3), np.sin(0.3)
    expect = np.stack(
        [1.05 * (c * base[..., 0] - s * base[..., 1]) + 0.1,
         1.05 * (s * base[..., 0] + c * base[..., 1]) - 0.2], axis=2
    )
    assert np.abs(grid.coords - expect).max() <= 1e-8


def test_build_grid_identity_affine_equals_pure_tps():
    rng = np.random.default_rng(6)
    offsets = rng.uniform(-0.15, 0.15, (4, 4, 2))
    grid = build_grid(WarpParams(offsets), 11, 11, regularization=0.0)
    ctrl = control_points(4)
    coef = solve_tps(ctrl, ctrl + offsets.reshape(-1, 2), 0.0)
    expect = tps_apply(coef, base_grid(11, 11).reshape(-1, 2)).reshape(11, 11, 2)
    assert np.abs(grid.coords - expect).max() <= 1e-9


def test_bilinear_exact_at_pixel_centers():
    rng = np.random.default_rng(2)
    img = Image(rng.uniform(0, 1, (5, 7)))
    grid = SamplingGrid(base_grid(5, 7))
    out = bilinear_sample(img, grid)
    assert np.abs(out.data - img.data).max() <= 1e-12


def test_bilinear_midpoint():
    img = Image(np.array([[0.0, 1.0]]))
    grid = SamplingGrid(np.array([[[0.0, 0.0]]]))  # u=0 is halfway between the pixels
    out = bilinear_sample(img, grid)
    assert out.data[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_bilinear_border_fill_and_clamp():
    img = Image(np.array([[0.0, 0.0], [0.0, 0.0]]))
    far = SamplingGrid(np.full((2, 2, 2), 5.0))
    assert np.allclose(bilinear_sample(img, far, border="fill", fill_value=1.0).data, 1.0)
    assert np.allclose(bilinear_sample(img, far, border="clamp").data, 0.0)


def test_identity_warp_is_noop_100_images():
    rng = np.random.default_rng(9)
    params = identity_params(4)
    grid = build_grid(params, 16, 16)
    for _ in range(100):
        img = Image(rng.uniform(0, 1, (16, 16)))
        out = bilinear_sample(img, grid)
        assert np.abs(out.data - img.data).max() <= 1e-6


def test_sampler_jacobian_matches_central_differences():
    rng = np.random.default_rng(11)
    img = ad.Tensor(rng.uniform(0, 1, (1, 1, 8, 8)), requires_grad=True)
    grid = ad.Tensor(rng.uniform(-0.8, 0.8, (1, 6, 6, 2)), requires_grad=True)
    report = ad.grad_check(
        lambda: ad.mean(ad.grid_sample(img, grid) ** 2),
        [("grid", grid), ("img", img)],
        step=1e-4, tol=1e-3, max_probes_per_param=None,
    )
    assert report.passed, report.summary()


def test_tps_exactness_property_randomized_offsets():
    rng = np.random.default_rng(123)
    ctrl = control_points(3)
    for _ in range(25):
        dst = ctrl + rng.uniform(-0.2, 0.2, ctrl.shape)
        coef = solve_tps(ctrl, dst, 0.0)
        assert np.abs(tps_apply(coef, ctrl) - dst).max() <= 1e-6
