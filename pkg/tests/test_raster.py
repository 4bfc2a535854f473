import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splankit.raster import (
    ALPHA_MAX,
    Camera,
    FitDivergedError,
    GaussianParams,
    RasterError,
    fit_smoke_test,
    gradient_check,
    image_map,
    load_camera,
    project,
    projection_jacobian,
    random_params,
    read_pfm,
    render,
    render_backward,
    render_oracle,
    save_camera,
    write_pfm,
    write_ppm,
)
from splankit.scene import SplatScene, apply_world_lowpass, ray_depth_closed_form


def cam32(**kw):
    return Camera(32, 32, 40.0, 40.0, 16.0, 16.0, **kw)


def iso(means, std, colors, weights):
    means = np.asarray(means, float).reshape(-1, 3)
    n = len(means)
    covs = np.repeat(np.eye(3)[None], n, 0) * np.asarray(std, float).reshape(-1, 1, 1) ** 2
    return GaussianParams(means, covs, colors, weights)


def test_camera_validation_and_roundtrip(tmp_path):
    with pytest.raises(ValueError):
        Camera(0, 4, 1.0, 1.0, 0, 0)
    with pytest.raises(ValueError):
        Camera(4, 4, -1.0, 1.0, 0, 0)
    with pytest.raises(ValueError):
        Camera(4, 4, 1.0, 1.0, 0, 0, z_near=1.0, z_far=0.5)
    with pytest.raises(ValueError):
        Camera(4, 4, 1.0, 1.0, 0, 0, R_cw=np.diag([1.0, 1.0, -1.0]))
    cam = Camera.look_at([1, 2, 3], [0, 0, 0], 20, 10)
    save_camera(cam, tmp_path / "c.json")
    back = load_camera(tmp_path / "c.json")
    assert back.to_dict() == cam.to_dict()
    # the target projects to the principal point
    t = cam.R_cw @ np.zeros(3) + cam.d_cw
    assert np.allclose(image_map(cam, t)[:2], [10.5, 5.5])


# --- projection -----------------------------------------------------------------------------------


def test_on_axis_projection():
    cam = Camera(64, 48, 50.0, 70.0, 31.5, 23.5)
    z, lam = 2.0, 0.01
    pg = project(iso([0, 0, z], np.sqrt(lam), [1, 1, 1], [1.0]), cam, 0)
    assert np.allclose(pg.mean2, [32.0, 24.0])
    assert np.allclose(pg.cov2, np.diag([50.0**2 * lam / z**2, 70.0**2 * lam / z**2]), rtol=1e-12)
    assert pg.depth == z


def test_behind_camera_culled():
    cam = cam32()
    assert project(iso([0, 0, -1.0], 0.1, [1, 1, 1], [1.0]), cam, 0) is None
    assert project(iso([0, 0, 25.0], 0.1, [1, 1, 1], [1.0]), cam, 0) is None
    out = render(iso([0, 0, -1.0], 0.1, [1, 1, 1], [1.0]), cam)
    assert np.all(out.transmittance == 1)


def test_projection_jacobian_matches_fd(rng):
    cam = Camera(64, 64, 55.0, 65.0, 30.0, 33.0)
    t = rng.uniform([-0.5, -0.5, 0.5], [0.5, 0.5, 3.0], (1000, 3))
    J = projection_jacobian(cam, t)
    h = 1e-6
    for c in range(3):
        e = np.zeros(3)
        e[c] = h
        fd = (image_map(cam, t + e) - image_map(cam, t - e)) / (2 * h)
        an = J[:, :, c]
        assert np.all(np.abs(fd - an) <= 1e-6 * np.maximum(np.abs(an), 1.0))


# --- forward ----------------------------------------------------------------------------------------


def test_empty_scene_black():
    out = render(SplatScene.empty(), cam32())
    assert np.all(out.color == 0) and np.all(out.depth == 0) and np.all(out.transmittance == 1)


def test_opaque_single_gaussian_center_pixel():
    cam = Camera(33, 33, 40.0, 40.0, 16.0, 16.0)
    z = 1.5
    out = render(iso([0, 0, z], 0.05, [[0.2, 0.4, 0.6]], [1.0]), cam)
    # alpha saturates at the clamp, so the single compositing term is ALPHA_MAX * value
    assert out.depth[16, 16] == pytest.approx(ALPHA_MAX * z, abs=1e-12)
    assert np.allclose(out.color[16, 16], ALPHA_MAX * np.array([0.2, 0.4, 0.6]), atol=1e-12)
    assert out.transmittance[16, 16] == pytest.approx(1 - ALPHA_MAX)


def test_two_stacked_gaussians_hand_composite():
    cam = Camera(33, 33, 40.0, 40.0, 16.0, 16.0)
    z1, z2, s = 1.0, 2.0, 0.05
    c1, c2 = np.array([1.0, 0, 0]), np.array([0, 0, 1.0])
    p = iso([[0, 0, z2], [0, 0, z1]], s, [c2, c1], [1.0, 1.0])
    n1 = project(p, cam, 1).ntilde
    n2 = project(p, cam, 0).ntilde
    p.weights[:] = [0.3 / n2, 0.5 / n1]
    out = render(p, cam)
    a1, a2 = 0.5, 0.3
    assert np.allclose(out.color[16, 16], a1 * c1 + (1 - a1) * a2 * c2, atol=1e-12)
    assert out.depth[16, 16] == pytest.approx(a1 * z1 + (1 - a1) * a2 * z2, abs=1e-12)
    assert out.transmittance[16, 16] == pytest.approx((1 - a1) * (1 - a2), abs=1e-12)


def test_splat_alpha_is_column_density_at_low_opacity():
    # the marginalized kernel reproduces the line integral of the normalized density
    cam = Camera(33, 33, 80.0, 80.0, 16.0, 16.0)
    p = iso([[0.01, -0.02, 1.2]], 0.03, [[1, 1, 1]], [1e-4])
    pg = project(p, cam, 0)
    origin, dirs, _ = cam.pixel_rays()
    scene = p.to_scene()
    tau = ray_depth_closed_form(scene, np.broadcast_to(origin, dirs.shape), dirs, 0.0, 10.0)
    u = cam.pixel_coords()
    du = u - pg.mean2
    alpha = p.weights[0] * pg.ntilde * np.exp(-0.5 * np.einsum("pi,ij,pj->p", du, pg.conic, du))
    k = np.argmax(tau)
    assert alpha[k] == pytest.approx(tau[k], rel=2e-3)


@pytest.mark.xfail(strict=True, reason="splat alpha = tau vs volume 1 - exp(-tau) and the 1/255 skip rule "
                                        "leave a few percent gap at 128x128")
def test_separated_gaussians_match_volume_oracle():
    cam = Camera(128, 128, 150.0, 150.0, 64.0, 64.0)
    p = GaussianParams([[-0.15, 0, 1.0], [0.15, 0.05, 1.2]],
                       [np.diag([0.03**2, 0.02**2, 0.025**2]), np.eye(3) * 0.03**2],
                       [[1, 0, 0], [0, 1, 0]], [4e-4, 4e-4])
    out = render(p, cam)
    C, D, _ = render_oracle(p, cam, n_steps=1500)
    assert np.abs(out.color - C).max() <= 0.02 * C.max()
    assert np.abs(out.depth - D).max() <= 0.02 * D.max()


def test_oracle_transmittance_closed_form():
    cam = Camera(9, 9, 20.0, 20.0, 4.0, 4.0)
    p = iso([[0, 0, 1.0]], 0.05, [[1, 1, 1]], [0.01])
    _, _, Tf = render_oracle(p, cam, n_steps=500)
    origin, dirs, _ = cam.pixel_rays()
    tau = ray_depth_closed_form(p.to_scene(), np.broadcast_to(origin, dirs.shape), dirs, cam.z_near, 1e3)
    assert np.allclose(Tf.ravel(), np.exp(-tau), rtol=1e-6)


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_transmittance_range_and_weight_sum(seed, n):
    rng = np.random.default_rng(seed)
    p = random_params(rng, n, weight=(0.005, 0.2))
    p.colors[:] = 1.0
    out = render(p, cam32())
    assert np.all(out.transmittance > 0) and np.all(out.transmittance <= 1)
    # white colors composite to sum alpha_k T_k = 1 - T_final
    assert np.allclose(out.color[..., 0], 1 - out.transmittance, atol=1e-12)
    assert np.all(out.color <= 1 + 1e-12)


def test_render_deterministic(rng):
    p = random_params(rng, 6)
    a, b = render(p, cam32()), render(p, cam32())
    assert np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth)


def test_world_lowpass_never_raises_alpha_peak(rng):
    cam = cam32()
    for _ in range(10):
        scene = random_params(rng, 3, weight=(0.001, 0.01)).to_scene()
        blurred = apply_world_lowpass(scene, 0.02**2)
        a = GaussianParams.from_scene(scene)
        b = GaussianParams.from_scene(blurred)
        for k in range(3):
            pa, pb = project(a, cam, k), project(b, cam, k)
            assert b.weights[k] * pb.ntilde <= a.weights[k] * pa.ntilde * (1 + 1e-12)


# --- backward ------------------------------------------------------------------------------------------


def test_zero_upstream_gives_zero_gradients(rng):
    out = render(random_params(rng, 4), cam32())
    g = render_backward(out, np.zeros((32, 32, 3)), np.zeros((32, 32)))
    for arr in (g.means, g.covs, g.colors, g.weights):
        assert not np.any(arr)


def test_missing_cache():
    out = render(SplatScene.empty(), cam32())
    out.cache = None
    with pytest.raises(RasterError):
        render_backward(out, np.zeros((32, 32, 3)))


def test_color_gradient_closed_form(rng):
    p = random_params(rng, 1, weight=(0.01, 0.01))
    cam = cam32()
    out = render(p, cam)
    g = render_backward(out, np.ones((32, 32, 3)))
    # single Gaussian: alpha T = 1 - T_final and T in front is 1
    assert np.allclose(g.colors[0], np.sum(1 - out.transmittance), rtol=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_fd(seed):
    rng = np.random.default_rng(seed)
    rep = gradient_check(random_params(rng, 4), cam32(), seed=seed)
    assert rep["n_probes"] >= 48
    assert rep["max_rel_err"] <= 1e-3, rep["worst"]


# --- fitting -----------------------------------------------------------------------------------------


def two_gaussians():
    return GaussianParams([[-0.08, 0, 1.0], [0.08, 0.02, 1.1]],
                          [np.eye(3) * 0.04**2, np.diag([0.05, 0.03, 0.04]) ** 2],
                          [[0.9, 0.2, 0.1], [0.1, 0.3, 0.8]], [0.01, 0.012])


def test_fit_from_target_stays_put():
    target = two_gaussians()
    cam = cam32()
    img = render(target, cam).color
    res = fit_smoke_test([(cam, img)], target, steps=10)
    assert max(res.losses) < 1e-20
    assert np.abs(res.params.means - target.means).max() <= 1e-6
    assert np.abs(res.params.covs - target.covs).max() <= 1e-6


def test_fit_zero_lr_no_change(rng):
    target = two_gaussians()
    cam = cam32()
    img = render(target, cam).color
    init = target.copy()
    init.means += rng.normal(0, 0.01, init.means.shape)
    res = fit_smoke_test([(cam, img)], init, steps=5, lr=0.0)
    assert np.allclose(res.params.means, init.means, atol=1e-15)
    assert np.allclose(res.params.covs, init.covs, atol=1e-15)
    assert len(set(res.losses)) == 1


def test_fit_reduces_loss(rng):
    target = two_gaussians()
    cam = cam32()
    img = render(target, cam).color
    init = target.copy()
    init.means += rng.normal(0, 0.01, init.means.shape)
    res = fit_smoke_test([(cam, img)], init, steps=60)
    assert res.losses[-1] < 0.5 * res.losses[0]


def test_fit_divergence_detected(rng):
    target = two_gaussians()
    cam = cam32()
    img = render(target, cam).color
    init = target.copy()
    init.means += 0.01
    with pytest.raises(FitDivergedError):
        fit_smoke_test([(cam, img)], init, steps=50, lr={"colors": 1e6})
    with pytest.raises(ValueError):
        fit_smoke_test([], init)


# --- image files --------------------------------------------------------------------------------------------


def test_pfm_roundtrip(tmp_path, rng):
    for img in (rng.random((5, 7, 3)), rng.random((4, 6))):
        write_pfm(tmp_path / "x.pfm", img)
        back = read_pfm(tmp_path / "x.pfm")
        assert back.shape == img.shape and np.allclose(back, img.astype(np.float32))


def test_ppm_header(tmp_path, rng):
    write_ppm(tmp_path / "x.ppm", rng.random((3, 4, 3)), comment="seed: 1")
    data = (tmp_path / "x.ppm").read_bytes()
    assert data.startswith(b"P6\n# seed: 1\n4 3\n255\n") and len(data) == len(b"P6\n# seed: 1\n4 3\n255\n") + 36
