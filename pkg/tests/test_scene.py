import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import random_scene
from splankit.scene import (
    EigenvalueError,
    GaussianComponent,
    QuadratureError,
    QuadratureSpec,
    Ray,
    RotationError,
    SceneFormatError,
    SplatScene,
    apply_world_lowpass,
    density,
    density_bruteforce,
    load_scene,
    optical_depth,
    ray_depth_closed_form,
    save_scene,
    transmittance,
)


def scalar_gaussian(x, w, mu, variances):
    """Independent evaluator for an axis-aligned component."""
    val = w
    for xi, mi, vi in zip(x, mu, variances):
        val *= np.exp(-0.5 * (xi - mi) ** 2 / vi) / np.sqrt(2 * np.pi * vi)
    return val


def single(w=1.0, mu=(0, 0, 0), lam=(1, 1, 1), R=None):
    return SplatScene([w], [mu], [np.eye(3) if R is None else R], [lam])


# --- density -----------------------------------------------------------------


def test_empty_scene_density_is_zero():
    assert density(SplatScene.empty(), [0.3, 0.1, 0.0]) == 0.0


def test_unit_gaussian_peak():
    assert density(single(), [0, 0, 0]) == pytest.approx((2 * np.pi) ** -1.5, rel=1e-14)
    assert (2 * np.pi) ** -1.5 == pytest.approx(0.063494, abs=1e-6)


def test_anisotropic_density_matches_scalar_oracle():
    sc = single(2.0, lam=(0.01, 0.04, 0.09))
    x = (0.1, 0.0, 0.0)
    expected = scalar_gaussian(x, 2.0, (0, 0, 0), (0.01, 0.04, 0.09))
    assert expected == pytest.approx(12.836945630249645, rel=1e-14)  # frozen
    assert density(sc, x) == pytest.approx(expected, rel=1e-13)


def test_normalizer_rotation_invariant(rng):
    sc = random_scene(rng, 20)
    det = np.linalg.det(sc.covariances)
    assert np.allclose(det, np.prod(sc.eigvals, axis=1), rtol=1e-9)
    assert np.allclose(sc.normalizers, ((2 * np.pi) ** 3 * det) ** -0.5, rtol=1e-9)


def test_index_matches_bruteforce(rng):
    sc = random_scene(rng, 200, spread=1.0)
    X = rng.uniform(-1.5, 1.5, (10_000, 3))
    tol = 1e-12 * float(np.sum(sc.weights * sc.normalizers))
    assert np.max(np.abs(density(sc, X) - density_bruteforce(sc, X))) <= tol


def test_bounding_boxes_contain_means(rng):
    sc = random_scene(rng, 50)
    lo, hi = sc.bounding_boxes()
    assert np.all(lo <= sc.means) and np.all(sc.means <= hi)


@given(st.integers(0, 2**31 - 1))
def test_density_invariant_under_eigenpair_permutation(seed):
    rng = np.random.default_rng(seed)
    sc = random_scene(rng, 5)
    perm = rng.permutation(3)
    sc2 = SplatScene(sc.weights, sc.means, sc.rotations[:, :, perm] * np.array([1, 1, np.linalg.det(np.eye(3)[perm])]),
                     sc.eigvals[:, perm])
    X = rng.uniform(-1, 1, (50, 3))
    assert np.allclose(density(sc2, X), density(sc, X), rtol=1e-12, atol=0)


def test_density_nonnegative(rng):
    sc = random_scene(rng, 30)
    assert np.all(density(sc, rng.uniform(-3, 3, (1000, 3))) >= 0)


# --- construction and validation ----------------------------------------------


def test_from_covariances_roundtrip(rng):
    sc = random_scene(rng, 10)
    sc2 = SplatScene.from_covariances(sc.weights, sc.means, sc.covariances)
    assert np.allclose(sc2.covariances, sc.covariances, atol=1e-15)
    assert np.allclose(np.linalg.det(sc2.rotations), 1.0)


def test_invalid_components_rejected():
    with pytest.raises(EigenvalueError):
        single(lam=(1, 0, 1))
    with pytest.raises(RotationError):
        single(R=np.eye(3)[[1, 0, 2]])
    with pytest.raises(ValueError):
        single(w=-1.0)


def test_component_accessors(rng):
    sc = random_scene(rng, 3)
    c = sc[1]
    assert isinstance(c, GaussianComponent)
    assert np.allclose(c.covariance, sc.covariances[1])
    assert c.normalizer == pytest.approx(sc.normalizers[1])


def test_ray_direction_normalized():
    r = Ray([0, 0, 0], [3, 4, 0])
    assert np.linalg.norm(r.direction) == pytest.approx(1.0, abs=1e-12)


# --- transmittance ------------------------------------------------------------


def test_empty_scene_transmittance_is_one():
    assert transmittance(SplatScene.empty(), Ray([0, 0, 0], [1, 0, 0]), 0.0, 5.0) == 1.0


def test_zero_length_interval():
    assert transmittance(single(), Ray([0, 0, 0], [1, 0, 0]), 0.3, 0.3) == 1.0


def test_centered_ray_line_integral():
    w, lam = 0.7, 0.04
    sc = single(w, lam=(lam, lam, lam))
    ray = Ray([-5, 0, 0], [1, 0, 0])
    expected = w * (2 * np.pi * lam) ** -1.5 * np.sqrt(2 * np.pi * lam)
    assert optical_depth(sc, ray, 0.0, 10.0) == pytest.approx(expected, rel=1e-10)
    assert transmittance(sc, ray, 0.0, 10.0) == pytest.approx(np.exp(-expected), rel=1e-10)


def test_quadrature_matches_closed_form(rng):
    sc = random_scene(rng, 40, std=(0.01, 0.2))
    for _ in range(20):
        o = rng.uniform(-2, 2, 3)
        v = rng.normal(size=3)
        ray = Ray(o, v)
        a, b = sorted(rng.uniform(0, 4, 2))
        ref = ray_depth_closed_form(sc, o[None], ray.direction[None], a, b)[0]
        assert optical_depth(sc, ray, a, b) == pytest.approx(ref, rel=1e-9, abs=1e-14)


def test_transmittance_multiplicative_and_monotone(rng):
    sc = random_scene(rng, 20)
    ray = Ray([-2, 0.1, 0], [1, 0.05, 0.02])
    a, b, c = 0.0, 1.7, 4.0
    assert transmittance(sc, ray, a, c) == pytest.approx(transmittance(sc, ray, a, b) * transmittance(sc, ray, b, c), rel=1e-9)
    ts = [transmittance(sc, ray, 0.0, bb) for bb in np.linspace(0, 4, 9)]
    assert all(t2 <= t1 + 1e-15 for t1, t2 in zip(ts, ts[1:]))
    assert all(0 < t <= 1 for t in ts)


def test_quadrature_guards():
    with pytest.raises(ValueError):
        optical_depth(single(), Ray([0, 0, 0], [1, 0, 0]), 1.0, 0.0)
    with pytest.raises(ValueError):
        optical_depth(single(), Ray([0, 0, 0], [1, 0, 0]), 0.0, 1.0, QuadratureSpec(nodes=1))
    tight = single(1.0, lam=(1e-8, 1e-8, 1e-8))
    with pytest.raises(QuadratureError):
        optical_depth(tight, Ray([-1, 1e-4, 0], [1, 0, 0]), 0.0, 2.0, QuadratureSpec(nodes=2, rtol=1e-15, max_depth=1))


# --- low-pass -------------------------------------------------------------------


def test_lowpass_identity(rng):
    sc = random_scene(rng, 5)
    assert np.allclose(apply_world_lowpass(sc, 0.0).covariances, sc.covariances, atol=1e-9)


def test_lowpass_isotropic_and_diagonal():
    iso = apply_world_lowpass(single(lam=(1e-4, 1e-4, 1e-4)), 1e-6)
    assert np.allclose(iso.eigvals, 1.01e-4, rtol=1e-12)
    diag = apply_world_lowpass(single(lam=(1e-4, 4e-4, 9e-4)), 1e-6)
    assert np.allclose(diag.eigvals, [1.01e-4, 4.01e-4, 9.01e-4], rtol=1e-12)


def test_lowpass_adds_isotropic_covariance(rng):
    sc = random_scene(rng, 8)
    lp = apply_world_lowpass(sc, 2e-3)
    assert np.allclose(lp.covariances, sc.covariances + 2e-3 * np.eye(3), atol=1e-14)
    assert np.array_equal(lp.weights, sc.weights)
    with pytest.raises(ValueError):
        apply_world_lowpass(sc, -1.0)


# --- files ----------------------------------------------------------------------------


@pytest.mark.parametrize("suffix", [".splat", ".bin"])
def test_save_load_roundtrip(tmp_path, rng, suffix):
    sc = random_scene(rng, 3)
    path = tmp_path / f"s{suffix}"
    save_scene(sc, path, comments={"seed": 7})
    back = load_scene(path)
    for name in ("weights", "means", "rotations", "eigvals", "colors"):
        assert np.array_equal(getattr(back, name), getattr(sc, name)), name


def test_empty_scene_roundtrip(tmp_path):
    save_scene(SplatScene.empty(), tmp_path / "e.splat")
    assert len(load_scene(tmp_path / "e.splat")) == 0


def _tamper(tmp_path, rng, fn):
    sc = random_scene(rng, 2)
    path = tmp_path / "s.splat"
    save_scene(sc, path)
    lines = path.read_text().splitlines()
    data = [i for i, ln in enumerate(lines) if ln and not ln.startswith(("#", "{"))]
    vals = lines[data[0]].split()
    fn(vals)
    lines[data[0]] = " ".join(vals)
    path.write_text("\n".join(lines) + "\n")
    return path


def test_zero_eigenvalue_file_rejected(tmp_path, rng):
    def zero(v):
        v[5] = "0"

    with pytest.raises(EigenvalueError):
        load_scene(_tamper(tmp_path, rng, zero))


def test_scrambled_rotation_file_rejected(tmp_path, rng):
    def swap(v):
        v[7:10], v[10:13] = v[10:13], v[7:10]

    with pytest.raises(RotationError):
        load_scene(_tamper(tmp_path, rng, swap))


def test_malformed_files_rejected(tmp_path):
    p = tmp_path / "bad.splat"
    p.write_text("not json\n")
    with pytest.raises(SceneFormatError):
        load_scene(p)
    p.write_text('{"format_version": 1, "count": 2, "units": "m"}\n1 2 3\n')
    with pytest.raises(SceneFormatError):
        load_scene(p)
    p.write_bytes(b"NSPLAT01\x05")
    with pytest.raises(SceneFormatError):
        load_scene(p)
