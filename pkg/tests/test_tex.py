import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy.constants import Stefan_Boltzmann, Wien
from scipy.optimize import minimize_scalar

from dcchi.core import SceneTeX, WavelengthGrid
from dcchi.tex import (
    CONSTANTS,
    AtmosphereSpec,
    BracketError,
    MixingMatrix,
    NonContractiveError,
    atmospheric_transfer,
    band_planck,
    band_planck_grid,
    direct_emission,
    environmental_emission,
    invert_temperature,
    planck_band_torch,
    planck_radiance,
    scene_signal_fixed_point,
    tex_synthesize,
    tex_synthesize_torch,
)

GRID = WavelengthGrid.linspace(8000, 11500, 8)


def planck_mp(lam_nm, T):
    mpmath.mp.dps = 40
    h, c, k = (mpmath.mpf(repr(v)) for v in (CONSTANTS.h, CONSTANTS.c, CONSTANTS.k))
    lam = mpmath.mpf(lam_nm) * mpmath.mpf("1e-9")
    return 2 * mpmath.pi * h * c**2 / lam**5 / mpmath.expm1(h * c / (lam * k * mpmath.mpf(T)))


# -- Planck ------------------------------------------------------------------


def test_constants_codata():
    assert CONSTANTS.h == 6.62607015e-34
    assert CONSTANTS.k == 1.380649e-23
    assert CONSTANTS.c == 299792458.0


@pytest.mark.parametrize("lam,T", [(500, 5778), (10000, 300), (3000, 1000), (250, 20000)])
def test_planck_extended_precision(lam, T):
    assert planck_radiance(lam, T) == pytest.approx(float(planck_mp(lam, T)), rel=1e-10)


def test_planck_cold_underflow():
    v = planck_radiance(500, 1.0)
    assert v == 0.0 and np.isfinite(v)


def test_planck_monotone_point():
    assert planck_radiance(500, 6000) > planck_radiance(500, 5000)


def test_planck_rejects_nonpositive():
    with pytest.raises(ValueError):
        planck_radiance(-1, 300)
    with pytest.raises(ValueError):
        planck_radiance(500, 0)


@pytest.mark.parametrize("T", [300.0, 1000.0, 5778.0])
def test_wien_displacement(T):
    res = minimize_scalar(lambda lam: -planck_radiance(lam, T), bracket=(1e5 / T, 2.9e6 / T, 1e7 / T),
                          tol=1e-12)
    peak_m = res.x * 1e-9
    assert abs(peak_m * T - Wien) / Wien <= 1e-3
    assert abs(peak_m * T - 2.8978e-3) / 2.8978e-3 <= 1e-3


@pytest.mark.parametrize("T", [300.0, 1000.0, 5778.0])
def test_stefan_boltzmann(T):
    total = band_planck(10.0, 1e6, T)
    assert abs(total / (Stefan_Boltzmann * T**4) - 1) <= 5e-3


def test_band_planck_degenerate_and_invalid():
    assert band_planck(500, 500, 5000) == 0.0
    with pytest.raises(ValueError):
        band_planck(700, 400, 5000)
    with pytest.raises(ValueError):
        band_planck(0, 400, 5000)


def test_band_planck_vs_dense_trapezoid():
    lam = np.linspace(400, 700, 1_000_001)
    ref = np.trapezoid(planck_radiance(lam, 5778), lam * 1e-9)
    assert band_planck(400, 700, 5778) == pytest.approx(ref, rel=1e-6)


def test_band_planck_vs_mpmath_quad():
    ref = mpmath.quad(lambda lam: planck_mp(lam, 300), [8000, 9000]) * mpmath.mpf("1e-9")
    assert band_planck(8000, 9000, 300) == pytest.approx(float(ref), rel=1e-8)


@given(st.floats(200, 20000), st.floats(1.01, 3), st.floats(1.01, 3), st.floats(200, 8000))
def test_band_additivity(a, r1, r2, T):
    b, c = a * r1, a * r1 * r2
    whole = band_planck(a, c, T)
    assert whole == pytest.approx(band_planck(a, b, T) + band_planck(b, c, T), rel=1e-8)


def test_band_planck_vectorised_matches_scalar():
    ts = np.array([250.0, 300.0, 1234.5])
    vec = band_planck(8000, 9000, ts)
    assert vec.shape == (3,)
    for t, v in zip(ts, vec):
        assert v == pytest.approx(band_planck(8000, 9000, t), rel=1e-9)


# -- emission terms ----------------------------------------------------------


def test_direct_emission_cases():
    band = (8000, 9000)
    ref = band_planck(*band, 300)
    assert direct_emission(0.0, 300, band) == 0.0
    assert direct_emission(1.0, 300, band) == ref
    assert direct_emission(0.5, 300, band) == 0.5 * ref
    with pytest.raises(ValueError):
        direct_emission(1.5, 300, band)


def test_environmental_emission_cases():
    assert environmental_emission(1.0, 4.0) == 0.0
    assert environmental_emission(0.0, 4.0) == 4.0
    assert environmental_emission(0.3, 10.0) == pytest.approx(7.0, rel=1e-15)
    with pytest.raises(ValueError):
        environmental_emission(0.3, -1.0)


def test_atmospheric_transfer_cases():
    S = np.array([1.0, 2.5, 7.0])
    np.testing.assert_array_equal(atmospheric_transfer(S, AtmosphereSpec(1.0, 3.0)), S)
    np.testing.assert_array_equal(atmospheric_transfer(S, AtmosphereSpec(0.0, [2.0, 3.0, 4.0])), [2.0, 3.0, 4.0])
    assert atmospheric_transfer(10.0, AtmosphereSpec(0.9, 2.0)) == pytest.approx(9.2, rel=1e-15)
    with pytest.raises(ValueError):
        AtmosphereSpec(1.1, 0.0)
    with pytest.raises(ValueError):
        AtmosphereSpec(0.5, -1.0)


# -- fixed point -------------------------------------------------------------


def test_mixing_matrix_validation():
    with pytest.raises(ValueError):
        MixingMatrix(np.array([[0.5, 0.5], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        MixingMatrix(np.array([[0.0, 0.9], [1.0, 0.0]]))


def test_fixed_point_all_emitters():
    band = (8000, 9000)
    T = np.array([280.0, 300.0, 320.0])
    S = scene_signal_fixed_point(np.ones(3), T, MixingMatrix.random(3, np.random.default_rng(0)), band)
    np.testing.assert_allclose(S, band_planck(*band, T), rtol=1e-14)


def test_fixed_point_two_object_hand_case():
    band = (8000, 9000)
    T = np.array([300.0, 320.0])
    swap = MixingMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    S = scene_signal_fixed_point(np.array([1.0, 0.5]), T, swap, band)
    b1, b2 = band_planck(*band, 300.0), band_planck(*band, 320.0)
    assert S[0] == pytest.approx(b1, rel=1e-14)
    assert S[1] == pytest.approx(0.5 * b2 + 0.5 * b1, rel=1e-14)


def test_fixed_point_non_contractive():
    swap = MixingMatrix(np.array([[0.0, 1.0], [1.0, 0.0]]))
    with pytest.raises(NonContractiveError):
        scene_signal_fixed_point(np.zeros(2), np.array([300.0, 300.0]), swap, (8000, 9000))


@given(st.integers(2, 6), st.integers(0, 2**31))
def test_fixed_point_residual_and_solvers_agree(n, seed):
    rng = np.random.default_rng(seed)
    e = rng.uniform(0.05, 1.0, n)
    T = rng.uniform(250, 400, n)
    V = MixingMatrix.random(n, rng)
    band = (8000, 9000)
    S = scene_signal_fixed_point(e, T, V, band)
    B = band_planck(*band, T)
    resid = S - (e * B + (1 - e) * (V.V @ S))
    assert np.all(S >= 0)
    assert np.max(np.abs(resid)) <= 1e-8 * np.max(np.abs(S))
    S_it = scene_signal_fixed_point(e, T, V, band, method="iterate")
    assert np.max(np.abs(S_it - S)) <= 1e-7 * np.max(np.abs(S))


# -- synthesis ---------------------------------------------------------------


def small_scene(rng, h=3, w=4, e=None):
    T = rng.uniform(280, 330, (h, w))
    em = rng.uniform(0, 1, (h, w)) if e is None else np.full((h, w), e)
    X = rng.uniform(0, 1, (h, w, GRID.count))
    return SceneTeX(T, em, X, GRID)


def test_synthesis_e_zero_is_texture(rng):
    scene = small_scene(rng, e=0.0)
    cube = tex_synthesize(scene)
    np.testing.assert_array_equal(cube.data, scene.texture.astype(np.float32))


def test_synthesis_e_one_is_planck(rng):
    scene = small_scene(rng, e=1.0)
    cube = tex_synthesize(scene, radiance_scale=0.05)
    np.testing.assert_array_equal(cube.data, (0.05 * band_planck_grid(scene.temperature, GRID)).astype(np.float32))


def test_synthesis_matches_scalar_recomposition(rng):
    scene = small_scene(rng, 2, 3)
    cube = tex_synthesize(scene, radiance_scale=0.05)
    edges = GRID.band_edges()
    for i in range(2):
        for j in range(3):
            for k in range(GRID.count):
                e, T = scene.emissivity[i, j], scene.temperature[i, j]
                want = 0.05 * direct_emission(e, T, (edges[k], edges[k + 1])) + environmental_emission(
                    e, scene.texture[i, j, k])
                assert cube.data[i, j, k] == pytest.approx(want, rel=1e-6)


def test_synthesis_band_mismatch(rng):
    scene = small_scene(rng)
    with pytest.raises(ValueError):
        tex_synthesize(scene, WavelengthGrid.linspace(8000, 11500, 3))


@given(st.integers(0, 2**31), st.floats(-2, 2), st.floats(0.1, 50))
def test_synthesis_affine_in_x_and_monotone_in_t(seed, a, dT):
    rng = np.random.default_rng(seed)
    scene = small_scene(rng, 2, 2)
    X2 = rng.uniform(0, 1, scene.texture.shape)
    b = band_planck_grid(scene.temperature, GRID) * 0.05
    e = scene.emissivity[..., None]

    def synth(X):
        return e * b + (1 - e) * X

    # affine: f(X1 + a X2) - f(X1) = a (1-e) X2
    lhs = synth(scene.texture + a * X2) - synth(scene.texture)
    np.testing.assert_allclose(lhs, a * (1 - e) * X2, atol=1e-12)
    hotter = SceneTeX(scene.temperature + dT, scene.emissivity, scene.texture, GRID)
    assert np.all(tex_synthesize(hotter).data >= tex_synthesize(scene).data)


def test_torch_synthesis_matches_numpy(rng):
    scene = small_scene(rng)
    ref = tex_synthesize(scene, radiance_scale=0.05).data
    got = tex_synthesize_torch(torch.tensor(scene.temperature), torch.tensor(scene.emissivity),
                               torch.tensor(scene.texture), GRID, 0.05).numpy()
    np.testing.assert_allclose(got, ref, rtol=1e-6)


def test_torch_planck_cold_is_finite():
    T = torch.tensor([1.0, 5.0, 300.0], dtype=torch.float64, requires_grad=True)
    out = planck_band_torch(T, GRID)
    out.sum().backward()
    assert torch.isfinite(out).all() and torch.isfinite(T.grad).all()


# -- inversion ---------------------------------------------------------------


def test_invert_5000k():
    band = (500, 600)
    assert invert_temperature(direct_emission(1.0, 5000.0, band), 1.0, band) == pytest.approx(5000.0, abs=1e-4)


def test_invert_300k_with_emissivity():
    band = (8000, 9000)
    r = direct_emission(0.7, 300.0, band)
    assert invert_temperature(r, 0.7, band) == pytest.approx(300.0, abs=1e-3)


def test_invert_out_of_bracket():
    # at millimetre wavelengths B(1 K) is representable, so there is radiance below the bracket
    band = (1e6, 2e6)
    floor = band_planck(*band, 1.0)
    assert floor > 0
    with pytest.raises(BracketError):
        invert_temperature(0.5 * floor, 1.0, band)
    with pytest.raises(BracketError):
        invert_temperature(2 * band_planck(500, 600, 1e5), 1.0, (500, 600))


@given(st.floats(50, 5000), st.floats(0.05, 1.0))
def test_invert_roundtrip_property(T, e):
    band = (8000, 9000)
    assert invert_temperature(direct_emission(e, T, band), e, band) == pytest.approx(T, abs=1e-3)
