import numpy as np
import pytest

import chromaphase
from chromaphase import ComplexField, PhaseMap, RealImage, dataset, metrics, optics, tie
from chromaphase.tie import AxialDerivative, SpectralGrid
from chromaphase.util import SolverError

PITCH = chromaphase.DEFAULT_PITCH
WAVELENGTH = 550e-9
K = 2 * np.pi / WAVELENGTH


def two_shot(phase, dz):
    obj = ComplexField.from_phase(phase)
    i_plus = optics.intensity(optics.fresnel_propagate(obj, dz, WAVELENGTH))
    i_minus = optics.intensity(optics.fresnel_propagate(obj, -dz, WAVELENGTH))
    return i_plus, i_minus


def test_spectral_operators_compose(sinusoid_phase):
    lap = tie.laplacian(sinusoid_phase, PITCH)
    back = tie.inverse_laplacian(lap, eps=0.0, pitch=PITCH)
    assert np.max(np.abs(back - sinusoid_phase)) < 1e-10
    grid = SpectralGrid(64, 64, PITCH)
    gx, gy = tie.gradient(sinusoid_phase, grid)
    div = tie.divergence(gx, gy, grid)
    assert np.allclose(div, lap, rtol=0, atol=1e-9 * np.abs(lap).max())
    assert np.abs(tie.curl(gx, gy, grid)).max() < 1e-9 * np.abs(gx).max() / PITCH


def test_inverse_laplacian_output():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((32, 32))
    out = tie.inverse_laplacian(data, pitch=PITCH)
    assert abs(out.mean()) < 1e-12 * np.abs(out).max()
    image = tie.inverse_laplacian(RealImage(data, PITCH, role="derivative"))
    assert image.role == "phase"
    with pytest.raises(SolverError):
        tie.inverse_laplacian(data)
    with pytest.raises(SolverError):
        tie.inverse_laplacian(data, eps=-1.0, pitch=PITCH)


def test_pure_phase_round_trip(sinusoid_phase):
    i_plus, i_minus = two_shot(sinusoid_phase, 0.5e-6)
    didz = tie.derivative_2shot(i_plus, i_minus, 0.5e-6)
    phi = tie.solve_pure_phase(didz, 1.0, K)
    assert metrics.mae(phi.data, sinusoid_phase) < 0.02
    assert abs(phi.data.mean()) < 1e-12


def test_teague_with_constant_intensity_matches_pure_phase(sinusoid_phase):
    i_plus, i_minus = two_shot(sinusoid_phase, 0.5e-6)
    didz = tie.derivative_2shot(i_plus, i_minus, 0.5e-6)
    i0 = 0.8
    pure = tie.solve_pure_phase(didz, i0, K)
    teague = tie.solve_teague(didz, RealImage(np.full((64, 64), i0), PITCH), K)
    assert np.max(np.abs(pure.data - teague.data)) < 1e-10


def test_teague_residuals_for_constant_intensity(sinusoid_phase):
    i_plus, i_minus = two_shot(sinusoid_phase, 0.5e-6)
    didz = tie.derivative_2shot(i_plus, i_minus, 0.5e-6)
    intensity = RealImage(np.ones((64, 64)), PITCH)
    phi = tie.solve_teague(didz, intensity, K)
    residual = tie.teague_curl_residual(phi, didz, intensity, K)
    assert residual["fluxResidual"] < 1e-8
    assert residual["curlResidual"] < 1e-8


def test_solver_input_checks(sinusoid_phase):
    i_plus, i_minus = two_shot(sinusoid_phase, 0.5e-6)
    didz = tie.derivative_2shot(i_plus, i_minus, 0.5e-6)
    with pytest.raises(SolverError):
        tie.solve_pure_phase(didz, 0.0, K)
    with pytest.raises(SolverError):
        tie.solve_pure_phase(didz.scaled(1.0, "xi"), 1.0, K)
    with pytest.raises(SolverError):
        tie.solve_tie_xi(didz, i_plus)
    with pytest.raises(SolverError):
        tie.solve_teague(didz, RealImage(np.zeros((64, 64)), PITCH), K)
    with pytest.raises(SolverError):
        tie.derivative_2shot(i_plus, i_minus, -1e-6)
    with pytest.raises(SolverError):
        AxialDerivative(np.zeros((16, 16)), "t")


def test_polyfit_recovers_polynomial_slope():
    rng = np.random.default_rng(1)
    a = 10 + 0.1 * rng.uniform(size=(16, 16))
    b = rng.standard_normal((16, 16)) * 1e4
    c = rng.standard_normal((16, 16)) * 1e8
    zs = np.concatenate([-2e-6 * np.arange(20, 0, -1), [0.0], 2e-6 * np.arange(1, 21)])
    stack = [RealImage(a + b * z + c * z ** 2, PITCH) for z in zs]
    didz = tie.derivative_polyfit(stack, zs, 2)
    assert didz.variable == "z"
    assert np.allclose(didz.data, b, rtol=1e-6, atol=1e-6 * np.abs(b).max())
    high = tie.derivative_polyfit(stack, zs, 20)
    assert np.allclose(high.data, b, rtol=1e-4, atol=1e-4 * np.abs(b).max())


def test_polyfit_checks():
    stack = [RealImage(np.ones((16, 16)), PITCH) for _ in range(3)]
    with pytest.raises(SolverError):
        tie.derivative_polyfit(stack, [-1e-6, 0, 1e-6, 2e-6], 1)
    with pytest.raises(SolverError):
        tie.derivative_polyfit(stack, [1e-6, 1e-6, 0], 2)


def test_chromatic_derivative_is_exact_for_linear_data():
    rng = np.random.default_rng(2)
    base = 1 + 0.1 * rng.uniform(size=(16, 16))
    slope = rng.standard_normal((16, 16)) * 1e10
    lambdas = [460e-9, 550e-9, 620e-9]
    z = 2e-6
    planes = np.stack([base + slope * lam * z for lam in lambdas])
    image = RealImage(planes, PITCH)
    for two_point in (False, True):
        didxi = tie.derivative_chromatic(image, lambdas, z, normalize=False, two_point=two_point)
        assert didxi.variable == "xi"
        assert np.allclose(didxi.data, slope, rtol=1e-9, atol=1e-9 * np.abs(slope).max())


def test_chromatic_derivative_checks():
    image = RealImage(np.ones((3, 16, 16)), PITCH)
    with pytest.raises(SolverError):
        tie.derivative_chromatic(image, [450e-9, 450e-9, 600e-9], 1e-6)
    with pytest.raises(SolverError):
        tie.derivative_chromatic(image, [450e-9, 550e-9], 1e-6)
    with pytest.raises(SolverError):
        tie.derivative_chromatic(image, [450e-9, 550e-9, 630e-9], 0.0)


def test_chromatic_single_exposure_round_trip(quiet_spec, sinusoid_phase):
    phase = PhaseMap(sinusoid_phase + 0.2)
    sample = dataset.simulate_sample(phase, quiet_spec, np.random.default_rng(0))
    lambdas = tie.chromatic_lambdas(quiet_spec.channels, quiet_spec.band)
    phi = tie.solve_chromatic(sample.x, lambdas, sample.z)
    report = metrics.evaluate([phi.data], [sample.y.data])
    assert report.ms_ssim[0] > 0.8
    assert report.mae[0] < 0.1


def test_chromatic_needs_color_image():
    with pytest.raises(SolverError):
        tie.solve_chromatic(RealImage(np.ones((16, 16)), PITCH), [550e-9], 1e-6)


def test_inverse_laplacian_of_cosine():
    f = 4 / (64 * PITCH)
    x = np.arange(64) * PITCH
    g = np.broadcast_to(np.cos(2 * np.pi * f * x)[None, :], (64, 64))
    expected = -g / (4 * np.pi ** 2 * f ** 2)
    out = tie.inverse_laplacian(g, eps=0.0, pitch=PITCH)
    assert np.linalg.norm(out - expected) / np.linalg.norm(expected) < 1e-6


def test_inverse_laplacian_nulls_constants():
    assert np.allclose(tie.inverse_laplacian(np.full((16, 16), 3.0), pitch=PITCH), 0.0, atol=1e-12)
    assert not np.any(tie.inverse_laplacian(np.zeros((16, 16)), pitch=PITCH))


def test_pure_phase_is_linear(sinusoid_phase):
    i_plus, i_minus = two_shot(sinusoid_phase, 0.5e-6)
    didz = tie.derivative_2shot(i_plus, i_minus, 0.5e-6)
    once = tie.solve_pure_phase(didz, 1.0, K)
    twice = tie.solve_pure_phase(didz.scaled(2.0), 1.0, K)
    assert np.array_equal(twice.data, 2 * once.data)
    zero = tie.solve_pure_phase(didz.scaled(0.0), 1.0, K)
    assert not np.any(zero.data)


def test_teague_beats_pure_phase_on_absorbing_object(sinusoid_phase):
    # amplitude varying with the phase keeps I grad(phi) curl-free
    amplitude = 1 + 0.5 * sinusoid_phase
    obj = ComplexField.from_phase(sinusoid_phase, amplitude)
    dz = 0.5e-6
    i_plus = optics.intensity(optics.fresnel_propagate(obj, dz, WAVELENGTH))
    i_minus = optics.intensity(optics.fresnel_propagate(obj, -dz, WAVELENGTH))
    didz = tie.derivative_2shot(i_plus, i_minus, dz)
    in_focus = optics.intensity(obj)
    teague = tie.solve_teague(didz, in_focus, K)
    pure = tie.solve_pure_phase(didz, float(in_focus.data.mean()), K)
    assert metrics.mae(teague.data, sinusoid_phase) < metrics.mae(pure.data, sinusoid_phase)


def test_xi_solver_matches_teague_through_chain_rule(sinusoid_phase):
    i_plus, i_minus = two_shot(sinusoid_phase, 0.5e-6)
    didz = tie.derivative_2shot(i_plus, i_minus, 0.5e-6)
    intensity = RealImage((i_plus.data + i_minus.data) / 2, PITCH)
    # xi = lambda z, so dI/dxi = (1 / lambda) dI/dz
    via_xi = tie.solve_tie_xi(didz.scaled(1 / WAVELENGTH, "xi"), intensity)
    via_z = tie.solve_teague(didz, intensity, K)
    assert np.linalg.norm(via_xi.data - via_z.data) / np.linalg.norm(via_z.data) < 1e-8


def through_focus(phase, zs):
    return optics.through_focus_stack(ComplexField.from_phase(phase), zs, WAVELENGTH)


STACK_ZS = 2e-6 * np.arange(-20, 21)


def test_two_shot_agrees_with_polyfit(sinusoid_phase):
    stack = through_focus(sinusoid_phase, STACK_ZS)
    reference = tie.derivative_polyfit(stack, STACK_ZS, 20)
    two = tie.derivative_2shot(stack[21], stack[19], 2e-6)
    error = np.linalg.norm(two.data - reference.data) / np.linalg.norm(reference.data)
    assert error < 0.1


def test_polyfit_is_less_noise_sensitive_than_two_shot(sinusoid_phase):
    stack = [image.data for image in through_focus(sinusoid_phase, STACK_ZS)]
    fitted_errors = []
    shot_errors = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        noisy = [RealImage(plane + 0.01 * rng.standard_normal(plane.shape), PITCH) for plane in stack]
        fitted = tie.solve_pure_phase(tie.derivative_polyfit(noisy, STACK_ZS, 20), 1.0, K)
        shot = tie.solve_pure_phase(tie.derivative_2shot(noisy[21], noisy[19], 2e-6), 1.0, K)
        fitted_errors.append(metrics.mae(fitted.data, sinusoid_phase))
        shot_errors.append(metrics.mae(shot.data, sinusoid_phase))
    assert np.mean(fitted_errors) < np.mean(shot_errors)
    assert np.sum(np.less_equal(fitted_errors, shot_errors)) > 10


def test_polyfit_needs_two_defocus_values():
    image = RealImage(np.ones((16, 16)), PITCH)
    with pytest.raises(SolverError):
        tie.derivative_polyfit([image], [0.0], 0)
    with pytest.raises(SolverError):
        tie.derivative_polyfit([image, image], [1e-6, 1e-6], 0)
    flat = tie.derivative_polyfit([image, image], [-1e-6, 1e-6], 0)
    assert not np.any(flat.data)
