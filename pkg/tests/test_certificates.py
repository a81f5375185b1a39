import numpy as np
import pytest

from tools.certificates import (
    SignVector,
    StabilityInputs,
    build_perturbed_certificate,
    build_static_average,
    build_static_certificate,
    check_stability_conditions,
    fejer_kernel_coefficients,
    perturbed_values,
    tune_perturbation,
    verify_certificate,
)
from tools.phase_space import Configuration, Particle, TimeGrid
from utils.errors import DomainError, SeparationError

F_C = 128


def test_fejer_kernel_peaks_at_one():
    g = fejer_kernel_coefficients(F_C)
    assert g.size == 2 * F_C + 1
    assert g.sum() == pytest.approx(1.0)
    assert np.allclose(g, g[::-1])
    assert np.all(g >= 0)


def test_single_node_certificate():
    cert = build_static_certificate([0.5], [1.0], F_C)
    assert cert.evaluate(0.5).real == pytest.approx(1.0, abs=1e-12)
    assert abs(cert.evaluate(0.5, derivative=1)) <= 1e-9
    t = np.linspace(0, 1, 4001)
    t = t[np.abs(t - 0.5) > 1e-3]
    assert np.max(np.abs(cert.evaluate(t))) < 1.0


def test_equispaced_nodes_at_minimum_separation():
    spacing = 1.87 / F_C
    nodes = 0.5 + spacing * np.array([-1.0, 0.0, 1.0])
    cert = build_static_certificate(nodes, [1.0, 1.0, 1.0], F_C)
    assert np.max(np.abs(cert.evaluate(nodes) - 1.0)) <= 1e-8
    assert np.max(np.abs(cert.evaluate(nodes, derivative=1))) <= 1e-6 * F_C
    assert np.isfinite(cert.condition_number)


def test_close_nodes_raise_separation_error():
    with pytest.raises(SeparationError) as info:
        build_static_certificate([0.5, 0.5 + 0.5 / F_C], [1.0, 1.0], F_C)
    assert info.value.min_separation == pytest.approx(0.5 / F_C)


def test_too_many_nodes_for_band():
    with pytest.raises(DomainError):
        build_static_certificate([0.1, 0.4, 0.7], [1.0, 1.0, 1.0], 5)


def test_sign_vector_requires_unit_modulus():
    with pytest.raises(DomainError):
        SignVector((1.0, 0.5))
    assert np.allclose(SignVector((1.0, -1.0, 1j)).as_array(), [1, -1, 1j])


def test_static_average_interpolates_signs(tight_triplet):
    eta = SignVector.ones(3)
    cert = build_static_average(tight_triplet, eta, f_c=F_C)
    values = cert.evaluate(tight_triplet.positions[:, 0], tight_triplet.velocities[:, 0])
    assert np.max(np.abs(values - 1.0)) <= 1e-8


def test_static_average_hits_one_at_both_ghosts(tight_triplet):
    cert = build_static_average(tight_triplet, SignVector.ones(3), f_c=F_C)
    speed = (1.87 / F_C) / 0.5
    for v in (speed, -speed):
        assert abs(cert.evaluate(0.5, v)) == pytest.approx(1.0, abs=1e-6)


def test_verify_static_average_fails_only_at_ghosts(tight_triplet):
    eta = SignVector.ones(3)
    report = verify_certificate(build_static_average(tight_triplet, eta, f_c=F_C), tight_triplet, eta)
    assert report.interpolation_ok
    assert not report.strict_ok
    assert report.n_violations >= 2
    assert {v["label"] for v in report.violations} == {"ghost"}
    assert len(report.ghost_values) == 2
    assert all(g["value"] == pytest.approx(1.0, abs=1e-6) for g in report.ghost_values)


def test_perturbed_values_keep_particle_means():
    gammas = perturbed_values(0.08, [0, 1, 2])
    mean = (gammas[-1] + gammas[0] + gammas[1]) / 3
    assert mean == pytest.approx([1.0, 1.0, 1.0])
    ghost = (gammas[-1][0] + gammas[0][1] + gammas[1][2]) / 3
    assert ghost == pytest.approx(1 - 2 * 0.08 / 3)


def test_perturbed_zero_epsilon_is_static_average(tight_triplet):
    eta = SignVector.ones(3)
    a = build_perturbed_certificate(tight_triplet, eta, 0.0, F_C)
    b = build_static_average(tight_triplet, eta, f_c=F_C)
    xs, vs = np.linspace(0.4, 0.6, 7), np.linspace(-0.05, 0.05, 5)
    assert np.allclose(a.evaluate_grid(xs, vs), b.evaluate_grid(xs, vs))


def test_perturbed_certificate_breaks_ghosts(tight_triplet):
    eta = SignVector.ones(3)
    cert = build_perturbed_certificate(tight_triplet, eta, 0.08, F_C)
    report = verify_certificate(cert, tight_triplet, eta, margin=0.01)
    expected = 1 - 2 * 0.08 / 3
    assert len(report.ghost_values) == 2
    for g in report.ghost_values:
        assert g["value"] == pytest.approx(expected, abs=1e-6)
    assert report.interpolation_ok
    assert report.passed


def test_evaluate_grid_matches_pointwise(tight_triplet):
    cert = build_static_average(tight_triplet, SignVector.ones(3), f_c=F_C)
    xs, vs = np.array([0.45, 0.5, 0.52]), np.array([-0.03, 0.0, 0.02])
    grid_values = cert.evaluate_grid(xs, vs)
    for i, x in enumerate(xs):
        for j, v in enumerate(vs):
            assert abs(grid_values[i, j] - cert.evaluate(x, v)) <= 1e-10


def test_verify_rejects_coarse_grid(tight_triplet):
    eta = SignVector.ones(3)
    cert = build_static_average(tight_triplet, eta, f_c=F_C)
    with pytest.raises(DomainError):
        verify_certificate(cert, tight_triplet, eta, grid_resolution=100)


def test_perturbed_needs_three_static_particles(three_static):
    moving = Configuration(three_static.particles[:2] + (Particle((0.8,), (0.1,)),), three_static.grid)
    with pytest.raises(DomainError):
        build_perturbed_certificate(moving, SignVector.ones(3), 0.08, F_C)


def test_certificate_json_layout(tight_triplet):
    data = build_static_average(tight_triplet, SignVector.ones(3), f_c=F_C).to_dict()
    assert data["K_set"] == [-1, 0, 1]
    assert [frame["k"] for frame in data["frames"]] == [-1, 0, 1]
    assert len(data["frames"][0]["c"]) == 2 * F_C + 1


@pytest.mark.parametrize("ratio, expected", [(0.999, True), (1.01, False)])
def test_stability_relation_k2(ratio, expected):
    grid = TimeGrid(2, 0.5, 1)
    cfg = Configuration((Particle((0.3,), (0.0,)), Particle((0.7,), (0.0,))), grid)
    delta_v = 1e-3
    report = check_stability_conditions(StabilityInputs(ratio * delta_v / np.sqrt(2), delta_v, 20, cfg),
                                        grid_resolution=64)
    assert report.relation_ok is expected


def test_stability_margin_bound():
    grid = TimeGrid(2, 0.5, 1)
    cfg = Configuration((Particle((0.3,), (0.0,)), Particle((0.7,), (0.0,))), grid)
    report = check_stability_conditions(StabilityInputs(1 / 2000, 1e-3, 20, cfg), grid_resolution=64)
    assert report.margin_bound == pytest.approx(1 - 0.3353 * 400 * 2.5e-7)
    assert report.separation_ok


def test_ghost_configuration_fails_stability(three_static):
    report = check_stability_conditions(StabilityInputs(1e-4, 1e-4, F_C, three_static), grid_resolution=200)
    assert report.min_condition_value == pytest.approx(0.0, abs=1e-20)
    assert not report.ghost_condition_ok


@pytest.mark.slow
def test_tune_perturbation_finds_small_epsilon(tight_triplet):
    epsilon = tune_perturbation(tight_triplet, F_C, target_margin=0.01)
    assert 0 < epsilon <= 0.2
    eta = SignVector.ones(3)
    cert = build_perturbed_certificate(tight_triplet, eta, epsilon, F_C)
    assert verify_certificate(cert, tight_triplet, eta, margin=0.01).passed


def test_stability_verdicts_only_tighten_with_grid_width():
    grid = TimeGrid(2, 0.5, 1)
    cfg = Configuration((Particle((0.3,), (0.05,)), Particle((0.45,), (-0.05,)), Particle((0.7,), (0.0,))), grid)
    reports = [check_stability_conditions(StabilityInputs(dx, 1e-2, 20, cfg), grid_resolution=64)
               for dx in np.geomspace(1e-4, 0.1, 12)]
    for flag in ("relation_ok", "ghost_condition_ok"):
        values = [getattr(r, flag) for r in reports]
        assert values == sorted(values, reverse=True)
    assert np.all(np.diff([r.margin_bound for r in reports]) < 0)
    assert len({r.min_condition_value for r in reports}) == 1


def test_static_certificate_is_bounded_by_one():
    nodes = [0.1, 0.3, 0.5, 0.75]
    cert = build_static_certificate(nodes, [1.0, -1.0, 1.0, 1.0], F_C)
    t = np.linspace(0, 1, 20001)
    assert np.max(np.abs(cert.evaluate(t))) <= 1 + 1e-6
