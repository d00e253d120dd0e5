"""
Tests for the operator calculus: generators, fractional powers, transforms and assemblies.
"""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from errors import ArgumentError, DomainError, PreconditionError
from frac1d import IntervalGrid
from kipriyanov import RayMesh
from opcalc import (
    GeneratorSystem,
    OpMatrix,
    balakrishnan_apply,
    balakrishnan_power,
    contraction_audit,
    direction_norm_equivalence,
    divergence_form_stencil,
    elliptic_assemble,
    energy_operator,
    generator_bridge_study,
    h1h2_verify,
    m_accretive_check,
    neg_power_bound_check,
    numerical_range_sample,
    perturbed_assemble,
    perturbed_threshold,
    semigroup,
    shift_generator,
    stencil_check,
    transform_Z,
)
from schemas import PowerSign, Provenance


def random_complex(rng, n):
    return rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))


def hermitian_pd(rng, n, low=0.5, high=5.0):
    Q, _ = np.linalg.qr(random_complex(rng, n))
    return (Q * rng.uniform(low, high, n)) @ Q.conj().T


def accretive(rng, n, floor=0.2):
    """H + K with H Hermitian, spectrum in [floor, 3], and K skew-Hermitian."""
    K = random_complex(rng, n)
    return hermitian_pd(rng, n, floor, 3.0) + 0.5 * (K - K.conj().T)


def bump(x):
    return np.sin(np.pi * x) ** 4


# ============================================================================
# OpMatrix
# ============================================================================

def test_opmatrix_validation():
    with pytest.raises(ArgumentError):
        OpMatrix(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ArgumentError):
        OpMatrix(np.eye(2), [1.0, -1.0])
    with pytest.raises(ArgumentError):
        OpMatrix(np.array([[1.0, np.nan], [0.0, 1.0]]), np.ones(2))


def test_weighted_adjoint(rng):
    A = OpMatrix(random_complex(rng, 6), rng.uniform(0.1, 2.0, 6))
    adjoint = A.adjoint()
    for _ in range(5):
        u = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        v = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        assert abs(A.inner(A @ u, v) - A.inner(u, adjoint @ v)) < 1e-12 * (1 + abs(A.inner(A @ u, v)))


def test_save_and_load(tmp_path, rng):
    A = OpMatrix(random_complex(rng, 5), rng.uniform(0.5, 1.5, 5), Provenance.POWER,
                 {"alpha": 0.5, "inner": OpMatrix.identity(np.ones(5))})
    A.save(tmp_path / "power.bin")
    loaded = OpMatrix.load(tmp_path / "power.bin")
    np.testing.assert_array_equal(loaded.entries, A.entries)
    np.testing.assert_array_equal(loaded.weights, A.weights)
    assert loaded.provenance == Provenance.POWER
    assert loaded.meta == {"alpha": 0.5}

    raw = (tmp_path / "power.bin").read_bytes()
    (tmp_path / "short.bin").write_bytes(raw[:-8])
    with pytest.raises(ArgumentError):
        OpMatrix.load(tmp_path / "short.bin")


# ============================================================================
# Accretivity diagnostics
# ============================================================================

def test_numerical_range_of_hermitian_psd(rng):
    B = random_complex(rng, 6)
    report = numerical_range_sample(OpMatrix(B @ B.conj().T, np.ones(6)), 50, rng)
    assert report.gamma_sampled >= -1e-12
    assert report.theta < 1e-6
    assert report.sectorial and report.passed


def test_numerical_range_of_imaginary_identity(rng):
    report = numerical_range_sample(OpMatrix(1j * np.eye(4), np.ones(4)), 20, rng)
    assert report.gamma_sampled == pytest.approx(0.0, abs=1e-12)
    assert report.theta == pytest.approx(math.pi / 2)
    assert not report.sectorial
    assert not report.passed


def test_numerical_range_of_jordan_block(rng):
    report = numerical_range_sample(OpMatrix([[1.0, 1.0], [0.0, 1.0]], np.ones(2)), 200, rng)
    assert report.gamma_exact == pytest.approx(0.5)
    assert report.gamma_sampled > 0


def test_m_accretive_check():
    grid = IntervalGrid.uniform(0.0, 1.0, 32)
    lambdas = [0.1, 1.0, 10.0, 100.0]
    assert m_accretive_check(OpMatrix(np.diag([0.0, 1.0, 4.0]), np.ones(3)), lambdas).passed
    assert m_accretive_check(shift_generator(grid, 1), lambdas).passed
    assert m_accretive_check(shift_generator(grid, -1), lambdas).passed
    report = m_accretive_check(OpMatrix(-np.eye(3), np.ones(3)), [2.0])
    assert not report.passed
    assert report.resolvent_norms[0] == pytest.approx(1.0)
    with pytest.raises(ArgumentError):
        m_accretive_check(OpMatrix(np.eye(2), np.ones(2)), [0.0, 1.0])


# ============================================================================
# Shift semigroup
# ============================================================================

def test_shift_generator_arguments():
    with pytest.raises(ArgumentError):
        shift_generator(IntervalGrid.from_nodes([0.0, 0.1, 0.3, 1.0]))
    with pytest.raises(ArgumentError):
        shift_generator(IntervalGrid.uniform(0.0, 1.0, 8), 0)
    with pytest.raises(ArgumentError):
        shift_generator(RayMesh.ball(2, M=8, n_directions=4), -1)


def test_shift_generator_inverse_integrates_from_far_end():
    grid = IntervalGrid.uniform(0.0, 2.0, 64)
    A = shift_generator(grid, 1)
    h = grid.h
    ones = np.ones(grid.nodes.size)
    assert_allclose(np.linalg.solve(A.entries, ones).real, h * (grid.nodes.size - np.arange(grid.nodes.size)))
    assert A.inverse_norm() <= grid.length + h


def test_semigroup_contracts():
    grid = IntervalGrid.uniform(0.0, 1.0, 64)
    times = [0.0, 0.1, 1.0, 10.0]
    assert contraction_audit(shift_generator(grid, 1), times).passed
    assert contraction_audit(shift_generator(grid, -1), times).passed
    assert contraction_audit(shift_generator(RayMesh.ball(2, M=16, n_directions=4)), times).passed


def test_semigroup_shifts_smooth_functions():
    def profile(x):
        return np.exp(-100.0 * (x - 0.3) ** 2)

    t = 0.2
    errors = []
    for M in (128, 512):
        grid = IntervalGrid.uniform(0.0, 1.0, M)
        shifted = semigroup(shift_generator(grid, 1), t) @ profile(grid.nodes)
        errors.append(np.max(np.abs(shifted - profile(grid.nodes + t))))
    assert errors[1] < 0.5 * errors[0]
    assert errors[1] < 0.08


# ============================================================================
# Fractional powers
# ============================================================================

@pytest.mark.parametrize("alpha", [0.25, 0.5, 0.75])
def test_power_of_identity(alpha):
    I = OpMatrix.identity(np.ones(5))
    assert_allclose(balakrishnan_power(I, alpha).entries, np.eye(5), atol=1e-10)
    assert_allclose(balakrishnan_power(I, alpha, PowerSign.NEGATIVE).entries, np.eye(5), atol=1e-10)


def test_square_root_of_diagonal():
    A = OpMatrix(np.diag([4.0, 9.0]), np.ones(2))
    assert_allclose(balakrishnan_power(A, 0.5).entries, np.diag([2.0, 3.0]), atol=1e-8)
    assert_allclose(balakrishnan_power(A, 0.5, PowerSign.NEGATIVE).entries, np.diag([0.5, 1.0 / 3.0]), atol=1e-8)


def test_power_laws_on_hermitian_matrices(rng):
    A = OpMatrix(hermitian_pd(rng, 8), np.ones(8))
    root = balakrishnan_power(A, 0.5).entries
    scale = np.linalg.norm(A.entries)
    assert np.linalg.norm(root @ root - A.entries) / scale < 1e-6

    product = balakrishnan_power(A, 0.3).entries @ balakrishnan_power(A, 0.4).entries
    target = balakrishnan_power(A, 0.7).entries
    assert np.linalg.norm(product - target) / np.linalg.norm(target) < 1e-6

    inverse = balakrishnan_power(A, 0.6).entries @ balakrishnan_power(A, 0.6, PowerSign.NEGATIVE).entries
    assert np.linalg.norm(inverse - np.eye(8)) / math.sqrt(8) < 1e-6


def test_power_vector_action_matches_matrix(rng):
    A = OpMatrix(accretive(rng, 6), np.ones(6))
    f = rng.standard_normal(6)
    values, error = balakrishnan_apply(A, f, 0.4)
    assert_allclose(values, balakrishnan_power(A, 0.4).entries @ f, atol=1e-10)
    assert error < 1e-8


def test_power_arguments():
    I = OpMatrix.identity(np.ones(3))
    assert_allclose(balakrishnan_apply(I, np.arange(3.0), 0.0)[0], np.arange(3.0))
    with pytest.raises(DomainError):
        balakrishnan_power(I, 1.0)
    with pytest.raises(PreconditionError):
        balakrishnan_power(OpMatrix(-np.eye(3), np.ones(3)), 0.5)
    with pytest.raises(ArgumentError):
        balakrishnan_apply(I, np.ones(4), 0.5)


def test_neg_power_bound_of_identity():
    report = neg_power_bound_check(OpMatrix.identity(np.ones(4)), 0.5)
    assert report.bound == pytest.approx(6.0)
    assert report.actual == pytest.approx(1.0, abs=1e-10)
    assert report.passed

    singular = neg_power_bound_check(OpMatrix.identity(np.ones(4)), 1.0 - 1e-9)
    assert singular.skipped and singular.notice


def test_neg_power_bound_on_random_accretive_matrices(rng):
    for alpha in (0.3, 0.5, 0.8):
        for _ in range(10):
            report = neg_power_bound_check(OpMatrix(accretive(rng, 6), np.ones(6)), alpha)
            assert report.passed, report


def test_generator_power_approaches_left_marchaud():
    report = generator_bridge_study(bump, 0.5, [32, 64, 128], direction=-1)
    assert report.monotone
    assert report.values[-1] < 0.05


def test_generator_power_approaches_right_marchaud():
    report = generator_bridge_study(bump, 0.4, [32, 64, 128], direction=1)
    assert report.monotone
    assert report.values[-1] < 0.05


# ============================================================================
# Transform and forms
# ============================================================================

def test_transform_without_perturbation_is_gram():
    J = shift_generator(IntervalGrid.uniform(0.0, 1.0, 16), 1)
    zero = OpMatrix(np.zeros((J.N, J.N)), J.weights)
    Z = transform_Z(J, OpMatrix.identity(J.weights), zero, 0.5)
    assert Z.provenance == Provenance.TRANSFORM
    assert_allclose(Z.adjoint().entries, Z.entries, atol=1e-9 * np.abs(Z.entries).max())
    assert Z.numerical_floor() >= -1e-8 * np.abs(Z.entries).max()


def test_transform_order_zero(rng):
    J = OpMatrix(accretive(rng, 5), np.ones(5))
    G = OpMatrix(hermitian_pd(rng, 5), np.ones(5))
    F = OpMatrix(random_complex(rng, 5), np.ones(5))
    Z = transform_Z(J, G, F, 0.0)
    assert_allclose(Z.entries, J.entries.conj().T @ G.entries @ J.entries + F.entries, atol=1e-10)


def test_transform_coercive_when_condition_holds(rng):
    K = random_complex(rng, 6)
    J = OpMatrix(np.eye(6) + 0.3 * (K - K.conj().T), np.ones(6))
    R = random_complex(rng, 6)
    F = OpMatrix(0.5 * R / np.linalg.norm(R, 2), np.ones(6))
    Z = transform_Z(J, OpMatrix(20.0 * np.eye(6), np.ones(6)), F, 0.5)
    audit = Z.meta["audit"]
    assert audit["condition_holds"]
    assert audit["binding"] in ("C_alpha", "C_one_minus_alpha")
    assert audit["coercivity"] > 0


def test_transform_adjoint_consistency(rng):
    weights = rng.uniform(0.2, 2.0, 6)
    K = random_complex(rng, 6)
    J = OpMatrix.identity(weights).from_similar(np.eye(6) + 0.4 * (K - K.conj().T))
    G = OpMatrix.identity(weights).from_similar(hermitian_pd(rng, 6))
    F = OpMatrix(random_complex(rng, 6), weights)
    Z = transform_Z(J, G, F, 0.3)
    adjoint = Z.adjoint()
    for _ in range(5):
        f = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        g = rng.standard_normal(6) + 1j * rng.standard_normal(6)
        lhs = Z.inner(Z @ f, g)
        assert abs(lhs - Z.inner(f, adjoint @ g)) < 1e-10 * max(1.0, abs(lhs))


def test_h1h2_with_energy_square(rng):
    E = OpMatrix(hermitian_pd(rng, 6), np.ones(6))
    report = h1h2_verify(E @ E, E, rng)
    assert report.C1 == pytest.approx(1.0, rel=1e-8)
    assert report.C2 == pytest.approx(1.0, rel=1e-8)
    assert report.probe_C2 >= report.C2 - 1e-8
    assert report.probe_C1 <= report.C1 + 1e-8
    assert report.passed


def test_h1h2_fails_on_skew_form(rng):
    K = random_complex(rng, 6)
    report = h1h2_verify(OpMatrix(K - K.conj().T, np.ones(6)), OpMatrix.identity(np.ones(6)), rng)
    assert not report.passed


# ============================================================================
# Generator systems
# ============================================================================

def test_generator_system_rejects_degenerate_points():
    with pytest.raises(PreconditionError):
        GeneratorSystem.from_directions([[1.0, 0.0], [1.0, 0.0]], M=8)
    with pytest.raises(ArgumentError):
        GeneratorSystem.from_points([[-0.5, 0.0], [0.0, -1.0]], M=8)


def test_orthonormal_frame_is_isometric(rng):
    system = GeneratorSystem.orthonormal(2, M=8)
    assert system.delta == pytest.approx(1.0)
    report = direction_norm_equivalence(system, rng=rng)
    assert report.c1 == pytest.approx(1.0)
    assert report.c2 == pytest.approx(1.0)
    assert report.energy_c1 == pytest.approx(1.0)
    assert report.energy_c2 == pytest.approx(1.0)
    assert report.passed


def test_norm_equivalence_degenerates_with_delta(rng):
    deltas, lower = [], []
    for angle in (0.5, 0.1, 0.02):
        system = GeneratorSystem.from_directions([[1.0, 0.0], [math.cos(angle), math.sin(angle)]], M=8)
        report = direction_norm_equivalence(system, rng=rng)
        assert report.passed
        assert 0 < report.energy_c1 <= report.energy_c2
        deltas.append(abs(report.delta))
        lower.append(report.c1)
    assert deltas[0] > deltas[1] > deltas[2]
    assert lower[0] > lower[1] > lower[2]


# ============================================================================
# Elliptic and perturbed assemblies
# ============================================================================

def probe(points):
    return np.prod(np.cos(0.5 * np.pi * points), axis=1)


def test_elliptic_one_dimensional_constant():
    system = GeneratorSystem.orthonormal(1, M=16)
    h = system.h
    L = elliptic_assemble(3.0, system)
    oracle = divergence_form_stencil(3.0, system)
    # rows away from the incoming face are the tridiagonal stencil
    assert_allclose(L.entries[1:], oracle.entries[1:], atol=1e-9 / h ** 2)
    assert L.entries[0, 0] == pytest.approx(3.0 / h ** 2)
    assert oracle.entries[0, 0] == pytest.approx(6.0 / h ** 2)


def test_elliptic_matches_five_point_stencil():
    system = GeneratorSystem.orthonormal(2, M=12)
    assert stencil_check(1.0, system, probe).relative < 1e-10


def test_elliptic_matches_stencil_on_every_row_for_compact_support():
    system = GeneratorSystem.orthonormal(2, M=16)
    L = elliptic_assemble(1.0, system)
    oracle = divergence_form_stencil(1.0, system)
    bump = system.sample(lambda x: np.prod(np.clip(0.36 - x ** 2, 0.0, None) ** 3, axis=1))
    scale = np.max(np.abs(oracle @ bump))
    assert_allclose(L @ bump, oracle @ bump, atol=1e-10 * scale)

    wide = system.sample(probe)
    gap = np.abs(L @ wide - oracle @ wide)
    assert gap.max() > 0.1 * np.max(np.abs(oracle @ wide))
    assert stencil_check(1.0, system, probe).relative < 1e-10


def test_elliptic_anisotropic_diagonal_coefficients():
    system = GeneratorSystem.orthonormal(2, M=12)
    assert stencil_check(np.diag([2.0, 0.5]), system, probe).relative < 1e-10


def test_elliptic_variable_coefficient_converges():
    def coefficient(points):
        return 1.0 + 0.5 * points[:, 0] ** 2 + 0.25 * points[:, 1]

    coarse = stencil_check(coefficient, GeneratorSystem.orthonormal(2, M=16), probe)
    fine = stencil_check(coefficient, GeneratorSystem.orthonormal(2, M=32), probe)
    assert fine.relative < coarse.relative
    assert fine.relative < 0.1


def test_elliptic_domain_errors():
    system = GeneratorSystem.orthonormal(2, M=8)
    with pytest.raises(DomainError):
        elliptic_assemble(-1.0, system)
    with pytest.raises(DomainError):
        elliptic_assemble(1.0 + 0.5j, system)
    with pytest.raises(DomainError):
        elliptic_assemble(np.array([[2.0, 0.5], [0.5, 1.0]]), system)
    with pytest.raises(ArgumentError):
        elliptic_assemble(np.ones((3, 3)), system)


def test_elliptic_coercive_in_generator_energy(rng):
    system = GeneratorSystem.orthonormal(2, M=8)
    report = h1h2_verify(elliptic_assemble(1.0, system), energy_operator(system), rng)
    assert report.C2 == pytest.approx(1.0, rel=1e-8)
    assert report.passed


def test_perturbed_with_zero_weight_is_elliptic():
    system = GeneratorSystem.orthonormal(1, M=16)
    L = perturbed_assemble(1.0, system, 0.0, 0.3, 0.4)
    assert_allclose(L.entries, elliptic_assemble(1.0, system).entries, atol=1e-12)
    assert np.abs(L.meta["F"].entries).max() == 0.0


def test_perturbed_order_zero_adds_multiplication():
    system = GeneratorSystem.orthonormal(1, M=16)
    weight = lambda points: 1.0 + points[:, 0]
    L = perturbed_assemble(2.0, system, weight, 0.0, 0.0)
    expected = elliptic_assemble(2.0, system).entries + np.diag(weight(system.grid_points()))
    assert_allclose(L.entries, expected, atol=1e-12)


def test_perturbed_representation(rng):
    system = GeneratorSystem.orthonormal(2, M=8)
    L = perturbed_assemble(1.0, system, lambda p: 0.5 + 0.25 * p[:, 1], 0.3, 0.4)
    rebuilt = L.meta["elliptic"] + L.meta["F"] @ L.meta["power"]
    assert np.linalg.norm(rebuilt.entries - L.entries) / np.linalg.norm(L.entries) < 1e-6
    with pytest.raises(ArgumentError):
        perturbed_assemble(1.0, GeneratorSystem.from_directions([[1.0, 1.0], [1.0, -1.0]], M=8), 1.0, 0.3, 0.4)


def test_perturbed_threshold_matches_spectrum():
    system = GeneratorSystem.orthonormal(1, M=16)
    report = perturbed_threshold(1.0, system, -2.0, 0.0, 0.0)
    smallest = np.linalg.eigvalsh(elliptic_assemble(1.0, system).entries.real)[0]
    assert report.passed
    assert report.scale == pytest.approx(2.0 / smallest, rel=1e-4)
    assert report.rho_sup == pytest.approx(2.0)
