"""
Tests for Jordan systems, operator functions and the series solver.
"""
import math

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import expm

from errors import ArgumentError, DivergenceError, DomainError, PreconditionError, SeriesOverflowError
from opcalc import OpMatrix
from spectral import (
    CauchyProblem,
    GrowthCertificate,
    OperatorFunction,
    H_j,
    biorthogonal_construct,
    block_A_nu,
    decade_partition,
    expm_oracle,
    growth_check,
    jordan_decompose,
    power_symbol,
    residual_check,
    sector_check,
    series_H,
    solve_cauchy,
    uniqueness_diagnostic,
)


IDENTITY_SYMBOL = OperatorFunction({1: 1.0})


def unitary(rng, n):
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
    return Q


def jordan_matrix(blocks):
    """Upper bidiagonal J from (eigenvalue, size) pairs."""
    size = sum(length for _, length in blocks)
    J = np.zeros((size, size), dtype=complex)
    start = 0
    for lam, length in blocks:
        for i in range(length):
            J[start + i, start + i] = lam
            if i + 1 < length:
                J[start + i, start + i + 1] = 1.0
        start += length
    return J


def similar_to(J, V, weights=None):
    weights = np.ones(J.shape[0]) if weights is None else weights
    return OpMatrix(V @ J @ np.linalg.inv(V), weights)


def hermitian_operator(rng, eigenvalues):
    Q = unitary(rng, len(eigenvalues))
    entries = (Q * np.asarray(eigenvalues)) @ Q.conj().T
    return OpMatrix(0.5 * (entries + entries.conj().T), np.ones(len(eigenvalues)))


def contour_taylor(func, center, radius, order, points=64):
    """Taylor coefficients by the trapezoid rule on a circle."""
    angles = 2.0 * np.pi * np.arange(points) / points
    samples = func(center + radius * np.exp(1j * angles))
    return np.array([np.mean(samples * np.exp(-1j * j * angles)) / radius ** j for j in range(order + 1)])


# ============================================================================
# H_j
# ============================================================================

@pytest.mark.parametrize("symbol", [
    IDENTITY_SYMBOL,
    OperatorFunction({-1: 0.3, 0: 1.0, 2: 0.5j}),
    power_symbol(OperatorFunction({0: 1.0, 1: 2.0}), 1.5),
])
def test_H0_is_one(symbol):
    for z in (0.7, 2.0 - 1.0j, -3.0 + 0.5j):
        for t in (0.0, 0.3, 4.0):
            assert abs(H_j(symbol, z, t, 0) - 1.0) < 1e-15


def test_H1_for_identity_symbol():
    z, t = 1.5 - 0.5j, 0.7
    assert abs(H_j(IDENTITY_SYMBOL, z, t, 1) - t * z ** 2) < 1e-13


def test_H1_matches_complex_step():
    phi = OperatorFunction({-1: 0.25, 1: 1.0, 2: 0.5})
    z, t, h = 1.3, 0.4, 1e-20
    mu = 1.0 / z

    def g(zeta):
        return np.exp(-t * phi(1.0 / zeta))

    derivative = np.imag(g(mu + 1j * h)) / h
    expected = np.exp(phi(z).real * t) * derivative
    value = H_j(phi, z, t, 1)
    assert abs(value - expected) < 1e-8 * abs(expected)


@pytest.mark.parametrize("symbol", [
    OperatorFunction({-1: 0.25, 1: 1.0, 2: 0.5}),
    power_symbol(OperatorFunction({1: 1.0, 2: 0.5}), 1.5),
])
def test_higher_H_match_contour_coefficients(symbol):
    z, t = 1.3 + 0.2j, 0.6
    mu = 1.0 / z
    reference = contour_taylor(lambda zeta: np.exp(-t * symbol(1.0 / zeta)), mu, 0.3 * abs(mu), 4)
    reference *= np.exp(symbol(z) * t)
    values = series_H(symbol, z, t, 4)
    for j in range(1, 5):
        assert abs(values[j] - reference[j]) < 1e-8 * max(abs(reference[j]), 1e-12)


def test_series_H_vectorizes_over_times():
    phi = OperatorFunction({1: 1.0, 2: 0.2})
    times = np.array([0.0, 0.5, 2.0])
    table = series_H(phi, 2.0, times, 3)
    assert table.shape == (3, 4)
    for row, t in zip(table, times):
        assert_allclose(row, series_H(phi, 2.0, t, 3), rtol=1e-14)
    assert_allclose(table[0], [1.0, 0.0, 0.0, 0.0])


def test_series_H_argument_errors():
    with pytest.raises(DomainError):
        series_H(IDENTITY_SYMBOL, 0.0, 1.0, 2)
    with pytest.raises(ArgumentError):
        series_H(IDENTITY_SYMBOL, 1.0, 1.0, -1)
    with pytest.raises(ArgumentError):
        series_H(IDENTITY_SYMBOL, 1.0, -0.5, 2)


def test_series_H_falls_back_to_rescaled_expansion():
    values = series_H(IDENTITY_SYMBOL, 1e100, 1e-200, 3)
    assert np.all(np.isfinite(values))
    assert abs(values[1] - 1.0) < 1e-12


def test_series_H_overflow_raises():
    with pytest.raises(SeriesOverflowError):
        series_H(IDENTITY_SYMBOL, 1e100, 1.0, 4)


def test_power_symbol_requires_positive_power():
    with pytest.raises(DomainError):
        power_symbol(IDENTITY_SYMBOL, 0.0)


# ============================================================================
# Operator functions and their conditions
# ============================================================================

def test_operator_function_table_and_matrix(rng):
    phi = OperatorFunction.from_table({"-1": 0.5, "0": [1.0, 0.0], "2": [0.0, 0.25]})
    assert (phi.l, phi.k) == (-1, 2)
    assert OperatorFunction.from_table(phi.to_table()) == phi
    W = hermitian_operator(rng, [1.0, 2.0, 4.0])
    expected = 0.5 * np.linalg.inv(W.entries) + np.eye(3) + 0.25j * W.entries @ W.entries
    assert_allclose(phi.matrix(W).entries, expected, atol=1e-12)
    with pytest.raises(DomainError):
        phi(0.0)


def test_operator_function_validation():
    with pytest.raises(ArgumentError):
        OperatorFunction({})
    with pytest.raises(ArgumentError):
        OperatorFunction({1: np.inf})
    with pytest.raises(ArgumentError):
        OperatorFunction.from_table({"1": [1.0, 2.0, 3.0]})
    with pytest.raises(DomainError):
        OperatorFunction({1: 1.0}, theta=math.pi / 2)


def test_sector_check_positive_coefficients():
    report = sector_check(OperatorFunction({0: 1.0, 1: 2.0, 2: 0.5}), math.pi / 8)
    assert report.passed
    assert report.witness == 2
    assert abs(report.value - math.pi / 4) < 1e-15


def test_sector_check_imaginary_coefficient_fails():
    report = sector_check(OperatorFunction({0: 1.0, 1: 1j}), 0.1)
    assert not report.passed
    assert report.witness == 1


def test_sector_check_boundary_is_excluded():
    report = sector_check(OperatorFunction({0: 1.0, 2: 1.0}), math.pi / 4)
    assert report.value == math.pi / 2
    assert not report.passed


def test_sector_check_needs_an_angle():
    with pytest.raises(ArgumentError):
        sector_check(IDENTITY_SYMBOL)


def test_growth_check_identity_on_positive_ray():
    report = growth_check(IDENTITY_SYMBOL, 0.0, np.geomspace(0.1, 10.0, 20), H=1.0, rho=0.0)
    assert report.passed
    assert abs(report.fitted_C - 0.1 / math.e) < 1e-12


def test_growth_check_truncated_exponential_series():
    phi = OperatorFunction({n: 1.0 / math.factorial(2 * n) for n in range(7)}, truncated=True)
    report = growth_check(phi, 0.0, np.geomspace(0.1, 100.0, 30), H=1.0, rho=0.1)
    assert report.passed
    assert report.fitted_C > 0


def test_growth_check_negative_real_part_fails():
    report = growth_check(OperatorFunction({0: -1.0, 1: -1.0}), 0.0, [0.5, 1.0, 2.0], H=1.0, rho=0.5)
    assert not report.passed
    assert report.fitted_C < 0


def test_growth_check_sector_and_certificate():
    phi = OperatorFunction({1: 1.0}, growth=GrowthCertificate(theta0=0.3, H=1.0, rho=0.0, zeta=0.2),
                           truncated=True)
    report = growth_check(phi, None, [1.0, 2.0])
    assert report.fitted_C > 0
    assert abs(report.max_arg - 0.3) < 1e-12
    assert not report.passed
    with pytest.raises(ArgumentError):
        growth_check(IDENTITY_SYMBOL, 0.0, [1.0])
    with pytest.raises(DomainError):
        growth_check(IDENTITY_SYMBOL, 0.0, [1.0], H=-1.0, rho=0.5)


# ============================================================================
# Jordan systems
# ============================================================================

def test_diagonalizable_operator_has_trivial_chains(rng):
    W = hermitian_operator(rng, [7.0, 1.0, 3.0])
    system = jordan_decompose(W)
    assert system.chain_lengths == [1, 1, 1]
    assert system.multiplicities == [1, 1, 1]
    assert_allclose(system.eigenvalues, [1.0, 3.0, 7.0], atol=1e-12)


def test_two_by_two_jordan_block():
    W = OpMatrix(np.array([[2.0, 1.0], [0.0, 2.0]]), np.ones(2))
    system = jordan_decompose(W)
    assert system.chain_lengths == [2]
    assert system.multiplicities == [1]
    assert abs(system.eigenvalues[0] - 2.0) < 1e-12
    chain = system.chains[0]
    assert abs(chain.vectors[1, 0]) < 1e-12
    assert abs(abs(chain.vectors[0, 0]) - 1.0) < 1e-12
    assert abs(abs(chain.vectors[1, 1]) - 4.0) < 1e-12
    assert system.chain_residual(W) < 1e-12


def test_prescribed_structure_is_recovered(rng):
    J = jordan_matrix([(2.0, 3), (2.0, 1), (5.0, 2)])
    V = np.eye(6) + 0.3 * rng.standard_normal((6, 6))
    W = similar_to(J, V)
    system = jordan_decompose(W, V=V, J=J)
    assert system.chain_lengths == [3, 1, 2]
    assert system.multiplicities == [2, 1]
    assert system.chain_residual(W) < 1e-8


def test_clustered_path_recovers_short_blocks(rng):
    J = jordan_matrix([(2.0, 2), (5.0, 1), (0.5, 1)])
    V = np.eye(4) + 0.1 * rng.standard_normal((4, 4))
    system = jordan_decompose(similar_to(J, V))
    assert_allclose(np.abs(system.eigenvalues), [0.5, 2.0, 5.0], atol=1e-6)
    assert system.chain_lengths == [1, 2, 1]


def test_jordan_decompose_errors():
    J = jordan_matrix([(2.0, 2)])
    V = np.eye(2)
    W = similar_to(J, V)
    with pytest.raises(ArgumentError):
        jordan_decompose(W, V=V)
    with pytest.raises(ArgumentError):
        jordan_decompose(W, V=V, J=np.array([[2.0, 1.0], [0.5, 2.0]]))
    with pytest.raises(ArgumentError):
        jordan_decompose(W, V=V, J=np.diag([2.0, 3.0]))
    with pytest.raises(PreconditionError):
        jordan_decompose(OpMatrix(np.array([[1.0, 1.0], [1.0, 1.0]]), np.ones(2)))


def test_decade_partition():
    assert decade_partition(np.array([1.0, 2.0, 30.0, 400.0, 500.0])) == [0, 2, 3, 5]


# ============================================================================
# Biorthogonal systems
# ============================================================================

def test_hermitian_duals_are_the_eigenvectors(rng):
    W = hermitian_operator(rng, [1.0, 2.5, 4.0, 6.0])
    system = biorthogonal_construct(jordan_decompose(W), W)
    for chain in system.chains:
        e, g = chain.vectors[:, 0], chain.duals[:, 0]
        assert abs(abs(np.vdot(g, e)) - np.linalg.norm(e) * np.linalg.norm(g)) < 1e-10


def test_jordan_block_pairing_is_antidiagonal():
    W = OpMatrix(np.array([[2.0, 1.0], [0.0, 2.0]]), np.ones(2))
    system = biorthogonal_construct(jordan_decompose(W), W)
    assert_allclose(system.pairing(), [[0.0, 1.0], [1.0, 0.0]], atol=1e-12)
    B = OpMatrix(np.linalg.inv(W.entries), W.weights).adjoint()
    g0 = system.chains[0].duals[:, 0]
    assert_allclose(B.entries @ g0, 0.5 * g0, atol=1e-12)


def test_cross_eigenvalue_pairings_vanish(rng):
    for _ in range(5):
        J = jordan_matrix([(1.0 + 0.5j, 2), (3.0, 1), (3.0, 2), (6.0 - 1.0j, 1)])
        V = np.eye(6) + 0.3 * (rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6)))
        W = similar_to(J, V, weights=rng.uniform(0.5, 1.5, 6))
        system = biorthogonal_construct(jordan_decompose(W, V=V, J=J), W)
        labels = np.concatenate([[chain.q] * chain.length for chain in system.chains])
        pairing = system.pairing()
        assert np.max(np.abs(pairing[labels[:, None] != labels[None, :]])) < 1e-10
        start = 0
        for chain in system.chains:
            block = pairing[start:start + chain.length, start:start + chain.length]
            assert_allclose(np.fliplr(block), np.eye(chain.length), atol=1e-10)
            start += chain.length


def test_biorthogonal_rejects_other_space(rng):
    W = hermitian_operator(rng, [1.0, 2.0])
    system = jordan_decompose(W)
    with pytest.raises(ArgumentError):
        biorthogonal_construct(system, OpMatrix(W.entries, [1.0, 2.0]))


# ============================================================================
# Blocks and the series solver
# ============================================================================

def test_blocks_reconstruct_initial_vector(rng):
    J = jordan_matrix([(1.5, 3), (20.0, 2), (300.0, 1)])
    V = np.eye(6) + 0.2 * rng.standard_normal((6, 6))
    W = similar_to(J, V)
    system = biorthogonal_construct(jordan_decompose(W, V=V, J=J), W)
    assert system.n_blocks == 3
    f = rng.standard_normal(6) + 1j * rng.standard_normal(6)
    total = sum(block_A_nu(system, IDENTITY_SYMBOL, 0.0, f, nu) for nu in range(system.n_blocks))
    assert_allclose(total, f, atol=1e-8 * np.linalg.norm(f))
    with pytest.raises(ArgumentError):
        block_A_nu(system, IDENTITY_SYMBOL, 0.0, f, 3)


def test_single_jordan_block_matches_exponential():
    W = OpMatrix(np.array([[2.0, 1.0], [0.0, 2.0]]), np.ones(2))
    system = biorthogonal_construct(jordan_decompose(W), W)
    f = np.array([1.0, 1.0])
    t = 0.7
    block = block_A_nu(system, IDENTITY_SYMBOL, t, f, 0)
    assert_allclose(block, expm(-t * W.entries) @ f, rtol=1e-12)


def test_block_norms_are_summable(rng):
    lams = np.logspace(0.0, 2.5, 12)
    V = np.eye(12) + 0.1 * rng.standard_normal((12, 12))
    J = np.diag(lams).astype(complex)
    W = similar_to(J, V)
    problem = CauchyProblem(W, IDENTITY_SYMBOL, 1.0, rng.standard_normal(12), np.linspace(0.0, 0.5, 11))
    solution = solve_cauchy(problem, system=jordan_decompose(W, V=V, J=J), check=False)
    assert solution.truncation >= 3
    assert np.all(np.isfinite(solution.block_norms))
    assert np.all(np.diff(solution.partial_sums) >= 0)


def test_hermitian_exponential_oracle(rng):
    W = hermitian_operator(rng, np.linspace(1.0, 4.0, 8))
    f = rng.standard_normal(8) + 1j * rng.standard_normal(8)
    problem = CauchyProblem(W, IDENTITY_SYMBOL, 1.0, f, np.linspace(0.0, 2.0, 21))
    solution = solve_cauchy(problem)
    oracle = expm_oracle(problem)
    errors = np.linalg.norm(solution.values - oracle, axis=1) / np.linalg.norm(oracle, axis=1)
    assert np.max(errors) < 1e-8
    assert_allclose(solution.values[0], f, atol=1e-8 * np.linalg.norm(f))


def test_defective_exponential_oracle(rng):
    J = jordan_matrix([(2.0, 3), (3.0, 2), (5.0, 1)])
    Q = unitary(rng, 6)
    W = similar_to(J, Q)
    phi = OperatorFunction({1: 1.0, 2: 0.1})
    f = rng.standard_normal(6)
    problem = CauchyProblem(W, phi, 1.0, f, np.linspace(0.0, 1.5, 16))
    solution = solve_cauchy(problem, system=jordan_decompose(W, V=Q, J=J))
    oracle = expm_oracle(problem)
    errors = np.linalg.norm(solution.values - oracle, axis=1) / np.linalg.norm(oracle, axis=1)
    assert np.max(errors) < 1e-8


def test_solver_preconditions(rng):
    W = hermitian_operator(rng, [1.0, 2.0, 3.0])
    f = np.ones(3)
    times = np.linspace(0.0, 1.0, 5)
    with pytest.raises(PreconditionError):
        solve_cauchy(CauchyProblem(W, OperatorFunction({0: 1.0, 1: 1j}), 1.0, f, times))
    with pytest.raises(PreconditionError):
        solve_cauchy(CauchyProblem(W, OperatorFunction({1: 1.0}, truncated=True), 1.0, f, times))
    certified = OperatorFunction({0: 1.0, 1: 1.0}, growth=GrowthCertificate(0.0, 1.0, 0.1), truncated=True)
    assert np.all(np.isfinite(solve_cauchy(CauchyProblem(W, certified, 1.0, f, times)).values))


def test_block_budget_raises_divergence():
    W = OpMatrix(np.diag([1.0, 20.0, 300.0]), np.ones(3))
    problem = CauchyProblem(W, IDENTITY_SYMBOL, 1.0, np.ones(3), np.linspace(0.0, 1.0, 5))
    with pytest.raises(DivergenceError) as info:
        solve_cauchy(problem, max_blocks=1)
    assert len(info.value.partial_sums) == 1


def test_cauchy_problem_validation(rng):
    W = hermitian_operator(rng, [1.0, 2.0])
    with pytest.raises(DomainError):
        CauchyProblem(W, IDENTITY_SYMBOL, 0.5, np.ones(2), [0.0, 1.0])
    with pytest.raises(ArgumentError):
        CauchyProblem(W, IDENTITY_SYMBOL, 1.0, np.ones(2), [0.1, 1.0])
    with pytest.raises(ArgumentError):
        CauchyProblem(W, IDENTITY_SYMBOL, 1.0, np.ones(3), [0.0, 1.0])
    with pytest.raises(ArgumentError):
        expm_oracle(CauchyProblem(W, IDENTITY_SYMBOL, 2.0, np.ones(2), [0.0, 1.0]))


def test_solution_csv_export(tmp_path, rng):
    W = hermitian_operator(rng, [1.0, 2.0])
    problem = CauchyProblem(W, IDENTITY_SYMBOL, 1.0, np.array([1.0, 1j]), np.linspace(0.0, 1.0, 6))
    solution = solve_cauchy(problem)
    path = tmp_path / "result.csv"
    solution.to_csv(path)
    frame = pd.read_csv(path)
    assert list(frame.columns) == ["t", "re_0", "im_0", "re_1", "im_1"]
    assert_allclose(frame["re_1"] + 1j * frame["im_1"], solution.values[:, 1], rtol=1e-15)


# ============================================================================
# Residual and uniqueness diagnostics
# ============================================================================

def diagonal_problem(alpha, dt, horizon, f=None):
    W = OpMatrix(np.diag([1.0, 2.0]), np.ones(2))
    times = np.linspace(0.0, horizon, int(round(horizon / dt)) + 1)
    f = np.array([1.0, 1.0]) if f is None else f
    return CauchyProblem(W, IDENTITY_SYMBOL, alpha, f, times)


def test_exponential_residual_is_small():
    W = OpMatrix(np.diag([0.5, 1.0, 2.0]), np.ones(3))
    problem = CauchyProblem(W, IDENTITY_SYMBOL, 1.0, np.ones(3), np.linspace(0.0, 4.0, 4001))
    report = residual_check(solve_cauchy(problem), problem)
    assert report.max_relative_residual < 1e-4
    assert not report.tail_warning


def test_zero_initial_data_has_zero_residual():
    problem = diagonal_problem(2.0, 0.05, 10.0, f=np.zeros(2))
    report = residual_check(solve_cauchy(problem), problem)
    assert report.max_relative_residual == 0.0


@pytest.mark.parametrize("alpha", [1.0, 1.5, 2.0])
def test_residual_decreases_under_refinement(alpha):
    residuals = []
    for dt, horizon in ((0.05, 15.0), (0.0125, 20.0)):
        problem = diagonal_problem(alpha, dt, horizon)
        solution = solve_cauchy(problem)
        residuals.append(residual_check(solution, problem).max_relative_residual)
        assert solution.residual is not None
    assert residuals[1] < residuals[0]
    assert residuals[1] < 1e-2


def test_short_horizon_flags_the_tail():
    problem = diagonal_problem(2.0, 0.01, 1.0)
    report = residual_check(solve_cauchy(problem), problem)
    assert report.tail_warning


def test_uniqueness_diagnostic(rng):
    times = [0.0, 1.0]
    positive = hermitian_operator(rng, [1.0, 2.0, 5.0])
    assert uniqueness_diagnostic(CauchyProblem(positive, IDENTITY_SYMBOL, 1.0, np.ones(3), times)).accretive

    skew = OpMatrix(np.array([[0.0, 1.0], [-1.0, 0.0]]), np.ones(2))
    report = uniqueness_diagnostic(CauchyProblem(skew, IDENTITY_SYMBOL, 1.0, np.ones(2), times))
    assert not report.accretive

    E = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    sectorial = OpMatrix(3.0 * np.eye(6) + 0.3 * E / np.linalg.norm(E, 2), np.ones(6))
    phi = OperatorFunction({1: 1.0, 2: 0.2})
    report = uniqueness_diagnostic(CauchyProblem(sectorial, phi, 1.5, np.ones(6), times))
    assert report.accretive
    assert report.min_real > 0
