"""
Tests for the directional operators, the Kipriyanov operator and its constants.
"""
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import gamma

from conftest import relative_l2
from errors import ArgumentError, PreconditionError
from frac1d import GridFn, IntervalGrid, marchaud_deriv_left, marchaud_trunc_left, rl_integral_left
from kipriyanov import (
    DirWeight,
    RayMesh,
    accretivity_check,
    accretivity_constant,
    dir_derivative_left,
    dir_integral_left,
    dir_integral_right,
    dir_integral_weighted,
    dir_norm_bound_audit,
    kernel_identity_check,
    kernel_K,
    kernel_K_integral,
    kipriyanov_apply,
    kipriyanov_constants,
    lipschitz_audit,
    mapping_smoke_check,
    psi_plus,
    psi_minus,
    representation_approximant,
    representation_study,
)
from schemas import FracParams, Side


@pytest.fixture
def disk():
    """Unit disk centered at (1, 0), seen from the origin."""
    return RayMesh.ball(2, M=256, n_directions=8)


def test_ball_direction_weights():
    for dim, measure in ((1, 1.0), (2, math.pi), (3, 2.0 * math.pi)):
        mesh = RayMesh.ball(dim, M=16, n_directions=4)
        assert mesh.dchi.sum() == pytest.approx(measure, abs=1e-8)
        assert_allclose(np.linalg.norm(mesh.directions, axis=1), 1.0, atol=1e-12)
        assert np.all(mesh.lengths <= mesh.diameter)


def test_ball_rays_end_on_the_sphere(disk):
    ends = disk.points()[:, -1, :]
    assert_allclose(np.linalg.norm(ends - np.array([1.0, 0.0]), axis=1), 1.0, atol=1e-12)


def test_polytope_square():
    A = [[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]]
    b = [0.0, 1.0, 0.0, 1.0]
    mesh = RayMesh.polytope(A, b, [0.5, 0.0], M=32, n_directions=6)
    assert mesh.diameter == pytest.approx(math.sqrt(2.0))
    ends = mesh.points()[:, -1, :]
    on_boundary = np.isclose(ends, 0.0, atol=1e-12) | np.isclose(ends, 1.0, atol=1e-12)
    assert np.all(on_boundary.any(axis=1))


def test_polytope_rejects_vertex_origin():
    A = [[-1.0, 0.0], [1.0, 0.0], [0.0, -1.0], [0.0, 1.0]]
    b = [0.0, 1.0, 0.0, 1.0]
    with pytest.raises(ArgumentError):
        RayMesh.polytope(A, b, [0.0, 0.0], M=8)


def test_mesh_rejects_non_unit_direction():
    with pytest.raises(ArgumentError):
        RayMesh(2, [0.0, 0.0], [[1.0, 0.1]], [math.pi], [1.0], [np.linspace(0, 1, 5)], 1.0)


def test_mesh_json_keeps_geometry(tmp_path, disk):
    path = tmp_path / "mesh.json"
    disk.to_json(path)
    loaded = RayMesh.from_json(path)
    assert_array_equal(loaded.nodes, disk.nodes)
    assert_array_equal(loaded.dchi, disk.dchi)


def test_gridfn_csv_on_mesh(tmp_path, disk, rng):
    f = GridFn(disk, rng.standard_normal(disk.shape))
    path = tmp_path / "f.csv"
    f.to_csv(path)
    frame = f.to_frame()
    assert list(frame.columns) == ["ray", "node", "r", "re", "im"]
    assert_array_equal(GridFn.from_csv(path, disk).values, f.values)


def test_one_dimensional_integral_matches_frac1d(rng):
    mesh = RayMesh.ball(1, M=200)
    grid = IntervalGrid.uniform(0.0, 2.0, 200)
    values = rng.standard_normal(201)
    directional = dir_integral_left(GridFn(mesh, values[None, :]), 0.35).values[0]
    interval = rl_integral_left(GridFn(grid, values), 0.35).values
    assert_array_equal(directional, interval)


def test_directional_integral_of_constant(disk):
    """f = 1, n = 2: r^a / Gamma(2 + a); 0.752252 at r = 1 for a = 1/2."""
    out = dir_integral_left(disk.sample(lambda x: np.ones(x.shape[:-1])), 0.5).values
    r = disk.nodes
    assert_allclose(out.real, r ** 0.5 / gamma(2.5), rtol=1e-10, atol=1e-14)
    assert 1.0 / gamma(2.5) == pytest.approx(0.752252, abs=1e-6)


def test_right_integral_of_constant(disk):
    out = dir_integral_right(disk.sample(lambda x: np.ones(x.shape[:-1])), 0.5).values
    remaining = disk.lengths[:, None] - disk.nodes
    assert_allclose(out.real, remaining ** 0.5 / gamma(1.5), rtol=1e-10, atol=1e-14)


def test_weighted_integral(disk, rng):
    f = GridFn(disk, rng.standard_normal(disk.shape))
    ones = DirWeight.constant(disk, 1.0)
    zeros = DirWeight.constant(disk, 0.0)
    assert_allclose(dir_integral_weighted(f, 0.4, ones).values, dir_integral_left(f, 0.4).values)
    assert_array_equal(dir_integral_weighted(f, 0.4, zeros).values, 0.0)

    mu1 = GridFn(disk, rng.uniform(0, 1, disk.shape))
    mu2 = GridFn(disk, rng.uniform(0, 1, disk.shape))
    both = dir_integral_weighted(f, 0.4, GridFn(disk, 2.0 * mu1.values + mu2.values)).values
    split = (2.0 * dir_integral_weighted(f, 0.4, mu1).values
             + dir_integral_weighted(f, 0.4, mu2).values)
    assert_allclose(both, split, rtol=1e-10, atol=1e-12)


def test_directional_norm_bound(rng):
    mesh = RayMesh.ball(2, M=64, n_directions=6)
    for side in (Side.LEFT, Side.RIGHT):
        report = dir_norm_bound_audit(mesh, 0.5, 2.0, 20, rng, side=side)
        assert report.passed


def test_psi_plus_vanishes_on_constants_in_one_dimension():
    mesh = RayMesh.ball(1, M=128)
    params = FracParams(alpha=0.5, epsilon=0.1)
    out = psi_plus(mesh.sample(lambda x: np.ones(x.shape[:-1])), params).values[0]
    upper = mesh.nodes[0] >= params.epsilon
    assert_array_equal(out[upper], 0.0)


def test_psi_plus_closed_form_branch(disk, rng):
    params = FracParams(alpha=0.3, epsilon=0.2)
    f = GridFn(disk, rng.standard_normal(disk.shape))
    out = psi_plus(f, params).values
    r = disk.nodes
    near = (r > 0) & (r < params.epsilon)
    expected = f.values[near] * (0.2 ** -0.3 - r[near] ** -0.3) / 0.3
    assert_allclose(out[near], expected, rtol=1e-12)


def test_psi_plus_matches_frac1d_truncation():
    mesh = RayMesh.ball(1, M=300)
    grid = IntervalGrid.uniform(0.0, 2.0, 300)
    params = FracParams(alpha=0.6, epsilon=0.15)
    values = np.cos(3.0 * grid.nodes)
    trunc = marchaud_trunc_left(GridFn(grid, values), params).values
    psi = psi_plus(GridFn(mesh, values[None, :]), params).values[0]
    x = grid.nodes
    rebuilt = (values * x ** -0.6 + 0.6 * psi) / gamma(0.4)
    assert_allclose(rebuilt[1:], trunc[1:], rtol=1e-12)


def test_psi_minus_flags_short_rays(disk):
    params = FracParams(alpha=0.5, epsilon=0.5)
    out = psi_minus(disk.sample(lambda x: np.ones(x.shape[:-1])), params)
    assert out.meta["closed_form_rays"] == [int(k) for k in np.flatnonzero(disk.lengths <= 0.5)]


def test_kipriyanov_of_constant(disk):
    """f = 1 gives C_2 r^-a with C_2 = 1/Gamma(3/2) for a = 1/2."""
    out = kipriyanov_apply(disk.sample(lambda x: np.ones(x.shape[:-1])), 0.5)
    r = disk.nodes
    positive = r > 0
    assert_allclose(out.values[positive].real, r[positive] ** -0.5 / gamma(1.5), rtol=1e-12)
    assert 1.0 / gamma(1.5) == pytest.approx(1.128379, abs=1e-6)


@pytest.mark.parametrize("dim", [1, 2, 3])
def test_kipriyanov_of_constant_on_balls(dim):
    """f = 1 gives ((n-1)!/Gamma(n-a)) r^-a at every node r > 0 under default settings."""
    mesh = RayMesh.ball(dim, M=128, n_directions=4)
    out = kipriyanov_apply(mesh.sample(lambda x: np.ones(x.shape[:-1])), 0.5)
    assert out.meta["limit"]["converged"]
    r = mesh.nodes
    positive = r > 0
    exact = math.factorial(dim - 1) / gamma(dim - 0.5) * r[positive] ** -0.5
    assert_allclose(out.values[positive].real, exact, rtol=1e-12)


def test_kipriyanov_in_one_dimension_is_marchaud():
    mesh = RayMesh.ball(1, M=512)
    grid = IntervalGrid.uniform(0.0, 2.0, 512)
    values = grid.nodes ** 2 * (2.0 - grid.nodes)
    directional = kipriyanov_apply(GridFn(mesh, values[None, :]), 0.4, tol=1e-3).values[0]
    interval = marchaud_deriv_left(GridFn(grid, values), 0.4, tol=1e-3).values
    assert_allclose(directional, interval, rtol=1e-12)


def test_kipriyanov_agrees_with_directional_marchaud():
    mesh = RayMesh.ball(2, M=1024, n_directions=8)
    f = mesh.sample(lambda x: np.sum(x ** 2, axis=-1) * np.exp(-x[..., 0]))
    kip = kipriyanov_apply(f, 0.5, tol=1e-4).values
    marchaud = dir_derivative_left(f, 0.5, tol=1e-4).values
    assert relative_l2(kip, marchaud, mesh.measure_weights()) < 1e-3


def test_kernel_value():
    assert kernel_K(0.5, 0.5) == pytest.approx(math.sqrt(2.0) / math.pi, rel=1e-12)
    assert kernel_K(0.5, 0.5) == pytest.approx(0.450158, abs=1e-6)
    assert math.isinf(kernel_K(0.0, 0.5))
    with pytest.raises(ArgumentError):
        kernel_K(-1.0, 0.5)


@pytest.mark.parametrize("alpha", [0.1, 0.25, 0.5, 0.75, 0.9])
def test_kernel_normalization(alpha):
    assert abs(kernel_K_integral(alpha) - 1.0) < 1e-8


def test_kernel_positive():
    t = np.linspace(1e-4, 100.0, 10000)
    for alpha in (0.1, 0.5, 0.9):
        assert np.all(kernel_K(t, alpha) > 0)


def test_kernel_identity_along_a_ray():
    mesh = RayMesh.ball(1, M=1024)
    f = mesh.sample(lambda x: np.cos(x[..., 0]))
    report = kernel_identity_check(f, FracParams(alpha=0.5, epsilon=0.1))
    assert report.relative < 1e-3


def test_representation_approximant_of_zero(disk):
    out = representation_approximant(GridFn(disk, np.zeros(disk.shape)), FracParams(alpha=0.5, epsilon=0.1))
    assert_array_equal(out.values, 0.0)
    assert out.meta["origin_filled"]


def test_representation_origin_limit(disk):
    f = disk.sample(lambda x: 2.0 + x[..., 1])
    out = representation_approximant(f, FracParams(alpha=0.5, epsilon=0.1))
    assert_allclose(out.values[:, 0], 2.0 * 0.1 ** -0.5 / gamma(0.5))
    assert np.all(np.isfinite(out.values))


@pytest.mark.parametrize("dim", [1, 2])
def test_representation_error_decreases(dim):
    mesh = RayMesh.ball(dim, M=512, n_directions=8)
    f = mesh.sample(lambda x: np.exp(-np.sum((x - 0.7) ** 2, axis=-1)))
    report = representation_study(f, 0.5, [2.0 ** -k for k in range(2, 6)])
    assert report.monotone
    assert report.passed
    assert all(math.isfinite(v) for v in report.far_part + report.near_part + report.short_part)


def test_accretivity_constant_monotone():
    mesh = RayMesh.ball(1, M=8, radius=0.5)
    rho = DirWeight.constant(mesh)
    value = accretivity_constant(0.5, rho, 1.0, 1)
    assert value == pytest.approx(1.0 / math.sqrt(math.pi), rel=1e-12)
    assert value == pytest.approx(0.564190, abs=1e-6)
    assert accretivity_constant(0.5, rho, 2.0, 1) == pytest.approx(value * 2.0 ** -0.5)


def test_accretivity_general_formula():
    mesh = RayMesh.ball(2, M=16, n_directions=4)
    flat = DirWeight(mesh, np.ones(mesh.shape), lam=0.8, M=0.0, monotone=False)
    monotone = DirWeight.constant(mesh)
    assert accretivity_constant(0.5, flat, 2.0, 2) == pytest.approx(accretivity_constant(0.5, monotone, 2.0, 2))

    rough = DirWeight(mesh, np.ones(mesh.shape), lam=0.4, M=1.0)
    with pytest.raises(PreconditionError):
        accretivity_constant(0.5, rough, 2.0, 2)

    steep = DirWeight(mesh, np.ones(mesh.shape), lam=0.6, M=50.0)
    constants = kipriyanov_constants(0.5, steep, 2.0, 2)
    assert constants.C_alpha_rho < 0
    assert not constants.coercive


def test_kipriyanov_constants(disk):
    constants = kipriyanov_constants(0.5, DirWeight.constant(disk), disk.diameter, 2)
    assert constants.C_n_alpha == pytest.approx(1.0 / gamma(1.5))
    assert constants.C_alpha_d == pytest.approx(2.0 ** 0.5 / gamma(1.5))
    assert constants.coercive


def test_accretivity_holds_on_disk_suite(disk):
    def bubble(x):
        return 1.0 - np.sum((x - np.array([1.0, 0.0])) ** 2, axis=-1)

    suite = [
        disk.sample(bubble),
        disk.sample(lambda x: bubble(x) * x[..., 1]),
        disk.sample(lambda x: bubble(x) * np.exp(x[..., 0])),
    ]
    report = accretivity_check(suite, 0.5, DirWeight.constant(disk))
    assert report.passed
    assert report.min_ratio > report.constant


def test_accretivity_check_rejects_zero_function(disk):
    with pytest.raises(PreconditionError):
        accretivity_check([GridFn(disk, np.zeros(disk.shape))], 0.5, DirWeight.constant(disk))


def test_mapping_smoke_check(disk):
    suite = [disk.sample(lambda x: 1.0 - np.sum((x - np.array([1.0, 0.0])) ** 2, axis=-1))]
    report = mapping_smoke_check(suite, 0.5, 1.5)
    assert report.passed


def test_lipschitz_audit(disk, rng):
    rho = DirWeight.from_function(disk, lambda x: 1.0 + np.linalg.norm(x, axis=-1), lam=1.0, M=1.0)
    report = lipschitz_audit(rho, rng)
    assert report.passed
    assert report.max_ratio <= 1.0 + 1e-12
