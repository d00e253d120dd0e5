"""
Directional fractional calculus on convex domains seen from a boundary point
Houses the ray mesh, the Kipriyanov operator and its accretivity constants

Every point of the domain is Q = P + e r with e an inward unit direction and
0 <= r <= d(e). Operators act ray by ray; for n = 1 they run the exact code
path of frac1d so the two modules agree bit for bit.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from loguru import logger
from scipy.integrate import quad
from scipy.interpolate import CubicSpline
from scipy.linalg import null_space
from scipy.spatial import HalfspaceIntersection
from scipy.spatial.distance import pdist
from scipy.special import gamma

from errors import ArgumentError, PreconditionError
from frac1d import (
    GridFn,
    check_order,
    epsilon_limit,
    integrate_left,
    integrate_right,
    limit_values,
    product_weights,
    psi_left,
    psi_right,
    row_chunks,
    trapezoid_weights,
    truncated_values,
    weighted_lp,
)
from schemas import (
    AccretivityCheckReport,
    BoundReport,
    FracParams,
    KipConstants,
    MappingReport,
    RepresentationReport,
    Side,
    StencilComparison,
)

# Measure of the inward direction set seen from a boundary point
DIRECTION_MEASURE = {1: 1.0, 2: math.pi, 3: 2.0 * math.pi}


@dataclass(frozen=True)
class RayMesh:
    """Rays P + e_k r, 0 <= r <= d(e_k), with solid-angle weights dchi_k"""
    dim: int
    P: np.ndarray
    directions: np.ndarray
    dchi: np.ndarray
    lengths: np.ndarray
    nodes: np.ndarray
    diameter: float

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float).reshape(-1)
        directions = np.asarray(self.directions, dtype=float).reshape(-1, self.dim)
        dchi = np.asarray(self.dchi, dtype=float).reshape(-1)
        lengths = np.asarray(self.lengths, dtype=float).reshape(-1)
        nodes = np.asarray(self.nodes, dtype=float)

        if self.dim < 1 or P.size != self.dim:
            raise ArgumentError("P must have one coordinate per dimension")
        K = directions.shape[0]
        if K == 0 or dchi.size != K or lengths.size != K or nodes.ndim != 2 or nodes.shape[0] != K:
            raise ArgumentError("Directions, weights, lengths and node rows must agree in number")
        if nodes.shape[1] < 2:
            raise ArgumentError("Every ray needs at least two nodes")
        if np.any(np.abs(np.linalg.norm(directions, axis=1) - 1.0) > 1e-12):
            raise ArgumentError("Directions must be unit vectors")
        if np.any(dchi <= 0):
            raise ArgumentError("Solid-angle weights must be positive")
        if np.any(lengths <= 0) or np.any(lengths > self.diameter * (1.0 + 1e-12)):
            raise ArgumentError("Ray lengths must lie in (0, diam]")
        if np.any(np.diff(nodes, axis=1) <= 0) or np.any(nodes[:, 0] != 0.0):
            raise ArgumentError("Radial nodes must start at 0 and increase")
        if np.any(np.abs(nodes[:, -1] - lengths) > 1e-12 * self.diameter):
            raise ArgumentError("Last radial node must equal the ray length")
        measure = DIRECTION_MEASURE.get(self.dim)
        if measure is not None and abs(dchi.sum() - measure) > 1e-8:
            raise ArgumentError(f"Direction weights sum to {dchi.sum():.10f}, expected {measure:.10f}")

        object.__setattr__(self, "P", P)
        object.__setattr__(self, "directions", directions)
        object.__setattr__(self, "dchi", dchi)
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def ball(cls, dim: int, M: int, n_directions: int = 16, radius: float = 1.0,
             center: Optional[Sequence[float]] = None) -> "RayMesh":
        """
        Ball with P = center - radius * x_1 on the sphere.

        Args:
            dim: 1, 2 or 3
            M: Cells per ray
            n_directions: Gauss points across the inward half-circle (n=2) or
                polar Gauss points on the hemisphere (n=3, twice as many azimuths)
            radius: Ball radius
            center: Ball center, default radius * x_1 so that P is the origin
        """
        if radius <= 0:
            raise ArgumentError("Radius must be positive")
        c = np.zeros(dim) if center is None else np.asarray(center, dtype=float)
        if center is None:
            c[0] = radius
        inward = np.zeros(dim)
        inward[0] = 1.0
        P = c - radius * inward
        directions, dchi = _inward_directions(dim, inward, n_directions)
        # chord from a boundary point: |P + t e - c| = R  <=>  t = 2R e.nu
        lengths = 2.0 * radius * (directions @ inward)
        return cls._with_nodes(dim, P, directions, dchi, lengths, M, 2.0 * radius)

    @classmethod
    def polytope(cls, A, b, P, M: int, n_directions: int = 16) -> "RayMesh":
        """
        Convex polytope {x : A x <= b} seen from P in the relative interior of one face.

        Convexity holds by construction; boundedness is certified ray by ray.
        """
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        P = np.asarray(P, dtype=float)
        dim = P.size
        if dim not in (2, 3) or A.shape != (b.size, dim):
            raise ArgumentError("Polytopes are supported for n = 2, 3 with A of shape (m, n)")

        slack = b - A @ P
        scale = max(1.0, float(np.max(np.abs(b))))
        if np.any(slack < -1e-12 * scale):
            raise ArgumentError("P lies outside the polytope")
        active = np.flatnonzero(np.abs(slack) <= 1e-12 * scale)
        if active.size != 1:
            raise ArgumentError("P must lie in the relative interior of exactly one face")

        normal = A[active[0]]
        inward = -normal / np.linalg.norm(normal)
        directions, dchi = _inward_directions(dim, inward, n_directions)

        speeds = directions @ A.T
        with np.errstate(divide="ignore", invalid="ignore"):
            hits = np.where(speeds > 1e-15, slack[None, :] / speeds, np.inf)
        hits[:, active[0]] = np.inf
        lengths = hits.min(axis=1)
        if not np.all(np.isfinite(lengths)):
            raise ArgumentError("Polytope is unbounded along some inward direction")

        along = A @ inward
        depth = min(slack[j] / along[j] for j in range(b.size) if j != active[0] and along[j] > 1e-15)
        mid = P + 0.5 * depth * inward
        halfspaces = np.hstack([A, -b[:, None]])
        vertices = HalfspaceIntersection(halfspaces, mid).intersections
        diameter = float(pdist(vertices).max())
        return cls._with_nodes(dim, P, directions, dchi, lengths, M, diameter)

    @classmethod
    def _with_nodes(cls, dim, P, directions, dchi, lengths, M, diameter) -> "RayMesh":
        if M < 1:
            raise ArgumentError("A ray needs at least one cell")
        nodes = np.stack([np.linspace(0.0, d, M + 1) for d in lengths])
        return cls(dim, P, directions, dchi, lengths, nodes, diameter)

    @property
    def shape(self):
        return self.nodes.shape

    @property
    def n_rays(self) -> int:
        return self.nodes.shape[0]

    @property
    def h(self) -> float:
        return float(np.max(np.diff(self.nodes, axis=1)))

    def measure_weights(self) -> np.ndarray:
        """Quadrature weights of dx = r^(n-1) dr dchi on every node."""
        radial = np.stack([trapezoid_weights(row) for row in self.nodes])
        return self.dchi[:, None] * radial * self.nodes ** (self.dim - 1)

    def points(self) -> np.ndarray:
        return self.P + self.nodes[..., None] * self.directions[:, None, :]

    def sample(self, func: Callable[[np.ndarray], Any]) -> GridFn:
        """Sample func(points) where points has shape (rays, nodes, dim)."""
        return GridFn(self, np.asarray(func(self.points()), dtype=complex))

    def index_frame(self) -> pd.DataFrame:
        K, N = self.shape
        return pd.DataFrame({
            "ray": np.repeat(np.arange(K), N),
            "node": np.tile(np.arange(N), K),
            "r": self.nodes.ravel(),
        })

    def to_json(self, path: Union[str, Path]) -> None:
        payload = {
            "dim": self.dim,
            "P": self.P.tolist(),
            "directions": self.directions.tolist(),
            "weights": self.dchi.tolist(),
            "lengths": self.lengths.tolist(),
            "nodes": self.nodes.tolist(),
            "diameter": self.diameter,
        }
        Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "RayMesh":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
            return cls(raw["dim"], raw["P"], raw["directions"], raw["weights"],
                       raw["lengths"], raw["nodes"], raw["diameter"])
        except (KeyError, json.JSONDecodeError) as e:
            raise ArgumentError(f"Malformed ray mesh file {path}: {e}")


def _inward_directions(dim: int, inward: np.ndarray, count: int):
    """Unit directions with e . inward > 0 and weights summing to the direction measure."""
    if count < 1:
        raise ArgumentError("Need at least one direction")
    if dim == 1:
        return inward.reshape(1, 1).copy(), np.ones(1)
    if dim == 2:
        x, w = np.polynomial.legendre.leggauss(count)
        theta = 0.5 * math.pi * x
        tangent = np.array([-inward[1], inward[0]])
        directions = np.cos(theta)[:, None] * inward + np.sin(theta)[:, None] * tangent
        return directions, 0.5 * math.pi * w
    if dim == 3:
        x, w = np.polynomial.legendre.leggauss(count)
        u, wu = 0.5 * (x + 1.0), 0.5 * w
        n_az = 2 * count
        phi = 2.0 * math.pi * (np.arange(n_az) + 0.5) / n_az
        frame = null_space(inward[None, :])
        uu, pp = np.meshgrid(u, phi, indexing="ij")
        side = np.sqrt(1.0 - uu ** 2)
        directions = (uu[..., None] * inward
                      + (side * np.cos(pp))[..., None] * frame[:, 0]
                      + (side * np.sin(pp))[..., None] * frame[:, 1])
        directions /= np.linalg.norm(directions, axis=-1, keepdims=True)
        dchi = np.outer(wu, np.full(n_az, 2.0 * math.pi / n_az))
        return directions.reshape(-1, 3), dchi.ravel()
    raise ArgumentError("Built-in direction rules exist for n = 1, 2, 3 only")


@dataclass(frozen=True)
class DirWeight:
    """Real non-negative weight rho sampled on a RayMesh, with its Lipschitz data"""
    mesh: RayMesh
    values: np.ndarray
    lam: float
    M: float
    monotone: bool = False

    def __post_init__(self):
        values = np.asarray(self.values)
        if np.iscomplexobj(values):
            if np.max(np.abs(values.imag)) > 0:
                raise ArgumentError("A directional weight must be real")
            values = values.real
        values = values.astype(float)
        if values.shape != self.mesh.shape:
            raise ArgumentError("Weight samples must match the mesh shape")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ArgumentError("A directional weight must be finite and non-negative")
        if not 0.0 < self.lam <= 1.0 or self.M < 0:
            raise ArgumentError("Need 0 < lambda <= 1 and M >= 0")
        if self.monotone and np.any(np.diff(values, axis=1) > 1e-12 * max(1.0, values.max())):
            raise ArgumentError("Weight flagged monotone but increases along a ray")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, mesh: RayMesh, func: Callable[[np.ndarray], Any], lam: float = 1.0,
                      M: float = 0.0, monotone: bool = False) -> "DirWeight":
        return cls(mesh, np.asarray(func(mesh.points())), lam, M, monotone)

    @classmethod
    def constant(cls, mesh: RayMesh, value: float = 1.0) -> "DirWeight":
        return cls(mesh, np.full(mesh.shape, float(value)), 1.0, 0.0, True)


def _mesh(f: GridFn) -> RayMesh:
    if not isinstance(f.grid, RayMesh):
        raise ArgumentError("Expected a function on a RayMesh")
    return f.grid


def _per_ray(f: GridFn, op: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
    mesh = _mesh(f)
    out = np.empty(f.values.shape, dtype=complex)
    for k in range(mesh.n_rays):
        out[k] = op(mesh.nodes[k], f.values[k])
    return out


def _radial_left(r: np.ndarray, values: np.ndarray, alpha: float, dim: int) -> np.ndarray:
    if dim == 1:
        return integrate_left(r, values, alpha)
    weight = r ** (dim - 1)
    out = integrate_left(r, values * weight, alpha)
    out[1:] /= weight[1:]
    out[0] = 0.0
    return out


def dir_integral_left(f: GridFn, alpha: float) -> GridFn:
    """
    Directional integral (1/Gamma(a)) int_0^r f(P + te)(r - t)^(a-1) (t/r)^(n-1) dt.

    Args:
        f: Function on a RayMesh
        alpha: Order in [0, 1)

    Returns:
        GridFn on the same mesh
    """
    mesh = _mesh(f)
    check_order(alpha)
    if alpha == 0.0:
        return f.with_values(f.values.copy(), operation="dir_integral_left", alpha=0.0)
    values = _per_ray(f, lambda r, v: _radial_left(r, v, alpha, mesh.dim))
    return f.with_values(values, operation="dir_integral_left", alpha=alpha)


def dir_integral_right(f: GridFn, alpha: float) -> GridFn:
    """Directional integral over (r, d(e)) with kernel (t - r)^(alpha-1) and no radial weight."""
    _mesh(f)
    check_order(alpha)
    if alpha == 0.0:
        return f.with_values(f.values.copy(), operation="dir_integral_right", alpha=0.0)
    values = _per_ray(f, lambda r, v: integrate_right(r, v, alpha))
    return f.with_values(values, operation="dir_integral_right", alpha=alpha)


def dir_integral_weighted(f: GridFn, alpha: float, mu: Union[DirWeight, GridFn]) -> GridFn:
    """dir_integral_left applied to mu * f for a real-valued mu."""
    mu_values = np.asarray(mu.values)
    if np.iscomplexobj(mu_values) and np.max(np.abs(mu_values.imag)) > 0:
        raise ArgumentError("The weighted factor must be real-valued")
    if mu_values.shape != f.values.shape:
        raise ArgumentError("Weight and function must share the mesh")
    result = dir_integral_left(f.with_values(mu_values.real * f.values), alpha)
    result.meta["operation"] = "dir_integral_weighted"
    return result


def _short_rays(mesh: RayMesh, eps: float) -> List[int]:
    return [int(k) for k in np.flatnonzero(mesh.lengths <= eps)]


def psi_plus(f: GridFn, params: FracParams) -> GridFn:
    """Truncated difference term psi^+_eps with the r < eps closed-form branch."""
    mesh = _mesh(f)
    values = _per_ray(f, lambda r, v: psi_left(r, v, params.alpha, params.epsilon, mesh.dim))
    return f.with_values(values, operation="psi_plus", alpha=params.alpha, epsilon=params.epsilon,
                         closed_form_rays=_short_rays(mesh, params.epsilon))


def psi_minus(f: GridFn, params: FracParams) -> GridFn:
    """Truncated difference term psi^-_eps with the d - eps < r closed-form branch."""
    mesh = _mesh(f)
    values = _per_ray(f, lambda r, v: psi_right(r, v, params.alpha, params.epsilon))
    return f.with_values(values, operation="psi_minus", alpha=params.alpha, epsilon=params.epsilon,
                         closed_form_rays=_short_rays(mesh, params.epsilon))


def truncated_derivative_left(f: GridFn, params: FracParams) -> GridFn:
    """D^alpha_{0+,eps} f = (f r^-alpha + alpha psi^+_eps f) / Gamma(1 - alpha)."""
    mesh = _mesh(f)
    values = _per_ray(f, lambda r, v: truncated_values(r, v, params.alpha, params.epsilon,
                                                       Side.LEFT, mesh.dim))
    return f.with_values(values, operation="truncated_derivative_left", alpha=params.alpha,
                         epsilon=params.epsilon)


def truncated_derivative_right(f: GridFn, params: FracParams) -> GridFn:
    """D^alpha_{d-,eps} f = (f (d - r)^-alpha + alpha psi^-_eps f) / Gamma(1 - alpha)."""
    _mesh(f)
    values = _per_ray(f, lambda r, v: truncated_values(r, v, params.alpha, params.epsilon, Side.RIGHT))
    return f.with_values(values, operation="truncated_derivative_right", alpha=params.alpha,
                         epsilon=params.epsilon)


def kipriyanov_constant(n: int, alpha: float) -> float:
    """C_n^(alpha) = (n-1)! / Gamma(n - alpha)."""
    return math.factorial(n - 1) / gamma(n - alpha)


def _kipriyanov_ray(r: np.ndarray, values: np.ndarray, alpha: float, eps: float,
                    dim: int) -> np.ndarray:
    """Kipriyanov operator truncated at r - eps along one ray, for n >= 2."""
    weight = r ** (dim - 1)
    integral = np.zeros(values.shape, dtype=complex)
    for rows in row_chunks(r.size):
        block = product_weights(r, -alpha, cutoff=eps, rows=rows) * weight[None, :]
        diff = values[rows, None] - values[None, :]
        integral[rows] = np.einsum("ij,ij->i", block, diff)
    positive = r > 0
    integral[positive] /= weight[positive]
    with np.errstate(divide="ignore", invalid="ignore"):
        local = kipriyanov_constant(dim, alpha) * values * r ** -alpha
    return alpha / gamma(1.0 - alpha) * integral + local


def _directional_limit(f: GridFn, evaluate_ray, distance: np.ndarray, alpha: float, tol: float,
                       p: float, eps0: Optional[float], name: str) -> GridFn:
    mesh = _mesh(f)
    floor = 2.0 * mesh.h
    start = eps0 if eps0 is not None else max(mesh.diameter / 8.0, floor)

    def evaluate(eps):
        out = np.empty(f.values.shape, dtype=complex)
        for k in range(mesh.n_rays):
            out[k] = evaluate_ray(mesh.nodes[k], f.values[k], eps)
        return out

    values, record = epsilon_limit(evaluate, distance, mesh.measure_weights(), alpha, p, tol,
                                   start, floor)
    logger.debug(f"{name}: accepted eps={record.epsilon_final:.3e} on {mesh.n_rays} rays")
    return f.with_values(values, operation=name, alpha=alpha, limit=record.model_dump())


def kipriyanov_apply(f: GridFn, alpha: float, tol: float = 1e-4, p: float = 2.0,
                     eps0: Optional[float] = None) -> GridFn:
    """
    Kipriyanov operator D^alpha f.

    (alpha/Gamma(1-alpha)) int_0^r [f(Q) - f(T)](r - t)^(-alpha-1)(t/r)^(n-1) dt + C_n f(Q) r^-alpha,
    with the difference integral obtained as an eps -> 0 limit. For n = 1 the
    operator coincides with the left Marchaud derivative and shares its code path.

    Raises:
        ConvergenceError: the eps-limit did not settle before eps reached 2h
    """
    mesh = _mesh(f)
    check_order(alpha)
    if alpha == 0.0:
        return f.with_values(f.values.copy(), operation="kipriyanov_apply", alpha=0.0)
    if mesh.dim == 1:
        ray = lambda r, v, eps: limit_values(r, v, alpha, eps, Side.LEFT)
    else:
        ray = lambda r, v, eps: _kipriyanov_ray(r, v, alpha, eps, mesh.dim)
    return _directional_limit(f, ray, mesh.nodes, alpha, tol, p, eps0, "kipriyanov_apply")


def dir_derivative_left(f: GridFn, alpha: float, tol: float = 1e-4, p: float = 2.0,
                        eps0: Optional[float] = None) -> GridFn:
    """Directional Marchaud derivative D^alpha_{0+} f as the L_p limit of the truncations."""
    mesh = _mesh(f)
    check_order(alpha)
    if alpha == 0.0:
        return f.with_values(f.values.copy(), operation="dir_derivative_left", alpha=0.0)
    ray = lambda r, v, eps: limit_values(r, v, alpha, eps, Side.LEFT, mesh.dim)
    return _directional_limit(f, ray, mesh.nodes, alpha, tol, p, eps0, "dir_derivative_left")


def dir_derivative_right(f: GridFn, alpha: float, tol: float = 1e-4, p: float = 2.0,
                         eps0: Optional[float] = None) -> GridFn:
    """Directional Marchaud derivative D^alpha_{d-} f."""
    mesh = _mesh(f)
    check_order(alpha)
    if alpha == 0.0:
        return f.with_values(f.values.copy(), operation="dir_derivative_right", alpha=0.0)
    ray = lambda r, v, eps: limit_values(r, v, alpha, eps, Side.RIGHT)
    distance = mesh.lengths[:, None] - mesh.nodes
    return _directional_limit(f, ray, distance, alpha, tol, p, eps0, "dir_derivative_right")


def kernel_K(t, alpha: float):
    """
    Averaging kernel (sin(a pi)/pi)(t_+^a - (t-1)_+^a)/t.

    Returns +inf at t = 0, where the kernel behaves like t^(a-1).
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr < 0):
        raise ArgumentError("kernel_K is defined for t >= 0")
    c = math.sin(alpha * math.pi) / math.pi
    with np.errstate(divide="ignore", invalid="ignore"):
        value = c * (t_arr ** alpha - np.maximum(t_arr - 1.0, 0.0) ** alpha) / t_arr
    value = np.where(t_arr == 0, np.inf, value)
    return float(value) if np.ndim(t) == 0 else value


def kernel_K_integral(alpha: float) -> float:
    """
    int_0^inf K(t) dt, which must equal one.

    [0, 1] is exact, [1, 2] uses QUADPACK's algebraic weight for (t-1)^a and
    [2, inf) is mapped to x = 1/t, where the integrand is x^-a times a smooth factor.
    """
    c = math.sin(alpha * math.pi) / math.pi
    head = 1.0 / alpha
    middle_power = (2.0 ** alpha - 1.0) / alpha
    middle_diff, _ = quad(lambda t: 1.0 / t, 1.0, 2.0, weight="alg", wvar=(alpha, 0.0),
                          epsabs=1e-15, epsrel=1e-13)

    def smooth(x):
        if x == 0.0:
            return alpha
        return -math.expm1(alpha * math.log1p(-x)) / x

    tail, _ = quad(smooth, 0.0, 0.5, weight="alg", wvar=(-alpha, 0.0), epsabs=1e-15, epsrel=1e-13)
    return c * (head + middle_power - middle_diff + tail)


def representation_approximant(f: GridFn, params: FracParams) -> GridFn:
    """
    phi^+_eps f = (f r^-alpha + alpha psi^+_eps f) / Gamma(1 - alpha).

    The origin node carries its limit f(P) eps^-alpha / Gamma(1 - alpha).
    """
    mesh = _mesh(f)
    result = truncated_derivative_left(f, params)
    values = result.values.copy()
    origin = mesh.nodes == 0.0
    values[origin] = f.values[origin] * params.epsilon ** -params.alpha / gamma(1.0 - params.alpha)
    return result.with_values(values, operation="representation_approximant", origin_filled=True)


def representation_study(f: GridFn, alpha: float, epsilons: Sequence[float], p: float = 2.0,
                         target: Optional[GridFn] = None) -> RepresentationReport:
    """
    Error of the representation identity along a sequence of radii.

    Without a target the error is ||E^alpha(phi_eps f) - f||_p; with a target g
    (f = E^alpha g) it is ||phi_eps f - g||_p. The error is split into long rays
    far from the origin, long rays near the origin and rays shorter than eps.
    """
    mesh = _mesh(f)
    weights = mesh.measure_weights()
    errors, far, near, short = [], [], [], []

    for eps in epsilons:
        approx = representation_approximant(f, FracParams(alpha=alpha, epsilon=eps, p=p))
        if target is None:
            residual = dir_integral_left(approx, alpha).values - f.values
        else:
            residual = approx.values - target.values
        mags = np.where(np.isfinite(residual), np.abs(residual), 0.0) ** p
        long_rays = (mesh.lengths >= eps)[:, None]
        far_mask = long_rays & (mesh.nodes >= eps)
        near_mask = long_rays & (mesh.nodes < eps)
        short_mask = ~long_rays & np.ones(mesh.shape, dtype=bool)
        part = lambda mask: float(np.sum(weights[mask] * mags[mask]) ** (1.0 / p))
        errors.append(float(np.sum(weights * mags) ** (1.0 / p)))
        far.append(part(far_mask))
        near.append(part(near_mask))
        short.append(part(short_mask))
        logger.debug(f"representation_study: eps={eps:.3e} error={errors[-1]:.3e}")

    ordered = sorted(zip(epsilons, errors), key=lambda pair: -pair[0])
    monotone = all(later < earlier for (_, earlier), (_, later) in zip(ordered, ordered[1:]))
    finite = all(math.isfinite(e) for e in errors)
    return RepresentationReport(epsilons=list(epsilons), errors=errors, far_part=far,
                                near_part=near, short_part=short, monotone=monotone,
                                passed=monotone and finite)


def kernel_identity_check(f: GridFn, params: FracParams, ray: int = 0,
                          probes: Optional[Sequence[int]] = None) -> StencilComparison:
    """
    Compare I^alpha(phi^+_eps f) with int_0^{r/eps} K(t) f(r - eps t) dt along one ray.

    Both sides use the one-dimensional operators on the ray, so the identity is
    checked in the n = 1 setting where it holds exactly.
    """
    mesh = _mesh(f)
    if not 0 <= ray < mesh.n_rays:
        raise ArgumentError(f"Ray index {ray} out of range")
    alpha, eps = params.alpha, params.epsilon
    r = mesh.nodes[ray]
    values = f.values[ray]

    approx = truncated_values(r, values, alpha, eps, Side.LEFT)
    approx[0] = values[0] * eps ** -alpha / gamma(1.0 - alpha)
    direct = integrate_left(r, approx, alpha)

    if probes is None:
        candidates = np.flatnonzero(r >= eps)
        probes = candidates[:: max(1, candidates.size // 8)]
    probes = [int(i) for i in probes]
    c = math.sin(alpha * math.pi) / math.pi
    splines = (CubicSpline(r, values.real), CubicSpline(r, values.imag))

    reference = []
    for i in probes:
        upper = r[i] / eps
        parts = []
        for spline in splines:
            shifted = lambda t: float(spline(r[i] - eps * t))
            value, _ = quad(shifted, 0.0, min(1.0, upper), weight="alg", wvar=(alpha - 1.0, 0.0),
                            limit=200)
            value *= c
            if upper > 1.0:
                # K(t) = c t^(a-1) - c (t-1)^a / t on t > 1
                power, _ = quad(lambda t: t ** (alpha - 1.0) * shifted(t), 1.0, upper, limit=400)
                lag, _ = quad(lambda t: shifted(t) / t, 1.0, upper, weight="alg",
                              wvar=(alpha, 0.0), limit=400)
                value += c * (power - lag)
            parts.append(value)
        reference.append(parts[0] + 1j * parts[1])

    reference = np.asarray(reference)
    residual = float(np.max(np.abs(direct[probes] - reference)))
    scale = float(np.max(np.abs(reference)))
    return StencilComparison(residual=residual, reference=scale,
                             relative=residual / scale if scale > 0 else residual)


def accretivity_constant(alpha: float, rho: DirWeight, diam: float, n: int) -> float:
    """
    Lower bound C_{alpha,rho} of Re(f, D^alpha f)_rho / ||f||_rho^2.

    Monotone weights use (1/(2 d^a))(1/Gamma(1-a) + (n-1)!/Gamma(n-a)); otherwise
    the Lipschitz term alpha M d^lambda / (2 Gamma(1-a)(lambda - a) inf rho) is
    subtracted inside the braces, which may leave a non-positive value.
    """
    base = 1.0 / gamma(1.0 - alpha) + kipriyanov_constant(n, alpha)
    if rho.monotone:
        return base / (2.0 * diam ** alpha)
    if rho.lam <= alpha:
        raise PreconditionError(f"Lipschitz exponent {rho.lam} must exceed the order {alpha}")
    if rho.M == 0:
        return base / (2.0 * diam ** alpha)
    inf_rho = float(rho.values.min())
    if inf_rho <= 0:
        raise PreconditionError("The general constant needs inf rho > 0")
    penalty = alpha * rho.M * diam ** rho.lam / (2.0 * gamma(1.0 - alpha) * (rho.lam - alpha) * inf_rho)
    return (base - penalty) / (2.0 * diam ** alpha)


def kipriyanov_constants(alpha: float, rho: DirWeight, diam: float, n: int) -> KipConstants:
    """Collect C_n^(alpha), C_{alpha,rho} and C_{alpha,d} for one domain."""
    c_rho = accretivity_constant(alpha, rho, diam, n)
    if c_rho <= 0:
        logger.warning(f"Accretivity constant {c_rho:.4g} is not positive; the lower bound is vacuous")
    return KipConstants(
        C_n_alpha=kipriyanov_constant(n, alpha),
        C_alpha_rho=c_rho,
        C_alpha_d=diam ** alpha / gamma(alpha + 1.0),
        monotone=rho.monotone,
        coercive=c_rho > 0,
    )


def accretivity_check(suite: Sequence[GridFn], alpha: float, rho: DirWeight,
                      tol: float = 1e-3, limit_tol: float = 1e-2) -> AccretivityCheckReport:
    """
    Audit Re(f, D^alpha f)_rho >= C_{alpha,rho} ||f||_rho^2 over a suite vanishing on the boundary.

    Args:
        suite: Test functions on rho's mesh
        alpha: Order
        rho: Weight of the inner product
        tol: Slack allowed below the constant
        limit_tol: Stopping tolerance of the eps-limit inside kipriyanov_apply
    """
    mesh = rho.mesh
    constant = accretivity_constant(alpha, rho, mesh.diameter, mesh.dim)
    weights = mesh.measure_weights() * rho.values
    ratios = []
    for f in suite:
        if f.grid is not mesh:
            raise ArgumentError("Suite functions must live on the weight's mesh")
        norm_sq = float(np.sum(weights * np.abs(f.values) ** 2))
        if norm_sq == 0:
            raise PreconditionError("Suite functions must have nonzero weighted norm")
        derivative = kipriyanov_apply(f, alpha, tol=limit_tol).values
        finite = np.isfinite(derivative)
        form = np.sum(weights[finite] * np.conj(f.values[finite]) * derivative[finite])
        ratios.append(float(form.real) / norm_sq)
    min_ratio = min(ratios)
    logger.debug(f"accretivity_check: min ratio {min_ratio:.4g} against constant {constant:.4g}")
    return AccretivityCheckReport(ratios=ratios, min_ratio=min_ratio, constant=constant,
                                  tolerance=tol, passed=min_ratio >= constant - tol)


def dir_norm_bound_audit(mesh: RayMesh, alpha: float, p: float, samples: int,
                         rng: np.random.Generator, side: Side = Side.LEFT,
                         slack: float = 1e-8) -> BoundReport:
    """Check ||E^alpha u||_p <= (d^alpha / Gamma(alpha+1)) ||u||_p on random u."""
    constant = mesh.diameter ** alpha / gamma(alpha + 1.0)
    integral = dir_integral_left if side == Side.LEFT else dir_integral_right
    weights = mesh.measure_weights()
    ratios = []
    for _ in range(samples):
        u = GridFn(mesh, rng.standard_normal(mesh.shape))
        ratios.append(weighted_lp(integral(u, alpha).values, weights, p)
                      / (constant * weighted_lp(u.values, weights, p)))
    violations = int(np.count_nonzero(np.asarray(ratios) > 1.0 + slack))
    return BoundReport(constant=constant, max_ratio=float(max(ratios)), samples=samples,
                       slack=slack, violations=violations, passed=violations == 0)


def mapping_smoke_check(suite: Sequence[GridFn], alpha: float, q: float,
                        tol: float = 1e-2) -> MappingReport:
    """Finiteness of ||D^alpha f||_q over a discrete Sobolev suite."""
    norms = []
    for f in suite:
        derivative = kipriyanov_apply(f, alpha, tol=tol)
        norms.append(weighted_lp(derivative.values, _mesh(f).measure_weights(), q))
    return MappingReport(q=q, norms=norms, passed=all(math.isfinite(v) for v in norms))


def lipschitz_audit(rho: DirWeight, rng: np.random.Generator, pairs: int = 1000,
                    slack: float = 1e-12) -> BoundReport:
    """Sample |rho(Q) - rho(P)| <= M r^lambda at random mesh nodes Q."""
    mesh = rho.mesh
    rays = rng.integers(0, mesh.n_rays, size=pairs)
    idx = rng.integers(1, mesh.shape[1], size=pairs)
    r = mesh.nodes[rays, idx]
    jump = np.abs(rho.values[rays, idx] - rho.values[rays, 0])
    bound = rho.M * r ** rho.lam
    ratios = np.where(bound > 0, jump / np.where(bound > 0, bound, 1.0), jump)
    violations = int(np.count_nonzero(ratios > 1.0 + slack)) if rho.M > 0 else int(np.count_nonzero(jump > slack))
    return BoundReport(constant=rho.M, max_ratio=float(ratios.max()), samples=pairs, slack=slack,
                       violations=violations, passed=violations == 0)
