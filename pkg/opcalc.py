"""
Operator calculus on finite-dimensional spaces with quadrature-weighted inner products
Covers shift generators, Balakrishnan powers, the Z transform and the elliptic assemblies

Every operator is a dense OpMatrix on C^N with <u, v> = sum_j w_j u_j conj(v_j).
Adjoints, norms and numerical ranges are taken in that inner product, which is
the Euclidean one after the similarity S = W^(1/2) A W^(-1/2).
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from loguru import logger
from scipy.linalg import block_diag, eigh, expm, solve, solve_banded, svdvals

from errors import ArgumentError, DomainError, PreconditionError, QuadratureError
from frac1d import (
    GridFn,
    IntervalGrid,
    check_order,
    integrate_left,
    integrate_right,
    marchaud_deriv_left,
    marchaud_deriv_right,
    weighted_lp,
)
from kipriyanov import RayMesh
from schemas import (
    AccretivityReport,
    ContractionReport,
    H1H2Report,
    NegPowerBoundReport,
    NormEquivalenceReport,
    PowerSign,
    Provenance,
    StencilComparison,
    StudyReport,
    ThresholdReport,
    TransformAudit,
)

GAUSS_POINTS = 32
PANEL_WIDTH = 2.0
MAX_PANELS = 60

Coefficients = Union[float, complex, np.ndarray, Callable[[np.ndarray], Any]]


@dataclass
class OpMatrix:
    """Dense operator on C^N together with the weights of its inner product"""
    entries: np.ndarray
    weights: np.ndarray
    provenance: Provenance = Provenance.GENERIC
    meta: Dict[str, Any] = field(default_factory=dict)

    # numpy scalars defer to __rmul__
    __array_ufunc__ = None

    def __post_init__(self):
        entries = np.asarray(self.entries, dtype=complex)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ArgumentError("An operator matrix must be square")
        if weights.size != entries.shape[0]:
            raise ArgumentError("Need one inner-product weight per row")
        if not np.all(np.isfinite(entries)):
            raise ArgumentError("Operator entries must be finite")
        if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
            raise ArgumentError("Inner-product weights must be positive")
        self.entries = entries
        self.weights = weights
        self.provenance = Provenance(self.provenance)

    @classmethod
    def identity(cls, weights, provenance: Provenance = Provenance.GENERIC) -> "OpMatrix":
        weights = np.asarray(weights, dtype=float).reshape(-1)
        return cls(np.eye(weights.size), weights, provenance)

    @property
    def N(self) -> int:
        return self.entries.shape[0]

    def with_entries(self, entries, provenance: Optional[Provenance] = None, **meta) -> "OpMatrix":
        return OpMatrix(entries, self.weights, provenance or self.provenance, meta)

    def inner(self, u, v) -> complex:
        return complex(np.sum(self.weights * np.asarray(u) * np.conj(v)))

    def vector_norm(self, u) -> float:
        return math.sqrt(max(self.inner(u, u).real, 0.0))

    def similar(self) -> np.ndarray:
        """W^(1/2) A W^(-1/2), the Euclidean representative."""
        s = np.sqrt(self.weights)
        return s[:, None] * self.entries / s[None, :]

    def from_similar(self, matrix, provenance: Optional[Provenance] = None, **meta) -> "OpMatrix":
        s = np.sqrt(self.weights)
        return self.with_entries(matrix / s[:, None] * s[None, :], provenance, **meta)

    def adjoint(self) -> "OpMatrix":
        """W^-1 A^H W, so that <A u, v> = <u, A* v>."""
        w = self.weights
        return self.with_entries(self.entries.conj().T * w[None, :] / w[:, None])

    def hermitian_part(self) -> np.ndarray:
        S = self.similar()
        return 0.5 * (S + S.conj().T)

    def numerical_floor(self) -> float:
        """Smallest real part of the numerical range."""
        return float(eigh(self.hermitian_part(), eigvals_only=True)[0])

    def norm(self) -> float:
        return float(svdvals(self.similar())[0])

    def inverse_norm(self) -> float:
        smallest = float(svdvals(self.similar())[-1])
        return math.inf if smallest == 0 else 1.0 / smallest

    def inverse(self) -> "OpMatrix":
        return self.with_entries(np.linalg.inv(self.entries))

    def _check_space(self, other: "OpMatrix") -> None:
        if other.N != self.N or not np.allclose(other.weights, self.weights, rtol=1e-12, atol=0.0):
            raise ArgumentError("Operators act on different weighted spaces")

    def __matmul__(self, other):
        if isinstance(other, OpMatrix):
            self._check_space(other)
            return OpMatrix(self.entries @ other.entries, self.weights, Provenance.ASSEMBLED)
        return self.entries @ np.asarray(other)

    def __add__(self, other: "OpMatrix") -> "OpMatrix":
        self._check_space(other)
        return OpMatrix(self.entries + other.entries, self.weights, Provenance.ASSEMBLED)

    def __sub__(self, other: "OpMatrix") -> "OpMatrix":
        self._check_space(other)
        return OpMatrix(self.entries - other.entries, self.weights, Provenance.ASSEMBLED)

    def __mul__(self, scalar) -> "OpMatrix":
        return self.with_entries(scalar * self.entries, **self.meta)

    __rmul__ = __mul__

    def save(self, path: Union[str, Path]) -> None:
        """
        Write the dense binary layout and a JSON sidecar with the same stem.

        Layout: <u8 N, <f8 weights[N], <f8 real part row-major, <f8 imaginary part row-major.
        """
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(np.array([self.N], dtype="<u8").tobytes())
            fh.write(self.weights.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.entries.real).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(self.entries.imag).astype("<f8").tobytes())
        sidecar = {
            "N": self.N,
            "provenance": self.provenance.value,
            "meta": {key: value for key, value in self.meta.items() if _json_safe(value)},
        }
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "OpMatrix":
        path = Path(path)
        raw = path.read_bytes()
        if len(raw) < 8:
            raise ArgumentError(f"{path} is too short for an operator header")
        N = int(np.frombuffer(raw[:8], dtype="<u8")[0])
        expected = 8 + 8 * (N + 2 * N * N)
        if len(raw) != expected:
            raise ArgumentError(f"{path} holds {len(raw)} bytes, expected {expected} for N={N}")
        body = np.frombuffer(raw[8:], dtype="<f8")
        weights = body[:N]
        real = body[N:N + N * N].reshape(N, N)
        imag = body[N + N * N:].reshape(N, N)
        provenance, meta = Provenance.GENERIC, {}
        sidecar = path.with_suffix(".json")
        if sidecar.exists():
            info = json.loads(sidecar.read_text())
            provenance = Provenance(info.get("provenance", Provenance.GENERIC.value))
            meta = info.get("meta", {})
        return cls(real + 1j * imag, weights.copy(), provenance, meta)


def _json_safe(value: Any) -> bool:
    try:
        json.dumps(value)
    except (TypeError, ValueError):
        return False
    return True


def bandwidth(entries: np.ndarray) -> Tuple[int, int]:
    """Lower and upper bandwidth of a square matrix."""
    rows, cols = np.nonzero(entries)
    if rows.size == 0:
        return 0, 0
    return int(max(0, np.max(rows - cols))), int(max(0, np.max(cols - rows)))


class Resolvent:
    """Solves (lambda + A) x = b, through LAPACK band storage when A is narrow."""

    def __init__(self, A: OpMatrix):
        self.entries = A.entries
        self.N = A.N
        self.lower, self.upper = bandwidth(A.entries)
        self.banded = self.lower + self.upper + 1 < self.N // 4
        if self.banded:
            ab = np.zeros((self.lower + self.upper + 1, self.N), dtype=complex)
            for k in range(-self.lower, self.upper + 1):
                diagonal = np.diagonal(self.entries, offset=k)
                if k >= 0:
                    ab[self.upper - k, k:] = diagonal
                else:
                    ab[self.upper - k, :self.N + k] = diagonal
            self.ab = ab

    def __call__(self, lam: float, rhs: np.ndarray) -> np.ndarray:
        if self.banded:
            ab = self.ab.copy()
            ab[self.upper] += lam
            return solve_banded((self.lower, self.upper), ab, rhs)
        return solve(self.entries + lam * np.eye(self.N), rhs)


def _require_accretive(A: OpMatrix, what: str) -> None:
    floor = A.numerical_floor()
    if floor < -1e-10 * max(A.norm(), 1.0):
        raise PreconditionError(f"{what} needs an accretive operator, Re(Af, f) reaches {floor:.3e}")


# ============================================================================
# Accretivity diagnostics
# ============================================================================

def numerical_range_sample(A: OpMatrix, count: int, rng: Optional[np.random.Generator] = None,
                           vertex: Optional[float] = None) -> AccretivityReport:
    """
    Sample Rayleigh quotients (Af, f)/||f||^2 over random and eigenvector probes.

    Args:
        A: Operator to probe
        count: Number of random unit probes
        rng: Random generator; a fresh default one when omitted
        vertex: Sector vertex on the real axis, default the exact floor of Re Theta(A)

    Returns:
        AccretivityReport; passed means accretive and sectorial about the vertex
    """
    if count < 1:
        raise ArgumentError("Need at least one probe")
    rng = rng if rng is not None else np.random.default_rng()
    S = A.similar()
    gamma_exact = A.numerical_floor()
    probes = rng.standard_normal((A.N, count)) + 1j * rng.standard_normal((A.N, count))
    _, eigvecs = np.linalg.eig(S)
    probes = np.hstack([probes, eigvecs])
    probes /= np.linalg.norm(probes, axis=0, keepdims=True)
    quotients = np.sum(np.conj(probes) * (S @ probes), axis=0)

    iota = gamma_exact if vertex is None else float(vertex)
    scale = max(float(svdvals(S)[0]), np.finfo(float).tiny)
    offsets = quotients - iota
    visible = np.abs(offsets) > 1e-10 * scale
    theta = float(np.max(np.abs(np.angle(offsets[visible])))) if np.any(visible) else 0.0
    sectorial = theta < 0.5 * math.pi - 1e-9
    accretive = gamma_exact >= -1e-12 * scale
    return AccretivityReport(
        samples=int(quotients.size),
        gamma_sampled=float(np.min(quotients.real)),
        gamma_exact=gamma_exact,
        vertex=iota,
        theta=theta,
        sectorial=sectorial,
        passed=bool(accretive and sectorial),
    )


def m_accretive_check(A: OpMatrix, lambda_grid: Sequence[float], slack: float = 1e-10) -> AccretivityReport:
    """Audit ||(A + lambda)^-1|| <= 1/lambda on a positive grid."""
    lambdas = [float(lam) for lam in lambda_grid]
    if not lambdas or min(lambdas) <= 0:
        raise ArgumentError("The resolvent grid must be non-empty and positive")
    S = A.similar()
    eye = np.eye(A.N)
    norms = []
    for lam in lambdas:
        smallest = float(svdvals(S + lam * eye)[-1])
        norms.append(math.inf if smallest == 0 else 1.0 / smallest)
    passed = all(norm <= (1.0 + slack) / lam for norm, lam in zip(norms, lambdas))
    if not passed:
        logger.debug(f"m_accretive_check: resolvent bound fails on {A.provenance.value} operator")
    return AccretivityReport(gamma_exact=A.numerical_floor(), lambdas=lambdas,
                             resolvent_norms=norms, passed=passed)


# ============================================================================
# Shift semigroup
# ============================================================================

def _upwind(size: int, h: float, direction: int) -> np.ndarray:
    """(f_j - f_{j+direction}) / h with zero extension past the last node."""
    return (np.eye(size) - np.eye(size, k=direction)) / h


def shift_generator(mesh: Union[IntervalGrid, RayMesh], direction: int = 1) -> OpMatrix:
    """
    Generator A of T_t f(Q) = f(Q + direction * e t) with zero extension.

    Interval grids use the uniform weight h so the upwind difference stays
    accretive. On a RayMesh the rays only carry the outward shift; the block
    of ray k is weighted by dchi_k * int_{r_j}^{r_j + h} r^(n-1) dr, which is
    positive and nondecreasing along the ray.
    """
    if direction not in (1, -1):
        raise ArgumentError("direction must be +1 or -1")
    if isinstance(mesh, IntervalGrid):
        if not mesh.is_uniform:
            raise ArgumentError("The shift generator needs uniform spacing")
        h = mesh.h
        size = mesh.nodes.size
        return OpMatrix(_upwind(size, h, direction), np.full(size, h), Provenance.GENERATOR,
                        {"direction": direction, "h": h})
    if isinstance(mesh, RayMesh):
        if direction != 1:
            raise ArgumentError("Rays carry only the outward shift, direction = +1")
        blocks, weights = [], []
        for k in range(mesh.n_rays):
            r = mesh.nodes[k]
            steps = np.diff(r)
            if not np.allclose(steps, steps[0], rtol=1e-10, atol=0.0):
                raise ArgumentError(f"Ray {k} is not uniformly spaced")
            h = float(steps[0])
            blocks.append(_upwind(r.size, h, 1))
            weights.append(mesh.dchi[k] * ((r + h) ** mesh.dim - r ** mesh.dim) / mesh.dim)
        return OpMatrix(block_diag(*blocks), np.concatenate(weights), Provenance.GENERATOR,
                        {"direction": 1, "rays": mesh.n_rays})
    raise ArgumentError("shift_generator accepts an IntervalGrid or a RayMesh")


def semigroup(A: OpMatrix, t: float) -> OpMatrix:
    """exp(-tA) by scaling and squaring."""
    if t < 0:
        raise ArgumentError("The semigroup is defined for t >= 0")
    return A.with_entries(expm(-t * A.entries), Provenance.GENERIC, t=t)


def contraction_audit(A: OpMatrix, times: Sequence[float], slack: float = 1e-10) -> ContractionReport:
    norms = [semigroup(A, t).norm() for t in times]
    return ContractionReport(times=[float(t) for t in times], norms=norms, slack=slack,
                             passed=all(norm <= 1.0 + slack for norm in norms))


# ============================================================================
# Fractional powers
# ============================================================================

def _panel(solver: Resolvent, v: np.ndarray, a: float, s0: float, nodes, weights) -> np.ndarray:
    s = s0 + 0.5 * PANEL_WIDTH * (nodes + 1.0)
    total = np.zeros(v.shape, dtype=complex)
    for sk, wk in zip(s, 0.5 * PANEL_WIDTH * weights):
        total += wk * math.exp(a * sk) * solver(math.exp(sk), v)
    return total


def _exp_integral(c: float, s0: float, s1: float) -> float:
    return (math.exp(c * s1) - math.exp(c * s0)) / c


def balakrishnan_apply(A: OpMatrix, f, alpha: float, sign: PowerSign = PowerSign.POSITIVE,
                       tol: float = 1e-12, check: bool = True) -> Tuple[np.ndarray, float]:
    """
    Action of A^alpha or A^-alpha on a vector (or on the columns of a matrix).

    With lambda = e^s both integrands read e^(a s) (e^s + A)^-1 v: a = alpha,
    v = A f for the positive power and a = 1 - alpha, v = f for the negative one.
    The integrand behaves like e^(a s) A^-1 v as s -> -inf and like e^((a-1) s) v
    as s -> +inf. Panels of 32 Gauss points are added on each side until the
    outermost panel matches that asymptote, and the remaining tails are added
    in closed form.

    Returns:
        (values, quadrature error estimate)
    """
    check_order(alpha)
    sign = PowerSign(sign)
    f = np.asarray(f, dtype=complex)
    if f.shape[0] != A.N:
        raise ArgumentError(f"Vector of length {f.shape[0]} does not fit an operator of size {A.N}")
    if alpha == 0.0:
        return f.copy(), 0.0
    if check:
        _require_accretive(A, "A fractional power")

    solver = Resolvent(A)
    if sign == PowerSign.POSITIVE:
        a, v = alpha, A.entries @ f
        low_vec = f
    else:
        a, v = 1.0 - alpha, f
        low_vec = solver(0.0, f)
    nodes, weights = np.polynomial.legendre.leggauss(GAUSS_POINTS)

    diag = np.abs(np.diagonal(A.entries))
    center = math.log(float(np.median(diag))) if np.median(diag) > 0 else 0.0
    lo, hi = center - PANEL_WIDTH, center + PANEL_WIDTH
    total = _panel(solver, v, a, lo, nodes, weights) + _panel(solver, v, a, center, nodes, weights)

    residuals = []
    for side in ("low", "high"):
        for count in range(1, MAX_PANELS + 1):
            if side == "low":
                contribution = _panel(solver, v, a, lo - PANEL_WIDTH, nodes, weights)
                model = low_vec * _exp_integral(a, lo - PANEL_WIDTH, lo)
                lo -= PANEL_WIDTH
            else:
                contribution = _panel(solver, v, a, hi, nodes, weights)
                model = v * _exp_integral(a - 1.0, hi, hi + PANEL_WIDTH)
                hi += PANEL_WIDTH
            total += contribution
            residual = float(np.linalg.norm(contribution - model))
            if residual <= tol * max(float(np.linalg.norm(total)), np.finfo(float).tiny):
                residuals.append(residual)
                edge = lo if side == "low" else hi
                logger.debug(f"balakrishnan: {side} side settled after {count} panels at s={edge:.1f}")
                break
        else:
            raise QuadratureError(f"Resolvent integral did not settle on the {side} side",
                                  residual=residual, panels=count)

    total += low_vec * math.exp(a * lo) / a + v * math.exp((a - 1.0) * hi) / (1.0 - a)
    factor = math.sin(alpha * math.pi) / math.pi
    return factor * total, factor * sum(residuals)


def balakrishnan_power(A: OpMatrix, alpha: float, sign: PowerSign = PowerSign.POSITIVE,
                       tol: float = 1e-12) -> OpMatrix:
    """Matrix form of balakrishnan_apply; the error estimate lands in meta."""
    sign = PowerSign(sign)
    entries, error = balakrishnan_apply(A, np.eye(A.N), alpha, sign, tol)
    return A.with_entries(entries, Provenance.POWER, alpha=alpha, sign=sign.value,
                          quadrature_error=error)


def bound_constant(index: float, norm_inv: float) -> float:
    """2 index^-1 ||J^-1|| + (1 - index)^-1, infinite at the ends of [0, 1]."""
    if index <= 0.0 or index >= 1.0:
        return math.inf
    return 2.0 * norm_inv / index + 1.0 / (1.0 - index)


def neg_power_bound_check(J: OpMatrix, alpha: float, margin: float = 1e-6) -> NegPowerBoundReport:
    """Audit ||J^-alpha|| <= 2(1-alpha)^-1 ||J^-1|| + alpha^-1."""
    check_order(alpha, allow_zero=False)
    if 1.0 - alpha < margin:
        notice = f"Bound is singular at alpha={alpha}; check skipped"
        logger.info(notice)
        return NegPowerBoundReport(alpha=alpha, skipped=True, notice=notice, passed=True)
    bound = bound_constant(1.0 - alpha, J.inverse_norm())
    actual = balakrishnan_power(J, alpha, PowerSign.NEGATIVE).norm()
    return NegPowerBoundReport(alpha=alpha, bound=bound, actual=actual, passed=actual <= bound)


# ============================================================================
# Transform and forms
# ============================================================================

def _threshold(constant: float, norm_inv: float, norm_F: float) -> float:
    return 0.0 if norm_F == 0.0 else constant * norm_inv * norm_F


def transform_Z(J: OpMatrix, G: OpMatrix, F: OpMatrix, alpha: float) -> OpMatrix:
    """
    Z = J* G J + F J^alpha, with the coercivity condition audited under both constant readings.

    The audit lands in meta["audit"]; a failed condition is logged, never raised.
    """
    check_order(alpha)
    J._check_space(G)
    J._check_space(F)
    power = OpMatrix.identity(J.weights) if alpha == 0.0 else balakrishnan_power(J, alpha)
    Z = J.adjoint() @ G @ J + F @ power

    norm_inv = J.inverse_norm()
    norm_F = F.norm()
    gamma_G = G.numerical_floor()
    C_alpha = bound_constant(alpha, norm_inv)
    C_one_minus = bound_constant(1.0 - alpha, norm_inv)
    thresholds = {
        "C_alpha": _threshold(C_alpha, norm_inv, norm_F),
        "C_one_minus_alpha": _threshold(C_one_minus, norm_inv, norm_F),
    }
    binding = max(thresholds, key=thresholds.get)
    J_inv = J.inverse()
    coercivity = (J_inv.adjoint() @ Z @ J_inv).numerical_floor()
    audit = TransformAudit(
        gamma_G=gamma_G,
        norm_J_inv=norm_inv,
        norm_F=norm_F,
        C_alpha=C_alpha,
        C_one_minus_alpha=C_one_minus,
        binding=binding,
        condition_holds=gamma_G > thresholds[binding],
        coercivity=coercivity,
    )
    if not audit.condition_holds:
        logger.warning(f"transform_Z: gamma_G={gamma_G:.4g} does not exceed {thresholds[binding]:.4g} ({binding})")
    return J.with_entries(Z.entries, Provenance.TRANSFORM, alpha=alpha,
                          audit=audit.model_dump(mode="json"))


def h1h2_verify(L: OpMatrix, energy: OpMatrix, rng: Optional[np.random.Generator] = None,
                probes: int = 64, tol: float = 1e-10) -> H1H2Report:
    """
    Sharp constants of Re(Lf, f) >= C2 |f|+^2 and |(Lf, g)| <= C1 |f|+ |g|+ with |f|+ = ||E f||.

    Both come from X = E^-* L E^-1: C2 is the floor of its numerical range
    and C1 its norm. Random probe pairs give the sampled counterparts.
    """
    L._check_space(energy)
    E_inv = energy.inverse()
    X = E_inv.adjoint() @ L @ E_inv
    C2 = X.numerical_floor()
    C1 = X.norm()

    rng = rng if rng is not None else np.random.default_rng()
    shape = (L.N, probes)
    fs = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    gs = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    w = L.weights[:, None]
    Lf = L.entries @ fs
    Ef_sq = np.sum(w * np.abs(energy.entries @ fs) ** 2, axis=0)
    Eg_sq = np.sum(w * np.abs(energy.entries @ gs) ** 2, axis=0)
    coercive = np.sum(w * Lf * np.conj(fs), axis=0).real / Ef_sq
    bounded = np.abs(np.sum(w * Lf * np.conj(gs), axis=0)) / np.sqrt(Ef_sq * Eg_sq)
    return H1H2Report(C1=C1, C2=C2, probe_C1=float(bounded.max()), probe_C2=float(coercive.min()),
                      passed=bool(C2 > tol * C1 and math.isfinite(C1)))


# ============================================================================
# Generator systems on a centered box
# ============================================================================

@dataclass(frozen=True)
class GeneratorSystem:
    """
    Directional shift generators A_1..A_n on the box [-R, R]^n.

    Direction e_i points from the boundary point P_i through the center, and
    every A_i is the upwind discretization of -e_i . grad on the (M-1)^n
    interior nodes with zero extension.
    """
    points: np.ndarray
    directions: np.ndarray
    generators: List[OpMatrix]
    delta: float
    half_width: float
    M: int

    def __post_init__(self):
        n = self.points.shape[0]
        if self.points.shape != (n, n) or self.directions.shape != (n, n):
            raise ArgumentError("Need n boundary points and n directions in n dimensions")
        if len(self.generators) != n:
            raise ArgumentError("Need one generator per direction")
        scale = float(np.prod(np.linalg.norm(self.points, axis=1)))
        if abs(self.delta) <= 1e-10 * scale:
            raise PreconditionError(f"Point matrix is degenerate, Delta = {self.delta:.3e}")

    @classmethod
    def from_points(cls, points, M: int, half_width: float = 1.0) -> "GeneratorSystem":
        points = np.atleast_2d(np.asarray(points, dtype=float))
        n = points.shape[0]
        if points.shape != (n, n):
            raise ArgumentError("Points must form an n x n matrix")
        if M < 3:
            raise ArgumentError("Need at least three cells per axis")
        if np.any(np.abs(np.max(np.abs(points), axis=1) - half_width) > 1e-12 * half_width):
            raise ArgumentError("Every point must lie on the boundary of the box")
        delta = float(np.linalg.det(points))
        scale = float(np.prod(np.linalg.norm(points, axis=1)))
        if abs(delta) <= 1e-10 * scale:
            raise PreconditionError(f"Point matrix is degenerate, Delta = {delta:.3e}")
        directions = -points / np.linalg.norm(points, axis=1, keepdims=True)
        h = 2.0 * half_width / M
        generators = [_directional_generator(e, M, h) for e in directions]
        return cls(points, directions, generators, delta, half_width, M)

    @classmethod
    def from_directions(cls, directions, M: int, half_width: float = 1.0) -> "GeneratorSystem":
        directions = np.atleast_2d(np.asarray(directions, dtype=float))
        directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
        points = -directions * half_width / np.max(np.abs(directions), axis=1, keepdims=True)
        return cls.from_points(points, M, half_width)

    @classmethod
    def orthonormal(cls, dim: int, M: int, half_width: float = 1.0) -> "GeneratorSystem":
        return cls.from_directions(np.eye(dim), M, half_width)

    @property
    def dim(self) -> int:
        return self.points.shape[0]

    @property
    def h(self) -> float:
        return 2.0 * self.half_width / self.M

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.M - 1,) * self.dim

    @property
    def weights(self) -> np.ndarray:
        return self.generators[0].weights

    def grid_points(self) -> np.ndarray:
        """Interior node coordinates, first axis slowest."""
        axis = -self.half_width + self.h * np.arange(1, self.M)
        mesh = np.meshgrid(*([axis] * self.dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sample(self, func: Callable[[np.ndarray], Any]) -> np.ndarray:
        return np.asarray(func(self.grid_points()), dtype=complex)


def _axis_operator(line, axis: int, m: int, dim: int):
    """Embed a 1D operator acting along one axis of the (m,)*dim tensor grid."""
    return sp.kron(sp.kron(sp.identity(m ** axis), sp.csr_matrix(line)), sp.identity(m ** (dim - axis - 1)))


def _directional_generator(e: np.ndarray, M: int, h: float) -> OpMatrix:
    dim = e.size
    m = M - 1
    total = sp.csr_matrix((m ** dim, m ** dim), dtype=float)
    for k, component in enumerate(e):
        if component == 0.0:
            continue
        line = _upwind(m, h, 1 if component > 0 else -1)
        total = total + abs(component) * _axis_operator(line, k, m, dim)
    return OpMatrix(total.toarray(), np.full(m ** dim, h ** dim), Provenance.GENERATOR,
                    {"direction": e.tolist()})


def generator_gram(system: GeneratorSystem) -> OpMatrix:
    """sum_i A_i* A_i."""
    gram = system.generators[0].adjoint() @ system.generators[0]
    for A in system.generators[1:]:
        gram = gram + A.adjoint() @ A
    return gram


def energy_operator(system: GeneratorSystem) -> OpMatrix:
    """E = (sum_i A_i* A_i)^(1/2), so that ||E f||^2 is the squared generator-energy norm."""
    gram = generator_gram(system)
    hermitian = gram.hermitian_part()
    values, vectors = eigh(hermitian)
    root = (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.conj().T
    return gram.from_similar(root, Provenance.GENERIC, kind="energy")


def direction_norm_equivalence(system: GeneratorSystem, probes: Optional[np.ndarray] = None,
                               rng: Optional[np.random.Generator] = None,
                               count: int = 32) -> NormEquivalenceReport:
    """
    Constants c1, c2 with c1 ||f|| <= (sum_i ||(f, e_i)||^2)^(1/2) <= c2 ||f|| for vector fields f.

    Pointwise the directional norm is |E f| with E the direction matrix, so the
    certified constants are its extreme singular values. The energy norm of the
    generators is compared with the discrete H^1_0 norm through a generalized
    eigenproblem.
    """
    E = system.directions
    singular = svdvals(E)
    c1, c2 = float(singular[-1]), float(singular[0])
    if probes is None:
        rng = rng if rng is not None else np.random.default_rng()
        probes = rng.standard_normal((count, system.weights.size, system.dim))
    probes = np.asarray(probes)
    w = system.weights[None, :]
    cartesian = np.sum(w * np.sum(np.abs(probes) ** 2, axis=-1), axis=1)
    directional = np.sum(w * np.sum(np.abs(probes @ E.T) ** 2, axis=-1), axis=1)
    ratios = np.sqrt(directional / cartesian)

    m, dim = system.M - 1, system.dim
    sobolev = np.zeros((m ** dim, m ** dim))
    for k in range(dim):
        D = _axis_operator(_upwind(m, system.h, 1), k, m, dim).toarray()
        sobolev += D.T @ D
    energy = generator_gram(system).hermitian_part()
    generalized = eigh(energy, sobolev.astype(complex), eigvals_only=True)

    passed = (0.0 < c1 <= c2 < math.inf
              and ratios.min() >= c1 * (1.0 - 1e-10) and ratios.max() <= c2 * (1.0 + 1e-10))
    return NormEquivalenceReport(
        delta=system.delta, c1=c1, c2=c2,
        probe_min=float(ratios.min()), probe_max=float(ratios.max()),
        energy_c1=float(math.sqrt(max(generalized[0], 0.0))),
        energy_c2=float(math.sqrt(generalized[-1])),
        passed=bool(passed),
    )


# ============================================================================
# Elliptic and perturbed assemblies
# ============================================================================

def _coefficient_field(coeffs: Coefficients, points: np.ndarray, dim: int) -> np.ndarray:
    """Coefficient tensor a^{ij} at every point, shape (N, n, n)."""
    values = np.asarray(coeffs(points) if callable(coeffs) else coeffs)
    N = points.shape[0]
    if values.ndim == 0:
        values = values * np.eye(dim)
    if values.shape == (dim, dim):
        return np.broadcast_to(values, (N, dim, dim)).copy()
    if values.shape == (N,):
        return values[:, None, None] * np.eye(dim)
    if values.shape == (N, dim, dim):
        return values
    raise ArgumentError(f"Coefficients of shape {values.shape} do not fit {N} points in {dim} dimensions")


def ellipticity_constant(field_values: np.ndarray) -> float:
    """gamma_a = min over nodes of the smallest eigenvalue of Re(a + a^T)/2."""
    dim = field_values.shape[-1]
    if dim >= 2 and np.max(np.abs(np.imag(field_values))) > 0:
        raise DomainError("Coefficients must be real for n >= 2")
    symmetric = 0.5 * np.real(field_values + np.swapaxes(field_values, -1, -2))
    gamma_a = float(np.min(np.linalg.eigvalsh(symmetric)))
    if gamma_a <= 0:
        raise DomainError(f"Coefficients are not uniformly elliptic, gamma_a = {gamma_a:.3e}")
    return gamma_a


def elliptic_assemble(coeffs: Coefficients, system: GeneratorSystem) -> OpMatrix:
    """
    -T = (1/n) sum_i A_i* G_i A_i for T = D_j(a^{ij} D_i .).

    G_i is multiplication by n b_ii with B = E^-T a E^-1 the coefficients
    resolved on the direction frame. The construction is exact when B is
    diagonal, which always holds for a = a(Q) I on orthonormal frames.
    A_i only sees the zero extension past its far face, so rows next to an
    incoming face differ from the Dirichlet stencil; away from the boundary
    they coincide for constant coefficients.

    Raises:
        DomainError: coefficients not elliptic, or not resolvable on the frame
    """
    n = system.dim
    a = _coefficient_field(coeffs, system.grid_points(), n)
    gamma_a = ellipticity_constant(a)
    E_inv = np.linalg.inv(system.directions)
    B = np.einsum("ki,nkl,lj->nij", E_inv, a, E_inv)
    off = B - B * np.eye(n)
    if np.max(np.abs(off)) > 1e-10 * np.max(np.abs(B)):
        raise DomainError("Coefficients mix directions of the frame; G_i cannot be multiplications")
    g = n * np.diagonal(B, axis1=1, axis2=2)

    total = np.zeros((system.weights.size,) * 2, dtype=complex)
    for i, A in enumerate(system.generators):
        total += A.adjoint().entries @ (g[:, i, None] * A.entries)
    return OpMatrix(total / n, system.weights, Provenance.ELLIPTIC,
                    {"gamma_a": gamma_a, "G": g})


def divergence_form_stencil(coeffs: Coefficients, system: GeneratorSystem) -> OpMatrix:
    """
    Direct finite differences for -D_j(a^{ij} D_i f) with zero boundary values.

    Diagonal terms use half-point coefficients, mixed terms the centered
    four-point product stencil.
    """
    if isinstance(coeffs, np.ndarray) and coeffs.ndim == 3:
        raise ArgumentError("The stencil needs coefficients it can evaluate off the nodes")
    n, m, h = system.dim, system.M - 1, system.h
    points = system.grid_points()
    index = np.stack(np.unravel_index(np.arange(m ** n), (m,) * n), axis=-1)
    rows, cols, vals = [], [], []

    def add(offset, values):
        target = index + np.asarray(offset)
        inside = np.all((target >= 0) & (target < m), axis=1)
        rows.append(np.nonzero(inside)[0])
        cols.append(np.ravel_multi_index(tuple(target[inside].T), (m,) * n))
        vals.append(values[inside])

    unit = np.eye(n, dtype=int)
    for k in range(n):
        plus = _coefficient_field(coeffs, points + 0.5 * h * unit[k], n)[:, k, k]
        minus = _coefficient_field(coeffs, points - 0.5 * h * unit[k], n)[:, k, k]
        add(np.zeros(n, dtype=int), (plus + minus) / h ** 2)
        add(unit[k], -plus / h ** 2)
        add(-unit[k], -minus / h ** 2)
        for l in range(n):
            if l == k:
                continue
            # -D_k(a^{lk} D_l f)
            ahead = _coefficient_field(coeffs, points + h * unit[k], n)[:, l, k] / (4.0 * h ** 2)
            behind = _coefficient_field(coeffs, points - h * unit[k], n)[:, l, k] / (4.0 * h ** 2)
            add(unit[k] + unit[l], -ahead)
            add(unit[k] - unit[l], ahead)
            add(-unit[k] + unit[l], behind)
            add(-unit[k] - unit[l], -behind)

    matrix = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                           shape=(m ** n, m ** n)).toarray()
    return OpMatrix(matrix, system.weights, Provenance.ELLIPTIC, {"oracle": "stencil"})


def stencil_check(coeffs: Coefficients, system: GeneratorSystem,
                  probe: Callable[[np.ndarray], Any]) -> StencilComparison:
    """
    Max-norm gap between elliptic_assemble and the stencil on nodes away from the boundary.

    The layer of nodes next to the boundary is left out. Next to an incoming face,
    A_i* A_i carries a Neumann-like diagonal (1/h^2 where the Dirichlet stencil has
    2/h^2), so the two operators agree on every row only for functions that vanish on
    that layer. The gap is not a statement about the Dirichlet operator on all of
    the box.
    """
    f = system.sample(probe)
    assembled = elliptic_assemble(coeffs, system) @ f
    oracle = divergence_form_stencil(coeffs, system) @ f
    m = system.M - 1
    index = np.stack(np.unravel_index(np.arange(m ** system.dim), (m,) * system.dim), axis=-1)
    interior = np.all((index >= 1) & (index <= m - 2), axis=1)
    residual = float(np.max(np.abs(assembled[interior] - oracle[interior])))
    reference = float(np.max(np.abs(oracle[interior])))
    return StencilComparison(residual=residual, reference=reference,
                             relative=residual / reference if reference > 0 else residual)


def _scalar_field(values, system: GeneratorSystem) -> np.ndarray:
    points = system.grid_points()
    out = np.asarray(values(points) if callable(values) else values)
    out = np.broadcast_to(out, (points.shape[0],)).copy()
    if np.iscomplexobj(out):
        if np.max(np.abs(out.imag)) > 0:
            raise ArgumentError("The perturbation weight must be real")
        out = out.real
    if not np.all(np.isfinite(out)):
        raise ArgumentError("The perturbation weight must be bounded")
    return out.astype(float)


def _line_integral(system: GeneratorSystem, axis: int, forward: bool, sigma: float) -> np.ndarray:
    """E^sigma_{0+} along lines parallel to e_1, starting from the P_1 side."""
    m, dim = system.M - 1, system.dim
    if sigma == 0.0:
        return np.eye(m ** dim)
    offsets = system.h * np.arange(system.M + 1)
    basis = np.zeros((system.M + 1, m))
    basis[1:system.M] = np.eye(m)
    integral = integrate_left(offsets, basis, sigma) if forward else integrate_right(offsets, basis, sigma)
    return _axis_operator(integral[1:system.M], axis, m, dim).toarray()


def perturbed_assemble(coeffs: Coefficients, system: GeneratorSystem, rho, sigma: float,
                       gamma_ord: float) -> OpMatrix:
    """
    L = -T + E^sigma_{0+} rho D^gamma_{d-} along the direction of P_1.

    D^gamma_{d-} is A_1^gamma, the power of the outward shift generator. The
    representation L = (1/n) sum A_i* G_i A_i + F A_1^gamma is exposed through
    meta: F is the residual operator times A_1^-gamma.
    """
    check_order(sigma)
    check_order(gamma_ord)
    e1 = system.directions[0]
    axis = int(np.argmax(np.abs(e1)))
    if abs(abs(e1[axis]) - 1.0) > 1e-12:
        raise ArgumentError("The perturbation needs e_1 along a coordinate axis")
    elliptic = elliptic_assemble(coeffs, system)
    weight = _scalar_field(rho, system)
    A1 = system.generators[0]

    integral = _line_integral(system, axis, e1[axis] > 0, sigma)
    if gamma_ord == 0.0:
        power = OpMatrix.identity(system.weights)
        inverse_power = power
    else:
        power = balakrishnan_power(A1, gamma_ord)
        inverse_power = balakrishnan_power(A1, gamma_ord, PowerSign.NEGATIVE)
    perturbation = OpMatrix(integral @ (weight[:, None] * power.entries), system.weights)
    L = elliptic + perturbation
    F = (L - elliptic) @ inverse_power
    return OpMatrix(L.entries, system.weights, Provenance.ASSEMBLED, {
        "gamma_a": elliptic.meta["gamma_a"],
        "rho_sup": float(np.max(np.abs(weight))),
        "sigma": sigma,
        "gamma": gamma_ord,
        "elliptic": elliptic,
        "perturbation": perturbation,
        "F": F,
        "power": power,
    })


def perturbed_threshold(coeffs: Coefficients, system: GeneratorSystem, rho, sigma: float,
                        gamma_ord: float, lo: float = 1e-3, hi: float = 1e3, rtol: float = 1e-6,
                        max_iter: int = 100) -> ThresholdReport:
    """
    Smallest multiple s of the coefficients for which s(-T) + perturbation passes h1h2_verify.

    Bisection runs on log s; the energy norm is the generator energy of the system.
    """
    if not 0 < lo < hi:
        raise ArgumentError("Need 0 < lo < hi")
    base = perturbed_assemble(coeffs, system, rho, sigma, gamma_ord)
    elliptic, perturbation = base.meta["elliptic"], base.meta["perturbation"]
    energy = energy_operator(system)
    rng = np.random.default_rng(0)

    def passes(scale: float) -> bool:
        return h1h2_verify(scale * elliptic + perturbation, energy, rng=rng, probes=4).passed

    gamma_a = elliptic.meta["gamma_a"]
    rho_sup = base.meta["rho_sup"]
    if passes(lo):
        return ThresholdReport(scale=lo, gamma_a=lo * gamma_a, rho_sup=rho_sup, bracket=[lo, lo],
                               iterations=0, passed=True)
    if not passes(hi):
        logger.warning(f"perturbed_threshold: audit still fails at scale {hi:.3g}")
        return ThresholdReport(scale=hi, gamma_a=hi * gamma_a, rho_sup=rho_sup, bracket=[lo, hi],
                               iterations=0, passed=False)
    iterations = 0
    while hi / lo > 1.0 + rtol and iterations < max_iter:
        mid = math.sqrt(lo * hi)
        if passes(mid):
            hi = mid
        else:
            lo = mid
        iterations += 1
    logger.debug(f"perturbed_threshold: scale {hi:.6g} after {iterations} bisection steps")
    return ThresholdReport(scale=hi, gamma_a=hi * gamma_a, rho_sup=rho_sup, bracket=[lo, hi],
                           iterations=iterations, passed=True)


# ============================================================================
# Bridge between generator powers and Marchaud derivatives
# ============================================================================

def generator_bridge_study(func: Callable[[np.ndarray], Any], alpha: float, sizes: Sequence[int],
                           direction: int = -1, interval: Tuple[float, float] = (0.0, 1.0),
                           reference_factor: int = 8, tol: float = 1e-4) -> StudyReport:
    """
    Relative L2 gap between A^alpha f and the matching Marchaud derivative under refinement.

    direction = -1 pairs with the left derivative, +1 with the right one. The
    reference is computed once on a grid reference_factor times finer than the
    finest size. The convergence order is left for the caller to fit.
    """
    check_order(alpha, allow_zero=False)
    if direction not in (1, -1):
        raise ArgumentError("direction must be +1 or -1")
    sizes = sorted(int(M) for M in sizes)
    a, b = interval
    fine = IntervalGrid.uniform(a, b, reference_factor * sizes[-1])
    derivative = marchaud_deriv_left if direction == -1 else marchaud_deriv_right
    reference: GridFn = derivative(fine.sample(func), alpha, tol=tol)

    errors = []
    for M in sizes:
        grid = IntervalGrid.uniform(a, b, M)
        A = shift_generator(grid, direction)
        values, _ = balakrishnan_apply(A, grid.sample(func).values, alpha)
        exact = reference(grid.nodes)
        finite = np.isfinite(exact)
        weights = grid.measure_weights()[finite]
        errors.append(weighted_lp(values[finite] - exact[finite], weights, 2.0)
                      / weighted_lp(exact[finite], weights, 2.0))
        logger.debug(f"generator_bridge_study: M={M} relative error {errors[-1]:.3e}")
    monotone = all(later < earlier for earlier, later in zip(errors, errors[1:]))
    return StudyReport(axis_name="M", axis=[float(M) for M in sizes], values=errors,
                       monotone=monotone, passed=monotone)
