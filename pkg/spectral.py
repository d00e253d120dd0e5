"""
Jordan systems, operator functions and the block series solver
Solves D^(1/alpha)_- u = phi(W) u, u(0) = f, chain by chain

The chains are those of B = W^-1: B e_i = mu e_i + e_(i-1) with mu = 1/lambda.
On one chain exp(-psi(W) t) is a finite Taylor sum in B - mu, and the
coefficients of that sum are the H_j computed by series_H.
"""

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from scipy.linalg import eig, expm, orth, schur, solve, svd

from errors import (
    ArgumentError,
    ClusteringError,
    DivergenceError,
    DomainError,
    PreconditionError,
    SeriesOverflowError,
    TailTruncationWarning,
)
from frac1d import GridFn, IntervalGrid, frac_time_deriv
from opcalc import OpMatrix, numerical_range_sample
from schemas import GrowthReport, Provenance, ResidualReport, SectorReport, TailPolicy, UniquenessReport

SMALL_BLOCKS = 3
SECTOR_PROBES = 64
COND_LIMIT = 1e12


def _binomial(x: float, order: int) -> np.ndarray:
    """binom(x, j) for j = 0..order, x any real."""
    j = np.arange(order)
    return np.concatenate([[1.0], np.cumprod((x - j) / (j + 1.0))])


def _weighted_norms(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(weights * np.abs(values) ** 2, axis=-1))


# ============================================================================
# Operator functions
# ============================================================================

@dataclass(frozen=True)
class GrowthCertificate:
    """Ray data for Re phi(z) > C exp(H r^rho) on arg z = theta0"""
    theta0: float
    H: float
    rho: float
    zeta: Optional[float] = None


@dataclass(frozen=True)
class OperatorFunction:
    """
    phi(z) = sum_{n=l}^{k} c_n z^n.

    theta is the sector semi-angle of W used by the sector condition; leave it
    unset to have it sampled from the numerical range of W. A table that is the
    truncation of an infinite regular part is marked truncated and must carry a
    growth certificate instead.
    """
    coefficients: Dict[int, complex]
    theta: Optional[float] = None
    growth: Optional[GrowthCertificate] = None
    truncated: bool = False

    def __post_init__(self):
        if not self.coefficients:
            raise ArgumentError("An operator function needs at least one coefficient")
        table = {int(n): complex(c) for n, c in self.coefficients.items()}
        if not all(np.isfinite(c) for c in table.values()):
            raise ArgumentError("Operator function coefficients must be finite")
        if self.theta is not None and not 0.0 <= self.theta < 0.5 * math.pi:
            raise DomainError(f"Sector semi-angle {self.theta} outside [0, pi/2)")
        object.__setattr__(self, "coefficients", dict(sorted(table.items())))

    @property
    def l(self) -> int:  # noqa: E743
        return min(self.coefficients)

    @property
    def k(self) -> int:
        return max(self.coefficients)

    @classmethod
    def from_table(cls, table: Mapping[Any, Any], **kwargs) -> "OperatorFunction":
        """Coefficients keyed by power; values are numbers or [re, im] pairs."""
        coefficients = {}
        for key, value in table.items():
            if isinstance(value, (list, tuple)):
                if len(value) != 2:
                    raise ArgumentError(f"Coefficient {key} must be a number or a [re, im] pair")
                value = complex(value[0], value[1])
            coefficients[int(key)] = complex(value)
        return cls(coefficients, **kwargs)

    def to_table(self) -> Dict[str, List[float]]:
        return {str(n): [c.real, c.imag] for n, c in self.coefficients.items()}

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        if self.l < 0 and np.any(z == 0):
            raise DomainError("The principal part is singular at z = 0")
        return sum(c * z ** n for n, c in self.coefficients.items())

    def inverse_taylor(self, mu: complex, order: int, scale: float = 1.0) -> np.ndarray:
        """Taylor coefficients of phi(1/zeta) in sigma, where zeta = mu + scale * sigma."""
        mu = np.complex128(mu)
        steps = (scale / mu) ** np.arange(order + 1)
        out = np.zeros(order + 1, dtype=complex)
        for n, c in self.coefficients.items():
            out += c * mu ** (-n) * _binomial(-n, order) * steps
        return out

    def matrix(self, W: OpMatrix) -> OpMatrix:
        """phi(W); negative powers go through a solve against W."""
        size = W.N
        total = np.zeros((size, size), dtype=complex)
        power = np.eye(size, dtype=complex)
        for n in range(0, self.k + 1):
            if n in self.coefficients:
                total += self.coefficients[n] * power
            power = W.entries @ power
        if self.l < 0:
            _require_invertible(W)
            inverse = solve(W.entries, np.eye(size))
            power = inverse
            for n in range(-1, self.l - 1, -1):
                if n in self.coefficients:
                    total += self.coefficients[n] * power
                power = inverse @ power
        return W.with_entries(total, Provenance.GENERIC, operation="operator_function")


@dataclass(frozen=True)
class PowerSymbol:
    """Principal pointwise power psi(z) = phi(z)^alpha"""
    base: OperatorFunction
    alpha: float

    def __call__(self, z):
        return np.power(np.asarray(self.base(z), dtype=complex), self.alpha)

    def inverse_taylor(self, mu: complex, order: int, scale: float = 1.0) -> np.ndarray:
        a = self.base.inverse_taylor(mu, order, scale)
        if self.alpha == 1.0:
            return a
        if a[0] == 0:
            raise DomainError(f"phi vanishes at {1.0 / complex(mu):.6g}; its power has no expansion there")
        b = np.zeros_like(a)
        b[0] = np.power(a[0], self.alpha)
        for j in range(1, order + 1):
            m = np.arange(1, j + 1)
            b[j] = np.sum(((self.alpha + 1.0) * m - j) * a[m] * b[j - m]) / (j * a[0])
        return b


Symbol = Union[OperatorFunction, PowerSymbol]


def power_symbol(phi: OperatorFunction, alpha: float) -> PowerSymbol:
    if not alpha > 0:
        raise DomainError(f"Power {alpha} must be positive")
    return PowerSymbol(phi, float(alpha))


def series_H(symbol: Symbol, z: complex, t, order: int) -> np.ndarray:
    """
    H_0..H_order of the symbol at z, for one time or an array of times.

    H_j is the j-th Taylor coefficient of exp(-t (psi(1/zeta) - psi(z))) about
    zeta = 1/z. Each power in psi(1/zeta) expands by the binomial series and the
    exponential by j g_j = sum_m m p_m g_(j-m). When that overflows the expansion
    is redone in the variable (zeta - 1/z) / |1/z| and scaled back.

    Returns:
        Array of shape (order + 1,) for scalar t, t.shape + (order + 1,) otherwise
    """
    z = complex(z)
    if z == 0:
        raise DomainError("H_j is defined for z != 0 only")
    if order < 0:
        raise ArgumentError(f"Order {order} must be non-negative")
    times = np.asarray(t, dtype=float)
    if np.any(times < 0):
        raise ArgumentError("Times must be non-negative")
    flat = np.atleast_1d(times).ravel()
    mu = 1.0 / z

    for scale in (1.0, abs(mu)):
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            a = symbol.inverse_taylor(mu, order, scale)
            p = -np.outer(flat, a[1:])
            g = np.zeros((flat.size, order + 1), dtype=complex)
            g[:, 0] = 1.0
            for j in range(1, order + 1):
                m = np.arange(1, j + 1)
                g[:, j] = np.sum(m * p[:, m - 1] * g[:, j - m], axis=1) / j
            H = g / scale ** np.arange(order + 1)
        if np.all(np.isfinite(H)):
            break
        logger.debug(f"series_H: overflow at scale {scale:.3g} for z={z:.6g}")
    else:
        raise SeriesOverflowError(f"Taylor coefficients of exp(-t psi) overflow at z={z:.6g}, order {order}")

    if times.ndim == 0:
        return H[0]
    return H.reshape(times.shape + (order + 1,))


def H_j(symbol: Symbol, z: complex, t, j: int):
    """Single coefficient H_j(phi, z, t)."""
    return series_H(symbol, z, t, j)[..., j]


def sector_check(phi: OperatorFunction, theta: Optional[float] = None) -> SectorReport:
    """max over n = 0..k of |arg c_n| + n theta, which must stay strictly below pi/2."""
    theta = phi.theta if theta is None else theta
    if theta is None:
        raise ArgumentError("No sector semi-angle supplied")
    if phi.truncated:
        raise ArgumentError("The sector condition covers finite regular parts; use growth_check")
    terms = {n: abs(float(np.angle(c))) + n * theta for n, c in phi.coefficients.items() if n >= 0 and c != 0}
    if not terms:
        return SectorReport(value=0.0, witness=0, passed=True)
    witness = max(terms, key=terms.get)
    value = terms[witness]
    return SectorReport(value=value, witness=witness, passed=value < 0.5 * math.pi)


def growth_check(phi: OperatorFunction, theta0: Optional[float], ray_samples: Sequence[float],
                 H: Optional[float] = None, rho: Optional[float] = None,
                 zeta: Optional[float] = None) -> GrowthReport:
    """
    Sample Re phi(z) on arg z = theta0 against exp(H r^rho).

    Missing arguments fall back to the function's growth certificate. The fitted C
    is the smallest ratio over the samples; the audit passes when it is positive
    and, with a sector half-angle zeta, when every sampled phi(z) lies inside it.
    """
    certificate = phi.growth
    if certificate is not None:
        theta0 = certificate.theta0 if theta0 is None else theta0
        H = certificate.H if H is None else H
        rho = certificate.rho if rho is None else rho
        zeta = certificate.zeta if zeta is None else zeta
    if theta0 is None or H is None or rho is None:
        raise ArgumentError("The growth audit needs theta0, H(theta0) and rho")
    if H <= 0:
        raise DomainError(f"H(theta0) = {H} must be positive")
    if rho < 0:
        raise DomainError(f"Growth order {rho} must be non-negative")
    radii = np.asarray(ray_samples, dtype=float)
    if radii.size == 0 or np.any(radii <= 0):
        raise ArgumentError("Ray samples must be positive radii")

    values = phi(radii * np.exp(1j * theta0))
    with np.errstate(over="ignore"):
        ratios = values.real / np.exp(H * radii ** rho)
    fitted_C = float(np.min(ratios))
    max_arg = float(np.max(np.abs(np.angle(values)))) if zeta is not None else None
    passed = fitted_C > 0 and (zeta is None or max_arg < zeta)
    return GrowthReport(theta0=theta0, H=H, rho=rho, fitted_C=fitted_C, max_arg=max_arg, passed=passed)


# ============================================================================
# Jordan systems
# ============================================================================

@dataclass
class JordanChain:
    """e_0..e_k of B = W^-1 at mu = 1/lam; duals in the order the chain of B* produces them"""
    lam: complex
    vectors: np.ndarray
    q: int = 0
    duals: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.vectors.shape[1]

    @property
    def k(self) -> int:
        return self.length - 1

    @property
    def mu(self) -> complex:
        return 1.0 / self.lam

    def coefficients(self, f: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """c_i = <f, g_(k-i)> / <e_i, g_(k-i)>."""
        if self.duals is None:
            raise ArgumentError("Build the biorthogonal system first")
        paired = self.duals[:, ::-1]
        numerators = (weights * f) @ paired.conj()
        denominators = np.sum(weights[:, None] * self.vectors * paired.conj(), axis=0)
        return numerators / denominators


@dataclass
class JordanSystem:
    """Chains of W^-1 grouped by characteristic number, with the block partition N_nu"""
    weights: np.ndarray
    eigenvalues: np.ndarray
    chains: List[JordanChain]
    partition: List[int]
    conditioning: float = 1.0

    @property
    def N(self) -> int:
        return self.weights.size

    @property
    def characteristic_numbers(self) -> np.ndarray:
        return self.eigenvalues

    @property
    def multiplicities(self) -> List[int]:
        return [sum(1 for chain in self.chains if chain.q == q) for q in range(len(self.eigenvalues))]

    @property
    def chain_lengths(self) -> List[int]:
        return [chain.length for chain in self.chains]

    @property
    def n_blocks(self) -> int:
        return len(self.partition) - 1

    @property
    def major_vectors(self) -> np.ndarray:
        return np.hstack([chain.vectors for chain in self.chains])

    @property
    def biorthogonal(self) -> np.ndarray:
        if any(chain.duals is None for chain in self.chains):
            raise ArgumentError("Build the biorthogonal system first")
        return np.hstack([chain.duals for chain in self.chains])

    def block_chains(self, nu: int) -> List[JordanChain]:
        if not 0 <= nu < self.n_blocks:
            raise ArgumentError(f"Block {nu} outside 0..{self.n_blocks - 1}")
        lo, hi = self.partition[nu], self.partition[nu + 1]
        return [chain for chain in self.chains if lo <= chain.q < hi]

    def pairing(self) -> np.ndarray:
        """Matrix of <e_i, g_j> over major vectors and biorthogonal vectors."""
        return self.major_vectors.T @ (self.weights[:, None] * self.biorthogonal.conj())

    def chain_residual(self, W: OpMatrix) -> float:
        B = solve(W.entries, np.eye(self.N))
        return max(_chain_residuals(B, self.chains))

    def describe(self) -> Dict[str, Any]:
        return {
            "eigenvalues": [[float(lam.real), float(lam.imag)] for lam in self.eigenvalues],
            "multiplicities": self.multiplicities,
            "chain_lengths": self.chain_lengths,
            "partition": list(self.partition),
            "conditioning": self.conditioning,
        }


def _require_invertible(W: OpMatrix) -> None:
    if np.linalg.cond(W.entries) > 1.0 / np.finfo(float).eps:
        raise PreconditionError("W is not invertible")


def _chain_residuals(B: np.ndarray, chains: List[JordanChain]) -> List[float]:
    """Relative residual of B e_i = mu e_i + e_(i-1), one value per chain."""
    scale = float(np.linalg.norm(B, 2))
    residuals = []
    for chain in chains:
        E = chain.vectors
        lower = np.hstack([np.zeros((E.shape[0], 1)), E[:, :-1]])
        R = B @ E - chain.mu * E - lower
        residuals.append(float(np.max(np.linalg.norm(R, axis=0) / (scale * np.linalg.norm(E, axis=0)))))
    return residuals


def decade_partition(eigenvalues: np.ndarray) -> List[int]:
    """Block boundaries N_nu where the modulus crosses a power of ten."""
    decades = np.floor(np.log10(np.abs(eigenvalues)))
    cuts = [i for i in range(1, decades.size) if decades[i] != decades[i - 1]]
    return [0] + cuts + [int(decades.size)]


def _cluster(values: np.ndarray, tol: float) -> List[np.ndarray]:
    """Single-linkage groups of values closer than tol relative to their size."""
    groups: List[List[int]] = []
    for idx in np.argsort(np.abs(values)):
        for group in groups:
            if np.min(np.abs(values[group] - values[idx])) <= tol * max(1.0, abs(values[idx])):
                group.append(int(idx))
                break
        else:
            groups.append([int(idx)])
    return [np.asarray(group) for group in groups]


def _cluster_chains(T: np.ndarray, mu: complex, tol: float) -> Optional[List[np.ndarray]]:
    """
    Jordan chains of the triangular block T at mu, longest first.

    Kernel dimensions of (T - mu)^p fix how many chains have each length; tops of
    the chains of length p are picked outside ker (T - mu)^(p-1) and outside the
    images of longer chains at the same height.
    """
    m = T.shape[0]
    M = T - mu * np.eye(m)
    scale = max(float(np.linalg.norm(T, 2)), 1.0)
    kernels = [np.zeros((m, 0), dtype=complex)]
    power = np.eye(m, dtype=complex)
    while kernels[-1].shape[1] < m and len(kernels) <= m:
        power = M @ power
        _, s, vh = svd(power)
        rank = int(np.count_nonzero(s > tol * scale ** len(kernels)))
        kernels.append(vh[rank:].conj().T)
    if kernels[-1].shape[1] != m:
        return None

    dims = [K.shape[1] for K in kernels]
    top = len(dims) - 1
    tops: List[Tuple[np.ndarray, int]] = []
    for p in range(top, 0, -1):
        longer = dims[p + 1] - dims[p] if p < top else 0
        exact = (dims[p] - dims[p - 1]) - longer
        if exact < 0:
            return None
        if exact == 0:
            continue
        span = [kernels[p - 1]] + [
            (np.linalg.matrix_power(M, length - p) @ y)[:, None] for y, length in tops
        ]
        taken = np.hstack(span)
        candidates = kernels[p]
        if taken.shape[1]:
            Q = orth(taken)
            candidates = candidates - Q @ (Q.conj().T @ candidates)
        u, _, _ = svd(candidates, full_matrices=False)
        tops.extend((u[:, column], p) for column in range(exact))

    chains = []
    for y, length in tops:
        vectors = [y]
        for _ in range(length - 1):
            vectors.append(M @ vectors[-1])
        chains.append(np.column_stack(vectors[::-1]))
    return chains


def _chains_from_jordan_form(W: OpMatrix, V: np.ndarray, J: np.ndarray, B: np.ndarray,
                             tol: float) -> List[Tuple[complex, np.ndarray]]:
    size = W.N
    if V.shape != (size, size) or J.shape != (size, size):
        raise ArgumentError(f"V and J must be {size}x{size}")
    mismatch = np.linalg.norm(W.entries @ V - V @ J)
    if mismatch > tol * np.linalg.norm(W.entries) * np.linalg.norm(V):
        raise ArgumentError(f"W differs from V J V^-1 (residual {mismatch:.3e})")
    bidiagonal = np.diag(np.diagonal(J)) + np.diag(np.diagonal(J, 1), 1)
    if np.any(J != bidiagonal):
        raise ArgumentError("J must be upper bidiagonal")

    starts = [0]
    for i in range(size - 1):
        if J[i, i + 1] == 0:
            starts.append(i + 1)
        elif J[i, i] != J[i + 1, i + 1]:
            raise ArgumentError(f"J couples different eigenvalues at row {i}")
    starts.append(size)

    raw = []
    for lo, hi in zip(starts[:-1], starts[1:]):
        lam = complex(J[lo, lo])
        vectors = [V[:, hi - 1]]
        for _ in range(hi - lo - 1):
            vectors.append(B @ vectors[-1] - vectors[-1] / lam)
        raw.append((lam, np.column_stack(vectors[::-1])))
    return raw


def _chains_from_spectrum(W: OpMatrix, B: np.ndarray, tol: float) -> List[Tuple[complex, np.ndarray]]:
    values, vectors = eig(W.entries)
    raw = []
    for members in _cluster(values, tol):
        lam = complex(np.mean(values[members]))
        if members.size == 1:
            raw.append((complex(values[members[0]]), vectors[:, members]))
            continue
        radius = float(np.max(np.abs(values[members] - lam))) + tol * max(1.0, abs(lam))
        T, Z, sdim = schur(B, output="complex", sort=lambda x: abs(1.0 / x - lam) <= radius)
        chains = _cluster_chains(T[:sdim, :sdim], 1.0 / lam, tol) if sdim == members.size else None
        if chains is None:
            raise ClusteringError("Generalized eigenspace does not match the cluster size",
                                  cluster=lam, residual=float(abs(sdim - members.size)))
        raw.extend((lam, Z[:, :sdim] @ chain) for chain in chains)
    return raw


def _assemble(W: OpMatrix, raw: List[Tuple[complex, np.ndarray]], tol: float) -> JordanSystem:
    weights = W.weights
    raw = sorted(raw, key=lambda item: (abs(item[0]), float(np.angle(item[0])), -item[1].shape[1]))
    eigenvalues: List[complex] = []
    chains = []
    for lam, vectors in raw:
        q = next((i for i, known in enumerate(eigenvalues)
                  if abs(lam - known) <= tol * max(1.0, abs(lam))), None)
        if q is None:
            eigenvalues.append(lam)
            q = len(eigenvalues) - 1
        vectors = np.asarray(vectors, dtype=complex)
        vectors = vectors / math.sqrt(float(np.sum(weights * np.abs(vectors[:, 0]) ** 2)))
        chains.append(JordanChain(lam=eigenvalues[q], vectors=vectors, q=q))
    chains.sort(key=lambda chain: chain.q)
    eigenvalues = np.asarray(eigenvalues, dtype=complex)
    conditioning = float(np.linalg.cond(np.hstack([chain.vectors for chain in chains])))
    return JordanSystem(weights=weights, eigenvalues=eigenvalues, chains=chains,
                        partition=decade_partition(eigenvalues), conditioning=conditioning)


def jordan_decompose(W: OpMatrix, tol: float = 1e-6, V: Optional[np.ndarray] = None,
                     J: Optional[np.ndarray] = None, residual_tol: float = 1e-8) -> JordanSystem:
    """
    Jordan chains of B = W^-1, grouped by characteristic number lambda = 1/mu.

    With V and J supplied (W = V J V^-1, J upper bidiagonal) every block of J
    yields one chain, grown from the last column of the block by repeated
    application of B - mu. Otherwise eigenvalues of W are clustered within tol
    and each cluster is resolved on its Schur invariant subspace. Blocks of
    size two resolve reliably at the default tolerance; longer blocks need the
    explicit form or a looser tol.

    Raises:
        PreconditionError: W is singular
        ClusteringError: a cluster does not yield chains satisfying the chain relation
    """
    _require_invertible(W)
    if (V is None) != (J is None):
        raise ArgumentError("Supply both V and J or neither")
    B = solve(W.entries, np.eye(W.N))
    if V is not None:
        raw = _chains_from_jordan_form(W, np.asarray(V, dtype=complex), np.asarray(J, dtype=complex), B, tol)
    else:
        raw = _chains_from_spectrum(W, B, tol)
    system = _assemble(W, raw, tol)

    residuals = _chain_residuals(B, system.chains)
    worst = int(np.argmax(residuals))
    if residuals[worst] > residual_tol:
        raise ClusteringError("Chain relation fails after extraction",
                              cluster=system.chains[worst].lam, residual=residuals[worst])
    if system.conditioning > COND_LIMIT:
        gaps = np.abs(np.subtract.outer(system.eigenvalues, system.eigenvalues)) + np.diag(
            np.full(system.eigenvalues.size, np.inf))
        closest = system.eigenvalues[np.unravel_index(np.argmin(gaps), gaps.shape)[0]]
        raise ClusteringError("Major vectors are numerically dependent; eigenvalues too close at this tolerance",
                              cluster=complex(closest), residual=1.0 / system.conditioning)
    logger.debug(f"jordan_decompose: {len(system.eigenvalues)} characteristic numbers, "
                 f"chain lengths {system.chain_lengths}, cond {system.conditioning:.3g}")
    return system


def biorthogonal_construct(system: JordanSystem, W: OpMatrix) -> JordanSystem:
    """
    Duals g_n with <e_i, g_(k-i)> = 1 inside each chain and 0 elsewhere.

    They are the columns of diag(w)^-1 V^-H, i.e. the left Jordan chains of W,
    stored per chain in reverse so that g_(q), g_(q+1), ... is the chain of B*
    starting from its eigenvector.
    """
    if W.N != system.N or not np.allclose(W.weights, system.weights):
        raise ArgumentError("Operator and Jordan system live on different spaces")
    V = system.major_vectors
    try:
        duals = solve(V.conj().T, np.eye(system.N)) / system.weights[:, None]
    except np.linalg.LinAlgError as exc:
        raise PreconditionError(f"Major vectors are linearly dependent: {exc}") from exc

    chains, offset = [], 0
    for chain in system.chains:
        block = duals[:, offset:offset + chain.length]
        chains.append(replace(chain, duals=block[:, ::-1].copy()))
        offset += chain.length
    updated = replace(system, chains=chains)

    for chain in updated.chains:
        denominators = np.sum(updated.weights[:, None] * chain.vectors * chain.duals[:, ::-1].conj(), axis=0)
        if np.any(np.abs(denominators) < 1e-12):
            raise PreconditionError(f"Vanishing pairing denominator in a chain at lambda={chain.lam:.6g}")
    return updated


# ============================================================================
# Series solver
# ============================================================================

def block_A_nu(system: JordanSystem, symbol: Symbol, t, f: np.ndarray, nu: int) -> np.ndarray:
    """
    Contribution of block nu: sum of e_i c_i(t) over its chains, where
    c_i(t) = exp(-psi(lambda) t) sum_j H_j c_(i+j).

    Returns:
        Vector of length N for scalar t, one row per time otherwise
    """
    f = np.asarray(f, dtype=complex)
    if f.shape != (system.N,):
        raise ArgumentError(f"Initial vector of shape {f.shape} does not fit size {system.N}")
    times = np.asarray(t, dtype=float)
    flat = np.atleast_1d(times).ravel()
    total = np.zeros((flat.size, system.N), dtype=complex)
    for chain in system.block_chains(nu):
        coeffs = chain.coefficients(f, system.weights)
        H = series_H(symbol, chain.lam, flat, chain.k)
        with np.errstate(over="ignore", invalid="ignore"):
            decay = np.exp(-symbol(chain.lam) * flat)
            moving = np.empty((flat.size, chain.length), dtype=complex)
            for i in range(chain.length):
                moving[:, i] = decay * (H[:, : chain.length - i] @ coeffs[i:])
            total += moving @ chain.vectors.T
    return total[0] if times.ndim == 0 else total


@dataclass
class CauchyProblem:
    """D^(1/alpha)_- u = phi(W) u for t >= 0 with u(0) = f"""
    W: OpMatrix
    phi: OperatorFunction
    alpha: float
    f: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=complex)
        self.times = np.asarray(self.times, dtype=float)
        if not self.alpha >= 1.0:
            raise DomainError(f"alpha = {self.alpha} must be at least 1")
        if self.f.shape != (self.W.N,):
            raise ArgumentError(f"Initial vector of shape {self.f.shape} does not fit size {self.W.N}")
        if self.times.ndim != 1 or self.times.size == 0 or self.times[0] != 0.0:
            raise ArgumentError("The time grid must start at 0")
        if np.any(np.diff(self.times) <= 0):
            raise ArgumentError("Times must increase")
        v = self.f
        for n in range(1, max(self.phi.k, 0) + 1):
            v = self.W.entries @ v
            if not np.all(np.isfinite(v)):
                raise DomainError(f"W^{n} f is not finite")

    @property
    def symbol(self) -> PowerSymbol:
        return power_symbol(self.phi, self.alpha)


@dataclass
class SeriesSolution:
    """u(t) = sum over retained blocks, one row per time"""
    times: np.ndarray
    blocks: np.ndarray
    block_norms: np.ndarray
    partial_sums: np.ndarray
    weights: np.ndarray
    residual: Optional[ResidualReport] = None
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def truncation(self) -> int:
        return self.blocks.shape[1]

    @property
    def values(self) -> np.ndarray:
        return self.blocks.sum(axis=1)

    def to_frame(self) -> pd.DataFrame:
        values = self.values
        columns: Dict[str, np.ndarray] = {"t": self.times}
        for j in range(values.shape[1]):
            columns[f"re_{j}"] = values[:, j].real
            columns[f"im_{j}"] = values[:, j].imag
        return pd.DataFrame(columns)

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")


def sector_angle(W: OpMatrix, rng: Optional[np.random.Generator] = None, count: int = SECTOR_PROBES) -> float:
    """Semi-angle about the origin of the sampled numerical range of W."""
    rng = rng if rng is not None else np.random.default_rng(0)
    return numerical_range_sample(W, count, rng=rng, vertex=0.0).theta


def _check_conditions(problem: CauchyProblem) -> None:
    phi = problem.phi
    if phi.truncated:
        if phi.growth is None:
            raise PreconditionError("A truncated regular part needs a growth certificate")
        moduli = np.abs(np.linalg.eigvals(problem.W.entries))
        radii = np.geomspace(moduli.min(), moduli.max(), 32) if moduli.max() > moduli.min() else moduli[:1]
        report = growth_check(phi, None, radii)
        if not report.passed:
            raise PreconditionError(f"Growth condition fails along arg z = {report.theta0:.4g} "
                                    f"(fitted C = {report.fitted_C:.3e})")
        return
    theta = phi.theta if phi.theta is not None else sector_angle(problem.W)
    report = sector_check(phi, theta)
    if not report.passed:
        raise PreconditionError(f"Sector condition fails: {report.value:.6f} >= pi/2 at n={report.witness}")


def solve_cauchy(problem: CauchyProblem, system: Optional[JordanSystem] = None, tol: float = 1e-12,
                 max_blocks: Optional[int] = None, check: bool = True) -> SeriesSolution:
    """
    Sum the blocks A_nu(phi^alpha, t) f over the partition of the Jordan system.

    Summation stops once three consecutive block norms (max over the time grid)
    fall below tol times the running sum, or when the blocks run out.

    Args:
        problem: Cauchy problem with its time grid
        system: Decomposition of W; computed by jordan_decompose when omitted
        tol: Relative size below which a block counts as small
        max_blocks: Budget of blocks; running past it without truncating raises
        check: Audit the sector or growth condition first

    Raises:
        PreconditionError: the convergence condition fails
        DivergenceError: a block is not finite or the budget runs out
    """
    if check:
        _check_conditions(problem)
    if system is None:
        system = jordan_decompose(problem.W)
    if any(chain.duals is None for chain in system.chains):
        system = biorthogonal_construct(system, problem.W)
    symbol = problem.symbol

    blocks, norms, partial = [], [], []
    running, small = 0.0, 0
    for nu in range(system.n_blocks):
        if max_blocks is not None and nu >= max_blocks:
            raise DivergenceError(f"No truncation within {max_blocks} blocks", partial)
        contribution = block_A_nu(system, symbol, problem.times, problem.f, nu)
        size = float(np.max(_weighted_norms(contribution, system.weights)))
        if not np.isfinite(size):
            raise DivergenceError(f"Block {nu} is not finite", partial)
        blocks.append(contribution)
        norms.append(size)
        running += size
        partial.append(running)
        small = small + 1 if size <= tol * running else 0
        if small >= SMALL_BLOCKS:
            logger.debug(f"solve_cauchy: truncated after block {nu}")
            break

    logger.info(f"solve_cauchy: {len(blocks)} of {system.n_blocks} blocks, alpha={problem.alpha}, "
                f"sum of block norms {running:.4g}")
    return SeriesSolution(
        times=problem.times,
        blocks=np.stack(blocks, axis=1),
        block_norms=np.asarray(norms),
        partial_sums=np.asarray(partial),
        weights=system.weights,
        meta={"alpha": problem.alpha, "system": system.describe()},
    )


def expm_oracle(problem: CauchyProblem, times: Optional[Sequence[float]] = None) -> np.ndarray:
    """exp(-phi(W) t) f by scaling and squaring; alpha = 1 only."""
    if problem.alpha != 1.0:
        raise ArgumentError("The matrix exponential solves the alpha = 1 problem only")
    generator = problem.phi.matrix(problem.W).entries
    times = problem.times if times is None else np.asarray(times, dtype=float)
    return np.stack([expm(-t * generator) @ problem.f for t in times])


def residual_check(solution: SeriesSolution, problem: CauchyProblem,
                   audit_times: Optional[Sequence[float]] = None,
                   tail: TailPolicy = TailPolicy.EXPONENTIAL, tail_tol: float = 1e-6) -> ResidualReport:
    """
    Relative residual ||D^(1/alpha)_- u - phi(W) u|| / ||phi(W) u|| at audit times.

    The default audit times are five nodes between 10% and 50% of the horizon,
    away from the start and from the truncated tail. The report is also stored
    on the solution.
    """
    times = problem.times
    values = solution.values
    if values.shape[0] != times.size:
        raise ArgumentError("Solution and problem use different time grids")
    u = GridFn(IntervalGrid.from_nodes(times), values)

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        deriv = frac_time_deriv(u, 1.0 / problem.alpha, TailPolicy(tail), tail_tol)
    tail_warning = False
    for record in caught:
        if issubclass(record.category, TailTruncationWarning):
            tail_warning = True
        else:
            warnings.warn(record.message, record.category)

    rhs = values @ problem.phi.matrix(problem.W).entries.T
    if audit_times is None:
        n = times.size
        indices = np.unique(np.linspace(n // 10, n // 2, 5).astype(int))
    else:
        indices = np.abs(times[:, None] - np.asarray(audit_times, dtype=float)[None, :]).argmin(axis=0)

    weights = problem.W.weights
    diff = _weighted_norms(deriv.values[indices] - rhs[indices], weights)
    scale = _weighted_norms(rhs[indices], weights)
    relative = np.where(scale > 0, diff / np.where(scale > 0, scale, 1.0), diff)
    if tail_warning:
        logger.warning("residual_check: the time-integral tail dominates the residual; extend the horizon")
    report = ResidualReport(
        audit_times=[float(t) for t in times[indices]],
        residuals=[float(r) for r in relative],
        max_relative_residual=float(np.max(relative)),
        tail_warning=tail_warning,
    )
    solution.residual = report
    return report


def uniqueness_diagnostic(problem: CauchyProblem, rng: Optional[np.random.Generator] = None,
                          count: int = SECTOR_PROBES) -> UniquenessReport:
    """Numerical range of phi(W) as a stand-in for the accretivity of D^(1-1/alpha)_- phi(W)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    report = numerical_range_sample(problem.phi.matrix(problem.W), count, rng=rng, vertex=0.0)
    return UniquenessReport(
        min_real=report.gamma_exact,
        theta=report.theta,
        accretive=report.passed,
        note="Accretivity of phi(W) on the space, standing in for that of the time-space operator",
    )
