"""
One-dimensional fractional integrals and Marchaud derivatives on an interval
Serves as the n=1 base case and as the oracle for the directional operators

Singular kernels are handled by product integration: the function is
interpolated piecewise linearly and the kernel moments are integrated
exactly on every cell, so the endpoint singularity costs no accuracy.
"""

import math
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, Optional, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.signal import fftconvolve
from scipy.special import gamma, hyperu

from errors import ArgumentError, ConvergenceError, DomainError, TailTruncationWarning
from schemas import BoundReport, EpsilonLimit, FracParams, Side, TailPolicy

ROW_CHUNK = 512


@dataclass(frozen=True)
class IntervalGrid:
    """Ordered nodes a = x_0 < ... < x_M = b with positive trapezoid weights"""
    a: float
    b: float
    nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)

        if nodes.ndim != 1 or nodes.size < 2:
            raise ArgumentError("An interval grid needs at least two nodes")
        if np.any(np.diff(nodes) <= 0):
            raise ArgumentError("Grid nodes must be strictly increasing")
        if nodes[0] != self.a or nodes[-1] != self.b:
            raise ArgumentError("First and last node must coincide with the endpoints")
        if weights.shape != nodes.shape or np.any(weights <= 0):
            raise ArgumentError("Weights must be positive, one per node")
        length = self.b - self.a
        if abs(weights.sum() - length) > 1e-12 * length:
            raise ArgumentError("Weights must sum to the interval length")

        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    @classmethod
    def from_nodes(cls, nodes) -> "IntervalGrid":
        """Build a grid with trapezoid weights on arbitrary increasing nodes."""
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ArgumentError("An interval grid needs at least two nodes")
        return cls(float(nodes[0]), float(nodes[-1]), nodes, trapezoid_weights(nodes))

    @classmethod
    def uniform(cls, a: float, b: float, M: int) -> "IntervalGrid":
        """Uniform grid with M cells."""
        if M < 1:
            raise ArgumentError("A uniform grid needs at least one cell")
        if not b > a:
            raise ArgumentError("Interval endpoints must satisfy a < b")
        return cls.from_nodes(np.linspace(a, b, M + 1))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.nodes.shape

    @property
    def length(self) -> float:
        return self.b - self.a

    @property
    def h(self) -> float:
        """Largest cell width."""
        return float(np.max(np.diff(self.nodes)))

    @property
    def is_uniform(self) -> bool:
        steps = np.diff(self.nodes)
        return bool(np.allclose(steps, steps[0], rtol=1e-10, atol=0.0))

    def offsets(self, side: Side = Side.LEFT) -> np.ndarray:
        """Distance of every node from the chosen endpoint."""
        if side == Side.LEFT:
            return self.nodes - self.a
        return self.b - self.nodes

    def measure_weights(self) -> np.ndarray:
        return self.weights

    def sample(self, func: Callable[[np.ndarray], Any]) -> "GridFn":
        return GridFn(self, np.asarray(func(self.nodes), dtype=complex))

    def index_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"node": self.nodes})


@dataclass
class GridFn:
    """
    Complex samples of a function on an IntervalGrid or a RayMesh.

    Values may carry trailing component axes (vector-valued time series).
    Outside the grid the function is zero.
    """
    grid: Any
    values: np.ndarray
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        lead = self.values.shape[: len(self.grid.shape)]
        if lead != tuple(self.grid.shape):
            raise ArgumentError(
                f"Value shape {self.values.shape} does not match grid shape {self.grid.shape}"
            )

    @property
    def finite_mask(self) -> np.ndarray:
        mask = np.isfinite(self.values)
        return mask.reshape(mask.shape[: len(self.grid.shape)] + (-1,)).all(axis=-1)

    def with_values(self, values, **meta) -> "GridFn":
        merged = dict(self.meta)
        merged.update(meta)
        return GridFn(self.grid, values, merged)

    def lp_norm(self, p: float = 2.0) -> float:
        return lp_norm(self, p)

    def __call__(self, x) -> np.ndarray:
        """Evaluate by linear interpolation with zero extension (interval grids only)."""
        if not isinstance(self.grid, IntervalGrid):
            raise ArgumentError("Point evaluation is only defined on interval grids")
        x = np.asarray(x, dtype=float)
        nodes = self.grid.nodes
        out = np.interp(x, nodes, self.values.real) + 1j * np.interp(x, nodes, self.values.imag)
        inside = (x >= self.grid.a) & (x <= self.grid.b)
        return np.where(inside, out, 0.0)

    def to_frame(self) -> pd.DataFrame:
        if self.values.ndim != len(self.grid.shape):
            raise ArgumentError("Only scalar-valued functions have a CSV layout")
        frame = self.grid.index_frame()
        frame["re"] = self.values.real.ravel()
        frame["im"] = self.values.imag.ravel()
        return frame

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    @classmethod
    def from_csv(cls, path, grid) -> "GridFn":
        frame = pd.read_csv(path, float_precision="round_trip")
        missing = {"re", "im"} - set(frame.columns)
        if missing:
            raise ArgumentError(f"CSV {path} lacks columns {sorted(missing)}")
        if len(frame) != int(np.prod(grid.shape)):
            raise ArgumentError(f"CSV {path} has {len(frame)} rows, grid has {np.prod(grid.shape)} nodes")
        if isinstance(grid, IntervalGrid) and "node" in frame.columns:
            if not np.allclose(frame["node"].to_numpy(), grid.nodes, rtol=1e-12, atol=1e-14):
                raise ArgumentError(f"CSV {path} nodes do not match the grid")
        values = (frame["re"].to_numpy() + 1j * frame["im"].to_numpy()).reshape(grid.shape)
        return cls(grid, values)


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    """Composite trapezoid weights on arbitrary increasing nodes."""
    steps = np.diff(nodes)
    weights = np.zeros_like(nodes, dtype=float)
    weights[:-1] += 0.5 * steps
    weights[1:] += 0.5 * steps
    return weights


def lp_norm(f: GridFn, p: float = 2.0) -> float:
    """Discrete L_p norm; non-finite nodes are treated as a null set."""
    if not 1.0 <= p < math.inf:
        raise DomainError("p must satisfy 1 <= p < inf")
    return weighted_lp(f.values, f.grid.measure_weights(), p)


def weighted_lp(values: np.ndarray, weights: np.ndarray, p: float) -> float:
    mags = np.abs(values)
    if mags.ndim > weights.ndim:
        mags = np.linalg.norm(mags.reshape(weights.shape + (-1,)), axis=-1)
    mask = np.isfinite(mags)
    return float(np.sum(weights[mask] * mags[mask] ** p) ** (1.0 / p))


def check_order(alpha: float, allow_zero: bool = True) -> None:
    low_ok = alpha >= 0.0 if allow_zero else alpha > 0.0
    if not (low_ok and alpha < 1.0):
        raise DomainError(f"Order {alpha} outside [0, 1)")


def _interval(f: GridFn) -> IntervalGrid:
    if not isinstance(f.grid, IntervalGrid):
        raise ArgumentError("Expected a function on an interval grid")
    if f.values.size == 0:
        raise ArgumentError("Empty grid")
    return f.grid


def row_chunks(n: int, size: int = ROW_CHUNK) -> Iterator[slice]:
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def product_weights(offsets: np.ndarray, beta: float, cutoff: float = 0.0,
                    rows: Optional[slice] = None) -> np.ndarray:
    """
    Product-integration weights for the kernel (r - t)^(beta - 1).

    Row i of the result integrates a piecewise linear g over t in [0, r_i - cutoff]:
    sum_j W[i, j] g_j = int_0^{r_i - cutoff} g(t) (r_i - t)^(beta - 1) dt.

    Args:
        offsets: Increasing distances from the integration origin, offsets[0] = 0
        beta: Kernel exponent shift; beta > 0 for integrals, beta = -alpha for
            Marchaud difference quotients (then cutoff must be positive)
        cutoff: Distance from r_i left out of the integral
        rows: Optional slice of target rows

    Returns:
        Weight block of shape (rows, len(offsets))
    """
    r = np.asarray(offsets, dtype=float)
    if beta <= 0 and cutoff <= 0:
        raise DomainError("A non-integrable kernel needs a positive cutoff")
    targets = r if rows is None else r[rows]
    t0, t1 = r[:-1], r[1:]
    h = t1 - t0

    u_hi = targets[:, None] - t0[None, :]
    u_lo = np.maximum(targets[:, None] - t1[None, :], cutoff)
    active = u_hi > cutoff
    hi = np.where(active, u_hi, 1.0)
    lo = np.where(active, u_lo, 1.0)

    m0 = (hi ** beta - lo ** beta) / beta
    m1 = (hi ** (beta + 1.0) - lo ** (beta + 1.0)) / (beta + 1.0)
    slope = np.where(active, (hi * m0 - m1) / h[None, :], 0.0)
    flat = np.where(active, m0, 0.0)

    weights = np.zeros((targets.size, r.size))
    weights[:, :-1] += flat - slope
    weights[:, 1:] += slope
    return weights


def integrate_left(offsets: np.ndarray, values: np.ndarray, alpha: float) -> np.ndarray:
    """(1/Gamma(alpha)) int_0^r g(t)(r - t)^(alpha - 1) dt at every offset."""
    out = np.empty(values.shape, dtype=complex)
    for rows in row_chunks(offsets.size):
        out[rows] = product_weights(offsets, alpha, rows=rows) @ values
    return out / gamma(alpha)


def integrate_right(offsets: np.ndarray, values: np.ndarray, alpha: float) -> np.ndarray:
    """Mirror of integrate_left: integrates from each offset up to offsets[-1]."""
    reflected = offsets[-1] - offsets[::-1]
    return integrate_left(reflected, values[::-1], alpha)[::-1]


def difference_integral(offsets: np.ndarray, values: np.ndarray, alpha: float, eps: float,
                        dim: int = 1) -> np.ndarray:
    """
    int_0^{r - eps} [f(r) r^(n-1) - f(t) t^(n-1)] / ((r - t)^(alpha+1) r^(n-1)) dt.

    Rows with r < eps come back as zero; the caller supplies the closed-form branch.
    The difference is formed before summation so constants cancel exactly when n = 1.
    """
    if dim == 1:
        scaled = values
    else:
        scaled = values * offsets ** (dim - 1)
    out = np.zeros(values.shape, dtype=complex)
    for rows in row_chunks(offsets.size):
        block = product_weights(offsets, -alpha, cutoff=eps, rows=rows)
        diff = scaled[rows, None] - scaled[None, :]
        out[rows] = np.einsum("ij,ij->i", block, diff)
    if dim > 1:
        positive = offsets > 0
        out[positive] /= offsets[positive] ** (dim - 1)
    return out


def psi_left(offsets: np.ndarray, values: np.ndarray, alpha: float, eps: float,
             dim: int = 1) -> np.ndarray:
    """Truncated difference term psi^+_eps along one ray, both branches."""
    psi = difference_integral(offsets, values, alpha, eps, dim)
    near = offsets < eps
    with np.errstate(divide="ignore", invalid="ignore"):
        psi[near] = values[near] * (eps ** -alpha - offsets[near] ** -alpha) / alpha
    return psi


def psi_right(offsets: np.ndarray, values: np.ndarray, alpha: float, eps: float) -> np.ndarray:
    """Truncated difference term psi^-_eps along one ray, both branches."""
    reflected = offsets[-1] - offsets[::-1]
    return psi_left(reflected, values[::-1], alpha, eps)[::-1]


def truncated_values(offsets: np.ndarray, values: np.ndarray, alpha: float, eps: float,
                     side: Side, dim: int = 1) -> np.ndarray:
    """(f dist^-alpha + alpha psi_eps f) / Gamma(1 - alpha) along one ray or interval."""
    if side == Side.LEFT:
        dist, psi = offsets, psi_left(offsets, values, alpha, eps, dim)
    else:
        dist, psi = offsets[-1] - offsets, psi_right(offsets, values, alpha, eps)
    with np.errstate(divide="ignore", invalid="ignore"):
        return (values * dist ** -alpha + alpha * psi) / gamma(1.0 - alpha)


def limit_values(offsets: np.ndarray, values: np.ndarray, alpha: float, eps: float,
                 side: Side, dim: int = 1) -> np.ndarray:
    """
    Iterate of the eps-limit: (f dist^-alpha + alpha D_eps f) / Gamma(1 - alpha).

    D_eps is the difference integral cut at dist - eps, zero on rows with dist < eps,
    so those rows carry the local term alone and constants are exact at every
    node with dist > 0 when n = 1.
    """
    if side == Side.LEFT:
        dist, diff = offsets, difference_integral(offsets, values, alpha, eps, dim)
    else:
        reflected = offsets[-1] - offsets[::-1]
        dist = offsets[-1] - offsets
        diff = difference_integral(reflected, values[::-1], alpha, eps)[::-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return (values * dist ** -alpha + alpha * diff) / gamma(1.0 - alpha)


def rl_integral_left(f: GridFn, alpha: float) -> GridFn:
    """
    Left Riemann-Liouville integral (1/Gamma(a)) int_0^r f(a + t)(r - t)^(a-1) dt.

    Args:
        f: Function on an IntervalGrid
        alpha: Order in [0, 1); order zero is the identity

    Returns:
        GridFn of the integral at every node
    """
    grid = _interval(f)
    check_order(alpha)
    if alpha == 0.0:
        return f.with_values(f.values.copy(), operation="rl_integral_left", alpha=0.0)
    values = integrate_left(grid.offsets(Side.LEFT), f.values, alpha)
    return f.with_values(values, operation="rl_integral_left", alpha=alpha)


def rl_integral_right(f: GridFn, alpha: float) -> GridFn:
    """Right Riemann-Liouville integral over (x, b) with kernel (t - x)^(alpha - 1)."""
    grid = _interval(f)
    check_order(alpha)
    if alpha == 0.0:
        return f.with_values(f.values.copy(), operation="rl_integral_right", alpha=0.0)
    values = integrate_right(grid.offsets(Side.LEFT), f.values, alpha)
    return f.with_values(values, operation="rl_integral_right", alpha=alpha)


def marchaud_trunc_left(f: GridFn, params: FracParams) -> GridFn:
    """
    Truncated Marchaud derivative f r^-a / Gamma(1-a) + a psi^+_eps f / Gamma(1-a).

    The node r = 0 has no finite value and is returned as NaN; norms skip it.
    """
    grid = _interval(f)
    values = truncated_values(grid.offsets(Side.LEFT), f.values, params.alpha, params.epsilon, Side.LEFT)
    nonfinite = int(np.count_nonzero(~np.isfinite(values)))
    if nonfinite:
        logger.debug(f"marchaud_trunc_left: {nonfinite} non-finite node(s) at the origin")
    return f.with_values(values, operation="marchaud_trunc_left", alpha=params.alpha,
                         epsilon=params.epsilon, nonfinite_nodes=nonfinite)


def marchaud_trunc_right(f: GridFn, params: FracParams) -> GridFn:
    """Right-side truncated Marchaud derivative; the node x = b is returned as NaN."""
    grid = _interval(f)
    values = truncated_values(grid.offsets(Side.LEFT), f.values, params.alpha, params.epsilon, Side.RIGHT)
    nonfinite = int(np.count_nonzero(~np.isfinite(values)))
    return f.with_values(values, operation="marchaud_trunc_right", alpha=params.alpha,
                         epsilon=params.epsilon, nonfinite_nodes=nonfinite)


def epsilon_limit(
    evaluate: Callable[[float], np.ndarray],
    distance: np.ndarray,
    weights: np.ndarray,
    alpha: float,
    p: float,
    tol: float,
    eps0: float,
    eps_floor: float,
    stages: int = 2,
) -> Tuple[np.ndarray, EpsilonLimit]:
    """
    Evaluate lim_{eps -> 0} of a truncated operator by a Cauchy stopping rule.

    Radii follow eps_k = eps0 2^-k down to eps_floor. The truncation error
    expands in powers eps^(j - alpha), j = 1, 2, ...; the first `stages` terms
    are eliminated node-wise by Richardson steps, only at nodes whose distance
    from the origin keeps them in the r >= eps branch at every level involved.
    The stopping rule compares successive iterates on the nodes resolved at both
    radii. Rows closer than the accepted radius are refilled by a Richardson step
    over the two finest radii.

    Args:
        evaluate: Maps a radius to the truncated operator values
        distance: Distance of every node from the integration origin
        weights: Quadrature weights for the discrete L_p norm
        alpha: Order of the operator
        p: Lebesgue exponent of the stopping rule
        tol: Relative tolerance ||E_k - E_{k-1}|| <= tol ||E_k||
        eps0: First radius
        eps_floor: Smallest admissible radius
        stages: Number of Richardson eliminations

    Returns:
        Values of the accepted iterate and the EpsilonLimit record
    """
    if eps0 < eps_floor:
        raise ArgumentError(f"Initial radius {eps0:.3g} below the resolvable floor {eps_floor:.3g}")

    ratios = [2.0 ** (alpha - j) for j in range(1, stages + 1)]
    epsilons, distances = [], []
    table = []
    previous = None
    eps = eps0

    while eps >= eps_floor * (1.0 - 1e-12):
        row = [evaluate(eps)]
        epsilons.append(eps)
        for s, q in enumerate(ratios, start=1):
            if len(table) < s:
                break
            prior = table[-1][s - 1]
            mask = distance >= epsilons[-1 - s] * (1.0 - 1e-12)
            step = row[s - 1].copy()
            step[mask] = (row[s - 1][mask] - q * prior[mask]) / (1.0 - q)
            row.append(step)
        table.append(row)
        estimate = row[-1]

        if previous is not None:
            far = distance >= epsilons[-2] * (1.0 - 1e-12)
            scale = weighted_lp(estimate[far], weights[far], p)
            change = weighted_lp(estimate[far] - previous[far], weights[far], p)
            dist = change / scale if scale > 0 else change
            distances.append(float(dist))
            logger.debug(f"epsilon_limit: eps={eps:.3e} relative change={dist:.3e}")
            if dist <= tol:
                if eps > eps_floor * (1.0 + 1e-12):
                    estimate = _fill_inside(evaluate, estimate, distance, alpha, eps, eps_floor)
                return estimate, EpsilonLimit(epsilons=epsilons, distances=distances,
                                              epsilon_final=eps, converged=True,
                                              extrapolated=stages > 0)
        previous = estimate
        eps /= 2.0

    raise ConvergenceError(
        f"Truncated operator did not settle to {tol:.1e} before eps reached {eps_floor:.3e}",
        distances=distances, epsilons=epsilons, iterate=previous,
    )


def _fill_inside(evaluate, estimate: np.ndarray, distance: np.ndarray, alpha: float,
                 eps: float, eps_floor: float) -> np.ndarray:
    """Replace rows closer than eps by one Richardson step over the two finest radii."""
    near = distance < eps * (1.0 - 1e-12)
    fine = evaluate(eps_floor)
    coarse = evaluate(2.0 * eps_floor)
    q = 2.0 ** (alpha - 1.0)
    both = near & (distance >= 2.0 * eps_floor * (1.0 - 1e-12))
    fill = fine.copy()
    fill[both] = (fine[both] - q * coarse[both]) / (1.0 - q)
    out = estimate.copy()
    out[near] = fill[near]
    return out


def _marchaud_limit(f: GridFn, alpha: float, tol: float, p: float, eps0: Optional[float],
                    side: Side) -> GridFn:
    grid = _interval(f)
    check_order(alpha)
    name = "marchaud_deriv_left" if side == Side.LEFT else "marchaud_deriv_right"
    if alpha == 0.0:
        return f.with_values(f.values.copy(), operation=name, alpha=0.0)

    offsets = grid.offsets(Side.LEFT)
    distance = offsets if side == Side.LEFT else grid.length - offsets
    floor = 2.0 * grid.h
    start = eps0 if eps0 is not None else max(grid.length / 8.0, floor)

    values, record = epsilon_limit(
        lambda eps: limit_values(offsets, f.values, alpha, eps, side),
        distance, grid.weights, alpha, p, tol, start, floor,
    )
    logger.debug(f"{name}: accepted eps={record.epsilon_final:.3e} after {len(record.epsilons)} levels")
    return f.with_values(values, operation=name, alpha=alpha, limit=record.model_dump())


def marchaud_deriv_left(f: GridFn, alpha: float, tol: float = 1e-4, p: float = 2.0,
                        eps0: Optional[float] = None) -> GridFn:
    """
    Left Marchaud derivative as the L_p limit of the truncated derivatives.

    Raises:
        ConvergenceError: the stopping rule was not met before eps hit 2h
    """
    return _marchaud_limit(f, alpha, tol, p, eps0, Side.LEFT)


def marchaud_deriv_right(f: GridFn, alpha: float, tol: float = 1e-4, p: float = 2.0,
                         eps0: Optional[float] = None) -> GridFn:
    """Right Marchaud derivative, mirror of marchaud_deriv_left."""
    return _marchaud_limit(f, alpha, tol, p, eps0, Side.RIGHT)


def weighted_composition(f: GridFn, sigma: float, gamma_: float, rho: GridFn,
                         tol: float = 1e-4) -> GridFn:
    """
    I^sigma_{0+} rho D^gamma_{b-} f.

    Nodes where the derivative has no finite value enter the integral as zero.
    """
    grid = _interval(f)
    if rho.grid is not grid and not np.array_equal(rho.grid.nodes, grid.nodes):
        raise ArgumentError("rho must live on the same grid as f")
    if not np.all(np.isfinite(rho.values)) or np.max(np.abs(rho.values.imag)) > 0:
        raise DomainError("rho must be real-valued and bounded")

    derivative = marchaud_deriv_right(f, gamma_, tol=tol)
    weighted = rho.values.real * derivative.values
    null_nodes = ~np.isfinite(weighted)
    weighted = np.where(null_nodes, 0.0, weighted)
    result = rl_integral_left(derivative.with_values(weighted), sigma)
    return result.with_values(result.values, operation="weighted_composition", sigma=sigma,
                              gamma=gamma_, null_nodes=int(np.count_nonzero(null_nodes)))


def uniform_right_integral(values: np.ndarray, order: float, dt: float) -> np.ndarray:
    """
    int_{t_i}^{t_N} u(s)(s - t_i)^(order - 1) ds on a uniform grid, without 1/Gamma.

    The interior product-integration weights depend only on the index gap,
    so the sum is a convolution evaluated by FFT.
    """
    u = values.reshape(values.shape[0], -1)
    n_last = u.shape[0] - 1
    m = np.arange(n_last + 1, dtype=float)
    o1 = order + 1.0

    kernel = np.zeros(n_last + 1)
    kernel[1:] = (m[1:] + 1.0) ** o1 - 2.0 * m[1:] ** o1 + (m[1:] - 1.0) ** o1
    endpoint = np.zeros(n_last + 1)
    endpoint[1:] = (m[1:] - 1.0) ** o1 - (m[1:] - 1.0 - order) * m[1:] ** order

    conv = fftconvolve(u[::-1], kernel[:, None], axes=0)[: n_last + 1]
    gaps = n_last - np.arange(n_last + 1)
    interior = conv[gaps] - kernel[gaps, None] * u[-1]
    total = u + interior + endpoint[gaps, None] * u[-1]
    total[-1] = 0.0
    scale = dt ** order / (order * o1)
    return (scale * total).reshape(values.shape)


def _exponential_tail(times: np.ndarray, values: np.ndarray, beta: float,
                      tol: float) -> Tuple[np.ndarray, Dict[str, Any]]:
    """Tail int_T^inf u(s)(s - t)^-beta ds with u continued as u(T) exp(-kappa (s - T))."""
    n = times.size
    window = max(10, n // 10)
    t_fit = times[-window:]
    mags = np.linalg.norm(values.reshape(n, -1)[-window:], axis=1)
    last = values[-1]

    if np.all(mags == 0):
        return np.zeros_like(values), {"kappa": None, "bound": 0.0}
    if np.any(mags == 0):
        return np.zeros_like(values), {"kappa": None, "bound": math.inf}

    slope, intercept = np.polyfit(t_fit, np.log(mags), 1)
    kappa = -float(slope)
    if not np.isfinite(kappa) or kappa <= 0:
        return np.zeros_like(values), {"kappa": kappa, "bound": math.inf}

    fit = np.exp(intercept + slope * t_fit)
    misfit = float(np.max(np.abs(fit - mags) / mags))

    c = times[-1] - times
    kernel = np.empty(n)
    positive = c > 0
    kernel[positive] = c[positive] ** (1.0 - beta) * hyperu(1.0, 2.0 - beta, kappa * c[positive])
    kernel[~positive] = gamma(1.0 - beta) * kappa ** (beta - 1.0)
    tail = kernel.reshape((n,) + (1,) * (values.ndim - 1)) * last
    bound = misfit * float(np.max(np.abs(tail)))
    return tail, {"kappa": kappa, "bound": bound}


def frac_time_deriv(u: GridFn, alpha_inv: float, tail: TailPolicy = TailPolicy.EXPONENTIAL,
                    tol: float = 1e-6) -> GridFn:
    """
    D^{1/alpha}_- u = -(1/Gamma(1 - 1/alpha)) d/dt int_0^inf u(t + x) x^(-1/alpha) dx.

    Args:
        u: Samples on a uniform time grid starting at 0, optionally vector-valued
        alpha_inv: The order 1/alpha in [0, 1]; 1 gives -du/dt, 0 the identity
        tail: Continuation past the last sample (exponential fit or zero)
        tol: Relative size of the neglected tail that triggers a warning

    Returns:
        GridFn of the derivative; meta records the tail policy, fitted rate and bound
    """
    grid = _interval(u)
    if not grid.is_uniform:
        raise ArgumentError("frac_time_deriv needs a uniform time grid")
    if not 0.0 <= alpha_inv <= 1.0:
        raise DomainError(f"Time order {alpha_inv} outside [0, 1]")
    beta = alpha_inv
    dt = grid.h

    if beta == 0.0:
        return u.with_values(u.values.copy(), operation="frac_time_deriv", order=0.0)
    if beta == 1.0:
        deriv = -np.gradient(u.values, dt, axis=0, edge_order=2)
        return u.with_values(deriv, operation="frac_time_deriv", order=1.0)

    body = uniform_right_integral(u.values, 1.0 - beta, dt)
    if tail == TailPolicy.EXPONENTIAL:
        tail_values, info = _exponential_tail(grid.nodes, u.values, beta, tol)
        scale = float(np.max(np.abs(body))) or 1.0
        if info["bound"] > tol * scale:
            message = (f"Tail of the time integral bounded only by {info['bound']:.3e} "
                       f"(relative tolerance {tol:.1e})")
            logger.warning(message)
            warnings.warn(message, TailTruncationWarning)
    else:
        tail_values, info = np.zeros_like(body), {"kappa": None, "bound": 0.0}

    integral = body + tail_values
    deriv = -np.gradient(integral, dt, axis=0, edge_order=2) / gamma(1.0 - beta)
    return u.with_values(deriv, operation="frac_time_deriv", order=beta, tail=tail.value,
                         kappa=info["kappa"], tail_bound=info["bound"])


def norm_bound_audit(grid: IntervalGrid, alpha: float, p: float, samples: int,
                     rng: np.random.Generator, side: Side = Side.LEFT,
                     slack: float = 1e-8) -> BoundReport:
    """Check ||I^alpha u||_p <= (d^alpha / Gamma(alpha+1)) ||u||_p on random u."""
    check_order(alpha, allow_zero=False)
    constant = grid.length ** alpha / gamma(alpha + 1.0)
    integral = rl_integral_left if side == Side.LEFT else rl_integral_right
    ratios = []
    for _ in range(samples):
        u = GridFn(grid, rng.standard_normal(grid.shape))
        ratios.append(lp_norm(integral(u, alpha), p) / (constant * lp_norm(u, p)))
    ratios = np.asarray(ratios)
    violations = int(np.count_nonzero(ratios > 1.0 + slack))
    return BoundReport(constant=constant, max_ratio=float(ratios.max()), samples=samples,
                       slack=slack, violations=violations, passed=violations == 0)
