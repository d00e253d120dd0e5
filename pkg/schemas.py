"""
Pydantic schemas for the FracSmith workbench
Defines parameter blocks, audit reports, experiment configs and run manifests
"""

import math
from datetime import datetime
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field, field_validator, model_validator


class Side(str, Enum):
    """Which endpoint a one-sided operator integrates from"""
    LEFT = "left"
    RIGHT = "right"


class TailPolicy(str, Enum):
    """How a time series is continued past its last sample"""
    EXPONENTIAL = "exponential"
    ZERO = "zero"


class PowerSign(str, Enum):
    """Sign of a fractional power"""
    POSITIVE = "positive"
    NEGATIVE = "negative"


class Provenance(str, Enum):
    """Where an operator matrix came from"""
    GENERATOR = "generator"
    WEIGHT = "weight"
    TRANSFORM = "transform"
    ELLIPTIC = "elliptic"
    ASSEMBLED = "assembled"
    POWER = "power"
    GENERIC = "generic"


class ExperimentKind(str, Enum):
    """Experiment kinds accepted by the CLI"""
    APPLY = "apply"
    POWER = "power"
    TRANSFORM = "transform"
    ASSEMBLE = "assemble"
    SOLVE = "solve"
    AUDIT = "audit"
    STUDY = "study"


class FracParams(BaseModel):
    """Order, truncation radius and Lebesgue exponent of a truncated fractional derivative"""
    alpha: float = Field(..., description="Fractional order, strictly between 0 and 1")
    epsilon: float = Field(..., description="Truncation radius")
    p: float = Field(default=2.0, description="Lebesgue exponent used for limits and norms")

    @field_validator("alpha")
    @classmethod
    def validate_alpha(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        return v

    @field_validator("epsilon")
    @classmethod
    def validate_epsilon(cls, v):
        if not v > 0.0:
            raise ValueError("epsilon must be positive")
        return v

    @field_validator("p")
    @classmethod
    def validate_p(cls, v):
        if not 1.0 <= v < math.inf:
            raise ValueError("p must satisfy 1 <= p < inf")
        return v


class EpsilonLimit(BaseModel):
    """Record of an epsilon -> 0 limit evaluation"""
    epsilons: List[float] = Field(default_factory=list, description="Truncation radii visited")
    distances: List[float] = Field(default_factory=list, description="Relative successive L_p distances")
    epsilon_final: float = Field(..., description="Radius of the returned iterate")
    converged: bool = Field(..., description="Whether the stopping rule was met")
    extrapolated: bool = Field(default=True, description="Whether Richardson elimination was applied")


class KipConstants(BaseModel):
    """Constants attached to the directional operators on one domain"""
    C_n_alpha: float = Field(..., description="(n-1)!/Gamma(n-alpha)")
    C_alpha_rho: float = Field(..., description="Accretivity constant of the weighted operator")
    C_alpha_d: float = Field(..., description="d^alpha/Gamma(alpha+1) norm bound of the integrals")
    monotone: bool = Field(..., description="Whether the monotone-weight formula was used")
    coercive: bool = Field(..., description="Whether C_alpha_rho is positive")

    @model_validator(mode="after")
    def validate_positive_constants(self):
        if self.C_n_alpha <= 0 or self.C_alpha_d <= 0:
            raise ValueError("C_n_alpha and C_alpha_d must be positive")
        return self


class BoundReport(BaseModel):
    """Audit of ||I^alpha u||_p <= C ||u||_p over random samples"""
    constant: float = Field(..., description="Bound constant d^alpha/Gamma(alpha+1)")
    max_ratio: float = Field(..., description="Largest observed ||I u|| / (C ||u||)")
    samples: int = Field(..., description="Number of random functions")
    slack: float = Field(..., description="Allowed relative discretization slack")
    violations: int = Field(..., description="Samples exceeding the bound plus slack")
    passed: bool = Field(..., description="True when there are no violations")


class RepresentationReport(BaseModel):
    """Convergence of I^alpha(phi_eps f) towards f"""
    epsilons: List[float] = Field(..., description="Audit sequence of truncation radii")
    errors: List[float] = Field(..., description="Total L_p error per radius")
    far_part: List[float] = Field(..., description="Error on long rays away from the origin")
    near_part: List[float] = Field(..., description="Error on long rays close to the origin")
    short_part: List[float] = Field(..., description="Error on rays shorter than the radius")
    monotone: bool = Field(..., description="Strict decrease of the total error")
    passed: bool = Field(..., description="Monotone and finite")


class MappingReport(BaseModel):
    """Finiteness of ||D^alpha f||_q over a discrete Sobolev suite"""
    q: float = Field(..., description="Target Lebesgue exponent")
    norms: List[float] = Field(..., description="||D^alpha f||_q per suite member")
    passed: bool = Field(..., description="Every norm is finite")


class AccretivityCheckReport(BaseModel):
    """Weighted accretivity audit of the Kipriyanov operator"""
    ratios: List[float] = Field(..., description="Re(f, D f)_rho / ||f||_rho^2 per test function")
    min_ratio: float = Field(..., description="Smallest ratio over the suite")
    constant: float = Field(..., description="Lower bound C_alpha_rho being audited")
    tolerance: float = Field(..., description="Absolute slack allowed below the constant")
    passed: bool = Field(..., description="min_ratio >= constant - tolerance")


class AccretivityReport(BaseModel):
    """Numerical range and resolvent audit of an operator matrix"""
    samples: int = Field(default=0, description="Number of Rayleigh quotients sampled")
    gamma_sampled: Optional[float] = Field(None, description="Smallest sampled real part")
    gamma_exact: Optional[float] = Field(None, description="Smallest eigenvalue of the Hermitian part")
    vertex: Optional[float] = Field(None, description="Sector vertex on the real axis")
    theta: Optional[float] = Field(None, description="Sector semi-angle about the vertex")
    sectorial: Optional[bool] = Field(None, description="theta < pi/2")
    lambdas: List[float] = Field(default_factory=list, description="Resolvent audit grid")
    resolvent_norms: List[float] = Field(default_factory=list, description="||(A+lambda)^-1|| per grid point")
    passed: bool = Field(..., description="Outcome of the audit that produced the report")


class ContractionReport(BaseModel):
    """||exp(-tA)|| <= 1 over a set of times"""
    times: List[float] = Field(..., description="Audited times")
    norms: List[float] = Field(..., description="Weighted operator norm of exp(-tA) per time")
    slack: float = Field(..., description="Allowed excess over one")
    passed: bool = Field(..., description="Every norm is at most 1 + slack")


class ThresholdReport(BaseModel):
    """Smallest ellipticity scale for which the perturbed operator passes the H1/H2 audit"""
    scale: float = Field(..., description="Smallest passing multiple of the base coefficients")
    gamma_a: float = Field(..., description="Ellipticity constant at that scale")
    rho_sup: float = Field(..., description="||rho||_inf of the perturbation weight")
    bracket: List[float] = Field(..., description="Final bisection bracket")
    iterations: int = Field(..., description="Bisection steps taken")
    passed: bool = Field(..., description="The audit passes at the upper end of the search range")


class NegPowerBoundReport(BaseModel):
    """||J^-alpha|| against 2(1-alpha)^-1 ||J^-1|| + alpha^-1"""
    alpha: float = Field(..., description="Order of the negative power")
    bound: Optional[float] = Field(None, description="Constant of the bound")
    actual: Optional[float] = Field(None, description="Computed norm of J^-alpha")
    skipped: bool = Field(default=False, description="True when the bound is singular")
    notice: Optional[str] = Field(None, description="Why the audit was skipped")
    passed: bool = Field(..., description="actual <= bound, or skipped")


class TransformAudit(BaseModel):
    """Coercivity condition gamma_G > C ||J^-1|| ||F|| of the transform J*GJ + FJ^alpha"""
    gamma_G: float = Field(..., description="Lower bound of the numerical range of G")
    norm_J_inv: float = Field(..., description="||J^-1||")
    norm_F: float = Field(..., description="||F||")
    C_alpha: float = Field(..., description="2 alpha^-1 ||J^-1|| + (1-alpha)^-1")
    C_one_minus_alpha: float = Field(..., description="2 (1-alpha)^-1 ||J^-1|| + alpha^-1")
    binding: str = Field(..., description="Reading that gives the larger threshold")
    condition_holds: bool = Field(..., description="gamma_G exceeds the binding threshold")
    coercivity: float = Field(..., description="min Re(Zf, f)/||Jf||^2 over the space")


class H1H2Report(BaseModel):
    """Energy-space coercivity and boundedness constants of a form"""
    C1: float = Field(..., description="Sharp continuity constant")
    C2: float = Field(..., description="Sharp coercivity constant")
    probe_C1: float = Field(..., description="Largest probe ratio |(Lf,g)|/(|f|+ |g|+)")
    probe_C2: float = Field(..., description="Smallest probe ratio Re(Lf,f)/|f|+^2")
    passed: bool = Field(..., description="C2 > 0 and C1 finite")


class NormEquivalenceReport(BaseModel):
    """Equivalence constants between Cartesian and directional norms"""
    delta: float = Field(..., description="Determinant of the point matrix")
    c1: float = Field(..., description="Certified lower equivalence constant")
    c2: float = Field(..., description="Certified upper equivalence constant")
    probe_min: float = Field(..., description="Smallest probe norm ratio")
    probe_max: float = Field(..., description="Largest probe norm ratio")
    energy_c1: Optional[float] = Field(None, description="Lower constant between energy and H1_0 norms")
    energy_c2: Optional[float] = Field(None, description="Upper constant between energy and H1_0 norms")
    passed: bool = Field(..., description="0 < c1 <= c2 < inf")


class StencilComparison(BaseModel):
    """Probe residual between two discretizations of the same operator"""
    residual: float = Field(..., description="Interior max-norm residual")
    reference: float = Field(..., description="Interior max-norm of the oracle result")
    relative: float = Field(..., description="residual / reference")


class SectorReport(BaseModel):
    """Sector condition max_n(|arg c_n| + n theta) < pi/2"""
    value: float = Field(..., description="Attained maximum")
    witness: int = Field(..., description="Index attaining the maximum")
    passed: bool = Field(..., description="Strict inequality holds")


class GrowthReport(BaseModel):
    """Audit of Re phi(z) > C exp(H r^rho) along a ray"""
    theta0: float = Field(..., description="Ray argument")
    H: float = Field(..., description="Growth constant of the certificate")
    rho: float = Field(..., description="Growth order of the certificate")
    fitted_C: float = Field(..., description="Largest C compatible with the samples")
    max_arg: Optional[float] = Field(None, description="Largest |arg phi(z)| on the ray under a certified sector")
    passed: bool = Field(..., description="fitted_C > 0 and the ray image stays in the certified sector")


class ResidualReport(BaseModel):
    """Residual of D^(1/alpha) u - phi(W) u on interior audit times"""
    audit_times: List[float] = Field(default_factory=list, description="Times where the residual was measured")
    residuals: List[float] = Field(default_factory=list, description="Relative residual per audit time")
    max_relative_residual: float = Field(..., description="Largest relative residual")
    tail_warning: bool = Field(default=False, description="Tail model could not bound the neglected integral")


class UniquenessReport(BaseModel):
    """Accretivity proxy used as uniqueness diagnostic"""
    min_real: float = Field(..., description="Smallest real part of the numerical range of phi(W)")
    theta: Optional[float] = Field(None, description="Sector semi-angle of phi(W)")
    accretive: bool = Field(..., description="Accretive and sectorial about the origin")
    note: str = Field(..., description="What the proxy stands for")


class StudyReport(BaseModel):
    """Refinement or parameter sweep with a fitted convergence order"""
    axis_name: str = Field(..., description="Name of the swept quantity")
    axis: List[float] = Field(..., description="Swept values")
    values: List[float] = Field(..., description="Error or constant per swept value")
    order: Optional[float] = Field(None, description="Least-squares slope of -log(value) vs log(axis)")
    order_low: Optional[float] = Field(None, description="Lower end of the 95% interval")
    order_high: Optional[float] = Field(None, description="Upper end of the 95% interval")
    monotone: bool = Field(..., description="Values strictly decrease along the axis")
    tolerance: Optional[float] = Field(None, description="Declared tolerance for the last value")
    passed: bool = Field(..., description="Outcome against the declared criteria")

    @model_validator(mode="after")
    def validate_lengths(self):
        if len(self.axis) != len(self.values):
            raise ValueError("axis and values must have the same length")
        return self


class ExperimentConfig(BaseModel):
    """Configuration of one experiment run"""
    kind: ExperimentKind = Field(..., description="Experiment kind")
    name: str = Field(..., description="Registered experiment name within the kind")
    params: Dict[str, Any] = Field(default_factory=dict, description="Experiment parameters")
    inputs: Dict[str, str] = Field(default_factory=dict, description="Named input files")
    output_dir: Optional[str] = Field(None, description="Directory for artifacts")
    tolerances: Dict[str, float] = Field(default_factory=dict, description="Named tolerances")
    seed: Optional[int] = Field(None, description="Random seed")

    @field_validator("tolerances")
    @classmethod
    def validate_tolerances(cls, v):
        for key, value in v.items():
            if not value > 0:
                raise ValueError(f"Tolerance {key} must be positive")
        return v

    @field_validator("seed")
    @classmethod
    def validate_seed(cls, v):
        if v is not None and not 0 <= v < 2**64:
            raise ValueError("Seed must be an unsigned 64-bit integer")
        return v


class CatalogEntry(BaseModel):
    """One registered experiment"""
    kind: ExperimentKind = Field(..., description="Experiment kind")
    name: str = Field(..., description="Experiment name")
    operation: str = Field(..., description="Module operation exercised, as module.op")
    anchor: str = Field(..., description="Identity or inequality being checked")
    description: str = Field(default="", description="One-line summary")


class ExperimentResult(BaseModel):
    """Standard result format for all experiments"""
    experiment: str = Field(..., description="Name of the experiment")
    kind: ExperimentKind = Field(..., description="Experiment kind")
    success: bool = Field(..., description="Whether every audit passed")
    data: Optional[Any] = Field(None, description="Report payload")
    error_message: Optional[str] = Field(None, description="Error message if failed")
    anchor: Optional[str] = Field(None, description="Identity or inequality being checked")
    timestamp: datetime = Field(default_factory=datetime.now, description="Result timestamp")


class Manifest(BaseModel):
    """Provenance record written next to every set of artifacts"""
    experiment: str = Field(..., description="Experiment name")
    kind: ExperimentKind = Field(..., description="Experiment kind")
    operation: str = Field(..., description="Module operation exercised")
    anchor: str = Field(..., description="Identity or inequality being checked")
    config_sha256: str = Field(..., description="Hash of the canonical config JSON")
    inputs_sha256: Dict[str, str] = Field(default_factory=dict, description="Hash per input file")
    versions: Dict[str, str] = Field(default_factory=dict, description="Package versions")
    seed: int = Field(..., description="Seed actually used")
    wall_time_s: float = Field(..., description="Wall time of the run in seconds")
    exit_code: int = Field(..., description="Process exit code")
    created_at: datetime = Field(default_factory=datetime.now, description="Creation timestamp")
