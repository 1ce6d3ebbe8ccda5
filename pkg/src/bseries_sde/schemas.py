from datetime import datetime
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .drivers import DEFAULT_FINE_STEP


class Section(BaseModel):
    # Unknown keys are a hard error in every section.
    model_config = ConfigDict(extra="forbid")


# --- Experiment configuration ---

class ProblemSection(Section):
    name: Literal["rigid-body", "kubo", "fatigue"] = "rigid-body"
    inertia: Optional[List[float]] = None
    x0: Optional[List[float]] = None
    a: Optional[float] = None
    b: Optional[float] = None
    p: Optional[float] = None
    cutoff: bool = False
    cutoff_invariant: Literal["C", "H"] = "C"

    def params(self) -> Dict[str, Any]:
        return self.model_dump(exclude={"name", "cutoff", "cutoff_invariant"}, exclude_none=True)


class DriverSection(Section):
    lam: Literal[0, 1] = 1
    sigma: float = 0.5
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    scheme: Literal["gaussian", "discrete"] = "gaussian"
    points: Literal[2, 3, 4] = 3
    fine_step: float = Field(default=DEFAULT_FINE_STEP, gt=0.0)


class RunSection(Section):
    T: float = Field(default=0.5, gt=0.0)
    step_sizes: Optional[List[float]] = None
    step_exponents: Optional[List[int]] = None
    steps: Optional[List[int]] = None
    samples: int = Field(default=200, ge=2)
    mode: Literal["ms", "weak"] = "ms"
    weak_estimator: Literal["monte-carlo", "enumeration"] = "monte-carlo"
    observables: List[str] = Field(default_factory=lambda: ["X1^2"])
    reference: Literal["flow", "scheme"] = "flow"
    reference_method: str = "eps3"
    reference_step: float = Field(default=DEFAULT_FINE_STEP, gt=0.0)
    target_samples: int = Field(default=10_000, ge=2)
    enumeration_cap: int = Field(default=2_000_000, ge=1)
    solver_tol: float = Field(default=1e-13, gt=0.0)
    solver_max_iter: int = Field(default=100, ge=1)
    quadrature_points: Optional[int] = Field(default=None, ge=1)
    out: Optional[str] = None
    invalid_fraction: float = Field(default=0.01, ge=0.0, le=1.0)
    threads: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _one_ladder(self):
        given = [name for name in ("step_sizes", "step_exponents", "steps") if getattr(self, name) is not None]
        if len(given) != 1:
            raise ValueError(f"exactly one of step_sizes, step_exponents, steps is required (got {given or 'none'})")
        if self.steps is not None and any(n < 1 for n in self.steps):
            raise ValueError("steps must be positive integers")
        return self

    def step_ladder(self) -> List[float]:
        if self.step_sizes is not None:
            return [float(h) for h in self.step_sizes]
        if self.step_exponents is not None:
            return [2.0 ** -e for e in self.step_exponents]
        return [self.T / n for n in self.steps]


class MethodsSection(Section):
    names: List[str] = Field(min_length=1)


class AcceptanceSection(Section):
    slopes: Dict[str, Tuple[float, float]] = Field(default_factory=dict)


class ExperimentConfig(Section):
    problem: ProblemSection = Field(default_factory=ProblemSection)
    driver: DriverSection = Field(default_factory=DriverSection)
    run: RunSection
    methods: MethodsSection
    acceptance: AcceptanceSection = Field(default_factory=AcceptanceSection)

    @model_validator(mode="after")
    def _grid_compatible(self):
        enumeration = self.run.mode == "weak" and self.run.weak_estimator == "enumeration"
        if enumeration:
            if self.driver.scheme != "discrete":
                raise ValueError("enumeration needs driver.scheme = discrete")
            if self.run.steps is None:
                raise ValueError("weak enumeration needs run.steps (step counts), not step_sizes or step_exponents")
            return self
        if self.run.steps is not None:
            raise ValueError("run.steps is only valid for weak enumeration; use step_sizes or step_exponents")
        fine = self.driver.fine_step
        for h in self.run.step_ladder() + ([self.run.reference_step] if self.run.reference == "scheme" else []):
            ratio, steps = h / fine, self.run.T / h
            if abs(ratio - round(ratio)) > 1e-9 * ratio or abs(steps - round(steps)) > 1e-9 * steps:
                raise ValueError(f"step size {h} must be a multiple of the fine step {fine} and divide T={self.run.T}")
        return self

    @field_validator("methods")
    @classmethod
    def _known_methods(cls, methods: MethodsSection) -> MethodsSection:
        from .methods import METHOD_NAMES

        for name in methods.names:
            base, _, suffix = name.partition(".")
            if base not in METHOD_NAMES or suffix not in ("", "cutoff"):
                raise ValueError(f"unknown method '{name}'")
        return methods


# --- Results ---

class ConvergenceRow(BaseModel):
    method: str
    h: float
    samples: int
    invalid: int
    ms_error: Optional[float] = None
    ms_stderr: Optional[float] = None
    weak_obs: Optional[str] = None
    weak_error: Optional[float] = None
    weak_stderr: Optional[float] = None


class OrderFit(BaseModel):
    method: str
    family: str  # "ms" or the weak observable name
    slope: float
    intercept: float
    residual: float
    points: int


class ConvergenceReport(BaseModel):
    mode: Literal["ms", "weak"]
    rows: List[ConvergenceRow] = Field(default_factory=list)
    fits: List[OrderFit] = Field(default_factory=list)

    def fit_for(self, method: str, family: Optional[str] = None) -> Optional[OrderFit]:
        for fit in self.fits:
            if fit.method == method and (family is None or fit.family == family):
                return fit
        return None


class RunManifest(BaseModel):
    config: ExperimentConfig
    version: str
    resolved: Dict[str, Any] = Field(default_factory=dict)
    timestamp: datetime
    config_hash: Optional[str] = None
