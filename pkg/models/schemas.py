import math
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, Field, field_validator, model_validator


def _split_list(value):
    """Accept comma-separated strings (INI values) for list fields."""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


# Geometry Models
class ScanGeometry(BaseModel):
    """
    Image grid plus the scanner's ray layout.

    Lengths are in one consistent unit (mm in the shipped configs). The image
    grid is centered at the origin; row `iy` spans y from
    `-ny*voxel_size/2 + iy*voxel_size`.
    """
    nx: int = Field(64, ge=1)
    ny: int = Field(64, ge=1)
    nz: int = Field(1, ge=1)
    voxel_size: float = 1.0
    n_views: int = Field(60, ge=0)
    n_detectors: int = Field(96, ge=0)
    beam: Literal["parallel", "fan"] = "fan"
    view_angles: Optional[List[float]] = None
    angular_span: Optional[float] = None
    detector_spacing: Optional[float] = None
    source_to_center: float = 200.0
    source_to_detector: float = 400.0

    split_angles = field_validator("view_angles", mode="before")(_split_list)

    @model_validator(mode="after")
    def _check_lengths(self):
        for name in ("voxel_size", "source_to_center", "source_to_detector"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.detector_spacing is not None and not self.detector_spacing > 0:
            raise ValueError("detector_spacing must be strictly positive")
        if self.view_angles is not None:
            if not all(math.isfinite(a) for a in self.view_angles):
                raise ValueError("view angles must be finite")
        if self.beam == "fan":
            if self.source_to_detector <= self.source_to_center:
                raise ValueError("source_to_detector must exceed source_to_center")
            if self.source_to_center <= self.half_diagonal:
                raise ValueError("source_to_center must place the source outside the image")
        return self

    @property
    def half_diagonal(self) -> float:
        return 0.5 * self.voxel_size * math.hypot(self.nx, self.ny)

    @property
    def diagonal(self) -> float:
        return 2.0 * self.half_diagonal

    @property
    def voxels_per_slice(self) -> int:
        return self.nx * self.ny

    @property
    def voxel_count(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def view_count(self) -> int:
        return len(self.view_angles) if self.view_angles is not None else self.n_views

    @property
    def rays_per_slice(self) -> int:
        return self.view_count * self.n_detectors

    @property
    def ray_count(self) -> int:
        return self.rays_per_slice * self.nz

    def angles(self) -> List[float]:
        """View angles in radians, evenly spaced unless given explicitly."""
        if self.view_angles is not None:
            return list(self.view_angles)
        span = self.angular_span
        if span is None:
            span = math.pi if self.beam == "parallel" else 2.0 * math.pi
        return [span * k / self.n_views for k in range(self.n_views)]

    def spacing(self) -> float:
        """Detector pitch; by default the fan or strip covers the whole image."""
        if self.detector_spacing is not None:
            return self.detector_spacing
        coverage = 2.0 * self.half_diagonal * 1.02
        if self.beam == "fan":
            # Flat detector: the tangent of the half fan angle scaled to the detector plane
            half_fan = math.asin(self.half_diagonal / self.source_to_center)
            coverage = 2.0 * self.source_to_detector * math.tan(half_fan) * 1.02
        return coverage / max(self.n_detectors, 1)


# Phantom Models
class Primitive(BaseModel):
    """Ellipse or rectangle; `rx`/`ry` are semi-axes or half extents."""
    kind: Literal["ellipse", "rectangle"]
    cx: float = 0.0
    cy: float = 0.0
    rx: float = Field(gt=0)
    ry: float = Field(gt=0)
    rotation_deg: float = 0.0
    value: float = Field(ge=0)


class PhantomSpec(BaseModel):
    """Piecewise-constant phantom. Later primitives overwrite earlier ones."""
    preset: Literal["default", "none"] = "default"
    background: float = Field(0.0, ge=0)
    primitives: List[Primitive] = Field(default_factory=list)


class SimulationSpec(BaseModel):
    """Incident counts, seed and noise switch for the Poisson simulator."""
    i0: Union[float, List[float]] = 1.0e5
    seed: int = 0
    noise: bool = True

    @field_validator("i0", mode="before")
    @classmethod
    def _parse_i0(cls, value):
        if isinstance(value, str) and "," in value:
            return [float(item) for item in _split_list(value)]
        return value

    @field_validator("i0")
    @classmethod
    def _positive_i0(cls, value):
        values = value if isinstance(value, list) else [value]
        if not all(v > 0 and math.isfinite(v) for v in values):
            raise ValueError("incident counts must be strictly positive and finite")
        return value


# Solver Models
class SolverSection(BaseModel):
    """Which solvers to run and how."""
    algorithm: Literal["am", "wam", "both"] = "both"
    am_iterations: int = Field(100, ge=1)
    wam_iterations: int = Field(300, ge=1)
    depth: int = Field(3, ge=0)
    tree: Literal["adaptive", "full", "approx"] = "adaptive"
    expansion_iterations: List[int] = Field(default_factory=lambda: [64, 128, 256])
    threshold_factor: float = Field(0.1, ge=0)
    init_value: float = 0.0
    column_cache_limit: Optional[int] = Field(None, ge=1)

    split_schedule = field_validator("expansion_iterations", mode="before")(_split_list)

    @field_validator("expansion_iterations")
    @classmethod
    def _sorted_schedule(cls, value):
        if any(v < 1 for v in value):
            raise ValueError("expansion iterations must be >= 1")
        return sorted(set(value))


class OutputSection(BaseModel):
    """Where and how results are written."""
    directory: Optional[str] = None
    formats: List[Literal["pgm", "raw"]] = Field(default_factory=lambda: ["pgm", "raw"])
    log_every: int = Field(10, ge=1)
    write_truth: bool = True
    tree_manifests: bool = True

    split_formats = field_validator("formats", mode="before")(_split_list)


class RunConfig(BaseModel):
    """Complete experiment description: one config file, one run directory."""
    geometry: ScanGeometry = Field(default_factory=ScanGeometry)
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    simulation: SimulationSpec = Field(default_factory=SimulationSpec)
    solver: SolverSection = Field(default_factory=SolverSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _check_compatibility(self):
        geometry = self.geometry
        if geometry.view_count < 1:
            raise ValueError("geometry.n_views: at least one view is required")
        if geometry.n_detectors < 1:
            raise ValueError("geometry.n_detectors: at least one detector is required")
        block = 2 ** self.solver.depth
        if geometry.nx < 4 or geometry.ny < 4:
            raise ValueError("geometry: nx and ny must be at least 4")
        if geometry.nx % block or geometry.ny % block:
            raise ValueError(f"geometry: nx and ny must be multiples of 2**depth = {block}")
        if isinstance(self.simulation.i0, list) and len(self.simulation.i0) != geometry.ray_count:
            raise ValueError(f"simulation.i0: expected {geometry.ray_count} per-ray values")
        return self


# Result Models
class ConvergenceRecord(BaseModel):
    """One row of a convergence log."""
    iter: int
    objective: float
    elapsed_s: float
    active_set: int
    cum_updates: int


class ClampReport(BaseModel):
    """Effect of clamping an output image at zero."""
    clipped_voxels: int
    max_clipped: float
    total_clipped: float


class ImageSidecar(BaseModel):
    """Scaling of a 16-bit PGM slice: level 0 is `min`, level `maxval` is `max`."""
    width: int
    height: int
    maxval: int
    min: float
    max: float

    def to_values(self, levels):
        return self.min + (self.max - self.min) * levels / self.maxval


class SolverSummary(BaseModel):
    """Outcome of one solver run."""
    solver: str
    iterations: int
    final_objective: float
    elapsed_s: float
    active_set: int
    cum_updates: int
    directory: str
    clamp: Optional[ClampReport] = None
    skipped_coefficients: int = 0
    unsolvable_coefficients: int = 0
    expansions: List[int] = Field(default_factory=list)


class CrossingPoint(BaseModel):
    """First point at which a run reaches the matched objective."""
    iter: Optional[int]
    elapsed_s: Optional[float]
    cum_updates: Optional[int]


class ComparisonReport(BaseModel):
    """Matched-objective analysis of two runs on identical data."""
    target_objective: float
    run_a: str
    run_b: str
    crossing_a: CrossingPoint
    crossing_b: CrossingPoint
    difference_max_abs: float
    difference_rmse: float
    rmse_a: Optional[float] = None
    rmse_b: Optional[float] = None
    files: Dict[str, str] = Field(default_factory=dict)


class ExperimentSummary(BaseModel):
    """Everything a run produced."""
    directory: str
    seed: int
    rays: int
    voxels: int
    runs: List[SolverSummary] = Field(default_factory=list)
    comparison: Optional[ComparisonReport] = None


# API Models
class CompareRequest(BaseModel):
    """Request model for comparing two finished run directories."""
    run_a: str
    run_b: str
    out: Optional[str] = None
