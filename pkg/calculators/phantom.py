# Synthetic phantoms and Poisson transmission data

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from calculators.errors import ContractViolation, NumericalError
from calculators.projector import SystemMatrix, forward_project, predicted_means
from models.schemas import PhantomSpec, Primitive, ScanGeometry, SimulationSpec
from utils.shapes import centers_inside, primitive_geometry

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TransmissionData:
    """Measured counts d(y) and incident counts I0(y), one entry per ray."""
    d: np.ndarray
    i0: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        i0 = np.asarray(self.i0, dtype=np.float64)
        if d.shape != i0.shape or d.ndim != 1:
            raise ContractViolation(f"counts {d.shape} and incident counts {i0.shape} must be equal-length vectors")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise ContractViolation("counts must be finite and nonnegative")
        if not np.all(np.isfinite(i0)) or np.any(i0 <= 0):
            raise ContractViolation("incident counts must be finite and strictly positive")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "i0", i0)

    @property
    def rays(self) -> int:
        return self.d.shape[0]


def default_primitives(geometry: ScanGeometry) -> List[Primitive]:
    """
    Desk-scale test object, scaled to the image extent.

    A large soft-tissue-like disk, two small metal-like squares and a
    low-contrast insert (attenuation in inverse length units, mm^-1).
    """
    extent = min(geometry.nx, geometry.ny) * geometry.voxel_size
    square = 0.04 * extent
    return [
        Primitive(kind="ellipse", cx=0.0, cy=0.0, rx=0.4 * extent, ry=0.4 * extent, value=0.02),
        Primitive(kind="rectangle", cx=-0.15 * extent, cy=0.1 * extent, rx=square, ry=square, value=0.1),
        Primitive(kind="rectangle", cx=0.15 * extent, cy=0.1 * extent, rx=square, ry=square, value=0.1),
        Primitive(kind="ellipse", cx=0.0, cy=-0.18 * extent, rx=0.08 * extent, ry=0.08 * extent, value=0.025),
    ]


def voxel_centers(geometry: ScanGeometry):
    """Center coordinates (xs, ys), each of shape (ny, nx)."""
    size = geometry.voxel_size
    xs = -0.5 * geometry.nx * size + size * (np.arange(geometry.nx) + 0.5)
    ys = -0.5 * geometry.ny * size + size * (np.arange(geometry.ny) + 0.5)
    return np.meshgrid(xs, ys)


def rasterize_phantom(spec: PhantomSpec, geometry: ScanGeometry) -> np.ndarray:
    """
    Paint the phantom onto the voxel grid.

    Each voxel takes the value of the last primitive containing its center,
    otherwise the background. Every z-slice receives the same 2D pattern.

    Returns:
        attenuation image of shape (nz, ny, nx)
    """
    primitives = list(spec.primitives)
    if not primitives and spec.preset == "default":
        primitives = default_primitives(geometry)

    xs, ys = voxel_centers(geometry)
    slice_image = np.full((geometry.ny, geometry.nx), spec.background, dtype=np.float64)
    for primitive in primitives:
        inside = centers_inside(primitive_geometry(primitive), xs, ys)
        slice_image[inside] = primitive.value

    logger.info(f"Phantom: {len(primitives)} primitives, {np.count_nonzero(slice_image)} nonzero voxels per slice")
    return np.broadcast_to(slice_image, (geometry.nz, geometry.ny, geometry.nx)).copy()


def incident_counts(sim: SimulationSpec, rays: int) -> np.ndarray:
    """Expand a scalar or per-ray I0 to a vector."""
    if isinstance(sim.i0, list):
        i0 = np.asarray(sim.i0, dtype=np.float64)
        if i0.shape[0] != rays:
            raise ContractViolation(f"{i0.shape[0]} incident counts given for {rays} rays")
        return i0
    return np.full(rays, float(sim.i0), dtype=np.float64)


def simulate_counts(mu_true, H: SystemMatrix, sim: SimulationSpec) -> TransmissionData:
    """
    Simulate transmission data from a ground-truth image.

    Noiseless mode returns d = q(mu_true) exactly. Noisy mode draws
    d(y) ~ Poisson(q(y)) in ray order from a generator seeded with sim.seed
    (inversion for small means, rejection for large ones).

    Raises:
        NumericalError: predicted means outside the double range
    """
    i0 = incident_counts(sim, H.rows)
    q = predicted_means(i0, forward_project(H, mu_true))
    if not sim.noise:
        return TransmissionData(q.copy(), i0)

    rng = np.random.default_rng(sim.seed)
    try:
        d = rng.poisson(q).astype(np.float64)
    except ValueError as e:
        # numpy refuses means beyond its int64 sampling range
        raise NumericalError(f"Poisson sampling failed: {e}") from e
    logger.info(f"Simulated {H.rows} rays (seed {sim.seed}), mean count {d.mean():.1f}")
    return TransmissionData(d, i0)
