# Scan geometry, exact ray tracing and the Beer's-law transmission model

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.special import kl_div

from calculators.errors import ConfigurationError, ContractViolation, NumericalError
from models.schemas import ScanGeometry

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class VoxelGrid:
    """Axis-aligned 2D grid centered at the origin."""
    nx: int
    ny: int
    voxel_size: float

    @property
    def x_min(self) -> float:
        return -0.5 * self.nx * self.voxel_size

    @property
    def y_min(self) -> float:
        return -0.5 * self.ny * self.voxel_size

    @classmethod
    def from_geometry(cls, geometry: ScanGeometry) -> "VoxelGrid":
        return cls(geometry.nx, geometry.ny, geometry.voxel_size)


def trace_ray(start, end, grid: VoxelGrid) -> Tuple[np.ndarray, np.ndarray]:
    """
    Exact intersection lengths of the segment start->end with every voxel.

    Incremental (Siddon) traversal: the parametric positions where the
    segment crosses grid planes are merged, and each interval between
    consecutive crossings lies in exactly one voxel.

    Args:
        start: (x, y) of the segment start
        end: (x, y) of the segment end
        grid: voxel grid

    Returns:
        (flat voxel indices iy*nx + ix, intersection lengths), lengths > 0
    """
    x0, y0 = float(start[0]), float(start[1])
    dx, dy = float(end[0]) - x0, float(end[1]) - y0
    length = math.hypot(dx, dy)
    empty = (np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64))
    if length == 0.0:
        return empty

    x_planes = grid.x_min + grid.voxel_size * np.arange(grid.nx + 1)
    y_planes = grid.y_min + grid.voxel_size * np.arange(grid.ny + 1)

    alpha_lo, alpha_hi = 0.0, 1.0
    crossings = []
    for origin, delta, planes in ((x0, dx, x_planes), (y0, dy, y_planes)):
        if delta == 0.0:
            # Parallel to this axis: must lie strictly inside the slab
            if not planes[0] < origin < planes[-1]:
                return empty
            continue
        alphas = (planes - origin) / delta
        alpha_lo = max(alpha_lo, min(alphas[0], alphas[-1]))
        alpha_hi = min(alpha_hi, max(alphas[0], alphas[-1]))
        crossings.append(alphas)

    if alpha_hi <= alpha_lo:
        return empty

    alphas = np.concatenate(crossings + [np.array([alpha_lo, alpha_hi])])
    alphas = np.unique(alphas[(alphas >= alpha_lo) & (alphas <= alpha_hi)])
    lengths = np.diff(alphas) * length
    mids = 0.5 * (alphas[:-1] + alphas[1:])

    ix = np.floor((x0 + mids * dx - grid.x_min) / grid.voxel_size).astype(np.int64)
    iy = np.floor((y0 + mids * dy - grid.y_min) / grid.voxel_size).astype(np.int64)
    np.clip(ix, 0, grid.nx - 1, out=ix)
    np.clip(iy, 0, grid.ny - 1, out=iy)

    keep = lengths > 0.0
    return iy[keep] * grid.nx + ix[keep], lengths[keep]


def ray_endpoints(geometry: ScanGeometry) -> Tuple[np.ndarray, np.ndarray]:
    """
    Start and end points of every ray of one slice, ordered view-major.

    Parallel beam: rays run along (-sin t, cos t) at detector offsets along
    (cos t, sin t), long enough to cross the whole image. Fan beam: the source
    sits at distance source_to_center along (cos t, sin t) and each ray ends
    on a flat detector at distance source_to_detector on the opposite side.

    Returns:
        (starts, ends) arrays of shape (views * detectors, 2)
    """
    angles = np.asarray(geometry.angles(), dtype=np.float64)
    n_det = geometry.n_detectors
    offsets = (np.arange(n_det, dtype=np.float64) - 0.5 * (n_det - 1)) * geometry.spacing()

    cos_t = np.cos(angles)[:, None]
    sin_t = np.sin(angles)[:, None]
    if geometry.beam == "parallel":
        reach = geometry.half_diagonal + geometry.voxel_size
        base_x = offsets[None, :] * cos_t
        base_y = offsets[None, :] * sin_t
        start_x, start_y = base_x + reach * sin_t, base_y - reach * cos_t
        end_x, end_y = base_x - reach * sin_t, base_y + reach * cos_t
    else:
        src_x = geometry.source_to_center * cos_t
        src_y = geometry.source_to_center * sin_t
        det_x = src_x - geometry.source_to_detector * cos_t
        det_y = src_y - geometry.source_to_detector * sin_t
        start_x = np.broadcast_to(src_x, (len(angles), n_det))
        start_y = np.broadcast_to(src_y, (len(angles), n_det))
        end_x = det_x - offsets[None, :] * sin_t
        end_y = det_y + offsets[None, :] * cos_t

    starts = np.stack([start_x.ravel(), start_y.ravel()], axis=1)
    ends = np.stack([end_x.ravel(), end_y.ravel()], axis=1)
    return starts, ends


@dataclass(frozen=True, eq=False)
class SystemMatrix:
    """
    Sparse ray-by-voxel intersection lengths h(y|x).

    Rows are rays (slice-major, then view, then detector); columns are voxels
    (slice-major, then row, then column). Slices are independent, so the
    matrix is block diagonal.
    """
    matrix: sparse.csr_matrix
    geometry: Optional[ScanGeometry] = None

    @property
    def shape(self) -> Tuple[int, int]:
        return self.matrix.shape

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def cols(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    @cached_property
    def csc(self) -> sparse.csc_matrix:
        """Column-major copy, built once; used to assemble basis columns."""
        return self.matrix.tocsc()

    def row_sums(self) -> np.ndarray:
        return np.asarray(self.matrix.sum(axis=1)).ravel()

    @classmethod
    def from_dense(cls, dense) -> "SystemMatrix":
        """Small hand-written matrices (tests, toy problems)."""
        matrix = sparse.csr_matrix(np.asarray(dense, dtype=np.float64))
        matrix.eliminate_zeros()
        return cls(matrix)


def _trace_rows(starts: np.ndarray, ends: np.ndarray, grid: VoxelGrid):
    indices, values, counts = [], [], []
    for start, end in zip(starts, ends):
        cols, lengths = trace_ray(start, end, grid)
        indices.append(cols)
        values.append(lengths)
        counts.append(len(cols))
    return indices, values, counts


def build_system_matrix(geometry: ScanGeometry, threads: int = 1) -> SystemMatrix:
    """
    Build the exact intersection-length system matrix for a geometry.

    Views are traced in parallel when threads > 1; results are assembled in
    view order, so the matrix is bit-identical for any thread count.

    Args:
        geometry: scan geometry
        threads: worker threads used for ray tracing

    Returns:
        SystemMatrix with M = nz * views * detectors rows and N = nz * ny * nx columns
    """
    if geometry.view_count < 1:
        raise ConfigurationError("geometry has zero views")
    if geometry.n_detectors < 1:
        raise ConfigurationError("geometry has zero detectors")

    grid = VoxelGrid.from_geometry(geometry)
    starts, ends = ray_endpoints(geometry)
    n_det = geometry.n_detectors
    chunks = [(starts[v * n_det:(v + 1) * n_det], ends[v * n_det:(v + 1) * n_det])
              for v in range(geometry.view_count)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            traced = list(pool.map(lambda c: _trace_rows(c[0], c[1], grid), chunks))
    else:
        traced = [_trace_rows(s, e, grid) for s, e in chunks]

    indices: List[np.ndarray] = []
    values: List[np.ndarray] = []
    counts: List[int] = []
    for chunk_indices, chunk_values, chunk_counts in traced:
        indices.extend(chunk_indices)
        values.extend(chunk_values)
        counts.extend(chunk_counts)

    indptr = np.zeros(len(counts) + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    slice_matrix = sparse.csr_matrix(
        (np.concatenate(values), np.concatenate(indices), indptr),
        shape=(geometry.rays_per_slice, geometry.voxels_per_slice),
    )
    if geometry.nz > 1:
        matrix = sparse.block_diag([slice_matrix] * geometry.nz, format="csr")
    else:
        matrix = slice_matrix

    logger.info(f"System matrix: {matrix.shape[0]} rays x {matrix.shape[1]} voxels, "
                f"{matrix.nnz} nonzeros ({geometry.beam} beam, {geometry.view_count} views)")
    return SystemMatrix(matrix, geometry)


def geometry_digest(geometry: ScanGeometry) -> str:
    """Stable key for the matrix cache."""
    return hashlib.sha256(geometry.model_dump_json().encode("utf-8")).hexdigest()[:16]


def forward_project(H: SystemMatrix, mu) -> np.ndarray:
    """Line integrals sum_x h(y|x) mu(x) for every ray."""
    mu = np.asarray(mu, dtype=np.float64).ravel()
    if mu.shape[0] != H.cols:
        raise ContractViolation(f"image has {mu.shape[0]} voxels, system matrix expects {H.cols}")
    return H.matrix @ mu


def back_project(H: SystemMatrix, w) -> np.ndarray:
    """Transpose product H^T w."""
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.shape[0] != H.rows:
        raise ContractViolation(f"weight vector has {w.shape[0]} entries, system matrix has {H.rows} rays")
    return H.matrix.T @ w


def predicted_means(I0, line_integrals) -> np.ndarray:
    """
    Beer's law: q(y) = I0(y) exp(-l(y)).

    Raises:
        NumericalError: non-finite line integral or a mean outside (0, inf)
    """
    line_integrals = np.asarray(line_integrals, dtype=np.float64)
    bad = np.flatnonzero(~np.isfinite(line_integrals))
    if bad.size:
        raise NumericalError("non-finite line integral", index=int(bad[0]))
    q = np.asarray(I0, dtype=np.float64) * np.exp(-line_integrals)
    bad = np.flatnonzero(~((q > 0) & np.isfinite(q)))
    if bad.size:
        raise NumericalError("predicted mean left the double range", index=int(bad[0]))
    return q


def i_divergence(d, q) -> float:
    """
    I(d||q) = sum d log(d/q) - d + q, with d log(d/q) = 0 where d = 0.

    Raises:
        NumericalError: any q(y) <= 0
    """
    d = np.asarray(d, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if d.shape != q.shape:
        raise ContractViolation(f"counts have shape {d.shape}, means have shape {q.shape}")
    bad = np.flatnonzero(~(q > 0))
    if bad.size:
        raise NumericalError("I-divergence needs strictly positive means", index=int(bad[0]))
    return float(np.sum(kl_div(d, q)))
