# Multilevel 2D Haar representation, active coefficient trees and the
# composite system columns phi(.|z) of Phi = H * Omega

import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Tuple

import numpy as np
import pywt
from scipy import sparse

from calculators.errors import ConfigurationError, ContractViolation
from calculators.projector import SystemMatrix

logger = logging.getLogger(__name__)

WAVELET = "haar"
SUBBANDS = ("approx", "horiz", "vert", "diag")
DETAIL_SUBBANDS = ("horiz", "vert", "diag")


class CoefficientIndex(NamedTuple):
    """Position of one coefficient: slice, level, subband and (row, col) in the subband."""
    slice: int
    level: int
    subband: str
    i: int
    j: int


class CoefficientLayout:
    """
    Flat ordering of the coefficients of a stack of slices.

    Within a slice the order follows the Haar decomposition from coarse to
    fine: the approximation band at level L, then for each level L..1 the
    horizontal, vertical and diagonal bands, each raveled row-major. Slices
    follow each other, so a stack has exactly nx * ny * nz coefficients.
    """

    def __init__(self, nx: int, ny: int, nz: int, depth: int):
        if depth < 0:
            raise ConfigurationError(f"decomposition depth must be >= 0, got {depth}")
        block = 2 ** depth
        if nx % block or ny % block or nx < block or ny < block:
            raise ConfigurationError(f"slice size {ny}x{nx} is not divisible by 2**{depth} = {block}")
        self.nx, self.ny, self.nz, self.depth = nx, ny, nz, depth
        self.per_slice = nx * ny

        self._blocks: Dict[Tuple[int, str], Tuple[int, Tuple[int, int]]] = {}
        offset = 0
        shape = (ny >> depth, nx >> depth)
        self._blocks[(depth, "approx")] = (offset, shape)
        offset += shape[0] * shape[1]
        for level in range(depth, 0, -1):
            shape = (ny >> level, nx >> level)
            for subband in DETAIL_SUBBANDS:
                self._blocks[(level, subband)] = (offset, shape)
                offset += shape[0] * shape[1]
        assert offset == self.per_slice

    @classmethod
    def from_geometry(cls, geometry, depth: int) -> "CoefficientLayout":
        return cls(geometry.nx, geometry.ny, geometry.nz, depth)

    @property
    def size(self) -> int:
        return self.per_slice * self.nz

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.ny, self.nx)

    def block(self, level: int, subband: str) -> Tuple[int, Tuple[int, int]]:
        """Offset inside a slice and shape of one subband."""
        try:
            return self._blocks[(level, subband)]
        except KeyError:
            raise ContractViolation(f"no {subband} band at level {level} for depth {self.depth}")

    def bands(self) -> List[Tuple[int, str]]:
        return list(self._blocks)

    def flat(self, index: CoefficientIndex) -> int:
        offset, (rows, cols) = self.block(index.level, index.subband)
        if not (0 <= index.slice < self.nz and 0 <= index.i < rows and 0 <= index.j < cols):
            raise ContractViolation(f"coefficient {index} is outside the layout")
        return index.slice * self.per_slice + offset + index.i * cols + index.j

    def index(self, z: int) -> CoefficientIndex:
        if not 0 <= z < self.size:
            raise ContractViolation(f"coefficient index {z} is outside 0..{self.size - 1}")
        s, local = divmod(int(z), self.per_slice)
        for (level, subband), (offset, (rows, cols)) in self._blocks.items():
            if offset <= local < offset + rows * cols:
                i, j = divmod(local - offset, cols)
                return CoefficientIndex(s, level, subband, i, j)
        raise ContractViolation(f"coefficient index {z} is outside the layout")

    def band_indices(self, level: int, subband: str, s: int) -> np.ndarray:
        """Flat indices of a whole subband of slice s, shaped like the band."""
        offset, (rows, cols) = self.block(level, subband)
        start = s * self.per_slice + offset
        return np.arange(start, start + rows * cols, dtype=np.int64).reshape(rows, cols)

    def approx_indices(self) -> np.ndarray:
        return np.concatenate([self.band_indices(self.depth, "approx", s).ravel() for s in range(self.nz)])


@dataclass(frozen=True, eq=False)
class WaveletCoefficients:
    """Coefficients beta of a slice stack, shape (nz, nx*ny) in layout order."""
    layout: CoefficientLayout
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        expected = (self.layout.nz, self.layout.per_slice)
        if values.size != self.layout.size:
            raise ContractViolation(f"{values.size} coefficients given, layout needs {self.layout.size}")
        object.__setattr__(self, "values", values.reshape(expected))

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def with_values(self, flat_values: np.ndarray) -> "WaveletCoefficients":
        return WaveletCoefficients(self.layout, flat_values)

    @classmethod
    def zeros(cls, layout: CoefficientLayout) -> "WaveletCoefficients":
        return cls(layout, np.zeros(layout.size))


def _pack(coeffs) -> np.ndarray:
    parts = [coeffs[0].ravel()]
    for detail in coeffs[1:]:
        parts.extend(band.ravel() for band in detail)
    return np.concatenate(parts)


def _unpack(packed: np.ndarray, layout: CoefficientLayout):
    def band(level, subband):
        offset, (rows, cols) = layout.block(level, subband)
        return packed[offset:offset + rows * cols].reshape(rows, cols)

    coeffs = [band(layout.depth, "approx")]
    for level in range(layout.depth, 0, -1):
        coeffs.append(tuple(band(level, subband) for subband in DETAIL_SUBBANDS))
    return coeffs


def dwt2(slice_image, depth: int) -> WaveletCoefficients:
    """
    Orthonormal Haar analysis of one slice, recursed `depth` times.

    Each 1D step maps a pair (a, b) to ((a+b)/sqrt2, (a-b)/sqrt2); the
    horizontal band holds differences between rows, the vertical band
    differences between columns.

    Raises:
        ConfigurationError: slice dimensions not divisible by 2**depth
    """
    slice_image = np.asarray(slice_image, dtype=np.float64)
    if slice_image.ndim != 2:
        raise ContractViolation(f"expected a 2D slice, got shape {slice_image.shape}")
    ny, nx = slice_image.shape
    layout = CoefficientLayout(nx, ny, 1, depth)
    if depth == 0:
        return WaveletCoefficients(layout, slice_image.ravel().copy())
    coeffs = pywt.wavedec2(slice_image, WAVELET, mode="periodization", level=depth)
    return WaveletCoefficients(layout, _pack(coeffs))


def idwt2(coeffs: WaveletCoefficients, depth: Optional[int] = None) -> np.ndarray:
    """
    Exact inverse of dwt2 for a single slice.

    Raises:
        ContractViolation: multi-slice input or a depth that does not match the layout
    """
    layout = coeffs.layout
    if depth is not None and depth != layout.depth:
        raise ContractViolation(f"coefficients were laid out for depth {layout.depth}, not {depth}")
    if layout.nz != 1:
        raise ContractViolation(f"idwt2 takes one slice, got {layout.nz}")
    packed = coeffs.values[0]
    if layout.depth == 0:
        return packed.reshape(layout.shape).copy()
    return pywt.waverec2(_unpack(packed, layout), WAVELET, mode="periodization")


def analyze(image: np.ndarray, depth: int) -> WaveletCoefficients:
    """dwt2 applied to every z-slice of an (nz, ny, nx) image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    nz, ny, nx = image.shape
    layout = CoefficientLayout(nx, ny, nz, depth)
    values = np.stack([dwt2(image[s], depth).values[0] for s in range(nz)])
    return WaveletCoefficients(layout, values)


def synthesize(coeffs: WaveletCoefficients) -> np.ndarray:
    """idwt2 applied to every z-slice; returns an (nz, ny, nx) image."""
    layout = coeffs.layout
    single = CoefficientLayout(layout.nx, layout.ny, 1, layout.depth)
    return np.stack([idwt2(WaveletCoefficients(single, coeffs.values[s])) for s in range(layout.nz)])


def basis_footprint(z: int, layout: CoefficientLayout) -> Tuple[np.ndarray, np.ndarray]:
    """
    The basis image Omega e_z as (flat voxel indices, signed weights).

    A level-l coefficient covers a 2^l x 2^l block with weights of magnitude
    2^-l: uniform for the approximation band, split top/bottom (horizontal),
    left/right (vertical) or by quadrant parity (diagonal) for details.
    """
    index = layout.index(z)
    side = 2 ** index.level
    half = side // 2
    magnitude = 2.0 ** -index.level

    rows = np.arange(side)
    cols = np.arange(side)
    row_sign = np.where(rows < half, 1.0, -1.0)
    col_sign = np.where(cols < half, 1.0, -1.0)
    if index.subband == "approx":
        pattern = np.ones((side, side))
    elif index.subband == "horiz":
        pattern = np.repeat(row_sign[:, None], side, axis=1)
    elif index.subband == "vert":
        pattern = np.repeat(col_sign[None, :], side, axis=0)
    else:
        pattern = np.outer(row_sign, col_sign)

    r0, c0 = index.i * side, index.j * side
    voxels = (index.slice * layout.per_slice
              + (r0 + rows)[:, None] * layout.nx + (c0 + cols)[None, :])
    return voxels.ravel(), (magnitude * pattern).ravel()


class ActiveTree:
    """
    Active coefficient set, closed under the quadtree parent relation.

    Approximation coefficients are always active. Detail coefficients are
    switched on as (horizontal, vertical, diagonal) triples; the triple at
    level l, position (i, j) may be active only if the triple at level l+1,
    position (i//2, j//2) is active (level L triples hang off the roots).
    """

    def __init__(self, layout: CoefficientLayout, detail: Optional[Dict[int, np.ndarray]] = None):
        self.layout = layout
        self.detail: Dict[int, np.ndarray] = {}
        for level in range(1, layout.depth + 1):
            shape = (layout.nz, layout.ny >> level, layout.nx >> level)
            flags = np.zeros(shape, dtype=bool) if detail is None else np.asarray(detail[level], dtype=bool)
            if flags.shape != shape:
                raise ContractViolation(f"level {level} flags have shape {flags.shape}, expected {shape}")
            self.detail[level] = flags.copy()

    @classmethod
    def approx_only(cls, layout: CoefficientLayout) -> "ActiveTree":
        return cls(layout)

    @classmethod
    def full(cls, layout: CoefficientLayout) -> "ActiveTree":
        tree = cls(layout)
        for flags in tree.detail.values():
            flags[...] = True
        return tree

    def copy(self) -> "ActiveTree":
        return ActiveTree(self.layout, self.detail)

    def active_indices(self) -> np.ndarray:
        """Sorted flat indices of every active coefficient."""
        parts = [self.layout.approx_indices()]
        for level, flags in self.detail.items():
            for s in range(self.layout.nz):
                if not flags[s].any():
                    continue
                for subband in DETAIL_SUBBANDS:
                    parts.append(self.layout.band_indices(level, subband, s)[flags[s]])
        return np.sort(np.concatenate(parts))

    @property
    def size(self) -> int:
        triples = sum(int(flags.sum()) for flags in self.detail.values())
        return self.layout.nz * int(np.prod(self.layout.block(self.layout.depth, "approx")[1])) + 3 * triples

    def contains(self, z: int) -> bool:
        index = self.layout.index(z)
        if index.subband == "approx":
            return True
        return bool(self.detail[index.level][index.slice, index.i, index.j])

    def is_closed(self) -> bool:
        """True when every active triple has an active parent triple."""
        for level in range(1, self.layout.depth):
            parent = self.detail[level + 1]
            covered = np.repeat(np.repeat(parent, 2, axis=1), 2, axis=2)
            if np.any(self.detail[level] & ~covered):
                return False
        return True

    def activate_pixels(self, mask: np.ndarray) -> "ActiveTree":
        """
        Expand one level under every marked pixel.

        For each marked pixel, the detail triple at the coarsest level whose
        block contains the pixel and is not yet active is switched on. The
        mask is (ny, nx) and applies to every slice.
        """
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != self.layout.shape:
            raise ContractViolation(f"mask has shape {mask.shape}, slices are {self.layout.shape}")
        expanded = self.copy()
        for s in range(self.layout.nz):
            pending = mask.copy()
            for level in range(self.layout.depth, 0, -1):
                if not pending.any():
                    break
                side = 2 ** level
                flags = self.detail[level][s]
                active_here = np.repeat(np.repeat(flags, side, axis=0), side, axis=1)
                newly = pending & ~active_here
                rows, cols = np.nonzero(newly)
                expanded.detail[level][s, rows // side, cols // side] = True
                pending &= active_here
        return expanded

    def manifest_rows(self) -> List[CoefficientIndex]:
        return [self.layout.index(z) for z in self.active_indices()]

    @classmethod
    def from_manifest_rows(cls, layout: CoefficientLayout, rows: Iterable[CoefficientIndex]) -> "ActiveTree":
        tree = cls(layout)
        for row in rows:
            layout.flat(row)
            if row.subband != "approx":
                tree.detail[row.level][row.slice, row.i, row.j] = True
        if not tree.is_closed():
            raise ContractViolation("manifest describes a tree that is not closed")
        return tree


def expand_tree(tree: ActiveTree, beta: WaveletCoefficients, threshold_factor: float) -> ActiveTree:
    """
    Threshold-driven expansion.

    The coefficients are synthesized into an image, summed across z-slices,
    and every pixel whose summed value exceeds threshold_factor times the
    maximum of the summed image is expanded one level. A summed image with a
    non-positive maximum leaves the tree unchanged.
    """
    summed = synthesize(beta).sum(axis=0)
    peak = float(summed.max())
    if peak <= 0.0:
        logger.info("Tree expansion skipped: summed image has no positive maximum")
        return tree.copy()
    mask = summed > threshold_factor * peak
    expanded = tree.activate_pixels(mask)
    logger.info(f"Tree expansion: {int(mask.sum())} pixels marked, active set {tree.size} -> {expanded.size}")
    return expanded


class WaveletSystemColumns:
    """
    Lazily computed columns phi(.|z) = H (Omega e_z).

    Columns depend only on z and H, so they are never invalidated; an
    optional cap evicts the least recently used columns. Lookups may run
    concurrently, insertion is serialized. Two threads computing the same
    column produce identical arrays.
    """

    def __init__(self, H: SystemMatrix, layout: CoefficientLayout, max_columns: Optional[int] = None):
        if H.cols != layout.size:
            raise ContractViolation(f"system matrix has {H.cols} voxels, layout has {layout.size} coefficients")
        self.H = H
        self.layout = layout
        self.max_columns = max_columns
        self._columns: "OrderedDict[int, Tuple[np.ndarray, np.ndarray]]" = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._columns)

    def compute(self, z: int) -> Tuple[np.ndarray, np.ndarray]:
        """Column from scratch, bypassing the cache: (ray indices, signed weights)."""
        voxels, weights = basis_footprint(z, self.layout)
        dense = self.H.csc[:, voxels] @ weights
        rows = np.flatnonzero(dense)
        return rows, dense[rows]

    def column(self, z: int) -> Tuple[np.ndarray, np.ndarray]:
        z = int(z)
        with self._lock:
            cached = self._columns.get(z)
            if cached is not None:
                self.hits += 1
                if self.max_columns is not None:
                    self._columns.move_to_end(z)
                return cached
        computed = self.compute(z)
        with self._lock:
            self.misses += 1
            self._columns.setdefault(z, computed)
            if self.max_columns is not None:
                while len(self._columns) > self.max_columns:
                    self._columns.popitem(last=False)
        return computed

    def matrix(self, indices: np.ndarray, fresh: bool = False) -> sparse.csc_matrix:
        """The active block of Phi as an M x len(indices) CSC matrix (recomputed when `fresh`)."""
        columns = [self.compute(z) if fresh else self.column(z) for z in indices]
        counts = np.array([len(rows) for rows, _ in columns], dtype=np.int64)
        indptr = np.zeros(len(columns) + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        if columns:
            rows = np.concatenate([r for r, _ in columns])
            values = np.concatenate([v for _, v in columns])
        else:
            rows, values = np.zeros(0, dtype=np.int64), np.zeros(0)
        return sparse.csc_matrix((values, rows, indptr), shape=(self.H.rows, len(columns)))


def phi_column(z: int, H: SystemMatrix, cache: WaveletSystemColumns) -> Tuple[np.ndarray, np.ndarray]:
    """Column phi(.|z) of Phi = H Omega, served from the cache."""
    if cache.H is not H:
        raise ContractViolation("column cache was built for a different system matrix")
    return cache.column(z)
