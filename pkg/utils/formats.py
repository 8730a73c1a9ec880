"""
On-disk formats of a run directory.
- WAMH: binary system matrix cache (little-endian CSR)
- WAMI: raw float64 image stack with a small dimension header
- PGM (P2, 16-bit) slices with a JSON sidecar recording the scaling
- Convergence CSV: iter, objective, elapsed_s, active_set, cum_updates
- Tree manifests: one active coefficient per line
"""

import logging
from collections import Counter
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import sparse

from calculators.errors import ContractViolation
from calculators.haar import DETAIL_SUBBANDS, ActiveTree, CoefficientIndex, CoefficientLayout
from calculators.projector import SystemMatrix
from models.schemas import ConvergenceRecord, ImageSidecar, ScanGeometry

logger = logging.getLogger(__name__)

MATRIX_MAGIC = b"WAMH"
MATRIX_VERSION = 1
MATRIX_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("rows", "<u8"), ("cols", "<u8"), ("nnz", "<u8")])

IMAGE_MAGIC = b"WAMI"
IMAGE_VERSION = 1
IMAGE_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("nz", "<u4"), ("ny", "<u4"), ("nx", "<u4")])

PGM_MAXVAL = 65535
CONVERGENCE_COLUMNS = ["iter", "objective", "elapsed_s", "active_set", "cum_updates"]


def _read_exact(handle, dtype, count: int, what: str) -> np.ndarray:
    values = np.fromfile(handle, dtype=dtype, count=count)
    if values.size != count:
        raise ContractViolation(f"truncated file: expected {count} {what}, found {values.size}")
    return values


# System Matrix Cache
def write_system_matrix(path, H: SystemMatrix) -> Path:
    """Write H as header, u64 row pointers, u32 column indices and f64 values."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = H.matrix
    header = np.array([(MATRIX_MAGIC, MATRIX_VERSION, matrix.shape[0], matrix.shape[1], matrix.nnz)],
                      dtype=MATRIX_HEADER)
    with open(path, "wb") as handle:
        header.tofile(handle)
        matrix.indptr.astype("<u8").tofile(handle)
        matrix.indices.astype("<u4").tofile(handle)
        matrix.data.astype("<f8").tofile(handle)
    logger.info(f"Wrote system matrix cache {path} ({matrix.nnz} nonzeros)")
    return path


def read_system_matrix(path, geometry: Optional[ScanGeometry] = None) -> SystemMatrix:
    """
    Load a WAMH file.

    Raises:
        ContractViolation: wrong magic/version, truncated data or a shape that
            does not match `geometry`
    """
    path = Path(path)
    with open(path, "rb") as handle:
        header = _read_exact(handle, MATRIX_HEADER, 1, "header")[0]
        if header["magic"] != MATRIX_MAGIC or int(header["version"]) != MATRIX_VERSION:
            raise ContractViolation(f"{path} is not a version {MATRIX_VERSION} matrix cache")
        rows, cols, nnz = int(header["rows"]), int(header["cols"]), int(header["nnz"])
        indptr = _read_exact(handle, "<u8", rows + 1, "row pointers").astype(np.int64)
        indices = _read_exact(handle, "<u4", nnz, "column indices").astype(np.int32)
        data = _read_exact(handle, "<f8", nnz, "values").astype(np.float64)
    if geometry is not None and (rows, cols) != (geometry.ray_count, geometry.voxel_count):
        raise ContractViolation(f"cached matrix is {rows}x{cols}, geometry needs "
                                f"{geometry.ray_count}x{geometry.voxel_count}")
    return SystemMatrix(sparse.csr_matrix((data, indices, indptr), shape=(rows, cols)), geometry)


# Images
def _as_stack(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 1:
        return image[None, None, :]
    if image.ndim == 2:
        return image[None]
    if image.ndim != 3:
        raise ContractViolation(f"images are stored as (nz, ny, nx) stacks, got shape {image.shape}")
    return image


def write_raw_image(path, image) -> Path:
    """Header naming (nz, ny, nx) followed by row-major little-endian float64 values."""
    stack = _as_stack(image)
    path = Path(path)
    header = np.array([(IMAGE_MAGIC, IMAGE_VERSION) + stack.shape], dtype=IMAGE_HEADER)
    with open(path, "wb") as handle:
        header.tofile(handle)
        np.ascontiguousarray(stack, dtype="<f8").tofile(handle)
    return path


def read_raw_image(path) -> np.ndarray:
    """Read a raw image as an (nz, ny, nx) float64 array."""
    path = Path(path)
    with open(path, "rb") as handle:
        header = _read_exact(handle, IMAGE_HEADER, 1, "header")[0]
        if header["magic"] != IMAGE_MAGIC or int(header["version"]) != IMAGE_VERSION:
            raise ContractViolation(f"{path} is not a raw image file")
        shape = (int(header["nz"]), int(header["ny"]), int(header["nx"]))
        values = _read_exact(handle, "<f8", int(np.prod(shape)), "voxels")
    return values.astype(np.float64).reshape(shape)


def write_pgm(path, slice_image) -> Tuple[Path, Path]:
    """
    Write one 2D slice as ASCII PGM scaled to 0..65535.

    The value range is recorded in a JSON sidecar next to the image
    (`<name>.json`); a constant slice maps to all zeros.
    """
    slice_image = np.asarray(slice_image, dtype=np.float64)
    if slice_image.ndim != 2:
        raise ContractViolation(f"PGM output takes a 2D slice, got shape {slice_image.shape}")
    path = Path(path)
    low, high = float(slice_image.min()), float(slice_image.max())
    span = high - low
    if span > 0:
        scaled = np.rint((slice_image - low) / span * PGM_MAXVAL).astype(np.int64)
    else:
        scaled = np.zeros(slice_image.shape, dtype=np.int64)

    height, width = slice_image.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in scaled)
    path.write_text(f"P2\n{width} {height}\n{PGM_MAXVAL}\n{rows}\n")

    sidecar = ImageSidecar(width=width, height=height, maxval=PGM_MAXVAL, min=low, max=high)
    sidecar_path = path.with_suffix(".json")
    sidecar_path.write_text(sidecar.model_dump_json(indent=2))
    return path, sidecar_path


def read_pgm(path) -> Tuple[np.ndarray, Optional[ImageSidecar]]:
    """Read an ASCII PGM and, when present, its sidecar; returns (raw levels, sidecar)."""
    path = Path(path)
    tokens = [t for line in path.read_text().splitlines()
              for t in line.split("#", 1)[0].split()]
    if not tokens or tokens[0] != "P2":
        raise ContractViolation(f"{path} is not an ASCII PGM file")
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    levels = np.array(tokens[4:], dtype=np.int64)
    if levels.size != width * height or np.any(levels > maxval):
        raise ContractViolation(f"{path}: pixel data does not match a {width}x{height} image")
    sidecar_path = path.with_suffix(".json")
    sidecar = ImageSidecar.model_validate_json(sidecar_path.read_text()) if sidecar_path.exists() else None
    return levels.reshape(height, width), sidecar


def write_image(directory, name: str, image, formats: Sequence[str]) -> List[Path]:
    """Write an image stack in each requested format; PGM gets one file per slice."""
    directory = Path(directory)
    stack = _as_stack(image)
    written: List[Path] = []
    if "raw" in formats:
        written.append(write_raw_image(directory / f"{name}.raw", stack))
    if "pgm" in formats:
        for s in range(stack.shape[0]):
            stem = name if stack.shape[0] == 1 else f"{name}_z{s:03d}"
            written.extend(write_pgm(directory / f"{stem}.pgm", stack[s]))
    return written


# Convergence Logs
def write_convergence_csv(path, records: Sequence[ConvergenceRecord]) -> Path:
    """Write records with round-trip precision for the objective."""
    path = Path(path)
    frame = pd.DataFrame([r.model_dump() for r in records], columns=CONVERGENCE_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def read_convergence_csv(path) -> pd.DataFrame:
    """
    Load a convergence log.

    Raises:
        ContractViolation: missing header or unexpected columns
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    if list(frame.columns) != CONVERGENCE_COLUMNS:
        raise ContractViolation(f"{path}: expected columns {CONVERGENCE_COLUMNS}, found {list(frame.columns)}")
    return frame


# Tree Manifests
def write_tree_manifest(path, tree: ActiveTree, iteration: int) -> Path:
    """One `slice level subband i j` line per active coefficient, after a commented header."""
    layout = tree.layout
    path = Path(path)
    lines = [
        f"# nx {layout.nx} ny {layout.ny} nz {layout.nz} depth {layout.depth}",
        f"# iteration {iteration} active {tree.size}",
    ]
    lines += [f"{r.slice} {r.level} {r.subband} {r.i} {r.j}" for r in tree.manifest_rows()]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_tree_manifest(path) -> Tuple[ActiveTree, int]:
    """
    Rebuild an active tree from a manifest.

    Returns:
        (tree, iteration at which the manifest was written)

    Raises:
        ContractViolation: malformed header or rows, or a tree that is not closed
    """
    path = Path(path)
    header = {}
    rows: List[CoefficientIndex] = []
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if line.startswith("#"):
            fields = line[1:].split()
            header.update(zip(fields[::2], fields[1::2]))
            continue
        if not line.strip():
            continue
        parts = line.split()
        try:
            s, level, subband, i, j = parts
            rows.append(CoefficientIndex(int(s), int(level), subband, int(i), int(j)))
        except ValueError as e:
            raise ContractViolation(f"{path}:{number}: malformed manifest row {line!r}") from e
    try:
        layout = CoefficientLayout(int(header["nx"]), int(header["ny"]), int(header["nz"]), int(header["depth"]))
        iteration = int(header["iteration"])
    except (KeyError, ValueError) as e:
        raise ContractViolation(f"{path}: incomplete manifest header") from e

    tree = ActiveTree.from_manifest_rows(layout, rows)
    duplicates = [row for row, count in Counter(rows).items() if count > 1]
    if duplicates:
        raise ContractViolation(f"{path}: duplicate manifest row {duplicates[0]}")
    approx = sum(1 for row in rows if row.subband == "approx")
    if approx != layout.approx_indices().size:
        raise ContractViolation(
            f"{path}: {approx} approximation coefficients listed, layout has {layout.approx_indices().size}"
        )
    triples = Counter((row.slice, row.level, row.i, row.j) for row in rows if row.subband != "approx")
    partial = [key for key, count in triples.items() if count != len(DETAIL_SUBBANDS)]
    if partial:
        s, level, i, j = partial[0]
        raise ContractViolation(f"{path}: incomplete detail triple at slice {s}, level {level}, position ({i}, {j})")
    return tree, iteration
