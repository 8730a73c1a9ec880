"""Test the run-directory file formats."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from calculators.errors import ContractViolation
from calculators.haar import ActiveTree, CoefficientLayout, analyze, expand_tree
from calculators.projector import build_system_matrix
from models.schemas import ConvergenceRecord, ScanGeometry
from utils.formats import (
    CONVERGENCE_COLUMNS,
    read_convergence_csv,
    read_pgm,
    read_raw_image,
    read_system_matrix,
    read_tree_manifest,
    write_convergence_csv,
    write_image,
    write_pgm,
    write_raw_image,
    write_system_matrix,
    write_tree_manifest,
)

GEOMETRY = ScanGeometry(nx=8, ny=8, beam="parallel", n_views=6, n_detectors=12)


def test_matrix_cache_restores_identical_matrix(tmp_path):
    H = build_system_matrix(GEOMETRY)
    path = write_system_matrix(tmp_path / "cache" / "h.wamh", H)
    assert path.read_bytes()[:4] == b"WAMH"
    loaded = read_system_matrix(path, GEOMETRY)
    np.testing.assert_array_equal(loaded.matrix.indptr, H.matrix.indptr)
    np.testing.assert_array_equal(loaded.matrix.indices, H.matrix.indices)
    np.testing.assert_array_equal(loaded.matrix.data, H.matrix.data)


def test_matrix_cache_rejects_other_geometry_and_truncation(tmp_path):
    H = build_system_matrix(GEOMETRY)
    path = write_system_matrix(tmp_path / "h.wamh", H)
    with pytest.raises(ContractViolation):
        read_system_matrix(path, ScanGeometry(nx=8, ny=8, beam="parallel", n_views=7, n_detectors=12))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ContractViolation):
        read_system_matrix(path)


def test_raw_image_is_lossless(tmp_path):
    image = np.random.default_rng(0).standard_normal((2, 4, 8))
    path = write_raw_image(tmp_path / "image.raw", image)
    assert path.stat().st_size == 20 + 8 * image.size
    np.testing.assert_array_equal(read_raw_image(path), image)


def test_raw_image_rejects_foreign_file(tmp_path):
    path = tmp_path / "other.raw"
    path.write_bytes(b"P2\n1 1\n255\n0\n" + bytes(20))
    with pytest.raises(ContractViolation):
        read_raw_image(path)


def test_pgm_scaling_and_sidecar(tmp_path):
    image = np.array([[0.0, 0.5], [1.0, 2.0]])
    pgm, sidecar_path = write_pgm(tmp_path / "slice.pgm", image)
    assert pgm.read_text().splitlines()[:3] == ["P2", "2 2", "65535"]
    levels, sidecar = read_pgm(pgm)
    np.testing.assert_array_equal(levels, [[0, 16384], [32768, 65535]])
    assert sidecar_path.name == "slice.json"
    assert (sidecar.min, sidecar.max) == (0.0, 2.0)
    np.testing.assert_allclose(sidecar.to_values(levels), image, atol=2.0 / 65535)


def test_constant_pgm(tmp_path):
    pgm, _ = write_pgm(tmp_path / "flat.pgm", np.full((3, 2), 4.0))
    levels, sidecar = read_pgm(pgm)
    assert not levels.any()
    assert sidecar.min == sidecar.max == 4.0


def test_write_image_formats(tmp_path):
    stack = np.zeros((2, 4, 4))
    written = write_image(tmp_path, "image", stack, ["pgm", "raw"])
    names = sorted(p.name for p in written)
    assert names == ["image.raw", "image_z000.json", "image_z000.pgm", "image_z001.json", "image_z001.pgm"]


def test_convergence_csv(tmp_path):
    records = [
        ConvergenceRecord(iter=0, objective=1234.5678901234567, elapsed_s=0.0, active_set=16, cum_updates=0),
        ConvergenceRecord(iter=1, objective=1000.0000000000001, elapsed_s=0.25, active_set=16, cum_updates=16),
    ]
    path = write_convergence_csv(tmp_path / "convergence.csv", records)
    assert path.read_text().splitlines()[0] == "iter,objective,elapsed_s,active_set,cum_updates"
    frame = read_convergence_csv(path)
    assert list(frame.columns) == CONVERGENCE_COLUMNS
    assert frame["objective"].tolist() == [r.objective for r in records]
    assert frame["cum_updates"].tolist() == [0, 16]


def test_convergence_csv_requires_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0,1.0,0.0,16,0\n")
    with pytest.raises(ContractViolation):
        read_convergence_csv(path)


def test_tree_manifest(tmp_path):
    layout = CoefficientLayout(16, 16, 1, 2)
    image = np.zeros((16, 16))
    image[4:8, 8:12] = 1.0
    tree = expand_tree(ActiveTree.approx_only(layout), analyze(image, 2), 0.1)
    path = write_tree_manifest(tmp_path / "tree_iter0064.txt", tree, 64)
    lines = path.read_text().splitlines()
    assert lines[1] == f"# iteration 64 active {tree.size}"
    assert "0 2 horiz 1 2" in lines

    loaded, iteration = read_tree_manifest(path)
    assert iteration == 64
    np.testing.assert_array_equal(loaded.active_indices(), tree.active_indices())


def test_malformed_manifest(tmp_path):
    path = tmp_path / "tree.txt"
    path.write_text("# nx 16 ny 16 nz 1 depth 2\n# iteration 0 active 16\n0 2 horiz\n")
    with pytest.raises(ContractViolation):
        read_tree_manifest(path)


def test_manifest_rows_must_form_whole_triples(tmp_path):
    header = "# nx 4 ny 4 nz 1 depth 1\n# iteration 0 active 7\n"
    approx = "".join(f"0 1 approx {i} {j}\n" for i in range(2) for j in range(2))

    path = tmp_path / "tree.txt"
    path.write_text(header + approx + "0 1 horiz 0 1\n0 1 vert 0 1\n0 1 diag 0 1\n")
    tree, _ = read_tree_manifest(path)
    assert tree.size == 7

    path.write_text(header + approx + "0 1 horiz 0 1\n0 1 vert 0 1\n")
    with pytest.raises(ContractViolation, match="incomplete detail triple"):
        read_tree_manifest(path)

    path.write_text(header + approx + "0 1 horiz 0 1\n0 1 horiz 0 1\n0 1 vert 0 1\n")
    with pytest.raises(ContractViolation, match="duplicate manifest row"):
        read_tree_manifest(path)

    path.write_text(header + "0 1 approx 0 0\n0 1 horiz 0 1\n0 1 vert 0 1\n0 1 diag 0 1\n")
    with pytest.raises(ContractViolation, match="approximation coefficients listed"):
        read_tree_manifest(path)
