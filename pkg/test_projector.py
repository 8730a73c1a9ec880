"""Test ray tracing, projection and the Beer's-law model."""

import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent))

from calculators.errors import ConfigurationError, ContractViolation, NumericalError
from calculators.projector import (
    SystemMatrix,
    VoxelGrid,
    back_project,
    build_system_matrix,
    forward_project,
    geometry_digest,
    i_divergence,
    predicted_means,
    ray_endpoints,
    trace_ray,
)
from models.schemas import ScanGeometry


def small_fan(**overrides):
    values = dict(nx=16, ny=16, n_views=20, n_detectors=24, beam="fan",
                  source_to_center=60.0, source_to_detector=120.0)
    values.update(overrides)
    return ScanGeometry(**values)


# Ray tracing
def test_axis_aligned_ray_through_unit_voxel():
    voxels, lengths = trace_ray((-2.0, 0.0), (2.0, 0.0), VoxelGrid(1, 1, 1.0))
    assert voxels.tolist() == [0]
    assert lengths.tolist() == [1.0]


def test_diagonal_ray_through_unit_voxel():
    voxels, lengths = trace_ray((-1.0, -1.0), (1.0, 1.0), VoxelGrid(1, 1, 1.0))
    assert voxels.tolist() == [0]
    assert lengths[0] == pytest.approx(math.sqrt(2.0), rel=1e-14)


def test_horizontal_ray_through_lower_row():
    voxels, lengths = trace_ray((-3.0, -0.5), (3.0, -0.5), VoxelGrid(2, 2, 1.0))
    assert voxels.tolist() == [0, 1]
    np.testing.assert_allclose(lengths, [1.0, 1.0], rtol=1e-14)
    assert lengths.sum() == pytest.approx(2.0, rel=1e-14)


def test_ray_missing_the_grid():
    voxels, lengths = trace_ray((-3.0, 5.0), (3.0, 5.0), VoxelGrid(2, 2, 1.0))
    assert voxels.size == 0 and lengths.size == 0


def test_ray_endpoints_count_and_order():
    geometry = ScanGeometry(nx=8, ny=8, beam="parallel", n_views=3, n_detectors=5)
    starts, ends = ray_endpoints(geometry)
    assert starts.shape == (15, 2) and ends.shape == (15, 2)
    # View 0 (t = 0): rays run along +y at detector offsets along x
    np.testing.assert_allclose(starts[:5, 0], ends[:5, 0])
    assert np.all(ends[:5, 1] > starts[:5, 1])


def test_explicit_view_angles_override_even_spacing():
    geometry = ScanGeometry(nx=8, ny=8, beam="parallel", view_angles=[0.0, 0.25], n_detectors=4)
    assert geometry.view_count == 2
    assert geometry.angles() == [0.0, 0.25]


# System matrix
def test_system_matrix_entries_and_row_bound():
    geometry = small_fan()
    H = build_system_matrix(geometry)
    assert H.shape == (20 * 24, 16 * 16)
    assert np.all(H.matrix.data > 0)
    assert H.row_sums().max() <= geometry.diagonal * (1 + 1e-12)


def test_system_matrix_is_identical_for_any_thread_count():
    geometry = small_fan()
    serial = build_system_matrix(geometry, threads=1).matrix
    threaded = build_system_matrix(geometry, threads=4).matrix
    np.testing.assert_array_equal(serial.indptr, threaded.indptr)
    np.testing.assert_array_equal(serial.indices, threaded.indices)
    np.testing.assert_array_equal(serial.data, threaded.data)


def test_multi_slice_matrix_is_block_diagonal():
    single = build_system_matrix(small_fan())
    stacked = build_system_matrix(small_fan(nz=2))
    assert stacked.shape == (2 * single.rows, 2 * single.cols)
    block = stacked.matrix[single.rows:, single.cols:].toarray()
    np.testing.assert_array_equal(block, single.matrix.toarray())
    assert stacked.matrix[:single.rows, single.cols:].nnz == 0


def test_zero_views_or_detectors_rejected():
    with pytest.raises(ConfigurationError):
        build_system_matrix(ScanGeometry(nx=8, ny=8, beam="parallel", n_views=0))
    with pytest.raises(ConfigurationError):
        build_system_matrix(ScanGeometry(nx=8, ny=8, beam="parallel", n_detectors=0))


def test_geometry_digest_tracks_geometry():
    assert geometry_digest(small_fan()) == geometry_digest(small_fan())
    assert geometry_digest(small_fan()) != geometry_digest(small_fan(n_views=21))


# Projection
def test_forward_and_back_projection_by_hand():
    H = SystemMatrix.from_dense([[1.0, 0.0], [1.0, 1.0]])
    np.testing.assert_allclose(forward_project(H, [0.5, 0.2]), [0.5, 0.7])
    np.testing.assert_allclose(back_project(H, [1.0, 2.0]), [3.0, 2.0])
    np.testing.assert_array_equal(forward_project(H, [0.0, 0.0]), [0.0, 0.0])
    np.testing.assert_array_equal(back_project(H, [0.0, 0.0]), [0.0, 0.0])


def test_forward_projection_is_linear():
    H = build_system_matrix(small_fan())
    mu = np.random.default_rng(1).random(H.cols)
    np.testing.assert_allclose(forward_project(H, 3.0 * mu), 3.0 * forward_project(H, mu), rtol=1e-13)


def test_projection_dimension_mismatch():
    H = SystemMatrix.from_dense([[1.0, 0.0], [1.0, 1.0]])
    with pytest.raises(ContractViolation):
        forward_project(H, [1.0, 2.0, 3.0])
    with pytest.raises(ContractViolation):
        back_project(H, [1.0])


def test_adjoint_identity():
    H = build_system_matrix(small_fan())
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = rng.standard_normal(H.cols)
        y = rng.standard_normal(H.rows)
        Hx = forward_project(H, x)
        error = abs(Hx @ y - x @ back_project(H, y))
        assert error / (np.linalg.norm(Hx) * np.linalg.norm(y)) < 1e-12


# Beer's law and objective
def test_predicted_means():
    np.testing.assert_array_equal(predicted_means([4.0, 5.0], [0.0, 0.0]), [4.0, 5.0])
    assert predicted_means([10.0], [0.5])[0] == pytest.approx(6.0653066, abs=1e-7)
    assert predicted_means([10.0], [0.7])[0] == pytest.approx(4.9658530, abs=1e-7)


def test_predicted_means_reports_ray_index():
    with pytest.raises(NumericalError) as info:
        predicted_means([1.0, 1.0, 1.0], [0.0, np.nan, 0.0])
    assert info.value.index == 1


def test_i_divergence_values():
    q = np.array([1.5, 2.0, 7.0])
    assert i_divergence(q, q) == 0.0
    assert i_divergence([2.0], [1.0]) == pytest.approx(0.3862944, abs=1e-7)
    assert i_divergence([0.0], [3.0]) == pytest.approx(3.0)


def test_i_divergence_rejects_nonpositive_means():
    with pytest.raises(NumericalError):
        i_divergence([1.0, 1.0], [1.0, 0.0])
