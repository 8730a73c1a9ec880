"""
Experiment pipeline: geometry -> phantom -> simulated data -> solvers -> run directory.

Layout of a run directory:
    config.ini, truth.raw/.pgm, summary.json
    am/   config.ini, convergence.csv, image.raw/.pgm
    wam/  config.ini, convergence.csv, image.raw/.pgm, tree_iterNNNN.txt
    comparison/ report.json, difference.raw/.pgm
"""

import hashlib
import logging
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from calculators.am import init_am_state, run_am
from calculators.errors import ContractViolation
from calculators.haar import ActiveTree, CoefficientLayout, analyze
from calculators.phantom import TransmissionData, rasterize_phantom, simulate_counts
from calculators.projector import SystemMatrix, build_system_matrix, geometry_digest
from calculators.wavelet_am import ExpansionSchedule, final_image, init_state, run_wam, schedule_from
from config.run_config import render_run_config
from config.settings import settings
from models.schemas import (
    ComparisonReport,
    CrossingPoint,
    ExperimentSummary,
    RunConfig,
    ScanGeometry,
    SolverSummary,
)
from utils.formats import (
    read_convergence_csv,
    read_raw_image,
    read_system_matrix,
    write_convergence_csv,
    write_image,
    write_raw_image,
    write_system_matrix,
    write_tree_manifest,
)

logger = logging.getLogger(__name__)


def run_directory(config: RunConfig, out_dir=None) -> Path:
    """--out, then [output] directory, then OUTPUT_ROOT/run-<config digest>."""
    if out_dir is not None:
        return Path(out_dir)
    if config.output.directory:
        return Path(config.output.directory)
    digest = hashlib.sha256(render_run_config(config).encode("utf-8")).hexdigest()[:12]
    return Path(settings.OUTPUT_ROOT) / f"run-{digest}"


def load_system_matrix(geometry: ScanGeometry, threads: int = 1) -> SystemMatrix:
    """Build the system matrix, going through MATRIX_CACHE_DIR when it is set."""
    if not settings.MATRIX_CACHE_DIR:
        return build_system_matrix(geometry, threads=threads)

    path = Path(settings.MATRIX_CACHE_DIR) / f"{geometry_digest(geometry)}.wamh"
    if path.exists():
        try:
            H = read_system_matrix(path, geometry)
            logger.info(f"System matrix loaded from cache {path}")
            return H
        except ContractViolation as e:
            logger.warning(f"Ignoring unusable matrix cache {path}: {e}")
    else:
        logger.warning(f"Matrix cache miss for {path.name}")
    H = build_system_matrix(geometry, threads=threads)
    write_system_matrix(path, H)
    return H


def _write_config(directory: Path, config: RunConfig):
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.ini").write_text(render_run_config(config))


def prepare_problem(config: RunConfig, threads: int = 1) -> Tuple[SystemMatrix, np.ndarray, TransmissionData]:
    """System matrix, ground-truth image and simulated data for a config."""
    H = load_system_matrix(config.geometry, threads=threads)
    truth = rasterize_phantom(config.phantom, config.geometry)
    data = simulate_counts(truth.ravel(), H, config.simulation)
    return H, truth, data


def solve_am(config: RunConfig, H: SystemMatrix, data: TransmissionData, directory: Path):
    """Run the voxel-domain baseline into `directory`; returns (summary, records, image)."""
    _write_config(directory, config)
    state = init_am_state(H, data, init_value=config.solver.init_value)
    state, records = run_am(state, H, data, config.solver.am_iterations, log_every=config.output.log_every)

    geometry = config.geometry
    image = state.mu.reshape(geometry.nz, geometry.ny, geometry.nx)
    write_convergence_csv(directory / "convergence.csv", records)
    write_image(directory, "image", image, config.output.formats)

    summary = SolverSummary(
        solver="am",
        iterations=state.iteration,
        final_objective=records[-1].objective,
        elapsed_s=records[-1].elapsed_s,
        active_set=H.cols,
        cum_updates=state.cum_updates,
        directory=str(directory),
    )
    return summary, records, image


def _initial_tree(config: RunConfig, layout: CoefficientLayout) -> Tuple[ActiveTree, ExpansionSchedule]:
    solver = config.solver
    if solver.tree == "full":
        return ActiveTree.full(layout), ExpansionSchedule.none()
    if solver.tree == "approx":
        return ActiveTree.approx_only(layout), ExpansionSchedule.none()
    return ActiveTree.approx_only(layout), schedule_from(solver.expansion_iterations, solver.threshold_factor)


def solve_wam(config: RunConfig, H: SystemMatrix, data: TransmissionData, directory: Path):
    """Run wavelet AM into `directory`; returns (summary, records, clamped image)."""
    _write_config(directory, config)
    geometry, solver = config.geometry, config.solver
    layout = CoefficientLayout.from_geometry(geometry, solver.depth)
    tree, schedule = _initial_tree(config, layout)
    init_beta = None
    if solver.init_value:
        init_beta = analyze(np.full((geometry.nz, geometry.ny, geometry.nx), solver.init_value), solver.depth)

    state = init_state(H, data, solver.depth, init_beta, layout=layout, tree=tree,
                       schedule=schedule, max_columns=solver.column_cache_limit)

    def on_expand(current):
        if config.output.tree_manifests:
            write_tree_manifest(directory / f"tree_iter{current.iteration:04d}.txt", current.tree, current.iteration)

    if config.output.tree_manifests:
        write_tree_manifest(directory / "tree_iter0000.txt", state.tree, 0)
    state, records = run_wam(state, H, data, solver.wam_iterations,
                             log_every=config.output.log_every, on_expand=on_expand)

    image, clamp = final_image(state)
    write_convergence_csv(directory / "convergence.csv", records)
    write_image(directory, "image", image, config.output.formats)
    logger.info(f"Wavelet AM column cache: {state.columns.hits} hits, {state.columns.misses} misses, "
                f"{state.work} nonzeros processed")

    summary = SolverSummary(
        solver="wam",
        iterations=state.iteration,
        final_objective=records[-1].objective,
        elapsed_s=records[-1].elapsed_s,
        active_set=state.tree.size,
        cum_updates=state.cum_updates,
        directory=str(directory),
        clamp=clamp,
        skipped_coefficients=state.skipped,
        unsolvable_coefficients=state.unsolvable,
        expansions=list(state.expansions),
    )
    return summary, records, image


def _crossing(frame: pd.DataFrame, target: float) -> CrossingPoint:
    reached = frame[frame["objective"] <= target]
    if reached.empty:
        return CrossingPoint(iter=None, elapsed_s=None, cum_updates=None)
    first = reached.iloc[0]
    return CrossingPoint(iter=int(first["iter"]), elapsed_s=float(first["elapsed_s"]),
                         cum_updates=int(first["cum_updates"]))


def _rmse(image: np.ndarray, truth: np.ndarray) -> float:
    return float(np.sqrt(np.mean((image - truth) ** 2)))


def compare_runs(log_a: pd.DataFrame, log_b: pd.DataFrame, image_a, image_b, truth=None,
                 names: Tuple[str, str] = ("a", "b"), target: Optional[float] = None):
    """
    Matched-objective comparison of two runs on identical data.

    The target is the lower of the two final objectives unless given; each
    run reports the first iteration, time and update count at which its
    objective is at or below the target.

    Returns:
        (ComparisonReport, difference image image_b - image_a)

    Raises:
        ContractViolation: images of different shape, or truth of another shape
    """
    image_a = np.asarray(image_a, dtype=np.float64)
    image_b = np.asarray(image_b, dtype=np.float64)
    if image_a.shape != image_b.shape:
        raise ContractViolation(f"runs have different image shapes {image_a.shape} and {image_b.shape}")
    if truth is not None and np.shape(truth) != image_a.shape:
        raise ContractViolation(f"ground truth has shape {np.shape(truth)}, images have {image_a.shape}")

    if target is None:
        target = float(min(log_a["objective"].iloc[-1], log_b["objective"].iloc[-1]))
    difference = image_b - image_a
    report = ComparisonReport(
        target_objective=target,
        run_a=names[0],
        run_b=names[1],
        crossing_a=_crossing(log_a, target),
        crossing_b=_crossing(log_b, target),
        difference_max_abs=float(np.abs(difference).max()) if difference.size else 0.0,
        difference_rmse=float(np.sqrt(np.mean(difference ** 2))) if difference.size else 0.0,
        rmse_a=_rmse(image_a, truth) if truth is not None else None,
        rmse_b=_rmse(image_b, truth) if truth is not None else None,
    )
    return report, difference


def write_comparison(directory: Path, report: ComparisonReport, difference: np.ndarray,
                     formats: List[str]) -> ComparisonReport:
    directory.mkdir(parents=True, exist_ok=True)
    files = {"report": str(directory / "report.json")}
    for path in write_image(directory, "difference", difference, formats or ["raw"]):
        files[path.name] = str(path)
    report = report.model_copy(update={"files": files})
    (directory / "report.json").write_text(report.model_dump_json(indent=2))
    logger.info(f"Comparison {report.run_a} vs {report.run_b}: target objective {report.target_objective:.6e}, "
                f"crossings at {report.crossing_a.iter} / {report.crossing_b.iter}")
    return report


def _find_truth(run_dir: Path) -> Optional[Path]:
    for candidate in (run_dir / "truth.raw", run_dir.parent / "truth.raw"):
        if candidate.exists():
            return candidate
    return None


def compare_run_dirs(dir_a, dir_b, out=None) -> ComparisonReport:
    """
    Compare two solver directories (each holding convergence.csv and image.raw).

    Ground truth is picked up from truth.raw next to or above the first run.
    """
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    for run_dir in (dir_a, dir_b):
        if not (run_dir / "convergence.csv").exists() or not (run_dir / "image.raw").exists():
            raise ContractViolation(f"{run_dir} has no convergence.csv / image.raw")
    truth_path = _find_truth(dir_a)
    truth = read_raw_image(truth_path) if truth_path is not None else None
    report, difference = compare_runs(
        read_convergence_csv(dir_a / "convergence.csv"),
        read_convergence_csv(dir_b / "convergence.csv"),
        read_raw_image(dir_a / "image.raw"),
        read_raw_image(dir_b / "image.raw"),
        truth,
        names=(str(dir_a), str(dir_b)),
    )
    out = Path(out) if out is not None else dir_b.parent / "comparison"
    return write_comparison(out, report, difference, ["pgm", "raw"])


def run_experiment(config: RunConfig, out_dir=None, threads: Optional[int] = None) -> ExperimentSummary:
    """
    Full pipeline for one config.

    Identical config and seed give identical convergence logs apart from the
    elapsed_s column.

    Raises:
        ConfigurationError, ContractViolation, NumericalError
    """
    directory = run_directory(config, out_dir)
    threads = threads or settings.thread_count
    logger.info(f"Run {directory}: algorithm {config.solver.algorithm}, seed {config.simulation.seed}, "
                f"{threads} threads")
    _write_config(directory, config)

    H, truth, data = prepare_problem(config, threads=threads)
    if config.output.write_truth:
        write_image(directory, "truth", truth, sorted(set(config.output.formats) | {"raw"}))

    summary = ExperimentSummary(directory=str(directory), seed=config.simulation.seed,
                                rays=H.rows, voxels=H.cols)
    results = {}
    if config.solver.algorithm in ("am", "both"):
        results["am"] = solve_am(config, H, data, directory / "am")
    if config.solver.algorithm in ("wam", "both"):
        results["wam"] = solve_wam(config, H, data, directory / "wam")
    summary.runs = [result[0] for result in results.values()]

    if len(results) == 2:
        (_, log_am, image_am), (_, log_wam, image_wam) = results["am"], results["wam"]
        report, difference = compare_runs(
            pd.DataFrame([r.model_dump() for r in log_am]),
            pd.DataFrame([r.model_dump() for r in log_wam]),
            image_am, image_wam, truth, names=("am", "wam"),
        )
        summary.comparison = write_comparison(directory / "comparison", report, difference,
                                              config.output.formats)

    (directory / "summary.json").write_text(summary.model_dump_json(indent=2))
    return summary


def simulate_only(config: RunConfig, out_dir=None, threads: Optional[int] = None) -> ExperimentSummary:
    """Write the simulated sinogram (counts.raw, incident.raw) and ground truth without solving."""
    directory = run_directory(config, out_dir)
    threads = threads or settings.thread_count
    _write_config(directory, config)
    H, truth, data = prepare_problem(config, threads=threads)

    geometry = config.geometry
    sinogram_shape = (geometry.nz, geometry.view_count, geometry.n_detectors)
    write_raw_image(directory / "counts.raw", data.d.reshape(sinogram_shape))
    write_raw_image(directory / "incident.raw", data.i0.reshape(sinogram_shape))
    write_image(directory, "truth", truth, sorted(set(config.output.formats) | {"raw"}))
    logger.info(f"Simulated data written to {directory}")

    summary = ExperimentSummary(directory=str(directory), seed=config.simulation.seed,
                                rays=H.rows, voxels=H.cols)
    (directory / "summary.json").write_text(summary.model_dump_json(indent=2))
    return summary
