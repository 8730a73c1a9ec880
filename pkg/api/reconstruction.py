import logging
from pathlib import Path

from fastapi import APIRouter, HTTPException

from calculators.errors import ConfigurationError, ContractViolation, NumericalError
from config.settings import settings
from models.schemas import CompareRequest, ComparisonReport, ExperimentSummary, RunConfig
from services.experiment import compare_run_dirs, run_experiment

logger = logging.getLogger(__name__)

router = APIRouter()


def _confined(path) -> Path:
    """Resolve a request path against OUTPUT_ROOT; it may not leave the root."""
    root = Path(settings.OUTPUT_ROOT).resolve()
    resolved = (root / path).resolve()
    if resolved != root and root not in resolved.parents:
        raise ContractViolation(f"path {path} is outside the output root")
    return resolved


def _http_error(e: Exception) -> HTTPException:
    if isinstance(e, (ConfigurationError, ContractViolation)):
        return HTTPException(status_code=422, detail=str(e))
    if isinstance(e, NumericalError):
        return HTTPException(status_code=500, detail=f"Numerical failure: {e}")
    return HTTPException(status_code=500, detail=f"Reconstruction failed: {str(e)}")


@router.post("/run", response_model=ExperimentSummary)
def run_reconstruction(config: RunConfig):
    """
    Simulate data and run the configured solvers.

    The body has the same sections as an INI run config:

    ```json
    {
        "geometry": {"nx": 32, "ny": 32, "beam": "parallel", "n_views": 24, "n_detectors": 48},
        "simulation": {"i0": 10000, "seed": 1},
        "solver": {"algorithm": "both", "am_iterations": 20, "wam_iterations": 40, "depth": 2}
    }
    ```

    `output.directory`, when given, is relative to the server's output root.

    **Returns**: the run summary, including output directory, per-solver
    results and the matched-objective comparison when both solvers ran.
    """
    try:
        out_dir = _confined(config.output.directory) if config.output.directory else None
        return run_experiment(config, out_dir)
    except Exception as e:
        logger.error(f"Reconstruction run failed: {e}", exc_info=True)
        raise _http_error(e)


@router.post("/compare", response_model=ComparisonReport)
def compare_reconstructions(request: CompareRequest):
    """
    Compare two finished solver directories (convergence.csv + image.raw each).

    All paths are relative to the server's output root.
    """
    try:
        run_a, run_b = _confined(request.run_a), _confined(request.run_b)
        out = _confined(request.out if request.out else run_b.parent / "comparison")
        return compare_run_dirs(run_a, run_b, out)
    except Exception as e:
        logger.error(f"Comparison failed: {e}", exc_info=True)
        raise _http_error(e)


@router.get("/defaults", response_model=RunConfig)
def default_config():
    """
    Default run configuration: 64x64 fan-beam comparison of both solvers.

    **No side effects** - informational endpoint.
    """
    return RunConfig()
