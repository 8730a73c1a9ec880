# Classical unregularized alternating minimization in the voxel domain

import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, List, Optional

import numpy as np

from calculators.errors import NumericalError
from calculators.phantom import TransmissionData
from calculators.projector import (
    SystemMatrix,
    back_project,
    forward_project,
    i_divergence,
    predicted_means,
)
from models.schemas import ConvergenceRecord

logger = logging.getLogger(__name__)

SOLVER_NAME = "am"


@dataclass(frozen=True, eq=False)
class AmState:
    """
    Voxel-domain iterate.

    `b` = H^T d is fixed by the data, `z0` is the largest ray length through
    the image. `q_hat` always matches `mu`.
    """
    mu: np.ndarray
    q_hat: np.ndarray
    iteration: int
    b: np.ndarray
    z0: float
    cum_updates: int = 0


def init_am_state(H: SystemMatrix, data: TransmissionData, init_value: float = 0.0) -> AmState:
    """
    Start from a constant image (zero by default, so q_hat = I0).

    Raises:
        NumericalError: no ray crosses the image (Z0 = 0)
    """
    z0 = float(H.row_sums().max()) if H.rows else 0.0
    if not z0 > 0:
        raise NumericalError("Z0 must be positive: no ray intersects the image")
    mu = np.full(H.cols, float(init_value))
    q_hat = predicted_means(data.i0, forward_project(H, mu))
    return AmState(mu=mu, q_hat=q_hat, iteration=0, b=back_project(H, data.d), z0=z0)


def am_iterate(state: AmState, H: SystemMatrix, data: TransmissionData, clamp: bool = True) -> AmState:
    """
    One full image update.

    mu(x) <- mu(x) + ln(b_hat(x) / b(x)) / Z0 with b_hat = H^T q_hat, clamped
    at zero when `clamp` is set. Voxels with b(x) = 0 or b_hat(x) = 0 have no
    data support and keep their value.

    Raises:
        NumericalError: non-finite update, with the voxel index
    """
    b_hat = back_project(H, state.q_hat)
    supported = (state.b > 0) & (b_hat > 0)

    step = np.zeros_like(state.mu)
    step[supported] = np.log(b_hat[supported] / state.b[supported]) / state.z0
    mu = state.mu + step
    bad = np.flatnonzero(~np.isfinite(mu))
    if bad.size:
        raise NumericalError("non-finite voxel update", index=int(bad[0]))
    if clamp:
        np.maximum(mu, 0.0, out=mu)

    q_hat = predicted_means(data.i0, forward_project(H, mu))
    return replace(state, mu=mu, q_hat=q_hat, iteration=state.iteration + 1,
                   cum_updates=state.cum_updates + H.cols)


def run_am(state: AmState, H: SystemMatrix, data: TransmissionData, iterations: int,
           clamp: bool = True, log_every: int = 10,
           on_record: Optional[Callable[[ConvergenceRecord], None]] = None):
    """
    Run `iterations` AM updates, recording the objective after each one.

    The first record (iter 0) describes the starting point.

    Returns:
        (final state, list of ConvergenceRecord)
    """
    start = time.perf_counter()
    records: List[ConvergenceRecord] = []

    def record(current: AmState):
        entry = ConvergenceRecord(
            iter=current.iteration,
            objective=i_divergence(data.d, current.q_hat),
            elapsed_s=time.perf_counter() - start,
            active_set=H.cols,
            cum_updates=current.cum_updates,
        )
        records.append(entry)
        if on_record is not None:
            on_record(entry)
        return entry

    record(state)
    for _ in range(iterations):
        try:
            state = am_iterate(state, H, data, clamp=clamp)
        except NumericalError as e:
            raise e.within(SOLVER_NAME, state.iteration + 1) from e
        entry = record(state)
        if entry.iter % log_every == 0 or entry.iter == iterations:
            logger.info(f"AM iteration {entry.iter}: objective {entry.objective:.6e} ({entry.elapsed_s:.2f}s)")

    return state, records
