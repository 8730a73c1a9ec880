# Alternating minimization over an adaptive set of Haar coefficients

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from calculators.errors import ContractViolation, NumericalError
from calculators.haar import (
    ActiveTree,
    CoefficientLayout,
    WaveletCoefficients,
    WaveletSystemColumns,
    expand_tree,
    synthesize,
)
from calculators.phantom import TransmissionData
from calculators.projector import SystemMatrix, forward_project, i_divergence, predicted_means
from models.schemas import ClampReport, ConvergenceRecord

logger = logging.getLogger(__name__)

SOLVER_NAME = "wam"

# Coefficient update outcomes
UPDATED = 0
SKIPPED = 1       # no ray crosses the footprint
UNSOLVABLE = 2    # sign pattern without a positive root


@dataclass(frozen=True)
class ExpansionSchedule:
    """Iterations after which the tree is expanded, and the threshold factor."""
    iterations: Tuple[int, ...] = (64, 128, 256)
    threshold_factor: float = 0.1

    @classmethod
    def none(cls) -> "ExpansionSchedule":
        return cls(iterations=())


@dataclass(frozen=True, eq=False)
class SurrogateStats:
    """
    Back projections driving one simultaneous update of the active set.

    b = Phi^T d (data), b_plus / b_minus = back projections of q_hat through
    the positive / negative parts of the active columns; z0 is the largest
    absolute row sum of the active block of Phi.
    """
    indices: np.ndarray
    b: np.ndarray
    b_plus: np.ndarray
    b_minus: np.ndarray
    z0: float


@dataclass(frozen=True, eq=False)
class ActiveSystem:
    """The active block of Phi split by sign; rebuilt only when the tree changes."""
    indices: np.ndarray
    phi: sparse.csc_matrix
    phi_plus: sparse.csc_matrix
    phi_minus: sparse.csc_matrix
    z0: float
    b: np.ndarray

    @property
    def nnz(self) -> int:
        return self.phi.nnz


@dataclass(frozen=True, eq=False)
class WamState:
    """Current coefficients, tree and predicted means, plus run counters."""
    beta: WaveletCoefficients
    tree: ActiveTree
    q_hat: np.ndarray
    iteration: int
    schedule: ExpansionSchedule
    system: ActiveSystem
    columns: WaveletSystemColumns
    b_all: np.ndarray
    stats: Optional[SurrogateStats] = None
    cum_updates: int = 0
    work: int = 0
    skipped: int = 0
    unsolvable: int = 0
    expansions: Tuple[int, ...] = field(default_factory=tuple)


def positive_root(b, b_plus, b_minus) -> np.ndarray:
    """
    Positive root u of b_plus*u^2 - b*u + b_minus = 0 (NaN when none exists).

    With b_plus >= 0 >= b_minus the discriminant is at least b^2. The root is
    taken as (b + sqrt(D)) / (2 b_plus) for b >= 0 and in the cancellation-free
    form 2 b_minus / (b - sqrt(D)) for b < 0.
    """
    b = np.asarray(b, dtype=np.float64)
    b_plus = np.asarray(b_plus, dtype=np.float64)
    b_minus = np.asarray(b_minus, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        root = np.sqrt(b * b - 4.0 * b_plus * b_minus)
        u = np.where(b >= 0, (b + root) / (2.0 * b_plus), (2.0 * b_minus) / (b - root))
    return np.where(np.isfinite(u) & (u > 0), u, np.nan)


def solve_coefficient_updates(b, b_plus, b_minus, z0: float, beta_hat) -> Tuple[np.ndarray, np.ndarray]:
    """
    Vectorized closed-form minimizer of the per-coefficient surrogate.

    Solves b - b_plus*exp(-z0*(x - beta_hat)) - b_minus*exp(z0*(x - beta_hat)) = 0.
    Coefficients with b_plus = b_minus = 0 are skipped, those without a
    positive root are left unchanged; both are reported in the status array.

    Returns:
        (new values, status codes UPDATED / SKIPPED / UNSOLVABLE)
    """
    if not z0 > 0:
        raise NumericalError("Z0 must be positive")
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    b_plus = np.asarray(b_plus, dtype=np.float64)
    b_minus = np.asarray(b_minus, dtype=np.float64)
    if np.any(b_plus < 0) or np.any(b_minus > 0):
        raise ContractViolation("b_plus must be >= 0 and b_minus <= 0")

    u = positive_root(b, b_plus, b_minus)
    status = np.full(beta_hat.shape, UPDATED, dtype=np.int8)
    status[np.isnan(u)] = UNSOLVABLE
    status[(b_plus == 0) & (b_minus == 0)] = SKIPPED

    updated = status == UPDATED
    values = beta_hat.copy()
    values[updated] = beta_hat[updated] - np.log(u[updated]) / z0
    return values, status


def solve_coefficient_update(b: float, b_plus: float, b_minus: float, z0: float, beta_hat: float) -> float:
    """Scalar form of solve_coefficient_updates; unsolvable patterns return beta_hat."""
    values, _ = solve_coefficient_updates(
        np.array([b], dtype=np.float64), np.array([b_plus]), np.array([b_minus]), z0, np.array([beta_hat])
    )
    return float(values[0])


def surrogate_gradient(b, b_plus, b_minus, z0: float, beta, beta_hat) -> np.ndarray:
    """Derivative of the per-coefficient surrogate at beta."""
    delta = z0 * (np.asarray(beta) - np.asarray(beta_hat))
    return b - b_plus * np.exp(-delta) - b_minus * np.exp(delta)


def _split_by_sign(phi: sparse.csc_matrix) -> Tuple[sparse.csc_matrix, sparse.csc_matrix]:
    plus = phi.copy()
    plus.data = np.where(plus.data > 0, plus.data, 0.0)
    plus.eliminate_zeros()
    minus = phi.copy()
    minus.data = np.where(minus.data < 0, minus.data, 0.0)
    minus.eliminate_zeros()
    return plus, minus


def build_active_system(columns: WaveletSystemColumns, tree: ActiveTree, data: TransmissionData,
                        b_all: np.ndarray) -> ActiveSystem:
    """
    Assemble the active block of Phi for a tree.

    b(z) is filled in `b_all` only for coefficients that have never been
    active before; it depends on the data alone.

    Raises:
        NumericalError: Z0 = 0 (no active column meets any ray)
    """
    indices = tree.active_indices()
    phi = columns.matrix(indices)

    missing = np.flatnonzero(np.isnan(b_all[indices]))
    if missing.size:
        b_all[indices[missing]] = phi[:, missing].T @ data.d

    row_sums = np.asarray(abs(phi).sum(axis=1)).ravel()
    z0 = float(row_sums.max()) if row_sums.size else 0.0
    if not z0 > 0:
        raise NumericalError("Z0 must be positive: the active columns meet no ray")

    plus, minus = _split_by_sign(phi)
    return ActiveSystem(indices=indices, phi=phi, phi_plus=plus, phi_minus=minus,
                        z0=z0, b=b_all[indices].copy())


def _means_from(beta: WaveletCoefficients, H: SystemMatrix, data: TransmissionData) -> np.ndarray:
    return predicted_means(data.i0, forward_project(H, synthesize(beta).ravel()))


def init_state(H: SystemMatrix, data: TransmissionData, depth: int = 3,
               init_beta: Optional[WaveletCoefficients] = None, *,
               layout: Optional[CoefficientLayout] = None,
               tree: Optional[ActiveTree] = None,
               schedule: Optional[ExpansionSchedule] = None,
               max_columns: Optional[int] = None) -> WamState:
    """
    Initial state: approximation roots only, beta = init_beta (zero by default).

    Args:
        H: system matrix
        data: transmission data
        depth: Haar decomposition depth L
        init_beta: starting coefficients
        layout: coefficient layout; derived from H.geometry when omitted
        tree: starting tree (approximation roots by default)
        schedule: expansion schedule (64, 128, 256 at factor 0.1 when omitted)
        max_columns: optional LRU cap of the column cache

    Raises:
        ConfigurationError: grid incompatible with depth
    """
    if layout is None:
        if H.geometry is None:
            raise ContractViolation("a coefficient layout is required for matrices without geometry")
        layout = CoefficientLayout.from_geometry(H.geometry, depth)
    elif layout.depth != depth:
        raise ContractViolation(f"layout depth {layout.depth} differs from requested depth {depth}")
    if H.rows != data.rays:
        raise ContractViolation(f"system matrix has {H.rows} rays, data has {data.rays}")

    beta = init_beta if init_beta is not None else WaveletCoefficients.zeros(layout)
    if beta.layout.size != layout.size or beta.layout.depth != depth:
        raise ContractViolation("initial coefficients do not match the layout")
    tree = tree if tree is not None else ActiveTree.approx_only(layout)
    schedule = schedule if schedule is not None else ExpansionSchedule()

    columns = WaveletSystemColumns(H, layout, max_columns=max_columns)
    b_all = np.full(layout.size, np.nan)
    system = build_active_system(columns, tree, data, b_all)
    logger.info(f"Wavelet AM: depth {depth}, {system.indices.size} active coefficients, Z0 = {system.z0:.4g}")
    return WamState(beta=beta, tree=tree, q_hat=_means_from(beta, H, data), iteration=0,
                    schedule=schedule, system=system, columns=columns, b_all=b_all)


def wam_iterate(state: WamState, H: SystemMatrix, data: TransmissionData) -> WamState:
    """
    One simultaneous update of every active coefficient from the same q_hat.

    Raises:
        NumericalError: non-finite coefficient update (index of the coefficient)
    """
    system = state.system
    b_plus = system.phi_plus.T @ state.q_hat
    b_minus = system.phi_minus.T @ state.q_hat

    flat = state.beta.flat()
    values, status = solve_coefficient_updates(system.b, b_plus, b_minus, system.z0, flat[system.indices])
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericalError("non-finite coefficient update", index=int(system.indices[bad[0]]))

    unsolvable = int(np.count_nonzero(status == UNSOLVABLE))
    if unsolvable:
        logger.warning(f"Wavelet AM iteration {state.iteration + 1}: {unsolvable} coefficients without a positive root")

    new_flat = flat.copy()
    new_flat[system.indices] = values
    beta = state.beta.with_values(new_flat)
    stats = SurrogateStats(indices=system.indices, b=system.b, b_plus=b_plus, b_minus=b_minus, z0=system.z0)
    return replace(
        state,
        beta=beta,
        q_hat=_means_from(beta, H, data),
        iteration=state.iteration + 1,
        stats=stats,
        cum_updates=state.cum_updates + int(system.indices.size),
        work=state.work + system.nnz,
        skipped=state.skipped + int(np.count_nonzero(status == SKIPPED)),
        unsolvable=state.unsolvable + unsolvable,
    )


def expand_state(state: WamState, data: TransmissionData) -> WamState:
    """Apply the threshold expansion and refresh Phi, b and Z0 for the new tree."""
    tree = expand_tree(state.tree, state.beta, state.schedule.threshold_factor)
    expansions = state.expansions + (state.iteration,)
    if tree.size == state.tree.size:
        return replace(state, tree=tree, expansions=expansions)
    system = build_active_system(state.columns, tree, data, state.b_all)
    logger.info(f"Wavelet AM iteration {state.iteration}: tree expanded to {tree.size} coefficients, "
                f"Z0 = {system.z0:.4g}")
    return replace(state, tree=tree, system=system, expansions=expansions)


def run_wam(state: WamState, H: SystemMatrix, data: TransmissionData, iterations: int,
            schedule: Optional[ExpansionSchedule] = None, log_every: int = 10,
            on_record: Optional[Callable[[ConvergenceRecord], None]] = None,
            on_expand: Optional[Callable[[WamState], None]] = None):
    """
    Run `iterations` wavelet AM updates with scheduled tree expansions.

    An expansion listed at iteration j happens after j updates, before
    update j+1. Records start with iter 0 (the initial state).

    Returns:
        (final state, list of ConvergenceRecord)
    """
    if schedule is not None:
        state = replace(state, schedule=schedule)
    scheduled = set(state.schedule.iterations)
    start = time.perf_counter()
    records: List[ConvergenceRecord] = []

    def record(current: WamState):
        entry = ConvergenceRecord(
            iter=current.iteration,
            objective=i_divergence(data.d, current.q_hat),
            elapsed_s=time.perf_counter() - start,
            active_set=current.tree.size,
            cum_updates=current.cum_updates,
        )
        records.append(entry)
        if on_record is not None:
            on_record(entry)
        return entry

    record(state)
    target = state.iteration + iterations
    while state.iteration < target:
        try:
            if state.iteration in scheduled:
                state = expand_state(state, data)
                if on_expand is not None:
                    on_expand(state)
            state = wam_iterate(state, H, data)
        except NumericalError as e:
            raise e.within(SOLVER_NAME, state.iteration + 1) from e
        entry = record(state)
        if entry.iter % log_every == 0 or entry.iter == target:
            logger.info(f"Wavelet AM iteration {entry.iter}: objective {entry.objective:.6e}, "
                        f"{entry.active_set} active ({entry.elapsed_s:.2f}s)")

    return state, records


def clamp_output(image: np.ndarray) -> Tuple[np.ndarray, ClampReport]:
    """Clamp an output image at zero and report what was clipped."""
    negative = image < 0
    clipped = -image[negative]
    report = ClampReport(
        clipped_voxels=int(negative.sum()),
        max_clipped=float(clipped.max()) if clipped.size else 0.0,
        total_clipped=float(clipped.sum()),
    )
    if report.clipped_voxels:
        logger.warning(f"Output clamp: {report.clipped_voxels} voxels below zero (max {report.max_clipped:.3g})")
    return np.maximum(image, 0.0), report


def final_image(state: WamState) -> Tuple[np.ndarray, ClampReport]:
    """Synthesized, zero-clamped image of the current coefficients."""
    return clamp_output(synthesize(state.beta))


def surrogate_bound_margin(state: WamState) -> float:
    """Z0 minus the largest absolute row sum of freshly computed active columns (>= 0 when valid)."""
    fresh = state.columns.matrix(state.system.indices, fresh=True)
    return state.system.z0 - float(np.asarray(abs(fresh).sum(axis=1)).max())


def schedule_from(iterations: Sequence[int], threshold_factor: float) -> ExpansionSchedule:
    return ExpansionSchedule(iterations=tuple(sorted(set(int(i) for i in iterations))),
                             threshold_factor=float(threshold_factor))
