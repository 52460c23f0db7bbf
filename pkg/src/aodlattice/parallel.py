"""Patch-parallel MAP sweeps.

The lattice is partitioned into contiguous rectangular patches; each sweep
updates every patch concurrently against an immutable snapshot of the
previous iteration.  Within a patch, regions are visited sequentially in
index order and neighbor reads see the patch's live values; reads that
cross a patch border resolve to the snapshot.  A barrier separates sweeps;
kappa and sigma2 are global reductions and are recomputed once per sweep
from the merged field.

Execution realizes the neighbor-surrogate rule by giving each patch a
private copy of the sweep-start field and writing only its own region
indices, so the merge is a deterministic concatenation and the result is
identical across the serial, thread and process executors.  Proposal
randomness is keyed by (seed, sweep, region), never by patch or thread, so
a region sees the same draws under any partitioning; with a single patch
the run is bitwise identical to the sequential solver.
"""

from __future__ import annotations

import copy
import math
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .map_solver import (
    SolverConfig,
    SweepTrace,
    Workspace,
    _checked_initial_value,
    _hyper_update_deltas,
    sweep_regions,
)
from .model import (
    THETA_FLOOR,
    ConfigurationError,
    LatticeTopology,
    RetrievalState,
    Scene,
    log_posterior,
)

EXECUTORS = ("serial", "thread", "process")


@dataclass(frozen=True)
class PatchPartition:
    """Disjoint rectangular patches covering the whole lattice."""

    n_patches: int
    assignment: np.ndarray
    patches: tuple
    rects: tuple

    def validate(self, lattice: LatticeTopology) -> None:
        P = lattice.n_regions
        seen = np.zeros(P, dtype=bool)
        for regions in self.patches:
            if seen[regions].any():
                raise ConfigurationError("patches overlap")
            seen[regions] = True
        if not seen.all():
            raise ConfigurationError("patches do not cover the lattice")


def partition(lattice: LatticeTopology, n_patches: int) -> PatchPartition:
    """Split the lattice into n_patches contiguous rectangles.

    Recursive proportional bisection: each rectangle is cut so the two
    sides' cells-per-patch stay as close as possible, preferring cuts
    across the longer axis and balanced patch counts.  Areas stay within a
    factor 2 of each other.
    """
    P = lattice.n_regions
    if not 1 <= n_patches <= P:
        raise ConfigurationError(
            f"n_patches must be in [1, {P}], got {n_patches}"
        )
    rects = []
    stack = [(0, lattice.height, 0, lattice.width, n_patches)]
    while stack:
        r0, r1, c0, c1, n = stack.pop()
        if n == 1:
            rects.append((r0, r1, c0, c1))
            continue
        h, w = r1 - r0, c1 - c0
        cells = h * w
        best = None
        for axis in ("c", "r"):
            length = h if axis == "r" else w
            other = w if axis == "r" else h
            prefer = 0 if length >= other else 1
            for cut in range(1, length):
                cells1 = cut * other
                exact = n * cells1 / cells
                for n1 in {int(math.floor(exact)), int(math.ceil(exact))}:
                    n1 = min(max(n1, 1), n - 1)
                    a1 = cells1 / n1
                    a2 = (cells - cells1) / (n - n1)
                    imb = max(a1, a2) / min(a1, a2)
                    key = (imb, prefer, abs(n1 - n / 2), axis, cut, n1)
                    if best is None or key < best:
                        best = key
        _, _, _, axis, cut, n1 = best
        if axis == "r":
            stack.append((r0, r0 + cut, c0, c1, n1))
            stack.append((r0 + cut, r1, c0, c1, n - n1))
        else:
            stack.append((r0, r1, c0, c0 + cut, n1))
            stack.append((r0, r1, c0 + cut, c1, n - n1))
    rects.sort()
    assignment = np.empty(P, dtype=np.intp)
    patches = []
    for k, (r0, r1, c0, c1) in enumerate(rects):
        rows = np.arange(r0, r1)
        cols = np.arange(c0, c1)
        regions = (rows[:, None] * lattice.width + cols[None, :]).ravel()
        regions.sort()
        patches.append(regions)
        assignment[regions] = k
    part = PatchPartition(
        n_patches=n_patches,
        assignment=assignment,
        patches=tuple(patches),
        rects=tuple(rects),
    )
    part.validate(lattice)
    return part


@dataclass
class SpeedupRecord:
    """Per-sweep wall time rows for throughput reporting."""

    rows: list = field(default_factory=list)  # (n_patches, sweep, elapsed_ms)

    def add(self, n_patches: int, sweep: int, elapsed_ms: float) -> None:
        self.rows.append((n_patches, sweep, elapsed_ms))

    def total_ms(self) -> float:
        return float(sum(r[2] for r in self.rows))


def _patch_clone(ws: Workspace, snap_tau, snap_theta, state_tau, state_theta, regions):
    """A workspace view whose field starts at the snapshot, with the
    patch's own regions taken live; pred is shared (disjoint row writes)."""
    clone = copy.copy(ws)
    clone.tau = snap_tau.copy()
    clone.theta = snap_theta.copy()
    clone.tau[regions] = state_tau[regions]
    clone.theta[regions] = state_theta[regions]
    return clone


def parallel_sweep(
    state: RetrievalState,
    snapshot: RetrievalState,
    scene: Scene,
    forward,
    lattice: LatticeTopology,
    part: PatchPartition,
    config: SolverConfig,
    sweep: int = 1,
) -> RetrievalState:
    """One barrier-synchronized patch-parallel sweep; returns the merged state.

    Each patch updates its regions sequentially; neighbor reads resolve to
    the live in-patch value and to `snapshot` outside the patch.  kappa and
    sigma2 are recomputed once from the merged field afterwards.
    """
    ws = Workspace(scene, forward, lattice, config.hyper, state)
    snap_tau = snapshot.tau.astype(float)
    snap_theta = snapshot.theta.astype(float)
    clones = [
        _patch_clone(ws, snap_tau, snap_theta, ws.tau, ws.theta, regions)
        for regions in part.patches
    ]
    for clone, regions in zip(clones, part.patches):
        sweep_regions(clone, regions, sweep, config)
    for clone, regions in zip(clones, part.patches):
        ws.tau[regions] = clone.tau[regions]
        ws.theta[regions] = clone.theta[regions]
    ws.resync()
    _hyper_update_deltas(ws)
    return ws.to_state()


def _posterior_from_caches(ws: Workspace) -> float:
    """Joint log-posterior of the workspace field, from maintained caches."""
    P = ws.lattice.n_regions
    mask = ws.mask
    misfit = float(np.sum(ws.sse[mask] / (2.0 * ws.sigma2[mask])))
    smooth = 0.5 * ws.kappa * ws.S
    kappa_term = 0.5 * (P - 3) * math.log(ws.kappa) if ws.kappa > 0 else -math.inf
    noise_norm = -0.5 * (P + 2) * float(np.sum(np.log(2.0 * math.pi * ws.sigma2[mask])))
    alpha = ws.hyper.alpha
    dirichlet = float(np.sum((alpha - 1.0) * np.log(np.maximum(ws.theta, THETA_FLOOR))))
    dir_norm = math.lgamma(float(alpha.sum())) - float(
        sum(math.lgamma(a) for a in alpha)
    )
    return kappa_term + noise_norm - misfit - smooth + dirichlet + dir_norm


# Static context for process-pool workers, installed once per pool by fork
# or by the initializer; sweeps then ship only the dynamic field.
_WORKER_CTX: dict = {}


def _process_init(scene, forward, lattice, hyper, config):
    _WORKER_CTX["ws_shell"] = (scene, forward, lattice, hyper)
    _WORKER_CTX["config"] = config


def _process_task(args):
    sweep, regions, snap_tau, snap_theta, pred_rows, sigma2, kappa = args
    scene, forward, lattice, hyper = _WORKER_CTX["ws_shell"]
    config = _WORKER_CTX["config"]
    ws = Workspace.shell(scene, forward, lattice, hyper)
    ws.tau = snap_tau
    ws.theta = snap_theta
    ws.sigma2 = sigma2
    ws.kappa = kappa
    ws.pred = np.zeros((lattice.n_regions, scene.channels))
    ws.pred[regions] = pred_rows
    dsum, acc_t, acc_h = sweep_regions(ws, regions, sweep, config)
    return ws.tau[regions], ws.theta[regions], ws.pred[regions], dsum, acc_t, acc_h


def run_map_parallel(
    scene: Scene,
    forward,
    lattice: LatticeTopology,
    config: SolverConfig,
    n_patches: int,
    init: RetrievalState,
    executor: str = "thread",
):
    """Full MAP loop with patch-parallel sweeps.

    Returns (state, trace, speedup_record).  Results are deterministic in
    (seed, n_patches) and independent of the executor; with n_patches = 1
    the final state is bitwise equal to the sequential solver's.

    The trace's log_posterior column telescopes accepted deltas when no
    stale reads can occur (single patch) and is otherwise recomputed per
    sweep from the merged field, where stale reads may dent monotonicity
    transiently.
    """
    config.validate()
    if executor not in EXECUTORS:
        raise ConfigurationError(f"executor must be one of {EXECUTORS}")
    if config.kappa_sigma_update_cadence != "per_sweep":
        raise ConfigurationError(
            "patch-parallel runs update kappa/sigma2 per sweep (global reductions)"
        )
    part = partition(lattice, n_patches)
    f0 = _checked_initial_value(scene, forward, lattice, config, init)
    ws = Workspace(scene, forward, lattice, config.hyper, init)
    trace = SweepTrace(n_regions=lattice.n_regions)
    trace.initial_log_posterior = f0
    speedup = SpeedupRecord()
    pool = None
    try:
        if executor == "thread" and n_patches > 1:
            pool = ThreadPoolExecutor(max_workers=min(n_patches, 16))
        elif executor == "process" and n_patches > 1:
            pool = ProcessPoolExecutor(
                max_workers=min(n_patches, 8),
                initializer=_process_init,
                initargs=(scene, forward, lattice, config.hyper, config),
            )
        f = f0
        eps = config.epsilon
        for sweep in range(1, config.max_sweeps + 1):
            t0 = time.perf_counter()
            dsum_total, acc_t, acc_h = _one_parallel_sweep(ws, part, sweep, config, pool, executor)
            ws.resync()
            dh, degenerate = _hyper_update_deltas(ws)
            if n_patches == 1:
                f = f + dsum_total + dh
            else:
                f = _posterior_from_caches(ws)
            elapsed = (time.perf_counter() - t0) * 1000.0
            trace.log_posterior.append(f)
            trace.tau_accepts.append(acc_t)
            trace.theta_accepts.append(acc_h)
            trace.kappa.append(ws.kappa)
            trace.kappa_degenerate.append(degenerate)
            trace.elapsed_ms.append(elapsed)
            speedup.add(n_patches, sweep, elapsed)
            if eps is None:
                eps = config.epsilon_rel * abs(f)
            prev = trace.log_posterior[-2] if sweep > 1 else f0
            if abs(f - prev) < eps:
                trace.converged = True
                break
        trace.epsilon = eps
    finally:
        if pool is not None:
            pool.shutdown()
    final = ws.to_state()
    trace.final_log_posterior = log_posterior(scene, final, config.hyper, forward)
    return final, trace, speedup


def _one_parallel_sweep(ws, part, sweep, config, pool, executor):
    """Dispatch all patches for one sweep and merge; returns (dsum, acc_t, acc_h)."""
    snap_tau = ws.tau.copy()
    snap_theta = ws.theta.copy()
    dsum_total = 0.0
    acc_t = 0
    acc_h = 0
    if pool is None:
        for regions in part.patches:
            clone = _patch_clone(ws, snap_tau, snap_theta, snap_tau, snap_theta, regions)
            d, at, ah = sweep_regions(clone, regions, sweep, config)
            ws.tau[regions] = clone.tau[regions]
            ws.theta[regions] = clone.theta[regions]
            dsum_total += d
            acc_t += at
            acc_h += ah
    elif executor == "thread":
        def task(regions):
            clone = _patch_clone(ws, snap_tau, snap_theta, snap_tau, snap_theta, regions)
            d, at, ah = sweep_regions(clone, regions, sweep, config)
            return regions, clone, d, at, ah

        results = list(pool.map(task, part.patches))
        for regions, clone, d, at, ah in results:
            ws.tau[regions] = clone.tau[regions]
            ws.theta[regions] = clone.theta[regions]
            dsum_total += d
            acc_t += at
            acc_h += ah
    else:
        args = [
            (sweep, regions, snap_tau, snap_theta, ws.pred[regions], ws.sigma2, ws.kappa)
            for regions in part.patches
        ]
        results = list(pool.map(_process_task, args))
        for regions, (tau_r, theta_r, pred_r, d, at, ah) in zip(part.patches, results):
            ws.tau[regions] = tau_r
            ws.theta[regions] = theta_r
            ws.pred[regions] = pred_r
            dsum_total += d
            acc_t += at
            acc_h += ah
    return dsum_total, acc_t, acc_h
