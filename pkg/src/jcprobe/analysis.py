"""Ensemble statistics, purity-time extraction and inference metrics.

The measurement time tau is extracted from the ensemble-mean purity with the
saturating-exponential model P(t) = 1 - (1 - P(0)) exp(-t / tau): P(0) is
pinned to the measured initial value and the slope is fitted by least
squares on log(1 - P), dropping saturated points where 1 - P <= 1e-3 so the
late-time plateau cannot dominate.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from joblib import Parallel, delayed

from jcprobe import _kernels
from jcprobe.sme import (
    GridMismatchError,
    SimulationConfig,
    TrajectoryRecord,
    _noise_generator,
    derive_seed,
    run_ensemble,
    worker_count,
)

SATURATION_DEFICIT = 1e-3


class FitDegenerateError(RuntimeError):
    """The purity data cannot constrain the fit."""


@dataclass
class EnsembleSummary:
    """Pointwise mean/std of trajectory observables across an ensemble."""

    times: np.ndarray
    mean_purity: np.ndarray
    std_purity: np.ndarray
    mean_p_m: np.ndarray
    std_p_m: np.ndarray
    mean_sigma_ee: np.ndarray
    std_sigma_ee: np.ndarray
    mean_mean_n: np.ndarray
    std_mean_n: np.ndarray
    mean_leakage: np.ndarray
    std_leakage: np.ndarray
    mean_dY: np.ndarray
    std_dY: np.ndarray
    n_trajectories: int
    seeds: tuple


@dataclass
class PurityFit:
    p0: float
    tau: float
    residual: float
    n_points_used: int


@dataclass
class SweepEntry:
    k: float
    fit: Optional[PurityFit]
    error: Optional[str]
    n_trajectories: int
    seeds: tuple = field(repr=False, default=())


def aggregate(records: list) -> EnsembleSummary:
    """Pointwise mean and unbiased standard deviation across trajectories."""
    if not records:
        raise ValueError("cannot aggregate an empty list of records")
    times = records[0].times
    for r in records[1:]:
        if r.times.shape != times.shape or not np.array_equal(r.times, times):
            raise GridMismatchError("records do not share a time grid")

    def stats(stack: np.ndarray):
        mean = stack.mean(axis=0)
        if stack.shape[0] == 1:
            return mean, np.zeros_like(mean)
        return mean, stack.std(axis=0, ddof=1)

    pur = np.stack([r.purity for r in records])
    p_m = np.stack([r.p_m for r in records])
    sig = np.stack([r.sigma_ee for r in records])
    mean_n = np.stack([r.mean_n for r in records])
    leak = np.stack([r.leakage for r in records])
    dy = np.stack([r.dY for r in records])
    m_pur, s_pur = stats(pur)
    m_pm, s_pm = stats(p_m)
    m_sig, s_sig = stats(sig)
    m_n, s_n = stats(mean_n)
    m_leak, s_leak = stats(leak)
    m_dy, s_dy = stats(dy)
    return EnsembleSummary(
        times=times.copy(),
        mean_purity=m_pur,
        std_purity=s_pur,
        mean_p_m=m_pm,
        std_p_m=s_pm,
        mean_sigma_ee=m_sig,
        std_sigma_ee=s_sig,
        mean_mean_n=m_n,
        std_mean_n=s_n,
        mean_leakage=m_leak,
        std_leakage=s_leak,
        mean_dY=m_dy,
        std_dY=s_dy,
        n_trajectories=len(records),
        seeds=tuple(r.seed for r in records),
    )


def fit_purity(summary: EnsembleSummary) -> PurityFit:
    """Fit tau with P(0) pinned to the measured initial mean purity."""
    times = summary.times
    purity = summary.mean_purity
    if len(times) < 10:
        raise ValueError(f"need at least 10 time points, got {len(times)}")
    p0 = float(purity[0])
    if p0 >= 1.0:
        raise ValueError(f"initial mean purity {p0} leaves nothing to fit")
    deficit = 1.0 - purity
    mask = deficit > SATURATION_DEFICIT
    if not mask.any():
        raise FitDegenerateError(
            f"all points saturated (1 - P <= {SATURATION_DEFICIT:g}); tau unresolvable"
        )
    t = times[mask]
    y = np.log(deficit[mask])
    c = np.log(1.0 - p0)
    denom = float((t * t).sum())
    if denom == 0.0:
        raise FitDegenerateError("no usable points at t > 0")
    slope = float((t * (c - y)).sum()) / denom
    if slope <= 0.0:
        raise FitDegenerateError("mean purity does not relax toward 1; tau undefined")
    tau = 1.0 / slope
    model = 1.0 - (1.0 - p0) * np.exp(-t / tau)
    residual = float(np.sqrt(np.mean((model - purity[mask]) ** 2)))
    return PurityFit(p0=p0, tau=tau, residual=residual, n_points_used=int(mask.sum()))


def _config_for_k(base_cfg: SimulationConfig, k: float) -> SimulationConfig:
    """Per-k configuration; dt is refined so k dt stays at or below 1e-3."""
    dt = base_cfg.dt
    sample_every = base_cfg.sample_every
    while k * dt > 1e-3 * base_cfg.model.g:
        dt /= 10.0
        sample_every *= 10
    return replace(base_cfg, k=k, dt=dt, sample_every=sample_every)


def _sweep_one(base_cfg: SimulationConfig, k: float, n_traj: int, base_seed: int) -> SweepEntry:
    try:
        cfg = _config_for_k(base_cfg, k)
        records = run_ensemble(cfg, n_traj, base_seed=base_seed, n_jobs=1)
        summary = aggregate(records)
        fit = fit_purity(summary)
        return SweepEntry(k=k, fit=fit, error=None, n_trajectories=n_traj, seeds=summary.seeds)
    except Exception as exc:  # noqa: BLE001 - the sweep must continue past failures
        return SweepEntry(k=k, fit=None, error=f"{type(exc).__name__}: {exc}", n_trajectories=n_traj)


def sweep_tau(
    k_values: list,
    base_cfg: SimulationConfig,
    n_traj: int,
    base_seed: Optional[int] = None,
    n_jobs: Optional[int] = None,
) -> list:
    """Purity-time fits over probing strengths.

    Per-trajectory seeds derive from (base seed, k, index), so results do
    not depend on the ordering of ``k_values`` or on the worker count.
    Individual fit failures are reported in the entry, not raised.
    """
    for k in k_values:
        if k <= 0:
            raise ValueError(f"probing strengths must be positive, got {k}")
    base = base_cfg.seed if base_seed is None else base_seed
    jobs = worker_count(n_jobs)
    if jobs == 1 or len(k_values) == 1:
        return [_sweep_one(base_cfg, k, n_traj, base) for k in k_values]
    runner = Parallel(n_jobs=jobs, prefer="processes")
    return runner(delayed(_sweep_one)(base_cfg, k, n_traj, base) for k in k_values)


def collapse_metrics(record: TrajectoryRecord, threshold: float):
    """First time the leading subspace weight stays above threshold for 1/g.

    Returns (collapse_time, winning_m), or (None, None) when the trajectory
    never sustains the threshold for a full 1/g window inside the record.
    """
    if not 0.5 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0.5, 1), got {threshold}")
    times = record.times
    max_p = record.p_m.max(axis=1)
    spacing = times[1] - times[0]
    window = int(np.ceil(1.0 / spacing))
    ok = max_p >= threshold
    idx = 0
    n = len(times)
    while idx < n:
        if not ok[idx]:
            idx += 1
            continue
        run_end = idx
        while run_end + 1 < n and ok[run_end + 1]:
            run_end += 1
        if run_end - idx >= window and times[idx] + 1.0 <= times[-1] + 1e-12:
            m = int(record.p_m[idx].argmax())
            return float(times[idx]), m
        idx = run_end + 1
    return None, None


def jump_detection(
    filtered_times: np.ndarray,
    filtered_mean_n: np.ndarray,
    true_times: np.ndarray,
    true_mean_n: np.ndarray,
    jump_time: float,
    band: float = 0.5,
    dwell: float = 2.0,
):
    """Detection lag of a jump: first time after it at which the filtered
    excitation stays within ``band`` of the true value for at least ``dwell``.

    Returns None when the filter never locks on before the record ends.
    """
    truth = np.interp(filtered_times, true_times, true_mean_n)
    close = np.abs(filtered_mean_n - truth) <= band
    spacing = filtered_times[1] - filtered_times[0]
    window = int(np.ceil(dwell / spacing))
    n = len(filtered_times)
    idx = int(np.searchsorted(filtered_times, jump_time - 1e-12))
    while idx < n:
        if not close[idx]:
            idx += 1
            continue
        run_end = idx
        while run_end + 1 < n and close[run_end + 1]:
            run_end += 1
        if run_end - idx >= window and filtered_times[idx] + dwell <= filtered_times[-1] + 1e-12:
            return float(filtered_times[idx] - jump_time)
        idx = run_end + 1
    return None


@dataclass
class ReducedDynamicsResult:
    times: np.ndarray
    subspaces: tuple
    p_full: np.ndarray  # columns follow ``subspaces``
    p_reduced: np.ndarray


def ansatz_density_matrix(p0: dict, psis: dict, cfg: SimulationConfig) -> np.ndarray:
    """Block-diagonal mixture sum_m p_m |psi_m><psi_m| on the joint space."""
    n_max = cfg.model.n_max
    d = cfg.model.dim
    rho = np.zeros((d, d), dtype=complex)
    for m, weight in p0.items():
        amp = np.asarray(psis[m], dtype=complex)
        if m == 0:
            if abs(amp[1]) > 0:
                raise ValueError("subspace 0 has no excited component")
            rho[0, 0] += weight
            continue
        if not 1 <= m <= n_max:
            raise ValueError(f"subspace index {m} outside 0..{n_max}")
        ig, ie = 2 * m, 2 * m - 1
        rho[ig, ig] += weight * abs(amp[0]) ** 2
        rho[ie, ie] += weight * abs(amp[1]) ** 2
        rho[ig, ie] += weight * amp[0] * np.conj(amp[1])
        rho[ie, ig] += weight * np.conj(amp[0]) * amp[1]
    return rho


def reduced_dynamics_oracle(
    p0: dict,
    psis: dict,
    cfg: SimulationConfig,
    seed: Optional[int] = None,
) -> ReducedDynamicsResult:
    """Co-integrate the full equation and the reduced weight dynamics.

    Both integrations consume the same noise path.  The reduced side evolves
    the weights with dp_m = sqrt(8k) p_m (<B>_m - <B>) dW and each component
    state with the within-subspace one-step map; the full side integrates
    the complete conditioned equation from the equivalent mixture.
    Requires a bath-free configuration and component states confined to
    their subspaces.
    """
    if cfg.gamma > 0:
        raise ValueError("the reduced weight dynamics assumes gamma = 0")
    if cfg.k <= 0:
        raise ValueError("requires k > 0")
    ms = sorted(p0)
    weights = np.array([float(p0[m]) for m in ms])
    if (weights < 0).any():
        raise ValueError("weights must be nonnegative")
    total = weights.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to 1, got {total}")
    psi_g = np.zeros(len(ms), dtype=complex)
    psi_e = np.zeros(len(ms), dtype=complex)
    for j, m in enumerate(ms):
        amp = np.asarray(psis[m], dtype=complex)
        if amp.shape != (2,):
            raise ValueError(f"subspace state for m={m} must be a 2-vector")
        norm = np.linalg.norm(amp)
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"subspace state for m={m} is not normalized")
        if m == 0 and abs(amp[1]) > 1e-12:
            raise ValueError("subspace 0 admits no excited component")
        psi_g[j], psi_e[j] = amp[0], amp[1]

    rho0 = ansatz_density_matrix(p0, psis, cfg)
    n_max = cfg.model.n_max
    gg = np.array([rho0[2 * m, 2 * m].real for m in range(n_max + 1)])
    ee = np.array([rho0[2 * n + 1, 2 * n + 1].real for n in range(n_max + 1)])
    coh = np.zeros(n_max + 1, dtype=complex)
    for m in range(1, n_max + 1):
        coh[m] = rho0[2 * m, 2 * m - 1]

    rng = _noise_generator(cfg.seed if seed is None else seed)
    noise = rng.standard_normal(cfg.n_steps) * np.sqrt(cfg.dt)

    ns = cfg.n_samples
    dy = np.zeros(ns)
    sig = np.zeros(ns)
    pur = np.zeros(ns)
    mean_n = np.zeros(ns)
    leak = np.zeros(ns)
    mineig = np.zeros(ns)
    p_full = np.zeros((ns, n_max + 1))
    coupling = cfg.model.g * np.sqrt(np.arange(n_max + 1, dtype=float))
    status, where = _kernels.block_generator(
        gg, ee, coh, coupling, cfg.model.omega, cfg.k, cfg.eta, cfg.dt,
        cfg.sample_every, noise, dy, sig, pur, mean_n, leak, mineig, p_full,
    )
    if status != _kernels.STATUS_OK:
        raise RuntimeError(f"full-equation integration failed with status {status}")

    p_red = np.zeros((ns, len(ms)))
    _kernels.reduced_ansatz(
        weights.copy(),
        psi_g,
        psi_e,
        coupling[np.array(ms, dtype=int)],
        cfg.model.omega * np.array(ms, dtype=float),
        cfg.k,
        cfg.eta,
        cfg.dt,
        cfg.sample_every,
        noise,
        p_red,
    )
    return ReducedDynamicsResult(
        times=cfg.sample_times,
        subspaces=tuple(ms),
        p_full=p_full[:, np.array(ms, dtype=int)],
        p_reduced=p_red,
    )
