"""Stochastic master equation: generator, filter and unconditional runners.

The conditioned state evolves under

    d rho = -i[H, rho] dt + k D[c] rho dt
            + (gamma/2)(n_T + 1) D[a] rho dt + (gamma/2) n_T D[a'] rho dt
            + sqrt(2k) eta H[c] rho dW,

with c the excited-qubit projector on the joint space, D[O]rho =
2 O rho O' - {O'O, rho} and H[O]rho = O rho + rho O' - <O + O'> rho.  The
measurement record accumulates dY = <c> dt + dW / sqrt(8k); a filter inverts
that relation to recover innovations from a given record.

``step`` is the plain Euler-Maruyama reference update.  The trajectory
runners instead advance with a normalized Kraus map (see ``_kernels``),
which agrees with the same equation at first weak order but keeps states
positive and keeps pure states pure under unit-efficiency detection; at the
step sizes used here Euler-Maruyama violates both by many orders of
magnitude.

Between-sample record increments are summed, so a record taken with
``sample_every = 1`` is the full-resolution input expected by the filter.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional

import numpy as np
from joblib import Parallel, delayed

from jcprobe import _kernels
from jcprobe.algebra import dagger, enforce_hygiene, expectation, kron
from jcprobe.model import (
    ModelConfig,
    annihilation,
    build_hamiltonian,
    initial_joint_state,
    qubit_sigma,
    thermal_state,
)

STABILITY_HARD = 1e-2
STABILITY_WARN = 1e-3
ORPHAN_ABORT = 1e-3
# cadence (in time units) of the eigenvalue positivity check
MINEIG_CADENCE = 0.05


class PositivityError(RuntimeError):
    """The conditioned state developed a negative eigenvalue beyond tolerance."""


class TruncationError(RuntimeError):
    """Truncation orphan state holds too much weight for trustworthy dynamics."""


class GridMismatchError(ValueError):
    """A record's time grid is incompatible with the configuration."""


@dataclass(frozen=True)
class SimulationConfig:
    """Full parameter set of one conditioned-trajectory experiment.

    Rates are quoted in units of the coupling g and times in 1/g.  The
    initial state is thermal(n_bar) on the oscillator with the qubit in the
    pure state ``qubit``.
    """

    model: ModelConfig = ModelConfig()
    k: float = 0.1
    eta: float = 1.0
    gamma: float = 0.0
    n_T: float = 0.0
    n_bar: float = 3.0
    qubit: str = "e"
    dt: float = 1e-3
    t_final: float = 50.0
    sample_every: int = 50
    seed: int = 1234
    jump_schedule: tuple = ()

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.t_final <= 0:
            raise ValueError(f"t_final must be > 0, got {self.t_final}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.n_T < 0:
            raise ValueError(f"n_T must be >= 0, got {self.n_T}")
        if self.n_bar < 0:
            raise ValueError(f"n_bar must be >= 0, got {self.n_bar}")
        if self.qubit not in ("g", "e"):
            raise ValueError(f"qubit must be 'g' or 'e', got {self.qubit!r}")
        if int(self.sample_every) != self.sample_every or self.sample_every < 1:
            raise ValueError(f"sample_every must be a positive integer, got {self.sample_every}")
        rate = max(self.k, self.model.g, self.gamma * (self.n_T + 1.0))
        if self.dt * rate > STABILITY_HARD:
            raise ValueError(
                f"dt * max rate = {self.dt * rate:.2e} exceeds the stability bound "
                f"{STABILITY_HARD:.0e}; reduce dt"
            )
        if self.dt * rate > STABILITY_WARN:
            warnings.warn(
                f"dt * max rate = {self.dt * rate:.2e} above {STABILITY_WARN:.0e}; "
                "results may be coarse",
                stacklevel=2,
            )
        n_steps = round(self.t_final / self.dt)
        if abs(n_steps * self.dt - self.t_final) > 1e-9 * max(1.0, self.t_final):
            raise ValueError(f"t_final = {self.t_final} is not a multiple of dt = {self.dt}")
        if n_steps % self.sample_every != 0:
            raise ValueError(
                f"sample_every = {self.sample_every} does not divide the "
                f"{n_steps} integration steps"
            )
        schedule = []
        for entry in self.jump_schedule:
            t, direction = entry
            t = float(t)
            if direction not in ("up", "down"):
                raise ValueError(f"jump direction must be 'up' or 'down', got {direction!r}")
            if not 0.0 <= t <= self.t_final:
                raise ValueError(f"jump time {t} outside [0, {self.t_final}]")
            if abs(t / self.dt - round(t / self.dt)) > 1e-6:
                raise ValueError(f"jump time {t} is not aligned with dt = {self.dt}")
            schedule.append((t, direction))
        schedule.sort()
        object.__setattr__(self, "jump_schedule", tuple(schedule))

    @property
    def n_steps(self) -> int:
        return round(self.t_final / self.dt)

    @property
    def n_samples(self) -> int:
        return self.n_steps // self.sample_every + 1

    @property
    def sample_times(self) -> np.ndarray:
        return np.arange(self.n_samples) * (self.dt * self.sample_every)

    def config_hash(self) -> str:
        payload = {
            "omega": self.model.omega,
            "g": self.model.g,
            "n_max": self.model.n_max,
            "k": self.k,
            "eta": self.eta,
            "gamma": self.gamma,
            "n_T": self.n_T,
            "n_bar": self.n_bar,
            "qubit": self.qubit,
            "dt": self.dt,
            "t_final": self.t_final,
            "sample_every": self.sample_every,
            "jump_schedule": list(self.jump_schedule),
        }
        digest = hashlib.sha256(json.dumps(payload, sort_keys=True).encode())
        return digest.hexdigest()[:16]


@dataclass
class TrajectoryRecord:
    """Sampled observables and record increments of one trajectory.

    ``dY`` holds the summed record increments of the bin ending at each
    sample time (zero at t = 0).  ``min_eig`` is NaN at samples where the
    eigenvalue positivity check was skipped.
    """

    times: np.ndarray
    dY: np.ndarray
    sigma_ee: np.ndarray
    p_m: np.ndarray
    purity: np.ndarray
    mean_n: np.ndarray
    leakage: np.ndarray
    min_eig: np.ndarray
    seed: int
    config_hash: str


@dataclass
class GeneratorResult:
    record: TrajectoryRecord
    states: Optional[np.ndarray] = None
    state_times: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    jump_times: tuple = ()


@dataclass
class FilterResult:
    record: TrajectoryRecord
    innovations: np.ndarray = field(repr=False, default=None)
    states: Optional[np.ndarray] = None
    state_times: Optional[np.ndarray] = None


class _Operators:
    """Dense operators and band/mask views for one model configuration."""

    def __init__(self, model: ModelConfig):
        self.model = model
        d = model.dim
        a = annihilation(model.n_max)
        eye_q = np.eye(2, dtype=complex)
        eye_o = np.eye(model.n_max + 1, dtype=complex)
        self.a_joint = kron(a, eye_q)
        self.ad_joint = dagger(self.a_joint)
        self.c_joint = kron(eye_o, qubit_sigma("e", "e"))
        self.h = build_hamiltonian(model)
        self.identity = np.eye(d, dtype=complex)
        self.e_mask = np.array([float(i % 2) for i in range(d)])
        self.n_vec = np.array([float(i // 2) for i in range(d)])
        # truncated a a' is zero on the top Fock level
        self.aad_vec = np.where(self.n_vec < model.n_max, self.n_vec + 1.0, 0.0)
        self.h_diag = np.ascontiguousarray(np.diag(self.h))
        self.h_lower = np.zeros(d, dtype=complex)
        self.h_upper = np.zeros(d, dtype=complex)
        self.h_lower[1:] = np.diag(self.h, -1)
        self.h_upper[:-1] = np.diag(self.h, 1)
        band_check = self.h - np.diag(self.h_diag)
        band_check = band_check - np.diag(np.diag(self.h, -1), -1)
        band_check = band_check - np.diag(np.diag(self.h, 1), 1)
        assert np.abs(band_check).max() == 0.0, "Hamiltonian is not tridiagonal"


@lru_cache(maxsize=16)
def _operators(model: ModelConfig) -> _Operators:
    return _Operators(model)


def initial_state(cfg: SimulationConfig) -> np.ndarray:
    """thermal(n_bar) (x) |qubit><qubit| on the joint space."""
    return initial_joint_state(thermal_state(cfg.n_bar, cfg.model.n_max), cfg.qubit)


def derive_seed(base_seed: int, k: float, index: int, purpose: str = "dW") -> int:
    """Stable per-trajectory seed, independent of sweep ordering."""
    text = f"{base_seed}:{float(k)!r}:{index}:{purpose}"
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# superoperators and reference steps


def dissipator(o: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """2 O rho O' - O'O rho - rho O'O."""
    if o.shape != rho.shape:
        raise ValueError(f"dimension mismatch: operator {o.shape} vs rho {rho.shape}")
    od = dagger(o)
    odo = od @ o
    return 2.0 * (o @ rho @ od) - odo @ rho - rho @ odo


def info_gain(o: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """O rho + rho O' - <O + O'> rho; the trailing scalar multiplies rho."""
    if o.shape != rho.shape:
        raise ValueError(f"dimension mismatch: operator {o.shape} vs rho {rho.shape}")
    mean = expectation(rho, o + dagger(o)).real
    return o @ rho + rho @ dagger(o) - mean * rho


def drift(rho: np.ndarray, cfg: SimulationConfig) -> np.ndarray:
    """Deterministic part of the master equation, including bath terms."""
    ops = _operators(cfg.model)
    out = -1j * (ops.h @ rho - rho @ ops.h)
    if cfg.k > 0:
        out += cfg.k * dissipator(ops.c_joint, rho)
    if cfg.gamma > 0:
        out += 0.5 * cfg.gamma * (cfg.n_T + 1.0) * dissipator(ops.a_joint, rho)
        if cfg.n_T > 0:
            out += 0.5 * cfg.gamma * cfg.n_T * dissipator(ops.ad_joint, rho)
    return out


def step(rho: np.ndarray, dW: float, cfg: SimulationConfig) -> np.ndarray:
    """One Euler-Maruyama update followed by hygiene (reference scheme)."""
    ops = _operators(cfg.model)
    out = rho + drift(rho, cfg) * cfg.dt
    if cfg.k > 0:
        out += np.sqrt(2.0 * cfg.k) * cfg.eta * info_gain(ops.c_joint, rho) * dW
    return enforce_hygiene(out)


def kraus_step(
    rho: np.ndarray,
    dW: float,
    cfg: SimulationConfig,
    include_bath: bool = True,
) -> np.ndarray:
    """One normalized Kraus update (the runners' scheme, reference version)."""
    ops = _operators(cfg.model)
    k, eta, dt = cfg.k, cfg.eta, cfg.dt
    ev = expectation(rho, ops.c_joint).real
    dy_scaled = eta * np.sqrt(8.0 * k) * ev * dt + dW
    kdiag = k * ops.e_mask
    if include_bath and cfg.gamma > 0:
        kdiag = kdiag + 0.5 * cfg.gamma * (cfg.n_T + 1.0) * ops.n_vec
        kdiag = kdiag + 0.5 * cfg.gamma * cfg.n_T * ops.aad_vec
    m = ops.identity - (1j * ops.h + np.diag(kdiag)) * dt
    m += np.sqrt(2.0 * k) * eta * dy_scaled * np.diag(ops.e_mask)
    out = m @ rho @ dagger(m)
    if include_bath and cfg.gamma > 0:
        out += cfg.gamma * (cfg.n_T + 1.0) * dt * (ops.a_joint @ rho @ ops.ad_joint)
        if cfg.n_T > 0:
            out += cfg.gamma * cfg.n_T * dt * (ops.ad_joint @ rho @ ops.a_joint)
    if eta < 1.0 and k > 0:
        out += 2.0 * k * (1.0 - eta * eta) * dt * (ops.c_joint @ rho @ ops.c_joint)
    return enforce_hygiene(out)


def synthesize_record(rho: np.ndarray, dW: float, cfg: SimulationConfig) -> float:
    """dY = <c> dt + dW / sqrt(8k)."""
    if cfg.k <= 0:
        raise ValueError("measurement record undefined for k = 0")
    ops = _operators(cfg.model)
    return expectation(rho, ops.c_joint).real * cfg.dt + dW / np.sqrt(8.0 * cfg.k)


def extract_innovation(dY: float, rho_est: np.ndarray, cfg: SimulationConfig) -> float:
    """dW = sqrt(8k) (dY - <c>_est dt); inverse of synthesize_record."""
    if cfg.k <= 0:
        raise ValueError("innovation undefined for k = 0")
    ops = _operators(cfg.model)
    return float(np.sqrt(8.0 * cfg.k) * (dY - expectation(rho_est, ops.c_joint).real * cfg.dt))


def apply_jump(rho: np.ndarray, direction: str) -> np.ndarray:
    """rho -> J rho J' / Tr, J = a' (up) or a (down) on the oscillator."""
    if direction not in ("up", "down"):
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    n_max = rho.shape[0] // 2 - 1
    a_joint = kron(annihilation(n_max), np.eye(2, dtype=complex))
    j = dagger(a_joint) if direction == "up" else a_joint
    out = j @ rho @ dagger(j)
    tr = float(np.trace(out).real)
    if tr <= 1e-15:
        raise ValueError(f"jump '{direction}' annihilates the state (trace {tr:.2e})")
    return out / tr


# ---------------------------------------------------------------------------
# trajectory runners


def _noise_generator(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed % (1 << 64)))


def _check_initial_state(rho0: np.ndarray, cfg: SimulationConfig) -> np.ndarray:
    d = cfg.model.dim
    if rho0.shape != (d, d):
        raise ValueError(f"initial state has shape {rho0.shape}, expected ({d}, {d})")
    rho0 = enforce_hygiene(np.asarray(rho0, dtype=complex))
    orphan = rho0[d - 1, d - 1].real
    if orphan > ORPHAN_ABORT:
        raise TruncationError(
            f"initial weight {orphan:.2e} on the truncation orphan state exceeds "
            f"{ORPHAN_ABORT:.0e}; increase n_max"
        )
    return rho0


def _mineig_stride(cfg: SimulationConfig) -> int:
    return max(1, round(MINEIG_CADENCE / (cfg.dt * cfg.sample_every)))


def _alloc_outputs(cfg: SimulationConfig):
    ns = cfg.n_samples
    n_max = cfg.model.n_max
    return (
        np.zeros(ns),  # dY bins
        np.zeros(ns),  # sigma_ee
        np.zeros(ns),  # purity
        np.zeros(ns),  # mean_n
        np.zeros(ns),  # leakage
        np.zeros(ns),  # min eig
        np.zeros((ns, n_max + 1)),  # p_m
    )


def _raise_for_status(status: int, where: int, cfg: SimulationConfig) -> None:
    if status == _kernels.STATUS_OK:
        return
    if status == _kernels.STATUS_POSITIVITY:
        t = where * cfg.sample_every * cfg.dt
        raise PositivityError(
            f"state eigenvalue below {_kernels.POSITIVITY_FLOOR:.0e} at t = {t:.4g}; "
            "reduce dt"
        )
    if status == _kernels.STATUS_DIVERGED:
        raise_from = where * cfg.dt
        from jcprobe.algebra import IntegrationDivergenceError

        raise IntegrationDivergenceError(
            f"state trace lost positivity near t = {raise_from:.4g}; reduce dt"
        )
    if status == _kernels.STATUS_EMPTY_JUMP:
        raise ValueError("downward jump annihilated the state (jump from vacuum)")
    raise RuntimeError(f"unknown kernel status {status}")


def _is_block_diagonal(rho: np.ndarray) -> bool:
    d = rho.shape[0]
    mask = np.zeros((d, d), dtype=bool)
    mask[0, 0] = True
    for m in range(1, d // 2):
        idx = (2 * m, 2 * m - 1)
        for r in idx:
            for c in idx:
                mask[r, c] = True
    mask[d - 1, d - 1] = True
    return float(np.abs(rho[~mask]).max()) == 0.0


def run_generator(
    cfg: SimulationConfig,
    rho0: Optional[np.ndarray] = None,
    seed: Optional[int] = None,
    states_every: Optional[float] = None,
    return_noise: bool = False,
    bath_mode: str = "auto",
) -> GeneratorResult:
    """Synthesize a measurement record from the true conditioned dynamics.

    ``bath_mode``: "auto" picks "scheduled" when a jump schedule is present
    (the schedule then replaces the averaged bath terms), otherwise
    "diffusive" (bath terms in the drift).  "poisson" realizes the bath as
    stochastic jumps at the thermal rates instead of averaged terms.
    Deterministic given the seed.
    """
    if cfg.k <= 0:
        raise ValueError("run_generator needs k > 0 (measurement record undefined)")
    if bath_mode not in ("auto", "diffusive", "scheduled", "poisson"):
        raise ValueError(f"unknown bath_mode {bath_mode!r}")
    if bath_mode == "auto":
        bath_mode = "scheduled" if cfg.jump_schedule else "diffusive"
    if bath_mode == "scheduled" and not cfg.jump_schedule and cfg.gamma > 0:
        raise ValueError("scheduled bath mode without a jump schedule")

    ops = _operators(cfg.model)
    rho0 = _check_initial_state(initial_state(cfg) if rho0 is None else rho0, cfg)
    seed = cfg.seed if seed is None else seed
    rng = _noise_generator(seed)
    noise = rng.standard_normal(cfg.n_steps) * np.sqrt(cfg.dt)

    dy, sig, pur, mean_n, leak, mineig, p_m = _alloc_outputs(cfg)
    include_bath = bath_mode == "diffusive" and cfg.gamma > 0

    use_block = (
        not include_bath
        and bath_mode in ("diffusive", "scheduled")
        and not cfg.jump_schedule
        and states_every is None
        and _is_block_diagonal(rho0)
    )

    jump_times: tuple = ()
    if use_block:
        n_max = cfg.model.n_max
        gg = np.array([rho0[2 * m, 2 * m].real for m in range(n_max + 1)])
        ee = np.array([rho0[2 * n + 1, 2 * n + 1].real for n in range(n_max + 1)])
        coh = np.zeros(n_max + 1, dtype=complex)
        for m in range(1, n_max + 1):
            coh[m] = rho0[2 * m, 2 * m - 1]
        coupling = cfg.model.g * np.sqrt(np.arange(n_max + 1, dtype=float))
        status, where = _kernels.block_generator(
            gg, ee, coh, coupling, cfg.model.omega, cfg.k, cfg.eta, cfg.dt,
            cfg.sample_every, noise, dy, sig, pur, mean_n, leak, mineig, p_m,
        )
        _raise_for_status(status, where, cfg)
        states = state_times = None
    else:
        rho = np.ascontiguousarray(rho0, dtype=complex)
        kdiag = cfg.k * ops.e_mask.copy()
        if include_bath:
            kdiag += 0.5 * cfg.gamma * (cfg.n_T + 1.0) * ops.n_vec
            kdiag += 0.5 * cfg.gamma * cfg.n_T * ops.aad_vec

        jump_steps = np.array(
            [round(t / cfg.dt) for t, _ in cfg.jump_schedule], dtype=np.int64
        )
        jump_dirs = np.array(
            [1 if d == "up" else -1 for _, d in cfg.jump_schedule], dtype=np.int64
        )
        poisson = bath_mode == "poisson"
        uniforms = (
            _noise_generator(derive_seed(seed, cfg.k, 0, "bath")).random(cfg.n_steps)
            if poisson
            else np.zeros(0)
        )
        states_stride = 0
        states_out = np.zeros((0, 0, 0), dtype=complex)
        state_times = None
        if states_every is not None:
            states_stride = max(1, round(states_every / cfg.dt))
            n_state = cfg.n_steps // states_stride + 1
            states_out = np.zeros((n_state, cfg.model.dim, cfg.model.dim), dtype=complex)
            state_times = np.arange(n_state) * (states_stride * cfg.dt)
        jump_record = np.zeros(65536, dtype=np.int64)
        status, where, n_jumps = _kernels.dense_conditioned(
            rho, ops.h_lower, ops.h_diag, ops.h_upper, kdiag, ops.e_mask,
            cfg.k, cfg.eta, cfg.gamma, cfg.n_T, cfg.dt, cfg.sample_every,
            _mineig_stride(cfg), False, include_bath, poisson,
            noise, uniforms, jump_steps, jump_dirs,
            np.zeros(0), dy, sig, pur, mean_n, leak, mineig, p_m,
            states_stride, states_out, jump_record,
        )
        _raise_for_status(status, where, cfg)
        if poisson:
            decoded = []
            for raw in jump_record[:n_jumps]:
                if raw >= 0:
                    decoded.append((raw * cfg.dt, "up"))
                else:
                    decoded.append(((-raw - 1) * cfg.dt, "down"))
            jump_times = tuple(decoded)
        else:
            jump_times = cfg.jump_schedule
        states = states_out if states_every is not None else None

    record = TrajectoryRecord(
        times=cfg.sample_times,
        dY=dy,
        sigma_ee=sig,
        p_m=p_m,
        purity=pur,
        mean_n=mean_n,
        leakage=leak,
        min_eig=mineig,
        seed=seed,
        config_hash=cfg.config_hash(),
    )
    return GeneratorResult(
        record=record,
        states=states,
        state_times=state_times,
        noise=noise if return_noise else None,
        jump_times=jump_times,
    )


def run_filter(
    record: TrajectoryRecord,
    cfg: SimulationConfig,
    rho0: Optional[np.ndarray] = None,
    states_every: Optional[float] = None,
) -> FilterResult:
    """Condition a state estimate on a full-resolution measurement record.

    The record must carry one bin per integration step (taken with
    ``sample_every = 1``); the averaged bath terms are always included since
    this observer only knows the bath statistics, never individual jumps.
    """
    if cfg.k <= 0:
        raise ValueError("run_filter needs k > 0")
    times = np.asarray(record.times)
    if len(times) < 2:
        raise GridMismatchError("record holds fewer than two samples")
    spacing = times[1] - times[0]
    if abs(spacing - cfg.dt) > 1e-9 * max(1.0, cfg.dt):
        raise GridMismatchError(
            f"record bin width {spacing:.6g} does not match dt = {cfg.dt:.6g}; "
            "generate filter records with sample_every = 1"
        )
    if abs(times[-1] - cfg.t_final) > 1e-9 * max(1.0, cfg.t_final):
        raise GridMismatchError(
            f"record ends at t = {times[-1]:.6g}, configuration expects "
            f"t_final = {cfg.t_final:.6g}"
        )
    if cfg.sample_every != 1:
        raise GridMismatchError("filter configurations must use sample_every = 1")

    ops = _operators(cfg.model)
    rho0 = _check_initial_state(initial_state(cfg) if rho0 is None else rho0, cfg)
    rho = np.ascontiguousarray(rho0, dtype=complex)
    record_steps = np.ascontiguousarray(record.dY[1:], dtype=float)

    kdiag = cfg.k * ops.e_mask.copy()
    if cfg.gamma > 0:
        kdiag += 0.5 * cfg.gamma * (cfg.n_T + 1.0) * ops.n_vec
        kdiag += 0.5 * cfg.gamma * cfg.n_T * ops.aad_vec

    dy, sig, pur, mean_n, leak, mineig, p_m = _alloc_outputs(cfg)
    innovations = np.zeros(cfg.n_steps)
    states_stride = 0
    states_out = np.zeros((0, 0, 0), dtype=complex)
    state_times = None
    if states_every is not None:
        states_stride = max(1, round(states_every / cfg.dt))
        n_state = cfg.n_steps // states_stride + 1
        states_out = np.zeros((n_state, cfg.model.dim, cfg.model.dim), dtype=complex)
        state_times = np.arange(n_state) * (states_stride * cfg.dt)

    status, where, _ = _kernels.dense_conditioned(
        rho, ops.h_lower, ops.h_diag, ops.h_upper, kdiag, ops.e_mask,
        cfg.k, cfg.eta, cfg.gamma, cfg.n_T, cfg.dt, cfg.sample_every,
        _mineig_stride(cfg), True, cfg.gamma > 0, False,
        record_steps, np.zeros(0), np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        innovations, dy, sig, pur, mean_n, leak, mineig, p_m,
        states_stride, states_out, np.zeros(0, dtype=np.int64),
    )
    _raise_for_status(status, where, cfg)

    out = TrajectoryRecord(
        times=cfg.sample_times,
        dY=dy,
        sigma_ee=sig,
        p_m=p_m,
        purity=pur,
        mean_n=mean_n,
        leakage=leak,
        min_eig=mineig,
        seed=record.seed,
        config_hash=cfg.config_hash(),
    )
    return FilterResult(
        record=out,
        innovations=innovations,
        states=states_out if states_every is not None else None,
        state_times=state_times,
    )


def _lindblad_rhs(rho: np.ndarray, ops: _Operators, cfg: SimulationConfig) -> np.ndarray:
    """Deterministic master-equation right-hand side, band/mask optimized."""
    hr = ops.h @ rho
    out = -1j * (hr - hr.conj().T)
    if cfg.k > 0:
        e = ops.e_mask
        out += cfg.k * (
            2.0 * e[:, None] * e[None, :] * rho - e[:, None] * rho - rho * e[None, :]
        )
    if cfg.gamma > 0:
        gdn = cfg.gamma * (cfg.n_T + 1.0)
        s = np.sqrt(ops.n_vec[2:])  # sqrt(n) factors aligned with shifted indices
        ana = np.zeros_like(rho)
        ana[:-2, :-2] = s[:, None] * s[None, :] * rho[2:, 2:]
        nvec = ops.n_vec
        out += gdn * (ana - 0.5 * (nvec[:, None] * rho + rho * nvec[None, :]))
        if cfg.n_T > 0:
            gup = cfg.gamma * cfg.n_T
            adna = np.zeros_like(rho)
            adna[2:, 2:] = s[:, None] * s[None, :] * rho[:-2, :-2]
            aad = ops.aad_vec
            out += gup * (adna - 0.5 * (aad[:, None] * rho + rho * aad[None, :]))
    return out


def run_unconditional(
    cfg: SimulationConfig,
    rho0: Optional[np.ndarray] = None,
) -> TrajectoryRecord:
    """Integrate the ensemble-average master equation (no stochastic term).

    Deterministic; uses classical Runge-Kutta so that the coherent-dynamics
    oracles hold to well below their tolerances at the default step size.
    """
    ops = _operators(cfg.model)
    rho = _check_initial_state(initial_state(cfg) if rho0 is None else rho0, cfg)
    rho = np.ascontiguousarray(rho, dtype=complex)
    dy, sig, pur, mean_n, leak, mineig, p_m = _alloc_outputs(cfg)
    status, where = _kernels.unconditional_rk4(
        rho, ops.h_lower, ops.h_diag, ops.h_upper, ops.e_mask, ops.n_vec, ops.aad_vec,
        cfg.k, cfg.gamma, cfg.n_T, cfg.dt, cfg.sample_every, _mineig_stride(cfg),
        cfg.n_steps, dy, sig, pur, mean_n, leak, mineig, p_m,
    )
    _raise_for_status(status, where, cfg)

    return TrajectoryRecord(
        times=cfg.sample_times,
        dY=dy,
        sigma_ee=sig,
        p_m=p_m,
        purity=pur,
        mean_n=mean_n,
        leakage=leak,
        min_eig=mineig,
        seed=cfg.seed,
        config_hash=cfg.config_hash(),
    )


# ---------------------------------------------------------------------------
# ensembles


def worker_count(n_jobs: Optional[int] = None) -> int:
    if n_jobs is not None:
        return max(1, int(n_jobs))
    env = os.environ.get("SIMULATE_WORKERS")
    if env:
        return max(1, int(env))
    return max(1, min(os.cpu_count() or 1, 8))


def _one_trajectory(cfg: SimulationConfig, seed: int) -> TrajectoryRecord:
    return run_generator(cfg, seed=seed).record


def run_ensemble(
    cfg: SimulationConfig,
    n_trajectories: int,
    base_seed: Optional[int] = None,
    n_jobs: Optional[int] = None,
) -> list:
    """Independent generator trajectories with derived per-trajectory seeds.

    Results are identical for any worker count: seeds depend only on
    (base seed, k, index) and outputs are collected in index order.
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    base = cfg.seed if base_seed is None else base_seed
    seeds = [derive_seed(base, cfg.k, i) for i in range(n_trajectories)]
    jobs = worker_count(n_jobs)
    if jobs == 1 or n_trajectories <= 2:
        return [_one_trajectory(cfg, s) for s in seeds]
    runner = Parallel(n_jobs=jobs, prefer="processes")
    return runner(delayed(_one_trajectory)(cfg, s) for s in seeds)
