"""Compiled inner loops for the conditioned-trajectory integrators.

The one-step update is a normalized Kraus map equivalent to the simulated
stochastic master equation at first weak order: the no-record part of the
map carries the Hamiltonian and the deterministic halves of the dissipators,
the record enters through a diagonal term on the monitored (excited-qubit)
components, and unmonitored channels are added as explicit branch terms
before renormalization.  The map keeps the state positive by construction
and keeps pure states pure for unit detection efficiency, which plain
Euler-Maruyama does not at usable step sizes.

Two state layouts are implemented.  When the bath is off and no jumps occur
the conditioned state stays block diagonal in the total-excitation
decomposition, so the generator can evolve per-block 2x2 matrices
(``block_generator``).  The general path (``dense_conditioned``) evolves the
full dense matrix and exploits that the one-step map is tridiagonal in the
joint basis ordering.

Status codes returned by the kernels: 0 ok, 1 positivity violation,
2 divergence (non-finite or non-positive trace), 3 jump annihilated the
state (downward jump from vacuum).
"""

from __future__ import annotations

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_POSITIVITY = 1
STATUS_DIVERGED = 2
STATUS_EMPTY_JUMP = 3

POSITIVITY_FLOOR = -1e-6


@njit(cache=True)
def block_generator(
    gg,  # f8[n_max+1]   populations of |m, g>
    ee,  # f8[n_max+1]   populations of |n, e>; ee[n_max] is the orphan state
    coh,  # c16[n_max+1]  coh[m] = <m,g| rho |m-1,e>, coh[0] unused
    coupling,  # f8[n_max+1]  g*sqrt(m)
    omega,
    k,
    eta,
    dt,
    sample_every,
    noise,  # f8[n_steps] Wiener increments, std sqrt(dt)
    dy_bins,  # f8[n_samples] out
    sig_out,  # f8[n_samples] out
    pur_out,
    mean_n_out,
    leak_out,
    mineig_out,
    p_out,  # f8[n_samples, n_max+1] out
):
    n_max = gg.shape[0] - 1
    n_steps = noise.shape[0]
    s2k = np.sqrt(2.0 * k)
    s8k = np.sqrt(8.0 * k)
    leak_branch = 2.0 * k * (1.0 - eta * eta) * dt

    # sample 0: the initial state
    _block_sample(gg, ee, coh, 0, sig_out, pur_out, mean_n_out, leak_out, mineig_out, p_out)
    dy_bins[0] = 0.0
    if mineig_out[0] < POSITIVITY_FLOOR:
        return STATUS_POSITIVITY, 0

    dy_acc = 0.0
    for i in range(n_steps):
        ev = 0.0
        for n in range(n_max + 1):
            ev += ee[n]
        dw = noise[i]
        dy_scaled = eta * s8k * ev * dt + dw
        dy_acc += ev * dt + dw / s8k

        trace = 0.0
        for m in range(n_max + 1):
            if m == 0:
                # 1-dim block |0,g>: the map is the identity on it
                trace += gg[0]
                continue
            alpha = 1.0 - 1j * omega * m * dt
            beta = -1j * coupling[m] * dt
            gam = 1.0 - 1j * omega * m * dt - k * dt + s2k * eta * dy_scaled
            a = gg[m]
            b = ee[m - 1]
            c = coh[m]
            t00 = alpha * a + beta * np.conj(c)
            t01 = alpha * c + beta * b
            t10 = beta * a + gam * np.conj(c)
            t11 = beta * c + gam * b
            na = (t00 * np.conj(alpha) + t01 * np.conj(beta)).real
            nc = t00 * np.conj(beta) + t01 * np.conj(gam)
            nb = (t10 * np.conj(beta) + t11 * np.conj(gam)).real + leak_branch * b
            gg[m] = na
            ee[m - 1] = nb
            coh[m] = nc
            trace += na + nb
        # orphan |n_max, e>: monitored, no Rabi partner
        gl = 1.0 - 1j * omega * (n_max + 1) * dt - k * dt + s2k * eta * dy_scaled
        ee[n_max] = (gl * np.conj(gl)).real * ee[n_max] + leak_branch * ee[n_max]
        trace += ee[n_max]

        if not np.isfinite(trace) or trace <= 0.0:
            return STATUS_DIVERGED, i
        inv = 1.0 / trace
        for m in range(n_max + 1):
            gg[m] *= inv
            ee[m] *= inv
            coh[m] *= inv

        if (i + 1) % sample_every == 0:
            s = (i + 1) // sample_every
            _block_sample(gg, ee, coh, s, sig_out, pur_out, mean_n_out, leak_out, mineig_out, p_out)
            dy_bins[s] = dy_acc
            dy_acc = 0.0
            if mineig_out[s] < POSITIVITY_FLOOR:
                return STATUS_POSITIVITY, s
    return STATUS_OK, n_steps


@njit(cache=True)
def _block_sample(gg, ee, coh, s, sig_out, pur_out, mean_n_out, leak_out, mineig_out, p_out):
    n_max = gg.shape[0] - 1
    sig = 0.0
    pur = gg[0] * gg[0] + ee[n_max] * ee[n_max]
    mean_n = 0.0
    mineig = gg[0] if gg[0] < ee[n_max] else ee[n_max]
    for n in range(n_max + 1):
        sig += ee[n]
        mean_n += n * (gg[n] + ee[n])
    for m in range(1, n_max + 1):
        a = gg[m]
        b = ee[m - 1]
        c2 = (coh[m] * np.conj(coh[m])).real
        pur += a * a + b * b + 2.0 * c2
        half = 0.5 * (a - b)
        lam = 0.5 * (a + b) - np.sqrt(half * half + c2)
        if lam < mineig:
            mineig = lam
        p_out[s, m] = a + b
    p_out[s, 0] = gg[0]
    sig_out[s] = sig
    pur_out[s] = pur
    mean_n_out[s] = mean_n
    leak_out[s] = ee[n_max]
    mineig_out[s] = mineig


@njit(cache=True)
def _tridiag_sandwich(ml, md, mu, rho, tmp, out):
    """out = M rho M^dag for tridiagonal M given by its bands."""
    d = rho.shape[0]
    for r in range(d):
        lo = ml[r] if r > 0 else 0.0j
        hi = mu[r] if r < d - 1 else 0.0j
        for j in range(d):
            v = md[r] * rho[r, j]
            if r > 0:
                v += lo * rho[r - 1, j]
            if r < d - 1:
                v += hi * rho[r + 1, j]
            tmp[r, j] = v
    for i in range(d):
        for j in range(d):
            v = tmp[i, j] * np.conj(md[j])
            if j > 0:
                v += tmp[i, j - 1] * np.conj(ml[j])
            if j < d - 1:
                v += tmp[i, j + 1] * np.conj(mu[j])
            out[i, j] = v


@njit(cache=True)
def _apply_number_shift(rho, out, up, sq_n, sq_n1):
    """out += J rho J^dag for J = a (up=False) or J = a^dag (up=True), unnormalized.

    sq_n[i] = sqrt(i // 2), sq_n1[i] = sqrt(i // 2 + 1).
    """
    d = rho.shape[0]
    if up:
        for i in range(2, d):
            fi = sq_n[i]
            for j in range(2, d):
                out[i, j] += fi * sq_n[j] * rho[i - 2, j - 2]
    else:
        for i in range(d - 2):
            fi = sq_n1[i]
            for j in range(d - 2):
                out[i, j] += fi * sq_n1[j] * rho[i + 2, j + 2]


@njit(cache=True)
def _dense_sample(
    rho, s, mineig_stride, sig_out, pur_out, mean_n_out, leak_out, mineig_out, p_out, scratch
):
    d = rho.shape[0]
    n_max = d // 2 - 1
    sig = 0.0
    mean_n = 0.0
    for i in range(d):
        pop = rho[i, i].real
        if i % 2 == 1:
            sig += pop
        mean_n += (i // 2) * pop
    pur = 0.0
    for i in range(d):
        for j in range(d):
            pur += (rho[i, j] * rho[j, i]).real
    p_out[s, 0] = rho[0, 0].real
    for m in range(1, n_max + 1):
        p_out[s, m] = rho[2 * m, 2 * m].real + rho[2 * m - 1, 2 * m - 1].real
    sig_out[s] = sig
    pur_out[s] = pur
    mean_n_out[s] = mean_n
    leak_out[s] = rho[d - 1, d - 1].real
    # the eigenvalue check is the expensive part; run it every mineig_stride
    # samples and mark the skipped samples NaN
    if s % mineig_stride == 0:
        for i in range(d):
            for j in range(d):
                scratch[i, j] = 0.5 * (rho[i, j] + np.conj(rho[j, i]))
        mineig_out[s] = np.linalg.eigvalsh(scratch)[0].real
    else:
        mineig_out[s] = np.nan


@njit(cache=True)
def dense_conditioned(
    rho,  # c16[d, d], modified in place
    h_lower,  # c16[d] Hamiltonian bands; h_lower[r] = H[r, r-1]
    h_diag,  # c16[d]
    h_upper,  # c16[d] h_upper[r] = H[r, r+1]
    kdiag,  # f8[d] total no-record diagonal decay rates
    e_mask,  # f8[d] 1.0 on excited-qubit components
    k,
    eta,
    gamma,
    n_t,
    dt,
    sample_every,
    mineig_stride,  # run the eigenvalue positivity check every this many samples
    filter_mode,  # False: noise holds dW; True: noise holds the record dY per step
    include_bath,  # add the averaged-bath branch terms
    poisson,  # realize the bath as stochastic jumps instead
    noise,  # f8[n_steps]
    uniforms,  # f8[n_steps] (poisson mode) or f8[0]
    jump_steps,  # i8[:] sorted scheduled-jump step numbers (1-based: after that step)
    jump_dirs,  # i8[:] +1 up, -1 down
    innov_out,  # f8[n_steps] (filter mode) or f8[0]
    dy_bins,
    sig_out,
    pur_out,
    mean_n_out,
    leak_out,
    mineig_out,
    p_out,
    states_every,  # in steps; 0 = never
    states_out,  # c16[n_state_samples, d, d] or c16[0, 0, 0]
    jump_record,  # i8[capacity] realized jump steps (poisson), jump_record[::] out
):
    d = rho.shape[0]
    n_steps = noise.shape[0]
    s2k = np.sqrt(2.0 * k)
    s8k = np.sqrt(8.0 * k) if k > 0.0 else 0.0
    leak_branch = 2.0 * k * (1.0 - eta * eta) * dt

    ml = np.empty(d, dtype=np.complex128)
    md = np.empty(d, dtype=np.complex128)
    mu = np.empty(d, dtype=np.complex128)
    tmp = np.empty((d, d), dtype=np.complex128)
    out = np.empty((d, d), dtype=np.complex128)
    scratch = np.empty((d, d), dtype=np.complex128)
    sq_n = np.empty(d)
    sq_n1 = np.empty(d)
    for r in range(d):
        ml[r] = -1j * dt * h_lower[r]
        mu[r] = -1j * dt * h_upper[r]
        sq_n[r] = np.sqrt(r // 2)
        sq_n1[r] = np.sqrt(r // 2 + 1.0)

    _dense_sample(
        rho, 0, mineig_stride, sig_out, pur_out, mean_n_out, leak_out, mineig_out, p_out, scratch
    )
    dy_bins[0] = 0.0
    if mineig_out[0] < POSITIVITY_FLOOR:
        return STATUS_POSITIVITY, 0, 0
    if states_every > 0:
        for i in range(d):
            for j in range(d):
                states_out[0, i, j] = rho[i, j]

    n_jumps = 0
    jump_ptr = 0
    dy_acc = 0.0
    for i in range(n_steps):
        # poisson-realized bath: decide a jump from the pre-step state
        if poisson:
            ex_n = 0.0
            ex_nn = 0.0
            for r in range(d):
                pop = rho[r, r].real
                ex_n += (r // 2) * pop
                if r // 2 < d // 2 - 1:
                    ex_nn += (r // 2 + 1.0) * pop
            p_dn = gamma * (n_t + 1.0) * ex_n * dt
            p_up = gamma * n_t * ex_nn * dt
            u = uniforms[i]
            if u < p_dn or (u >= p_dn and u < p_dn + p_up):
                up = u >= p_dn
                for r in range(d):
                    for cix in range(d):
                        out[r, cix] = 0.0
                _apply_number_shift(rho, out, up, sq_n, sq_n1)
                tr = 0.0
                for r in range(d):
                    tr += out[r, r].real
                if tr <= 0.0:
                    return STATUS_EMPTY_JUMP, i, n_jumps
                inv = 1.0 / tr
                for r in range(d):
                    for cix in range(d):
                        rho[r, cix] = out[r, cix] * inv
                if n_jumps < jump_record.shape[0]:
                    jump_record[n_jumps] = i if up else -i - 1
                n_jumps += 1

        ev = 0.0
        for r in range(d):
            if r % 2 == 1:
                ev += rho[r, r].real

        if filter_mode:
            dy_step = noise[i]
            dw = s8k * (dy_step - ev * dt)
            innov_out[i] = dw
        else:
            dw = noise[i]
            dy_step = ev * dt + (dw / s8k if k > 0.0 else 0.0)
        dy_acc += dy_step
        dy_scaled = eta * s8k * ev * dt + dw

        for r in range(d):
            md[r] = 1.0 - 1j * dt * h_diag[r] - kdiag[r] * dt + s2k * eta * e_mask[r] * dy_scaled
        _tridiag_sandwich(ml, md, mu, rho, tmp, out)

        if include_bath and gamma > 0.0:
            gdn = gamma * (n_t + 1.0) * dt
            gup = gamma * n_t * dt
            for r in range(d - 2):
                fr = gdn * sq_n1[r]
                for cix in range(d - 2):
                    out[r, cix] += fr * sq_n1[cix] * rho[r + 2, cix + 2]
            if gup > 0.0:
                for r in range(2, d):
                    fr = gup * sq_n[r]
                    for cix in range(2, d):
                        out[r, cix] += fr * sq_n[cix] * rho[r - 2, cix - 2]
        if leak_branch > 0.0:
            for r in range(d):
                for cix in range(d):
                    out[r, cix] += leak_branch * e_mask[r] * e_mask[cix] * rho[r, cix]

        tr = 0.0
        for r in range(d):
            tr += out[r, r].real
        if not np.isfinite(tr) or tr <= 0.0:
            return STATUS_DIVERGED, i, n_jumps
        inv = 1.0 / tr
        for r in range(d):
            for cix in range(r, d):
                v = 0.5 * (out[r, cix] + np.conj(out[cix, r])) * inv
                rho[r, cix] = v
                rho[cix, r] = np.conj(v)

        # scheduled jumps land after the step that reaches their time stamp
        while jump_ptr < jump_steps.shape[0] and jump_steps[jump_ptr] == i + 1:
            up = jump_dirs[jump_ptr] > 0
            for r in range(d):
                for cix in range(d):
                    out[r, cix] = 0.0
            _apply_number_shift(rho, out, up, sq_n, sq_n1)
            tr = 0.0
            for r in range(d):
                tr += out[r, r].real
            if tr <= 0.0:
                return STATUS_EMPTY_JUMP, i, n_jumps
            inv = 1.0 / tr
            for r in range(d):
                for cix in range(d):
                    rho[r, cix] = out[r, cix] * inv
            jump_ptr += 1

        if (i + 1) % sample_every == 0:
            s = (i + 1) // sample_every
            _dense_sample(
                rho, s, mineig_stride, sig_out, pur_out, mean_n_out, leak_out, mineig_out,
                p_out, scratch,
            )
            dy_bins[s] = dy_acc
            dy_acc = 0.0
            if mineig_out[s] < POSITIVITY_FLOOR:
                return STATUS_POSITIVITY, s, n_jumps
        if states_every > 0 and (i + 1) % states_every == 0:
            si = (i + 1) // states_every
            if si < states_out.shape[0]:
                for r in range(d):
                    for cix in range(d):
                        states_out[si, r, cix] = rho[r, cix]
    return STATUS_OK, n_steps, n_jumps


@njit(cache=True)
def _lindblad_rhs_kernel(
    rho, h_lower, h_diag, h_upper, e_mask, n_vec, aad_vec, k, gamma, n_t, sq_n, sq_n1, out
):
    d = rho.shape[0]
    # -i [H, rho] with tridiagonal H
    for r in range(d):
        for j in range(d):
            v = h_diag[r] * rho[r, j] - rho[r, j] * h_diag[j]
            if r > 0:
                v += h_lower[r] * rho[r - 1, j]
            if r < d - 1:
                v += h_upper[r] * rho[r + 1, j]
            if j > 0:
                v -= rho[r, j - 1] * h_upper[j - 1]
            if j < d - 1:
                v -= rho[r, j + 1] * h_lower[j + 1]
            out[r, j] = -1j * v
    if k > 0.0:
        for r in range(d):
            for j in range(d):
                out[r, j] += k * (2.0 * e_mask[r] * e_mask[j] - e_mask[r] - e_mask[j]) * rho[r, j]
    if gamma > 0.0:
        gdn = gamma * (n_t + 1.0)
        gup = gamma * n_t
        for r in range(d):
            for j in range(d):
                v = -0.5 * gdn * (n_vec[r] + n_vec[j]) * rho[r, j]
                if gup > 0.0:
                    v -= 0.5 * gup * (aad_vec[r] + aad_vec[j]) * rho[r, j]
                if r < d - 2 and j < d - 2:
                    v += gdn * sq_n1[r] * sq_n1[j] * rho[r + 2, j + 2]
                if gup > 0.0 and r >= 2 and j >= 2:
                    v += gup * sq_n[r] * sq_n[j] * rho[r - 2, j - 2]
                out[r, j] += v


@njit(cache=True)
def unconditional_rk4(
    rho,
    h_lower,
    h_diag,
    h_upper,
    e_mask,
    n_vec,
    aad_vec,
    k,
    gamma,
    n_t,
    dt,
    sample_every,
    mineig_stride,
    n_steps,
    dy_bins,
    sig_out,
    pur_out,
    mean_n_out,
    leak_out,
    mineig_out,
    p_out,
):
    """Classical Runge-Kutta integration of the ensemble-average equation."""
    d = rho.shape[0]
    k1 = np.empty((d, d), dtype=np.complex128)
    k2 = np.empty((d, d), dtype=np.complex128)
    k3 = np.empty((d, d), dtype=np.complex128)
    k4 = np.empty((d, d), dtype=np.complex128)
    stage = np.empty((d, d), dtype=np.complex128)
    scratch = np.empty((d, d), dtype=np.complex128)
    sq_n = np.empty(d)
    sq_n1 = np.empty(d)
    for r in range(d):
        sq_n[r] = np.sqrt(r // 2)
        sq_n1[r] = np.sqrt(r // 2 + 1.0)

    _dense_sample(
        rho, 0, mineig_stride, sig_out, pur_out, mean_n_out, leak_out, mineig_out, p_out, scratch
    )
    dy_bins[0] = 0.0
    if mineig_out[0] < POSITIVITY_FLOOR:
        return STATUS_POSITIVITY, 0

    dy_acc = 0.0
    for i in range(n_steps):
        ev = 0.0
        for r in range(1, d, 2):
            ev += rho[r, r].real
        dy_acc += ev * dt

        _lindblad_rhs_kernel(rho, h_lower, h_diag, h_upper, e_mask, n_vec, aad_vec, k, gamma, n_t, sq_n, sq_n1, k1)
        for r in range(d):
            for j in range(d):
                stage[r, j] = rho[r, j] + 0.5 * dt * k1[r, j]
        _lindblad_rhs_kernel(stage, h_lower, h_diag, h_upper, e_mask, n_vec, aad_vec, k, gamma, n_t, sq_n, sq_n1, k2)
        for r in range(d):
            for j in range(d):
                stage[r, j] = rho[r, j] + 0.5 * dt * k2[r, j]
        _lindblad_rhs_kernel(stage, h_lower, h_diag, h_upper, e_mask, n_vec, aad_vec, k, gamma, n_t, sq_n, sq_n1, k3)
        for r in range(d):
            for j in range(d):
                stage[r, j] = rho[r, j] + dt * k3[r, j]
        _lindblad_rhs_kernel(stage, h_lower, h_diag, h_upper, e_mask, n_vec, aad_vec, k, gamma, n_t, sq_n, sq_n1, k4)
        sixth = dt / 6.0
        for r in range(d):
            for j in range(d):
                rho[r, j] += sixth * (k1[r, j] + 2.0 * k2[r, j] + 2.0 * k3[r, j] + k4[r, j])
        tr = 0.0
        for r in range(d):
            tr += rho[r, r].real
        if not np.isfinite(tr) or tr <= 0.0:
            return STATUS_DIVERGED, i
        inv = 1.0 / tr
        for r in range(d):
            for j in range(r, d):
                v = 0.5 * (rho[r, j] + np.conj(rho[j, r])) * inv
                rho[r, j] = v
                rho[j, r] = np.conj(v)

        if (i + 1) % sample_every == 0:
            s = (i + 1) // sample_every
            _dense_sample(
                rho, s, mineig_stride, sig_out, pur_out, mean_n_out, leak_out, mineig_out,
                p_out, scratch,
            )
            dy_bins[s] = dy_acc
            dy_acc = 0.0
            if mineig_out[s] < POSITIVITY_FLOOR:
                return STATUS_POSITIVITY, s
    return STATUS_OK, n_steps


@njit(cache=True)
def reduced_ansatz(
    p,  # f8[M] subspace weights, modified in place
    psi_g,  # c16[M] amplitude on |m, g>, modified in place
    psi_e,  # c16[M] amplitude on |m-1, e>
    coupling,  # f8[M] g*sqrt(m) per tracked subspace
    omega_m,  # f8[M] omega * m
    k,
    eta,
    dt,
    sample_every,
    noise,
    p_out,  # f8[n_samples, M]
):
    """Weight SDE dp = sqrt(8k) p (<B>_m - <B>) dW plus per-subspace pure-state maps."""
    m_count = p.shape[0]
    n_steps = noise.shape[0]
    s2k = np.sqrt(2.0 * k)
    s8k = np.sqrt(8.0 * k)
    for j in range(m_count):
        p_out[0, j] = p[j]
    for i in range(n_steps):
        b_rho = 0.0
        for j in range(m_count):
            b_rho += p[j] * (psi_e[j] * np.conj(psi_e[j])).real
        dw = noise[i]
        dy_scaled = eta * s8k * b_rho * dt + dw

        total = 0.0
        for j in range(m_count):
            bj = (psi_e[j] * np.conj(psi_e[j])).real
            p[j] = p[j] * (1.0 + s8k * (bj - b_rho) * dw)
            if p[j] < 0.0:
                p[j] = 0.0
            total += p[j]
        for j in range(m_count):
            p[j] /= total

        for j in range(m_count):
            alpha = 1.0 - 1j * omega_m[j] * dt
            beta = -1j * coupling[j] * dt
            gam = 1.0 - 1j * omega_m[j] * dt - k * dt + s2k * eta * dy_scaled
            ng = alpha * psi_g[j] + beta * psi_e[j]
            ne = beta * psi_g[j] + gam * psi_e[j]
            norm = np.sqrt((ng * np.conj(ng) + ne * np.conj(ne)).real)
            psi_g[j] = ng / norm
            psi_e[j] = ne / norm

        if (i + 1) % sample_every == 0:
            s = (i + 1) // sample_every
            for j in range(m_count):
                p_out[s, j] = p[j]
    return STATUS_OK
