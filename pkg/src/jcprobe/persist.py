"""CSV and JSON artifacts for trajectories, ensembles, sweeps and manifests.

Trajectory CSV schema: header row, then one row per sample with columns
t, dY_bin, sigma_ee, purity, mean_n, leakage, p_0 .. p_{n_max}.  Floats are
written with 9 significant digits so identical runs produce byte-identical
files.  Each trajectory CSV gets a JSON sidecar with the configuration,
seed, maximum leakage and runtime.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path
from typing import Optional

import numpy as np

from jcprobe.analysis import EnsembleSummary
from jcprobe.model import ModelConfig
from jcprobe.sme import SimulationConfig, TrajectoryRecord


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def config_to_dict(cfg: SimulationConfig) -> dict:
    return {
        "omega": cfg.model.omega,
        "g": cfg.model.g,
        "n_max": cfg.model.n_max,
        "k": cfg.k,
        "eta": cfg.eta,
        "gamma": cfg.gamma,
        "n_T": cfg.n_T,
        "n_bar": cfg.n_bar,
        "qubit": cfg.qubit,
        "dt": cfg.dt,
        "t_final": cfg.t_final,
        "sample_every": cfg.sample_every,
        "seed": cfg.seed,
        "jump_schedule": [[t, d] for t, d in cfg.jump_schedule],
    }


def config_from_dict(data: dict) -> SimulationConfig:
    model = ModelConfig(
        omega=data.get("omega", 0.0),
        g=data.get("g", 1.0),
        n_max=data.get("n_max", 25),
    )
    return SimulationConfig(
        model=model,
        k=data.get("k", 0.1),
        eta=data.get("eta", 1.0),
        gamma=data.get("gamma", 0.0),
        n_T=data.get("n_T", 0.0),
        n_bar=data.get("n_bar", 3.0),
        qubit=data.get("qubit", "e"),
        dt=data.get("dt", 1e-3),
        t_final=data.get("t_final", 50.0),
        sample_every=data.get("sample_every", 50),
        seed=data.get("seed", 1234),
        jump_schedule=tuple((float(t), str(d)) for t, d in data.get("jump_schedule", [])),
    )


def write_trajectory_csv(path, record: TrajectoryRecord) -> None:
    n_subspaces = record.p_m.shape[1]
    header = ["t", "dY_bin", "sigma_ee", "purity", "mean_n", "leakage"]
    header += [f"p_{m}" for m in range(n_subspaces)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(record.times)):
            row = [
                _fmt(record.times[i]),
                _fmt(record.dY[i]),
                _fmt(record.sigma_ee[i]),
                _fmt(record.purity[i]),
                _fmt(record.mean_n[i]),
                _fmt(record.leakage[i]),
            ]
            row += [_fmt(v) for v in record.p_m[i]]
            writer.writerow(row)


def read_trajectory_csv(path) -> dict:
    """Columns of a trajectory CSV as arrays, keyed by header name."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows)
    if data.size == 0:
        raise ValueError(f"{path} holds no samples")
    return {name: data[:, i] for i, name in enumerate(header)}


def record_from_csv(path, sidecar: dict) -> TrajectoryRecord:
    cols = read_trajectory_csv(path)
    n_rows = len(cols["t"])
    expected = sidecar.get("n_samples")
    if expected is not None and expected != n_rows:
        raise ValueError(
            f"{path}: expected {expected} rows per its sidecar, found {n_rows} "
            "(truncated or edited record)"
        )
    p_cols = sorted(
        (name for name in cols if name.startswith("p_")), key=lambda s: int(s[2:])
    )
    p_m = np.column_stack([cols[name] for name in p_cols])
    return TrajectoryRecord(
        times=cols["t"],
        dY=cols["dY_bin"],
        sigma_ee=cols["sigma_ee"],
        p_m=p_m,
        purity=cols["purity"],
        mean_n=cols["mean_n"],
        leakage=cols["leakage"],
        min_eig=np.full(n_rows, np.nan),
        seed=sidecar.get("seed", -1),
        config_hash=sidecar.get("config_hash", ""),
    )


def write_sidecar(
    path,
    cfg: SimulationConfig,
    seed: int,
    leakage_max: float,
    runtime: float,
    extra: Optional[dict] = None,
) -> None:
    payload = {
        "config": config_to_dict(cfg),
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "n_samples": cfg.n_samples,
        "leakage_max": leakage_max,
        "runtime_seconds": runtime,
    }
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_sidecar(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def write_ensemble_csv(path, summary: EnsembleSummary) -> None:
    n_subspaces = summary.mean_p_m.shape[1]
    pairs = [
        ("dY_bin", summary.mean_dY, summary.std_dY),
        ("sigma_ee", summary.mean_sigma_ee, summary.std_sigma_ee),
        ("purity", summary.mean_purity, summary.std_purity),
        ("mean_n", summary.mean_mean_n, summary.std_mean_n),
        ("leakage", summary.mean_leakage, summary.std_leakage),
    ]
    header = ["t"]
    for name, _, _ in pairs:
        header += [f"{name}_mean", f"{name}_std"]
    for m in range(n_subspaces):
        header += [f"p_{m}_mean", f"p_{m}_std"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(len(summary.times)):
            row = [_fmt(summary.times[i])]
            for _, mean, std in pairs:
                row += [_fmt(mean[i]), _fmt(std[i])]
            for m in range(n_subspaces):
                row += [_fmt(summary.mean_p_m[i, m]), _fmt(summary.std_p_m[i, m])]
            writer.writerow(row)


def write_sweep_json(path, entries, base_seed: int) -> None:
    payload = []
    for e in entries:
        item = {
            "k": e.k,
            "n_trajectories": e.n_trajectories,
            "base_seed": base_seed,
            "seeds": list(e.seeds),
        }
        if e.fit is not None:
            item.update(
                {
                    "tau": e.fit.tau,
                    "p0": e.fit.p0,
                    "residual": e.fit.residual,
                    "n_points_used": e.fit.n_points_used,
                }
            )
        else:
            item["error"] = e.error
        payload.append(item)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_states_npz(path, times: np.ndarray, states: np.ndarray) -> None:
    np.savez_compressed(path, times=times, states=states)


def read_states_npz(path):
    data = np.load(path)
    return data["times"], data["states"]
