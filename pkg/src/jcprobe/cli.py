"""Command-line front end: config parsing, presets and artifact persistence.

Commands:

    simulate trajectory|unconditional|ensemble|sweep|jumps|filter
             --config FILE | --preset NAME | --manifest FILE
             --out DIR [--seed N] ...

Config files are flat YAML key-value documents; unknown keys are errors.
Every run writes a manifest.json from which the run can be reproduced
byte-identically (CSV outputs).  All randomness flows from the single seed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from jcprobe import __version__, persist
from jcprobe.algebra import trace_distance
from jcprobe.analysis import aggregate, sweep_tau
from jcprobe.model import ModelConfig
from jcprobe.sme import (
    SimulationConfig,
    run_filter,
    run_generator,
    run_ensemble,
    run_unconditional,
    worker_count,
)

CONFIG_KEYS = {
    "omega": 0.0,
    "g": 1.0,
    "k": 0.1,
    "eta": 1.0,
    "gamma": 0.0,
    "n_T": 0.0,
    "n_bar": 3.0,
    "n_max": 25,
    "dt": 1e-3,
    "t_final": 50.0,
    "sample_every": None,  # derived: 0.05/g of simulated time
    "seed": 1234,
    "jump_schedule": [],
    "n_trajectories": 200,
    "k_values": [0.1, 1.0, 10.0],
}

SAMPLE_INTERVAL = 0.05


@dataclass
class RunSettings:
    """Command-level options that sit outside SimulationConfig."""

    n_trajectories: int = 200
    k_values: tuple = (0.1, 1.0, 10.0)
    bath_mode: str = "auto"
    dump_states_every: Optional[float] = None
    companion_unconditional: Optional[dict] = None


def _parse_schedule(raw) -> tuple:
    entries = []
    for item in raw:
        if isinstance(item, str):
            t_str, _, d = item.partition(":")
            if not d:
                raise ValueError(f"jump_schedule entry {item!r} is not 'time:direction'")
            entries.append((float(t_str), d.strip()))
        else:
            t, d = item
            entries.append((float(t), str(d)))
    return tuple(entries)


def parse_config_dict(data: dict) -> SimulationConfig:
    unknown = set(data) - set(CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
    merged = {k: data.get(k, v) for k, v in CONFIG_KEYS.items()}
    if merged["sample_every"] is None:
        merged["sample_every"] = max(1, round(SAMPLE_INTERVAL / merged["dt"]))
    model = ModelConfig(omega=merged["omega"], g=merged["g"], n_max=int(merged["n_max"]))
    return SimulationConfig(
        model=model,
        k=float(merged["k"]),
        eta=float(merged["eta"]),
        gamma=float(merged["gamma"]),
        n_T=float(merged["n_T"]),
        n_bar=float(merged["n_bar"]),
        dt=float(merged["dt"]),
        t_final=float(merged["t_final"]),
        sample_every=int(merged["sample_every"]),
        seed=int(merged["seed"]),
        jump_schedule=_parse_schedule(merged["jump_schedule"]),
    )


def parse_config(path) -> SimulationConfig:
    """Validated configuration from a flat YAML file; omitted keys default."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"{path} is not a flat key-value document")
    return parse_config_dict(data)


def run_settings_from_dict(data: dict) -> RunSettings:
    return RunSettings(
        n_trajectories=int(data.get("n_trajectories", CONFIG_KEYS["n_trajectories"])),
        k_values=tuple(float(k) for k in data.get("k_values", CONFIG_KEYS["k_values"])),
    )


def serialize_config(cfg: SimulationConfig) -> str:
    data = persist.config_to_dict(cfg)
    data["jump_schedule"] = [f"{t:g}:{d}" for t, d in cfg.jump_schedule]
    return yaml.safe_dump(data, sort_keys=True)


@dataclass
class RunManifest:
    command: str
    config: dict
    settings: dict
    output_dir: str
    created_at: str
    tool_version: str = __version__

    def to_json(self) -> str:
        return json.dumps(
            {
                "command": self.command,
                "config": self.config,
                "settings": self.settings,
                "output_dir": self.output_dir,
                "created_at": self.created_at,
                "tool_version": self.tool_version,
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        return cls(
            command=data["command"],
            config=data["config"],
            settings=data.get("settings", {}),
            output_dir=data["output_dir"],
            created_at=data["created_at"],
            tool_version=data.get("tool_version", __version__),
        )


# ---------------------------------------------------------------------------
# presets reproducing the published parameter sets

PRESETS = {
    "fig1": {
        "command": "trajectory",
        "config": {"k": 0.1, "t_final": 100.0},
        "settings": {
            "companion_unconditional": {"k": 0.0, "t_final": 50.0},
        },
    },
    "fig2a": {"command": "trajectory", "config": {"k": 0.1, "t_final": 200.0}},
    "fig2c": {"command": "trajectory", "config": {"k": 1.0, "t_final": 100.0}},
    "fig2e": {
        "command": "trajectory",
        "config": {"k": 10.0, "t_final": 100.0, "dt": 1e-4, "sample_every": 500},
    },
    "fig3": {
        "command": "sweep",
        "config": {"k": 0.1, "t_final": 100.0},
        "settings": {"n_trajectories": 200, "k_values": (0.1, 1.0, 10.0)},
    },
    "fig4": {
        "command": "jumps",
        "config": {
            "k": 0.1,
            "gamma": 1e-3,
            "n_T": 3.0,
            "n_bar": 3.0,
            "t_final": 200.0,
            "sample_every": 1,
            "jump_schedule": ["25:up"],
        },
    },
    "fig5": {
        "command": "jumps",
        "config": {
            "k": 1.0,
            "gamma": 1e-3,
            "n_T": 3.0,
            "n_bar": 3.0,
            "t_final": 200.0,
            "sample_every": 1,
        },
        "settings": {"bath_mode": "poisson"},
    },
}


def _preset_inputs(name: str):
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[name]
    cfg = parse_config_dict(
        {k: v for k, v in spec["config"].items() if k in CONFIG_KEYS}
    )
    settings = RunSettings(**spec.get("settings", {}))
    return spec["command"], cfg, settings


def _write_record(out_dir: Path, stem: str, cfg, record, runtime: float, extra=None):
    persist.write_trajectory_csv(out_dir / f"{stem}.csv", record)
    persist.write_sidecar(
        out_dir / f"{stem}.json",
        cfg,
        record.seed,
        float(np.max(record.leakage)),
        runtime,
        extra=extra,
    )


def _write_manifest(out_dir: Path, command: str, cfg, settings: RunSettings, preset=None):
    manifest = RunManifest(
        command=command,
        config=persist.config_to_dict(cfg),
        settings={
            "n_trajectories": settings.n_trajectories,
            "k_values": list(settings.k_values),
            "bath_mode": settings.bath_mode,
            "dump_states_every": settings.dump_states_every,
            "companion_unconditional": settings.companion_unconditional,
            "preset": preset,
        },
        output_dir=str(out_dir),
        created_at=datetime.now(timezone.utc).isoformat(),
    )
    (out_dir / "manifest.json").write_text(manifest.to_json() + "\n")
    return manifest


def cmd_trajectory(cfg, settings: RunSettings, out_dir: Path, preset=None) -> None:
    t0 = time.time()
    result = run_generator(cfg, states_every=settings.dump_states_every,
                           bath_mode=settings.bath_mode)
    _write_record(out_dir, "trajectory", cfg, result.record, time.time() - t0)
    if result.states is not None:
        persist.write_states_npz(out_dir / "states.npz", result.state_times, result.states)
    if settings.companion_unconditional is not None:
        overrides = dict(persist.config_to_dict(cfg))
        overrides.update(settings.companion_unconditional)
        overrides.pop("config_hash", None)
        ucfg = persist.config_from_dict(overrides)
        t0 = time.time()
        rec = run_unconditional(ucfg)
        _write_record(out_dir, "unconditional", ucfg, rec, time.time() - t0)
    _write_manifest(out_dir, "trajectory", cfg, settings, preset)


def cmd_unconditional(cfg, settings: RunSettings, out_dir: Path, preset=None) -> None:
    t0 = time.time()
    rec = run_unconditional(cfg)
    _write_record(out_dir, "unconditional", cfg, rec, time.time() - t0)
    _write_manifest(out_dir, "unconditional", cfg, settings, preset)


def cmd_ensemble(cfg, settings: RunSettings, out_dir: Path, preset=None) -> None:
    t0 = time.time()
    records = run_ensemble(cfg, settings.n_trajectories)
    runtime = time.time() - t0
    for i, rec in enumerate(records):
        _write_record(out_dir, f"trajectory_{i:03d}", cfg, rec, runtime / len(records))
    summary = aggregate(records)
    persist.write_ensemble_csv(out_dir / "ensemble.csv", summary)
    _write_manifest(out_dir, "ensemble", cfg, settings, preset)


def cmd_sweep(cfg, settings: RunSettings, out_dir: Path, preset=None) -> None:
    entries = sweep_tau(list(settings.k_values), cfg, settings.n_trajectories)
    persist.write_sweep_json(out_dir / "sweep.json", entries, cfg.seed)
    if preset == "fig3":
        records = run_ensemble(cfg, settings.n_trajectories)
        persist.write_ensemble_csv(out_dir / "ensemble.csv", aggregate(records))
    _write_manifest(out_dir, "sweep", cfg, settings, preset)


def cmd_jumps(cfg, settings: RunSettings, out_dir: Path, preset=None) -> None:
    if cfg.sample_every != 1:
        raise ValueError("jump experiments need sample_every = 1 so the record can be filtered")
    t0 = time.time()
    gen = run_generator(cfg, states_every=settings.dump_states_every,
                        bath_mode=settings.bath_mode)
    gen_runtime = time.time() - t0
    _write_record(
        out_dir, "trajectory_informed", cfg, gen.record, gen_runtime,
        extra={"jump_times": [[t, d] for t, d in gen.jump_times]},
    )
    if gen.states is not None:
        persist.write_states_npz(out_dir / "states_informed.npz", gen.state_times, gen.states)
    t0 = time.time()
    fil = run_filter(gen.record, cfg, states_every=settings.dump_states_every)
    _write_record(out_dir, "trajectory_filtered", cfg, fil.record, time.time() - t0)
    if fil.states is not None:
        persist.write_states_npz(out_dir / "states_filtered.npz", fil.state_times, fil.states)
    _write_manifest(out_dir, "jumps", cfg, settings, preset)


def cmd_filter(cfg, settings: RunSettings, out_dir: Path, record_path: Path,
               truth_path: Optional[Path] = None, preset=None) -> None:
    sidecar_path = record_path.with_suffix(".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"record sidecar {sidecar_path} not found")
    sidecar = persist.read_sidecar(sidecar_path)
    rec_cfg = sidecar.get("config", {})
    for key in ("k", "gamma", "n_T", "dt", "n_max", "g", "omega", "eta"):
        ours = getattr(cfg, key, None)
        if ours is None:
            ours = getattr(cfg.model, key)
        theirs = rec_cfg.get(key)
        if theirs is not None and abs(float(theirs) - float(ours)) > 1e-12:
            raise ValueError(
                f"record sidecar has {key} = {theirs}, configuration has {ours}; refusing to run"
            )
    record = persist.record_from_csv(record_path, sidecar)
    t0 = time.time()
    fil = run_filter(record, cfg, states_every=settings.dump_states_every)
    _write_record(out_dir, "filtered", cfg, fil.record, time.time() - t0)

    div_header = ["t"]
    div_cols = [record.times]
    if truth_path is not None and truth_path.suffix == ".npz":
        truth_times, truth_states = persist.read_states_npz(truth_path)
        stride = settings.dump_states_every
        if stride is None or fil.states is None:
            raise ValueError("trace-distance output needs --dump-states to match the truth file")
        n = min(len(truth_times), len(fil.state_times))
        if not np.allclose(truth_times[:n], fil.state_times[:n]):
            raise ValueError("truth state times do not match the filter state grid")
        td = [trace_distance(truth_states[i], fil.states[i]) for i in range(n)]
        div_header = ["t", "trace_distance"]
        div_cols = [truth_times[:n], np.array(td)]
    elif truth_path is not None:
        truth = persist.read_trajectory_csv(truth_path)
        if len(truth["t"]) != len(record.times):
            raise ValueError(
                f"truth file has {len(truth['t'])} rows, record has {len(record.times)}"
            )
        for name in ("sigma_ee", "mean_n", "purity"):
            div_header.append(f"abs_d_{name}")
            div_cols.append(np.abs(truth[name] - getattr(fil.record, name)))
    if len(div_cols) > 1:
        with open(out_dir / "divergence.csv", "w", newline="") as fh:
            import csv as _csv

            writer = _csv.writer(fh)
            writer.writerow(div_header)
            for i in range(len(div_cols[0])):
                writer.writerow([f"{c[i]:.9g}" for c in div_cols])
    _write_manifest(out_dir, "filter", cfg, settings, preset)


COMMANDS = {
    "trajectory": cmd_trajectory,
    "unconditional": cmd_unconditional,
    "ensemble": cmd_ensemble,
    "sweep": cmd_sweep,
    "jumps": cmd_jumps,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="simulate",
        description="Continuous weak monitoring of a resonant qubit-oscillator system",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("trajectory", "unconditional", "ensemble", "sweep", "jumps", "filter"):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML configuration file")
        p.add_argument("--preset", help=f"named parameter set: {', '.join(sorted(PRESETS))}")
        p.add_argument("--manifest", type=Path, help="re-run from an emitted manifest")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the configuration seed")
        p.add_argument("--dump-states", type=float, metavar="EVERY",
                       help="also store sampled density matrices every EVERY time units")
        if name == "filter":
            p.add_argument("--record", type=Path, required=True,
                           help="trajectory CSV written by a generator run")
            p.add_argument("--truth", type=Path,
                           help="truth file: states .npz (trace distance) or trajectory CSV")
    return parser


def _load_inputs(args):
    sources = [s for s in (args.config, args.preset, args.manifest) if s is not None]
    if len(sources) != 1:
        raise ValueError("provide exactly one of --config, --preset, --manifest")
    preset_name = None
    if args.manifest is not None:
        manifest = RunManifest.from_json(Path(args.manifest).read_text())
        if manifest.command != args.command:
            raise ValueError(
                f"manifest was written by 'simulate {manifest.command}', "
                f"not 'simulate {args.command}'"
            )
        cfg = persist.config_from_dict(manifest.config)
        s = manifest.settings
        settings = RunSettings(
            n_trajectories=s.get("n_trajectories", 200),
            k_values=tuple(s.get("k_values", (0.1, 1.0, 10.0))),
            bath_mode=s.get("bath_mode", "auto"),
            dump_states_every=s.get("dump_states_every"),
            companion_unconditional=s.get("companion_unconditional"),
        )
        preset_name = s.get("preset")
    elif args.preset is not None:
        command, cfg, settings = _preset_inputs(args.preset)
        if command != args.command:
            raise ValueError(
                f"preset {args.preset!r} belongs to 'simulate {command}', "
                f"not 'simulate {args.command}'"
            )
        preset_name = args.preset
    else:
        cfg = parse_config(args.config)
        with open(args.config) as fh:
            raw = yaml.safe_load(fh) or {}
        settings = run_settings_from_dict(raw if isinstance(raw, dict) else {})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "dump_states", None) is not None:
        settings.dump_states_every = args.dump_states
    return cfg, settings, preset_name


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, settings, preset_name = _load_inputs(args)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "filter":
            cmd_filter(cfg, settings, out_dir, args.record, args.truth, preset_name)
        else:
            COMMANDS[args.command](cfg, settings, out_dir, preset_name)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
