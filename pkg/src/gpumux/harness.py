"""Experiment runner: config files, sweeps, and golden-file-friendly outputs.

Configs are flat ``key = value`` text grouped in sections. Unknown sections or
keys are rejected with the offending line number, and all values validate
before any engine is constructed. Each command writes a ``summary.csv``, a
``utilization.jsonl``, and (on request) an ``events.jsonl`` whose rows carry a
``run`` label so the CSV is recomputable from the event log. Outputs are
byte-identical for identical config and seed.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .audits import InvariantViolation, check_all
from .config import DeviceConfig
from .vm import AllocPolicy, MemorySystem, PageGeometry, SizeClass
from .workloads import (ENV_PRESETS, DatagenMode, EpisodeSpec, Metrics, PhaseCost,
                        RolloutMode, RolloutSpec, run_datagen, run_rl_rollout)


class ConfigError(Exception):
    pass


def _parse_int(text: str) -> int:
    return int(text, 0)  # accepts hex for the VA bases


def _parse_float(text: str) -> float:
    return float(text)


def _parse_int_list(text: str) -> list[int]:
    return [int(tok, 0) for tok in text.replace(",", " ").split()]


def _parse_str(text: str) -> str:
    return text


_SCHEMA = {
    "device": {
        "quantum": _parse_float,
        "context_switch_penalty": _parse_float,
        "hw_max_queues": _parse_int,
        "ring_capacity": _parse_int,
        "compute_capacity": _parse_float,
        "graphics_capacity": _parse_float,
        "utilization_sample_dt": _parse_float,
        "page_levels": _parse_int,
        "page_bits_per_level": _parse_int,
        "big_page_level": _parse_int,
        "va_width": _parse_int,
        "high_base": _parse_int,
        "low_base": _parse_int,
    },
    "costs": {
        "preset": _parse_str,
        "sim_base": _parse_float,
        "sim_per_env": _parse_float,
        "render_base": _parse_float,
        "render_per_env": _parse_float,
        "inference_base": _parse_float,
        "inference_per_env": _parse_float,
        "sim_compute_frac": _parse_float,
        "render_compute_frac": _parse_float,
        "render_graphics_frac": _parse_float,
    },
    "workload": {
        "env": _parse_str,
        "steps": _parse_int,
        "batches": _parse_int_list,
        "groups": _parse_int,
    },
    "graftbench": {
        "buffer_counts": _parse_int_list,
    },
}

_GEOMETRY_KEYS = {"page_levels": "levels", "page_bits_per_level": "bits_per_level",
                  "big_page_level": "big_page_level", "va_width": "va_width"}


@dataclasses.dataclass
class ExperimentConfig:
    device: DeviceConfig
    costs: PhaseCost
    env: str
    steps: int
    batches: list[int]
    groups: int
    buffer_counts: list[int]


def parse_config(path: str | Path) -> ExperimentConfig:
    """Parse and fully validate a config file; raises ConfigError with the
    offending line number on any problem."""
    text = Path(path).read_text()
    section = None
    values: dict[tuple[str, str], tuple[object, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside any section")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA[section]:
            raise ConfigError(f"line {lineno}: unknown key '{key}' in [{section}]")
        try:
            parsed = _SCHEMA[section][key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from None
        values[(section, key)] = (parsed, lineno)

    def section_dict(name: str) -> dict:
        return {k: v for (s, k), (v, _) in values.items() if s == name}

    device_kv = section_dict("device")
    geometry_kv = {}
    for cfg_key, geo_key in _GEOMETRY_KEYS.items():
        if cfg_key in device_kv:
            geometry_kv[geo_key] = device_kv.pop(cfg_key)
    try:
        geometry = PageGeometry(**geometry_kv)
        device = DeviceConfig(geometry=geometry, **device_kv)
    except ValueError as exc:
        raise ConfigError(f"[device]: {exc}") from None

    costs_kv = section_dict("costs")
    workload_kv = section_dict("workload")
    env = workload_kv.get("env", "custom")
    preset = costs_kv.pop("preset", None)
    if preset is not None and preset not in ENV_PRESETS:
        lineno = values[("costs", "preset")][1]
        raise ConfigError(f"line {lineno}: unknown preset '{preset}' "
                          f"(known: {', '.join(sorted(ENV_PRESETS))})")
    base_costs = ENV_PRESETS.get(preset or env, PhaseCost())
    try:
        costs = dataclasses.replace(base_costs, **costs_kv)
    except ValueError as exc:
        raise ConfigError(f"[costs]: {exc}") from None

    steps = workload_kv.get("steps", 50)
    batches = workload_kv.get("batches", [32, 64, 128, 256, 384])
    groups = workload_kv.get("groups", 2)
    if steps < 0:
        raise ConfigError("[workload]: steps must be >= 0")
    if not batches or any(b < 1 for b in batches):
        raise ConfigError("[workload]: batches must be positive")
    if groups < 1:
        raise ConfigError("[workload]: groups must be >= 1")
    for b in batches:
        if b % groups:
            raise ConfigError(f"[workload]: groups={groups} does not divide batch {b}")

    counts = section_dict("graftbench").get(
        "buffer_counts", [4 << i for i in range(12)])  # 4 .. 8192
    if not counts or any(n < 1 for n in counts):
        raise ConfigError("[graftbench]: buffer_counts must be positive")

    return ExperimentConfig(device=device, costs=costs, env=env, steps=steps,
                            batches=batches, groups=groups, buffer_counts=counts)


# ----------------------------------------------------------------------
# output helpers

def _fmt(value) -> str:
    return repr(value) if isinstance(value, float) else str(value)


def _write_csv(path: Path, header: list[str], rows: list[dict]):
    lines = [",".join(header)]
    lines += [",".join(_fmt(row[h]) for h in header) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _write_jsonl(path: Path, records: list[dict]):
    path.write_text("".join(json.dumps(r, separators=(",", ":")) + "\n"
                            for r in records))


_WORKLOAD_HEADER = ["env", "mode", "K", "B", "G", "makespan", "throughput",
                    "speedup_vs_sequential"]


def _collect(metrics: Metrics, run: str, speedup: float, cfg: ExperimentConfig,
             events: list, utils: list) -> dict:
    check_all(metrics.trace)
    for ev in metrics.trace.events:
        tagged = {"run": run}
        tagged.update(ev)
        events.append(tagged)
    for sample in metrics.trace.utilization_samples(cfg.device.utilization_sample_dt):
        tagged = {"run": run}
        tagged.update(sample)
        utils.append(tagged)
    return {"env": metrics.env, "mode": metrics.mode, "K": metrics.steps,
            "B": metrics.batch, "G": metrics.groups, "makespan": metrics.makespan,
            "throughput": metrics.throughput, "speedup_vs_sequential": speedup}


def _emit(out_dir: Path, command: str, seed: int, json_events: bool,
          header: list[str], rows: list[dict], events: list, utils: list):
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "summary.csv", header, rows)
    _write_jsonl(out_dir / "utilization.jsonl", utils)
    if json_events:
        meta = {"meta": {"command": command, "seed": seed}}
        _write_jsonl(out_dir / "events.jsonl", [meta] + events)


# ----------------------------------------------------------------------
# commands

def cmd_datagen(cfg: ExperimentConfig, out_dir: Path, seed: int = 0,
                json_events: bool = False, dump_tables: bool = False) -> list[dict]:
    """Sequential vs pipelined data generation across the batch sweep."""
    rows, events, utils = [], [], []
    for batch in cfg.batches:
        seq = run_datagen(EpisodeSpec(cfg.steps, batch, DatagenMode.SEQUENTIAL),
                          cfg.costs, cfg.device, env=cfg.env)
        pipe = run_datagen(EpisodeSpec(cfg.steps, batch, DatagenMode.PIPELINED),
                           cfg.costs, cfg.device, env=cfg.env)
        speedup = seq.makespan / pipe.makespan if pipe.makespan > 0 else 1.0
        rows.append(_collect(seq, f"B{batch}/sequential", 1.0, cfg, events, utils))
        rows.append(_collect(pipe, f"B{batch}/pipelined", speedup, cfg, events, utils))
    _emit(out_dir, "datagen", seed, json_events, _WORKLOAD_HEADER, rows, events, utils)
    return rows


def cmd_rl(cfg: ExperimentConfig, out_dir: Path, seed: int = 0,
           json_events: bool = False, dump_tables: bool = False) -> list[dict]:
    """Sequential vs interleaved rollout across the batch sweep."""
    rows, events, utils = [], [], []
    for batch in cfg.batches:
        seq = run_rl_rollout(RolloutSpec(cfg.steps, batch, cfg.groups,
                                         RolloutMode.SEQUENTIAL),
                             cfg.costs, cfg.device, env=cfg.env)
        inter = run_rl_rollout(RolloutSpec(cfg.steps, batch, cfg.groups,
                                           RolloutMode.INTERLEAVED),
                               cfg.costs, cfg.device, env=cfg.env)
        speedup = seq.makespan / inter.makespan if inter.makespan > 0 else 1.0
        rows.append(_collect(seq, f"B{batch}/sequential", 1.0, cfg, events, utils))
        rows.append(_collect(inter, f"B{batch}/interleaved", speedup, cfg, events, utils))
    _emit(out_dir, "rl", seed, json_events, _WORKLOAD_HEADER, rows, events, utils)
    return rows


def run_graft_microbenchmark(cfg: ExperimentConfig, n_buffers: int) -> dict:
    """Op-count cost of sharing n 2 MiB buffers: graft-and-propagate vs a
    2-ops-per-buffer export/import model.

    Fresh tables each time: both sides get a small resident footprint, the
    graft runs once, then the buffers are mapped on the source. Graft cost is
    the initial merge's entry writes, plus subscriber writes caused by the
    new mappings, plus the merge's TLB invalidation.
    """
    mem = MemorySystem(cfg.device.geometry)
    source = mem.create_space(AllocPolicy.HIGH_RANGE, base=cfg.device.high_base)
    target = mem.create_space(AllocPolicy.LOW_RANGE, base=cfg.device.low_base,
                              limit=cfg.device.high_base)
    for space in (source, target):
        va = mem.allocate(space, 2, SizeClass.SMALL)
        mem.map_range(space, va, mem.alloc_phys(SizeClass.SMALL, 2))
    report = mem.graft(source, target)
    writes_before = mem.copy_log.writes
    for _ in range(n_buffers):
        va = mem.allocate(source, 1, SizeClass.BIG)
        mem.map_range(source, va, mem.alloc_phys(SizeClass.BIG))
    subscriber_writes = mem.copy_log.writes - writes_before
    graft_ops = report.entry_writes + subscriber_writes + report.tlb_invalidations
    return {"n_buffers": n_buffers, "export_import_ops": 2 * n_buffers,
            "graft_ops": graft_ops,
            "tables": {"source": mem.dump_tables(source),
                       "target": mem.dump_tables(target)}}


def cmd_graftbench(cfg: ExperimentConfig, out_dir: Path, seed: int = 0,
                   json_events: bool = False, dump_tables: bool = False) -> list[dict]:
    """Scaling of memory-sharing cost with the number of shared 2 MiB buffers."""
    rows, events = [], []
    tables = None
    for n in cfg.buffer_counts:
        result = run_graft_microbenchmark(cfg, n)
        tables = result.pop("tables")
        rows.append(result)
        events.append({"run": f"N{n}", "time": 0.0, "event": "graftbench",
                       "channel": None, "tsg": None, "stream": None,
                       "export_import_ops": result["export_import_ops"],
                       "graft_ops": result["graft_ops"]})
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "summary.csv",
               ["n_buffers", "export_import_ops", "graft_ops"], rows)
    _write_jsonl(out_dir / "utilization.jsonl", [])
    if json_events:
        meta = {"meta": {"command": "graftbench", "seed": seed}}
        _write_jsonl(out_dir / "events.jsonl", [meta] + events)
    if dump_tables and tables is not None:
        (out_dir / "tables.json").write_text(json.dumps(tables, indent=2) + "\n")
    return rows


def cmd_trace(cfg: ExperimentConfig, out_dir: Path, seed: int = 0,
              json_events: bool = False, dump_tables: bool = False) -> list[dict]:
    """Paired utilization traces of one workload, sequential vs pipelined.

    Fails with an invariant violation if overlap does not raise the mean
    compute utilization.
    """
    batch = cfg.batches[0]
    rows, events, utils = [], [], []
    seq = run_datagen(EpisodeSpec(cfg.steps, batch, DatagenMode.SEQUENTIAL),
                      cfg.costs, cfg.device, env=cfg.env)
    pipe = run_datagen(EpisodeSpec(cfg.steps, batch, DatagenMode.PIPELINED),
                       cfg.costs, cfg.device, env=cfg.env)
    speedup = seq.makespan / pipe.makespan if pipe.makespan > 0 else 1.0
    rows.append(_collect(seq, "sequential", 1.0, cfg, events, utils))
    rows.append(_collect(pipe, "pipelined", speedup, cfg, events, utils))
    if cfg.steps > 0 and pipe.trace.mean_compute_util() <= seq.trace.mean_compute_util():
        raise InvariantViolation(
            "pipelined mean compute utilization not above sequential "
            f"({pipe.trace.mean_compute_util()} <= {seq.trace.mean_compute_util()})")
    _emit(out_dir, "trace", seed, json_events, _WORKLOAD_HEADER, rows, events, utils)
    return rows
