"""Scenario configs, sweep grids, seeding and CSV emission.

A scenario file is plain ``key = value`` text.  List-valued keys take
comma-separated entries and each spans one sweep dimension; the grid is
their cartesian product.  Every (grid point, replication) pair gets its
own derived seed, so any single CSV row can be reproduced in isolation.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable

from .core import ConfigurationError, PhysicalParams, ProtocolError, derive_seed
from .hopper import run_hopper_replication
from .network import build_chain
from .runtime import RunMetrics, aggregate, make_applications
from .sync import run_sync_replication

PROTOCOLS = ("hopper", "sync")

# Regime shortcuts assign link_length_m and gamma_hz together.
REGIMES = {
    "long": (5e6, 1.0),
    "short": (5.0, 0.01),
}

DEFAULT_P_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)


@dataclass(frozen=True)
class GridPoint:
    """One sweep combination.  Fields that do not apply are None."""

    protocol: str
    n_repeaters: int
    cells_per_node: int
    n_applications: int | None   # hopper only
    p_le: float | None           # sync only

    def label(self) -> str:
        parts = [self.protocol, f"reps={self.n_repeaters}",
                 f"cells={self.cells_per_node}"]
        if self.n_applications is not None:
            parts.append(f"apps={self.n_applications}")
        if self.p_le is not None:
            parts.append(f"p_le={self.p_le!r}")
        return " ".join(parts)


@dataclass
class ScenarioConfig:
    """Full experiment description; defaults reproduce the reference setup."""

    protocol: tuple[str, ...] = ("hopper",)
    n_repeaters: tuple[int, ...] = (3,)
    cells_per_node: tuple[int, ...] = (150,)
    n_applications: tuple[int, ...] = (30,)
    p_le: tuple[float, ...] = DEFAULT_P_GRID
    link_length_m: float = 5e6
    gamma_hz: float = 1.0
    f_init: float = 0.95
    epsg_rate_hz: float = 100.0
    bsm_success_prob: float = 0.95
    bsm_duration_s: float = 1e-3
    xz_duration_s: float = 1e-3
    signal_speed_m_s: float = 3e8
    composite_decay_multiplier: float = 1.0
    hold_time_s: float = 0.0
    duration_s: float = 60.0
    n_replications: int = 10
    base_seed: int = 1

    def __post_init__(self) -> None:
        if not self.protocol:
            raise ConfigurationError("protocol list must not be empty")
        for name in self.protocol:
            if name not in PROTOCOLS:
                raise ConfigurationError(f"unknown protocol {name!r}")
        if len(set(self.protocol)) != len(self.protocol):
            raise ConfigurationError("protocol list has duplicates")
        for label, values, low in (("n_repeaters", self.n_repeaters, 0),
                                   ("cells_per_node", self.cells_per_node, 1),
                                   ("n_applications", self.n_applications, 1)):
            if not values:
                raise ConfigurationError(f"{label} list must not be empty")
            for v in values:
                if v < low:
                    raise ConfigurationError(f"{label} must be >= {low}, got {v}")
        if any(r >= 1 for r in self.n_repeaters):
            for c in self.cells_per_node:
                if c < 2:
                    raise ConfigurationError(
                        f"cells_per_node = {c} cannot host both directions at a repeater")
        if "sync" in self.protocol:
            if not self.p_le:
                raise ConfigurationError("sync runs need a non-empty p_le grid")
            for p in self.p_le:
                if not (0.0 < p < 1.0):
                    raise ConfigurationError(f"p_le must lie in (0, 1), got {p}")
        if self.duration_s <= 0:
            raise ConfigurationError(f"duration_s must be > 0, got {self.duration_s}")
        if self.n_replications < 1:
            raise ConfigurationError(
                f"n_replications must be >= 1, got {self.n_replications}")
        if self.base_seed < 0:
            raise ConfigurationError(f"base_seed must be >= 0, got {self.base_seed}")
        if self.hold_time_s < 0:
            raise ConfigurationError(f"hold_time_s must be >= 0, got {self.hold_time_s}")
        self.physical_params()  # reuse the hardware-level range checks

    def physical_params(self) -> PhysicalParams:
        return PhysicalParams(
            gamma_hz=self.gamma_hz,
            f_init=self.f_init,
            epsg_rate_hz=self.epsg_rate_hz,
            bsm_success_prob=self.bsm_success_prob,
            bsm_duration_s=self.bsm_duration_s,
            xz_duration_s=self.xz_duration_s,
            signal_speed_m_s=self.signal_speed_m_s,
            composite_decay_multiplier=self.composite_decay_multiplier,
        )

    def grid(self) -> list[GridPoint]:
        """Sweep combinations in a fixed order; the index seeds each run.

        The application count only shapes hopper runs and the local
        entanglement probability only shapes sync runs, so each protocol
        sweeps its own applicable dimensions.
        """
        points = []
        for protocol in self.protocol:
            for n_rep in self.n_repeaters:
                for cells in self.cells_per_node:
                    if protocol == "hopper":
                        for apps in self.n_applications:
                            points.append(GridPoint(protocol, n_rep, cells, apps, None))
                    else:
                        for p in self.p_le:
                            points.append(GridPoint(protocol, n_rep, cells, None, p))
        return points


def _int_value(text: str) -> int:
    return int(text, 10)


def _float_value(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("must be finite")
    return value


def _bounded(parse: Callable[[str], float], check: Callable[[float], bool],
             describe: str) -> Callable[[str], float]:
    def convert(text: str) -> float:
        value = parse(text)
        if not check(value):
            raise ValueError(f"must be {describe}")
        return value
    return convert


def _listed(convert: Callable[[str], object]) -> Callable[[str], tuple]:
    def convert_list(text: str) -> tuple:
        items = [part.strip() for part in text.split(",")]
        if any(not part for part in items):
            raise ValueError("empty list entry")
        return tuple(convert(part) for part in items)
    return convert_list


def _protocol_list(text: str) -> tuple[str, ...]:
    names = tuple(part.strip() for part in text.split(","))
    for name in names:
        if name not in PROTOCOLS:
            raise ValueError(f"unknown protocol {name!r}")
    if len(set(names)) != len(names):
        raise ValueError("duplicate protocol")
    return names


# key -> (config field, converter); regime is handled apart since it
# assigns two fields at once.
_KEYS: dict[str, tuple[str, Callable[[str], object]]] = {
    "protocol": ("protocol", _protocol_list),
    "n_repeaters": ("n_repeaters", _listed(_bounded(_int_value, lambda v: v >= 0, ">= 0"))),
    "cells_per_node": ("cells_per_node", _listed(_bounded(_int_value, lambda v: v >= 1, ">= 1"))),
    "n_applications": ("n_applications", _listed(_bounded(_int_value, lambda v: v >= 1, ">= 1"))),
    "p_le": ("p_le", _listed(_bounded(_float_value, lambda v: 0 < v < 1, "in (0, 1)"))),
    "link_length_m": ("link_length_m", _bounded(_float_value, lambda v: v > 0, "> 0")),
    "gamma_hz": ("gamma_hz", _bounded(_float_value, lambda v: v >= 0, ">= 0")),
    "f_init": ("f_init", _bounded(_float_value, lambda v: 0.25 < v <= 1, "in (0.25, 1]")),
    "epsg_rate_hz": ("epsg_rate_hz", _bounded(_float_value, lambda v: v > 0, "> 0")),
    "bsm_success_prob": ("bsm_success_prob", _bounded(_float_value, lambda v: 0 <= v <= 1, "in [0, 1]")),
    "bsm_duration_s": ("bsm_duration_s", _bounded(_float_value, lambda v: v >= 0, ">= 0")),
    "xz_duration_s": ("xz_duration_s", _bounded(_float_value, lambda v: v >= 0, ">= 0")),
    "signal_speed_m_s": ("signal_speed_m_s", _bounded(_float_value, lambda v: v > 0, "> 0")),
    "composite_decay_multiplier": ("composite_decay_multiplier", _bounded(_float_value, lambda v: v >= 0, ">= 0")),
    "hold_time_s": ("hold_time_s", _bounded(_float_value, lambda v: v >= 0, ">= 0")),
    "duration_s": ("duration_s", _bounded(_float_value, lambda v: v > 0, "> 0")),
    "n_replications": ("n_replications", _bounded(_int_value, lambda v: v >= 1, ">= 1")),
    "base_seed": ("base_seed", _bounded(_int_value, lambda v: v >= 0, ">= 0")),
}


def parse_config(path: str | Path) -> ScenarioConfig:
    """Read a scenario file; '#' starts a comment, later lines win.

    The regime key is shorthand: long assigns link_length_m = 5e6 and
    gamma_hz = 1.0, short assigns 5.0 and 0.01, at its line position.
    """
    assigned: dict[str, object] = {}
    where: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            ref = f"{path}:{line_no}"
            key, sep, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if not sep or not key:
                raise ConfigurationError(f"{ref}: expected 'key = value', got {line!r}")
            if not value:
                raise ConfigurationError(f"{ref}: key {key!r} has no value")
            if key == "regime":
                if value not in REGIMES:
                    raise ConfigurationError(
                        f"{ref}: regime must be one of {sorted(REGIMES)}, got {value!r}")
                length, gamma = REGIMES[value]
                assigned["link_length_m"] = length
                assigned["gamma_hz"] = gamma
                where["link_length_m"] = where["gamma_hz"] = ref
                continue
            if key not in _KEYS:
                raise ConfigurationError(f"{ref}: unknown key {key!r}")
            field_name, convert = _KEYS[key]
            try:
                assigned[field_name] = convert(value)
            except ValueError as exc:
                raise ConfigurationError(f"{ref}: {key} = {value!r}: {exc}") from None
            where[field_name] = ref
    try:
        return ScenarioConfig(**assigned)
    except ConfigurationError as exc:
        # cross-field problem; point at the most recently involved line
        refs = ", ".join(sorted(set(where.values()))) or str(path)
        raise ConfigurationError(f"{refs}: {exc}") from None


def format_defaults() -> str:
    """Defaults in config-file syntax, ready to paste and edit."""
    lines = []
    for spec in fields(ScenarioConfig):
        value = spec.default
        if isinstance(value, tuple):
            text = ", ".join(_cell(v) for v in value)
        else:
            text = _cell(value)
        lines.append(f"{spec.name} = {text}")
    return "\n".join(lines)


RUNS_COLUMNS = (
    "protocol", "n_repeaters", "cells_per_node", "n_applications", "p_le",
    "replication", "seed", "duration_s",
    "attempts", "successes", "failures_stale", "failures_bsm", "failures_le",
    "abandoned", "retries", "throughput_ebits_s", "mean_fidelity",
    "min_fidelity", "low_fidelity_count", "waits_count", "mean_wait_s",
    "max_wait_s", "pairs_generated", "pairs_stored", "pairs_overwritten",
    "pairs_dropped", "unroutable_messages", "lanes", "slots",
)

SUMMARY_COLUMNS = (
    "protocol", "n_repeaters", "cells_per_node", "n_applications", "p_le",
    "n_replications", "throughput_ebits_s_mean", "throughput_ebits_s_ci95",
    "fidelity_mean", "fidelity_ci95", "successes_mean", "successes_ci95",
    "failures_mean", "failures_ci95", "abandoned_mean", "abandoned_ci95",
    "best_p",
)


def _cell(value) -> str:
    """CSV cell text; repr keeps floats round-trippable and runs diffable."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _run_row(cfg: ScenarioConfig, point: GridPoint, rep_index: int, seed: int,
             m: RunMetrics) -> list[str]:
    delivered = m.successes > 0
    return [_cell(v) for v in (
        point.protocol, point.n_repeaters, point.cells_per_node,
        point.n_applications, point.p_le, rep_index, seed, cfg.duration_s,
        m.attempts, m.successes, m.failures_stale, m.failures_bsm,
        m.failures_le, m.abandoned, m.retries, m.throughput,
        m.mean_fidelity, m.fidelity_min if delivered else None,
        m.low_fidelity_count, m.waits_count, m.mean_wait_s, m.wait_max_s,
        m.pairs_generated, m.pairs_stored, m.pairs_overwritten,
        m.pairs_dropped, m.unroutable_messages, m.lanes, m.slots,
    )]


def _summary_row(point: GridPoint, reps: list[RunMetrics], best_p: bool | None) -> list[str]:
    tput_mean, tput_ci = aggregate([m.throughput for m in reps])
    fidelities = [m.mean_fidelity for m in reps if m.mean_fidelity is not None]
    fid_mean, fid_ci = aggregate(fidelities) if fidelities else (None, None)
    succ = aggregate([float(m.successes) for m in reps])
    fail = aggregate([float(m.failures) for m in reps])
    aband = aggregate([float(m.abandoned) for m in reps])
    return [_cell(v) for v in (
        point.protocol, point.n_repeaters, point.cells_per_node,
        point.n_applications, point.p_le, len(reps), tput_mean, tput_ci,
        fid_mean, fid_ci, succ[0], succ[1], fail[0], fail[1],
        aband[0], aband[1], None if best_p is None else int(best_p),
    )]


def _select_best_p(points: list[GridPoint],
                   results: list[list[RunMetrics]]) -> set[int]:
    """Grid indices of the best sync phase setting per (path, memory) pair.

    Strict improvement keeps the earliest grid entry on ties, matching
    sweep_optimal_p.
    """
    best: dict[tuple[int, int], int] = {}
    means: dict[int, float] = {}
    for idx, point in enumerate(points):
        if point.protocol != "sync":
            continue
        means[idx] = math.fsum(m.throughput for m in results[idx]) / len(results[idx])
        key = (point.n_repeaters, point.cells_per_node)
        held = best.get(key)
        if held is None or means[idx] > means[held]:
            best[key] = idx
    return set(best.values())


def run_experiment(cfg: ScenarioConfig, out_dir: str | Path,
                   trace: Callable[[str], None] | None = None,
                   dump: Callable[[str], None] | None = None) -> tuple[Path, Path]:
    """Run the full sweep; write runs.csv and summary.csv under out_dir.

    Rows are emitted in grid order with repr-formatted floats, so the same
    config and base seed always produce byte-identical files.  A failed
    replication aborts the experiment naming its grid point and seed.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = cfg.physical_params()
    points = cfg.grid()

    results: list[list[RunMetrics]] = []
    for grid_index, point in enumerate(points):
        reps: list[RunMetrics] = []
        for rep_index in range(cfg.n_replications):
            seed = derive_seed(cfg.base_seed, grid_index, rep_index)
            banner = f"# {point.label()} rep={rep_index} seed={seed}"
            for sink in (trace, dump):
                if sink is not None:
                    sink(banner)
            topo = build_chain(point.n_repeaters, cfg.link_length_m,
                               point.cells_per_node, params)
            try:
                if point.protocol == "hopper":
                    apps = make_applications(point.n_applications, cfg.hold_time_s)
                    metrics = run_hopper_replication(
                        topo, apps, cfg.duration_s, seed, trace=trace, dump=dump)
                else:
                    metrics = run_sync_replication(
                        topo, point.p_le, cfg.duration_s, seed, trace=trace)
            except ProtocolError as exc:
                raise ProtocolError(
                    f"replication failed: {point.label()} rep={rep_index} "
                    f"seed={seed}: {exc}") from exc
            reps.append(metrics)
        results.append(reps)

    winners = _select_best_p(points, results)

    runs_path = out / "runs.csv"
    with open(runs_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(RUNS_COLUMNS)
        for grid_index, point in enumerate(points):
            for rep_index, metrics in enumerate(results[grid_index]):
                seed = derive_seed(cfg.base_seed, grid_index, rep_index)
                writer.writerow(_run_row(cfg, point, rep_index, seed, metrics))

    summary_path = out / "summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for grid_index, point in enumerate(points):
            best = None
            if point.protocol == "sync":
                best = grid_index in winners
            writer.writerow(_summary_row(point, results[grid_index], best))

    return runs_path, summary_path


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ebitsim",
        description="Entanglement distribution experiments over repeater chains.")
    parser.add_argument("--config", metavar="FILE",
                        help="scenario file in key = value form")
    parser.add_argument("--out", metavar="DIR", default="results",
                        help="output directory (default: results)")
    parser.add_argument("--trace", action="store_true",
                        help="write the engine event trace to <out>/trace.log")
    parser.add_argument("--dump-messages", action="store_true",
                        help="write protocol decisions to <out>/messages.log")
    parser.add_argument("--list-defaults", action="store_true",
                        help="print the default scenario and exit")
    args = parser.parse_args(argv)

    if args.list_defaults:
        print(format_defaults())
        return 0
    if args.config is None:
        print("error: --config is required unless --list-defaults is given",
              file=sys.stderr)
        return 2

    try:
        cfg = parse_config(args.config)
    except (OSError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handles = []
    sinks: dict[str, Callable[[str], None] | None] = {"trace": None, "dump": None}
    try:
        if args.trace:
            handle = open(out / "trace.log", "w", encoding="utf-8", newline="\n")
            handles.append(handle)
            sinks["trace"] = lambda line, h=handle: h.write(line + "\n")
        if args.dump_messages:
            handle = open(out / "messages.log", "w", encoding="utf-8", newline="\n")
            handles.append(handle)
            sinks["dump"] = lambda line, h=handle: h.write(line + "\n")
        runs_path, summary_path = run_experiment(
            cfg, out, trace=sinks["trace"], dump=sinks["dump"])
    except ProtocolError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        for handle in handles:
            handle.close()

    grid_size = len(cfg.grid())
    print(f"wrote {runs_path} and {summary_path} "
          f"({grid_size} grid points x {cfg.n_replications} replications)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
