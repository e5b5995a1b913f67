"""Measurement algorithms run on top of the engine.

Time-to-first-flip bisection, blast radius and cell-fraction metrics,
RowClone-based subarray boundary recovery, retention profiling with
worst-of-N semantics, known-failure filtering, and the parameter sweep
runner.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .array import RETENTION_PATTERNS, DataPattern, DramArray, init_region
from .engine import BitflipReport, Cause, build_access_pattern, execute, rowclone
from .errors import ConfigurationError, InputError
from .timing import CommandStream, MS, Temperature, TimingParams, count_fits

SEARCH_CAP = 512 * MS
LOCATIONS = ("beginning", "middle", "end")


@dataclass(frozen=True)
class ExperimentSpec:
    location: str | int = "middle"
    subarray: Optional[int] = None          # aggressor subarray; default: the middle one
    pattern: DataPattern = DataPattern(0x00)
    victim_pattern: Optional[DataPattern] = None  # None: negated aggressor pattern
    timings: TimingParams = TimingParams()
    temperature: Temperature = Temperature()
    refresh_interval: float = SEARCH_CAP
    access: str = "single"
    second_offset: int = 2                  # two-aggressor: R2 = R1 +/- offset

    def __post_init__(self):
        object.__setattr__(self, "pattern", DataPattern.parse(self.pattern))
        if self.victim_pattern is not None:
            object.__setattr__(self, "victim_pattern", DataPattern.parse(self.victim_pattern))
        if not (isinstance(self.location, int) or self.location in LOCATIONS):
            raise ConfigurationError(f"unknown aggressor location {self.location!r}")
        if self.access not in ("single", "two"):
            raise ConfigurationError(f"unknown access pattern {self.access!r}")
        if not 64 * MS <= self.refresh_interval <= 16.0 + 1e-9:
            raise ConfigurationError("refresh_interval must lie in [64 ms, 16 s]")

    @property
    def victims(self) -> DataPattern:
        return self.pattern.negated() if self.victim_pattern is None else self.victim_pattern


def aggressor_rows(array: DramArray, spec: ExperimentSpec) -> list[int]:
    if isinstance(spec.location, int):
        first = spec.location
        array.check_row(first)
    else:
        k = len(array.geometry.sizes) // 2 if spec.subarray is None else spec.subarray
        rng = array.subarray_range(k)
        first = {"beginning": rng.start, "middle": rng.start + len(rng) // 2, "end": rng.stop - 1}[spec.location]
    if spec.access == "single":
        return [first]
    rng = array.subarray_range(array.subarray_of(first))
    second = first + spec.second_offset if first + spec.second_offset < rng.stop else first - spec.second_offset
    if second not in rng:
        raise InputError("subarray too small for a two-aggressor pattern")
    return [first, second]


def prepare(array: DramArray, spec: ExperimentSpec) -> list[int]:
    """Initialize victims and aggressors; returns the aggressor rows."""
    rows = aggressor_rows(array, spec)
    init_region(array, range(array.rows), spec.victims)
    init_region(array, rows[:1], spec.pattern)
    if len(rows) > 1:
        init_region(array, rows[1:], spec.pattern.negated())
    return rows


def access_stream(array: DramArray, spec: ExperimentSpec, rows: Sequence[int], *,
                  duration: float | None = None, pairs: int | None = None) -> CommandStream:
    patterns = None if spec.access == "single" else (spec.pattern, spec.pattern.negated())
    total = spec.refresh_interval if duration is None else duration
    return build_access_pattern(array.geometry, spec.access, rows, spec.timings, total,
                                patterns=patterns, pairs=pairs)


def run_experiment(array: DramArray, spec: ExperimentSpec, duration: float | None = None) -> tuple[BitflipReport, list[int]]:
    """Initialize, press/hammer for ``duration`` (default: the refresh interval), report flips."""
    rows = prepare(array, spec)
    stream = access_stream(array, spec, rows, duration=duration)
    return execute(array, stream, spec.timings, spec.temperature), rows


# ------------------------------------------------------------------ profiles
@dataclass
class RetentionProfile:
    """Minimum observed retention time per cell (inf when never observed)."""

    min_retention: np.ndarray
    window: float

    def retention(self, bank: int, row: int, col: int) -> float:
        return float(self.min_retention[bank, row, col])

    def save(self, path: str | Path) -> None:
        b, r, c = np.nonzero(np.isfinite(self.min_retention))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bank", "row", "column", "retention_s"])
        w.writerow(["#window", "", "", repr(self.window)])
        for bi, ri, ci in zip(b, r, c):
            w.writerow([int(bi), int(ri), int(ci), repr(float(self.min_retention[bi, ri, ci]))])
        Path(path).write_text(buf.getvalue())

    @classmethod
    def load(cls, path: str | Path, shape: tuple[int, int, int]) -> "RetentionProfile":
        data = np.full(shape, np.inf)
        window = math.inf
        with open(path, newline="") as f:
            rd = csv.reader(f)
            next(rd)
            for rec in rd:
                if rec[0] == "#window":
                    window = float(rec[3])
                    continue
                data[int(rec[0]), int(rec[1]), int(rec[2])] = float(rec[3])
        return cls(data, window)


def profile_retention(array: DramArray, window: float, temperature: Temperature | None = None,
                      patterns: Sequence[DataPattern] = RETENTION_PATTERNS, repeats: int = 50) -> RetentionProfile:
    """Idle-bank retention test, each pattern and its inverse, worst of ``repeats`` runs.

    The array itself is not modified.
    """
    work = array.copy()
    best = np.full(array.t_gnd.shape, np.inf)
    for pattern in patterns:
        for p in (pattern, pattern.negated()):
            for _ in range(repeats):
                init_region(work, range(work.rows), p)
                report = execute(work, CommandStream(duration=window), temperature=temperature)
                for rec in report:
                    idx = (rec.bank, rec.row, rec.column)
                    best[idx] = min(best[idx], rec.time)
    return RetentionProfile(best, window)


def profile_disturbance(array: DramArray, spec: ExperimentSpec, window: float,
                        retention: RetentionProfile | None = None) -> RetentionProfile:
    """Earliest non-hammer failure per cell under ``spec``'s aggression for ``window``.

    Merged with ``retention`` (elementwise minimum) when given, so the result
    marks at least every cell the retention-only profile marks.
    """
    work = array.copy()
    report, _ = run_experiment(work, spec, duration=window)
    best = np.full(array.t_gnd.shape, np.inf) if retention is None else retention.min_retention.copy()
    for rec in report:
        if rec.cause == Cause.HAMMER:
            continue
        idx = (rec.bank, rec.row, rec.column)
        best[idx] = min(best[idx], rec.time)
    return RetentionProfile(best, window)


def filter_known_failures(report: BitflipReport, retention_profile: RetentionProfile | None,
                          aggressor_row: int | Sequence[int], refresh_interval: float,
                          radius: int = 8) -> BitflipReport:
    """Drop flips near the aggressor(s) and flips at cells retention alone explains."""
    if radius < 2 and radius != 0:
        raise InputError("exclusion radius must be 0 or >= 2")
    aggs = [aggressor_row] if isinstance(aggressor_row, (int, np.integer)) else list(aggressor_row)

    def keep(rec) -> bool:
        if any(abs(rec.row - a) <= radius for a in aggs):
            return False
        if retention_profile is not None:
            if retention_profile.min_retention[rec.bank, rec.row, rec.column] <= refresh_interval:
                return False
        return True

    return report.filter(keep)


# ------------------------------------------------------------------- metrics
def blast_radius(report: BitflipReport, subarray: int) -> int:
    return len({(r.bank, r.row) for r in report if r.subarray == subarray})


def fraction_cells_with_flips(report: BitflipReport, subarray: int, array_or_geometry) -> float:
    geometry = getattr(array_or_geometry, "geometry", array_or_geometry)
    total = geometry.sizes[subarray] * geometry.columns_per_row * geometry.banks
    cells = {(r.bank, r.row, r.column) for r in report if r.subarray == subarray}
    return len(cells) / total


# ----------------------------------------------------------------- bisection
@dataclass(frozen=True)
class SearchResult:
    subarray_id: int
    time_to_first_flip: Optional[float]  # None: nothing within the cap
    iterations: int
    hammer_count: Optional[int] = None

    @property
    def found(self) -> bool:
        return self.time_to_first_flip is not None


def bisect_time_to_first_flip(array: DramArray, spec: ExperimentSpec, subarray: int, *,
                              repeats: int = 5, cap: float = SEARCH_CAP,
                              retention_profile: RetentionProfile | None = None,
                              exclusion_radius: int = 8) -> SearchResult:
    """Minimum activation count that flips a cell in ``subarray``, as time.

    Bisects over the activation count in [1, cap / loop period]; a probe
    re-initializes the array, runs that many ACT/PRE pairs, and checks for
    filtered column-disturb flips in the subarray.  The search stops when a
    new minimum differs from the previous one by less than 1 %.  Runs
    ``repeats`` searches and keeps the smallest count.
    """
    work = array.copy()
    period = spec.timings.loop_period
    hi_cap = count_fits(cap, period)
    iterations = 0

    def probe(count: int) -> bool:
        rows = prepare(work, spec)
        stream = access_stream(work, spec, rows, pairs=count)
        report = execute(work, stream, spec.timings, spec.temperature)
        hits = filter_known_failures(
            report.by_cause(Cause.COLUMN_DISTURB).in_subarray(subarray),
            retention_profile, rows, cap, exclusion_radius)
        return len(hits) > 0

    if hi_cap < 1 or not probe(hi_cap):
        return SearchResult(subarray, None, 1)
    best = None
    for _ in range(repeats):
        lo, hi, prev = 0, hi_cap, hi_cap
        while hi - lo > 1:
            mid = (lo + hi) // 2
            iterations += 1
            if probe(mid):
                hi = mid
                if abs(prev - hi) < 0.01 * prev:
                    break
                prev = hi
            else:
                lo = mid
        best = hi if best is None else min(best, hi)
    return SearchResult(subarray, best * period, iterations, best)


# -------------------------------------------------------- reverse engineering
def reverse_engineer_subarrays(array: DramArray, bank: int = 0, exhaustive: bool = False) -> list[tuple[int, int]]:
    """Recover subarray row ranges using only RowClone, row writes and reads.

    Probing adjacent pairs suffices because subarrays are contiguous row
    ranges; ``exhaustive`` probes every (src, dst) pair instead and checks
    that the same-subarray relation is an equivalence of contiguous blocks.
    """
    work = array.copy()
    R, C = work.rows, work.columns
    ones = np.ones(C, np.uint8)
    marker = DataPattern(0xA5).bits(C)

    def same(src: int, dst: int) -> bool:
        work.write_row(src, marker, bank)
        work.write_row(dst, marker ^ ones, bank)
        rowclone(work, src, dst, bank)
        return bool(np.array_equal(work.read_row(dst, bank), marker))

    if not exhaustive:
        cuts = [r for r in range(R - 1) if not same(r, r + 1)]
    else:
        label = -np.ones(R, int)
        n = 0
        for src in range(R):
            if label[src] >= 0:
                continue
            label[src] = n
            for dst in range(src + 1, R):
                if label[dst] < 0 and same(src, dst):
                    label[dst] = n
            n += 1
        if np.any(np.diff(label) < 0) or np.any(np.diff(label) > 1):
            raise InputError("RowClone groups are not contiguous row ranges")
        cuts = [int(r) for r in np.flatnonzero(np.diff(label))]
    starts = [0] + [c + 1 for c in cuts]
    ends = cuts + [R - 1]
    return list(zip(starts, ends))


# --------------------------------------------------------------------- sweep
METRICS = ("time_to_first_flip", "blast_radius", "fraction_cells")
SWEEP_KEYS = ("temperature", "t_agg_on", "pattern", "access", "location", "refresh_interval")
RELATIONS = (("lower", -1), ("aggressor", 0), ("upper", 1))


def _apply(spec: ExperimentSpec, key: str, value, temperature_profile: str) -> ExperimentSpec:
    if key == "temperature":
        return replace(spec, temperature=Temperature.preset(temperature_profile, float(value)))
    if key == "t_agg_on":
        return replace(spec, timings=spec.timings.with_(t_agg_on=float(value)))
    if key == "pattern":
        return replace(spec, pattern=DataPattern.parse(value), victim_pattern=None)
    if key == "access":
        return replace(spec, access=str(value))
    if key == "location":
        return replace(spec, location=value)
    if key == "refresh_interval":
        return replace(spec, refresh_interval=float(value))
    raise ConfigurationError(f"unknown sweep key {key!r}")


def sweep_points(grid: dict) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigurationError("sweep grid is empty")
    for k in grid:
        if k not in SWEEP_KEYS:
            raise ConfigurationError(f"unknown sweep key {k!r}")
    keys = sorted(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def run_point(array: DramArray, spec: ExperimentSpec, metrics: Sequence[str],
              retention_repeats: int = 50, exclusion_radius: int = 8) -> dict:
    """All requested metrics for one configuration, per related subarray."""
    out: dict = {}
    agg = aggressor_rows(array, spec)
    k = array.subarray_of(agg[0])
    n_sub = len(array.geometry.sizes)
    need_profile = any(m in metrics for m in METRICS)
    search_profile = interval_profile = None
    if need_profile:
        search_profile = profile_retention(array, SEARCH_CAP, spec.temperature, repeats=retention_repeats)
        if math.isclose(spec.refresh_interval, SEARCH_CAP):
            interval_profile = search_profile
        else:
            interval_profile = profile_retention(array, spec.refresh_interval, spec.temperature,
                                                 repeats=retention_repeats)
    report = None
    if "blast_radius" in metrics or "fraction_cells" in metrics:
        work = array.copy()
        raw, rows = run_experiment(work, spec)
        report = filter_known_failures(raw.by_cause(Cause.COLUMN_DISTURB), interval_profile, rows,
                                       spec.refresh_interval, exclusion_radius)
    for name, off in RELATIONS:
        q = k + off
        if not 0 <= q < n_sub:
            for m in metrics:
                out[f"{m}_{name}"] = ""
            continue
        if "time_to_first_flip" in metrics:
            res = bisect_time_to_first_flip(array, spec, q, retention_profile=search_profile,
                                            exclusion_radius=exclusion_radius)
            out[f"time_to_first_flip_{name}"] = "" if not res.found else repr(res.time_to_first_flip)
        if "blast_radius" in metrics:
            out[f"blast_radius_{name}"] = blast_radius(report, q)
        if "fraction_cells" in metrics:
            out[f"fraction_cells_{name}"] = repr(fraction_cells_with_flips(report, q, array))
    return out


def run_sweep(array_factory: Callable[[], DramArray], base: ExperimentSpec, grid: dict,
              metrics: Sequence[str] = METRICS, temperature_profile: str = "flat",
              threads: int = 1, retention_repeats: int = 50, exclusion_radius: int = 8) -> list[dict]:
    """Cartesian product of ``grid`` applied to ``base``; one row per point, sorted by grid key."""
    for m in metrics:
        if m not in METRICS:
            raise ConfigurationError(f"unknown metric {m!r}")
    if not metrics:
        raise ConfigurationError("metric set is empty")
    points = sweep_points(grid)

    def one(point: dict) -> dict:
        spec = base
        for key, value in point.items():
            spec = _apply(spec, key, value, temperature_profile)
        row = {k: point[k] for k in sorted(point)}
        row.update(run_point(array_factory(), spec, metrics, retention_repeats, exclusion_radius))
        return row

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, points))
    else:
        rows = [one(p) for p in points]
    return sorted(rows, key=lambda r: tuple(_sort_key(r[k]) for k in sorted(points[0])))


def _sort_key(v):
    return (0, float(v), "") if isinstance(v, (int, float)) else (1, 0.0, str(v))
