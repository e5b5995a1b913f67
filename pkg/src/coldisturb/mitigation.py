"""Refresh-based mitigations: rate scaling, PRVR, and retention-aware (RAIDR) refresh.

Each policy turns into a refresh :class:`CommandStream`; ``verify_policy``
merges it with an aggression stream and runs the engine end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .array import DramArray, DramGeometry
from .engine import BitflipReport, Cause, Engine
from .errors import InputError
from .rng import hash_keys
from .timing import ALL_BANKS, Block, Command, CommandStream, Kind, MS, Temperature, TimingParams, count_fits

BLOOM_BITS = 8192
BLOOM_HASHES = 6
BLOOM_SEED = 0xC0FFEE


class BitmapRowSet:
    """Exact weak-row set, one bit per row."""

    variant = "bitmap"

    def __init__(self, n_rows: int):
        self.bits = np.zeros(n_rows, dtype=bool)

    def add(self, row: int) -> None:
        self.bits[row] = True

    def add_many(self, rows) -> None:
        self.bits[np.asarray(rows, dtype=np.int64)] = True

    def __contains__(self, row: int) -> bool:
        return bool(self.bits[row])

    def query_many(self, rows) -> np.ndarray:
        return self.bits[np.asarray(rows, dtype=np.int64)]

    def __len__(self) -> int:
        return int(self.bits.sum())


class BloomRowSet:
    """Bloom filter over row addresses; false positives possible, false negatives not."""

    variant = "bloom"

    def __init__(self, m: int = BLOOM_BITS, k: int = BLOOM_HASHES, seed: int = BLOOM_SEED):
        if m < 1 or k < 1:
            raise InputError("bloom filter needs m >= 1 and k >= 1")
        self.m, self.k, self.seed = m, k, seed
        self.bits = np.zeros(m, dtype=bool)
        self.inserted = 0

    def _positions(self, rows) -> np.ndarray:
        keys = np.atleast_1d(np.asarray(rows, dtype=np.uint64))
        return np.stack([hash_keys(self.seed, i, keys) % np.uint64(self.m) for i in range(self.k)]).astype(np.int64)

    def add(self, row: int) -> None:
        self.add_many([row])

    def add_many(self, rows) -> None:
        rows = np.asarray(rows)
        if rows.size:
            self.bits[self._positions(rows).ravel()] = True
            self.inserted += int(rows.size)

    def __contains__(self, row: int) -> bool:
        return bool(self.query_many([row])[0])

    def query_many(self, rows) -> np.ndarray:
        return self.bits[self._positions(rows)].all(axis=0)

    def expected_fp_rate(self, n: int | None = None) -> float:
        n = self.inserted if n is None else n
        return (1.0 - math.exp(-self.k * n / self.m)) ** self.k


WeakRowSet = Union[BitmapRowSet, BloomRowSet]


@dataclass(frozen=True)
class PeriodicPolicy:
    window: float = 32 * MS

    def __post_init__(self):
        if not self.window > 0:
            raise InputError("refresh window must be positive")


@dataclass(frozen=True)
class PrvrPolicy:
    t_first: float
    n_victims: Optional[int] = None
    trigger_fraction: float = 0.5
    base_window: float = 32 * MS

    def __post_init__(self):
        if not self.t_first > 0:
            raise InputError("t_first must be positive")
        if not 0.0 <= self.trigger_fraction < 1.0:
            raise InputError("trigger_fraction must be in [0, 1)")


@dataclass(frozen=True)
class RaidrPolicy:
    weak: object
    t_weak: float = 64 * MS
    t_strong: float = 1024 * MS

    def __post_init__(self):
        if not 0 < self.t_weak <= self.t_strong:
            raise InputError("RAIDR needs 0 < t_weak <= t_strong")


# ---------------------------------------------------------------- streams
def periodic_refresh_stream(policy: PeriodicPolicy | float, duration: float,
                            timings: TimingParams | None = None) -> CommandStream:
    """REF_all every window / refs_per_window."""
    window = policy.window if isinstance(policy, PeriodicPolicy) else float(policy)
    timings = timings or TimingParams()
    t_refi = window / timings.refs_per_window
    n = count_fits(duration, t_refi)
    if n == 0:
        return CommandStream(duration=max(duration, 0.0))
    times = np.arange(n) * t_refi
    blk = Block(times, np.full(n, Kind.REF_ALL, np.int8), np.full(n, -1, np.int64),
                np.full(n, ALL_BANKS, np.int64), np.zeros(n))
    return CommandStream([blk], duration)


def _victim_rows(geometry: DramGeometry, aggressor: int) -> list[int]:
    starts = np.cumsum((0,) + geometry.sizes)
    k = int(np.searchsorted(starts, aggressor, side="right") - 1)
    order = [k, k - 1, k + 1]
    rows: list[int] = []
    for q in order:
        if 0 <= q < len(geometry.sizes):
            rows.extend(range(int(starts[q]), int(starts[q + 1])))
    return rows


def prvr_stream(trace: CommandStream, geometry: DramGeometry, policy: PrvrPolicy,
                timings: TimingParams | None = None) -> CommandStream:
    """Proactive REF_row passes over every potential victim of each aggressor.

    An aggressor's accounting adds its open time plus t_rp per activation;
    the first pass starts the moment it reaches ``trigger_fraction * t_first``
    and is squeezed into the remaining ``(1 - trigger_fraction) * t_first``.
    Later passes are spread evenly over ``t_first`` each and continue until
    the trace ends.
    """
    timings = timings or TimingParams()
    blk = trace.to_block()
    end = trace.end
    acts = np.flatnonzero(blk.kind == Kind.ACT)
    if not len(acts):
        return CommandStream(duration=end)
    # pair each ACT with the PRE that closes it, per bank
    closes: dict[int, int] = {}
    open_at: dict[int, int] = {}
    for i in np.flatnonzero((blk.kind == Kind.ACT) | (blk.kind == Kind.PRE)):
        b = int(blk.bank[i])
        if blk.kind[i] == Kind.ACT:
            open_at[b] = int(i)
        elif b in open_at:
            closes[open_at.pop(b)] = int(i)
    per_agg: dict[tuple[int, int], list[tuple[float, float]]] = {}
    for i in acts:
        j = closes.get(int(i))
        t_close = float(blk.time[j]) if j is not None else end
        per_agg.setdefault((int(blk.bank[i]), int(blk.row[i])), []).append((float(blk.time[i]), t_close))
    blocks = []
    for (bank, row), spans in sorted(per_agg.items()):
        victims = np.asarray(_victim_rows(geometry, row), dtype=np.int64)
        if policy.n_victims is not None:
            if policy.n_victims > len(victims):
                raise InputError(f"{policy.n_victims} victims exceed the {len(victims)} rows of three subarrays")
            victims = victims[:policy.n_victims]
        n = len(victims)
        if n == 0:
            continue
        need = policy.trigger_fraction * policy.t_first
        acc, t_trig = 0.0, None
        for t_open, t_close in spans:
            if acc + (t_close - t_open) >= need:
                t_trig = t_open + max(need - acc, 0.0)
                break
            acc += (t_close - t_open) + timings.t_rp
        if t_trig is None:
            continue
        first_span = (1.0 - policy.trigger_fraction) * policy.t_first
        starts = [t_trig]
        spacing = [first_span / n]
        t = t_trig + first_span
        while t < end:
            starts.append(t)
            spacing.append(policy.t_first / n)
            t += policy.t_first
        starts_a = np.asarray(starts)[:, None]
        times = (starts_a + np.arange(n)[None, :] * np.asarray(spacing)[:, None]).ravel()
        rows = np.tile(victims, len(starts))
        keep = times < end
        m = int(keep.sum())
        blocks.append(Block(times[keep], np.full(m, Kind.REF_ROW, np.int8), rows[keep],
                            np.full(m, bank, np.int64), np.zeros(m)))
    merged = Block.concat(blocks)
    if not len(merged):
        return CommandStream(duration=end)
    order = np.lexsort((merged.row, merged.bank, merged.time))
    return CommandStream([merged.take(order)], end)


def raidr_stream(policy: RaidrPolicy, duration: float, geometry: DramGeometry) -> CommandStream:
    """REF_row each weak row every t_weak and every other row every t_strong.

    Row ``i`` of a bank starts at phase ``i / rows`` of its period.  Rows are
    keyed ``bank * rows_per_bank + row`` in the weak set.
    """
    R = geometry.rows_per_bank
    times, rows, banks = [], [], []
    for b in range(geometry.banks):
        keys = b * R + np.arange(R)
        weak = np.asarray(policy.weak.query_many(keys), dtype=bool)
        for mask, period in ((weak, policy.t_weak), (~weak, policy.t_strong)):
            idx = np.flatnonzero(mask)
            if not len(idx):
                continue
            phase = idx * period / R
            reps = np.floor((duration - phase) / period * (1 + 1e-12)).astype(np.int64) + 1
            reps = np.where(phase < duration, np.maximum(reps, 0), 0)
            # drop the repetition that would land exactly on duration
            rr = np.repeat(idx, reps)
            k = np.arange(int(reps.sum())) - np.repeat(np.cumsum(reps) - reps, reps)
            tt = np.repeat(phase, reps) + k * period
            keep = tt < duration
            times.append(tt[keep])
            rows.append(rr[keep])
            banks.append(np.full(int(keep.sum()), b))
    if not times:
        return CommandStream(duration=duration)
    t = np.concatenate(times)
    r = np.concatenate(rows).astype(np.int64)
    b = np.concatenate(banks).astype(np.int64)
    order = np.lexsort((r, b, t))
    n = len(t)
    blk = Block(t[order], np.full(n, Kind.REF_ROW, np.int8), r[order], b[order], np.zeros(n))
    return CommandStream([blk], duration)


def classify_weak_rows(failure_times: np.ndarray, t_strong: float, variant: str = "bitmap",
                       bloom_seed: int = BLOOM_SEED) -> WeakRowSet:
    """Rows with any cell failing within ``t_strong``; rows keyed bank * rows + row.

    ``failure_times`` is a (banks, rows, columns) array of per-cell failure
    times (inf when the cell never failed during profiling).
    """
    ft = np.asarray(failure_times)
    banks, R, _ = ft.shape
    weak = np.flatnonzero((ft <= t_strong).any(axis=2).ravel())
    out: WeakRowSet
    if variant == "bitmap":
        out = BitmapRowSet(banks * R)
    elif variant == "bloom":
        out = BloomRowSet(seed=bloom_seed)
    else:
        raise InputError(f"unknown weak-row set variant {variant!r}")
    out.add_many(weak)
    return out


# ------------------------------------------------------------ verification
def merge_refresh_first(aggression: CommandStream, refresh: CommandStream,
                        timings: TimingParams, banks: int) -> tuple[CommandStream, int]:
    """Interleave refresh into aggression; refresh keeps its timestamps.

    A refresh that lands while a row is open precharges the bank, refreshes,
    and reopens the row when the refresh completes; the rest of the
    aggression stream slips by the refresh latency.  An aggression command
    that would start inside a refresh waits for it.  Returns the merged
    stream and the number of such conflicts.
    """
    agg = aggression.to_block()
    ref = refresh.to_block()
    out_t, out_k, out_r, out_b = [], [], [], []
    open_row = [-1] * banks
    reopen = [-1] * banks
    busy = [0.0] * banks
    delay = 0.0
    conflicts = 0
    stalled = -1
    i = j = 0
    na, nr = len(agg), len(ref)

    def emit(t, k, r, b):
        out_t.append(t), out_k.append(k), out_r.append(r), out_b.append(b)

    def flush(b, t):
        if reopen[b] >= 0 and busy[b] <= t:
            emit(busy[b], Kind.ACT, reopen[b], b)
            open_row[b], reopen[b] = reopen[b], -1

    while i < na or j < nr:
        ta = agg.time[i] + delay if i < na else math.inf
        tr = ref.time[j] if j < nr else math.inf
        if tr <= ta:
            k = int(ref.kind[j])
            b0 = int(ref.bank[j])
            targets = range(banks) if b0 == ALL_BANKS else [b0]
            dur = timings.t_rfc if k == Kind.REF_ALL else timings.t_row_refresh
            hit = False
            for b in targets:
                flush(b, tr)
                if open_row[b] >= 0:
                    emit(tr, Kind.PRE, -1, b)
                    reopen[b], open_row[b] = open_row[b], -1
                    hit = True
                busy[b] = max(busy[b], tr + dur)
            if k != Kind.IDLE:
                emit(tr, k, int(ref.row[j]), b0)
            if hit:
                conflicts += 1
                delay += dur
            j += 1
            continue
        b = int(agg.bank[i])
        k = int(agg.kind[i])
        if k == Kind.IDLE:
            i += 1
            continue
        if ta < busy[b]:
            # stall, then re-queue so refreshes inside the stall go first
            delay += busy[b] - ta
            if stalled != i:
                conflicts += 1
                stalled = i
            continue
        flush(b, ta)
        emit(ta, k, int(agg.row[i]), b)
        open_row[b] = int(agg.row[i]) if k == Kind.ACT else -1
        i += 1
    for b in range(banks):
        if reopen[b] >= 0:
            emit(busy[b], Kind.ACT, reopen[b], b)
    n = len(out_t)
    t = np.asarray(out_t, float)
    order = np.argsort(t, kind="stable")
    blk = Block(t, np.asarray(out_k, np.int8), np.asarray(out_r, np.int64),
                np.asarray(out_b, np.int64), np.zeros(n)).take(order)
    end = max(aggression.end, refresh.end)
    return CommandStream([blk] if n else [], end), conflicts


@dataclass
class PolicyReport:
    policy: str
    flips: BitflipReport
    conflicts: int
    ref_all: int
    ref_row: int
    row_refreshes: int

    @property
    def violations(self) -> int:
        return len(self.flips.filter(lambda r: r.cause != Cause.HAMMER))


def refresh_stream_for(policy, duration: float, geometry: DramGeometry, timings: TimingParams,
                       aggression: CommandStream | None = None) -> CommandStream:
    if isinstance(policy, PeriodicPolicy):
        return periodic_refresh_stream(policy, duration, timings)
    if isinstance(policy, PrvrPolicy):
        base = periodic_refresh_stream(PeriodicPolicy(policy.base_window), duration, timings)
        proactive = prvr_stream(aggression or CommandStream(), geometry, policy, timings)
        return CommandStream.merge(base, proactive)
    if isinstance(policy, RaidrPolicy):
        return raidr_stream(policy, duration, geometry)
    raise InputError(f"unknown refresh policy {policy!r}")


def policy_name(policy) -> str:
    if isinstance(policy, PeriodicPolicy):
        return f"periodic({policy.window * 1e3:g}ms)"
    if isinstance(policy, PrvrPolicy):
        return "prvr"
    if isinstance(policy, RaidrPolicy):
        return f"raidr-{policy.weak.variant}"
    return type(policy).__name__


def verify_policy(array: DramArray, aggression: CommandStream, policy, duration: float,
                  timings: TimingParams | None = None, temperature: Temperature | None = None) -> PolicyReport:
    """Run aggression plus the policy's refresh on ``array``; every flip is reported."""
    timings = timings or TimingParams()
    geometry = array.geometry
    refresh = refresh_stream_for(policy, duration, geometry, timings, aggression)
    merged, conflicts = merge_refresh_first(aggression, refresh, timings, array.banks)
    blk = merged.to_block()
    keep = blk.time < duration
    stream = CommandStream([blk.take(keep)] if keep.any() else [], duration)
    flips = Engine(array, timings, temperature).run(stream)
    n_all = refresh.count(Kind.REF_ALL)
    n_row = refresh.count(Kind.REF_ROW)
    # REF_all batches: each of refs_per_window commands covers rows/refs_per_window rows
    per_bank = n_all * geometry.rows_per_bank / timings.refs_per_window
    return PolicyReport(policy_name(policy), flips, conflicts, n_all, n_row,
                        int(round(per_bank * geometry.banks)) + n_row)
