"""Damage-accrual fault engine.

Between two consecutive commands a bank is in one *state*: either
precharged (every bitline at VDD/2) or with one row open.  An open row
drives every bitline of its own subarray, and the shared half of each
neighbor's bitlines, to the voltage of its own cell on that bitline (VDD
for a charged cell, GND otherwise).  A charged, unflipped cell exposed to
voltage ``v`` for ``dt`` consumes ``dt / (s(T) * t_flip(v))`` of its life;
it discharges when the consumed fraction reaches 1.  Cells of the open row
are being restored and accrue nothing; an ACT or refresh resets a row's
damage and hammer dose.

Because rates are constant inside an interval, damage is piecewise linear
in time.  The engine therefore works on cumulative per-state exposure
times: a block of commands is reduced to a ``(boundaries, states)`` matrix,
every cell's damage at any boundary is a dot product with its per-state
rates, and the exact flip instant is recovered by a vectorized bisection
over boundaries followed by a linear solve inside one interval.  Periodic
loops are advanced in closed form after two explicit periods.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .array import DataPattern, DramArray, DramGeometry
from .errors import InputError, ProtocolError
from .timing import (
    ALL_BANKS, Block, Command, CommandStream, Kind, Loop, Temperature, TimingParams, count_fits,
)

GND, HALF, VDD, ZERO = 0, 1, 2, 3
CHUNK = 16384


class Cause(str, Enum):
    COLUMN_DISTURB = "column-disturb"
    RETENTION = "retention-baseline"
    HAMMER = "rowhammer-rowpress"


@dataclass(frozen=True)
class BitflipRecord:
    bank: int
    subarray: int
    row: int
    column: int
    time: float
    direction: str
    cause: Cause

    @property
    def coordinate(self) -> tuple[int, int, int, int]:
        return (self.bank, self.subarray, self.row, self.column)


@dataclass
class BitflipReport:
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def extend(self, records: Iterable[BitflipRecord]) -> None:
        self.records.extend(records)

    def sort(self) -> None:
        self.records.sort(key=lambda r: (r.time, r.bank, r.row, r.column))

    def filter(self, pred) -> "BitflipReport":
        return BitflipReport([r for r in self.records if pred(r)])

    def in_subarray(self, subarray: int, bank: int | None = None) -> "BitflipReport":
        return self.filter(lambda r: r.subarray == subarray and (bank is None or r.bank == bank))

    def by_cause(self, cause: Cause) -> "BitflipReport":
        return self.filter(lambda r: r.cause == cause)

    def first_time(self) -> float:
        return min((r.time for r in self.records), default=math.inf)


def avg_column_voltage(t_agg_on: float, t_rp: float, dp_col: float, vdd: float = 1.0) -> float:
    """Time-weighted bitline voltage of a press/precharge loop."""
    if not 0.0 <= dp_col <= vdd:
        raise InputError(f"dp_col {dp_col} outside [0, {vdd}]")
    if t_agg_on < 0 or t_rp < 0 or t_agg_on + t_rp <= 0:
        raise InputError("t_agg_on + t_rp must be positive")
    return (t_agg_on * dp_col + (vdd / 2) * t_rp) / (t_agg_on + t_rp)


def rowclone(array: DramArray, src: int, dst: int, bank: int = 0) -> bool:
    """Two back-to-back activations; copies ``src`` into ``dst`` only within a subarray."""
    array.check_row(src, bank)
    array.check_row(dst, bank)
    if src == dst:
        return True
    if array.subarray_of(src) != array.subarray_of(dst):
        return False
    array.bits[bank, dst] = array.bits[bank, src]
    array._reset_rows(bank, [dst])
    array.damage[bank, src] = np.where(np.isnan(array.flipped_at[bank, src]), 0.0, array.damage[bank, src])
    array.hammer_dose[bank, src] = 0.0
    return True


def build_access_pattern(geometry: DramGeometry, kind: str, rows: Sequence[int], timings: TimingParams,
                         total_duration: float, patterns: Sequence | None = None,
                         bank: int = 0, start: float = 0.0, pairs: int | None = None) -> CommandStream:
    """ACT/PRE loop covering ``total_duration`` (or exactly ``pairs`` ACT/PRE pairs).

    ``single``: ACT R, PRE after t_agg_on, next ACT after t_rp.
    ``two``: the same with activations alternating between R1 and R2.
    """
    rows = [int(r) for r in rows]
    sizes = geometry.sizes
    row_sub = np.repeat(np.arange(len(sizes)), sizes)
    for r in rows:
        if not 0 <= r < geometry.rows_per_bank:
            raise InputError(f"aggressor row {r} out of range")
    period = timings.loop_period
    n = count_fits(total_duration, period) if pairs is None else int(pairs)
    stream = CommandStream(duration=start + (total_duration if pairs is None else n * period))
    if kind in ("single", "single-aggressor"):
        if len(rows) != 1:
            raise InputError("single-aggressor pattern takes exactly one row")
        body = Block.from_commands([Command.act(0.0, rows[0], bank), Command.pre(timings.t_agg_on, bank)])
        if n:
            stream.append(Loop(body, period, n, start))
        return stream
    if kind not in ("two", "two-aggressor"):
        raise InputError(f"unknown access pattern kind {kind!r}")
    if len(rows) != 2 or rows[0] == rows[1]:
        raise InputError("two-aggressor pattern takes two distinct rows")
    if row_sub[rows[0]] != row_sub[rows[1]]:
        raise InputError("two-aggressor rows must be in the same subarray")
    if patterns is not None:
        p1, p2 = (DataPattern.parse(p) for p in patterns)
        if p1.byte ^ p2.byte != 0xFF:
            raise InputError("two-aggressor patterns must be complementary")
    r1, r2 = rows
    body = Block.from_commands([
        Command.act(0.0, r1, bank), Command.pre(timings.t_agg_on, bank),
        Command.act(period, r2, bank), Command.pre(period + timings.t_agg_on, bank),
    ])
    if n // 2:
        stream.append(Loop(body, 2 * period, n // 2, start))
    if n % 2:
        tail = start + (n // 2) * 2 * period
        stream.append(Block.from_commands([Command.act(tail, r1, bank),
                                           Command.pre(tail + timings.t_agg_on, bank)]))
    return stream


@dataclass
class _Span:
    """One bank's command block reduced to exposure bookkeeping."""

    bounds: np.ndarray          # (n+2,) times: begin, each command, end
    state_rows: np.ndarray      # (S,) open row per state, -1 = precharged
    interval_state: np.ndarray  # (n+1,) state index per interval
    cum: np.ndarray             # (n+2, S) cumulative exposure at each boundary
    reset_rows: np.ndarray      # row reset at boundary reset_at (parallel arrays)
    reset_at: np.ndarray
    dose_rows: np.ndarray       # hammer dose added to row at boundary dose_at
    dose_at: np.ndarray
    dose_amt: np.ndarray
    act_rows: np.ndarray        # ACT command row / boundary, for conflict detection
    act_at: np.ndarray
    end_open: int
    end_open_since: float
    refs: int


class Engine:
    """Executes command streams against one :class:`DramArray` (single owner)."""

    def __init__(self, array: DramArray, timings: TimingParams | None = None,
                 temperature: Temperature | None = None, hammer_radius: int = 1):
        if hammer_radius not in (1, 2):
            raise InputError("hammer_radius must be 1 or 2")
        self.array = array
        self.timings = timings or TimingParams()
        self.temperature = temperature or Temperature()
        self.hammer_radius = hammer_radius
        banks = array.banks
        self.open_row = [-1] * banks
        self.open_since = [0.0] * banks
        self.now = [0.0] * banks
        self.ref_counter = [0] * banks
        self._scale = self.temperature.scale
        self._row_sub = array.row_subarray
        self._n_sub = len(array.geometry.sizes)
        self._cols = np.arange(array.columns)

    # ------------------------------------------------------------------ rates
    def _level_rates(self, bank: int) -> np.ndarray:
        a = self.array
        live = a.charged()[bank] & np.isnan(a.flipped_at[bank])
        out = np.zeros((4,) + live.shape)
        with np.errstate(divide="ignore"):
            for lvl, t in ((GND, a.t_gnd), (HALF, a.t_half), (VDD, a.t_vdd)):
                out[lvl] = np.where(live, 1.0 / (self._scale * t[bank]), 0.0)
        return out

    def _state_tables(self, bank: int, state_rows: np.ndarray) -> np.ndarray:
        """(S, 5, C) level per relation: 0 other, 1 same, 2 lower nbr, 3 upper nbr, 4 own row."""
        C = self.array.columns
        charged = self.array.charged()[bank]
        tables = np.full((len(state_rows), 5, C), HALF, dtype=np.int64)
        even, odd = self._cols % 2 == 0, self._cols % 2 == 1
        for s, r in enumerate(state_rows):
            if r < 0:
                continue
            lev = np.where(charged[r], VDD, GND)
            tables[s, 1] = lev
            tables[s, 2, odd] = lev[even]
            tables[s, 3, even] = lev[odd]
            tables[s, 4] = ZERO
        return tables

    def _relations(self, rows: np.ndarray, state_rows: np.ndarray) -> np.ndarray:
        """(m, S) relation index of each row to each state's open row."""
        q = self._row_sub[rows][:, None]
        k = np.where(state_rows >= 0, self._row_sub[np.maximum(state_rows, 0)], -10)[None, :]
        rel = np.zeros((len(rows), len(state_rows)), dtype=np.int64)
        rel[q == k] = 1
        rel[q == k - 1] = 2
        rel[q == k + 1] = 3
        rel[rows[:, None] == state_rows[None, :]] = 4
        rel[:, state_rows < 0] = 0
        return rel

    def _rate_vectors(self, rl, tables, rows, cols, state_rows):
        """(m, S) per-state rates and (m, S) perturbing mask for individual cells."""
        rel = self._relations(rows, state_rows)
        lev = tables[np.arange(len(state_rows))[None, :], rel, cols[:, None]]
        rates = rl[lev, rows[:, None], cols[:, None]]
        return rates, (lev == GND) | (lev == VDD)

    def _segment_damage(self, rl, tables, state_rows, rows, dcum) -> np.ndarray:
        """Damage added to whole rows over spans with per-state exposure ``dcum`` (m, S)."""
        out = dcum.sum(axis=1)[:, None] * rl[HALF][rows]
        if not len(rows):
            return out
        rel = self._relations(rows, state_rows)
        for s, r in enumerate(state_rows):
            if r < 0:
                continue
            sel = np.flatnonzero((dcum[:, s] > 0) & (rel[:, s] > 0))
            if not len(sel):
                continue
            rr = rows[sel]
            lev = tables[s][rel[sel, s]]
            rate = rl[lev, rr[:, None], self._cols[None, :]]
            out[sel] += dcum[sel, s][:, None] * (rate - rl[HALF][rr])
        return out

    # --------------------------------------------------------------- parsing
    def _build_span(self, bank: int, blk: Block, t_end: float) -> _Span:
        t = blk.time
        kind = blk.kind
        row = blk.row
        n = len(t)
        t0 = self.now[bank]
        if n and (t[0] < t0 - 1e-15 or np.any(np.diff(t) < 0)):
            raise ProtocolError("command timestamps must be non-decreasing")
        if t_end < (t[-1] if n else t0) - 1e-15:
            raise ProtocolError("block end precedes its last command")
        init_open = self.open_row[bank]
        is_act = kind == Kind.ACT
        is_pre = kind == Kind.PRE
        changes = is_act | is_pre
        # open row after each command, by forward-filling the last ACT/PRE
        idx = np.where(changes, np.arange(n), -1)
        idx = np.maximum.accumulate(idx) if n else idx
        new_state = np.where(is_act, row, -1)
        after = np.where(idx >= 0, new_state[np.maximum(idx, 0)], init_open)
        before = np.concatenate(([init_open], after[:-1])) if n else after
        bad = (is_act & (before >= 0)) | (is_pre & (before < 0))
        refs_mask = (kind == Kind.REF_ALL) | (kind == Kind.REF_ROW)
        bad |= refs_mask & (before >= 0)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            what = {Kind.ACT: "ACT while a row is open", Kind.PRE: "PRE with no open row"}.get(
                Kind(int(kind[i])), "refresh while a row is open")
            raise ProtocolError(f"bank {bank}: {what} at t={t[i]:.9g}")
        acts = np.flatnonzero(is_act)
        if np.any((row[acts] < 0) | (row[acts] >= self.array.rows)):
            raise ProtocolError("ACT to a row outside the bank")

        bounds = np.concatenate(([t0], t, [t_end]))
        interval_open = np.concatenate(([init_open], after))
        state_rows, interval_state = np.unique(interval_open, return_inverse=True)
        dt = np.diff(bounds)
        cum = np.zeros((n + 2, len(state_rows)))
        if n + 1:
            onehot = np.zeros((n + 1, len(state_rows)))
            onehot[np.arange(n + 1), interval_state] = dt
            cum[1:] = np.cumsum(onehot, axis=0)

        # row resets: ACT row, REF_ROW row, REF_ALL batches
        r_rows, r_at = [row[acts]], [acts + 1]
        rr = np.flatnonzero(kind == Kind.REF_ROW)
        if len(rr):
            if np.any((row[rr] < 0) | (row[rr] >= self.array.rows)):
                raise ProtocolError("REF_row to a row outside the bank")
            r_rows.append(row[rr])
            r_at.append(rr + 1)
        ra = np.flatnonzero(kind == Kind.REF_ALL)
        R, W = self.array.rows, self.timings.refs_per_window
        if len(ra):
            c = (self.ref_counter[bank] + np.arange(len(ra))) % W
            lo, hi = (c * R) // W, ((c + 1) * R) // W
            width = hi - lo
            total = int(width.sum())
            if total:
                owner = np.repeat(np.arange(len(ra)), width)
                offset = np.arange(total) - np.repeat(np.cumsum(width) - width, width)
                r_rows.append(lo[owner] + offset)
                r_at.append(ra[owner] + 1)
        reset_rows = np.concatenate(r_rows).astype(np.int64)
        reset_at = np.concatenate(r_at).astype(np.int64)

        # hammer dose at each PRE (and for an ACT still open at block end: none yet)
        open_since = np.where(is_act, t, np.nan)
        last_act = np.maximum.accumulate(np.where(is_act, np.arange(n), -1)) if n else np.zeros(0, int)
        pres = np.flatnonzero(is_pre)
        d_rows, d_at, d_amt = [], [], []
        if len(pres):
            la = last_act[pres]
            opened = np.where(la >= 0, open_since[np.maximum(la, 0)], self.open_since[bank])
            closed_row = before[pres]
            amt = 1.0 + (t[pres] - opened) / self.timings.t_ras
            sub = self._row_sub
            for d in range(1, self.hammer_radius + 1):
                for sign in (-1, 1):
                    tgt = closed_row + sign * d
                    ok = (tgt >= 0) & (tgt < R)
                    ok[ok] &= sub[tgt[ok]] == sub[closed_row[ok]]
                    d_rows.append(tgt[ok])
                    d_at.append(pres[ok] + 1)
                    d_amt.append(amt[ok])
        cat = lambda xs, dt_: np.concatenate(xs).astype(dt_) if xs else np.zeros(0, dt_)
        end_open = int(interval_open[-1])
        if n and end_open >= 0:
            la_end = int(last_act[-1])
            end_since = float(t[la_end]) if la_end >= 0 else self.open_since[bank]
        else:
            end_since = self.open_since[bank]
        return _Span(bounds, state_rows.astype(np.int64), interval_state, cum, reset_rows, reset_at,
                     cat(d_rows, np.int64), cat(d_at, np.int64), cat(d_amt, float),
                     row[acts].astype(np.int64), (acts + 1).astype(np.int64), end_open, end_since, len(ra))

    # ------------------------------------------------------------ evaluation
    def _evaluate(self, bank: int, sp: _Span):
        """Flips and end-of-span state for one span.  Does not mutate the array."""
        a = self.array
        R, C = a.rows, a.columns
        rl = self._level_rates(bank)
        tables = self._state_tables(bank, sp.state_rows)
        nb = len(sp.bounds)
        last = nb - 1

        # segments: (row, a, e, starts_fresh)
        order = np.lexsort((sp.reset_at, sp.reset_rows))
        rr, ra = sp.reset_rows[order], sp.reset_at[order]
        seg_row = [np.arange(R)]
        seg_a = [np.zeros(R, np.int64)]
        seg_fresh = [np.zeros(R, bool)]
        if len(rr):
            seg_row.append(rr)
            seg_a.append(ra)
            seg_fresh.append(np.ones(len(rr), bool))
        seg_row = np.concatenate(seg_row)
        seg_a = np.concatenate(seg_a)
        seg_fresh = np.concatenate(seg_fresh)
        o = np.lexsort((seg_a, seg_row))
        seg_row, seg_a, seg_fresh = seg_row[o], seg_a[o], seg_fresh[o]
        nxt_same = np.concatenate((seg_row[1:] == seg_row[:-1], [False]))
        seg_e = np.where(nxt_same, np.concatenate((seg_a[1:], [last])), last)
        is_last = ~nxt_same

        live = np.isnan(a.flipped_at[bank]) & a.charged()[bank]
        dmg0 = a.damage[bank]
        flip_t = np.full((R, C), np.inf)
        flip_int = np.full((R, C), -1, dtype=np.int64)
        end_damage = dmg0.copy()

        B = 4096
        for s0 in range(0, len(seg_row), B):
            sl = slice(s0, s0 + B)
            rows, sa, se = seg_row[sl], seg_a[sl], seg_e[sl]
            fresh = seg_fresh[sl]
            dcum = sp.cum[se] - sp.cum[sa]
            start = np.where(fresh[:, None], 0.0, dmg0[rows])
            dend = start + self._segment_damage(rl, tables, sp.state_rows, rows, dcum)
            lst = is_last[sl]
            end_damage[rows[lst]] = dend[lst]
            hit = (dend >= 1.0) & live[rows]
            if not hit.any():
                continue
            si, ci = np.nonzero(hit)
            crow = rows[si]
            rates, _ = self._rate_vectors(rl, tables, crow, ci, sp.state_rows)
            dstart = start[si, ci]
            lo, hi = sa[si].copy(), se[si].copy()
            base = sp.cum[lo]
            while True:
                gap = hi - lo > 1
                if not gap.any():
                    break
                mid = np.where(gap, (lo + hi) // 2, lo)
                dm = dstart + np.einsum("ij,ij->i", sp.cum[mid] - base, rates)
                up = gap & (dm >= 1.0)
                hi = np.where(up, mid, hi)
                lo = np.where(gap & ~up, mid, lo)
            dlo = dstart + np.einsum("ij,ij->i", sp.cum[lo] - base, rates)
            st = sp.interval_state[lo]
            r_int = rates[np.arange(len(lo)), st]
            with np.errstate(divide="ignore", invalid="ignore"):
                tf = sp.bounds[lo] + np.maximum(1.0 - dlo, 0.0) / r_int
            tf = np.minimum(np.where(np.isfinite(tf), tf, sp.bounds[hi]), sp.bounds[hi])
            # a cell can cross in several segments; write latest first so the earliest wins
            idx = np.flatnonzero(tf < flip_t[crow, ci])
            idx = idx[np.argsort(-tf[idx], kind="stable")]
            flip_t[crow[idx], ci[idx]] = tf[idx]
            flip_int[crow[idx], ci[idx]] = lo[idx]

        # hammer: per-row dose with resets
        dose0 = a.hammer_dose[bank]
        end_dose = dose0.copy()
        has_reset = np.zeros(R, bool)
        has_reset[sp.reset_rows] = True
        last_reset = np.full(R, -1, np.int64)
        np.maximum.at(last_reset, sp.reset_rows, sp.reset_at)
        end_dose[has_reset] = 0.0
        ham_t = np.full((R, C), np.inf)
        ham_eligible = np.isnan(a.flipped_at[bank]) & (a.charged()[bank] == a.hammer_discharge[bank])
        if len(sp.dose_rows):
            for r in np.unique(sp.dose_rows):
                m = sp.dose_rows == r
                at, amt = sp.dose_at[m], sp.dose_amt[m]
                o = np.argsort(at, kind="stable")
                at, amt = at[o], amt[o]
                resets = np.sort(sp.reset_at[sp.reset_rows == r])
                # a dose and a reset on the same boundary: the reset (ACT) wins only
                # if it is the row's own ACT; doses land at PRE boundaries so they differ.
                seg = np.searchsorted(resets, at, side="right")
                cum = np.cumsum(amt)
                seg_first = np.searchsorted(seg, seg, side="left")
                prior = np.where(seg_first > 0, cum[np.maximum(seg_first - 1, 0)], 0.0)
                dose_after = cum - prior + np.where(seg == 0, dose0[r], 0.0)
                after_last = at > (resets[-1] if len(resets) else -1)
                if len(resets):
                    end_dose[r] = float(dose_after[after_last][-1]) if after_last.any() else 0.0
                else:
                    end_dose[r] = float(dose_after[-1])
                thr = a.rh_threshold[bank, r]
                cells = np.flatnonzero(ham_eligible[r] & np.isfinite(thr))
                if not len(cells):
                    continue
                pmax = np.maximum.accumulate(dose_after)
                k = np.searchsorted(pmax, thr[cells], side="left")
                ok = k < len(pmax)
                ham_t[r, cells[ok]] = sp.bounds[at[k[ok]]]

        return flip_t, flip_int, end_damage, ham_t, end_dose, rl, tables

    def _flip_records(self, bank, sp, flip_t, flip_int, ham_t, rl, tables, cutoff=np.inf):
        a = self.array
        col_first = flip_t <= ham_t
        when = np.minimum(flip_t, ham_t)
        rows, cols = np.nonzero(np.isfinite(when) & (when <= cutoff))
        if not len(rows):
            return [], rows, cols, when
        recs = []
        is_col = col_first[rows, cols] & np.isfinite(flip_t[rows, cols])
        # ties between column and hammer flips go to the hammer cause
        is_col &= flip_t[rows, cols] < ham_t[rows, cols]
        disturbed = a.disturbed[bank, rows, cols].copy()
        ci = np.flatnonzero(is_col & ~disturbed)
        if len(ci):
            rr, cc = rows[ci], cols[ci]
            _, pert = self._rate_vectors(rl, tables, rr, cc, sp.state_rows)
            lo = flip_int[rr, cc]
            exp_before = np.einsum("ij,ij->i", sp.cum[lo] - sp.cum[0], pert.astype(float))
            in_flip = pert[np.arange(len(lo)), sp.interval_state[lo]]
            disturbed[ci] = (exp_before > 0) | in_flip
        bits = a.bits[bank, rows, cols]
        for i in range(len(rows)):
            r, c = int(rows[i]), int(cols[i])
            if is_col[i]:
                cause = Cause.COLUMN_DISTURB if disturbed[i] else Cause.RETENTION
            else:
                cause = Cause.HAMMER
            recs.append(BitflipRecord(bank, int(self._row_sub[r]), r, c, float(when[r, c]),
                                      "1->0" if bits[i] else "0->1", cause))
        return recs, rows, cols, when

    def _update_disturbed(self, bank, sp, tables, upto: int):
        """Mark cells whose bitline was driven off VDD/2 before boundary ``upto``."""
        exp = sp.cum[upto] - sp.cum[0]
        for s, r in enumerate(sp.state_rows):
            if r < 0 or exp[s] <= 0:
                continue
            k = int(self._row_sub[r])
            for rel, q in ((1, k), (2, k - 1), (3, k + 1)):
                if not 0 <= q < self._n_sub:
                    continue
                rng = self.array.subarray_range(q)
                pert = (tables[s, rel] == GND) | (tables[s, rel] == VDD)
                if pert.any():
                    # the open row itself is being restored, not disturbed
                    rows = np.array([x for x in rng if x != r], dtype=np.int64)
                    self.array.disturbed[bank, rows[:, None], np.flatnonzero(pert)[None, :]] = True

    def _commit(self, bank, sp, recs, rows, cols, end_damage, end_dose, tables):
        a = self.array
        if len(rows):
            a.flipped_at[bank, rows, cols] = [r.time for r in recs]
            a.bits[bank, rows, cols] ^= 1
            end_damage[rows, cols] = np.maximum(end_damage[rows, cols], 1.0)
        a.damage[bank] = end_damage
        a.hammer_dose[bank] = end_dose
        self._update_disturbed(bank, sp, tables, len(sp.bounds) - 1)
        self.open_row[bank] = sp.end_open
        self.open_since[bank] = sp.end_open_since
        self.now[bank] = float(sp.bounds[-1])
        self.ref_counter[bank] += sp.refs

    def _run_block(self, bank: int, blk: Block, t_end: float) -> list:
        """Process one bank's explicit commands up to ``t_end``; returns records."""
        out = []
        while True:
            sp = self._build_span(bank, blk, t_end)
            flip_t, flip_int, end_damage, ham_t, end_dose, rl, tables = self._evaluate(bank, sp)
            when = np.minimum(flip_t, ham_t)
            cut = None
            if len(sp.act_rows) and np.isfinite(when).any():
                # a flip in a row that is activated later changes what that row drives
                fr, fc = np.nonzero(np.isfinite(when))
                ft = when[fr, fc]
                act_t = sp.bounds[sp.act_at]
                for r in np.unique(fr):
                    later = act_t[(sp.act_rows == r)]
                    if not len(later):
                        continue
                    tmin = ft[fr == r].min()
                    nxt = later[later >= tmin]
                    if len(nxt):
                        ci = int(sp.act_at[(sp.act_rows == r) & (act_t >= tmin)][0]) - 1
                        cut = ci if cut is None else min(cut, ci)
            if cut is None:
                recs, rows, cols, _ = self._flip_records(bank, sp, flip_t, flip_int, ham_t, rl, tables)
                self._commit(bank, sp, recs, rows, cols, end_damage, end_dose, tables)
                out.extend(recs)
                return out
            prefix, blk = blk.take(slice(0, cut)), blk.take(slice(cut, None))
            out.extend(self._run_block(bank, prefix, float(blk.time[0])))

    def _run_explicit(self, bank: int, blk: Block, t_end: float) -> list:
        out = []
        n = len(blk)
        for s in range(0, max(n, 1), CHUNK):
            part = blk.take(slice(s, s + CHUNK))
            end = float(blk.time[s + CHUNK]) if s + CHUNK < n else t_end
            out.extend(self._run_block(bank, part, end))
        return out

    # ------------------------------------------------------------------ loops
    def _run_loop(self, bank: int, loop: Loop) -> list:
        body = loop.body
        out = self._run_explicit(bank, Block.empty(), loop.start) if loop.start > self.now[bank] else []
        periodic = not np.any(body.kind == Kind.REF_ALL)
        if loop.count <= 4 or not periodic or len(body) * loop.count <= CHUNK:
            return out + self._run_explicit(bank, loop.expand(), loop.end)
        head = Loop(body, loop.period, 2, loop.start)
        recs = self._run_explicit(bank, head.expand(), head.end)
        out.extend(recs)
        act_rows = set(body.row[body.kind == Kind.ACT].tolist())
        if any(r.row in act_rows for r in recs):
            rest = Loop(body, loop.period, loop.count - 2, head.end)
            return out + self._run_explicit(bank, rest.expand(), rest.end)
        out.extend(self._extrapolate(bank, body, loop.period, loop.count - 2, head.end))
        return out

    def _extrapolate(self, bank: int, body: Block, period: float, m: int, t_start: float) -> list:
        """Advance ``m`` identical periods in closed form for rows without resets."""
        a = self.array
        saved = (self.now[bank], self.open_row[bank], self.open_since[bank], self.ref_counter[bank])
        sp = self._build_span(bank, body.shifted(t_start), t_start + period)
        self.now[bank], self.open_row[bank], self.open_since[bank], self.ref_counter[bank] = saved
        if sp.end_open != self.open_row[bank]:
            raise ProtocolError("loop body must return the bank to its starting state")
        rl = self._level_rates(bank)
        tables = self._state_tables(bank, sp.state_rows)
        R, C = a.rows, a.columns
        free = np.ones(R, bool)
        free[sp.reset_rows] = False
        rows = np.flatnonzero(free)
        e = sp.cum[-1] - sp.cum[0]
        delta = self._segment_damage(rl, tables, sp.state_rows, rows, np.broadcast_to(e, (len(rows), len(e))))
        d0 = a.damage[bank, rows]
        live = np.isnan(a.flipped_at[bank, rows]) & a.charged()[bank, rows]
        final = d0 + m * delta
        flip_t = np.full((R, C), np.inf)
        flip_int = np.full((R, C), -1, np.int64)
        hit = live & (final >= 1.0)
        if hit.any():
            ri, ci = np.nonzero(hit)
            crow = rows[ri]
            dd, dl = d0[ri, ci], delta[ri, ci]
            j = np.clip(np.ceil((1.0 - dd) / dl) - 1, 0, m - 1).astype(np.int64)
            j = np.where((j > 0) & (dd + j * dl >= 1.0), j - 1, j)
            j = np.where((j < m - 1) & (dd + (j + 1) * dl < 1.0), j + 1, j)
            rates, _ = self._rate_vectors(rl, tables, crow, ci, sp.state_rows)
            dstart = dd + j * dl
            traj = np.einsum("bs,cs->bc", sp.cum - sp.cum[0], rates) + dstart[None, :]
            crossed = traj >= 1.0
            crossed[-1] = True
            idx = np.argmax(crossed, axis=0)
            lo = np.maximum(idx - 1, 0)
            dlo = traj[lo, np.arange(len(lo))]
            st = sp.interval_state[lo]
            r_int = rates[np.arange(len(lo)), st]
            with np.errstate(divide="ignore", invalid="ignore"):
                within = sp.bounds[lo] - t_start + np.maximum(1.0 - dlo, 0.0) / r_int
            within = np.where(np.isfinite(within), within, sp.bounds[idx] - t_start)
            within = np.minimum(within, sp.bounds[idx] - t_start)
            flip_t[crow, ci] = t_start + j * period + within
            flip_int[crow, ci] = lo

        ham_t = np.full((R, C), np.inf)
        dose0 = a.hammer_dose[bank]
        end_dose = dose0.copy()
        ham_eligible = np.isnan(a.flipped_at[bank]) & (a.charged()[bank] == a.hammer_discharge[bank])
        for r in np.unique(sp.dose_rows):
            if not free[r]:
                continue
            msk = sp.dose_rows == r
            at, amt = sp.dose_at[msk], sp.dose_amt[msk]
            o = np.argsort(at, kind="stable")
            at, amt = at[o], amt[o]
            q = amt.sum()
            cum = np.cumsum(amt)
            end_dose[r] = dose0[r] + m * q
            thr = a.rh_threshold[bank, r]
            cells = np.flatnonzero(ham_eligible[r] & (thr <= dose0[r] + m * q))
            if not len(cells):
                continue
            need = thr[cells] - dose0[r]
            j = np.clip(np.ceil(need / q) - 1, 0, m - 1).astype(np.int64)
            j = np.where((j > 0) & (j * q >= need), j - 1, j)
            k = np.searchsorted(cum, need - j * q, side="left")
            k = np.minimum(k, len(cum) - 1)
            ham_t[r, cells] = t_start + j * period + (sp.bounds[at[k]] - t_start)

        recs, frows, fcols, _ = self._flip_records(bank, sp, flip_t, flip_int, ham_t, rl, tables)
        # the disturbed flag was settled by the two explicit periods
        for i, rec in enumerate(recs):
            if rec.cause != Cause.HAMMER:
                dist = a.disturbed[bank, rec.row, rec.column]
                recs[i] = BitflipRecord(rec.bank, rec.subarray, rec.row, rec.column, rec.time, rec.direction,
                                        Cause.COLUMN_DISTURB if dist else Cause.RETENTION)
        end_damage = a.damage[bank].copy()
        end_damage[rows] = final
        if len(frows):
            a.flipped_at[bank, frows, fcols] = [r.time for r in recs]
            a.bits[bank, frows, fcols] ^= 1
            end_damage[frows, fcols] = np.maximum(end_damage[frows, fcols], 1.0)
        a.damage[bank] = end_damage
        a.hammer_dose[bank] = end_dose
        self.now[bank] = t_start + m * period
        if self.open_row[bank] >= 0:
            self.open_since[bank] += m * period
        return recs

    # -------------------------------------------------------------------- run
    def run(self, stream: CommandStream) -> BitflipReport:
        report = BitflipReport()
        for bank in range(self.array.banks):
            for seg in stream.segments:
                if isinstance(seg, Loop):
                    sel = (seg.body.bank == bank) | (seg.body.bank == ALL_BANKS)
                    sub = Loop(seg.body.take(sel), seg.period, seg.count, seg.start)
                    report.extend(self._run_loop(bank, sub))
                else:
                    sel = (seg.bank == bank) | (seg.bank == ALL_BANKS)
                    blk = seg.take(sel)
                    end = float(blk.time[-1]) if len(blk) else self.now[bank]
                    report.extend(self._run_explicit(bank, blk, max(end, self.now[bank])))
            end = max(stream.end, self.now[bank])
            report.extend(self._run_explicit(bank, Block.empty(), end))
            if self.open_row[bank] >= 0:
                # implicit PRE at stream end so the row's hammer dose lands
                report.extend(self._run_explicit(bank, Block.from_commands([Command.pre(end, bank)]), end))
        report.sort()
        return report


def execute(array: DramArray, stream: CommandStream, timings: TimingParams | None = None,
            temperature: Temperature | None = None, hammer_radius: int = 1) -> BitflipReport:
    """Run ``stream`` on ``array`` (mutating it) and return every flip that occurred."""
    return Engine(array, timings, temperature, hammer_radius).run(stream)
