"""Reference simulator for engine equivalence tests.

Walks commands one at a time, recomputes every cell's bitline voltage from
the neighbor wiring directly, and integrates damage over each interval in
``substeps`` equal slices.  Slow and scalar on purpose; only for small
arrays and short streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ACT, PRE, REF_ALL, REF_ROW, IDLE = 0, 1, 2, 3, 4


@dataclass
class OracleFlip:
    row: int
    column: int
    time: float
    direction: str
    cause: str


def _bitline_source(sub_of, open_row, row, col):
    """Column of ``open_row`` that drives (row, col), or None when at VDD/2."""
    if open_row < 0 or row == open_row:
        return None
    k, q = sub_of[open_row], sub_of[row]
    if q == k:
        return col
    # lower neighbor's odd column 2j+1 is the open subarray's even column 2j
    if q == k - 1 and col % 2 == 1:
        return col - 1
    # upper neighbor's even column 2j is the open subarray's odd column 2j+1
    if q == k + 1 and col % 2 == 0:
        return col + 1
    return None


def simulate(array, commands, end, *, bank=0, t_rp=14e-9, t_ras=36e-9, refs_per_window=8192,
             scale=1.0, substeps=16, hammer_radius=1):
    """Run ``commands`` (time, kind, row) on a copy of ``array``'s state; return flips and final state."""
    R, C = array.rows, array.columns
    sizes = array.geometry.sizes
    sub_of = np.repeat(np.arange(len(sizes)), sizes)
    bits = array.bits[bank].astype(int).copy()
    anti = array.anti[bank].copy()
    damage = array.damage[bank].copy()
    dose = array.hammer_dose[bank].copy()
    flipped = ~np.isnan(array.flipped_at[bank])
    disturbed = array.disturbed[bank].copy()
    t_lv = {"gnd": array.t_gnd[bank], "half": array.t_half[bank], "vdd": array.t_vdd[bank]}
    thr = array.rh_threshold[bank]
    hdis = array.hammer_discharge[bank]
    flips: list[OracleFlip] = []
    open_row, opened_at, counter = -1, 0.0, 0
    now = 0.0

    def charged(r, c):
        return bool(bits[r, c]) != bool(anti[r, c])

    def flip(r, c, t, cause):
        flips.append(OracleFlip(r, c, t, "1->0" if bits[r, c] else "0->1", cause))
        bits[r, c] ^= 1
        flipped[r, c] = True

    def advance(t1):
        nonlocal now
        dt = t1 - now
        if dt <= 0:
            now = max(now, t1)
            return
        # bitline levels for this interval
        level = {}
        for r in range(R):
            for c in range(C):
                src = _bitline_source(sub_of, open_row, r, c)
                if r == open_row:
                    level[r, c] = None
                elif src is None:
                    level[r, c] = "half"
                else:
                    level[r, c] = "vdd" if charged(open_row, src) else "gnd"
        for r in range(R):
            for c in range(C):
                lv = level[r, c]
                if lv is None or flipped[r, c] or not charged(r, c):
                    continue
                t_f = t_lv[lv][r, c]
                if math.isinf(t_f):
                    continue
                rate = 1.0 / (scale * t_f)
                h = dt / substeps
                d = damage[r, c]
                for i in range(substeps):
                    nd = d + rate * h
                    if nd >= 1.0:
                        when = now + i * h + (1.0 - d) / rate
                        driven = disturbed[r, c] or lv in ("gnd", "vdd")
                        flip(r, c, when, "column-disturb" if driven else "retention-baseline")
                        d = max(nd, 1.0)
                        break
                    d = nd
                damage[r, c] = d
        for r in range(R):
            for c in range(C):
                if level[r, c] in ("gnd", "vdd"):
                    disturbed[r, c] = True
        now = t1

    def reset(rows):
        for r in rows:
            damage[r, :] = 0.0
            dose[r] = 0.0

    for t, kind, row in commands:
        advance(t)
        if kind == ACT:
            reset([row])
            open_row, opened_at = row, t
        elif kind == PRE:
            amt = 1.0 + (t - opened_at) / t_ras
            for d in range(1, hammer_radius + 1):
                for tgt in (open_row - d, open_row + d):
                    if 0 <= tgt < R and sub_of[tgt] == sub_of[open_row]:
                        dose[tgt] += amt
                        for c in range(C):
                            if (not flipped[tgt, c] and dose[tgt] >= thr[tgt, c]
                                    and charged(tgt, c) == bool(hdis[tgt, c])):
                                flip(tgt, c, t, "rowhammer-rowpress")
            open_row = -1
        elif kind == REF_ROW:
            reset([row])
        elif kind == REF_ALL:
            c = counter % refs_per_window
            reset(range((c * R) // refs_per_window, ((c + 1) * R) // refs_per_window))
            counter += 1
    advance(end)
    if open_row >= 0:
        amt = 1.0 + (end - opened_at) / t_ras
        for d in range(1, hammer_radius + 1):
            for tgt in (open_row - d, open_row + d):
                if 0 <= tgt < R and sub_of[tgt] == sub_of[open_row]:
                    dose[tgt] += amt
                    for c in range(C):
                        if (not flipped[tgt, c] and dose[tgt] >= thr[tgt, c]
                                and charged(tgt, c) == bool(hdis[tgt, c])):
                            flip(tgt, c, end, "rowhammer-rowpress")
    flips.sort(key=lambda f: (f.time, f.row, f.column))
    return flips, damage, dose
