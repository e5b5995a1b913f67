"""Closed-form refresh cost models and their discrete-event cross-checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .array import DramGeometry
from .errors import InputError, ModelDomainError
from .timing import MS, NS, Block, CommandStream, Kind, TimingParams

DRFM_TABLE = {2: 280 * NS, 4: 560 * NS}
T_WEAK = 64 * MS


def throughput_loss(t_rfc: float, t_refi: float) -> float:
    """Fraction of time a rank is blocked by REF_all: t_rfc / t_refi."""
    if t_rfc < 0:
        raise ModelDomainError("t_rfc must be non-negative")
    if t_rfc == 0:
        return 0.0
    if not t_refi > t_rfc:
        raise ModelDomainError(f"t_refi ({t_refi:g} s) must exceed t_rfc ({t_rfc:g} s)")
    return t_rfc / t_refi


def normalized_refresh_ops(f: float, t_strong: float, t_weak: float = T_WEAK) -> float:
    """Row refreshes relative to refreshing every row each t_weak."""
    if not 0.0 <= f <= 1.0:
        raise InputError("weak fraction must be in [0, 1]")
    if not t_strong >= t_weak > 0:
        raise InputError("need t_strong >= t_weak > 0")
    return f + (1.0 - f) * (t_weak / t_strong)


def count_refresh_ops(f: float, t_strong: float, t_weak: float = T_WEAK, rows: int = 8192,
                      duration: float | None = None) -> float:
    """Discrete-event counterpart of :func:`normalized_refresh_ops`.

    ``round(f * rows)`` rows refresh every t_weak, the rest every t_strong,
    each row phase-shifted by its index; counts are taken over ``duration``
    (default: t_strong) and normalized by the all-weak count.
    """
    from .mitigation import BitmapRowSet, RaidrPolicy, raidr_stream

    duration = t_strong if duration is None else duration
    geometry = DramGeometry(1, 1, rows, 2)
    weak = BitmapRowSet(rows)
    weak.add_many(np.arange(int(round(f * rows))))
    all_weak = BitmapRowSet(rows)
    all_weak.add_many(np.arange(rows))
    n = raidr_stream(RaidrPolicy(weak, t_weak, t_strong), duration, geometry).count(Kind.REF_ROW)
    base = raidr_stream(RaidrPolicy(all_weak, t_weak, t_strong), duration, geometry).count(Kind.REF_ROW)
    return n / base


def refresh_ops_reduction(f: float, t_from: float = 128 * MS, t_to: float = 1024 * MS,
                          t_weak: float = T_WEAK) -> float:
    """1 - R(f, t_to) / R(f, t_from)."""
    return 1.0 - normalized_refresh_ops(f, t_to, t_weak) / normalized_refresh_ops(f, t_from, t_weak)


def weak_fraction_for_reduction(target: float, t_from: float = 128 * MS, t_to: float = 1024 * MS,
                                t_weak: float = T_WEAK) -> float:
    """Weak-row fraction at which moving t_strong from t_from to t_to saves ``target``."""
    a, b = t_weak / t_to, t_weak / t_from
    num = (1.0 - target) * b - a
    den = (1.0 - a) - (1.0 - target) * (1.0 - b)
    if den == 0:
        raise ModelDomainError("reduction target not reachable")
    f = num / den
    if not 0.0 <= f <= 1.0:
        raise ModelDomainError(f"reduction {target:g} not reachable with f in [0, 1]")
    return f


def drfm_latency(radius: int | None = None, rows: int | None = None,
                 t_row_refresh: float = 70 * NS) -> float:
    """Same-bank victim refresh latency for +/-radius neighbors or an explicit row count."""
    if (radius is None) == (rows is None):
        raise InputError("give exactly one of radius or rows")
    if rows is not None:
        if rows < 0:
            raise InputError("rows must be non-negative")
        return rows * t_row_refresh
    if radius < 0:
        raise InputError("radius must be non-negative")
    return DRFM_TABLE.get(radius, 2 * radius * t_row_refresh)


@dataclass(frozen=True)
class EnergyParams:
    """Per-operation refresh energies.  Defaults are illustrative, not measured.

    ``e_ref_all`` of None means one REF_all costs as much as refreshing the
    rows it covers at ``e_row_refresh`` each.
    """

    e_row_refresh: float = 1e-9
    e_ref_all: float | None = None
    idle_power: float = 0.0

    def __post_init__(self):
        for name in ("e_row_refresh", "idle_power"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be non-negative")
        if self.e_ref_all is not None and self.e_ref_all < 0:
            raise InputError("e_ref_all must be non-negative")

    def ref_all_energy(self, rows_per_ref: float) -> float:
        return rows_per_ref * self.e_row_refresh if self.e_ref_all is None else self.e_ref_all


# 32 Gb-class device: 32 banks of 128K rows.
DEFAULT_GEOMETRY = {"banks": 32, "rows_per_bank": 131072}


@dataclass(frozen=True)
class PrvrComparison:
    fixed_loss: float
    prvr_loss: float
    throughput_reduction: float
    fixed_power: float       # refresh energy per second
    prvr_power: float
    energy_reduction: float

    def as_rows(self) -> list[tuple[str, float]]:
        return [(k, getattr(self, k)) for k in self.__dataclass_fields__]


def prvr_vs_fixed_rate(n_victims: int = 3072, t_first: float = 8 * MS, default_window: float = 32 * MS,
                       fast_window: float = 8 * MS, timings: TimingParams | None = None,
                       banks: int = DEFAULT_GEOMETRY["banks"], rows_per_bank: int = DEFAULT_GEOMETRY["rows_per_bank"],
                       energy: EnergyParams | None = None) -> PrvrComparison:
    """PRVR on top of the default refresh rate versus refreshing everything faster.

    One row per bank is hammered continuously, so every bank runs PRVR
    passes back to back.  Negative reductions mean PRVR costs more.
    """
    timings = timings or TimingParams()
    energy = energy or EnergyParams()
    if n_victims < 0 or not t_first > 0:
        raise InputError("need n_victims >= 0 and t_first > 0")
    refs = timings.refs_per_window
    fixed_loss = throughput_loss(timings.t_rfc, fast_window / refs)
    prvr_loss = throughput_loss(timings.t_rfc, default_window / refs) + n_victims * timings.t_row_refresh / t_first
    e_all = energy.ref_all_energy(banks * rows_per_bank / refs)
    fixed_power = refs / fast_window * e_all
    prvr_power = refs / default_window * e_all + banks * n_victims / t_first * energy.e_row_refresh
    return PrvrComparison(fixed_loss, prvr_loss, 1.0 - prvr_loss / fixed_loss,
                          fixed_power, prvr_power, 1.0 - prvr_power / fixed_power if fixed_power else 0.0)


def prvr_vs_fixed_rate_counted(n_victims: int = 3072, t_first: float = 8 * MS, default_window: float = 32 * MS,
                               fast_window: float = 8 * MS, timings: TimingParams | None = None,
                               banks: int = DEFAULT_GEOMETRY["banks"],
                               rows_per_bank: int = DEFAULT_GEOMETRY["rows_per_bank"],
                               energy: EnergyParams | None = None, duration: float = 1.0) -> PrvrComparison:
    """Same comparison by generating and counting the refresh commands over ``duration``.

    PRVR passes come from :func:`prvr_stream` driven by one row held open for
    the whole run in a three-subarray bank; banks are identical, so one bank
    is generated and scaled.
    """
    from .mitigation import PeriodicPolicy, PrvrPolicy, periodic_refresh_stream, prvr_stream

    timings = timings or TimingParams()
    energy = energy or EnergyParams()
    refs = timings.refs_per_window
    fixed = periodic_refresh_stream(PeriodicPolicy(fast_window), duration, timings).count(Kind.REF_ALL)
    base = periodic_refresh_stream(PeriodicPolicy(default_window), duration, timings).count(Kind.REF_ALL)
    n_row = 0
    if n_victims:
        per_sub = max(2, 2 * math.ceil(n_victims / 6))
        geometry = DramGeometry(1, 3, per_sub, 2)
        aggressor = per_sub + per_sub // 2
        trace = CommandStream([Block(np.array([0.0, duration]), np.array([Kind.ACT, Kind.PRE], np.int8),
                                     np.array([aggressor, -1]), np.zeros(2, np.int64), np.zeros(2))], duration)
        policy = PrvrPolicy(t_first, n_victims, trigger_fraction=0.0)
        n_row = prvr_stream(trace, geometry, policy, timings).count(Kind.REF_ROW)
    fixed_loss = fixed * timings.t_rfc / duration
    prvr_loss = (base * timings.t_rfc + n_row * timings.t_row_refresh) / duration
    e_all = energy.ref_all_energy(banks * rows_per_bank / refs)
    fixed_power = fixed * e_all / duration
    prvr_power = (base * e_all + banks * n_row * energy.e_row_refresh) / duration
    return PrvrComparison(fixed_loss, prvr_loss, 1.0 - prvr_loss / fixed_loss,
                          fixed_power, prvr_power, 1.0 - prvr_power / fixed_power if fixed_power else 0.0)


def refresh_share(window: float, energy: EnergyParams, banks: int = DEFAULT_GEOMETRY["banks"],
                  rows_per_bank: int = DEFAULT_GEOMETRY["rows_per_bank"],
                  timings: TimingParams | None = None) -> float:
    """Refresh power as a share of refresh plus idle power."""
    timings = timings or TimingParams()
    refs = timings.refs_per_window
    p = refs / window * energy.ref_all_energy(banks * rows_per_bank / refs)
    total = p + energy.idle_power
    return p / total if total else 0.0


def refresh_ops_grid(fractions, t_strongs, t_weak: float = T_WEAK) -> list[tuple[float, float, float]]:
    """(f, T, normalized ops) for every grid point, f-major."""
    return [(float(f), float(t), normalized_refresh_ops(float(f), float(t), t_weak))
            for f in fractions for t in t_strongs]
