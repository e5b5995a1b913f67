"""DRAM bank geometry, open-bitline column sharing, and per-cell state.

Column sharing convention: the even local columns of subarray ``k`` are the
same physical bitlines as the odd local columns of subarray ``k - 1``
(column ``2j`` in ``k`` <-> column ``2j + 1`` in ``k - 1``), and the odd
local columns of ``k`` are shared with the even columns of ``k + 1``
(``2j + 1`` in ``k`` <-> ``2j`` in ``k + 1``).  The half of an edge
subarray's bitlines that has no neighbor ends at edge sense amplifiers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, InputError
from .rng import normal_keys, uniform_keys

INF = math.inf


@dataclass(frozen=True)
class DramGeometry:
    banks: int = 1
    subarrays_per_bank: int = 3
    rows_per_subarray: int = 1024
    columns_per_row: int = 64
    vdd: float = 1.0
    # Optional per-subarray row counts; overrides rows_per_subarray.
    subarray_sizes: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.subarray_sizes is not None:
            sizes = tuple(int(s) for s in self.subarray_sizes)
            object.__setattr__(self, "subarray_sizes", sizes)
            if len(sizes) != self.subarrays_per_bank:
                raise ConfigurationError(
                    f"subarray_sizes has {len(sizes)} entries, expected {self.subarrays_per_bank}"
                )
            for s in sizes:
                if s < 1 or s % 2:
                    raise ConfigurationError(f"subarray size must be a positive even count, got {s}")
        for name in ("banks", "subarrays_per_bank", "rows_per_subarray", "columns_per_row"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be an integer >= 1, got {value!r}")
        if self.rows_per_subarray % 2:
            raise ConfigurationError("rows_per_subarray must be even")
        if self.columns_per_row % 2:
            raise ConfigurationError("columns_per_row must be even")
        if not self.vdd > 0:
            raise ConfigurationError("vdd must be positive")

    @property
    def sizes(self) -> tuple[int, ...]:
        if self.subarray_sizes is not None:
            return self.subarray_sizes
        return (self.rows_per_subarray,) * self.subarrays_per_bank

    @property
    def rows_per_bank(self) -> int:
        return sum(self.sizes)

    @property
    def boundaries(self) -> list[tuple[int, int]]:
        """Inclusive (first_row, last_row) per subarray."""
        out, start = [], 0
        for size in self.sizes:
            out.append((start, start + size - 1))
            start += size
        return out


class ColumnRef(NamedTuple):
    subarray_id: int
    local_column: int


@dataclass(frozen=True)
class CellProfile:
    t_flip_gnd: float
    t_flip_half: float
    t_flip_vdd: float = INF
    anti_cell: bool = False
    rh_threshold: float = INF

    def __post_init__(self):
        if not (self.t_flip_gnd > 0 and self.t_flip_half > 0 and self.t_flip_vdd > 0):
            raise ConfigurationError("flip times must be positive")
        if not (self.t_flip_gnd <= self.t_flip_half <= self.t_flip_vdd):
            raise ConfigurationError("flip times must satisfy t_flip_gnd <= t_flip_half <= t_flip_vdd")
        if not self.rh_threshold > 0:
            raise ConfigurationError("rh_threshold must be positive")

    def t_flip(self, v: float, vdd: float = 1.0) -> float:
        return flip_time_at(v, self.t_flip_gnd, self.t_flip_half, self.t_flip_vdd, vdd)


def flip_time_at(v: float, t_gnd: float, t_half: float, t_vdd: float, vdd: float = 1.0) -> float:
    """Piecewise-linear flip time between the GND, VDD/2 and VDD anchors.

    An infinite anchor makes the whole adjoining segment infinite except at
    the finite endpoint itself.
    """
    if not 0.0 <= v <= vdd:
        raise InputError(f"voltage {v} outside [0, {vdd}]")
    half = vdd / 2
    if v <= half:
        lo, hi, x = t_gnd, t_half, v / half
    else:
        lo, hi, x = t_half, t_vdd, (v - half) / half
    if x == 0.0:
        return lo
    if x == 1.0:
        return hi
    if math.isinf(lo) or math.isinf(hi):
        return INF
    return lo + (hi - lo) * x


@dataclass(frozen=True)
class AnchorDist:
    """Log-normal sampling spec: ``median * exp(sigma * z)``; sigma 0 is constant."""

    median: float
    sigma: float = 0.0

    def __post_init__(self):
        if not self.median > 0:
            raise ConfigurationError("distribution median must be positive")
        if self.sigma < 0:
            raise ConfigurationError("distribution sigma must be >= 0")


@dataclass(frozen=True)
class ProfileDistribution:
    t_flip_gnd: AnchorDist = AnchorDist(4.0, 0.8)
    t_flip_half: AnchorDist = AnchorDist(64.0, 1.0)
    t_flip_vdd: AnchorDist = AnchorDist(INF)
    rh_threshold: AnchorDist = AnchorDist(50_000.0, 0.3)
    anti_cell_fraction: float = 0.0
    # Probability that a cell's hammer-induced flip goes charged -> discharged.
    hammer_discharge_fraction: float = 0.5

    def __post_init__(self):
        for name in ("anti_cell_fraction", "hammer_discharge_fraction"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"{name} must be in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileDistribution":
        kwargs = {}
        for key, value in d.items():
            if key in ("t_flip_gnd", "t_flip_half", "t_flip_vdd", "rh_threshold"):
                if isinstance(value, dict):
                    kwargs[key] = AnchorDist(_as_float(value["median"]), float(value.get("sigma", 0.0)))
                else:
                    kwargs[key] = AnchorDist(_as_float(value))
            elif key in ("anti_cell_fraction", "hammer_discharge_fraction"):
                kwargs[key] = float(value)
            else:
                raise ConfigurationError(f"unknown profile distribution key {key!r}")
        return cls(**kwargs)


def _as_float(value) -> float:
    if isinstance(value, str) and value.lower() in ("inf", "infinity"):
        return INF
    return float(value)


@dataclass(frozen=True)
class DataPattern:
    """A byte repeated across a row, most-significant bit first."""

    byte: int

    def __post_init__(self):
        if not 0 <= self.byte <= 0xFF:
            raise ConfigurationError(f"pattern byte out of range: {self.byte}")

    @classmethod
    def parse(cls, value) -> "DataPattern":
        if isinstance(value, DataPattern):
            return value
        if isinstance(value, str):
            return cls(int(value, 16) if value.lower().startswith("0x") else int(value))
        return cls(int(value))

    @property
    def name(self) -> str:
        return f"0x{self.byte:02X}"

    def negated(self) -> "DataPattern":
        return DataPattern(self.byte ^ 0xFF)

    def bits(self, columns: int) -> np.ndarray:
        cols = np.arange(columns)
        return ((self.byte >> (7 - cols % 8)) & 1).astype(np.uint8)

    def zero_columns(self, columns: int) -> np.ndarray:
        return np.flatnonzero(self.bits(columns) == 0)


RETENTION_PATTERNS = tuple(DataPattern(b) for b in (0x00, 0xAA, 0x11, 0x33, 0x77))


@dataclass
class DramArray:
    """Per-cell profiles and state for every bank, shaped (banks, rows, cols)."""

    geometry: DramGeometry
    t_gnd: np.ndarray
    t_half: np.ndarray
    t_vdd: np.ndarray
    rh_threshold: np.ndarray
    anti: np.ndarray
    hammer_discharge: np.ndarray
    bits: np.ndarray = field(init=False)
    damage: np.ndarray = field(init=False)
    flipped_at: np.ndarray = field(init=False)
    disturbed: np.ndarray = field(init=False)
    hammer_dose: np.ndarray = field(init=False)

    def __post_init__(self):
        shape = self.t_gnd.shape
        self.bits = np.zeros(shape, dtype=np.uint8)
        self.damage = np.zeros(shape)
        self.flipped_at = np.full(shape, np.nan)
        self.disturbed = np.zeros(shape, dtype=bool)
        self.hammer_dose = np.zeros(shape[:2])
        starts = np.cumsum((0,) + self.geometry.sizes)
        self._starts = starts
        self._row_subarray = np.repeat(np.arange(len(self.geometry.sizes)), self.geometry.sizes)

    @property
    def rows(self) -> int:
        return self.t_gnd.shape[1]

    @property
    def columns(self) -> int:
        return self.t_gnd.shape[2]

    @property
    def banks(self) -> int:
        return self.t_gnd.shape[0]

    @property
    def row_subarray(self) -> np.ndarray:
        return self._row_subarray

    def check_row(self, row: int, bank: int = 0) -> None:
        if not (0 <= bank < self.banks):
            raise InputError(f"bank {bank} out of range")
        if not (0 <= row < self.rows):
            raise InputError(f"row {row} out of range [0, {self.rows})")

    def subarray_of(self, row: int) -> int:
        self.check_row(row)
        return int(self._row_subarray[row])

    def subarray_range(self, k: int) -> range:
        if not 0 <= k < len(self.geometry.sizes):
            raise InputError(f"subarray {k} out of range")
        return range(int(self._starts[k]), int(self._starts[k + 1]))

    def charged(self) -> np.ndarray:
        return self.bits.astype(bool) ^ self.anti

    def cell_profile(self, bank: int, row: int, col: int) -> CellProfile:
        idx = (bank, row, col)
        return CellProfile(
            float(self.t_gnd[idx]), float(self.t_half[idx]), float(self.t_vdd[idx]),
            bool(self.anti[idx]), float(self.rh_threshold[idx]),
        )

    def set_profile(self, bank: int, row: int, col: int, profile: CellProfile) -> None:
        self.check_row(row, bank)
        idx = (bank, row, col)
        self.t_gnd[idx] = profile.t_flip_gnd
        self.t_half[idx] = profile.t_flip_half
        self.t_vdd[idx] = profile.t_flip_vdd
        self.anti[idx] = profile.anti_cell
        self.rh_threshold[idx] = profile.rh_threshold

    def write_row(self, row: int, bits: Sequence[int], bank: int = 0) -> None:
        self.check_row(row, bank)
        self.bits[bank, row] = np.asarray(bits, dtype=np.uint8)
        self._reset_rows(bank, [row])

    def read_row(self, row: int, bank: int = 0) -> np.ndarray:
        self.check_row(row, bank)
        return self.bits[bank, row].copy()

    def _reset_rows(self, bank: int, rows) -> None:
        self.damage[bank, rows] = 0.0
        self.flipped_at[bank, rows] = np.nan
        self.disturbed[bank, rows] = False
        self.hammer_dose[bank, rows] = 0.0

    def copy(self) -> "DramArray":
        new = DramArray(
            self.geometry, self.t_gnd.copy(), self.t_half.copy(), self.t_vdd.copy(),
            self.rh_threshold.copy(), self.anti.copy(), self.hammer_discharge.copy(),
        )
        for name in ("bits", "damage", "flipped_at", "disturbed", "hammer_dose"):
            setattr(new, name, getattr(self, name).copy())
        return new


def build_array(geometry: DramGeometry, distribution: ProfileDistribution | None = None,
                seed: int = 0) -> DramArray:
    """Sample every cell's profile from ``distribution``.

    Each draw is keyed by the cell's (bank, subarray, row, column), so the
    result is independent of iteration order and of the other anchors.
    Sampled anchors are made monotone with a running maximum
    (gnd <= half <= vdd).
    """
    if not isinstance(geometry, DramGeometry):
        raise ConfigurationError("geometry must be a DramGeometry")
    dist = distribution or ProfileDistribution()
    banks, cols = geometry.banks, geometry.columns_per_row
    rows = geometry.rows_per_bank
    b, r, c = np.meshgrid(np.arange(banks), np.arange(rows), np.arange(cols), indexing="ij")
    sub = np.repeat(np.arange(len(geometry.sizes)), geometry.sizes)[r]
    keys = (
        (b.astype(np.uint64) << np.uint64(56))
        | (sub.astype(np.uint64) << np.uint64(48))
        | (r.astype(np.uint64) << np.uint64(24))
        | c.astype(np.uint64)
    )

    def sample(anchor: AnchorDist, stream: int) -> np.ndarray:
        if math.isinf(anchor.median):
            return np.full(keys.shape, INF)
        if anchor.sigma == 0:
            return np.full(keys.shape, float(anchor.median))
        return anchor.median * np.exp(anchor.sigma * normal_keys(seed, stream, keys))

    t_gnd = sample(dist.t_flip_gnd, 0)
    t_half = np.maximum(sample(dist.t_flip_half, 1), t_gnd)
    t_vdd = np.maximum(sample(dist.t_flip_vdd, 2), t_half)
    rh = sample(dist.rh_threshold, 3)
    anti = uniform_keys(seed, 8, keys) < dist.anti_cell_fraction
    hammer_discharge = uniform_keys(seed, 9, keys) < dist.hammer_discharge_fraction
    return DramArray(geometry, t_gnd, t_half, t_vdd, rh, anti, hammer_discharge)


def shared_column(array_or_geometry, subarray: int, column: int, direction: int) -> Optional[ColumnRef]:
    """Physical-bitline partner of (subarray, column) in subarray ``subarray + direction``.

    ``direction`` is -1 (lower neighbor) or +1 (upper neighbor).  Returns None
    when that half of the bitlines is not shared in that direction or the
    neighbor does not exist.
    """
    geometry = getattr(array_or_geometry, "geometry", array_or_geometry)
    n_sub, cols = len(geometry.sizes), geometry.columns_per_row
    if not (0 <= subarray < n_sub and 0 <= column < cols):
        raise InputError("column reference out of range")
    target = subarray + direction
    if direction not in (-1, 1) or not 0 <= target < n_sub:
        return None
    if direction == -1 and column % 2 == 0:
        return ColumnRef(target, column + 1)
    if direction == 1 and column % 2 == 1:
        return ColumnRef(target, column - 1)
    return None


def perturbed_columns(array: DramArray, aggressor_row: int, bank: int = 0) -> set[ColumnRef]:
    """Every bitline an open ``aggressor_row`` drives, as (subarray, local column)."""
    array.check_row(aggressor_row, bank)
    k = array.subarray_of(aggressor_row)
    cols = array.columns
    out = {ColumnRef(k, c) for c in range(cols)}
    for c in range(cols):
        for direction in (-1, 1):
            ref = shared_column(array, k, c, direction)
            if ref is not None:
                out.add(ref)
    return out


def _row_list(array: DramArray, rows) -> list[int]:
    if isinstance(rows, range):
        rows = list(rows)
    elif isinstance(rows, (int, np.integer)):
        rows = [int(rows)]
    else:
        rows = [int(r) for r in rows]
    for r in rows:
        array.check_row(r)
    return rows


def init_region(array: DramArray, rows: Iterable[int] | range | int, pattern, bank: int | None = None) -> None:
    """Write ``pattern`` into ``rows`` and clear their damage, dose and flip marks."""
    pattern = DataPattern.parse(pattern)
    rows = _row_list(array, rows)
    banks = range(array.banks) if bank is None else [bank]
    bits = pattern.bits(array.columns)
    for b in banks:
        if not 0 <= b < array.banks:
            raise InputError(f"bank {b} out of range")
        array.bits[b, rows] = bits
        array._reset_rows(b, rows)


def init_aggressor_victims(array: DramArray, aggressors: Sequence[int], pattern,
                           bank: int | None = None, victim_pattern=None) -> None:
    """Victims get the negated pattern (unless given), aggressors get ``pattern``."""
    pattern = DataPattern.parse(pattern)
    victim = pattern.negated() if victim_pattern is None else DataPattern.parse(victim_pattern)
    init_region(array, range(array.rows), victim, bank)
    init_region(array, list(aggressors), pattern, bank)
