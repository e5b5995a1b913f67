"""Timing parameters, temperature scaling, and command streams.

All times are in seconds.  A :class:`CommandStream` is a sequence of
segments, each either an explicit block of timestamped commands or a
``Loop`` that repeats a short body with a fixed period.  Loops keep
multi-million-activation access patterns compact; the engine evaluates
them in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, InputError

NS = 1e-9
US = 1e-6
MS = 1e-3

# t_agg_on values swept in the characterization experiments.
T_AGG_ON_CHOICES = (36 * NS, 7.8 * US, 70.2 * US, 1 * MS)
REFS_PER_WINDOW = 8192


def count_fits(total: float, period: float) -> int:
    """floor(total / period), robust to float noise at exact multiples."""
    if total <= 0 or period <= 0:
        return 0
    return int(math.floor(total / period * (1 + 1e-12)))


@dataclass(frozen=True)
class TimingParams:
    t_ras: float = 36 * NS
    t_rp: float = 14 * NS
    t_agg_on: float = 36 * NS
    t_refw: float = 32 * MS
    t_refi: Optional[float] = None
    t_rfc: float = 410 * NS
    t_row_refresh: float = 70 * NS
    refs_per_window: int = REFS_PER_WINDOW

    def __post_init__(self):
        if self.refs_per_window < 1:
            raise ConfigurationError("refs_per_window must be >= 1")
        if self.t_refi is None:
            object.__setattr__(self, "t_refi", self.t_refw / self.refs_per_window)
        for name in ("t_ras", "t_rp", "t_agg_on", "t_refw", "t_refi", "t_rfc", "t_row_refresh"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.t_agg_on < self.t_ras * (1 - 1e-12):
            raise ConfigurationError("t_agg_on must be >= t_ras")

    @property
    def loop_period(self) -> float:
        return self.t_agg_on + self.t_rp

    def with_(self, **changes) -> "TimingParams":
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if "t_refw" in changes or "refs_per_window" in changes:
            values["t_refi"] = None
        values.update(changes)
        return TimingParams(**values)


@dataclass(frozen=True)
class TemperatureProfile:
    """Flip-time scale s(T) = exp(-a (T - 85 C)), so s(85 C) = 1.

    ``speedup_45_95`` is s(45) / s(95): how much faster cells fail at 95 C
    than at 45 C.
    """

    name: str
    speedup_45_95: float = 1.0

    def __post_init__(self):
        if not self.speedup_45_95 >= 1.0:
            raise ConfigurationError("speedup_45_95 must be >= 1")

    @property
    def slope(self) -> float:
        return math.log(self.speedup_45_95) / 50.0

    def scale(self, celsius: float) -> float:
        return math.exp(-self.slope * (celsius - 85.0))


TEMPERATURE_PRESETS = {
    "flat": TemperatureProfile("flat", 1.0),
    "mfr-h": TemperatureProfile("mfr-h", 9.05),
    "mfr-m": TemperatureProfile("mfr-m", 5.15),
    "mfr-s": TemperatureProfile("mfr-s", 1.96),
}


@dataclass(frozen=True)
class Temperature:
    celsius: float = 85.0
    profile: TemperatureProfile = TEMPERATURE_PRESETS["flat"]

    @property
    def scale(self) -> float:
        return self.profile.scale(self.celsius)

    @classmethod
    def preset(cls, name: str, celsius: float = 85.0) -> "Temperature":
        try:
            return cls(celsius, TEMPERATURE_PRESETS[name])
        except KeyError:
            raise ConfigurationError(f"unknown temperature profile {name!r}") from None


class Kind(IntEnum):
    ACT = 0
    PRE = 1
    REF_ALL = 2
    REF_ROW = 3
    IDLE = 4


ALL_BANKS = -1


@dataclass(frozen=True)
class Command:
    kind: Kind
    time: float
    row: int = -1
    bank: int = 0
    duration: float = 0.0

    @classmethod
    def act(cls, time, row, bank=0):
        return cls(Kind.ACT, time, row, bank)

    @classmethod
    def pre(cls, time, bank=0):
        return cls(Kind.PRE, time, -1, bank)

    @classmethod
    def ref_all(cls, time):
        return cls(Kind.REF_ALL, time, -1, ALL_BANKS)

    @classmethod
    def ref_row(cls, time, row, bank=0):
        return cls(Kind.REF_ROW, time, row, bank)

    @classmethod
    def idle(cls, time, duration):
        return cls(Kind.IDLE, time, -1, ALL_BANKS, duration)


@dataclass
class Block:
    time: np.ndarray
    kind: np.ndarray
    row: np.ndarray
    bank: np.ndarray
    duration: np.ndarray

    @classmethod
    def empty(cls) -> "Block":
        return cls(np.zeros(0), np.zeros(0, np.int8), np.zeros(0, np.int64),
                   np.zeros(0, np.int64), np.zeros(0))

    @classmethod
    def from_commands(cls, commands: Sequence[Command]) -> "Block":
        n = len(commands)
        if n == 0:
            return cls.empty()
        return cls(
            np.fromiter((c.time for c in commands), float, n),
            np.fromiter((int(c.kind) for c in commands), np.int8, n),
            np.fromiter((c.row for c in commands), np.int64, n),
            np.fromiter((c.bank for c in commands), np.int64, n),
            np.fromiter((c.duration for c in commands), float, n),
        )

    def __len__(self) -> int:
        return len(self.time)

    def shifted(self, offset: float) -> "Block":
        return Block(self.time + offset, self.kind, self.row, self.bank, self.duration)

    def take(self, idx) -> "Block":
        return Block(self.time[idx], self.kind[idx], self.row[idx], self.bank[idx], self.duration[idx])

    @property
    def end(self) -> float:
        if not len(self):
            return 0.0
        return float(np.max(self.time + self.duration))

    def commands(self) -> Iterator[Command]:
        for t, k, r, b, d in zip(self.time, self.kind, self.row, self.bank, self.duration):
            yield Command(Kind(int(k)), float(t), int(r), int(b), float(d))

    @staticmethod
    def concat(blocks: Sequence["Block"]) -> "Block":
        blocks = [b for b in blocks if len(b)]
        if not blocks:
            return Block.empty()
        return Block(*(np.concatenate([getattr(b, f) for b in blocks])
                       for f in ("time", "kind", "row", "bank", "duration")))


@dataclass
class Loop:
    """``count`` repetitions of ``body`` (times relative to each period start)."""

    body: Block
    period: float
    count: int
    start: float = 0.0

    def __post_init__(self):
        if self.period <= 0:
            raise InputError("loop period must be positive")
        if len(self.body) and (self.body.time.min() < 0 or self.body.time.max() >= self.period):
            raise InputError("loop body times must lie in [0, period)")

    def __len__(self) -> int:
        return len(self.body) * self.count

    @property
    def end(self) -> float:
        return self.start + self.period * self.count

    def expand(self) -> Block:
        if not self.count:
            return Block.empty()
        offsets = self.start + self.period * np.arange(self.count)
        n = len(self.body)
        return Block(
            (self.body.time[None, :] + offsets[:, None]).ravel(),
            np.tile(self.body.kind, self.count),
            np.tile(self.body.row, self.count),
            np.tile(self.body.bank, self.count),
            np.tile(self.body.duration, self.count) if n else np.zeros(0),
        )


Segment = Union[Block, Loop]


@dataclass
class CommandStream:
    segments: list = field(default_factory=list)
    duration: float = 0.0

    @classmethod
    def from_commands(cls, commands: Iterable[Command], duration: float | None = None) -> "CommandStream":
        commands = list(commands)
        block = Block.from_commands(commands)
        end = block.end
        return cls([block] if len(block) else [], max(end, duration or 0.0))

    def append(self, segment: Segment) -> None:
        self.segments.append(segment)
        self.duration = max(self.duration, segment.end)

    @property
    def end(self) -> float:
        return max([self.duration] + [s.end for s in self.segments])

    def __len__(self) -> int:
        return sum(len(s) for s in self.segments)

    def __iter__(self) -> Iterator[Command]:
        for seg in self.segments:
            block = seg.expand() if isinstance(seg, Loop) else seg
            yield from block.commands()

    def to_block(self) -> Block:
        return Block.concat([s.expand() if isinstance(s, Loop) else s for s in self.segments])

    def count(self, kind: Kind) -> int:
        total = 0
        for seg in self.segments:
            if isinstance(seg, Loop):
                total += int(np.sum(seg.body.kind == kind)) * seg.count
            else:
                total += int(np.sum(seg.kind == kind))
        return total

    @staticmethod
    def merge(*streams: "CommandStream") -> "CommandStream":
        """Timestamp-ordered union; ties keep the argument order (stable)."""
        blocks = []
        for i, s in enumerate(streams):
            b = s.to_block()
            blocks.append((b, np.full(len(b), i)))
        merged = Block.concat([b for b, _ in blocks])
        prio = np.concatenate([p for _, p in blocks]) if blocks else np.zeros(0)
        order = np.lexsort((prio, merged.time)) if len(merged) else np.zeros(0, int)
        out = CommandStream([merged.take(order)] if len(merged) else [],
                            max([s.end for s in streams] + [0.0]))
        return out
