"""Command-level simulator for column disturbance in open-bitline DRAM."""

__version__ = "0.1.0"

from .array import (CellProfile, DataPattern, DramArray, DramGeometry, ProfileDistribution,
                    build_array, init_region)
from .engine import BitflipRecord, BitflipReport, Cause, Engine, avg_column_voltage, execute, rowclone
from .timing import Command, CommandStream, Kind, Temperature, TimingParams

__all__ = [
    "BitflipRecord", "BitflipReport", "Cause", "CellProfile", "Command", "CommandStream",
    "DataPattern", "DramArray", "DramGeometry", "Engine", "Kind", "ProfileDistribution",
    "Temperature", "TimingParams", "avg_column_voltage", "build_array", "execute", "init_region",
    "rowclone", "__version__",
]
