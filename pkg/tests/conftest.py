import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from coldisturb.array import AnchorDist, DramGeometry, ProfileDistribution, build_array
from coldisturb.timing import Command, CommandStream

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

INF = float("inf")


def press_distribution(gnd=0.1, gnd_sigma=0.0, half=INF, half_sigma=0.0, rh=INF):
    """Cells that flip only under a GND-driven bitline unless ``half`` is finite."""
    return ProfileDistribution(
        t_flip_gnd=AnchorDist(gnd, gnd_sigma),
        t_flip_half=AnchorDist(half, half_sigma),
        t_flip_vdd=AnchorDist(INF),
        rh_threshold=AnchorDist(rh),
    )


def random_legal_commands(rng: np.random.Generator, rows: int, n: int, t_ras: float,
                          gap=(1e-7, 2e-5), refresh=True):
    """Legal (time, kind, row) triples for one bank plus an end time."""
    out = []
    t = 0.0
    open_row = -1
    opened = 0.0
    for _ in range(n):
        t += float(rng.uniform(*gap))
        if open_row >= 0:
            t = max(t, opened + t_ras)
            out.append((t, 1, -1))
            open_row = -1
            continue
        u = rng.random()
        if refresh and u < 0.15:
            out.append((t, 3, int(rng.integers(rows))))
        elif refresh and u < 0.25:
            out.append((t, 2, -1))
        else:
            open_row = int(rng.integers(rows))
            opened = t
            out.append((t, 0, open_row))
    end = t + float(rng.uniform(*gap))
    return out, end


def to_stream(commands, end, bank=0):
    cmds = []
    for t, k, r in commands:
        if k == 0:
            cmds.append(Command.act(t, r, bank))
        elif k == 1:
            cmds.append(Command.pre(t, bank))
        elif k == 2:
            cmds.append(Command.ref_all(t))
        elif k == 3:
            cmds.append(Command.ref_row(t, r, bank))
    return CommandStream.from_commands(cmds, end)


@pytest.fixture
def small_geometry():
    return DramGeometry(1, 3, 8, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria register a PASS/FAIL line here; printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
