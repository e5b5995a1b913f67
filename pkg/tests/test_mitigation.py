import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import INF
from coldisturb.array import AnchorDist, DramGeometry, ProfileDistribution, build_array
from coldisturb.characterize import ExperimentSpec, access_stream, prepare, profile_disturbance
from coldisturb.engine import execute
from coldisturb.errors import InputError
from coldisturb.mitigation import (
    BitmapRowSet, BloomRowSet, PeriodicPolicy, PrvrPolicy, RaidrPolicy, classify_weak_rows, merge_refresh_first,
    periodic_refresh_stream, policy_name, prvr_stream, raidr_stream, verify_policy,
)
from coldisturb.timing import Block, Command, CommandStream, Kind, MS, US, TimingParams


# ------------------------------------------------------------------ row sets
@given(st.lists(st.integers(0, 2**40), max_size=300), st.integers(0, 2**32))
def test_bloom_has_no_false_negatives(rows, seed):
    bf = BloomRowSet(m=1024, k=4, seed=seed)
    bf.add_many(rows)
    assert bf.query_many(rows).all() if rows else True
    for r in rows[:5]:
        assert r in bf


@pytest.mark.parametrize("n", [16, 128, 1024])
def test_bloom_fp_rate_matches_formula(n):
    """Independent check: empirical false-positive rate within 3 sigma of (1 - e^{-kn/m})^k."""
    bf = BloomRowSet()
    bf.add_many(np.arange(n))
    queries = np.arange(10**6, 10**6 + 200_000)
    p = bf.expected_fp_rate()
    observed = bf.query_many(queries).mean()
    sigma = math.sqrt(p * (1 - p) / len(queries))
    assert abs(observed - p) <= 3 * sigma
    assert p == pytest.approx((1 - math.exp(-6 * n / 8192)) ** 6)


def test_bitmap_is_exact():
    bm = BitmapRowSet(16)
    bm.add_many([1, 5])
    bm.add(7)
    assert list(np.flatnonzero(bm.query_many(np.arange(16)))) == [1, 5, 7]
    assert len(bm) == 3 and 5 in bm and 6 not in bm


def test_classify_weak_rows():
    ft = np.full((2, 4, 3), np.inf)
    ft[0, 1, 2] = 0.5
    ft[1, 3, 0] = 2.0
    bm = classify_weak_rows(ft, 1.0)
    assert list(np.flatnonzero(bm.bits)) == [1]
    assert list(np.flatnonzero(classify_weak_rows(ft, 2.0).bits)) == [1, 7]
    bf = classify_weak_rows(ft, 2.0, "bloom")
    assert 1 in bf and 7 in bf
    with pytest.raises(InputError):
        classify_weak_rows(ft, 1.0, "cuckoo")


# ------------------------------------------------------------------ streams
def test_periodic_stream_counts():
    tm = TimingParams()
    assert periodic_refresh_stream(PeriodicPolicy(32 * MS), 32 * MS, tm).count(Kind.REF_ALL) == 8192
    assert periodic_refresh_stream(8 * MS, 32 * MS, tm).count(Kind.REF_ALL) == 4 * 8192
    with pytest.raises(InputError):
        PeriodicPolicy(0.0)


def test_raidr_stream_counts_and_phases():
    g = DramGeometry(1, 1, 8, 2)
    weak = BitmapRowSet(8)
    weak.add_many([2, 5])
    s = raidr_stream(RaidrPolicy(weak, 0.064, 0.256), 0.512, g)
    blk = s.to_block()
    per_row = np.bincount(blk.row, minlength=8)
    assert list(per_row) == [2, 2, 8, 2, 2, 8, 2, 2]
    first = {int(r): float(blk.time[np.flatnonzero(blk.row == r)[0]]) for r in range(8)}
    assert first[5] == pytest.approx(5 * 0.064 / 8)
    assert first[3] == pytest.approx(3 * 0.256 / 8)
    with pytest.raises(InputError):
        RaidrPolicy(weak, 0.5, 0.1)


def _single_open(row, duration):
    return CommandStream([Block(np.array([0.0, duration]), np.array([Kind.ACT, Kind.PRE], np.int8),
                                np.array([row, -1]), np.zeros(2, np.int64), np.zeros(2))], duration)


def test_prvr_passes_cover_all_victims():
    g = DramGeometry(1, 3, 8, 2)
    pol = PrvrPolicy(t_first=0.01, trigger_fraction=0.5)
    s = prvr_stream(_single_open(12, 0.05), g, pol)
    blk = s.to_block()
    assert blk.time[0] == pytest.approx(0.005)
    # first pass squeezed into the remaining half of t_first
    first = blk.take(blk.time < 0.01)
    assert sorted(first.row) == list(range(24))
    assert first.time.max() < 0.01
    # later passes: each victim once per t_first
    later = blk.take(blk.time >= 0.01)
    assert len(later) == 4 * 24
    assert list(later.row[:24]) == list(range(8, 16)) + list(range(0, 8)) + list(range(16, 24))


def test_prvr_victim_limits():
    g = DramGeometry(1, 3, 8, 2)
    s = prvr_stream(_single_open(0, 0.05), g, PrvrPolicy(0.01, n_victims=16, trigger_fraction=0.0))
    assert set(s.to_block().row) == set(range(16))
    with pytest.raises(InputError):
        prvr_stream(_single_open(0, 0.05), g, PrvrPolicy(0.01, n_victims=17))
    # no trigger reached: no refreshes
    assert len(prvr_stream(_single_open(0, 0.001), g, PrvrPolicy(0.01))) == 0


def test_merge_keeps_refresh_times_and_stays_legal():
    g = DramGeometry(1, 3, 8, 2)
    tm = TimingParams(t_agg_on=1 * US)
    arr = build_array(g, ProfileDistribution(AnchorDist(INF), AnchorDist(INF), AnchorDist(INF), AnchorDist(INF)))
    agg = CommandStream.from_commands(
        [c for i in range(200) for c in (Command.act(i * 1.1e-6, 12), Command.pre(i * 1.1e-6 + 1e-6))])
    ref = CommandStream.merge(periodic_refresh_stream(32 * MS, agg.end, tm),
                              CommandStream.from_commands([Command.ref_row(5e-5, 3)]))
    merged, conflicts = merge_refresh_first(agg, ref, tm, 1)
    blk = merged.to_block()
    assert conflicts > 0
    assert np.all(np.diff(blk.time) >= 0)
    want = periodic_refresh_stream(32 * MS, agg.end, tm).to_block().time
    np.testing.assert_allclose(blk.time[blk.kind == Kind.REF_ALL], want)
    assert blk.time[blk.kind == Kind.REF_ROW][0] == 5e-5
    # every conflict with an open row adds one PRE and one reopening ACT
    assert merged.count(Kind.ACT) == merged.count(Kind.PRE) > 200
    assert merged.count(Kind.ACT) - 200 <= conflicts
    execute(arr, merged, tm)  # raises on any illegal ordering


def test_policy_names():
    assert policy_name(PeriodicPolicy(32 * MS)) == "periodic(32ms)"
    assert policy_name(PrvrPolicy(0.1)) == "prvr"
    assert policy_name(RaidrPolicy(BloomRowSet())) == "raidr-bloom"


# ------------------------------------------------------------ soundness
def _scenario(gnd, seed):
    g = DramGeometry(1, 3, 32, 8)
    dist = ProfileDistribution(AnchorDist(gnd, 0.3), AnchorDist(100 * gnd, 0.3), AnchorDist(INF), AnchorDist(INF))
    arr = build_array(g, dist, seed=seed)
    tm = TimingParams(t_agg_on=70.2 * US)
    spec = ExperimentSpec(timings=tm)
    prof = profile_disturbance(arr, spec, 2.0)
    rows = prepare(arr, spec)
    agg = access_stream(arr, spec, rows, duration=0.3)
    return arr, tm, prof, agg


@pytest.fixture(scope="module")
def slow():
    """Cells fail well after t_weak: RAIDR territory."""
    return _scenario(0.2, 3)


@pytest.fixture(scope="module")
def fast():
    """Cells fail well inside the 32 ms base window: only PRVR helps."""
    return _scenario(0.008, 4)


def _run(scenario, policy):
    arr, tm, _, agg = scenario
    return verify_policy(arr.copy(), agg, policy, 0.3, tm)


def test_no_refresh_baseline_flips(slow):
    assert _run(slow, PeriodicPolicy(1.0)).violations > 0


def test_raidr_is_sound(slow):
    _, _, prof, _ = slow
    bitmap = _run(slow, RaidrPolicy(classify_weak_rows(prof.min_retention, 1.024)))
    bloom = _run(slow, RaidrPolicy(classify_weak_rows(prof.min_retention, 1.024, "bloom")))
    assert bitmap.violations == bloom.violations == 0
    assert bloom.row_refreshes >= bitmap.row_refreshes > 0


def test_prvr_is_sound_and_needed(fast):
    _, _, prof, _ = fast
    t_first = float(prof.min_retention.min())
    assert t_first < 16 * MS
    assert _run(fast, PeriodicPolicy(32 * MS)).violations > 0
    report = _run(fast, PrvrPolicy(t_first))
    assert report.violations == 0
    assert report.ref_row > 0 and report.ref_all > 0
    assert _run(fast, PrvrPolicy(4 * t_first)).violations > 0
