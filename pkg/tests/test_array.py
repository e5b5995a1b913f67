import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coldisturb.array import (
    AnchorDist, CellProfile, ColumnRef, DataPattern, DramGeometry, ProfileDistribution, build_array,
    flip_time_at, init_aggressor_victims, init_region, perturbed_columns, shared_column,
)
from coldisturb.errors import ConfigurationError, InputError

INF = math.inf


def test_geometry_boundaries_and_sizes():
    g = DramGeometry(2, 3, 4, 8)
    assert g.sizes == (4, 4, 4)
    assert g.rows_per_bank == 12
    assert g.boundaries == [(0, 3), (4, 7), (8, 11)]
    v = DramGeometry(1, 3, 2, 2, subarray_sizes=(2, 6, 4))
    assert v.boundaries == [(0, 1), (2, 7), (8, 11)]


@pytest.mark.parametrize("kwargs", [
    dict(banks=0), dict(rows_per_subarray=3), dict(columns_per_row=5), dict(vdd=0.0),
    dict(subarrays_per_bank=2, subarray_sizes=(4,)), dict(subarrays_per_bank=2, subarray_sizes=(4, 3)),
])
def test_geometry_rejects_bad_values(kwargs):
    with pytest.raises(ConfigurationError):
        DramGeometry(**kwargs)


def test_shared_column_convention():
    g = DramGeometry(1, 3, 4, 8)
    # even column of k pairs with odd column of k-1; odd of k with even of k+1
    assert shared_column(g, 1, 4, -1) == ColumnRef(0, 5)
    assert shared_column(g, 1, 5, 1) == ColumnRef(2, 4)
    assert shared_column(g, 1, 4, 1) is None
    assert shared_column(g, 1, 5, -1) is None
    assert shared_column(g, 0, 0, -1) is None
    assert shared_column(g, 2, 1, 1) is None
    with pytest.raises(InputError):
        shared_column(g, 3, 0, 1)


@given(st.integers(1, 6), st.integers(1, 8).map(lambda x: 2 * x), st.data())
def test_shared_column_is_symmetric(n_sub, cols, data):
    g = DramGeometry(1, n_sub, 2, cols)
    k = data.draw(st.integers(0, n_sub - 1))
    c = data.draw(st.integers(0, cols - 1))
    for d in (-1, 1):
        ref = shared_column(g, k, c, d)
        if ref is not None:
            assert shared_column(g, ref.subarray_id, ref.local_column, -d) == ColumnRef(k, c)


@given(st.integers(1, 6), st.integers(1, 8).map(lambda x: 2 * x), st.data())
def test_perturbed_columns_half_per_neighbor(n_sub, cols, data):
    arr = build_array(DramGeometry(1, n_sub, 2, cols), ProfileDistribution())
    row = data.draw(st.integers(0, arr.rows - 1))
    k = arr.subarray_of(row)
    refs = perturbed_columns(arr, row)
    per_sub = {}
    for ref in refs:
        per_sub[ref.subarray_id] = per_sub.get(ref.subarray_id, 0) + 1
    assert per_sub[k] == cols
    for q, n in per_sub.items():
        assert abs(q - k) <= 1
        if q != k:
            assert n == cols // 2


def test_flip_time_anchors_and_interpolation():
    assert flip_time_at(0.0, 1.0, 3.0, 5.0) == 1.0
    assert flip_time_at(0.5, 1.0, 3.0, 5.0) == 3.0
    assert flip_time_at(1.0, 1.0, 3.0, 5.0) == 5.0
    assert flip_time_at(0.25, 1.0, 3.0, 5.0) == pytest.approx(2.0)
    assert flip_time_at(0.75, 1.0, 3.0, 5.0) == pytest.approx(4.0)
    assert flip_time_at(0.25, 1.0, INF, INF) == INF
    assert flip_time_at(0.0, 1.0, INF, INF) == 1.0
    with pytest.raises(InputError):
        flip_time_at(1.5, 1.0, 2.0, 3.0)


@given(st.floats(1e-6, 10), st.floats(1, 100), st.floats(1, 100), st.floats(0, 1), st.floats(0, 1))
def test_flip_time_monotone_in_voltage(g, a, b, v1, v2):
    half, vdd = g * a, g * a * b
    lo, hi = sorted((v1, v2))
    assert flip_time_at(lo, g, half, vdd) <= flip_time_at(hi, g, half, vdd) * (1 + 1e-12)


def test_cell_profile_validation():
    CellProfile(1.0, 2.0, INF)
    with pytest.raises(ConfigurationError):
        CellProfile(2.0, 1.0)
    with pytest.raises(ConfigurationError):
        CellProfile(0.0, 1.0)
    with pytest.raises(ConfigurationError):
        CellProfile(1.0, 2.0, rh_threshold=0.0)


def test_data_pattern_bits_msb_first():
    assert list(DataPattern(0xA5).bits(8)) == [1, 0, 1, 0, 0, 1, 0, 1]
    assert list(DataPattern(0x0F).bits(10)) == [0, 0, 0, 0, 1, 1, 1, 1, 0, 0]
    assert DataPattern.parse("0x33") == DataPattern(0x33)
    assert DataPattern(0x11).negated() == DataPattern(0xEE)
    assert DataPattern(0xAA).name == "0xAA"
    assert list(DataPattern(0xAA).zero_columns(8)) == [1, 3, 5, 7]
    with pytest.raises(ConfigurationError):
        DataPattern(256)


def test_build_array_is_seeded_and_monotone():
    g = DramGeometry(2, 3, 8, 8)
    dist = ProfileDistribution(AnchorDist(1.0, 1.0), AnchorDist(1.5, 1.0), AnchorDist(2.0, 1.0),
                               AnchorDist(100.0, 0.3), anti_cell_fraction=0.5)
    a, b, c = build_array(g, dist, 3), build_array(g, dist, 3), build_array(g, dist, 4)
    assert np.array_equal(a.t_gnd, b.t_gnd) and np.array_equal(a.anti, b.anti)
    assert not np.array_equal(a.t_gnd, c.t_gnd)
    assert np.all(a.t_gnd <= a.t_half) and np.all(a.t_half <= a.t_vdd)
    assert 0.3 < a.anti.mean() < 0.7
    # log-normal median
    assert np.median(a.rh_threshold) == pytest.approx(100.0, rel=0.1)


def test_init_region_resets_state():
    arr = build_array(DramGeometry(1, 2, 4, 8))
    arr.damage[:] = 0.5
    arr.flipped_at[:] = 1.0
    init_region(arr, range(2), 0xFF)
    assert np.all(arr.bits[0, :2] == 1)
    assert np.all(arr.damage[0, :2] == 0) and np.all(np.isnan(arr.flipped_at[0, :2]))
    assert np.all(arr.damage[0, 2:] == 0.5)
    with pytest.raises(InputError):
        init_region(arr, [99], 0)


def test_init_aggressor_victims_negates():
    arr = build_array(DramGeometry(1, 2, 4, 8))
    init_aggressor_victims(arr, [1], 0x00)
    assert np.all(arr.bits[0, 1] == 0)
    assert np.all(arr.bits[0, [0, 2, 3, 4]] == 1)


def test_charged_respects_anti_cells():
    arr = build_array(DramGeometry(1, 1, 2, 2))
    arr.anti[0, 0, 0] = True
    init_region(arr, range(2), 0xFF)
    assert not arr.charged()[0, 0, 0]
    assert arr.charged()[0, 0, 1]


def test_copy_is_independent():
    arr = build_array(DramGeometry(1, 1, 2, 2))
    cp = arr.copy()
    cp.bits[:] = 1
    cp.t_gnd[:] = 7
    assert arr.bits.sum() == 0 and not np.any(arr.t_gnd == 7)


def test_constant_distribution_and_large_determinism():
    g = DramGeometry(1, 3, 1024, 8)
    dist = ProfileDistribution(t_flip_gnd=AnchorDist(0.1))
    a, b = build_array(g, dist, 7), build_array(g, dist, 7)
    assert np.all(a.t_gnd == 0.1)
    for name in ("t_gnd", "t_half", "t_vdd", "rh_threshold", "anti", "hammer_discharge"):
        assert np.array_equal(getattr(a, name), getattr(b, name))
    with pytest.raises(ConfigurationError):
        DramGeometry(rows_per_subarray=0)
