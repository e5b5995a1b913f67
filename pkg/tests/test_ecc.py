import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from coldisturb.ecc import (
    LinearCode, chunk_histogram, get_code, hamming74, load_matrix, miscorrection_rate, overhead, sec_136_128,
    secded_72_64,
)
from coldisturb.engine import BitflipRecord, Cause
from coldisturb.errors import InputError, ModeError

CODES = [hamming74, sec_136_128, secded_72_64]


@pytest.mark.parametrize("make,n,k", [(hamming74, 7, 4), (sec_136_128, 136, 128), (secded_72_64, 72, 64)])
def test_dimensions_and_single_correction(make, n, k):
    code = make()
    assert (code.n, code.k) == (n, k)
    assert code.corrects_single


@pytest.mark.parametrize("make", CODES)
@given(data=st.data())
def test_encode_gives_codewords_and_corrects_single(make, data):
    code = make()
    bits = np.array(data.draw(st.lists(st.integers(0, 1), min_size=code.k, max_size=code.k)), np.uint8)
    cw = code.encode(bits)
    assert code.syndrome(cw) == 0
    assert np.array_equal(code.extract(cw), bits)
    pos = data.draw(st.integers(0, code.n - 1))
    bad = cw.copy()
    bad[pos] ^= 1
    out, fixed = code.decode(bad, reference=cw)
    assert out.kind == "corrected" and out.position == pos and out.residual == 0
    assert np.array_equal(fixed, cw)


def test_overheads():
    assert overhead(hamming74()) == 0.75
    assert overhead(secded_72_64()) == 0.125
    assert overhead(sec_136_128()) == 0.0625


def _brute_double(code):
    """Independent check: decode every weight-2 error on a random codeword with the generic decoder."""
    rng = np.random.default_rng(0)
    cw = code.encode(rng.integers(0, 2, code.k).astype(np.uint8))
    counts = {}
    for i, j in itertools.combinations(range(code.n), 2):
        w = cw.copy()
        w[i] ^= 1
        w[j] ^= 1
        kind = code.decode(w, reference=cw)[0].kind
        counts[kind] = counts.get(kind, 0) + 1
    return counts


@pytest.mark.parametrize("make", CODES)
def test_vectorized_classifier_matches_decoder(make):
    code = make()
    res = miscorrection_rate(code, 2)
    brute = _brute_double(code)
    assert res.patterns == math.comb(code.n, 2)
    assert res.miscorrected == brute.get("miscorrected", 0)
    assert res.detected == brute.get("detected-uncorrectable", 0)


def test_known_rates():
    assert miscorrection_rate(hamming74(), 2).rate == 1.0
    sec = miscorrection_rate(sec_136_128(), 2)
    assert (sec.patterns, sec.miscorrected) == (9180, 8109)
    ded = miscorrection_rate(secded_72_64(), 2)
    assert ded.detected == ded.patterns == 2556
    assert miscorrection_rate(secded_72_64(), 1).corrected == 72
    assert miscorrection_rate(hamming74(), 0).clean == 1


def test_monte_carlo_is_seeded():
    a = miscorrection_rate(sec_136_128(), 2, "monte-carlo", 2000, seed=5)
    b = miscorrection_rate(sec_136_128(), 2, "monte-carlo", 2000, seed=5)
    assert a == b and a.seed == 5
    assert a.stderr == pytest.approx(math.sqrt(a.rate * (1 - a.rate) / 2000))


def test_mode_errors():
    with pytest.raises(ModeError):
        miscorrection_rate(sec_136_128(), 5)
    with pytest.raises(ModeError):
        miscorrection_rate(hamming74(), 2, "guess")
    with pytest.raises(InputError):
        miscorrection_rate(hamming74(), 8)


def test_load_matrix_and_get_code(tmp_path):
    p = tmp_path / "h.txt"
    p.write_text("# hamming\n1010101\n0110011  # row 2\n0001111\n")
    code = get_code(f"file:{p}")
    assert (code.n, code.k) == (7, 4)
    assert miscorrection_rate(code, 2).rate == 1.0
    assert get_code("secded(72,64)").n == 72
    bad = tmp_path / "bad.txt"
    bad.write_text("102\n")
    with pytest.raises(InputError):
        load_matrix(bad)
    with pytest.raises(InputError):
        get_code("bch")
    with pytest.raises(InputError):
        LinearCode(np.zeros((2, 3)))


def test_chunk_histogram():
    recs = [BitflipRecord(0, 0, 0, c, 1.0, "1->0", Cause.COLUMN_DISTURB) for c in (0, 1, 2, 9, 70)]
    recs += [BitflipRecord(0, 0, 1, c, 1.0, "1->0", Cause.COLUMN_DISTURB) for c in range(64)]
    h = chunk_histogram(recs + recs[:2], 8)
    assert h.counts == {1: 2, 3: 1, 8: 8}
    assert h.beyond_correction == 9 and h.beyond_secded == 9 and h.max_bin == 8
    assert chunk_histogram(recs, 64).counts[15] == 1
    with pytest.raises(InputError):
        chunk_histogram(recs, 0)
