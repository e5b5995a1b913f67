"""Binary linear codes for judging how well ECC handles multi-bit flips.

Codes are defined by a parity-check matrix H; row ``i`` of a column value
holds bit ``i`` of that column's syndrome.  Decoding is plain syndrome
decoding: a syndrome equal to some column flips that position, any other
nonzero syndrome is reported as detected-uncorrectable.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import InputError, ModeError

EXHAUSTIVE_CAP = 2_000_000
HISTOGRAM_TOP = 15  # last bin collects 15 or more flips


def _rref(m: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Reduced row echelon form over GF(2) and its pivot columns."""
    a = m.copy() % 2
    pivots: list[int] = []
    r = 0
    for c in range(a.shape[1]):
        if r == a.shape[0]:
            break
        hits = np.flatnonzero(a[r:, c])
        if not len(hits):
            continue
        p = r + int(hits[0])
        if p != r:
            a[[r, p]] = a[[p, r]]
        others = np.flatnonzero(a[:, c])
        others = others[others != r]
        a[others] ^= a[r]
        pivots.append(c)
        r += 1
    return a[:r], pivots


@dataclass(frozen=True)
class DecodeOutcome:
    kind: str                      # clean | corrected | miscorrected | detected-uncorrectable
    position: Optional[int] = None
    residual: Optional[int] = None  # bit errors left after decoding; None without a reference


@dataclass
class LinearCode:
    H: np.ndarray
    name: str = "custom"
    n: int = field(init=False)
    k: int = field(init=False)

    def __post_init__(self):
        H = np.asarray(self.H, dtype=np.uint8)
        if H.ndim != 2 or not H.size or np.any(H > 1):
            raise InputError("H must be a nonempty 0/1 matrix")
        self.H = H
        self.n = H.shape[1]
        reduced, pivots = _rref(H)
        if not len(pivots):
            raise InputError("H has rank 0")
        self.k = self.n - len(pivots)
        self._reduced = reduced
        self._parity_pos = np.asarray(pivots)
        self._data_pos = np.asarray([c for c in range(self.n) if c not in set(pivots)], dtype=np.int64)
        weights = 1 << np.arange(H.shape[0], dtype=object)
        self.column_syndromes = [int(sum(int(b) * int(w) for b, w in zip(col, weights))) for col in H.T]
        self._lookup: dict[int, int] = {}
        for j, s in enumerate(self.column_syndromes):
            self._lookup.setdefault(s, j)

    @property
    def r(self) -> int:
        return self.n - self.k

    @property
    def corrects_single(self) -> bool:
        """Nonzero, pairwise distinct columns."""
        syn = self.column_syndromes
        return 0 not in syn and len(set(syn)) == len(syn)

    # ------------------------------------------------------------ encoding
    def encode(self, data) -> np.ndarray:
        d = np.asarray(data, dtype=np.uint8)
        if d.shape != (self.k,):
            raise InputError(f"expected {self.k} data bits, got {d.size}")
        c = np.zeros(self.n, dtype=np.uint8)
        c[self._data_pos] = d
        c[self._parity_pos] = (self._reduced[:, self._data_pos].astype(np.int64) @ d) % 2
        return c

    def extract(self, codeword) -> np.ndarray:
        return np.asarray(codeword, dtype=np.uint8)[self._data_pos]

    def syndrome(self, word) -> int:
        w = np.asarray(word, dtype=np.uint8)
        if w.shape != (self.n,):
            raise InputError(f"expected {self.n} codeword bits, got {w.size}")
        s = 0
        for j in np.flatnonzero(w):
            s ^= self.column_syndromes[j]
        return s

    def decode(self, received, reference=None) -> tuple[DecodeOutcome, np.ndarray]:
        """Syndrome-decode ``received``; ``reference`` (the sent codeword) enables residual counting."""
        word = np.asarray(received, dtype=np.uint8).copy()
        s = self.syndrome(word)
        pos = None
        if s == 0:
            kind = "clean"
        elif s in self._lookup:
            pos = self._lookup[s]
            word[pos] ^= 1
            kind = "corrected"
        else:
            kind = "detected-uncorrectable"
        residual = None
        if reference is not None:
            ref = np.asarray(reference, dtype=np.uint8)
            if ref.shape != word.shape:
                raise InputError("reference length mismatch")
            residual = int(np.sum(word != ref))
            if kind == "corrected" and residual > 0:
                kind = "miscorrected"
        return DecodeOutcome(kind, pos, residual), word


# ---------------------------------------------------------------- constructions
def _from_columns(values: Iterable[int], r: int) -> np.ndarray:
    vals = list(values)
    return np.array([[(v >> i) & 1 for v in vals] for i in range(r)], dtype=np.uint8)


def hamming74() -> LinearCode:
    return LinearCode(_from_columns(range(1, 8), 3), "hamming(7,4)")


def sec_136_128() -> LinearCode:
    """Columns are the first 136 nonzero 8-bit values in ascending order."""
    return LinearCode(_from_columns(range(1, 137), 8), "sec(136,128)")


def secded_72_64() -> LinearCode:
    """Shortened Hamming (71,64) on columns 1..71 plus an all-ones overall-parity row."""
    main = _from_columns(range(1, 72), 7)
    main = np.hstack([main, np.zeros((7, 1), np.uint8)])
    return LinearCode(np.vstack([main, np.ones((1, 72), np.uint8)]), "secded(72,64)")


CONSTRUCTIONS = {"hamming(7,4)": hamming74, "secded(72,64)": secded_72_64, "sec(136,128)": sec_136_128}


def load_matrix(path: str | Path, name: str | None = None) -> LinearCode:
    """H from a text file: one row of 0/1 characters per line; '#' starts a comment."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip().replace(" ", "")
        if not line:
            continue
        if set(line) - {"0", "1"}:
            raise InputError(f"{path}:{lineno}: only 0 and 1 allowed")
        rows.append([int(ch) for ch in line])
    if not rows or len({len(r) for r in rows}) != 1:
        raise InputError(f"{path}: rows must be nonempty and equally long")
    return LinearCode(np.array(rows, dtype=np.uint8), name or Path(path).stem)


def get_code(spec: str) -> LinearCode:
    if spec in CONSTRUCTIONS:
        return CONSTRUCTIONS[spec]()
    if spec.startswith("file:"):
        return load_matrix(spec[5:])
    raise InputError(f"unknown code {spec!r}")


def overhead(code: LinearCode) -> float:
    return (code.n - code.k) / code.k


# ---------------------------------------------------------------- miscorrection
def _classify(code: LinearCode, errors: np.ndarray) -> np.ndarray:
    """Outcome per error pattern (rows of positions) against the all-zero codeword.

    Codes are linear, so the outcome does not depend on the data.
    0 clean, 1 corrected, 2 miscorrected, 3 detected-uncorrectable.
    """
    syn_col = np.asarray(code.column_syndromes, dtype=object if code.r > 62 else np.int64)
    s = np.bitwise_xor.reduce(syn_col[errors], axis=1) if errors.shape[1] else np.zeros(len(errors), np.int64)
    lookup = code._lookup
    pos = np.array([lookup.get(int(v), -1) for v in s], dtype=np.int64)
    w = errors.shape[1]
    in_set = (errors == pos[:, None]).any(axis=1) if w else np.zeros(len(errors), bool)
    residual = np.where(in_set, w - 1, w + 1)
    out = np.full(len(errors), 3, dtype=np.int8)
    out[(pos >= 0) & (residual == 0)] = 1
    out[(pos >= 0) & (residual > 0)] = 2
    out[np.array([int(v) == 0 for v in s], dtype=bool)] = 0
    return out


@dataclass(frozen=True)
class MiscorrectionResult:
    code: str
    weight: int
    mode: str
    patterns: int
    miscorrected: int
    detected: int
    corrected: int
    clean: int
    seed: Optional[int] = None

    @property
    def rate(self) -> float:
        return self.miscorrected / self.patterns if self.patterns else 0.0

    @property
    def stderr(self) -> float:
        p = self.rate
        return math.sqrt(p * (1 - p) / self.patterns) if self.patterns else 0.0


def miscorrection_rate(code: LinearCode, weight: int, mode: str = "exhaustive", trials: int = 10_000,
                       seed: int = 0, cap: int = EXHAUSTIVE_CAP) -> MiscorrectionResult:
    """Fraction of weight-``weight`` error patterns the decoder turns into a wrong 'correction'."""
    if not 0 <= weight <= code.n:
        raise InputError(f"weight must lie in [0, {code.n}]")
    if mode == "exhaustive":
        total = math.comb(code.n, weight)
        if total > cap:
            raise ModeError(f"C({code.n}, {weight}) = {total} patterns exceeds the cap of {cap}")
        errors = np.array(list(itertools.combinations(range(code.n), weight)), dtype=np.int64).reshape(total, weight)
        used_seed = None
    elif mode == "monte-carlo":
        if trials < 1:
            raise InputError("trials must be >= 1")
        rng = np.random.default_rng(seed)
        errors = np.argsort(rng.random((trials, code.n)), axis=1)[:, :weight]
        used_seed = seed
    else:
        raise ModeError(f"unknown mode {mode!r}")
    out = _classify(code, errors)
    counts = np.bincount(out, minlength=4)
    return MiscorrectionResult(code.name, weight, mode, len(errors), int(counts[2]), int(counts[3]),
                               int(counts[1]), int(counts[0]), used_seed)


# ---------------------------------------------------------------- histograms
@dataclass
class ChunkHistogram:
    chunk_bits: int
    counts: dict = field(default_factory=dict)  # flips per chunk (15 = 15 or more) -> chunks

    @property
    def chunks(self) -> int:
        return sum(self.counts.values())

    @property
    def beyond_correction(self) -> int:
        """Chunks a single-error-correcting code cannot repair (>= 2 flips)."""
        return sum(v for k, v in self.counts.items() if k >= 2)

    @property
    def beyond_secded(self) -> int:
        """Chunks SECDED can neither correct nor reliably detect (>= 3 flips)."""
        return sum(v for k, v in self.counts.items() if k >= 3)

    @property
    def max_bin(self) -> int:
        return max(self.counts, default=0)


def chunk_histogram(records, chunk_bits: int = 64) -> ChunkHistogram:
    """Distinct flipped cells per ``chunk_bits``-wide chunk of each row."""
    if chunk_bits < 1:
        raise InputError("chunk_bits must be >= 1")
    cells = {(r.bank, r.row, r.column) for r in records}
    per_chunk = Counter((b, row, col // chunk_bits) for b, row, col in cells)
    hist = Counter(min(v, HISTOGRAM_TOP) for v in per_chunk.values())
    return ChunkHistogram(chunk_bits, dict(sorted(hist.items())))
